//! Command-line front end. Exit codes: 0 success, 2 usage or unreadable
//! input, 3 runtime failure (including training divergence).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::lbp::{flops_table1, gradient_error, BpMode, LinearLayer};
use crate::selection::{lhe_select, EnergyProfile, Strategy, DEFAULT_PROFILE_STEPS};
use crate::tensor::{load_tensor, save_tensor, Matrix, Rng};
use crate::train::{mode_sweep, run_experiment, sweep_csv, ModeSpec, TrainConfig};
use crate::wht::{self, build_flat_bases, BaseIndex, WhtPlan};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lbp-wht", version, about = "Low-rank backpropagation via the Walsh-Hadamard transform")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project a tensor onto selected WHT bases, or map coefficients back.
    Transform(TransformArgs),
    /// Dump every order-n base as a row of +-1 values.
    Bases(BasesArgs),
    /// Print the base index set chosen by a strategy as JSON.
    Select(SelectArgs),
    /// Analytical backward FLOPs of one linear layer.
    Flops(FlopsArgs),
    /// Exact vs LBP-WHT gradient error over a rank sweep on random layers.
    GradError(GradErrorArgs),
    /// Per-base WHT energy of a tensor as an n x n grid.
    Spectrum(SpectrumArgs),
    /// Train on the synthetic task described by a config file.
    Train(TrainArgs),
    /// Train once per LP_L1 parameter and report accuracy against FLOPs.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Bases to project onto.
    #[arg(long, default_value = "full")]
    pub strategy: Strategy,
    /// Transform order; defaults to the smallest that fits the signal.
    #[arg(long)]
    pub order: Option<usize>,
    /// Treat the input as coefficients and reconstruct a signal.
    #[arg(long, requires = "len")]
    pub inverse: bool,
    /// Signal length to reconstruct (with --inverse).
    #[arg(long)]
    pub len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BasesArgs {
    #[arg(long)]
    pub order: usize,
    /// Only emit the bases of this strategy, in its order.
    #[arg(long)]
    pub strategy: Option<Strategy>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub strategy: Strategy,
    #[arg(long)]
    pub order: usize,
    /// Gradient tensor whose energy drives an `lhe` selection.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Tokens per sample in the profile tensor; defaults to all rows.
    #[arg(long)]
    pub len: Option<usize>,
}

fn positive_u64() -> clap::builder::RangedU64ValueParser<u64> {
    clap::value_parser!(u64).range(1..)
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, value_parser = positive_u64())]
    pub cx: u64,
    #[arg(long, value_parser = positive_u64())]
    pub cy: u64,
    #[arg(long, value_parser = positive_u64())]
    pub len: u64,
    #[arg(long, value_parser = positive_u64())]
    pub rank: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SignalKind {
    /// I.i.d. normal entries.
    White,
    /// Mostly spanned by the ten lowest-sequency bases, plus 10% noise.
    Lowfreq,
}

#[derive(Debug, Args)]
pub struct GradErrorArgs {
    #[arg(long, value_parser = positive_u64())]
    pub cx: u64,
    #[arg(long, value_parser = positive_u64())]
    pub cy: u64,
    #[arg(long, value_parser = positive_u64())]
    pub len: u64,
    #[arg(long)]
    pub order: Option<usize>,
    /// Family (`lp_l1`, `lp_linf`, `lhe`) swept by --sweep, or a single strategy.
    #[arg(long)]
    pub strategy: String,
    /// Parameter values, as `a..b` (inclusive) or a comma list.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub instances: u64,
    #[arg(long, value_enum, default_value_t = SignalKind::White)]
    pub signal: SignalKind,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub order: Option<usize>,
    /// Tokens per sample; the input may stack several samples.
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for `train_log.csv` and `summary.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// LP_L1 parameters to train with.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub ranks: Vec<usize>,
    /// Also train an exact-backward baseline.
    #[arg(long)]
    pub with_exact: bool,
    /// Directory for `sweep.csv` and `sweep.json`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Maps a library error onto the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Config(_) | Error::Format(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Transform(a) => cmd_transform(&a),
        Command::Bases(a) => emit(cmd_bases(&a)?),
        Command::Select(a) => emit(cmd_select(&a)?),
        Command::Flops(a) => emit(cmd_flops(&a)?),
        Command::GradError(a) => emit(cmd_grad_error(&a)?),
        Command::Spectrum(a) => cmd_spectrum(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn emit(text: String) -> Result<()> {
    print!("{text}");
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn plan_for(order: Option<usize>, len: usize) -> Result<WhtPlan> {
    match order {
        Some(n) => WhtPlan::new(n, len),
        None => WhtPlan::for_len(len),
    }
}

fn to_json(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn cmd_transform(a: &TransformArgs) -> Result<()> {
    let x = load_tensor(&a.input)?;
    let out = if a.inverse {
        let len = a.len.expect("clap enforces --len");
        let plan = plan_for(a.order, len)?;
        let set = a.strategy.select(plan.n())?;
        wht::reverse_project(&x, set.indices(), &plan)?
    } else {
        let plan = plan_for(a.order, x.rows())?;
        let set = a.strategy.select(plan.n())?;
        wht::project(&x, set.indices(), &plan)?
    };
    save_tensor(&out, &a.output)
}

pub fn cmd_bases(a: &BasesArgs) -> Result<String> {
    let plan = WhtPlan::new(a.order, a.order * a.order)?;
    let all = build_flat_bases(&plan);
    let chosen: Vec<BaseIndex> = match a.strategy {
        Some(s) => s.select(plan.n())?.indices().to_vec(),
        None => all.iter().map(|b| b.index()).collect(),
    };
    let mut out = String::from("i,j");
    for t in 0..plan.padded_len() {
        write!(out, ",t{t}").unwrap();
    }
    out.push('\n');
    for b in chosen {
        let base = &all[b.i * plan.n() + b.j];
        write!(out, "{},{}", b.i, b.j).unwrap();
        for v in &base.values {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_select(a: &SelectArgs) -> Result<String> {
    let set = match (a.strategy, &a.profile) {
        (Strategy::Lhe { rank, .. }, Some(path)) => {
            let g = load_tensor(path)?;
            let plan = WhtPlan::new(a.order, a.len.unwrap_or(g.rows()))?;
            let mut profile = EnergyProfile::new(a.order);
            profile.observe(&g, &plan)?;
            lhe_select(&profile, rank)?
        }
        (Strategy::Lhe { .. }, None) => {
            return Err(Error::Config("lhe selection needs --profile".into()));
        }
        (_, Some(_)) => return Err(Error::Config("--profile only applies to lhe".into())),
        (s, None) => s.select(a.order)?,
    };
    Ok(to_json(&set))
}

pub fn cmd_flops(a: &FlopsArgs) -> Result<String> {
    let r = flops_table1(a.cx, a.cy, a.len, a.rank)?;
    if a.json {
        return Ok(to_json(&r));
    }
    let mf = |v: u64| v as f64 / 1e6;
    let mut out = String::new();
    writeln!(out, "{:<20}{:>16}{:>12}", "term", "flops", "MFLOPs").unwrap();
    for (name, v) in [
        ("vanilla_bp", r.vanilla_bp),
        ("projection", r.projection),
        ("lowrank_mm", r.lowrank_mm),
        ("reverse_projection", r.reverse_projection),
        ("total_lbp", r.total_lbp),
        ("overhead", r.overhead),
    ] {
        writeln!(out, "{name:<20}{v:>16}{:>12.1}", mf(v)).unwrap();
    }
    writeln!(out, "overhead_fraction   {:.4}", r.overhead_fraction()).unwrap();
    writeln!(out, "speedup             {:.2}x", r.speedup).unwrap();
    Ok(out)
}

fn parse_sweep(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad sweep '{text}'"));
    let values: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if values.is_empty() || values.contains(&0) {
        return Err(bad());
    }
    Ok(values)
}

fn sweep_strategies(family: &str, sweep: Option<&str>) -> Result<Vec<Strategy>> {
    let Some(sweep) = sweep else {
        return family
            .parse::<Strategy>()
            .map(|s| vec![s])
            .map_err(|_| Error::Config(format!("unknown strategy '{family}'")));
    };
    let values = parse_sweep(sweep)?;
    let make: fn(usize) -> Strategy = match family {
        "lp_l1" => Strategy::LpL1,
        "lp_linf" => Strategy::LpLinf,
        "lhe" => |rank| Strategy::Lhe {
            rank,
            profile_steps: DEFAULT_PROFILE_STEPS,
        },
        _ => return Err(Error::Config(format!("cannot sweep strategy family '{family}'"))),
    };
    Ok(values.into_iter().map(make).collect())
}

/// `len x c` matrix drawn either i.i.d. or mostly from the low-pass span.
pub fn synthetic_signal(kind: SignalKind, len: usize, c: usize, plan: &WhtPlan, rng: &mut Rng) -> Result<Matrix> {
    let noise = rng.normal_matrix(len, c);
    match kind {
        SignalKind::White => Ok(noise),
        SignalKind::Lowfreq => {
            let low = Strategy::LpL1(4).select(plan.n())?;
            let coeffs = rng.normal_matrix(low.rank(), c);
            let mut s = wht::reverse_project(&coeffs, low.indices(), plan)?;
            // Rescale so the noise carries ~10% of the signal's norm.
            let target = 0.1 * s.frobenius_norm() / noise.frobenius_norm().max(1e-300);
            s.add_assign(&noise.scale(target))?;
            Ok(s)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradErrorRow {
    pub strategy: Strategy,
    pub rank: usize,
    pub err_gx: f64,
    pub err_gw: f64,
    pub total_mflops: f64,
}

/// Mean relative errors of LBP-WHT against exact backward over seeded random
/// instances, one row per strategy.
pub fn grad_error_rows(a: &GradErrorArgs) -> Result<Vec<GradErrorRow>> {
    let (cx, cy, len) = (a.cx as usize, a.cy as usize, a.len as usize);
    let plan = plan_for(a.order, len)?;
    let strategies = sweep_strategies(&a.strategy, a.sweep.as_deref())?;
    let mut rows: Vec<GradErrorRow> = Vec::with_capacity(strategies.len());
    for s in &strategies {
        let r = s.rank(plan.n());
        if r == 0 || r > plan.padded_len() {
            return Err(Error::Config(format!("{s} has no valid rank at order {}", plan.n())));
        }
        rows.push(GradErrorRow {
            strategy: *s,
            rank: r,
            err_gx: 0.0,
            err_gw: 0.0,
            total_mflops: flops_table1(a.cx, a.cy, a.len, r as u64)?.total_lbp as f64 / 1e6,
        });
    }

    let root = Rng::new(a.seed);
    for inst in 0..a.instances {
        let mut rng = root.split(inst);
        let w = rng.normal_matrix(cy, cx);
        let x = synthetic_signal(a.signal, len, cx, &plan, &mut rng)?;
        let g_y = synthetic_signal(a.signal, len, cy, &plan, &mut rng)?;
        let mut layer = LinearLayer::exact(w);
        layer.forward(&x)?;
        let exact = layer.exact_backward(&g_y)?;
        let mut profile = EnergyProfile::new(plan.n());
        profile.observe(&g_y, &plan)?;
        for row in rows.iter_mut() {
            let bases = match row.strategy {
                Strategy::Lhe { rank, .. } => lhe_select(&profile, rank)?,
                s => s.select(plan.n())?,
            };
            layer.set_mode(BpMode::lbp_wht(bases, plan.clone())?)?;
            let e = gradient_error(&exact, &layer.backward(&g_y)?)?;
            row.err_gx += e.err_gx;
            row.err_gw += e.err_gw;
        }
    }
    for row in rows.iter_mut() {
        row.err_gx /= a.instances as f64;
        row.err_gw /= a.instances as f64;
    }
    Ok(rows)
}

pub fn cmd_grad_error(a: &GradErrorArgs) -> Result<String> {
    let mut out = String::from("rank,err_gx,err_gw,total_mflops\n");
    for r in grad_error_rows(a)? {
        writeln!(out, "{},{:e},{:e},{}", r.rank, r.err_gx, r.err_gw, r.total_mflops).unwrap();
    }
    Ok(out)
}

/// Energy per base of `x`, summed over channels and stacked samples.
pub fn spectrum_energy(x: &Matrix, order: Option<usize>, len: Option<usize>) -> Result<EnergyProfile> {
    let len = len.unwrap_or(x.rows());
    if len == 0 || !x.rows().is_multiple_of(len) {
        return Err(Error::Config(format!("{} rows is not a multiple of --len {len}", x.rows())));
    }
    let plan = match order {
        Some(n) if n * n < len => {
            return Err(Error::Config(format!(
                "order {n} holds {} tokens but the input has {len}",
                n * n
            )));
        }
        _ => plan_for(order, len)?,
    };
    let mut profile = EnergyProfile::new(plan.n());
    profile.observe(x, &plan)?;
    Ok(profile)
}

pub fn energy_csv(profile: &EnergyProfile) -> String {
    let n = profile.n();
    let mut out = String::from("i");
    for j in 0..n {
        write!(out, ",j{j}").unwrap();
    }
    out.push('\n');
    for i in 0..n {
        write!(out, "{i}").unwrap();
        for j in 0..n {
            write!(out, ",{:e}", profile.energy(BaseIndex::new(i, j))).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn cmd_spectrum(a: &SpectrumArgs) -> Result<()> {
    let x = load_tensor(&a.input)?;
    let profile = spectrum_energy(&x, a.order, a.len)?;
    write_file(&a.out, &energy_csv(&profile))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig::load(&a.config)?;
    let (_, log) = run_experiment(&cfg)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("train_log.csv"), &log.to_csv())?;
    write_file(&a.out.join("summary.json"), &to_json(&log.summary_json()))?;
    println!(
        "final eval accuracy {:.4}, {:.1} backward MFLOPs over {} steps",
        log.final_eval_acc(),
        log.cum_backward_flops as f64 / 1e6,
        log.steps
    );
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = TrainConfig::load(&a.config)?;
    if a.ranks.is_empty() || a.ranks.contains(&0) {
        return Err(Error::Config("--ranks must be positive".into()));
    }
    let mut modes: Vec<ModeSpec> = a.ranks.iter().map(|&k| ModeSpec::LbpWht(Strategy::LpL1(k))).collect();
    if a.with_exact {
        modes.push(ModeSpec::Exact);
    }
    let points = mode_sweep(&cfg, &modes)?;
    create_dir(&a.out)?;
    let csv = sweep_csv(&points);
    write_file(&a.out.join("sweep.csv"), &csv)?;
    write_file(&a.out.join("sweep.json"), &to_json(&points))?;
    print!("{csv}");
    Ok(())
}
