use std::time::Instant;

use serde::Serialize;

use super::config::{ModeSpec, TrainConfig};
use super::data::{make_synthetic_dataset, Dataset};
use super::model::{argmax, init_weight, softmax_cross_entropy, Model};
use super::optim::Optimizer;
use crate::error::{Error, Result};
use crate::lbp::BpMode;
use crate::selection::{lhe_select_with_steps, EnergyProfile, Strategy};
use crate::tensor::{Matrix, Rng};
use crate::wht::WhtPlan;

const EVAL_CHUNK: usize = 256;
const SHUFFLE_STREAM: u64 = 10_000;
const LORA_STREAM: u64 = 1_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub cum_backward_flops: u64,
    pub cum_mflops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    /// Final backward mode of each linear layer.
    pub modes: Vec<String>,
    pub initial_eval_acc: f64,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    /// Analytical backward FLOPs summed over every linear layer.
    pub cum_backward_flops: u64,
    /// Same, restricted to layers whose weights are updated.
    pub cum_trained_flops: u64,
    /// Running value of `cum_backward_flops` after each step.
    #[serde(skip)]
    pub step_flops: Vec<u64>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn final_eval_acc(&self) -> f64 {
        self.epochs.last().map_or(self.initial_eval_acc, |e| e.eval_acc)
    }

    /// The log with the wall-clock field cleared, for run-to-run comparison.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,eval_acc,cum_mflops\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.eval_acc, e.cum_mflops
            ));
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "modes": self.modes,
            "epochs": self.epochs.len(),
            "steps": self.steps,
            "initial_eval_acc": self.initial_eval_acc,
            "final_train_loss": self.epochs.last().map(|e| e.train_loss),
            "final_train_acc": self.epochs.last().map(|e| e.train_acc),
            "final_eval_acc": self.final_eval_acc(),
            "cum_backward_flops": self.cum_backward_flops,
            "cum_trained_flops": self.cum_trained_flops,
            "cum_mflops": self.cum_backward_flops as f64 / 1e6,
            "wall_clock_secs": self.wall_clock_secs,
            "history": self.epochs,
        })
    }
}

/// Initializes the model and installs each body layer's backward mode. LHE
/// layers start exact; [`train`] switches them once profiling is done.
pub fn build_model(cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    let ds = &cfg.dataset;
    let root = Rng::new(cfg.seed);
    let mut model = Model::new(
        ds.channels,
        &cfg.model.hidden,
        ds.classes,
        ds.tokens,
        cfg.model.activation,
        &root,
    )?;
    let plan = WhtPlan::for_len(ds.tokens)?;
    for (k, mode) in cfg.body_modes().into_iter().enumerate() {
        let bp = match mode {
            ModeSpec::Exact | ModeSpec::LbpWht(Strategy::Lhe { .. }) => continue,
            ModeSpec::LbpWht(strategy) => BpMode::lbp_wht(strategy.select(plan.n())?, plan.clone())?,
            ModeSpec::Lora(rank) => {
                let lin = model.linears()[k];
                let (cy, cx) = lin.weight().shape();
                let mut stream = root.split(LORA_STREAM + k as u64);
                BpMode::Lora {
                    w_a: init_weight(&mut stream, rank, cx).transpose(),
                    w_b: Matrix::zeros(rank, cy)?,
                }
            }
        };
        model.set_body_mode(k, bp)?;
    }
    Ok(model)
}

struct LheState {
    profile: EnergyProfile,
    rank: usize,
    steps: usize,
}

/// Top-1 accuracy over `ds`. Does not modify the model.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let ids: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in ids.chunks(EVAL_CHUNK) {
        let (x, labels) = ds.batch(chunk)?;
        let logits = model.logits(&x)?;
        correct += labels
            .iter()
            .enumerate()
            .filter(|(r, &y)| argmax(logits.row(*r)) == y)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Runs `cfg.epochs` epochs of mini-batch training on `train_set`, evaluating
/// on `eval_set` after each epoch.
pub fn train(model: &mut Model, cfg: &TrainConfig, train_set: &Dataset, eval_set: &Dataset) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if train_set.tokens != model.tokens() || train_set.classes != model.classes() {
        return Err(Error::Config("dataset does not match model geometry".into()));
    }
    let started = Instant::now();
    let plan = WhtPlan::for_len(model.tokens())?;
    let mut lhe: Vec<Option<LheState>> = cfg
        .body_modes()
        .into_iter()
        .map(|m| match m {
            ModeSpec::LbpWht(Strategy::Lhe { rank, profile_steps }) => Some(LheState {
                profile: EnergyProfile::new(plan.n()),
                rank,
                steps: profile_steps,
            }),
            _ => None,
        })
        .collect();

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let root = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog {
        modes: vec![],
        initial_eval_acc: evaluate(model, eval_set)?,
        epochs: Vec::with_capacity(cfg.epochs),
        steps: 0,
        cum_backward_flops: 0,
        cum_trained_flops: 0,
        step_flops: Vec::new(),
        wall_clock_secs: 0.0,
    };

    for epoch in 1..=cfg.epochs {
        root.split(SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for ids in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(ids)?;
            let logits = model.forward(&x)?;
            let (loss, g_logits, hits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: log.steps + 1,
                    loss,
                });
            }
            loss_sum += loss * ids.len() as f64;
            correct += hits;

            let grads = model.backward(&g_logits, |k, g_y| match lhe.get_mut(k) {
                Some(Some(state)) if state.profile.steps_seen() < state.steps => {
                    state.profile.observe(g_y, &plan)
                }
                _ => Ok(()),
            })?;

            let flops = model.backward_flops(ids.len());
            for (k, f) in flops.iter().enumerate() {
                log.cum_backward_flops += f;
                if k >= cfg.frozen_prefix {
                    log.cum_trained_flops += f;
                }
            }
            log.step_flops.push(log.cum_backward_flops);

            for (k, (layer, g)) in model.linears_mut().into_iter().zip(&grads.layers).enumerate() {
                if k < cfg.frozen_prefix {
                    continue;
                }
                match layer.mode_mut() {
                    BpMode::Lora { w_a, w_b } => {
                        opt.step(2 * k, w_a, g.g_wa.as_ref().expect("LoRA gradient"))?;
                        opt.step(2 * k + 1, w_b, g.g_wb.as_ref().expect("LoRA gradient"))?;
                    }
                    _ => {
                        let g_w = g.g_w.as_ref().expect("weight gradient");
                        opt.step(2 * k, layer.weight_mut(), g_w)?;
                    }
                }
            }

            for (k, slot) in lhe.iter_mut().enumerate() {
                let ready = matches!(slot, Some(s) if s.profile.steps_seen() >= s.steps);
                if ready {
                    let state = slot.take().expect("checked above");
                    let bases = lhe_select_with_steps(&state.profile, state.rank, state.steps)?;
                    model.set_body_mode(k, BpMode::lbp_wht(bases, plan.clone())?)?;
                }
            }
            log.steps += 1;
        }

        let n = train_set.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            eval_acc: evaluate(model, eval_set)?,
            cum_backward_flops: log.cum_backward_flops,
            cum_mflops: log.cum_backward_flops as f64 / 1e6,
        });
    }
    log.modes = model.linears().iter().map(|l| l.mode().name()).collect();
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// Generates the configured dataset, builds the model and trains it.
pub fn run_experiment(cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    let (train_set, eval_set) = make_synthetic_dataset(&cfg.dataset)?;
    let mut model = build_model(cfg)?;
    let log = train(&mut model, cfg, &train_set, &eval_set)?;
    Ok((model, log))
}

/// Slopes `d(acc) / d(MFLOPs)` between consecutive `(mflops, acc)` points.
pub fn marginal_accuracy(points: &[(f64, f64)]) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::Invalid("marginal accuracy needs at least two points".into()));
    }
    points
        .windows(2)
        .map(|w| {
            let (f0, a0) = w[0];
            let (f1, a1) = w[1];
            if f1 == f0 {
                Err(Error::Invalid(format!("duplicate FLOP value {f0}")))
            } else if f1 < f0 {
                Err(Error::Invalid("points must be sorted by FLOPs".into()))
            } else {
                Ok((a1 - a0) / (f1 - f0))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub mode: String,
    pub rank: usize,
    pub final_eval_acc: f64,
    pub cum_mflops: f64,
    pub cum_trained_mflops: f64,
    /// Slope from the previous point; absent for the first.
    pub marginal: Option<f64>,
}

/// Trains one model per body mode, all other settings taken from `cfg`.
/// Points come back sorted by cumulative FLOPs.
pub fn mode_sweep(cfg: &TrainConfig, modes: &[ModeSpec]) -> Result<Vec<SweepPoint>> {
    let plan = WhtPlan::for_len(cfg.dataset.tokens)?;
    let mut points = Vec::with_capacity(modes.len());
    for &mode in modes {
        let run_cfg = TrainConfig {
            bp_mode: mode,
            layer_modes: None,
            ..cfg.clone()
        };
        let (_, log) = run_experiment(&run_cfg)?;
        let rank = match mode {
            ModeSpec::Exact => cfg.dataset.tokens,
            ModeSpec::LbpWht(s) => s.rank(plan.n()),
            ModeSpec::Lora(r) => r,
        };
        points.push(SweepPoint {
            mode: mode.to_string(),
            rank,
            final_eval_acc: log.final_eval_acc(),
            cum_mflops: log.cum_backward_flops as f64 / 1e6,
            cum_trained_mflops: log.cum_trained_flops as f64 / 1e6,
            marginal: None,
        });
    }
    points.sort_by(|a, b| a.cum_mflops.total_cmp(&b.cum_mflops));
    if points.len() >= 2 {
        let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.cum_mflops, p.final_eval_acc)).collect();
        if let Ok(slopes) = marginal_accuracy(&xy) {
            for (p, s) in points.iter_mut().skip(1).zip(slopes) {
                p.marginal = Some(s);
            }
        }
    }
    Ok(points)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("mode,rank,final_eval_acc,cum_mflops,cum_trained_mflops,marginal_acc_per_mflop\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.mode,
            p.rank,
            p.final_eval_acc,
            p.cum_mflops,
            p.cum_trained_mflops,
            p.marginal.map(|m| m.to_string()).unwrap_or_default()
        ));
    }
    out
}
