use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Analytical backward cost of one linear layer, exact BP against LBP-WHT.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub vanilla_bp: u64,
    pub projection: u64,
    pub lowrank_mm: u64,
    pub reverse_projection: u64,
    pub total_lbp: u64,
    pub overhead: u64,
    pub speedup: f64,
}

impl FlopReport {
    /// Overhead as a share of the exact backward cost.
    pub fn overhead_fraction(&self) -> f64 {
        self.overhead as f64 / self.vanilla_bp as f64
    }

    /// LBP-WHT cost as a share of the exact backward cost.
    pub fn lbp_fraction(&self) -> f64 {
        self.total_lbp as f64 / self.vanilla_bp as f64
    }
}

/// Per-phase counts for input channels `cx`, output channels `cy`, `len`
/// tokens and rank `r`:
///
/// | phase              | FLOPs              |
/// |--------------------|--------------------|
/// | vanilla BP         | `4 cx cy len`      |
/// | projection         | `(cx + cy) len r`  |
/// | low-rank MM        | `4 cx cy r`        |
/// | reverse projection | `cx len r`         |
pub fn flops_table1(cx: u64, cy: u64, len: u64, r: u64) -> Result<FlopReport> {
    if cx == 0 || cy == 0 || len == 0 || r == 0 {
        return Err(Error::Invalid(format!(
            "FLOP model needs positive sizes, got cx={cx} cy={cy} len={len} r={r}"
        )));
    }
    let vanilla_bp = 4 * cx * cy * len;
    let projection = (cx + cy) * len * r;
    let lowrank_mm = 4 * cx * cy * r;
    let reverse_projection = cx * len * r;
    let total_lbp = projection + lowrank_mm + reverse_projection;
    Ok(FlopReport {
        vanilla_bp,
        projection,
        lowrank_mm,
        reverse_projection,
        total_lbp,
        overhead: projection + reverse_projection,
        speedup: vanilla_bp as f64 / total_lbp as f64,
    })
}

/// Backward cost of a layer with a frozen base weight and rank-`r` adapters:
/// `g_x` through `w` plus the five adapter products.
pub fn lora_backward_flops(cx: u64, cy: u64, len: u64, r: u64) -> u64 {
    2 * cx * cy * len + 4 * len * cy * r + 6 * len * cx * r
}
