//! Backward engines for a linear layer `y = x * w^T`.
//!
//! [`BpMode::Exact`] computes `g_w = g_y^T x` and `g_x = g_y w`. [`BpMode::LbpWht`]
//! projects `x` and `g_y` onto the selected bases along the token axis, runs
//! both products at rank `r`, and maps `g_x` back; the weight gradient is
//! already full size and needs no reverse step. [`BpMode::Lora`] keeps `w`
//! frozen and trains a rank-`r` update `y += x * w_a * w_b`.
//!
//! Inputs may hold a batch of `B` samples stacked along the rows; LBP-WHT
//! projects every `L`-row block on its own and the weight gradient sums over
//! the batch.

mod flops;

pub use flops::{flops_table1, lora_backward_flops, FlopReport};

use crate::error::{Error, Result};
use crate::selection::BaseIndexSet;
use crate::tensor::Matrix;
use crate::wht::{self, WhtPlan};

#[derive(Clone, Debug)]
pub enum BpMode {
    Exact,
    LbpWht { bases: BaseIndexSet, plan: WhtPlan },
    /// `w_a` is `C_x x r`, `w_b` is `r x C_y`.
    Lora { w_a: Matrix, w_b: Matrix },
}

impl BpMode {
    pub fn lbp_wht(bases: BaseIndexSet, plan: WhtPlan) -> Result<Self> {
        if bases.n() != plan.n() {
            return Err(Error::Backward(format!(
                "base set of order {} used with a plan of order {}",
                bases.n(),
                plan.n()
            )));
        }
        if bases.rank() > plan.padded_len() {
            return Err(Error::Backward(format!(
                "rank {} exceeds {} available bases",
                bases.rank(),
                plan.padded_len()
            )));
        }
        Ok(BpMode::LbpWht { bases, plan })
    }

    pub fn name(&self) -> String {
        match self {
            BpMode::Exact => "exact".into(),
            BpMode::LbpWht { bases, .. } => format!("lbp_wht({})", bases.strategy()),
            BpMode::Lora { w_a, .. } => format!("lora({})", w_a.cols()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// `L x C_x` (or stacked batch rows).
    pub g_x: Matrix,
    /// `C_y x C_x`; absent when the base weight is frozen under LoRA.
    pub g_w: Option<Matrix>,
    pub g_wa: Option<Matrix>,
    pub g_wb: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    w: Matrix,
    mode: BpMode,
    cached_x: Option<Matrix>,
}

impl LinearLayer {
    pub fn new(w: Matrix, mode: BpMode) -> Result<Self> {
        if let BpMode::Lora { w_a, w_b } = &mode {
            let (cy, cx) = w.shape();
            if w_a.rows() != cx || w_b.cols() != cy || w_a.cols() != w_b.rows() {
                return Err(Error::Backward(format!(
                    "LoRA factors {:?} and {:?} do not fit weight {:?}",
                    w_a.shape(),
                    w_b.shape(),
                    w.shape()
                )));
            }
        }
        Ok(Self {
            w,
            mode,
            cached_x: None,
        })
    }

    pub fn exact(w: Matrix) -> Self {
        Self {
            w,
            mode: BpMode::Exact,
            cached_x: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.w.cols()
    }

    pub fn out_features(&self) -> usize {
        self.w.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.w
    }

    pub fn mode(&self) -> &BpMode {
        &self.mode
    }

    pub fn mode_mut(&mut self) -> &mut BpMode {
        &mut self.mode
    }

    pub fn set_mode(&mut self, mode: BpMode) -> Result<()> {
        let w = std::mem::replace(&mut self.w, Matrix::zeros(1, 1)?);
        let cached = self.cached_x.take();
        *self = LinearLayer::new(w, mode)?;
        self.cached_x = cached;
        Ok(())
    }

    pub fn cached_input(&self) -> Option<&Matrix> {
        self.cached_x.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.cached_x = None;
    }

    /// Computes `y` without touching the cache.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_features() {
            return Err(Error::Shape {
                op: "linear_forward",
                lhs: x.shape(),
                rhs: self.w.shape(),
            });
        }
        let mut y = x.matmul_t(&self.w)?;
        if let BpMode::Lora { w_a, w_b } = &self.mode {
            y.add_assign(&x.matmul(w_a)?.matmul(w_b)?)?;
        }
        Ok(y)
    }

    /// `y = x w^T` (plus `x w_a w_b` under LoRA); caches `x` for the backward pass.
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let y = self.apply(x)?;
        self.cached_x = Some(x.clone());
        Ok(y)
    }

    /// Backward pass using the layer's configured mode.
    pub fn backward(&self, g_y: &Matrix) -> Result<Gradients> {
        match &self.mode {
            BpMode::Exact => self.exact_backward(g_y),
            BpMode::LbpWht { .. } => self.lbp_wht_backward(g_y),
            BpMode::Lora { .. } => self.lora_backward(g_y),
        }
    }

    fn checked_input(&self, g_y: &Matrix) -> Result<&Matrix> {
        let x = self
            .cached_x
            .as_ref()
            .ok_or_else(|| Error::Backward("backward called before forward".into()))?;
        if g_y.rows() != x.rows() || g_y.cols() != self.out_features() {
            return Err(Error::Shape {
                op: "backward",
                lhs: g_y.shape(),
                rhs: (x.rows(), self.out_features()),
            });
        }
        Ok(x)
    }

    /// Full-size backward through the base weight, whatever the mode.
    pub fn exact_backward(&self, g_y: &Matrix) -> Result<Gradients> {
        let x = self.checked_input(g_y)?;
        Ok(Gradients {
            g_x: g_y.matmul(&self.w)?,
            g_w: Some(g_y.t_matmul(x)?),
            g_wa: None,
            g_wb: None,
        })
    }

    pub fn lbp_wht_backward(&self, g_y: &Matrix) -> Result<Gradients> {
        let BpMode::LbpWht { bases, plan } = &self.mode else {
            return Err(Error::Backward(format!(
                "lbp_wht_backward on a layer in {} mode",
                self.mode.name()
            )));
        };
        let x = self.checked_input(g_y)?;
        let len = plan.signal_len();
        if x.rows() % len != 0 {
            return Err(Error::Backward(format!(
                "{} rows is not a whole number of {len}-token maps",
                x.rows()
            )));
        }
        let idx = bases.indices();
        let batch = x.rows() / len;
        let (x_hat, gy_hat) = if batch == 1 {
            (wht::project(x, idx, plan)?, wht::project(g_y, idx, plan)?)
        } else {
            let mut xs = Vec::with_capacity(batch);
            let mut gs = Vec::with_capacity(batch);
            for b in 0..batch {
                xs.push(wht::project(&x.row_block(b * len, len)?, idx, plan)?);
                gs.push(wht::project(&g_y.row_block(b * len, len)?, idx, plan)?);
            }
            (Matrix::vstack(&xs)?, Matrix::vstack(&gs)?)
        };

        let g_w = gy_hat.t_matmul(&x_hat)?;
        let gx_hat = gy_hat.matmul(&self.w)?;

        let r = idx.len();
        let g_x = if batch == 1 {
            wht::reverse_project(&gx_hat, idx, plan)?
        } else {
            let parts = (0..batch)
                .map(|b| wht::reverse_project(&gx_hat.row_block(b * r, r)?, idx, plan))
                .collect::<Result<Vec<_>>>()?;
            Matrix::vstack(&parts)?
        };
        Ok(Gradients {
            g_x,
            g_w: Some(g_w),
            g_wa: None,
            g_wb: None,
        })
    }

    pub fn lora_backward(&self, g_y: &Matrix) -> Result<Gradients> {
        let BpMode::Lora { w_a, w_b } = &self.mode else {
            return Err(Error::Backward(format!(
                "lora_backward on a layer in {} mode",
                self.mode.name()
            )));
        };
        let x = self.checked_input(g_y)?;
        // t = g_y w_b^T (L x r)
        let t = g_y.matmul_t(w_b)?;
        let g_wa = x.t_matmul(&t)?;
        let g_wb = x.matmul(w_a)?.t_matmul(g_y)?;
        let mut g_x = g_y.matmul(&self.w)?;
        g_x.add_assign(&t.matmul_t(w_a)?)?;
        Ok(Gradients {
            g_x,
            g_w: None,
            g_wa: Some(g_wa),
            g_wb: Some(g_wb),
        })
    }

    /// Analytical cost of one backward call over `rows` cached rows.
    pub fn backward_flops(&self, rows: usize) -> u64 {
        let (cy, cx) = (self.out_features() as u64, self.in_features() as u64);
        match &self.mode {
            BpMode::Exact => 4 * cx * cy * rows as u64,
            BpMode::LbpWht { bases, plan } => {
                let len = plan.signal_len();
                let batch = (rows / len).max(1) as u64;
                flops_table1(cx, cy, len as u64, bases.rank() as u64)
                    .map(|f| f.total_lbp * batch)
                    .unwrap_or(0)
            }
            BpMode::Lora { w_a, .. } => lora_backward_flops(cx, cy, rows as u64, w_a.cols() as u64),
        }
    }
}

/// Relative Frobenius errors of an approximate against an exact backward pass.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct GradientError {
    pub err_gx: f64,
    pub err_gw: f64,
}

pub fn relative_error(exact: &Matrix, approx: &Matrix) -> Result<f64> {
    let diff = approx.sub(exact)?;
    Ok(diff.frobenius_norm() / exact.frobenius_norm().max(1e-30))
}

pub fn gradient_error(exact: &Gradients, approx: &Gradients) -> Result<GradientError> {
    let (Some(gw_exact), Some(gw_approx)) = (&exact.g_w, &approx.g_w) else {
        return Err(Error::Backward("gradient_error needs weight gradients on both sides".into()));
    };
    Ok(GradientError {
        err_gx: relative_error(&exact.g_x, &approx.g_x)?,
        err_gw: relative_error(gw_exact, gw_approx)?,
    })
}
