use crate::error::Result;
use crate::tensor::Matrix;

use super::config::OptimizerConfig;

/// Per-parameter optimizer state, addressed by a stable slot index.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
    steps: Vec<u64>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            first: Vec::new(),
            second: Vec::new(),
            steps: Vec::new(),
        }
    }

    fn ensure(&mut self, slot: usize) {
        if self.first.len() <= slot {
            self.first.resize(slot + 1, None);
            self.second.resize(slot + 1, None);
            self.steps.resize(slot + 1, 0);
        }
    }

    /// Applies one update to `param` using `grad`.
    pub fn step(&mut self, slot: usize, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        self.ensure(slot);
        if param.shape() != grad.shape() {
            return Err(crate::Error::Shape {
                op: "optimizer step",
                lhs: param.shape(),
                rhs: grad.shape(),
            });
        }
        let lr = self.lr;
        match self.config {
            OptimizerConfig::Sgd { momentum } => {
                let v = self.first[slot]
                    .get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()).unwrap());
                for ((p, vel), &g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                    *vel = momentum * *vel + g;
                    *p -= lr * *vel;
                }
            }
            OptimizerConfig::AdamLite { beta1, beta2, eps } => {
                self.steps[slot] += 1;
                let t = self.steps[slot] as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let m = self.first[slot]
                    .get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()).unwrap());
                let v = self.second[slot]
                    .get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()).unwrap());
                for (((p, mv), vv), &g) in param
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(grad.data())
                {
                    *mv = beta1 * *mv + (1.0 - beta1) * g;
                    *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                    *p -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_plain_step() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { momentum: 0.0 }, 0.5);
        let mut p = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let g = Matrix::from_vec(1, 2, vec![2.0, -2.0]).unwrap();
        opt.step(0, &mut p, &g).unwrap();
        assert_eq!(p.data(), &[0.0, 3.0]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { momentum: 0.5 }, 1.0);
        let mut p = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        opt.step(0, &mut p, &g).unwrap();
        opt.step(0, &mut p, &g).unwrap();
        assert_eq!(p.data(), &[-2.5]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), 1e-3);
        let mut p = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let g = Matrix::from_vec(1, 2, vec![10.0, -0.1]).unwrap();
        opt.step(3, &mut p, &g).unwrap();
        assert!((p.get(0, 0) + 1e-3).abs() < 1e-9);
        assert!((p.get(0, 1) - 1e-3).abs() < 1e-7);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), 0.05);
        let mut p = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        for _ in 0..500 {
            let g = p.scale(2.0);
            opt.step(0, &mut p, &g).unwrap();
        }
        assert!(p.get(0, 0).abs() < 0.05);
    }
}
