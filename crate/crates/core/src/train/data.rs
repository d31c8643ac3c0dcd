//! Synthetic class-conditional token maps.
//!
//! Tokens sit on the same `n x n` grid the transform uses (`t = p * n + q`).
//! Each class owns a weak mean direction and one channel direction per spatial
//! pattern; the patterns are low-sequency 2D Walsh maps, so "smooth" means low
//! frequency in the transform's own sense. Samples mix these with random
//! amplitudes, then add class-independent nuisance on the same patterns and
//! white per-token noise. Both scale with `difficulty`, so `difficulty = 0` is
//! noise-free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};
use crate::wht::{walsh_row, WhtPlan};

/// Share of samples that go to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

// Spatial frequency pairs (a, b) of the smooth patterns, DC excluded.
const PATTERNS: [(usize, usize); 5] = [(0, 1), (1, 0), (0, 2), (1, 1), (2, 0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub tokens: usize,
    pub channels: usize,
    pub classes: usize,
    pub seed: u64,
    pub difficulty: f64,
    /// White-noise standard deviation per unit of difficulty.
    #[serde(default = "default_white_noise")]
    pub white_noise: f64,
}

fn default_white_noise() -> f64 {
    0.25
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            tokens: 49,
            channels: 32,
            classes: 4,
            seed: 1,
            difficulty: 2.0,
            white_noise: default_white_noise(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config("dataset needs at least 2 samples".into()));
        }
        if self.tokens == 0 || self.channels == 0 {
            return Err(Error::Config("tokens and channels must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least 2 classes are required".into()));
        }
        if !(self.white_noise.is_finite() && self.white_noise >= 0.0) {
            return Err(Error::Config(format!(
                "white_noise must be finite and non-negative, got {}",
                self.white_noise
            )));
        }
        if !(self.difficulty.is_finite() && self.difficulty >= 0.0) {
            return Err(Error::Config(format!(
                "difficulty must be finite and non-negative, got {}",
                self.difficulty
            )));
        }
        Ok(())
    }
}

/// Samples are `tokens x channels` maps with labels in `0..classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub tokens: usize,
    pub channels: usize,
    pub classes: usize,
    pub inputs: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the selected samples into one `(B * tokens) x channels` matrix.
    pub fn batch(&self, ids: &[usize]) -> Result<(Matrix, Vec<usize>)> {
        let parts: Vec<Matrix> = ids.iter().map(|&i| self.inputs[i].clone()).collect();
        let labels = ids.iter().map(|&i| self.labels[i]).collect();
        Ok((Matrix::vstack(&parts)?, labels))
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Every input value plus labels as little-endian bytes; equal datasets
    /// give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (x, &l) in self.inputs.iter().zip(&self.labels) {
            out.extend_from_slice(&(l as u64).to_le_bytes());
            for v in x.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

fn pattern(a: usize, b: usize, t: usize, rows: &[Vec<i8>]) -> f64 {
    let n = rows.len();
    f64::from(rows[a][t / n] * rows[b][t % n])
}

/// Builds the dataset and splits it into train and eval sets.
pub fn make_synthetic_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let (l, c, k) = (spec.tokens, spec.channels, spec.classes);
    let plan = WhtPlan::for_len(l)?;
    let n = plan.n();
    let rows: Vec<Vec<i8>> = (0..n).map(|s| walsh_row(s.min(n - 1), &plan)).collect();
    let root = Rng::new(spec.seed);

    let mut proto = root.split(1);
    let means: Vec<Vec<f64>> = (0..k).map(|_| proto.normal_vec(c)).collect();
    let dirs: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| PATTERNS.iter().map(|_| proto.normal_vec(c)).collect())
        .collect();
    let basis: Vec<Vec<f64>> = PATTERNS
        .iter()
        .map(|&(a, b)| (0..l).map(|t| pattern(a.min(n - 1), b.min(n - 1), t, &rows)).collect())
        .collect();

    let mut labels: Vec<usize> = (0..spec.n_samples).map(|s| s % k).collect();
    root.split(2).shuffle(&mut labels);

    let mut draw = root.split(3);
    let d = spec.difficulty;
    let mut inputs = Vec::with_capacity(spec.n_samples);
    for &label in &labels {
        let mean_amp = 0.3 * (0.75 + 0.5 * draw.uniform());
        let amps: Vec<f64> = PATTERNS
            .iter()
            .map(|_| {
                let sign = if draw.uniform() < 0.5 { -1.0 } else { 1.0 };
                sign * (0.75 + 0.5 * draw.uniform())
            })
            .collect();
        // Nuisance directions are drawn per sample so they cannot be projected out.
        let nuis: Vec<Vec<f64>> = PATTERNS.iter().map(|_| draw.normal_vec(c)).collect();
        let mut x = Matrix::zeros(l, c)?;
        for t in 0..l {
            let row = x.row_mut(t);
            for (ch, v) in row.iter_mut().enumerate() {
                let mut acc = mean_amp * means[label][ch];
                for m in 0..PATTERNS.len() {
                    acc += basis[m][t] * (amps[m] * dirs[label][m][ch] + d * nuis[m][ch]);
                }
                *v = acc;
            }
        }
        if d > 0.0 {
            let sigma = d * spec.white_noise;
            for v in x.data_mut() {
                *v += sigma * draw.normal();
            }
        }
        inputs.push(x);
    }

    let n_train = ((spec.n_samples as f64) * TRAIN_FRACTION).round() as usize;
    let n_train = n_train.clamp(1, spec.n_samples - 1);
    let eval_inputs = inputs.split_off(n_train);
    let eval_labels = labels.split_off(n_train);
    let make = |inputs, labels| Dataset {
        tokens: l,
        channels: c,
        classes: k,
        inputs,
        labels,
    };
    Ok((make(inputs, labels), make(eval_inputs, eval_labels)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_samples: 20,
            tokens: 10,
            channels: 3,
            classes: 2,
            seed,
            difficulty: 1.0,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let (a, b) = make_synthetic_dataset(&small(5)).unwrap();
        let (c, d) = make_synthetic_dataset(&small(5)).unwrap();
        assert_eq!(a.to_bytes(), c.to_bytes());
        assert_eq!(b.to_bytes(), d.to_bytes());
        let (e, _) = make_synthetic_dataset(&small(6)).unwrap();
        assert_ne!(a.to_bytes(), e.to_bytes());
    }

    #[test]
    fn balanced_labels() {
        let spec = DatasetSpec {
            n_samples: 4,
            classes: 2,
            ..small(1)
        };
        let (tr, ev) = make_synthetic_dataset(&spec).unwrap();
        let mut counts = tr.class_counts();
        for (c, e) in counts.iter_mut().zip(ev.class_counts()) {
            *c += e;
        }
        assert_eq!(counts, vec![2, 2]);
    }

    #[test]
    fn split_sizes_and_shapes() {
        let (tr, ev) = make_synthetic_dataset(&DatasetSpec::default()).unwrap();
        assert_eq!((tr.len(), ev.len()), (1600, 400));
        assert_eq!(tr.inputs[0].shape(), (49, 32));
        let (x, y) = tr.batch(&[0, 1, 2]).unwrap();
        assert_eq!(x.shape(), (147, 32));
        assert_eq!(y.len(), 3);
    }

    #[test]
    fn invalid_specs() {
        for bad in [
            DatasetSpec { n_samples: 1, ..small(1) },
            DatasetSpec { tokens: 0, ..small(1) },
            DatasetSpec { classes: 1, ..small(1) },
            DatasetSpec { difficulty: -1.0, ..small(1) },
            DatasetSpec { white_noise: f64::NAN, ..small(1) },
        ] {
            assert!(make_synthetic_dataset(&bad).is_err());
        }
    }
}
