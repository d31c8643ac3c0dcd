use crate::error::{Error, Result};
use crate::lbp::{BpMode, Gradients, LinearLayer};
use crate::tensor::{Matrix, Rng};

use super::config::Activation;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

// tanh approximation
pub fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (SQRT_2_OVER_PI * (z + GELU_C * z * z * z)).tanh())
}

pub fn gelu_grad(z: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (z + GELU_C * z * z * z);
    let th = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * z * z);
    0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * d_inner
}

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(LinearLayer),
    Relu,
    Gelu,
}

impl Layer {
    fn activation(a: Activation) -> Self {
        match a {
            Activation::Relu => Layer::Relu,
            Activation::Gelu => Layer::Gelu,
        }
    }
}

/// Token-wise body over stacked `B * L` rows, mean pooling per sample, then a
/// linear classifier trained with softmax cross-entropy.
#[derive(Clone, Debug)]
pub struct Model {
    layers: Vec<Layer>,
    head: LinearLayer,
    tokens: usize,
    classes: usize,
    act_inputs: Vec<Option<Matrix>>,
}

/// Per linear layer (body order, then the classifier).
pub struct ModelGradients {
    pub layers: Vec<Gradients>,
}

pub(crate) fn init_weight(rng: &mut Rng, out: usize, inp: usize) -> Matrix {
    rng.normal_matrix(out, inp).scale(1.0 / (inp as f64).sqrt())
}

impl Model {
    /// `widths` are the body's output widths; `tokens` is `L`.
    pub fn new(
        channels: usize,
        widths: &[usize],
        classes: usize,
        tokens: usize,
        activation: Activation,
        rng: &Rng,
    ) -> Result<Self> {
        if channels == 0 || classes == 0 || tokens == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut inp = channels;
        for (k, &w) in widths.iter().enumerate() {
            let mut stream = rng.split(1 + k as u64);
            layers.push(Layer::Linear(LinearLayer::exact(init_weight(&mut stream, w, inp))));
            layers.push(Layer::activation(activation));
            inp = w;
        }
        let mut stream = rng.split(1 + widths.len() as u64);
        let head = LinearLayer::exact(init_weight(&mut stream, classes, inp));
        let act_inputs = vec![None; layers.len()];
        Ok(Self {
            layers,
            head,
            tokens,
            classes,
            act_inputs,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> &LinearLayer {
        &self.head
    }

    /// Body linear layers followed by the classifier.
    pub fn linears(&self) -> Vec<&LinearLayer> {
        let mut out: Vec<&LinearLayer> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Linear(lin) => Some(lin),
                _ => None,
            })
            .collect();
        out.push(&self.head);
        out
    }

    pub fn linears_mut(&mut self) -> Vec<&mut LinearLayer> {
        let mut out: Vec<&mut LinearLayer> = self
            .layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Linear(lin) => Some(lin),
                _ => None,
            })
            .collect();
        out.push(&mut self.head);
        out
    }

    pub fn body_linear_count(&self) -> usize {
        self.linears().len() - 1
    }

    pub fn set_body_mode(&mut self, k: usize, mode: BpMode) -> Result<()> {
        let count = self.body_linear_count();
        let layer = self
            .linears_mut()
            .into_iter()
            .nth(k)
            .filter(|_| k < count)
            .ok_or_else(|| Error::Config(format!("no body linear layer {k}")))?;
        layer.set_mode(mode)
    }

    fn check_input(&self, x: &Matrix) -> Result<usize> {
        if !x.rows().is_multiple_of(self.tokens) {
            return Err(Error::Invalid(format!(
                "{} rows is not a multiple of {} tokens",
                x.rows(),
                self.tokens
            )));
        }
        Ok(x.rows() / self.tokens)
    }

    fn pool(&self, h: &Matrix, batch: usize) -> Result<Matrix> {
        let width = h.cols();
        let mut out = Matrix::zeros(batch, width)?;
        let inv = 1.0 / self.tokens as f64;
        for b in 0..batch {
            let dst = out.row_mut(b);
            for t in 0..self.tokens {
                for (d, v) in dst.iter_mut().zip(h.row(b * self.tokens + t)) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        Ok(out)
    }

    /// Logits for a stacked batch, without caching.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let batch = self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Linear(l) => l.apply(&h)?,
                Layer::Relu => h.map(|v| v.max(0.0)),
                Layer::Gelu => h.map(gelu),
            };
        }
        self.head.apply(&self.pool(&h, batch)?)
    }

    /// Logits for a stacked batch, caching what the backward pass needs.
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let batch = self.check_input(x)?;
        let mut h = x.clone();
        for (k, layer) in self.layers.iter_mut().enumerate() {
            h = match layer {
                Layer::Linear(l) => l.forward(&h)?,
                Layer::Relu => {
                    let out = h.map(|v| v.max(0.0));
                    self.act_inputs[k] = Some(h);
                    out
                }
                Layer::Gelu => {
                    let out = h.map(gelu);
                    self.act_inputs[k] = Some(h);
                    out
                }
            };
        }
        let pooled = self.pool(&h, batch)?;
        self.head.forward(&pooled)
    }

    /// Backpropagates `g_logits` (`B x classes`) through every layer. `observe`
    /// sees each body linear layer's output gradient before its backward call.
    pub fn backward(
        &self,
        g_logits: &Matrix,
        mut observe: impl FnMut(usize, &Matrix) -> Result<()>,
    ) -> Result<ModelGradients> {
        let head_grads = self.head.backward(g_logits)?;
        let batch = g_logits.rows();
        let width = head_grads.g_x.cols();
        let inv = 1.0 / self.tokens as f64;
        let mut g = Matrix::from_fn(batch * self.tokens, width, |r, c| {
            head_grads.g_x.get(r / self.tokens, c) * inv
        })?;

        let mut grads = Vec::with_capacity(self.body_linear_count() + 1);
        let mut linear_idx = self.body_linear_count();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::Linear(l) => {
                    linear_idx -= 1;
                    observe(linear_idx, &g)?;
                    let lg = l.backward(&g)?;
                    g = lg.g_x.clone();
                    grads.push(lg);
                }
                Layer::Relu | Layer::Gelu => {
                    let z = self.act_inputs[k]
                        .as_ref()
                        .ok_or_else(|| Error::Backward("activation used before forward".into()))?;
                    let relu = matches!(layer, Layer::Relu);
                    for (gv, &zv) in g.data_mut().iter_mut().zip(z.data()) {
                        *gv *= if relu {
                            if zv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            gelu_grad(zv)
                        };
                    }
                }
            }
        }
        grads.reverse();
        grads.push(head_grads);
        Ok(ModelGradients { layers: grads })
    }

    /// Analytical backward FLOPs of the last forward batch, per linear layer.
    pub fn backward_flops(&self, batch: usize) -> Vec<u64> {
        let mut out: Vec<u64> = self
            .linears()
            .iter()
            .take(self.body_linear_count())
            .map(|l| l.backward_flops(batch * self.tokens))
            .collect();
        out.push(self.head.backward_flops(batch));
        out
    }
}

/// Mean softmax cross-entropy, gradient with respect to the logits, and the
/// number of correct argmax predictions.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix, usize)> {
    if logits.rows() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let b = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols())?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        if y >= row.len() {
            return Err(Error::Invalid(format!("label {y} out of range")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        if argmax(row) == y {
            correct += 1;
        }
        let g = grad.row_mut(r);
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - lse).exp() / b;
        }
        g[y] -= 1.0 / b;
    }
    Ok((loss / b, grad, correct))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lbp::relative_error;

    #[test]
    fn gelu_derivative_matches_differences() {
        for &z in &[-3.0, -1.0, -0.2, 0.0, 0.4, 1.5, 4.0] {
            let h = 1e-5;
            let fd = (gelu(z + h) - gelu(z - h)) / (2.0 * h);
            assert!((fd - gelu_grad(z)).abs() < 1e-8, "z={z}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Matrix::from_rows(&[vec![1.0, 2.0, 0.5], vec![0.0, -1.0, 3.0]]).unwrap();
        let labels = [1, 0];
        let (loss, grad, correct) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert_eq!(correct, 1);
        let h = 1e-6;
        for k in 0..6 {
            let mut p = logits.clone();
            p.data_mut()[k] += h;
            let mut m = logits.clone();
            m.data_mut()[k] -= h;
            let fd = (softmax_cross_entropy(&p, &labels).unwrap().0 - softmax_cross_entropy(&m, &labels).unwrap().0) / (2.0 * h);
            assert!((fd - grad.data()[k]).abs() < 1e-7);
        }
        assert!(loss > 0.0);
        // Large logits stay finite.
        let big = Matrix::from_rows(&[vec![1000.0, -1000.0]]).unwrap();
        assert!(softmax_cross_entropy(&big, &[1]).unwrap().0.is_finite());
    }

    // Whole-model input gradient against central differences of the loss.
    #[test]
    fn model_backward_matches_differences() {
        let rng = Rng::new(3);
        for act in [Activation::Gelu, Activation::Relu] {
            let mut model = Model::new(3, &[4, 5], 3, 6, act, &rng).unwrap();
            let mut data = rng.split(99);
            let x = data.normal_matrix(12, 3);
            let labels = [2, 0];
            let logits = model.forward(&x).unwrap();
            let (_, g, _) = softmax_cross_entropy(&logits, &labels).unwrap();
            let grads = model.backward(&g, |_, _| Ok(())).unwrap();
            let w0 = model.linears()[0].weight().clone();
            let loss_at = |w: &Matrix| {
                let mut m = model.clone();
                *m.linears_mut()[0].weight_mut() = w.clone();
                softmax_cross_entropy(&m.logits(&x).unwrap(), &labels).unwrap().0
            };
            let h = 1e-5;
            let mut fd = Matrix::zeros(w0.rows(), w0.cols()).unwrap();
            for k in 0..w0.data().len() {
                let mut p = w0.clone();
                p.data_mut()[k] += h;
                let mut m = w0.clone();
                m.data_mut()[k] -= h;
                fd.data_mut()[k] = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
            }
            let err = relative_error(&fd, grads.layers[0].g_w.as_ref().unwrap()).unwrap();
            assert!(err < 1e-5, "{act:?}: {err}");
        }
    }

    #[test]
    fn flops_per_layer() {
        let rng = Rng::new(1);
        let model = Model::new(4, &[8], 2, 10, Activation::Gelu, &rng).unwrap();
        assert_eq!(model.backward_flops(3), vec![4 * 4 * 8 * 30, 4 * 8 * 2 * 3]);
    }

    #[test]
    fn rejects_ragged_batch() {
        let rng = Rng::new(1);
        let model = Model::new(4, &[], 2, 10, Activation::Gelu, &rng).unwrap();
        assert!(model.logits(&Matrix::zeros(15, 4).unwrap()).is_err());
        assert_eq!(model.logits(&Matrix::zeros(20, 4).unwrap()).unwrap().shape(), (2, 2));
    }
}
