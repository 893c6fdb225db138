//! Feed-forward classifier with hand-written backpropagation.

mod checkpoint;
pub mod loss;
mod optim;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_model, read_model, save_model, write_model};
pub use loss::{
    balanced_loss, ce_loss_soft, mse_loss, reg_loss, reg_strength_weights, LossOutput, SoftLabel,
};
pub use optim::{sgd_step, LrSchedule, OptimizerState};

use crate::error::{invalid_arg, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{seeded, stream};

/// One affine layer. `weights` is `out x in`. Gradient buffers and momentum
/// velocities reuse this shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self {
            weights: Matrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weights.rows() == other.weights.rows()
            && self.weights.cols() == other.weights.cols()
            && self.bias.len() == other.bias.len()
    }
}

/// ReLU MLP: `layer_dims = [d, h_1, ..., C]`, identity on the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Per-layer inputs and pre-activations kept for the backward pass.
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    logits: Matrix,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }
}

impl Classifier {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| invalid_arg("classifier needs a layer"))?;
        let mut dims = vec![first.weights.cols()];
        for (k, layer) in layers.iter().enumerate() {
            if layer.weights.cols() != *dims.last().unwrap() || layer.bias.len() != layer.weights.rows() {
                return Err(invalid_arg(format!("layer {k} shape is inconsistent")));
            }
            dims.push(layer.weights.rows());
        }
        Ok(Self {
            layer_dims: dims,
            layers,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn zero_gradients(&self) -> Vec<Layer> {
        self.layers.iter().map(Layer::zeros_like).collect()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(batch)?.logits)
    }

    pub fn forward_cached(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(invalid_arg(format!(
                "batch width {} does not match input dim {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = affine(layer, &current);
            if k != last {
                out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(current);
            current = out;
        }
        Ok(ForwardCache {
            inputs,
            logits: current,
        })
    }

    /// Parameter gradients given the loss gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Vec<Layer>> {
        if grad_logits.rows() != cache.logits.rows() || grad_logits.cols() != cache.logits.cols() {
            return Err(invalid_arg("gradient shape does not match logits"));
        }
        let mut grads = self.zero_gradients();
        let mut delta = grad_logits.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &cache.inputs[k];
            let g = &mut grads[k];
            for b in 0..delta.rows() {
                let d = delta.row(b);
                let a = input.row(b);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    g.bias[o] += dv;
                    for (w, &av) in g.weights.row_mut(o).iter_mut().zip(a) {
                        *w += dv * av;
                    }
                }
            }
            if k == 0 {
                break;
            }
            // Inputs of layer k are ReLU outputs of layer k-1: a > 0 iff the unit was active.
            let mut prev = Matrix::zeros(delta.rows(), layer.weights.cols());
            for b in 0..delta.rows() {
                let d = delta.row(b);
                let a = input.row(b);
                let p = prev.row_mut(b);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    for (pv, &w) in p.iter_mut().zip(layer.weights.row(o)) {
                        *pv += dv * w;
                    }
                }
                for (pv, &av) in p.iter_mut().zip(a) {
                    if av <= 0.0 {
                        *pv = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(grads)
    }

    pub fn predict_proba(&self, batch: &Matrix) -> Result<Matrix> {
        let mut logits = self.forward(batch)?;
        for i in 0..logits.rows() {
            softmax_in_place(logits.row_mut(i));
        }
        Ok(logits)
    }

    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }
}

fn affine(layer: &Layer, input: &Matrix) -> Matrix {
    let out_dim = layer.weights.rows();
    let mut out = Matrix::zeros(input.rows(), out_dim);
    for b in 0..input.rows() {
        let x = input.row(b);
        let o = out.row_mut(b);
        for (j, ov) in o.iter_mut().enumerate() {
            let w = layer.weights.row(j);
            let mut acc = layer.bias[j];
            for (wv, xv) in w.iter().zip(x) {
                acc += wv * xv;
            }
            *ov = acc;
        }
    }
    out
}

/// Fan-in scaled uniform weights in `±sqrt(6 / fan_in)`, zero biases.
pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<Classifier> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(invalid_arg("layer_dims needs at least two positive entries"));
    }
    let mut rng = seeded(seed, stream::INIT);
    let layers = layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Layer {
                weights: Matrix::from_vec(fan_out, fan_in, data).expect("shape"),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Classifier::from_layers(layers)
}

/// Lowest index of the maximum; NaN never wins.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(invalid_arg("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("softmax input is not finite".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut m = init_model(&[3, 5, 4], 1).unwrap();
        for l in m.layers_mut() {
            l.weights.scale(0.0);
        }
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(m.forward(&x).unwrap().row(0), &[0.0; 4]);
    }

    #[test]
    fn identity_linear_layer() {
        let m = Classifier::from_layers(vec![Layer {
            weights: Matrix::identity(3),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let x = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(m.forward(&x).unwrap().row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn duplicated_rows_give_identical_logits() {
        let m = init_model(&[4, 8, 3], 7).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -1.0, 2.0, 0.5], vec![0.3, -1.0, 2.0, 0.5]]).unwrap();
        let out = m.forward(&x).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn width_mismatch_rejected() {
        let m = init_model(&[4, 3], 7).unwrap();
        assert!(m.forward(&Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[2.0; 4]).unwrap();
        assert!(u.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!((big[0] - 1.0).abs() < 1e-15 && big[1] >= 0.0);
        let s = softmax(&[2f64.ln(), 0.0, 0.0]).unwrap();
        for (a, b) in s.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_model(&[16, 64, 10], 3).unwrap();
        assert_eq!(a, init_model(&[16, 64, 10], 3).unwrap());
        for layer in a.layers() {
            assert!(layer.bias.iter().all(|&b| b == 0.0));
            let bound = (6.0 / layer.weights.cols() as f64).sqrt();
            assert!(layer.weights.as_slice().iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
