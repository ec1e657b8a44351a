//! Neural building blocks with hand-written reverse passes.

mod conv;
mod dense;
mod sequential;
mod upsample;

pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvCache};
pub use dense::{dense_backward, dense_forward, Dense, DenseCache};
pub use sequential::{Node, Sequential, SequentialCache};
pub use upsample::Upsample;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output `y = f(x)`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if y > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Elu => 1,
            Activation::Sigmoid => 2,
            Activation::Linear => 3,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Invalid(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient buffers matching one layer's weights and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &LayerParams) -> Self {
        ParamGrads {
            weights: vec![0.0; params.weights.len()],
            biases: vec![0.0; params.biases.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).for_each(|v| *v *= s);
    }

    pub fn clear(&mut self) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).for_each(|v| *v = 0.0);
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.is_finite())
    }
}

/// Trainable parameters of one layer together with their gradient
/// accumulators and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub weights: Tensor,
    pub biases: Tensor,
    pub grads: ParamGrads,
    m: ParamGrads,
    v: ParamGrads,
    step: u64,
}

impl LayerParams {
    pub fn new(name: impl Into<String>, weights: Tensor, biases: Tensor) -> Self {
        let zeros = ParamGrads {
            weights: vec![0.0; weights.len()],
            biases: vec![0.0; biases.len()],
        };
        LayerParams {
            name: name.into(),
            weights,
            biases,
            grads: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn zeros(name: impl Into<String>, weight_shape: &[usize], bias_len: usize) -> Self {
        Self::new(name, Tensor::zeros(weight_shape), Tensor::zeros(&[bias_len]))
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        name: impl Into<String>,
        weight_shape: &[usize],
        bias_len: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = weight_shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        let weights = Tensor::new(weight_shape, data).expect("glorot shape");
        Self::new(name, weights, Tensor::zeros(&[bias_len]))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// zeroed afterwards.
pub fn adam_step(params: &mut LayerParams, cfg: &AdamConfig) -> Result<()> {
    if !params.grads.is_finite() {
        return Err(Error::NonFiniteGradient {
            layer: params.name.clone(),
        });
    }
    params.step += 1;
    let t = params.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let update = |w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..w.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    };
    update(
        params.weights.data_mut(),
        &params.grads.weights,
        &mut params.m.weights,
        &mut params.v.weights,
    );
    update(
        params.biases.data_mut(),
        &params.grads.biases,
        &mut params.m.biases,
        &mut params.v.biases,
    );
    params.zero_grad();
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub mae: f64,
}

impl LossReport {
    /// Sample-weighted mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        if reports.is_empty() {
            return LossReport::default();
        }
        let n = reports.len() as f64;
        LossReport {
            mse: reports.iter().map(|r| r.mse).sum::<f64>() / n,
            mae: reports.iter().map(|r| r.mae).sum::<f64>() / n,
        }
    }
}

pub fn loss_mse_mae(pred: &Tensor, target: &Tensor) -> Result<LossReport> {
    target.expect_shape("loss", pred.shape())?;
    Ok(mse_mae(pred.data(), target.data()))
}

pub(crate) fn mse_mae(pred: &[f64], target: &[f64]) -> LossReport {
    let n = pred.len().max(1) as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    LossReport {
        mse: se / n,
        mae: ae / n,
    }
}

/// Gradient of the mean squared error with respect to `pred`.
pub(crate) fn mse_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let scale = 2.0 / pred.len().max(1) as f64;
    pred.iter().zip(target).map(|(p, t)| scale * (p - t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations_match_closed_forms() {
        assert!((Activation::Elu.apply(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.5), 2.5);
        assert_eq!(Activation::Linear.apply(-7.0), -7.0);
        assert_eq!(Activation::Sigmoid.derivative_from_output(0.5), 0.25);
        for x in [-3.0, -0.2, 0.4, 2.0] {
            let h = 1e-6;
            for act in [Activation::Elu, Activation::Sigmoid] {
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let an = act.derivative_from_output(act.apply(x));
                assert!((fd - an).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn sigmoid_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn loss_examples() {
        let p = Tensor::vector(vec![1.0, 1.0]);
        let t = Tensor::vector(vec![0.0, 2.0]);
        let r = loss_mse_mae(&p, &t).unwrap();
        assert_eq!((r.mse, r.mae), (1.0, 1.0));
        let r = loss_mse_mae(&Tensor::vector(vec![2.0]), &Tensor::vector(vec![0.0])).unwrap();
        assert_eq!((r.mse, r.mae), (4.0, 2.0));
        let r = loss_mse_mae(&p, &p).unwrap();
        assert_eq!((r.mse, r.mae), (0.0, 0.0));
        assert!(loss_mse_mae(&p, &Tensor::vector(vec![1.0])).is_err());
    }

    fn scalar_param(w: f64) -> LayerParams {
        LayerParams::new(
            "scalar",
            Tensor::vector(vec![w]),
            Tensor::vector(vec![0.0]),
        )
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = scalar_param(0.3);
        adam_step(&mut p, &AdamConfig::default()).unwrap();
        assert_eq!(p.weights.data(), &[0.3]);
        assert_eq!(p.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_lr_over_one_plus_eps() {
        let mut p = scalar_param(0.0);
        p.grads.weights[0] = 1.0;
        adam_step(&mut p, &AdamConfig::default()).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.weights.data()[0] - expected).abs() < 1e-18);
        assert_eq!(p.grads.weights[0], 0.0);
    }

    #[test]
    fn adam_second_step_matches_scalar_oracle() {
        // scalar Adam, written out independently
        let (lr, b1, b2, eps) = (1e-3f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut deltas = vec![];
        for t in 1..=2 {
            let g = 0.5;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            let before = w;
            w -= lr * mh / (vh.sqrt() + eps);
            deltas.push(w - before);
        }
        let mut p = scalar_param(0.0);
        let mut seen = vec![];
        for _ in 0..2 {
            let before = p.weights.data()[0];
            p.grads.weights[0] = 0.5;
            adam_step(&mut p, &AdamConfig::default()).unwrap();
            seen.push(p.weights.data()[0] - before);
        }
        assert!((seen[1] - deltas[1]).abs() < 1e-18);
        assert!((p.weights.data()[0] - w).abs() < 1e-18);
    }

    #[test]
    fn adam_rejects_non_finite_and_names_layer() {
        let mut p = scalar_param(0.0);
        p.grads.biases[0] = f64::NAN;
        match adam_step(&mut p, &AdamConfig::default()) {
            Err(Error::NonFiniteGradient { layer }) => assert_eq!(layer, "scalar"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
