//! Single-layer LSTM that advances a latent vector one step from a window
//! of the `q` previous ones.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cae::{EpochReport, LatentState, TrainConfig, TrainingHistory};
use crate::dataset::SequenceSample;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::nn::{adam_step, mse_grad, mse_mae, sigmoid, Activation, AdamConfig, LayerParams, LossReport, ParamGrads};
use crate::persist::{self, Role, WeightRecord};
use crate::tensor::Tensor;

pub type LatentSample = SequenceSample<LatentState>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmArchitecture {
    pub latent_dim: usize,
    pub hidden: usize,
    pub lookback: usize,
    /// Activation of the output projection.
    pub activation: Activation,
    /// Predict the increment over the last window element instead of the
    /// next state itself.
    pub residual: bool,
}

impl Default for LstmArchitecture {
    fn default() -> Self {
        LstmArchitecture {
            latent_dim: 7,
            hidden: 30,
            lookback: 3,
            activation: Activation::Elu,
            residual: true,
        }
    }
}

impl LstmArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.lookback == 0 {
            return Err(Error::Invalid(
                "latent dim, hidden size and look-back must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn records(&self) -> Vec<(String, String)> {
        vec![
            ("model".into(), "lstm".into()),
            ("latent_dim".into(), self.latent_dim.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("lookback".into(), self.lookback.to_string()),
            ("activation".into(), self.activation.name().into()),
            ("residual".into(), self.residual.to_string()),
        ]
    }

    fn from_records(r: &[(String, String)]) -> Result<Self> {
        let kind: String = persist::record(r, "model")?;
        if kind != "lstm" {
            return Err(Error::Format(format!("expected an lstm model, found `{kind}`")));
        }
        let act: String = persist::record(r, "activation")?;
        Ok(LstmArchitecture {
            latent_dim: persist::record(r, "latent_dim")?,
            hidden: persist::record(r, "hidden")?,
            lookback: persist::record(r, "lookback")?,
            activation: Activation::from_name(&act).map_err(|e| Error::Format(e.to_string()))?,
            residual: persist::record(r, "residual")?,
        })
    }
}

/// Gate weights are stacked row-wise in the order forget, input, candidate,
/// output. Each gate row block is `[U | W]` acting on `[h; u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights {
    pub gates: LayerParams,
    pub projection: LayerParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            hidden: vec![0.0; hidden],
            cell: vec![0.0; hidden],
        }
    }
}

/// Gate activations of one step, kept for the reverse pass.
#[derive(Clone, Debug)]
struct StepCache {
    z: Vec<f64>,
    forget: Vec<f64>,
    input: Vec<f64>,
    candidate: Vec<f64>,
    output: Vec<f64>,
    cell_prev: Vec<f64>,
    cell: Vec<f64>,
}

impl LstmWeights {
    pub fn hidden(&self) -> usize {
        self.gates.biases.len() / 4
    }

    pub fn input_dim(&self) -> usize {
        self.gates.weights.shape()[1] - self.hidden()
    }

    fn step(&self, x: &[f64], state: &LstmState) -> (LstmState, StepCache) {
        let h = self.hidden();
        let width = x.len() + h;
        let mut z = Vec::with_capacity(width);
        z.extend_from_slice(x);
        z.extend_from_slice(&state.hidden);
        let w = self.gates.weights.data();
        let b = self.gates.biases.data();
        let pre = |row: usize| b[row] + dot(&w[row * width..(row + 1) * width], &z);
        let forget: Vec<f64> = (0..h).map(|j| sigmoid(pre(j))).collect();
        let input: Vec<f64> = (0..h).map(|j| sigmoid(pre(h + j))).collect();
        let candidate: Vec<f64> = (0..h).map(|j| pre(2 * h + j).tanh()).collect();
        let output: Vec<f64> = (0..h).map(|j| sigmoid(pre(3 * h + j))).collect();
        let cell: Vec<f64> = (0..h)
            .map(|j| forget[j] * state.cell[j] + input[j] * candidate[j])
            .collect();
        let hidden = (0..h).map(|j| cell[j].tanh() * output[j]).collect();
        let next = LstmState {
            hidden,
            cell: cell.clone(),
        };
        let cache = StepCache {
            z,
            forget,
            input,
            candidate,
            output,
            cell_prev: state.cell.clone(),
            cell,
        };
        (next, cache)
    }
}

/// One LSTM step.
pub fn lstm_cell(weights: &LstmWeights, input: &[f64], state: &LstmState) -> Result<LstmState> {
    let h = weights.hidden();
    if input.len() != weights.input_dim() {
        return Err(Error::shape("lstm input", &[weights.input_dim()], &[input.len()]));
    }
    if state.hidden.len() != h || state.cell.len() != h {
        return Err(Error::shape(
            "lstm state",
            &[h, h],
            &[state.hidden.len(), state.cell.len()],
        ));
    }
    Ok(weights.step(input, state).0)
}

/// Per-component affine map of latents onto [0, 1], fitted on training data.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl LatentScaler {
    pub fn identity(p: usize) -> Self {
        LatentScaler {
            min: vec![0.0; p],
            max: vec![1.0; p],
        }
    }

    pub fn fit<'a>(vectors: impl IntoIterator<Item = &'a LatentState>, p: usize) -> Self {
        let mut min = vec![f64::INFINITY; p];
        let mut max = vec![f64::NEG_INFINITY; p];
        for v in vectors {
            for k in 0..p {
                min[k] = min[k].min(v[k]);
                max[k] = max[k].max(v[k]);
            }
        }
        for k in 0..p {
            if !min[k].is_finite() || !max[k].is_finite() {
                min[k] = 0.0;
                max[k] = 1.0;
            } else if max[k] - min[k] < 1e-12 {
                max[k] = min[k] + 1.0;
            }
        }
        LatentScaler { min, max }
    }

    pub fn scale(&self, h: &[f64]) -> Vec<f64> {
        h.iter()
            .enumerate()
            .map(|(k, v)| (v - self.min[k]) / (self.max[k] - self.min[k]))
            .collect()
    }

    pub fn unscale(&self, h: &[f64]) -> Vec<f64> {
        h.iter()
            .enumerate()
            .map(|(k, v)| self.min[k] + v * (self.max[k] - self.min[k]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmModel {
    pub arch: LstmArchitecture,
    pub weights: LstmWeights,
    pub scaler: LatentScaler,
}

/// Gradients for the gate block and the projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmGrads {
    pub gates: ParamGrads,
    pub projection: ParamGrads,
}

impl LstmModel {
    /// Glorot weights, forget-gate bias 1, identity scaler.
    pub fn new(arch: &LstmArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (p, h) = (arch.latent_dim, arch.hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gates = LayerParams::glorot("lstm.gates", &[4 * h, p + h], 4 * h, p + h, 4 * h, &mut rng);
        gates.biases.data_mut()[..h].iter_mut().for_each(|b| *b = 1.0);
        let projection = LayerParams::glorot("lstm.projection", &[p, h], p, h, p, &mut rng);
        Ok(LstmModel {
            arch: arch.clone(),
            weights: LstmWeights { gates, projection },
            scaler: LatentScaler::identity(p),
        })
    }

    pub fn zeros(arch: &LstmArchitecture) -> Result<Self> {
        arch.validate()?;
        let (p, h) = (arch.latent_dim, arch.hidden);
        Ok(LstmModel {
            arch: arch.clone(),
            weights: LstmWeights {
                gates: LayerParams::zeros("lstm.gates", &[4 * h, p + h], 4 * h),
                projection: LayerParams::zeros("lstm.projection", &[p, h], p),
            },
            scaler: LatentScaler::identity(p),
        })
    }

    pub fn lookback(&self) -> usize {
        self.arch.lookback
    }

    fn check_window(&self, window: &[LatentState]) -> Result<()> {
        if window.len() != self.arch.lookback {
            return Err(Error::Invalid(format!(
                "window has {} states, model look-back is {}",
                window.len(),
                self.arch.lookback
            )));
        }
        for h in window {
            if h.len() != self.arch.latent_dim {
                return Err(Error::shape("window state", &[self.arch.latent_dim], &[h.len()]));
            }
        }
        Ok(())
    }

    /// Runs the cell over the window from a zero state and projects the
    /// final hidden state.
    pub fn forecast(&self, window: &[LatentState]) -> Result<LatentState> {
        self.check_window(window)?;
        let scaled: Vec<Vec<f64>> = window.iter().map(|h| self.scaler.scale(h)).collect();
        let (out, _) = self.forward_scaled(&scaled);
        Ok(self.scaler.unscale(&out))
    }

    fn forward_scaled(&self, window: &[Vec<f64>]) -> (Vec<f64>, Vec<StepCache>) {
        let w = &self.weights;
        let mut state = LstmState::zeros(w.hidden());
        let mut caches = Vec::with_capacity(window.len());
        for x in window {
            let (next, cache) = w.step(x, &state);
            caches.push(cache);
            state = next;
        }
        let h = w.hidden();
        let pw = w.projection.weights.data();
        let last = window.last().expect("non-empty window");
        let out = w
            .projection
            .biases
            .data()
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let y = self
                    .arch
                    .activation
                    .apply(b + dot(&pw[k * h..(k + 1) * h], &state.hidden));
                if self.arch.residual {
                    last[k] + y
                } else {
                    y
                }
            })
            .collect();
        (out, caches)
    }

    /// Loss and parameter gradients of one sample, measured in the scaled
    /// space the network is trained in.
    pub fn sample_gradients(&self, sample: &LatentSample) -> Result<(LossReport, LstmGrads)> {
        self.check_window(&sample.inputs)?;
        let window: Vec<Vec<f64>> = sample.inputs.iter().map(|h| self.scaler.scale(h)).collect();
        let target = self.scaler.scale(&sample.target);
        let (out, caches) = self.forward_scaled(&window);
        let loss = mse_mae(&out, &target);
        let dy = mse_grad(&out, &target);
        Ok((loss, self.backward(&window, &caches, &out, &dy)))
    }

    fn backward(&self, window: &[Vec<f64>], caches: &[StepCache], out: &[f64], dy: &[f64]) -> LstmGrads {
        let w = &self.weights;
        let (h, p) = (w.hidden(), self.arch.latent_dim);
        let width = p + h;
        let mut gg = ParamGrads::zeros_like(&w.gates);
        let mut pg = ParamGrads::zeros_like(&w.projection);

        let last = caches.last().expect("non-empty window");
        let u_last: Vec<f64> = (0..h).map(|j| last.cell[j].tanh() * last.output[j]).collect();
        let pw = w.projection.weights.data();
        let mut du = vec![0.0; h];
        for k in 0..p {
            let act_out = if self.arch.residual {
                out[k] - window.last().unwrap()[k]
            } else {
                out[k]
            };
            let d = dy[k] * self.arch.activation.derivative_from_output(act_out);
            pg.biases[k] += d;
            for j in 0..h {
                pg.weights[k * h + j] += d * u_last[j];
                du[j] += d * pw[k * h + j];
            }
        }

        let gw = w.gates.weights.data();
        let mut ds = vec![0.0; h];
        let mut da = vec![0.0; 4 * h];
        for c in caches.iter().rev() {
            for j in 0..h {
                let tc = c.cell[j].tanh();
                let d_out = du[j] * tc;
                ds[j] += du[j] * c.output[j] * (1.0 - tc * tc);
                let d_forget = ds[j] * c.cell_prev[j];
                let d_input = ds[j] * c.candidate[j];
                let d_cand = ds[j] * c.input[j];
                da[j] = d_forget * c.forget[j] * (1.0 - c.forget[j]);
                da[h + j] = d_input * c.input[j] * (1.0 - c.input[j]);
                da[2 * h + j] = d_cand * (1.0 - c.candidate[j] * c.candidate[j]);
                da[3 * h + j] = d_out * c.output[j] * (1.0 - c.output[j]);
                ds[j] *= c.forget[j];
            }
            du.iter_mut().for_each(|v| *v = 0.0);
            for (row, &d) in da.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gg.biases[row] += d;
                let wr = &gw[row * width..(row + 1) * width];
                let gr = &mut gg.weights[row * width..(row + 1) * width];
                for i in 0..width {
                    gr[i] += d * c.z[i];
                }
                for j in 0..h {
                    du[j] += d * wr[p + j];
                }
            }
        }
        LstmGrads {
            gates: gg,
            projection: pg,
        }
    }

    /// Mean forecast error over samples, in latent units.
    pub fn evaluate(&self, samples: &[LatentSample]) -> Result<LossReport> {
        let reports = samples
            .iter()
            .map(|s| Ok(mse_mae(&self.forecast(&s.inputs)?, &s.target)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LossReport::mean(&reports))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let w = &self.weights;
        let p = self.arch.latent_dim;
        let records = [
            WeightRecord {
                role: Role::LstmGates,
                weights: w.gates.weights.clone(),
                biases: w.gates.biases.clone(),
            },
            WeightRecord {
                role: Role::Projection,
                weights: w.projection.weights.clone(),
                biases: w.projection.biases.clone(),
            },
            WeightRecord {
                role: Role::Scaler,
                weights: Tensor::new(&[p], self.scaler.min.clone())?,
                biases: Tensor::new(&[p], self.scaler.max.clone())?,
            },
        ];
        persist::write_weights(&mut out, &records)?;
        persist::write_records(&mut out, &self.arch.records())?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let records = persist::read_weights(&mut input)?;
        let arch = LstmArchitecture::from_records(&persist::read_records(&mut input)?)?;
        let mut model = LstmModel::zeros(&arch)?;
        let [gates, projection, scaler] = <[WeightRecord; 3]>::try_from(records)
            .map_err(|r| Error::Format(format!("expected 3 lstm records, found {}", r.len())))?;
        let expect = |rec: &WeightRecord, role: Role, like: &LayerParams| {
            if rec.role != role
                || rec.weights.shape() != like.weights.shape()
                || rec.biases.shape() != like.biases.shape()
            {
                return Err(Error::Format(format!(
                    "record for `{}` does not match the architecture",
                    like.name
                )));
            }
            Ok(())
        };
        expect(&gates, Role::LstmGates, &model.weights.gates)?;
        expect(&projection, Role::Projection, &model.weights.projection)?;
        if scaler.role != Role::Scaler || scaler.weights.len() != arch.latent_dim || scaler.biases.len() != arch.latent_dim {
            return Err(Error::Format("bad scaler record".into()));
        }
        model.weights.gates = LayerParams::new("lstm.gates", gates.weights, gates.biases);
        model.weights.projection = LayerParams::new("lstm.projection", projection.weights, projection.biases);
        model.scaler = LatentScaler {
            min: scaler.weights.into_data(),
            max: scaler.biases.into_data(),
        };
        Ok(model)
    }
}

/// MSE of predicting each target by the last element of its window.
pub fn persistence_baseline(samples: &[LatentSample]) -> LossReport {
    let reports: Vec<LossReport> = samples
        .iter()
        .filter_map(|s| s.inputs.last().map(|last| mse_mae(last, &s.target)))
        .collect();
    LossReport::mean(&reports)
}

/// Minibatch Adam with backpropagation through the window. The scaler is
/// fitted on the training samples first; reported losses are in latent
/// units.
pub fn train_lstm(
    arch: &LstmArchitecture,
    train: &[LatentSample],
    val: &[LatentSample],
    cfg: &TrainConfig,
) -> Result<(LstmModel, TrainingHistory)> {
    if train.is_empty() {
        return Err(Error::Invalid("no training sequences".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut model = LstmModel::new(arch, cfg.seed)?;
    for s in train.iter().chain(val) {
        model.check_window(&s.inputs)?;
        if s.target.len() != arch.latent_dim {
            return Err(Error::shape("sequence target", &[arch.latent_dim], &[s.target.len()]));
        }
    }
    model.scaler = LatentScaler::fit(
        train.iter().flat_map(|s| s.inputs.iter().chain(std::iter::once(&s.target))),
        arch.latent_dim,
    );
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let eval = |m: &LstmModel, s: &[LatentSample]| -> Result<LossReport> {
        if s.is_empty() {
            Ok(LossReport {
                mse: f64::NAN,
                mae: f64::NAN,
            })
        } else {
            m.evaluate(s)
        }
    };
    let mut history = TrainingHistory {
        initial_val: eval(&model, val)?,
        epochs: vec![],
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let mut gates = ParamGrads::zeros_like(&model.weights.gates);
            let mut proj = ParamGrads::zeros_like(&model.weights.projection);
            for &i in batch {
                let (_, g) = model.sample_gradients(&train[i])?;
                gates.add_assign(&g.gates);
                proj.add_assign(&g.projection);
            }
            let scale = 1.0 / batch.len() as f64;
            gates.scale(scale);
            proj.scale(scale);
            model.weights.gates.grads = gates;
            model.weights.projection.grads = proj;
            adam_step(&mut model.weights.gates, &adam)
                .and_then(|_| adam_step(&mut model.weights.projection, &adam))
                .map_err(|e| Error::Diverged {
                    epoch,
                    detail: e.to_string(),
                })?;
        }
        let train_loss = model.evaluate(train)?;
        if !train_loss.mse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "non-finite training loss in the lstm".into(),
            });
        }
        history.epochs.push(EpochReport {
            epoch,
            train: train_loss,
            val: eval(&model, val)?,
        });
    }
    Ok((model, history))
}
