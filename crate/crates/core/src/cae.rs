//! Convolutional autoencoder: strided-conv encoder down to a dense latent
//! layer, and a mirrored decoder of nearest-neighbour upsampling followed by
//! convolutions, ending in a sigmoid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::kfold;
use crate::error::{Error, Result};
use crate::nn::{
    mse_grad, mse_mae, Activation, AdamConfig, Conv2d, Dense, LayerParams, LossReport, Node,
    ParamGrads, Sequential, Upsample,
};
use crate::persist::{self, Role, WeightRecord};
use crate::scene::Field;
use crate::stats::Summary;
use crate::tensor::Tensor;

pub type LatentState = Vec<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaeArchitecture {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    /// Stride-2 convolutions in the encoder; the decoder has one more.
    pub encoder_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub latent_dim: usize,
}

impl Default for CaeArchitecture {
    fn default() -> Self {
        CaeArchitecture {
            channels: 1,
            rows: 45,
            cols: 62,
            encoder_layers: 4,
            filters: 16,
            kernel: 3,
            activation: Activation::Relu,
            latent_dim: 7,
        }
    }
}

impl CaeArchitecture {
    pub fn decoder_layers(&self) -> usize {
        self.encoder_layers + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::Invalid("autoencoder input extents must be positive".into()));
        }
        if self.encoder_layers == 0 || self.filters == 0 || self.latent_dim == 0 {
            return Err(Error::Invalid(
                "encoder layers, filters and latent dim must be at least 1".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Invalid(format!(
                "kernel {} must be odd for same padding",
                self.kernel
            )));
        }
        if self.activation == Activation::Sigmoid {
            return Err(Error::Invalid(
                "sigmoid is reserved for the output layer".into(),
            ));
        }
        Ok(())
    }

    /// Spatial shapes from the input down to the bottleneck (length
    /// `encoder_layers + 1`). Each stride-2 layer with same padding maps
    /// `n` to `ceil(n / 2)`.
    pub fn spatial_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.rows, self.cols)];
        for _ in 0..self.encoder_layers {
            let (h, w) = *shapes.last().unwrap();
            shapes.push((h.div_ceil(2), w.div_ceil(2)));
        }
        shapes
    }

    fn records(&self) -> Vec<(String, String)> {
        vec![
            ("model".into(), "cae".into()),
            ("channels".into(), self.channels.to_string()),
            ("rows".into(), self.rows.to_string()),
            ("cols".into(), self.cols.to_string()),
            ("encoder_layers".into(), self.encoder_layers.to_string()),
            ("filters".into(), self.filters.to_string()),
            ("kernel".into(), self.kernel.to_string()),
            ("activation".into(), self.activation.name().into()),
            ("latent_dim".into(), self.latent_dim.to_string()),
        ]
    }

    fn from_records(r: &[(String, String)]) -> Result<Self> {
        let kind: String = persist::record(r, "model")?;
        if kind != "cae" {
            return Err(Error::Format(format!("expected a cae model, found `{kind}`")));
        }
        let act: String = persist::record(r, "activation")?;
        Ok(CaeArchitecture {
            channels: persist::record(r, "channels")?,
            rows: persist::record(r, "rows")?,
            cols: persist::record(r, "cols")?,
            encoder_layers: persist::record(r, "encoder_layers")?,
            filters: persist::record(r, "filters")?,
            kernel: persist::record(r, "kernel")?,
            activation: Activation::from_name(&act).map_err(|e| Error::Format(e.to_string()))?,
            latent_dim: persist::record(r, "latent_dim")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CaeModel {
    pub arch: CaeArchitecture,
    pub encoder: Sequential,
    pub decoder: Sequential,
}

enum Init<'a> {
    Zeros,
    Glorot(&'a mut ChaCha8Rng),
}

impl CaeModel {
    /// Glorot-initialized model.
    pub fn new(arch: &CaeArchitecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(arch, Init::Glorot(&mut rng))
    }

    /// All weights and biases zero.
    pub fn zeros(arch: &CaeArchitecture) -> Result<Self> {
        Self::build(arch, Init::Zeros)
    }

    fn build(arch: &CaeArchitecture, mut init: Init<'_>) -> Result<Self> {
        arch.validate()?;
        let mut make_conv = |conv: Conv2d, name: String| {
            let params = match &mut init {
                Init::Zeros => LayerParams::zeros(name, &conv.weight_shape(), conv.out_channels),
                Init::Glorot(rng) => conv.init_params(&name, *rng),
            };
            Node::Conv(conv, params)
        };
        let shapes = arch.spatial_shapes();
        let pad = arch.kernel / 2;
        let f = arch.filters;
        let mut enc = vec![];
        for i in 0..arch.encoder_layers {
            let conv = Conv2d {
                in_channels: if i == 0 { arch.channels } else { f },
                out_channels: f,
                kernel: arch.kernel,
                stride: 2,
                padding: pad,
                activation: arch.activation,
            };
            enc.push(make_conv(conv, format!("encoder.conv{i}")));
        }
        let (bh, bw) = *shapes.last().unwrap();
        let flat = f * bh * bw;

        let mut dec = vec![];
        let first_dec = Conv2d {
            in_channels: f,
            out_channels: f,
            kernel: arch.kernel,
            stride: 1,
            padding: pad,
            activation: arch.activation,
        };
        dec.push(make_conv(first_dec, "decoder.conv0".into()));
        for (i, &(h, w)) in shapes[..arch.encoder_layers].iter().rev().enumerate() {
            dec.push(Node::Upsample(Upsample { rows: h, cols: w }));
            let last = i + 1 == arch.encoder_layers;
            let conv = Conv2d {
                in_channels: f,
                out_channels: if last { arch.channels } else { f },
                kernel: arch.kernel,
                stride: 1,
                padding: pad,
                activation: if last { Activation::Sigmoid } else { arch.activation },
            };
            dec.push(make_conv(conv, format!("decoder.conv{}", i + 1)));
        }

        let to_latent = Dense {
            inputs: flat,
            outputs: arch.latent_dim,
            activation: Activation::Linear,
        };
        let from_latent = Dense {
            inputs: arch.latent_dim,
            outputs: flat,
            activation: arch.activation,
        };
        let (p_to, p_from) = match &mut init {
            Init::Zeros => (
                LayerParams::zeros("encoder.dense", &[arch.latent_dim, flat], arch.latent_dim),
                LayerParams::zeros("decoder.dense", &[flat, arch.latent_dim], flat),
            ),
            Init::Glorot(rng) => (
                to_latent.init_params("encoder.dense", *rng),
                from_latent.init_params("decoder.dense", *rng),
            ),
        };
        enc.push(Node::Reshape(vec![flat]));
        enc.push(Node::Dense(to_latent, p_to));
        let mut decoder = vec![Node::Dense(from_latent, p_from), Node::Reshape(vec![f, bh, bw])];
        decoder.extend(dec);

        Ok(CaeModel {
            arch: arch.clone(),
            encoder: Sequential::new(enc),
            decoder: Sequential::new(decoder),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.decoder.parameter_count()
    }

    fn check_field(&self, field: &Field) -> Result<()> {
        let a = &self.arch;
        if (field.channels(), field.rows(), field.cols()) != (a.channels, a.rows, a.cols) {
            return Err(Error::shape(
                "autoencoder input",
                &[a.channels, a.rows, a.cols],
                &[field.channels(), field.rows(), field.cols()],
            ));
        }
        Ok(())
    }

    pub fn encode(&self, field: &Field) -> Result<LatentState> {
        self.check_field(field)?;
        if field.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("autoencoder input must lie in [0, 1]".into()));
        }
        Ok(self.encoder.forward(&field.to_tensor())?.into_data())
    }

    pub fn decode(&self, h: &[f64]) -> Result<Field> {
        if h.len() != self.arch.latent_dim {
            return Err(Error::shape("latent state", &[self.arch.latent_dim], &[h.len()]));
        }
        let out = self.decoder.forward(&Tensor::vector(h.to_vec()))?;
        Field::from_tensor(&out)
    }

    pub fn reconstruct(&self, field: &Field) -> Result<Field> {
        self.decode(&self.encode(field)?)
    }

    /// Mean per-field MSE/MAE of reconstruction.
    pub fn evaluate(&self, fields: &[Field]) -> Result<LossReport> {
        let reports: Vec<LossReport> = fields
            .par_iter()
            .map(|f| {
                let rec = self.reconstruct(f)?;
                Ok(mse_mae(rec.values(), f.values()))
            })
            .collect::<Result<_>>()?;
        Ok(LossReport::mean(&reports))
    }

    /// Gradients of `<upstream, decode(encode(field))>` with respect to every
    /// parameter, encoder layers first.
    pub fn reconstruction_gradients(
        &self,
        field: &Field,
        upstream: &Tensor,
    ) -> Result<(Vec<ParamGrads>, Vec<ParamGrads>)> {
        self.check_field(field)?;
        let (latent, enc_cache) = self.encoder.forward_cached(&field.to_tensor())?;
        let (_, dec_cache) = self.decoder.forward_cached(&latent)?;
        let mut dg = self.decoder.zero_grads();
        let dlatent = self.decoder.backward(&dec_cache, upstream, &mut dg)?;
        let mut eg = self.encoder.zero_grads();
        self.encoder.backward(&enc_cache, &dlatent, &mut eg)?;
        Ok((eg, dg))
    }

    fn sample_gradients(&self, field: &Field) -> Result<(LossReport, Vec<ParamGrads>, Vec<ParamGrads>)> {
        let (latent, enc_cache) = self.encoder.forward_cached(&field.to_tensor())?;
        let (out, dec_cache) = self.decoder.forward_cached(&latent)?;
        let loss = mse_mae(out.data(), field.values());
        let upstream = Tensor::new(out.shape(), mse_grad(out.data(), field.values()))?;
        let mut dg = self.decoder.zero_grads();
        let dlatent = self.decoder.backward(&dec_cache, &upstream, &mut dg)?;
        let mut eg = self.encoder.zero_grads();
        self.encoder.backward(&enc_cache, &dlatent, &mut eg)?;
        Ok((loss, eg, dg))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let records: Vec<WeightRecord> = self
            .encoder
            .nodes
            .iter()
            .chain(&self.decoder.nodes)
            .filter_map(|n| match n {
                Node::Conv(_, p) => Some((Role::Conv, p)),
                Node::Dense(_, p) => Some((Role::Dense, p)),
                _ => None,
            })
            .map(|(role, p)| WeightRecord {
                role,
                weights: p.weights.clone(),
                biases: p.biases.clone(),
            })
            .collect();
        persist::write_weights(&mut w, &records)?;
        persist::write_records(&mut w, &self.arch.records())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let weights = persist::read_weights(&mut r)?;
        let arch = CaeArchitecture::from_records(&persist::read_records(&mut r)?)?;
        let mut model = CaeModel::zeros(&arch)?;
        let mut iter = weights.into_iter();
        for node in model.encoder.nodes.iter_mut().chain(model.decoder.nodes.iter_mut()) {
            let (role, params) = match node {
                Node::Conv(_, p) => (Role::Conv, p),
                Node::Dense(_, p) => (Role::Dense, p),
                _ => continue,
            };
            let rec = iter
                .next()
                .ok_or_else(|| Error::Format("fewer layers than the architecture needs".into()))?;
            if rec.role != role
                || rec.weights.shape() != params.weights.shape()
                || rec.biases.shape() != params.biases.shape()
            {
                return Err(Error::Format(format!(
                    "layer `{}` does not match the stored record",
                    params.name
                )));
            }
            *params = LayerParams::new(params.name.clone(), rec.weights, rec.biases);
        }
        if iter.next().is_some() {
            return Err(Error::Format("more layers than the architecture needs".into()));
        }
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch: 16,
            lr: 1e-3,
            seed: 17,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train: LossReport,
    pub val: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    /// Validation loss before any update.
    pub initial_val: LossReport,
    pub epochs: Vec<EpochReport>,
}

impl TrainingHistory {
    pub fn final_val(&self) -> LossReport {
        self.epochs.last().map_or(self.initial_val, |e| e.val)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "epoch,train_mse,train_mae,val_mse,val_mae")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e}",
                e.epoch, e.train.mse, e.train.mae, e.val.mse, e.val.mae
            )?;
        }
        Ok(())
    }
}

/// Minibatch Adam on per-field MSE. Batch gradients are summed in sample
/// order, so results do not depend on the thread count.
pub fn train_cae(
    arch: &CaeArchitecture,
    train: &[Field],
    val: &[Field],
    cfg: &TrainConfig,
) -> Result<(CaeModel, TrainingHistory)> {
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut model = CaeModel::new(arch, cfg.seed)?;
    for f in train.iter().chain(val) {
        model.check_field(f)?;
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut history = TrainingHistory {
        initial_val: evaluate_or_nan(&model, val)?,
        epochs: vec![],
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let n_enc = model.encoder.params().count();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.batch) {
            let per_sample: Vec<(LossReport, Vec<ParamGrads>, Vec<ParamGrads>)> = batch
                .par_iter()
                .map(|&i| model.sample_gradients(&train[i]))
                .collect::<Result<_>>()?;
            let mut enc = model.encoder.zero_grads();
            let mut dec = model.decoder.zero_grads();
            for (loss, eg, dg) in &per_sample {
                epoch_losses.push(*loss);
                enc.iter_mut().zip(eg).for_each(|(a, b)| a.add_assign(b));
                dec.iter_mut().zip(dg).for_each(|(a, b)| a.add_assign(b));
            }
            let scale = 1.0 / batch.len() as f64;
            let step = model
                .encoder
                .apply_gradients(&enc, scale, &adam)
                .and_then(|_| model.decoder.apply_gradients(&dec, scale, &adam));
            if let Err(e) = step {
                return Err(Error::Diverged {
                    epoch,
                    detail: e.to_string(),
                });
            }
        }
        let train_loss = LossReport::mean(&epoch_losses);
        if !train_loss.mse.is_finite() {
            let layer = model
                .encoder
                .params()
                .chain(model.decoder.params())
                .find(|p| !p.weights.is_finite() || !p.biases.is_finite())
                .map_or_else(|| "unknown".to_string(), |p| p.name.clone());
            return Err(Error::Diverged {
                epoch,
                detail: format!("non-finite training loss (first non-finite layer: {layer})"),
            });
        }
        let val_loss = evaluate_or_nan(&model, val)?;
        history.epochs.push(EpochReport {
            epoch,
            train: train_loss,
            val: val_loss,
        });
    }
    debug_assert_eq!(n_enc, model.encoder.params().count());
    Ok((model, history))
}

fn evaluate_or_nan(model: &CaeModel, fields: &[Field]) -> Result<LossReport> {
    if fields.is_empty() {
        return Ok(LossReport {
            mse: f64::NAN,
            mae: f64::NAN,
        });
    }
    model.evaluate(fields)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub mse: f64,
    pub mae: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub mse: Summary,
    pub mae: Summary,
    pub seconds: Summary,
}

impl CrossValidation {
    pub fn from_folds(folds: Vec<FoldResult>) -> Self {
        let pick = |f: fn(&FoldResult) -> f64| folds.iter().map(f).collect::<Vec<_>>();
        CrossValidation {
            mse: Summary::of(&pick(|f| f.mse)),
            mae: Summary::of(&pick(|f| f.mae)),
            seconds: Summary::of(&pick(|f| f.seconds)),
            folds,
        }
    }
}

/// k-fold cross validation, repeated `repeats` times with fresh shuffles.
/// Each fold trains on the remaining folds and reports holdout
/// reconstruction error and training wall time.
pub fn cross_validate(
    arch: &CaeArchitecture,
    data: &[Field],
    k: usize,
    repeats: usize,
    cfg: &TrainConfig,
) -> Result<CrossValidation> {
    if data.len() < k {
        return Err(Error::Invalid(format!(
            "{} fields cannot fill {k} folds",
            data.len()
        )));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut folds = vec![];
    for repeat in 0..repeats.max(1) {
        let partitions = kfold(&indices, k, cfg.seed.wrapping_add(repeat as u64))?;
        for (fold, (train_idx, hold_idx)) in partitions.into_iter().enumerate() {
            let train: Vec<Field> = train_idx.iter().map(|&i| data[i].clone()).collect();
            let hold: Vec<Field> = hold_idx.iter().map(|&i| data[i].clone()).collect();
            let fold_cfg = TrainConfig {
                seed: cfg
                    .seed
                    .wrapping_add(1000 * repeat as u64 + fold as u64 + 1),
                ..*cfg
            };
            let start = Instant::now();
            let (model, _) = train_cae(arch, &train, &[], &fold_cfg)
                .map_err(|e| e.in_stage(&format!("fold {fold} (repeat {repeat})")))?;
            let seconds = start.elapsed().as_secs_f64();
            let loss = model.evaluate(&hold)?;
            folds.push(FoldResult {
                repeat,
                fold,
                mse: loss.mse,
                mae: loss.mae,
                seconds,
            });
        }
    }
    Ok(CrossValidation::from_folds(folds))
}
