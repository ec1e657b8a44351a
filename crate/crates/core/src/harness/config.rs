use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assimilate::{AssimConfig, RMode};
use crate::cae::{CaeArchitecture, TrainConfig};
use crate::dataset::split;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::scene::{SceneConfig, SensorSet, Simulator};
use crate::surrogate::LstmArchitecture;

/// Everything one experiment needs, read from a TOML file. Every section
/// and key is optional; missing values take the desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scene: SceneConfig,
    pub sensors: SensorConfig,
    pub observations: ObservationConfig,
    pub split: SplitConfig,
    pub cae: CaeSection,
    pub lstm: LstmSection,
    pub assimilation: AssimSection,
    pub sweep: SweepSection,
    pub gridsearch: GridSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2020,
            out_dir: PathBuf::from("runs/default"),
            scene: SceneConfig::default(),
            sensors: SensorConfig::default(),
            observations: ObservationConfig::default(),
            split: SplitConfig::default(),
            cae: CaeSection::default(),
            lstm: LstmSection::default(),
            assimilation: AssimSection::default(),
            sweep: SweepSection::default(),
            gridsearch: GridSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// `(row, col)` pairs; defaults to seven sensors spread over the room.
    pub positions: Option<Vec<(usize, usize)>>,
    pub half_width: usize,
    /// Reading noise in ppm.
    pub noise_std: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            positions: None,
            half_width: 5,
            noise_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    /// Explicit observation timesteps. When absent, `count` timesteps are
    /// spread evenly between `first_fraction` and `last_fraction` of the run.
    pub timesteps: Option<Vec<usize>>,
    pub count: usize,
    pub first_fraction: f64,
    pub last_fraction: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig {
            timesteps: None,
            count: 10,
            first_fraction: 0.1,
            last_fraction: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub jump: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { jump: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaeSection {
    pub encoder_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub activation: Activation,
    /// Shared by the autoencoder, the LSTM and the latent filter.
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Also train on gridded observations built from the training (and
    /// validation) timesteps' sensor readings, so that encoded observations
    /// stay within what the autoencoder has learned to represent.
    pub augment_observations: bool,
}

impl Default for CaeSection {
    fn default() -> Self {
        let a = CaeArchitecture::default();
        let t = TrainConfig::default();
        CaeSection {
            encoder_layers: a.encoder_layers,
            filters: a.filters,
            kernel: a.kernel,
            activation: a.activation,
            latent_dim: a.latent_dim,
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            augment_observations: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmSection {
    pub hidden: usize,
    pub lookback: usize,
    pub activation: Activation,
    pub residual: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for LstmSection {
    fn default() -> Self {
        let a = LstmArchitecture::default();
        LstmSection {
            hidden: a.hidden,
            lookback: a.lookback,
            activation: a.activation,
            residual: a.residual,
            epochs: 100,
            batch: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssimSection {
    /// `"sample"` or a positive sigma for `sigma * I`.
    pub r_modes: Vec<RMode>,
    pub normalize_covariance: bool,
    pub max_state_dim: usize,
    pub timing_batch_seconds: f64,
    /// Also run the full-grid baseline.
    pub standard_da: bool,
    /// What a sample-based R is estimated from.
    pub r_sample: RSampleSet,
}

/// Sample set behind a sample-based R.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RSampleSet {
    /// Gridded observation minus truth at the validation timesteps, in the
    /// space being assimilated.
    ValidationErrors,
    /// The observations being assimilated.
    Observations,
}

impl Default for AssimSection {
    fn default() -> Self {
        let a = AssimConfig::default();
        AssimSection {
            r_modes: vec![RMode::SAMPLE, RMode::Sigma(0.01), RMode::Sigma(0.001), RMode::Sigma(0.0001)],
            normalize_covariance: a.normalize_covariance,
            max_state_dim: a.max_state_dim,
            timing_batch_seconds: a.timing_batch_seconds,
            standard_da: true,
            r_sample: RSampleSet::ValidationErrors,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub latent_sizes: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            latent_sizes: vec![4, 7, 16, 64],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub ae: AeGrid,
    pub lstm: LstmGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeGrid {
    pub filters: Vec<usize>,
    pub activation: Vec<Activation>,
    pub epochs: Vec<usize>,
    pub batch: Vec<usize>,
    pub folds: usize,
    pub repeats: usize,
}

impl Default for AeGrid {
    fn default() -> Self {
        AeGrid {
            filters: vec![8, 16],
            activation: vec![Activation::Relu, Activation::Elu],
            epochs: vec![20],
            batch: vec![16],
            folds: 5,
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmGrid {
    pub hidden: Vec<usize>,
    pub activation: Vec<Activation>,
    pub lookback: Vec<usize>,
    pub epochs: Vec<usize>,
    pub batch: Vec<usize>,
    pub repeats: usize,
}

impl Default for LstmGrid {
    fn default() -> Self {
        LstmGrid {
            hidden: vec![15, 30],
            activation: vec![Activation::Relu, Activation::Elu],
            lookback: vec![3],
            epochs: vec![100],
            batch: vec![16],
            repeats: 5,
        }
    }
}

/// Mixes a run seed with a stage tag so each stage draws an independent
/// stream (splitmix64 finalizer).
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn cae_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    pub fn lstm_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    pub fn sensor_seed(&self) -> u64 {
        derive_seed(self.seed, 3)
    }

    pub fn sensor_set(&self) -> SensorSet {
        let base = SensorSet::spread(self.scene.rows, self.scene.cols);
        SensorSet {
            positions: self.sensors.positions.clone().unwrap_or(base.positions),
            half_width: self.sensors.half_width,
            noise_std: self.sensors.noise_std,
        }
    }

    pub fn observation_timesteps(&self) -> Vec<usize> {
        if let Some(t) = &self.observations.timesteps {
            let mut t = t.clone();
            t.sort_unstable();
            t.dedup();
            return t;
        }
        let o = &self.observations;
        let last = (self.scene.steps.max(1) - 1) as f64;
        let lo = o.first_fraction * last;
        let hi = o.last_fraction * last;
        let mut t: Vec<usize> = (0..o.count)
            .map(|i| {
                let f = if o.count == 1 {
                    0.0
                } else {
                    i as f64 / (o.count - 1) as f64
                };
                (lo + f * (hi - lo)).round() as usize
            })
            .collect();
        t.dedup();
        t
    }

    pub fn cae_arch(&self) -> CaeArchitecture {
        CaeArchitecture {
            channels: 1,
            rows: self.scene.rows,
            cols: self.scene.cols,
            encoder_layers: self.cae.encoder_layers,
            filters: self.cae.filters,
            kernel: self.cae.kernel,
            activation: self.cae.activation,
            latent_dim: self.cae.latent_dim,
        }
    }

    pub fn cae_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.cae.epochs,
            batch: self.cae.batch,
            lr: self.cae.lr,
            seed: self.cae_seed(),
        }
    }

    pub fn lstm_arch(&self) -> LstmArchitecture {
        LstmArchitecture {
            latent_dim: self.cae.latent_dim,
            hidden: self.lstm.hidden,
            lookback: self.lstm.lookback,
            activation: self.lstm.activation,
            residual: self.lstm.residual,
        }
    }

    pub fn lstm_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.lstm.epochs,
            batch: self.lstm.batch,
            lr: self.lstm.lr,
            seed: self.lstm_seed(),
        }
    }

    pub fn assim(&self) -> AssimConfig {
        AssimConfig {
            normalize_covariance: self.assimilation.normalize_covariance,
            max_state_dim: self.assimilation.max_state_dim,
            timing_batch_seconds: self.assimilation.timing_batch_seconds,
        }
    }

    /// Checks every section and their mutual consistency without running
    /// anything expensive. All failures are configuration errors.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        Simulator::new(&self.scene).map_err(cfg)?;
        let sensors = self.sensor_set();
        sensors.validate(self.scene.rows, self.scene.cols).map_err(cfg)?;
        if sensors.positions.len() < 3 {
            return Err(Error::Config("at least 3 sensors are needed".into()));
        }
        let o = &self.observations;
        if o.timesteps.is_none() {
            if o.count == 0 {
                return Err(Error::Config("observations.count must be at least 1".into()));
            }
            if !(0.0..=1.0).contains(&o.first_fraction)
                || !(0.0..=1.0).contains(&o.last_fraction)
                || o.first_fraction > o.last_fraction
            {
                return Err(Error::Config(
                    "observation fractions must satisfy 0 <= first <= last <= 1".into(),
                ));
            }
        }
        let obs = self.observation_timesteps();
        if obs.is_empty() {
            return Err(Error::Config("no observation timesteps".into()));
        }
        if let Some(&t) = obs.iter().find(|&&t| t < self.lstm.lookback || t >= self.scene.steps) {
            return Err(Error::Config(format!(
                "observation timestep {t} needs {} earlier states and must be below {}",
                self.lstm.lookback, self.scene.steps
            )));
        }
        split(self.scene.steps, self.split.jump, &obs).map_err(cfg)?;
        self.cae_arch().validate().map_err(cfg)?;
        self.lstm_arch().validate().map_err(cfg)?;
        for (what, batch, lr) in [
            ("cae", self.cae.batch, self.cae.lr),
            ("lstm", self.lstm.batch, self.lstm.lr),
        ] {
            if batch == 0 || !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "{what}: batch must be positive and lr a positive finite number"
                )));
            }
        }
        if self.assimilation.r_modes.is_empty() {
            return Err(Error::Config("assimilation.r_modes is empty".into()));
        }
        for m in &self.assimilation.r_modes {
            m.validate()?;
        }
        if self.sweep.latent_sizes.iter().any(|&p| p == 0) {
            return Err(Error::Config("sweep latent sizes must be at least 1".into()));
        }
        let g = &self.gridsearch;
        if g.ae.filters.is_empty() || g.ae.activation.is_empty() || g.ae.epochs.is_empty() || g.ae.batch.is_empty() {
            return Err(Error::Config("gridsearch.ae axes must be non-empty".into()));
        }
        if g.ae.folds < 2 {
            return Err(Error::Config("gridsearch.ae.folds must be at least 2".into()));
        }
        if g.lstm.hidden.is_empty()
            || g.lstm.activation.is_empty()
            || g.lstm.lookback.is_empty()
            || g.lstm.epochs.is_empty()
            || g.lstm.batch.is_empty()
        {
            return Err(Error::Config("gridsearch.lstm axes must be non-empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.observation_timesteps().len(), 10);
        assert_eq!(cfg.observation_timesteps()[0], 60);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 3\n[cae]\nlatent_dim = 4\n[assimilation]\nr_modes = [\"sample\", 0.5]\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.lstm_arch().latent_dim, 4);
        assert_eq!(cfg.assimilation.r_modes.len(), 2);
        assert_eq!(cfg.scene, SceneConfig::default());
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "bogus = 1",
            "[cae]\nlatent_dim = 0",
            "[assimilation]\nr_modes = [-1.0]",
            "[observations]\ntimesteps = [1]",
            "[observations]\ntimesteps = [600]",
            "[scene]\ndiffusivity = 0.5",
            "[split]\njump = 0",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.cae_seed(), cfg.lstm_seed());
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
    }
}
