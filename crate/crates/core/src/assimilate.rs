//! Optimal-interpolation Kalman filter, in the latent space and on the full
//! grid.

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cae::{CaeModel, LatentState};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Cholesky, Matrix, Op};
use crate::scene::Field;
use crate::surrogate::LstmModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Provenance {
    SampleBased { samples: usize },
    ScaledIdentity { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceEstimate {
    pub matrix: Matrix,
    pub provenance: Provenance,
}

impl CovarianceEstimate {
    pub fn scaled_identity(n: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(CovarianceEstimate {
            matrix: Matrix::scaled_identity(n, sigma),
            provenance: Provenance::ScaledIdentity { sigma },
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }
}

/// `V Vᵀ` where the columns of `V` are the samples minus their mean. With
/// `normalize` the result is divided by `s - 1`.
pub fn sample_covariance(samples: &[Vec<f64>], normalize: bool) -> Result<CovarianceEstimate> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("covariance needs at least one sample".into()))?;
    let n = first.len();
    if n == 0 {
        return Err(Error::Invalid("covariance samples are empty vectors".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != n) {
        return Err(Error::shape("covariance sample", &[n], &[bad.len()]));
    }
    let s = samples.len();
    let mut mean = vec![0.0; n];
    for x in samples {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s as f64);
    // rows of `centered` are samples, so V = centeredᵀ
    let mut centered = Vec::with_capacity(s * n);
    for x in samples {
        centered.extend(x.iter().zip(&mean).map(|(v, m)| v - m));
    }
    let alpha = if normalize && s > 1 {
        1.0 / (s - 1) as f64
    } else {
        1.0
    };
    let mut c = vec![0.0; n * n];
    gemm(Op::T, Op::N, n, n, s, alpha, &centered, &centered, 0.0, &mut c);
    // exact symmetry regardless of kernel summation order
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (c[i * n + j] + c[j * n + i]);
            c[i * n + j] = v;
            c[j * n + i] = v;
        }
    }
    Ok(CovarianceEstimate {
        matrix: Matrix::from_vec(n, n, c)?,
        provenance: Provenance::SampleBased { samples: s },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservationOperator {
    Identity,
}

/// `K = Q Hᵀ (H Q Hᵀ + R)⁻¹` through a Cholesky solve, never an explicit
/// inverse.
pub fn kalman_gain(q: &CovarianceEstimate, h: ObservationOperator, r: &CovarianceEstimate) -> Result<Matrix> {
    let ObservationOperator::Identity = h;
    if q.dim() != r.dim() || q.matrix.cols() != r.matrix.cols() {
        return Err(Error::shape("kalman gain Q vs R", &[q.dim(), q.dim()], &[r.dim(), r.matrix.cols()]));
    }
    let s = q.matrix.add(&r.matrix)?;
    let chol = Cholesky::factor(&s)?;
    // S symmetric: S X = Q gives X = S⁻¹Q, and K = Q S⁻¹ = Xᵀ
    Ok(chol.solve_matrix(&q.matrix)?.transpose())
}

/// `forecast + K (obs - forecast)`.
pub fn analysis_update(forecast: &[f64], obs: &[f64], k: &Matrix) -> Result<Vec<f64>> {
    let n = forecast.len();
    if obs.len() != n {
        return Err(Error::shape("observation", &[n], &[obs.len()]));
    }
    if k.rows() != n || k.cols() != n {
        return Err(Error::shape("gain", &[n, n], &[k.rows(), k.cols()]));
    }
    let innovation: Vec<f64> = obs.iter().zip(forecast).map(|(o, f)| o - f).collect();
    let correction = k.matvec(&innovation)?;
    Ok(forecast.iter().zip(correction).map(|(f, c)| f + c).collect())
}

/// How the observation error covariance is formed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RMode {
    Named(RModeName),
    Sigma(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RModeName {
    Sample,
}

impl RMode {
    pub const SAMPLE: RMode = RMode::Named(RModeName::Sample);

    pub fn label(&self) -> String {
        match self {
            RMode::Named(RModeName::Sample) => "sample".into(),
            RMode::Sigma(s) => format!("{s}I"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RMode::Sigma(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::Config(format!("R sigma must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }

    /// Builds R for state dimension `n`; sample-based R uses `observations`.
    pub fn covariance(&self, n: usize, observations: &[Vec<f64>], normalize: bool) -> Result<CovarianceEstimate> {
        match *self {
            RMode::Named(RModeName::Sample) => sample_covariance(observations, normalize),
            RMode::Sigma(s) => CovarianceEstimate::scaled_identity(n, s),
        }
    }
}

pub trait Codec {
    fn latent_dim(&self) -> usize;
    fn encode(&self, field: &Field) -> Result<Vec<f64>>;
    fn decode(&self, h: &[f64]) -> Result<Field>;
}

pub trait Forecaster {
    fn lookback(&self) -> usize;
    fn forecast(&self, window: &[Vec<f64>]) -> Result<Vec<f64>>;
}

impl Codec for CaeModel {
    fn latent_dim(&self) -> usize {
        CaeModel::latent_dim(self)
    }
    fn encode(&self, field: &Field) -> Result<Vec<f64>> {
        CaeModel::encode(self, field)
    }
    fn decode(&self, h: &[f64]) -> Result<Field> {
        CaeModel::decode(self, h)
    }
}

impl Forecaster for LstmModel {
    fn lookback(&self) -> usize {
        LstmModel::lookback(self)
    }
    fn forecast(&self, window: &[Vec<f64>]) -> Result<Vec<f64>> {
        LstmModel::forecast(self, window)
    }
}

/// One corrected timestep. `correction_seconds` covers computing the gain
/// and applying the update.
#[derive(Clone, Debug)]
pub struct AnalysisRecord {
    pub timestep: usize,
    pub r_mode: RMode,
    pub forecast: Vec<f64>,
    pub observation: Vec<f64>,
    pub analysis: Vec<f64>,
    pub truth: Option<Vec<f64>>,
    pub gain: Arc<Matrix>,
    pub correction_seconds: f64,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

impl AnalysisRecord {
    pub fn mse_forecast(&self) -> f64 {
        mse(&self.forecast, &self.observation)
    }

    pub fn mse_analysis(&self) -> f64 {
        mse(&self.analysis, &self.observation)
    }

    pub fn mse_forecast_truth(&self) -> Option<f64> {
        self.truth.as_ref().map(|t| mse(&self.forecast, t))
    }

    pub fn mse_analysis_truth(&self) -> Option<f64> {
        self.truth.as_ref().map(|t| mse(&self.analysis, t))
    }

    /// Largest deviation between the stored analysis and the update
    /// re-evaluated from the stored forecast, observation and gain.
    pub fn consistency_error(&self) -> Result<f64> {
        let again = analysis_update(&self.forecast, &self.observation, &self.gain)?;
        Ok(again
            .iter()
            .zip(&self.analysis)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

pub fn write_records_csv<W: Write>(out: &mut W, records: &[AnalysisRecord]) -> Result<()> {
    writeln!(out, "timestep,mse_forecast,mse_analysis,sigma_mode,correction_seconds")?;
    for r in records {
        writeln!(
            out,
            "{},{:e},{:e},{},{:e}",
            r.timestep,
            r.mse_forecast(),
            r.mse_analysis(),
            r.r_mode.label(),
            r.correction_seconds
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssimConfig {
    /// Divide sample covariances by `s - 1`.
    pub normalize_covariance: bool,
    /// Largest full-grid state the baseline will attempt.
    pub max_state_dim: usize,
    /// Minimum wall time per timing batch; tiny gains are recomputed until
    /// a batch lasts this long and the per-call average is taken.
    pub timing_batch_seconds: f64,
}

impl Default for AssimConfig {
    fn default() -> Self {
        AssimConfig {
            normalize_covariance: false,
            max_state_dim: 5000,
            timing_batch_seconds: 2e-3,
        }
    }
}

/// Gain and its wall time. Fast gains are timed as the best of several
/// batches of repeated calls, so short solves still get a stable reading.
pub fn timed_gain(q: &CovarianceEstimate, r: &CovarianceEstimate, batch_seconds: f64) -> Result<(Matrix, f64)> {
    let start = Instant::now();
    let gain = kalman_gain(q, ObservationOperator::Identity, r)?;
    let once = start.elapsed();
    let target = Duration::from_secs_f64(batch_seconds.max(0.0));
    if once >= target {
        return Ok((gain, once.as_secs_f64()));
    }
    let mut best = f64::INFINITY;
    for _ in 0..5 {
        let start = Instant::now();
        let mut calls = 0u32;
        while start.elapsed() < target || calls == 0 {
            std::hint::black_box(kalman_gain(q, ObservationOperator::Identity, r)?);
            calls += 1;
        }
        best = best.min(start.elapsed().as_secs_f64() / calls as f64);
    }
    Ok((gain, best))
}

fn timed_update(forecast: &[f64], obs: &[f64], k: &Matrix, batch_seconds: f64) -> Result<(Vec<f64>, f64)> {
    let start = Instant::now();
    let analysis = analysis_update(forecast, obs, k)?;
    let once = start.elapsed().as_secs_f64();
    if once >= batch_seconds {
        return Ok((analysis, once));
    }
    let start = Instant::now();
    let mut calls = 0u32;
    while start.elapsed().as_secs_f64() < batch_seconds || calls == 0 {
        std::hint::black_box(analysis_update(forecast, obs, k)?);
        calls += 1;
    }
    Ok((analysis, start.elapsed().as_secs_f64() / calls as f64))
}

/// Observation input for one timestep: the gridded (interpolated)
/// observation and, when known, the true field.
#[derive(Clone, Debug)]
pub struct ObservationStep {
    pub timestep: usize,
    pub observation: Field,
    pub truth: Option<Field>,
}

/// Decoded view of one latent record.
#[derive(Clone, Debug)]
pub struct PhysicalRecord {
    pub timestep: usize,
    pub forecast: Field,
    pub observation: Field,
    pub analysis: Field,
    pub truth: Option<Field>,
}

impl PhysicalRecord {
    pub fn mse_forecast(&self) -> f64 {
        mse(self.forecast.values(), self.observation.values())
    }

    pub fn mse_analysis(&self) -> f64 {
        mse(self.analysis.values(), self.observation.values())
    }

    pub fn mse_forecast_truth(&self) -> Option<f64> {
        self.truth.as_ref().map(|t| mse(self.forecast.values(), t.values()))
    }

    pub fn mse_analysis_truth(&self) -> Option<f64> {
        self.truth.as_ref().map(|t| mse(self.analysis.values(), t.values()))
    }
}

#[derive(Clone, Debug)]
pub struct AssimilationRun {
    pub r_mode: RMode,
    pub records: Vec<AnalysisRecord>,
    /// Decoded forecasts and analyses (latent runs only).
    pub physical: Vec<PhysicalRecord>,
    /// Timesteps that could not be processed, with the reason.
    pub skipped: Vec<(usize, String)>,
    pub gain_seconds: f64,
}

impl AssimilationRun {
    pub fn mean_mse_forecast(&self) -> f64 {
        mean_of(self.records.iter().map(AnalysisRecord::mse_forecast))
    }

    pub fn mean_mse_analysis(&self) -> f64 {
        mean_of(self.records.iter().map(AnalysisRecord::mse_analysis))
    }

    pub fn mean_correction_seconds(&self) -> f64 {
        mean_of(self.records.iter().map(|r| r.correction_seconds))
    }

    pub fn mean_physical_mse_forecast(&self) -> f64 {
        mean_of(self.physical.iter().map(PhysicalRecord::mse_forecast))
    }

    pub fn mean_physical_mse_analysis(&self) -> f64 {
        mean_of(self.physical.iter().map(PhysicalRecord::mse_analysis))
    }
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    crate::stats::mean(&v)
}

/// Inputs to a latent assimilation run.
pub struct LatentInputs<'a> {
    /// Encoded model states indexed by timestep; forecast windows read the
    /// `q` states before each observation timestep.
    pub series: &'a [LatentState],
    pub steps: &'a [ObservationStep],
    /// Background covariance over latent forecasts.
    pub background: &'a CovarianceEstimate,
    /// Samples for a sample-based R. When absent, the encoded observations
    /// themselves are used.
    pub r_samples: Option<&'a [LatentState]>,
}

/// For each observation timestep: forecast with the surrogate, encode the
/// observation, correct with the optimal-interpolation gain, decode.
pub fn latent_assimilate(
    codec: &dyn Codec,
    forecaster: &dyn Forecaster,
    inputs: &LatentInputs<'_>,
    r_mode: RMode,
    cfg: &AssimConfig,
) -> Result<AssimilationRun> {
    r_mode.validate()?;
    let p = codec.latent_dim();
    if inputs.background.dim() != p {
        return Err(Error::shape("background covariance", &[p, p], &[inputs.background.dim(), inputs.background.dim()]));
    }
    let q = forecaster.lookback();
    let encoded: Vec<LatentState> = inputs
        .steps
        .iter()
        .map(|s| codec.encode(&s.observation))
        .collect::<Result<_>>()?;
    let r = r_mode.covariance(p, inputs.r_samples.unwrap_or(&encoded), cfg.normalize_covariance)?;
    let (gain, gain_seconds) = timed_gain(inputs.background, &r, cfg.timing_batch_seconds)?;
    let gain = Arc::new(gain);

    let mut run = AssimilationRun {
        r_mode,
        records: vec![],
        physical: vec![],
        skipped: vec![],
        gain_seconds,
    };
    for (step, obs) in inputs.steps.iter().zip(encoded) {
        let t = step.timestep;
        if t < q || t > inputs.series.len() {
            run.skipped
                .push((t, format!("no {q}-state window precedes timestep {t}")));
            continue;
        }
        let forecast = forecaster.forecast(&inputs.series[t - q..t])?;
        let (analysis, update_seconds) = timed_update(&forecast, &obs, &gain, cfg.timing_batch_seconds)?;
        let physical = PhysicalRecord {
            timestep: t,
            forecast: codec.decode(&forecast)?,
            observation: step.observation.clone(),
            analysis: codec.decode(&analysis)?,
            truth: step.truth.clone(),
        };
        run.records.push(AnalysisRecord {
            timestep: t,
            r_mode,
            forecast,
            observation: obs,
            analysis,
            truth: inputs.series.get(t).cloned(),
            gain: Arc::clone(&gain),
            correction_seconds: gain_seconds + update_seconds,
        });
        run.physical.push(physical);
    }
    Ok(run)
}

/// Rejects full-grid states above the configured cap before any n×n
/// allocation happens.
pub fn check_state_dim(n: usize, cfg: &AssimConfig) -> Result<()> {
    if n > cfg.max_state_dim {
        let gib = (n as f64).powi(2) * 8.0 * 3.0 / (1u64 << 30) as f64;
        return Err(Error::Invalid(format!(
            "full-grid assimilation at n = {n} exceeds the cap of {} \
             (needs about {gib:.1} GiB of dense n×n matrices); raise \
             max_state_dim to run it anyway",
            cfg.max_state_dim
        )));
    }
    Ok(())
}

/// One full-grid timestep: the physical model's forecast and the gridded
/// observation.
#[derive(Clone, Debug)]
pub struct FullStep {
    pub timestep: usize,
    pub forecast: Field,
    pub observation: Field,
    pub truth: Option<Field>,
}

/// The same filter on flattened fields, with Q over background fields.
/// Full-grid filter. A sample-based R is built from `r_samples`, or from
/// the observations when that is `None`.
pub fn standard_da(
    steps: &[FullStep],
    background: &CovarianceEstimate,
    r_mode: RMode,
    r_samples: Option<&[Vec<f64>]>,
    cfg: &AssimConfig,
) -> Result<AssimilationRun> {
    r_mode.validate()?;
    let n = background.dim();
    check_state_dim(n, cfg)?;
    for s in steps {
        if s.forecast.values().len() != n || s.observation.values().len() != n {
            return Err(Error::shape(
                "full-grid step",
                &[n],
                &[s.forecast.values().len().max(s.observation.values().len())],
            ));
        }
    }
    let observations: Vec<Vec<f64>> = steps.iter().map(|s| s.observation.values().to_vec()).collect();
    let r = r_mode.covariance(n, r_samples.unwrap_or(&observations), cfg.normalize_covariance)?;
    let (gain, gain_seconds) = timed_gain(background, &r, cfg.timing_batch_seconds)?;
    drop(r);
    let gain = Arc::new(gain);
    let mut run = AssimilationRun {
        r_mode,
        records: vec![],
        physical: vec![],
        skipped: vec![],
        gain_seconds,
    };
    for (s, obs) in steps.iter().zip(observations) {
        let forecast = s.forecast.values().to_vec();
        let (analysis, update_seconds) = timed_update(&forecast, &obs, &gain, cfg.timing_batch_seconds)?;
        run.records.push(AnalysisRecord {
            timestep: s.timestep,
            r_mode,
            forecast,
            observation: obs,
            analysis,
            truth: s.truth.as_ref().map(|f| f.values().to_vec()),
            gain: Arc::clone(&gain),
            correction_seconds: gain_seconds + update_seconds,
        });
    }
    Ok(run)
}

/// Background covariance over flattened fields, guarded by the state cap.
pub fn field_covariance(fields: &[Field], cfg: &AssimConfig) -> Result<CovarianceEstimate> {
    let n = fields
        .first()
        .map(|f| f.values().len())
        .ok_or_else(|| Error::Invalid("no background fields".into()))?;
    check_state_dim(n, cfg)?;
    let samples: Vec<Vec<f64>> = fields.iter().map(|f| f.values().to_vec()).collect();
    sample_covariance(&samples, cfg.normalize_covariance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_examples() {
        let one = sample_covariance(&[vec![3.0, -1.0, 2.0]], false).unwrap();
        assert!(one.matrix.data().iter().all(|&v| v == 0.0));
        assert_eq!(one.provenance, Provenance::SampleBased { samples: 1 });
        let two = sample_covariance(&[vec![1.0, 0.0], vec![-1.0, 0.0]], false).unwrap();
        assert_eq!(two.matrix.data(), &[2.0, 0.0, 0.0, 0.0]);
        let norm = sample_covariance(&[vec![1.0, 0.0], vec![-1.0, 0.0]], true).unwrap();
        assert_eq!(norm.matrix.data(), &[2.0, 0.0, 0.0, 0.0]);
        assert!(sample_covariance(&[], false).is_err());
        assert!(sample_covariance(&[vec![1.0], vec![1.0, 2.0]], false).is_err());
    }

    #[test]
    fn gain_examples() {
        for n in [1, 5] {
            let i = CovarianceEstimate::scaled_identity(n, 1.0).unwrap();
            let k = kalman_gain(&i, ObservationOperator::Identity, &i).unwrap();
            assert!(k.max_abs_diff(&Matrix::scaled_identity(n, 0.5)) < 1e-15);
        }
        let q = CovarianceEstimate {
            matrix: Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap(),
            provenance: Provenance::SampleBased { samples: 3 },
        };
        let r0 = CovarianceEstimate {
            matrix: Matrix::zeros(2, 2),
            provenance: Provenance::ScaledIdentity { sigma: 0.0 },
        };
        let k = kalman_gain(&q, ObservationOperator::Identity, &r0).unwrap();
        assert!(k.max_abs_diff(&Matrix::identity(2)) < 1e-12);
    }

    #[test]
    fn singular_gain_reports_condition() {
        let z = CovarianceEstimate {
            matrix: Matrix::zeros(3, 3),
            provenance: Provenance::SampleBased { samples: 1 },
        };
        match kalman_gain(&z, ObservationOperator::Identity, &z) {
            Err(Error::Singular { .. }) => {}
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn update_examples() {
        let f = vec![0.2, -1.0];
        let o = vec![1.0, 3.0];
        assert_eq!(analysis_update(&f, &o, &Matrix::zeros(2, 2)).unwrap(), f);
        assert_eq!(analysis_update(&f, &o, &Matrix::identity(2)).unwrap(), o);
        let half = Matrix::scaled_identity(1, 0.5);
        assert_eq!(analysis_update(&[0.0], &[1.0], &half).unwrap(), vec![0.5]);
        assert!(analysis_update(&f, &[1.0], &half).is_err());
    }

    #[test]
    fn r_mode_labels_and_parsing() {
        #[derive(Deserialize)]
        struct W {
            modes: Vec<RMode>,
        }
        let w: W = toml::from_str(r#"modes = ["sample", 0.01, 1e-4]"#).unwrap();
        assert_eq!(w.modes, vec![RMode::SAMPLE, RMode::Sigma(0.01), RMode::Sigma(1e-4)]);
        assert_eq!(w.modes[1].label(), "0.01I");
        assert_eq!(w.modes[0].label(), "sample");
        assert!(RMode::Sigma(0.0).validate().is_err());
        assert!(toml::from_str::<W>(r#"modes = ["bogus"]"#).is_err());
    }

    #[test]
    fn state_cap_guard() {
        let cfg = AssimConfig {
            max_state_dim: 10,
            ..AssimConfig::default()
        };
        let fields = vec![Field::filled(3, 4, 0.5)];
        let err = field_covariance(&fields, &cfg).unwrap_err();
        assert!(err.to_string().contains("max_state_dim"));
    }
}
