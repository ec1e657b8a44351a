use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::{derive_seed, ExperimentConfig, RSampleSet};
use super::table::ResultTable;
use crate::assimilate::{
    field_covariance, latent_assimilate, sample_covariance, standard_da, write_records_csv,
    AssimilationRun, CovarianceEstimate, FullStep, LatentInputs, ObservationStep, RMode,
};
use crate::cae::{train_cae, CaeModel, LatentState, TrainingHistory};
use crate::dataset::{split, windows_for_targets, SplitAssignment};
use crate::error::{Error, Result};
use crate::scene::{normalize, observation_field, sample_sensors, side_by_side, simulate, snapshot_name, write_pgm, Field};
use crate::surrogate::{persistence_baseline, train_lstm, LatentSample, LstmModel};

/// Wall-clock per named stage, in call order.
#[derive(Clone, Debug, Default)]
pub struct StageTimer {
    pub stages: Vec<(String, f64)>,
}

impl StageTimer {
    pub fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage));
        self.stages.push((stage.to_string(), start.elapsed().as_secs_f64()));
        out
    }
}

/// Scene snapshots, observations and the split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    /// Normalized snapshots, one per timestep.
    pub fields: Vec<Field>,
    pub observation_timesteps: Vec<usize>,
    /// Sensor readings in ppm, one vector per observation timestep.
    pub readings: Vec<Vec<f64>>,
    /// Gridded, normalized observations, one per observation timestep.
    pub observations: Vec<Field>,
    /// Gridded observations at every training and validation timestep;
    /// test timesteps hold the plain snapshot.
    pub gridded: Vec<Field>,
    /// Whether the autoencoder also trains on `gridded`.
    pub augment: bool,
    pub split: SplitAssignment,
}

impl PreparedData {
    pub fn subset(&self, idx: &[usize]) -> Vec<Field> {
        idx.iter().map(|&t| self.fields[t].clone()).collect()
    }

    /// Snapshots at `idx`, followed by the gridded observations at the same
    /// timesteps when those are available.
    pub fn training_fields(&self, idx: &[usize]) -> Vec<Field> {
        let mut out = self.subset(idx);
        if self.augment {
            out.extend(idx.iter().map(|&t| self.gridded[t].clone()));
        }
        out
    }

    /// Gridded observation minus truth at each validation timestep.
    pub fn validation_errors(&self) -> Vec<Vec<f64>> {
        self.split
            .val
            .iter()
            .map(|&t| difference(self.gridded[t].values(), self.fields[t].values()))
            .collect()
    }

    pub fn observation_steps(&self) -> Vec<ObservationStep> {
        self.observation_timesteps
            .iter()
            .zip(&self.observations)
            .map(|(&t, o)| ObservationStep {
                timestep: t,
                observation: o.clone(),
                truth: Some(self.fields[t].clone()),
            })
            .collect()
    }
}

/// Simulates the scene, samples the sensors, grids the observations and
/// splits the timesteps.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let ppm = simulate(&cfg.scene)?;
    let range = (cfg.scene.ambient_ppm, cfg.scene.initial_ppm);
    let fields = ppm
        .iter()
        .map(|f| normalize(f, range.0, range.1))
        .collect::<Result<Vec<_>>>()?;
    let obs_t = cfg.observation_timesteps();
    let sensors = cfg.sensor_set();
    let read = |t: usize| sample_sensors(&ppm[t], &sensors, derive_seed(cfg.sensor_seed(), t as u64));
    let grid = |r: &[f64]| observation_field(r, &sensors, cfg.scene.rows, cfg.scene.cols, range);
    let readings = obs_t.iter().map(|&t| read(t)).collect::<Result<Vec<_>>>()?;
    let observations = readings.iter().map(|r| grid(r)).collect::<Result<Vec<_>>>()?;
    let split = split(fields.len(), cfg.split.jump, &obs_t)?;
    let keep: std::collections::HashSet<usize> = split.train.iter().chain(&split.val).copied().collect();
    let gridded = (0..fields.len())
        .into_par_iter()
        .map(|t| if keep.contains(&t) { grid(&read(t)?) } else { Ok(fields[t].clone()) })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        fields,
        observation_timesteps: obs_t,
        readings,
        observations,
        gridded,
        augment: cfg.cae.augment_observations,
        split,
    })
}

fn difference(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn encode_all(cae: &CaeModel, fields: &[Field]) -> Result<Vec<LatentState>> {
    fields.par_iter().map(|f| cae.encode(f)).collect()
}

/// Training windows have targets in the training set, validation windows
/// in the validation set. Inputs are the states just before the target.
pub fn lstm_samples(series: &[LatentState], split: &SplitAssignment, q: usize) -> (Vec<LatentSample>, Vec<LatentSample>) {
    (
        windows_for_targets(series, &split.train, q),
        windows_for_targets(series, &split.val, q),
    )
}

#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub cae: CaeModel,
    pub cae_history: TrainingHistory,
    pub lstm: LstmModel,
    pub lstm_history: TrainingHistory,
    /// Encoded snapshots, one per timestep.
    pub series: Vec<LatentState>,
    pub lstm_val_mse: f64,
    pub persistence_val_mse: f64,
}

impl TrainedModels {
    pub fn training_table(&self) -> Result<ResultTable> {
        let mut t = ResultTable::new("metric", &["value"]);
        let first = self.cae_history.epochs.first().map_or(f64::NAN, |e| e.val.mse);
        t.push("cae_val_mse_initial", vec![self.cae_history.initial_val.mse])?;
        t.push("cae_val_mse_first_epoch", vec![first])?;
        t.push("cae_val_mse_final", vec![self.cae_history.final_val().mse])?;
        t.push("lstm_val_mse", vec![self.lstm_val_mse])?;
        t.push("persistence_val_mse", vec![self.persistence_val_mse])?;
        Ok(t)
    }
}

pub fn train_models(cfg: &ExperimentConfig, data: &PreparedData, timer: &mut StageTimer) -> Result<TrainedModels> {
    let train = data.training_fields(&data.split.train);
    let val = data.training_fields(&data.split.val);
    let (cae, cae_history) = timer.run("train-ae", || train_cae(&cfg.cae_arch(), &train, &val, &cfg.cae_train()))?;
    let series = timer.run("encode", || encode_all(&cae, &data.fields))?;
    let (lstm, lstm_history, lstm_val_mse, persistence_val_mse) = timer.run("train-lstm", || {
        let (tr, va) = lstm_samples(&series, &data.split, cfg.lstm.lookback);
        let (lstm, hist) = train_lstm(&cfg.lstm_arch(), &tr, &va, &cfg.lstm_train())?;
        let val_mse = lstm.evaluate(&va)?.mse;
        Ok((lstm, hist, val_mse, persistence_baseline(&va).mse))
    })?;
    Ok(TrainedModels {
        cae,
        cae_history,
        lstm,
        lstm_history,
        series,
        lstm_val_mse,
        persistence_val_mse,
    })
}

#[derive(Clone, Debug)]
pub struct AssimilationSummary {
    /// Background covariance over validation latents.
    pub background: CovarianceEstimate,
    pub latent: Vec<AssimilationRun>,
    /// Full-grid runs; a mode whose gain cannot be formed is kept with its
    /// error.
    pub standard: Vec<(RMode, std::result::Result<AssimilationRun, String>)>,
}

impl AssimilationSummary {
    fn no_da_row(&self, f: impl Fn(&AssimilationRun) -> Vec<f64>) -> Option<Vec<f64>> {
        self.latent.first().map(f)
    }

    /// Latent MSE against the encoded observation and the encoded truth,
    /// plus mean correction time, per R mode after a `no_da` row.
    pub fn latent_table(&self) -> Result<ResultTable> {
        let mut t = ResultTable::new("r_mode", &["mse", "mse_truth", "correction_seconds"]);
        let truth = |run: &AssimilationRun, fc: bool| {
            let v: Vec<f64> = run
                .records
                .iter()
                .filter_map(|r| if fc { r.mse_forecast_truth() } else { r.mse_analysis_truth() })
                .collect();
            crate::stats::mean(&v)
        };
        if let Some(row) = self.no_da_row(|r| vec![r.mean_mse_forecast(), truth(r, true), 0.0]) {
            t.push("no_da", row)?;
        }
        for run in &self.latent {
            t.push(
                run.r_mode.label(),
                vec![run.mean_mse_analysis(), truth(run, false), run.mean_correction_seconds()],
            )?;
        }
        Ok(t)
    }

    /// Decoded MSE against the gridded observation and the true field.
    pub fn physical_table(&self) -> Result<ResultTable> {
        let mut t = ResultTable::new("r_mode", &["mse", "mse_truth", "correction_seconds"]);
        let truth = |run: &AssimilationRun, fc: bool| {
            let v: Vec<f64> = run
                .physical
                .iter()
                .filter_map(|r| if fc { r.mse_forecast_truth() } else { r.mse_analysis_truth() })
                .collect();
            crate::stats::mean(&v)
        };
        if let Some(row) = self.no_da_row(|r| vec![r.mean_physical_mse_forecast(), truth(r, true), 0.0]) {
            t.push("no_da", row)?;
        }
        for run in &self.latent {
            t.push(
                run.r_mode.label(),
                vec![run.mean_physical_mse_analysis(), truth(run, false), run.mean_correction_seconds()],
            )?;
        }
        Ok(t)
    }

    pub fn standard_table(&self) -> Result<ResultTable> {
        let mut t = ResultTable::new("r_mode", &["mse", "mse_truth", "correction_seconds"]);
        let truth = |run: &AssimilationRun, fc: bool| {
            let v: Vec<f64> = run
                .records
                .iter()
                .filter_map(|r| if fc { r.mse_forecast_truth() } else { r.mse_analysis_truth() })
                .collect();
            crate::stats::mean(&v)
        };
        let ok = || self.standard.iter().filter_map(|(_, r)| r.as_ref().ok());
        if let Some(first) = ok().next() {
            t.push("no_da", vec![first.mean_mse_forecast(), truth(first, true), 0.0])?;
        }
        for run in ok() {
            t.push(
                run.r_mode.label(),
                vec![run.mean_mse_analysis(), truth(run, false), run.mean_correction_seconds()],
            )?;
        }
        Ok(t)
    }
}

/// Latent filter for every configured R mode and, when enabled, the
/// full-grid baseline.
pub fn assimilate_all(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    models: &TrainedModels,
    timer: &mut StageTimer,
    with_standard: bool,
) -> Result<AssimilationSummary> {
    let assim = cfg.assim();
    let steps = data.observation_steps();
    let background = timer.run("background", || {
        let val_latents: Vec<LatentState> = data.split.val.iter().map(|&t| models.series[t].clone()).collect();
        sample_covariance(&val_latents, assim.normalize_covariance)
    })?;
    let latent_errors = match cfg.assimilation.r_sample {
        RSampleSet::ValidationErrors => Some(timer.run("r-samples", || {
            let val: Vec<Field> = data.split.val.iter().map(|&t| data.gridded[t].clone()).collect();
            let encoded = encode_all(&models.cae, &val)?;
            Ok(data
                .split
                .val
                .iter()
                .zip(&encoded)
                .map(|(&t, o)| difference(o, &models.series[t]))
                .collect::<Vec<_>>())
        })?),
        RSampleSet::Observations => None,
    };
    let latent = timer.run("assimilate", || {
        let inputs = LatentInputs {
            series: &models.series,
            steps: &steps,
            background: &background,
            r_samples: latent_errors.as_deref(),
        };
        cfg.assimilation
            .r_modes
            .iter()
            .map(|&mode| latent_assimilate(&models.cae, &models.lstm, &inputs, mode, &assim))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut standard = vec![];
    if with_standard {
        timer.run("baseline-da", || {
            let q = field_covariance(&data.subset(&data.split.val), &assim)?;
            let full: Vec<FullStep> = steps
                .iter()
                .map(|s| FullStep {
                    timestep: s.timestep,
                    forecast: data.fields[s.timestep].clone(),
                    observation: s.observation.clone(),
                    truth: s.truth.clone(),
                })
                .collect();
            let errors = match cfg.assimilation.r_sample {
                RSampleSet::ValidationErrors => Some(data.validation_errors()),
                RSampleSet::Observations => None,
            };
            for &mode in &cfg.assimilation.r_modes {
                let res = standard_da(&full, &q, mode, errors.as_deref(), &assim);
                match res {
                    Ok(run) => standard.push((mode, Ok(run))),
                    Err(e) if e.is_numerical() => standard.push((mode, Err(e.to_string()))),
                    Err(e) => return Err(e),
                }
            }
            Ok(())
        })?;
    }
    Ok(AssimilationSummary {
        background,
        latent,
        standard,
    })
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub config: ExperimentConfig,
    pub data: PreparedData,
    pub models: TrainedModels,
    pub assimilation: AssimilationSummary,
    pub timer: StageTimer,
    /// Every file written, relative to the output directory.
    pub outputs: Vec<PathBuf>,
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn create(&mut self, rel: impl AsRef<Path>) -> Result<BufWriter<File>> {
        let rel = rel.as_ref();
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.written.push(rel.to_path_buf());
        Ok(BufWriter::new(File::create(path)?))
    }

    fn table(&mut self, rel: &str, t: &ResultTable) -> Result<()> {
        let mut w = self.create(rel)?;
        t.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn path(&mut self, rel: &str) -> PathBuf {
        self.written.push(PathBuf::from(rel));
        self.dir.join(rel)
    }
}

pub fn write_split(dir: &Path, split: &SplitAssignment) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("split.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    split.write_csv(&mut w)?;
    w.flush()?;
    Ok(path)
}

pub fn write_history(path: &Path, h: &TrainingHistory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    h.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes `records.csv`-style output for several runs under one header.
pub fn write_runs_csv(path: &Path, runs: &[&AssimilationRun]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let records: Vec<_> = runs.iter().flat_map(|r| r.records.iter().cloned()).collect();
    write_records_csv(&mut w, &records)?;
    w.flush()?;
    Ok(())
}

/// Forecast, observation and analysis side by side for every corrected
/// timestep, one directory per R mode.
pub fn write_triptychs(dir: &Path, run: &AssimilationRun) -> Result<Vec<PathBuf>> {
    let sub = Path::new("triptychs").join(run.r_mode.label());
    fs::create_dir_all(dir.join(&sub))?;
    let mut out = vec![];
    for p in &run.physical {
        let img = side_by_side(&[&p.forecast, &p.observation, &p.analysis])?;
        let rel = sub.join(snapshot_name(p.timestep));
        write_pgm(&img, &dir.join(&rel))?;
        out.push(rel);
    }
    Ok(out)
}

/// Scene → split → autoencoder → encoding → LSTM → latent and full-grid
/// assimilation, with every table, model, image and a manifest written to
/// the output directory. A failing stage is named in the error; files from
/// earlier stages stay on disk.
pub fn run_full_pipeline(cfg: &ExperimentConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let started = Instant::now();
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut out = Outputs {
        dir: &dir,
        written: vec![],
    };
    let mut timer = StageTimer::default();
    {
        let mut w = out.create("config.toml")?;
        w.write_all(cfg.to_toml().as_bytes())?;
        w.flush()?;
    }

    let data = timer.run("generate", || prepare_data(cfg))?;
    {
        let mut w = out.create("observations.csv")?;
        let n = data.readings.first().map_or(0, Vec::len);
        write!(w, "timestep")?;
        for i in 0..n {
            write!(w, ",sensor{i}")?;
        }
        writeln!(w)?;
        for (t, r) in data.observation_timesteps.iter().zip(&data.readings) {
            write!(w, "{t}")?;
            for v in r {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
    }
    {
        let mut w = out.create("split.csv")?;
        data.split.write_csv(&mut w)?;
        w.flush()?;
    }

    let models = train_models(cfg, &data, &mut timer)?;
    let p = out.path("cae.lada");
    models.cae.save(&p)?;
    let p = out.path("lstm.lada");
    models.lstm.save(&p)?;
    let p = out.path("cae_history.csv");
    write_history(&p, &models.cae_history)?;
    let p = out.path("lstm_history.csv");
    write_history(&p, &models.lstm_history)?;
    out.table("training_summary.csv", &models.training_table()?)?;

    let assimilation = assimilate_all(cfg, &data, &models, &mut timer, cfg.assimilation.standard_da)?;
    let la: Vec<&AssimilationRun> = assimilation.latent.iter().collect();
    let p = out.path("la_records.csv");
    write_runs_csv(&p, &la)?;
    out.table("la_latent.csv", &assimilation.latent_table()?)?;
    out.table("la_physical.csv", &assimilation.physical_table()?)?;
    for run in &assimilation.latent {
        let files = write_triptychs(&dir, run)?;
        out.written.extend(files);
    }
    if cfg.assimilation.standard_da {
        let ok: Vec<&AssimilationRun> = assimilation.standard.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
        let p = out.path("sda_records.csv");
        write_runs_csv(&p, &ok)?;
        out.table("sda_physical.csv", &assimilation.standard_table()?)?;
        let mut w = out.create("sda_skipped.csv")?;
        writeln!(w, "r_mode,reason")?;
        for (mode, r) in &assimilation.standard {
            if let Err(e) = r {
                writeln!(w, "{},{}", mode.label(), e.replace([',', '\n'], ";"))?;
            }
        }
        w.flush()?;
    }

    let mut w = out.create("manifest.txt")?;
    let mut kv = |k: &str, v: String| writeln!(w, "{k}={v}");
    kv("version", env!("CARGO_PKG_VERSION").to_string())?;
    kv("seed", cfg.seed.to_string())?;
    kv("scene_seed", cfg.scene.seed.to_string())?;
    kv("cae_seed", cfg.cae_seed().to_string())?;
    kv("lstm_seed", cfg.lstm_seed().to_string())?;
    kv("sensor_seed", cfg.sensor_seed().to_string())?;
    kv("timesteps", data.fields.len().to_string())?;
    kv("grid", format!("{}x{}", cfg.scene.rows, cfg.scene.cols))?;
    kv("latent_dim", cfg.cae.latent_dim.to_string())?;
    kv("threads", rayon::current_num_threads().to_string())?;
    kv(
        "observation_timesteps",
        data.observation_timesteps
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    )?;
    for (stage, secs) in &timer.stages {
        kv(&format!("seconds.{stage}"), format!("{secs:.6}"))?;
    }
    kv("seconds.total", format!("{:.6}", started.elapsed().as_secs_f64()))?;
    w.flush()?;
    drop(w);

    Ok(PipelineReport {
        config: cfg.clone(),
        data,
        models,
        assimilation,
        timer,
        outputs: out.written,
    })
}

/// Three tables indexed by latent size: latent MSE and physical MSE (with a
/// `no_da` column first) and mean correction time, one column per R mode.
#[derive(Clone, Debug)]
pub struct SweepResult {
    pub latent: ResultTable,
    pub physical: ResultTable,
    pub time: ResultTable,
    pub failures: Vec<(usize, String)>,
}

impl SweepResult {
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut out = vec![];
        for (name, t) in [
            ("sweep_latent.csv", &self.latent),
            ("sweep_physical.csv", &self.physical),
            ("sweep_time.csv", &self.time),
        ] {
            t.save(&dir.join(name))?;
            out.push(dir.join(name));
        }
        let path = dir.join("sweep_failures.csv");
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "latent_size,reason")?;
        for (p, e) in &self.failures {
            writeln!(w, "{p},{}", e.replace([',', '\n'], ";"))?;
        }
        w.flush()?;
        out.push(path);
        Ok(out)
    }
}

/// Retrains the autoencoder and LSTM for each latent size and runs the
/// latent filter over every R mode. A failing size is recorded and skipped.
pub fn run_latent_sweep(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<SweepResult> {
    cfg.validate()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config("latent sizes must be a non-empty list of positive sizes".into()));
    }
    let data = prepare_data(cfg)?;
    let labels: Vec<String> = cfg.assimilation.r_modes.iter().map(RMode::label).collect();
    let mut with_no_da = vec!["no_da"];
    with_no_da.extend(labels.iter().map(String::as_str));
    let mode_cols: Vec<&str> = labels.iter().map(String::as_str).collect();
    let mut result = SweepResult {
        latent: ResultTable::new("latent_size", &with_no_da),
        physical: ResultTable::new("latent_size", &with_no_da),
        time: ResultTable::new("latent_size", &mode_cols),
        failures: vec![],
    };
    for &p in sizes {
        let mut sized = cfg.clone();
        sized.cae.latent_dim = p;
        let mut timer = StageTimer::default();
        let outcome = train_models(&sized, &data, &mut timer)
            .and_then(|m| assimilate_all(&sized, &data, &m, &mut timer, false));
        let summary = match outcome {
            Ok(s) => s,
            Err(e) => {
                result.failures.push((p, e.to_string()));
                continue;
            }
        };
        let runs = &summary.latent;
        let mut lat = vec![runs[0].mean_mse_forecast()];
        lat.extend(runs.iter().map(AssimilationRun::mean_mse_analysis));
        let mut phys = vec![runs[0].mean_physical_mse_forecast()];
        phys.extend(runs.iter().map(AssimilationRun::mean_physical_mse_analysis));
        let time: Vec<f64> = runs.iter().map(AssimilationRun::mean_correction_seconds).collect();
        result.latent.push(p.to_string(), lat)?;
        result.physical.push(p.to_string(), phys)?;
        result.time.push(p.to_string(), time)?;
    }
    Ok(result)
}
