//! Command-line driver. Exit codes: 0 success, 2 configuration error,
//! 3 numerical failure, 1 anything else.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lada::assimilate::{field_covariance, standard_da, FullStep};
use lada::cae::{train_cae, CaeModel};
use lada::harness::{
    assimilate_all, encode_all, lstm_samples, prepare_data, run_ae_grid, run_full_pipeline,
    run_latent_sweep, run_lstm_grid, write_folds_csv, write_grid_csv, write_history,
    write_runs_csv, write_split, write_triptychs, ExperimentConfig, PreparedData, RSampleSet, StageTimer,
    TrainedModels,
};
use lada::scene::{snapshot_name, write_pgm};
use lada::surrogate::{persistence_baseline, train_lstm, LstmModel};
use lada::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "lada", version, about = "Latent assimilation experiments")]
struct Cli {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the scene and write observation snapshots.
    Generate,
    /// Write the train/val/test assignment.
    Split,
    /// Train the autoencoder.
    TrainAe,
    /// Train the LSTM on latents from a saved autoencoder.
    TrainLstm,
    /// Latent assimilation with saved models.
    Assimilate,
    /// Full-grid assimilation baseline.
    BaselineDa,
    /// Autoencoder hyperparameter grid with k-fold cross validation.
    GridsearchAe,
    /// LSTM hyperparameter grid with repeated fits.
    GridsearchLstm,
    /// Retrain and assimilate for each configured latent size.
    SweepLatent,
    /// Run the whole pipeline and write every table.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load_models(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainedModels> {
    let dir = &cfg.out_dir;
    let missing = |name: &str| Error::Config(format!("{} not found; run the training subcommands first", dir.join(name).display()));
    let cae_path = dir.join("cae.lada");
    let lstm_path = dir.join("lstm.lada");
    if !cae_path.exists() {
        return Err(missing("cae.lada"));
    }
    if !lstm_path.exists() {
        return Err(missing("lstm.lada"));
    }
    let cae = CaeModel::load(&cae_path)?;
    let lstm = LstmModel::load(&lstm_path)?;
    if cae.arch != cfg.cae_arch() || lstm.arch != cfg.lstm_arch() {
        return Err(Error::Config("saved models do not match the config's architecture".into()));
    }
    let series = encode_all(&cae, &data.fields)?;
    let (_, val) = lstm_samples(&series, &data.split, lstm.lookback());
    Ok(TrainedModels {
        lstm_val_mse: lstm.evaluate(&val)?.mse,
        persistence_val_mse: persistence_baseline(&val).mse,
        cae,
        cae_history: Default::default(),
        lstm,
        lstm_history: Default::default(),
        series,
    })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut timer = StageTimer::default();
    match cli.command {
        Command::Generate => {
            let data = prepare_data(&cfg)?;
            let mut w = create(&dir.join("scene_summary.csv"))?;
            writeln!(w, "timestep,mean,min,max")?;
            for (t, f) in data.fields.iter().enumerate() {
                let (lo, hi) = f.min_max();
                writeln!(w, "{t},{:e},{lo:e},{hi:e}", f.mean())?;
            }
            w.flush()?;
            fs::create_dir_all(dir.join("truth"))?;
            fs::create_dir_all(dir.join("observed"))?;
            for (&t, obs) in data.observation_timesteps.iter().zip(&data.observations) {
                write_pgm(&data.fields[t], &dir.join("truth").join(snapshot_name(t)))?;
                write_pgm(obs, &dir.join("observed").join(snapshot_name(t)))?;
            }
            println!("{} snapshots, {} observation timesteps", data.fields.len(), data.observations.len());
        }
        Command::Split => {
            let data = prepare_data(&cfg)?;
            let path = write_split(&dir, &data.split)?;
            let s = &data.split;
            println!("train {} val {} test {} -> {}", s.train.len(), s.val.len(), s.test.len(), path.display());
        }
        Command::TrainAe => {
            let data = prepare_data(&cfg)?;
            let train = data.training_fields(&data.split.train);
            let val = data.training_fields(&data.split.val);
            let (cae, hist) = timer.run("train-ae", || train_cae(&cfg.cae_arch(), &train, &val, &cfg.cae_train()))?;
            cae.save(&dir.join("cae.lada"))?;
            write_history(&dir.join("cae_history.csv"), &hist)?;
            println!("val mse {:e} -> {:e}", hist.initial_val.mse, hist.final_val().mse);
        }
        Command::TrainLstm => {
            let data = prepare_data(&cfg)?;
            let path = dir.join("cae.lada");
            if !path.exists() {
                return Err(Error::Config(format!("{} not found; run train-ae first", path.display())));
            }
            let cae = CaeModel::load(&path)?;
            let series = encode_all(&cae, &data.fields)?;
            let (tr, va) = lstm_samples(&series, &data.split, cfg.lstm.lookback);
            let (lstm, hist) = timer.run("train-lstm", || train_lstm(&cfg.lstm_arch(), &tr, &va, &cfg.lstm_train()))?;
            lstm.save(&dir.join("lstm.lada"))?;
            write_history(&dir.join("lstm_history.csv"), &hist)?;
            println!(
                "val mse {:e} (persistence {:e})",
                lstm.evaluate(&va)?.mse,
                persistence_baseline(&va).mse
            );
        }
        Command::Assimilate => {
            let data = prepare_data(&cfg)?;
            let models = load_models(&cfg, &data)?;
            let summary = assimilate_all(&cfg, &data, &models, &mut timer, false)?;
            let runs: Vec<_> = summary.latent.iter().collect();
            write_runs_csv(&dir.join("la_records.csv"), &runs)?;
            summary.latent_table()?.save(&dir.join("la_latent.csv"))?;
            summary.physical_table()?.save(&dir.join("la_physical.csv"))?;
            for run in &summary.latent {
                write_triptychs(&dir, run)?;
            }
            summary.latent_table()?.write_csv(&mut std::io::stdout())?;
        }
        Command::BaselineDa => {
            let data = prepare_data(&cfg)?;
            let assim = cfg.assim();
            let q = field_covariance(&data.subset(&data.split.val), &assim)?;
            let steps: Vec<FullStep> = data
                .observation_steps()
                .into_iter()
                .map(|s| FullStep {
                    timestep: s.timestep,
                    forecast: data.fields[s.timestep].clone(),
                    observation: s.observation,
                    truth: s.truth,
                })
                .collect();
            let errors = match cfg.assimilation.r_sample {
                RSampleSet::ValidationErrors => Some(data.validation_errors()),
                RSampleSet::Observations => None,
            };
            let mut ok = vec![];
            for &mode in &cfg.assimilation.r_modes {
                match standard_da(&steps, &q, mode, errors.as_deref(), &assim) {
                    Ok(run) => ok.push(run),
                    Err(e) if e.is_numerical() => eprintln!("{}: skipped ({e})", mode.label()),
                    Err(e) => return Err(e),
                }
            }
            let refs: Vec<_> = ok.iter().collect();
            write_runs_csv(&dir.join("sda_records.csv"), &refs)?;
            for run in &ok {
                println!(
                    "{}: mse {:e} -> {:e}, {:.3e} s",
                    run.r_mode.label(),
                    run.mean_mse_forecast(),
                    run.mean_mse_analysis(),
                    run.mean_correction_seconds()
                );
            }
        }
        Command::GridsearchAe => {
            let data = prepare_data(&cfg)?;
            let mut idx = data.split.train.clone();
            idx.extend(&data.split.val);
            idx.sort_unstable();
            let grid = run_ae_grid(&cfg, &data.subset(&idx))?;
            write_grid_csv(&mut create(&dir.join("gridsearch_ae.csv"))?, &grid)?;
            write_folds_csv(&mut create(&dir.join("gridsearch_ae_folds.csv"))?, &grid)?;
            report_best(&grid)?;
        }
        Command::GridsearchLstm => {
            let data = prepare_data(&cfg)?;
            let path = dir.join("cae.lada");
            if !path.exists() {
                return Err(Error::Config(format!("{} not found; run train-ae first", path.display())));
            }
            let series = encode_all(&CaeModel::load(&path)?, &data.fields)?;
            let grid = run_lstm_grid(&cfg, &series, &data.split)?;
            write_grid_csv(&mut create(&dir.join("gridsearch_lstm.csv"))?, &grid)?;
            write_folds_csv(&mut create(&dir.join("gridsearch_lstm_folds.csv"))?, &grid)?;
            report_best(&grid)?;
        }
        Command::SweepLatent => {
            let sweep = run_latent_sweep(&cfg, &cfg.sweep.latent_sizes)?;
            sweep.save(&dir)?;
            sweep.latent.write_csv(&mut std::io::stdout())?;
            for (p, e) in &sweep.failures {
                eprintln!("latent size {p} failed: {e}");
            }
        }
        Command::Report => {
            let report = run_full_pipeline(&cfg)?;
            report.assimilation.latent_table()?.write_csv(&mut std::io::stdout())?;
            println!("{} files written to {}", report.outputs.len(), dir.display());
        }
    }
    Ok(())
}

fn report_best(grid: &lada::harness::GridResult) -> Result<()> {
    match grid.best_cell() {
        Some(c) => println!("best cell: {}", c.label),
        None => println!("every cell failed"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
