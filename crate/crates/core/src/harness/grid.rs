use std::io::Write;
use std::time::Instant;

use super::config::{derive_seed, ExperimentConfig};
use super::table::ResultTable;
use crate::cae::{cross_validate, CaeArchitecture, CrossValidation, FoldResult, LatentState, TrainConfig};
use crate::dataset::{windows_for_targets, SplitAssignment};
use crate::error::{Error, Result};
use crate::scene::Field;
use crate::surrogate::{train_lstm, LstmArchitecture};

/// One point of a Cartesian grid.
#[derive(Clone, Debug)]
pub struct GridCell<C> {
    pub label: String,
    /// Axis values in axis order, already formatted.
    pub params: Vec<String>,
    pub config: C,
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub label: String,
    pub params: Vec<String>,
    pub result: std::result::Result<CrossValidation, String>,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub axes: Vec<String>,
    pub cells: Vec<CellOutcome>,
    /// Index into `cells`.
    pub best: Option<usize>,
}

impl GridResult {
    pub fn best_cell(&self) -> Option<&CellOutcome> {
        self.best.map(|i| &self.cells[i])
    }

    /// Statistics of the cells that completed.
    pub fn table(&self) -> Result<ResultTable> {
        let mut t = ResultTable::new(
            "cell",
            &["mean_mse", "std_mse", "mean_mae", "std_mae", "mean_time", "std_time"],
        );
        for c in &self.cells {
            if let Ok(cv) = &c.result {
                t.push(c.label.clone(), summary_row(cv))?;
            }
        }
        Ok(t)
    }
}

fn summary_row(cv: &CrossValidation) -> Vec<f64> {
    vec![cv.mse.mean, cv.mse.std, cv.mae.mean, cv.mae.std, cv.seconds.mean, cv.seconds.std]
}

/// Lowest mean MSE; ties go to the lower MSE spread, then the lower mean
/// time. Failed or non-finite cells never win.
pub fn best_cell(cells: &[CellOutcome]) -> Option<usize> {
    let key = |cv: &CrossValidation| (cv.mse.mean, cv.mse.std, cv.seconds.mean);
    cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.result.as_ref().ok().map(|cv| (i, key(cv))))
        .filter(|(_, k)| k.0.is_finite())
        .min_by(|(_, a), (_, b)| {
            a.0.total_cmp(&b.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.total_cmp(&b.2))
        })
        .map(|(i, _)| i)
}

/// Evaluates every cell in order. A failing cell is recorded with its error
/// and the search carries on.
pub fn run_grid<C>(
    axes: &[&str],
    cells: Vec<GridCell<C>>,
    eval: impl Fn(&C) -> Result<CrossValidation>,
) -> Result<GridResult> {
    if cells.is_empty() {
        return Err(Error::Invalid("grid has no cells".into()));
    }
    let outcomes: Vec<CellOutcome> = cells
        .into_iter()
        .map(|cell| {
            let result = eval(&cell.config).map_err(|e| e.to_string()).and_then(|cv| {
                if cv.mse.mean.is_finite() {
                    Ok(cv)
                } else {
                    Err("non-finite loss".to_string())
                }
            });
            CellOutcome {
                label: cell.label,
                params: cell.params,
                result,
            }
        })
        .collect();
    Ok(GridResult {
        axes: axes.iter().map(|a| a.to_string()).collect(),
        best: best_cell(&outcomes),
        cells: outcomes,
    })
}

/// `cell,<axes...>,mean_mse,...,std_time,status`; failed cells leave the
/// statistics empty and carry the error in `status`.
pub fn write_grid_csv<W: Write>(out: &mut W, grid: &GridResult) -> Result<()> {
    write!(out, "cell")?;
    for a in &grid.axes {
        write!(out, ",{a}")?;
    }
    writeln!(out, ",mean_mse,std_mse,mean_mae,std_mae,mean_time,std_time,status")?;
    for (i, c) in grid.cells.iter().enumerate() {
        write!(out, "{}", c.label)?;
        for p in &c.params {
            write!(out, ",{p}")?;
        }
        match &c.result {
            Ok(cv) => {
                for v in summary_row(cv) {
                    write!(out, ",{v:e}")?;
                }
                let status = if grid.best == Some(i) { "best" } else { "ok" };
                writeln!(out, ",{status}")?;
            }
            Err(e) => {
                let msg = e.replace([',', '\n'], ";");
                writeln!(out, ",,,,,,,failed: {msg}")?;
            }
        }
    }
    Ok(())
}

/// Raw per-fold numbers: `cell,repeat,fold,mse,mae,seconds`.
pub fn write_folds_csv<W: Write>(out: &mut W, grid: &GridResult) -> Result<()> {
    writeln!(out, "cell,repeat,fold,mse,mae,seconds")?;
    for c in &grid.cells {
        if let Ok(cv) = &c.result {
            for f in &cv.folds {
                writeln!(out, "{},{},{},{:e},{:e},{:e}", c.label, f.repeat, f.fold, f.mse, f.mae, f.seconds)?;
            }
        }
    }
    Ok(())
}

fn product<A: Clone, B: Clone>(a: &[A], b: &[B]) -> Vec<(A, B)> {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| (x.clone(), y.clone())))
        .collect()
}

/// Autoencoder grid over filters × activation × epochs × batch, each cell
/// scored by k-fold cross validation on `data`.
pub fn run_ae_grid(cfg: &ExperimentConfig, data: &[Field]) -> Result<GridResult> {
    let g = &cfg.gridsearch.ae;
    let mut cells = vec![];
    for ((filters, act), (epochs, batch)) in product(
        &product(&g.filters, &g.activation),
        &product(&g.epochs, &g.batch),
    ) {
        let arch = CaeArchitecture {
            filters,
            activation: act,
            ..cfg.cae_arch()
        };
        let train = TrainConfig {
            epochs,
            batch,
            ..cfg.cae_train()
        };
        cells.push(GridCell {
            label: format!("f{filters}_{}_e{epochs}_b{batch}", act.name()),
            params: vec![filters.to_string(), act.name().into(), epochs.to_string(), batch.to_string()],
            config: (arch, train),
        });
    }
    run_grid(&["filters", "activation", "epochs", "batch"], cells, |(arch, train)| {
        cross_validate(arch, data, g.folds, g.repeats, train)
    })
}

#[derive(Clone, Debug)]
struct LstmCell {
    arch: LstmArchitecture,
    train: TrainConfig,
}

/// LSTM grid over hidden × activation × look-back × epochs × batch. Each
/// cell is trained `repeats` times with different seeds on the training
/// windows and scored on the validation windows.
pub fn run_lstm_grid(cfg: &ExperimentConfig, series: &[LatentState], split: &SplitAssignment) -> Result<GridResult> {
    let g = &cfg.gridsearch.lstm;
    let mut cells = vec![];
    let shape = product(&product(&g.hidden, &g.activation), &product(&g.lookback, &product(&g.epochs, &g.batch)));
    for ((hidden, act), (lookback, (epochs, batch))) in shape {
        cells.push(GridCell {
            label: format!("h{hidden}_{}_q{lookback}_e{epochs}_b{batch}", act.name()),
            params: vec![
                hidden.to_string(),
                act.name().into(),
                lookback.to_string(),
                epochs.to_string(),
                batch.to_string(),
            ],
            config: LstmCell {
                arch: LstmArchitecture {
                    hidden,
                    lookback,
                    activation: act,
                    ..cfg.lstm_arch()
                },
                train: TrainConfig {
                    epochs,
                    batch,
                    ..cfg.lstm_train()
                },
            },
        });
    }
    run_grid(
        &["hidden", "activation", "lookback", "epochs", "batch"],
        cells,
        |cell: &LstmCell| {
            let q = cell.arch.lookback;
            let train = windows_for_targets(series, &split.train, q);
            let val = windows_for_targets(series, &split.val, q);
            if val.is_empty() {
                return Err(Error::Invalid("no validation windows".into()));
            }
            let mut folds = vec![];
            for repeat in 0..g.repeats.max(1) {
                let tc = TrainConfig {
                    seed: derive_seed(cell.train.seed, repeat as u64 + 1),
                    ..cell.train
                };
                let start = Instant::now();
                let (model, _) = train_lstm(&cell.arch, &train, &val, &tc)?;
                let seconds = start.elapsed().as_secs_f64();
                let loss = model.evaluate(&val)?;
                folds.push(FoldResult {
                    repeat,
                    fold: 0,
                    mse: loss.mse,
                    mae: loss.mae,
                    seconds,
                });
            }
            Ok(CrossValidation::from_folds(folds))
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Summary;

    fn cv(mse: f64, std: f64, secs: f64) -> CrossValidation {
        CrossValidation {
            folds: vec![],
            mse: Summary { mean: mse, std },
            mae: Summary::default(),
            seconds: Summary { mean: secs, std: 0.0 },
        }
    }

    fn outcome(label: &str, r: std::result::Result<CrossValidation, String>) -> CellOutcome {
        CellOutcome {
            label: label.into(),
            params: vec![],
            result: r,
        }
    }

    #[test]
    fn best_cell_tie_breaks() {
        let cells = vec![
            outcome("a", Ok(cv(1.0, 0.5, 1.0))),
            outcome("b", Ok(cv(1.0, 0.2, 9.0))),
            outcome("c", Ok(cv(1.0, 0.2, 3.0))),
            outcome("d", Err("boom".into())),
        ];
        assert_eq!(best_cell(&cells), Some(2));
        assert_eq!(best_cell(&cells[3..]), None);
    }

    #[test]
    fn failed_cell_is_isolated() {
        let cells = vec![
            GridCell {
                label: "bad".into(),
                params: vec!["1".into()],
                config: 1,
            },
            GridCell {
                label: "good".into(),
                params: vec!["2".into()],
                config: 2,
            },
        ];
        let g = run_grid(&["x"], cells, |&c| {
            if c == 1 {
                Err(Error::Diverged {
                    epoch: 3,
                    detail: "nan".into(),
                })
            } else {
                Ok(cv(0.5, 0.0, 1.0))
            }
        })
        .unwrap();
        assert!(g.cells[0].result.is_err());
        assert_eq!(g.best_cell().unwrap().label, "good");
        let mut buf = vec![];
        write_grid_csv(&mut buf, &g).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("failed"));
        assert!(text.lines().nth(2).unwrap().ends_with(",best"));
        assert!(run_grid::<u8>(&["x"], vec![], |_| Ok(cv(0.0, 0.0, 0.0))).is_err());
    }
}
