//! The task × ratio × variant experiment matrix with CSV and figure output.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::Variant;
use crate::error::{Error, Result};
use crate::eval::{evaluate, test_episodes, EvalSpec};
use crate::model::{Model, ModelConfig};
use crate::plot::{predicted_paths, write_trajectory_svg};
use crate::scalar::Scalar;
use crate::sim::DatasetBundle;
use crate::task::Task;
use crate::train::{train, TrainConfig, TrainFiles};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSpec {
    pub tasks: Vec<Task>,
    pub ratios: Vec<f64>,
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub model: ModelConfig,
    /// Train missing checkpoints from scratch with these settings; without
    /// it every checkpoint must already exist.
    pub train: Option<TrainConfig>,
    /// Holds `<task>-<variant>/best.ckpt`.
    pub checkpoint_dir: PathBuf,
    /// Test samples drawn per cell.
    pub plot_samples: usize,
    pub chunk: usize,
    pub denormalize: bool,
}

impl Default for MatrixSpec {
    fn default() -> Self {
        Self {
            tasks: Task::ALL.to_vec(),
            ratios: vec![0.4, 0.6, 0.8],
            variants: vec![Variant::Full],
            seed: 0,
            model: ModelConfig::default(),
            train: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            plot_samples: 2,
            chunk: 16,
            denormalize: false,
        }
    }
}

/// One CSV line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub task: Task,
    pub ratio: f64,
    pub variant: Variant,
    pub mse: f64,
    pub ci: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub task: Task,
    pub variant: Variant,
    pub ratio: Option<f64>,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
    pub failures: Vec<CellFailure>,
}

pub const MATRIX_CSV: &str = "matrix.csv";
pub const PLOT_DIR: &str = "plots";

/// Directory holding the checkpoint of one (task, variant) model.
pub fn run_dir(checkpoint_dir: &Path, task: Task, variant: Variant) -> PathBuf {
    checkpoint_dir.join(format!("{task}-{variant}"))
}

/// File name of a trajectory figure, e.g. `interpolation-full-r40-s003.svg`.
pub fn plot_file_name(task: Task, variant: Variant, ratio: f64, sample: usize) -> String {
    format!("{task}-{variant}-r{:02}-s{sample:03}.svg", (ratio * 100.0).round() as u32)
}

pub fn write_csv<W: Write>(rows: &[MatrixRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<MatrixRow>> {
    csv::Reader::from_reader(r).deserialize().map(|r| Ok(r?)).collect()
}

fn cell_model<T: Scalar>(spec: &MatrixSpec, data: &DatasetBundle, task: Task, variant: Variant) -> Result<Model<T>> {
    let mut cfg = spec.model.clone();
    cfg.encoder.variant = variant;
    let dir = run_dir(&spec.checkpoint_dir, task, variant);
    let ckpt = dir.join(TrainFiles::BEST);
    if ckpt.exists() {
        return Model::load(cfg, &ckpt);
    }
    let Some(tc) = &spec.train else {
        return Err(Error::Config(format!("missing checkpoint {} and training is disabled", ckpt.display())));
    };
    let tc = TrainConfig { task, seed: spec.seed, ..tc.clone() };
    let mut model = Model::<T>::new(cfg, spec.seed)?;
    let outcome = train(&mut model, &data.train, &data.val, &tc, Some(&dir))?;
    log::info!("{task}/{variant}: trained, status {:?}, best epoch {:?}", outcome.status, outcome.best_epoch);
    Model::load(model.cfg.clone(), &ckpt)
}

/// Runs every cell; a failing cell is recorded and the rest continue. With
/// `out`, writes `matrix.csv` and figures under `plots/`.
pub fn run_experiment_matrix<T: Scalar>(spec: &MatrixSpec, data: &DatasetBundle, out: Option<&Path>) -> Result<MatrixReport> {
    if spec.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::Config(format!("ratios must lie in (0, 1], got {:?}", spec.ratios)));
    }
    let mut report = MatrixReport::default();
    for &task in &spec.tasks {
        for &variant in &spec.variants {
            let model = match cell_model::<T>(spec, data, task, variant) {
                Ok(m) => m,
                Err(e) => {
                    log::error!("{task}/{variant}: {e}");
                    report.failures.push(CellFailure { task, variant, ratio: None, error: e.to_string() });
                    continue;
                }
            };
            for &ratio in &spec.ratios {
                let cell = || -> Result<MatrixRow> {
                    let es = EvalSpec { chunk: spec.chunk, denormalize: spec.denormalize, ..EvalSpec::new(task, ratio, spec.seed) };
                    let r = evaluate(&model, &data.test, &es)?;
                    if let Some(dir) = out {
                        write_cell_plots(&model, data, &es, variant, spec.plot_samples, &dir.join(PLOT_DIR))?;
                    }
                    Ok(MatrixRow { task, ratio, variant, mse: r.mse, ci: r.ci, seed: spec.seed })
                };
                match cell() {
                    Ok(row) => report.rows.push(row),
                    Err(e) => {
                        log::error!("{task}/{variant}/{ratio}: {e}");
                        report.failures.push(CellFailure { task, variant, ratio: Some(ratio), error: e.to_string() });
                    }
                }
            }
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_csv(&report.rows, std::fs::File::create(dir.join(MATRIX_CSV))?)?;
    }
    Ok(report)
}

/// Figures for the first `samples` test episodes of one cell.
pub fn write_cell_plots<T: Scalar>(model: &Model<T>, data: &DatasetBundle, spec: &EvalSpec, variant: Variant, samples: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    if samples == 0 {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir)?;
    let mut head = data.test.clone();
    head.samples.truncate(samples);
    let episodes = test_episodes(&head, spec.task, spec.ratio, spec.seed)?;
    let mut written = Vec::new();
    for (k, e) in episodes.iter().enumerate() {
        let path = dir.join(plot_file_name(spec.task, variant, spec.ratio, k));
        let paths = predicted_paths(model, e, 200)?;
        let title = format!("{} {} {:.0}% sample {k}", spec.task, variant, spec.ratio * 100.0);
        write_trajectory_svg(&path, &title, e, &paths)?;
        written.push(path);
    }
    Ok(written)
}
