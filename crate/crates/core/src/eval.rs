//! Test-set scoring: posterior-mean predictions against held-out targets,
//! plus the constant-zero and last-observation-carried-forward baselines.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, PreparedBatch};
use crate::scalar::{widen, Scalar};
use crate::sim::{Dataset, ObservationSet, ScaleRecord};
use crate::task::{Episode, EpisodePlan, Phase, Task};

/// One (task, ratio) evaluation of a test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub task: Task,
    pub ratio: f64,
    pub seed: u64,
    /// Samples merged into one forward pass.
    pub chunk: usize,
    /// Score in the original feature units instead of normalized ones.
    pub denormalize: bool,
}

impl EvalSpec {
    pub fn new(task: Task, ratio: f64, seed: u64) -> Self {
        Self { task, ratio, seed, chunk: 16, denormalize: false }
    }
}

/// Pooled squared error over every (object, time, feature) target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub task: Task,
    pub ratio: f64,
    pub mse: f64,
    /// 95% normal half-width of the mean of per-sample errors.
    pub ci: f64,
    /// Scored entries.
    pub count: usize,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Predicts 0 for every feature.
    Zero,
    /// Carries each object's latest conditioning observation at or before the
    /// target time forward; targets before the first one use the first.
    Locf,
}

impl Baseline {
    pub const ALL: [Baseline; 2] = [Baseline::Zero, Baseline::Locf];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Zero => "zero",
            Baseline::Locf => "locf",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL.into_iter().find(|b| b.name() == s).ok_or_else(|| Error::Config(format!("unknown baseline {s:?} (expected zero or locf)")))
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Test episodes of `ds`; sample `k` is subsampled with its own generator so
/// that the split does not depend on chunking or on the other samples.
pub fn test_episodes(ds: &Dataset, task: Task, ratio: f64, seed: u64) -> Result<Vec<Episode>> {
    let plan = EpisodePlan::for_dataset(ds, task, Phase::Test);
    ds.samples
        .iter()
        .enumerate()
        .map(|(k, s)| plan.episode(s, ratio, &mut ChaCha8Rng::seed_from_u64(mix(seed, k as u64))))
        .collect()
}

/// Sum of squared errors and entry count of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleError {
    pub sse: f64,
    pub count: usize,
}

/// Pools per-sample errors into an [`MseReport`].
pub fn pool(task: Task, ratio: f64, errors: &[SampleError]) -> Result<MseReport> {
    let count: usize = errors.iter().map(|e| e.count).sum();
    if count == 0 {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let mse = errors.iter().map(|e| e.sse).sum::<f64>() / count as f64;
    let per: Vec<f64> = errors.iter().filter(|e| e.count > 0).map(|e| e.sse / e.count as f64).collect();
    let n = per.len() as f64;
    let ci = if per.len() > 1 {
        let m = per.iter().sum::<f64>() / n;
        let var = per.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    Ok(MseReport { task, ratio, mse, ci, count, samples: errors.len() })
}

fn squared_error(pred: &[f64], target: &[f64], scale: Option<&ScaleRecord>) -> f64 {
    let (mut p, mut t) = (pred.to_vec(), target.to_vec());
    if let Some(s) = scale {
        s.denormalize(&mut p);
        s.denormalize(&mut t);
    }
    p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Posterior-mean predictions `[targets, D]` for each episode, in target order
/// (object-major, time-sorted within each object).
pub fn predict_episodes<T: Scalar>(model: &Model<T>, episodes: &[Episode], chunk: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(episodes.len());
    for part in episodes.chunks(chunk.max(1)) {
        let batch = PreparedBatch::new(&part.iter().collect::<Vec<_>>())?;
        let pred = model.predict(&batch)?;
        let mut per: Vec<Vec<Vec<f64>>> = vec![Vec::new(); part.len()];
        for (r, &s) in batch.target_samples().iter().enumerate() {
            per[s].push(pred.row(r).iter().map(|&v| widen(v)).collect());
        }
        out.extend(per);
    }
    Ok(out)
}

fn score(ds: &Dataset, spec: &EvalSpec, episodes: &[Episode], preds: &[Vec<Vec<f64>>]) -> Result<MseReport> {
    let scale = spec.denormalize.then_some(&ds.header.scale);
    let errors: Vec<SampleError> = episodes
        .iter()
        .zip(preds)
        .map(|(e, p)| {
            let targets = e.targets.objects.iter().flatten();
            let sse = targets.clone().zip(p).map(|(o, p)| squared_error(p, &o.features, scale)).sum();
            SampleError { sse, count: targets.map(|o| o.features.len()).sum() }
        })
        .collect();
    pool(spec.task, spec.ratio, &errors)
}

/// Scores `model` on the test split `ds`.
pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &Dataset, spec: &EvalSpec) -> Result<MseReport> {
    let episodes = test_episodes(ds, spec.task, spec.ratio, spec.seed)?;
    let preds = predict_episodes(model, &episodes, spec.chunk)?;
    score(ds, spec, &episodes, &preds)
}

/// Baseline predictions for one episode, in target order.
pub fn baseline_predictions(episode: &Episode, baseline: Baseline) -> Vec<Vec<f64>> {
    predict_baseline(&episode.conditioning, &episode.targets, baseline)
}

fn predict_baseline(cond: &ObservationSet, targets: &ObservationSet, baseline: Baseline) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (c, t) in cond.objects.iter().zip(&targets.objects) {
        for o in t {
            out.push(match baseline {
                Baseline::Zero => vec![0.0; o.features.len()],
                Baseline::Locf => {
                    let last = c.iter().filter(|x| x.time <= o.time).last().or_else(|| c.first());
                    last.map_or_else(|| vec![0.0; o.features.len()], |x| x.features.clone())
                }
            });
        }
    }
    out
}

/// Scores a baseline on exactly the episodes [`evaluate`] would use.
pub fn evaluate_baseline(ds: &Dataset, spec: &EvalSpec, baseline: Baseline) -> Result<MseReport> {
    let episodes = test_episodes(ds, spec.task, spec.ratio, spec.seed)?;
    let preds: Vec<_> = episodes.iter().map(|e| baseline_predictions(e, baseline)).collect();
    score(ds, spec, &episodes, &preds)
}
