//! ELBO maximization with Adam over shuffled block-diagonal minibatches.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph_ode::mse;
use crate::model::{Model, PreparedBatch};
use crate::scalar::{cast, widen, Scalar};
use crate::sim::Dataset;
use crate::task::{Episode, EpisodePlan, Phase, Task};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub kl_weight: f64,
    pub seed: u64,
    /// Each training sample conditions on a ratio drawn from this list,
    /// redrawn every epoch.
    pub observed_ratios: Vec<f64>,
    pub task: Task,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Validation samples scored per epoch (all when larger than the split).
    pub val_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 16,
            epochs: 100,
            kl_weight: 1.0,
            seed: 0,
            observed_ratios: vec![0.4, 0.6, 0.8],
            task: Task::Interpolation,
            clip_norm: 10.0,
            adam: AdamConfig::default(),
            val_samples: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.observed_ratios.is_empty() || self.observed_ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config(format!("observed ratios must be non-empty and lie in (0, 1], got {:?}", self.observed_ratios)));
        }
        if !(self.kl_weight >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("kl weight and clip norm must be non-negative".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was not finite; parameters and moments are untouched.
    Skipped,
}

/// Bias-corrected adaptive moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, cfg: AdamConfig) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect::<Vec<_>>();
        Self { cfg, lr, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Tensor<T>>) -> StepOutcome {
        if !grads.values().all(Tensor::is_finite) {
            log::warn!("non-finite gradient; optimizer step {} skipped", self.step + 1);
            return StepOutcome::Skipped;
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let (b1, b2, lr, eps): (T, T, T, T) = (cast(beta1), cast(beta2), cast(self.lr), cast(eps));
        let (c1, c2): (T, T) = (cast(c1), cast(c2));
        let one = T::one();
        for id in store.ids().collect::<Vec<_>>() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let g = grads.get(&id);
            let w = store.get_mut(id);
            for (k, ((w, m), v)) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).enumerate() {
                let g = g.map_or(T::zero(), |g| g.data()[k]);
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        StepOutcome::Applied
    }
}

/// Euclidean norm over every gradient entry.
pub fn grad_norm<T: Scalar>(grads: &BTreeMap<ParamId, Tensor<T>>) -> f64 {
    grads.values().map(|g| widen(g.norm_sq())).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<ParamId, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s: T = cast(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogSplit {
    Train,
    Val,
}

/// One line of the metric log. Terms are per-sample averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: LogSplit,
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    /// Mean pre-clipping gradient norm (training only).
    pub grad_norm: Option<f64>,
    /// Posterior-mean prediction error (validation only).
    pub mse: Option<f64>,
    pub skipped_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStatus {
    Completed,
    /// The loss became non-finite during `epoch`; parameters were restored
    /// to their values at the start of that epoch.
    Diverged { epoch: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub status: TrainStatus,
    pub records: Vec<EpochRecord>,
    /// Epoch with the lowest validation MSE.
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
}

/// Files written by [`train`] inside its output directory.
pub struct TrainFiles;

impl TrainFiles {
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const TIMING: &'static str = "timing.jsonl";
    pub const BEST: &'static str = "best.ckpt";
    pub const LAST: &'static str = "last.ckpt";
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Standard-normal noise shaped like the posterior of `batch`.
pub fn draw_noise<T: Scalar, R: Rng>(batch: &PreparedBatch, latent: usize, rng: &mut R) -> Tensor<T> {
    let data = (0..batch.n_objects() * latent).map(|_| cast(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(vec![batch.n_objects(), latent], data).expect("noise shape")
}

#[derive(Default)]
struct Totals {
    elbo: f64,
    reconstruction: f64,
    kl: f64,
    grad_norm: f64,
    batches: usize,
    samples: usize,
    skipped: usize,
    sse: f64,
    entries: usize,
}

impl Totals {
    fn record(&self, epoch: usize, split: LogSplit) -> EpochRecord {
        let n = self.samples.max(1) as f64;
        EpochRecord {
            epoch,
            split,
            elbo: self.elbo / n,
            reconstruction: self.reconstruction / n,
            kl: self.kl / n,
            grad_norm: (split == LogSplit::Train).then(|| self.grad_norm / self.batches.max(1) as f64),
            mse: (split == LogSplit::Val).then(|| self.sse / self.entries.max(1) as f64),
            skipped_steps: self.skipped,
        }
    }
}

struct Writers {
    dir: PathBuf,
    metrics: std::fs::File,
    timing: std::fs::File,
}

impl Writers {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), metrics: std::fs::File::create(dir.join(TrainFiles::METRICS))?, timing: std::fs::File::create(dir.join(TrainFiles::TIMING))? })
    }

    fn log(&mut self, rec: &EpochRecord) -> Result<()> {
        writeln!(self.metrics, "{}", serde_json::to_string(rec)?)?;
        Ok(())
    }

    fn time(&mut self, epoch: usize, seconds: f64) -> Result<()> {
        writeln!(self.timing, "{}", serde_json::json!({ "epoch": epoch, "wall_time": seconds }))?;
        Ok(())
    }
}

/// Trains `model` in place on `train_set`, scoring `val_set` after every
/// epoch. With `out`, writes the metric log, a timing log and checkpoints.
/// On divergence the model holds the last parameters with a finite loss.
pub fn train<T: Scalar>(model: &mut Model<T>, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut writers = out.map(Writers::open).transpose()?;
    let plan = EpisodePlan::for_dataset(train_set, cfg.task, Phase::Train);
    let val_plan = EpisodePlan::for_dataset(val_set, cfg.task, Phase::Train);
    let val_episodes = {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, usize::MAX));
        let n = cfg.val_samples.min(val_set.samples.len());
        val_set.samples[..n]
            .iter()
            .enumerate()
            .map(|(k, s)| val_plan.episode(s, cfg.observed_ratios[k % cfg.observed_ratios.len()], &mut rng))
            .collect::<Result<Vec<_>>>()?
    };
    let mut adam = Adam::new(&model.store, cfg.learning_rate, cfg.adam);
    let mut outcome = TrainOutcome { status: TrainStatus::Completed, records: Vec::new(), best_epoch: None, best_val_mse: None };
    let started = Instant::now();
    for epoch in 1..=cfg.epochs {
        let snapshot = model.store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        let mut order: Vec<usize> = (0..train_set.samples.len()).collect();
        order.shuffle(&mut rng);
        let mut totals = Totals::default();
        let mut diverged = false;
        for chunk in order.chunks(cfg.batch_size) {
            let episodes = chunk
                .iter()
                .map(|&i| {
                    let ratio = *cfg.observed_ratios.choose(&mut rng).expect("non-empty");
                    plan.episode(&train_set.samples[i], ratio, &mut rng)
                })
                .collect::<Result<Vec<Episode>>>()?;
            let batch = PreparedBatch::new(&episodes.iter().collect::<Vec<_>>())?;
            let eps = draw_noise::<T, _>(&batch, model.latent(), &mut rng);
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let vars = model.elbo(&mut tape, &p, &batch, &eps, cfg.kl_weight)?;
            let report = model.report(&tape, &vars, &batch, cfg.kl_weight);
            if !report.elbo.is_finite() {
                diverged = true;
                break;
            }
            let loss = tape.scale(vars.elbo, cast(-1.0 / batch.n_samples() as f64));
            let mut grads = tape.backward(loss)?.params();
            drop(tape);
            let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
            if adam.step(&mut model.store, &grads) == StepOutcome::Skipped {
                totals.skipped += 1;
            }
            totals.elbo += report.elbo;
            totals.reconstruction += report.reconstruction;
            totals.kl += report.kl;
            totals.grad_norm += norm;
            totals.batches += 1;
            totals.samples += batch.n_samples();
        }
        if diverged || !model.store.all_finite() {
            log::error!("non-finite loss in epoch {epoch}; restoring parameters from the start of the epoch");
            model.store = snapshot;
            outcome.status = TrainStatus::Diverged { epoch };
            break;
        }
        let rec = totals.record(epoch, LogSplit::Train);
        log::info!("epoch {epoch}: train elbo {:.4} recon {:.4} kl {:.4} grad {:.3}", rec.elbo, rec.reconstruction, rec.kl, rec.grad_norm.unwrap_or(0.0));
        outcome.records.push(rec);
        if !val_episodes.is_empty() {
            let val = validate(model, &val_episodes, cfg, epoch)?;
            let mse = val.mse.expect("validation mse");
            log::info!("epoch {epoch}: val elbo {:.4} mse {:.5}", val.elbo, mse);
            if outcome.best_val_mse.map_or(true, |b| mse < b) {
                outcome.best_val_mse = Some(mse);
                outcome.best_epoch = Some(epoch);
                if let Some(w) = &writers {
                    model.save(&w.dir.join(TrainFiles::BEST))?;
                }
            }
            outcome.records.push(val);
        }
        if let Some(w) = &mut writers {
            for rec in &outcome.records[outcome.records.len() - 1 - usize::from(!val_episodes.is_empty())..] {
                w.log(rec)?;
            }
            w.time(epoch, started.elapsed().as_secs_f64())?;
        }
    }
    if let Some(w) = &mut writers {
        model.save(&w.dir.join(TrainFiles::LAST))?;
        if outcome.best_epoch.is_none() {
            model.save(&w.dir.join(TrainFiles::BEST))?;
        }
        w.metrics.flush()?;
    }
    Ok(outcome)
}

/// Validation ELBO with noise fixed per epoch, and posterior-mean MSE.
fn validate<T: Scalar>(model: &Model<T>, episodes: &[Episode], cfg: &TrainConfig, epoch: usize) -> Result<EpochRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed ^ 0x5641_4C, epoch));
    let mut totals = Totals::default();
    for chunk in episodes.chunks(cfg.batch_size) {
        let batch = PreparedBatch::new(&chunk.iter().collect::<Vec<_>>())?;
        let eps = draw_noise::<T, _>(&batch, model.latent(), &mut rng);
        let mut tape = Tape::new();
        let p = model.store.bind_frozen(&mut tape);
        let vars = model.elbo(&mut tape, &p, &batch, &eps, cfg.kl_weight)?;
        let report = model.report(&tape, &vars, &batch, cfg.kl_weight);
        drop(tape);
        let pred = model.predict(&batch)?;
        let target = batch.target_tensor::<T>();
        totals.sse += mse(&pred, &target) * target.numel() as f64;
        totals.entries += target.numel();
        totals.elbo += report.elbo;
        totals.reconstruction += report.reconstruction;
        totals.kl += report.kl;
        totals.samples += batch.n_samples();
    }
    Ok(totals.record(epoch, LogSplit::Val))
}

/// Reads a metric log written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    std::fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(id: usize, value: f64) -> BTreeMap<ParamId, Tensor<f64>> {
        BTreeMap::from([(ParamId(id), Tensor::from_f64(&[1], &[value]).unwrap())])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let before = store.get(ParamId(0)).clone();
        let mut adam = Adam::new(&store, 0.1, AdamConfig::default());
        let zero = BTreeMap::from([(ParamId(0), Tensor::zeros(&[3]))]);
        for _ in 0..3 {
            assert_eq!(adam.step(&mut store, &zero), StepOutcome::Applied);
        }
        assert_eq!(store.get(ParamId(0)), &before);
        assert_eq!(adam.step(&mut store, &BTreeMap::new()), StepOutcome::Applied);
        assert_eq!(store.get(ParamId(0)), &before);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        for g in [3.0, -0.02] {
            let mut store = ParamStore::<f64>::new();
            store.add("w", Tensor::from_f64(&[1], &[1.0]).unwrap());
            let mut adam = Adam::new(&store, 0.01, AdamConfig { eps: 0.0, ..AdamConfig::default() });
            adam.step(&mut store, &single(0, g));
            let expect = 1.0 - 0.01 * g.signum();
            assert!((store.get(ParamId(0)).data()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[1], &[1.0]).unwrap());
        let mut adam = Adam::new(&store, 0.01, AdamConfig::default());
        assert_eq!(adam.step(&mut store, &single(0, f64::NAN)), StepOutcome::Skipped);
        assert_eq!(adam.steps(), 0);
        assert_eq!(store.get(ParamId(0)).data(), &[1.0]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap());
        let start = store.get(ParamId(0)).norm_sq().sqrt();
        let mut adam = Adam::new(&store, 0.05, AdamConfig::default());
        for _ in 0..200 {
            let g = store.get(ParamId(0)).map(|w| 2.0 * w);
            adam.step(&mut store, &BTreeMap::from([(ParamId(0), g)]));
        }
        assert!(store.get(ParamId(0)).norm_sq().sqrt() * 100.0 <= start);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = BTreeMap::from([(ParamId(0), Tensor::<f64>::from_f64(&[2], &[30.0, 40.0]).unwrap())]);
        assert_eq!(clip_grad_norm(&mut g, 10.0), 50.0);
        assert!((grad_norm(&g) - 10.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut g, 0.0), grad_norm(&g));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { observed_ratios: vec![1.2], ..TrainConfig::default() }.validate().is_err());
    }
}
