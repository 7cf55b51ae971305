//! The full latent graph ODE: encoder, ODE function and decoder sharing one
//! parameter store, plus batch assembly and the evidence lower bound.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::encoder::{Encoder, EncoderBatch, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph_ode::{log_norm_const, rk4_solve, Decoder, DecoderConfig, OdeConfig, OdeFunc, OdeSystem};
use crate::scalar::{cast, widen, Scalar};
use crate::task::Episode;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ode: OdeConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.ode.validate()?;
        if self.encoder.latent != self.ode.latent {
            return Err(Error::Config(format!("encoder latent width {} differs from ODE latent width {}", self.encoder.latent, self.ode.latent)));
        }
        if self.encoder.input_dim != self.decoder.output_dim {
            return Err(Error::Config(format!(
                "encoder input width {} differs from decoder output width {}",
                self.encoder.input_dim, self.decoder.output_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub ode: OdeFunc,
    pub decoder: Decoder,
}

/// Episodes merged into one block-diagonal system sharing a start time and
/// one solve over the union of all target times.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub enc: EncoderBatch,
    pub sys: OdeSystem,
    pub t_start: f64,
    /// Sorted distinct target times.
    pub times: Vec<f64>,
    /// Row of the stacked solver output (`time * objects + object`) for each target.
    target_rows: Arc<[usize]>,
    /// Global object of each target.
    target_object: Vec<usize>,
    /// Episode of each target.
    target_sample: Vec<usize>,
    /// Row-major `[targets, D]`.
    targets: Vec<f64>,
    dim: usize,
    n_samples: usize,
}

impl PreparedBatch {
    pub fn new(episodes: &[&Episode]) -> Result<Self> {
        let first = episodes.first().ok_or_else(|| Error::Config("empty batch".into()))?;
        let t_start = first.t_start;
        if episodes.iter().any(|e| e.t_start != t_start) {
            return Err(Error::Config("episodes in one batch must share a start time".into()));
        }
        let graphs: Vec<&_> = episodes.iter().map(|e| &e.graph).collect();
        let enc = EncoderBatch::new(&graphs)?;
        let relations: Vec<&_> = episodes.iter().map(|e| &e.targets.relations).collect();
        let sys = OdeSystem::new(&relations);
        let mut times: Vec<f64> = episodes.iter().flat_map(|e| e.targets.objects.iter().flatten().map(|o| o.time)).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        if times.is_empty() {
            return Err(Error::Config("batch has no targets".into()));
        }
        let n = sys.n_objects();
        let dim = first.targets.feature_dim().max(first.conditioning.feature_dim());
        let (mut rows, mut target_object, mut target_sample, mut targets) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut offset = 0;
        for (s, e) in episodes.iter().enumerate() {
            if e.targets.n_objects() != e.graph.n_objects {
                return Err(Error::Config("targets and conditioning disagree on the object count".into()));
            }
            for (i, list) in e.targets.objects.iter().enumerate() {
                for o in list {
                    if o.features.len() != dim {
                        return Err(Error::Config(format!("target width {} differs from {dim}", o.features.len())));
                    }
                    let k = times.binary_search_by(|t| t.total_cmp(&o.time)).expect("time is in the union");
                    rows.push(k * n + offset + i);
                    target_object.push(offset + i);
                    target_sample.push(s);
                    targets.extend_from_slice(&o.features);
                }
            }
            offset += e.targets.n_objects();
        }
        Ok(Self { enc, sys, t_start, times, target_rows: rows.into(), target_object, target_sample, targets, dim, n_samples: episodes.len() })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_objects(&self) -> usize {
        self.sys.n_objects()
    }

    pub fn n_targets(&self) -> usize {
        self.target_object.len()
    }

    pub fn target_objects(&self) -> &[usize] {
        &self.target_object
    }

    pub fn target_samples(&self) -> &[usize] {
        &self.target_sample
    }

    /// Targets as a `[targets, D]` tensor.
    pub fn target_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(vec![self.n_targets(), self.dim], self.targets.iter().map(|&v| cast(v)).collect()).expect("target shape")
    }
}

/// Tape handles of one ELBO evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub elbo: Var,
    pub reconstruction: Var,
    pub kl: Var,
    pub mean: Var,
    pub std: Var,
    /// `[targets, D]`
    pub prediction: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTerms {
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub kl_weight: f64,
    pub objects: Vec<ObjectTerms>,
}

/// `sum 0.5 (std^2 + mean^2 - 1 - log std^2)` over every entry, on a tape.
pub fn kl_diag_gaussian<T: Scalar>(tape: &mut Tape<T>, mean: Var, std: Var) -> Result<Var> {
    let s2 = tape.square(std);
    let m2 = tape.square(mean);
    let a = tape.add(s2, m2)?;
    let a = tape.offset(a, -T::one());
    let a = tape.sum_all(a);
    let a = tape.scale(a, cast(0.5));
    let l = tape.log(std);
    let l = tape.sum_all(l);
    Ok(tape.sub(a, l)?)
}

/// Closed-form KL of one diagonal Gaussian against the standard normal.
pub fn kl_diag_gaussian_values(mean: &[f64], std: &[f64]) -> f64 {
    mean.iter().zip(std).map(|(&m, &s)| 0.5 * (s * s + m * m - 1.0) - s.ln()).sum()
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg.encoder.clone(), &mut store, &mut rng)?;
        let ode = OdeFunc::new(cfg.ode.clone(), &mut store, &mut rng)?;
        let decoder = Decoder::new(cfg.decoder.clone(), cfg.ode.state_width(), &mut store, &mut rng)?;
        Ok(Self { cfg, store, encoder, ode, decoder })
    }

    pub fn latent(&self) -> usize {
        self.cfg.ode.latent
    }

    /// Solves from `z0` (latent dims only) and decodes every target.
    fn decode_targets(&self, tape: &mut Tape<T>, p: &Bound, batch: &PreparedBatch, z0: Var) -> Result<Var> {
        let f = self.ode.bind(tape, p)?;
        let z = self.ode.augment(tape, z0)?;
        let states = rk4_solve(tape, z, batch.t_start, &batch.times, self.cfg.ode.densify, |tape, _, z| self.ode.eval(tape, &f, &batch.sys, z))?;
        let stacked = if states.len() == 1 { states[0] } else { tape.concat(&states, 0)? };
        let rows = tape.gather_rows(stacked, batch.target_rows.clone())?;
        self.decoder.decode(tape, p, rows)
    }

    /// Single-sample ELBO with externally supplied standard-normal noise
    /// `eps`, shaped `[objects, latent]`.
    pub fn elbo(&self, tape: &mut Tape<T>, p: &Bound, batch: &PreparedBatch, eps: &Tensor<T>, kl_weight: f64) -> Result<ElboVars> {
        let post = self.encoder.encode(tape, p, &batch.enc)?;
        if tape.shape(post.mean) != eps.shape() {
            return Err(Error::Config(format!("noise shape {:?} does not match posterior {:?}", eps.shape(), tape.shape(post.mean))));
        }
        let eps = tape.constant(eps.clone());
        let noise = tape.mul(post.std, eps)?;
        let z0 = tape.add(post.mean, noise)?;
        let prediction = self.decode_targets(tape, p, batch, z0)?;
        let reconstruction = self.decoder.log_likelihood(tape, prediction, batch.target_tensor())?;
        let kl = kl_diag_gaussian(tape, post.mean, post.std)?;
        let weighted = tape.scale(kl, cast(kl_weight));
        let elbo = tape.sub(reconstruction, weighted)?;
        Ok(ElboVars { elbo, reconstruction, kl, mean: post.mean, std: post.std, prediction })
    }

    /// Reads an ELBO evaluation back as plain numbers with a per-object split.
    pub fn report(&self, tape: &Tape<T>, vars: &ElboVars, batch: &PreparedBatch, kl_weight: f64) -> ElboReport {
        let n = batch.n_objects();
        let d = batch.dim;
        let sigma = self.cfg.decoder.noise_std;
        let mut objects = vec![ObjectTerms { reconstruction: 0.0, kl: 0.0 }; n];
        let pred = tape.value(vars.prediction);
        for (r, &obj) in batch.target_object.iter().enumerate() {
            let sse: f64 = pred.row(r).iter().zip(&batch.targets[r * d..(r + 1) * d]).map(|(&p, &t)| (widen(p) - t).powi(2)).sum();
            objects[obj].reconstruction += -0.5 * sse / (sigma * sigma) - d as f64 * log_norm_const(sigma);
        }
        let (mean, std) = (tape.value(vars.mean), tape.value(vars.std));
        for (i, o) in objects.iter_mut().enumerate() {
            let m: Vec<f64> = mean.row(i).iter().map(|&v| widen(v)).collect();
            let s: Vec<f64> = std.row(i).iter().map(|&v| widen(v)).collect();
            o.kl = kl_diag_gaussian_values(&m, &s);
        }
        let value = |v: Var| widen(tape.value(v).item().expect("scalar"));
        ElboReport { elbo: value(vars.elbo), reconstruction: value(vars.reconstruction), kl: value(vars.kl), kl_weight, objects }
    }

    /// Posterior-mean predictions at every target, `[targets, D]`.
    pub fn predict(&self, batch: &PreparedBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let post = self.encoder.encode(&mut tape, &p, &batch.enc)?;
        let out = self.decode_targets(&mut tape, &p, batch, post.mean)?;
        Ok(tape.value(out).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.store.write_checkpoint(std::io::BufWriter::new(file))?;
        Ok(())
    }

    /// Builds the model for `cfg` and loads parameters from `path`; shape or
    /// name mismatches are reported in full.
    pub fn load(cfg: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        let file = std::fs::File::open(path)?;
        let stored = ParamStore::<f64>::read_checkpoint(std::io::BufReader::new(file))?;
        model.store.load_from(&stored.convert::<T>())?;
        Ok(model)
    }
}
