//! Generative half of the model: a graph-network vector field over all
//! objects' latent states, a fixed-step RK4 solver recorded on the tape,
//! and a Gaussian observation decoder.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{cast, widen, Scalar};
use crate::sim::InteractionGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeConfig {
    /// Learned latent width (posterior dims).
    pub latent: usize,
    /// Zero-initialized auxiliary dims appended at the start time.
    pub aux: usize,
    /// Relation embedding width.
    pub edge_hidden: usize,
    /// Hidden width of the object perceptron.
    pub object_hidden: usize,
    /// Solver steps per interval between consecutive query times.
    pub densify: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self { latent: 16, aux: 64, edge_hidden: 128, object_hidden: 128, densify: 5 }
    }
}

impl OdeConfig {
    pub fn state_width(&self) -> usize {
        self.latent + self.aux
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.edge_hidden == 0 || self.object_hidden == 0 {
            return Err(Error::Config("ODE widths must be positive".into()));
        }
        if self.densify == 0 {
            return Err(Error::Config("densify must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub output_dim: usize,
    /// Fixed observation noise standard deviation.
    pub noise_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { output_dim: 4, noise_std: 0.1 }
    }
}

/// Pair lists of one or more relation graphs stacked block-diagonally.
/// Pairs never cross sample boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeSystem {
    n: usize,
    /// `(i, j)` with `j` a neighbor of `i`.
    neighbor: Arc<[(usize, usize)]>,
    /// `(i, j)` with `j != i` in the same sample but not a neighbor.
    latent: Arc<[(usize, usize)]>,
}

impl OdeSystem {
    pub fn new(graphs: &[&InteractionGraph]) -> Self {
        let (mut n, mut neighbor, mut latent) = (0, Vec::new(), Vec::new());
        for g in graphs {
            let m = g.n_objects();
            for i in 0..m {
                for j in 0..m {
                    if i == j {
                        continue;
                    }
                    if g.has_edge(i, j) {
                        neighbor.push((n + i, n + j));
                    } else {
                        latent.push((n + i, n + j));
                    }
                }
            }
            n += m;
        }
        Self { n, neighbor: neighbor.into(), latent: latent.into() }
    }

    pub fn single(graph: &InteractionGraph) -> Self {
        Self::new(&[graph])
    }

    pub fn n_objects(&self) -> usize {
        self.n
    }
}

/// `dZ/dt = MLP_o( sum_nbr MLP_r0([z_i, z_j]) + sum_other MLP_r1([z_i, z_j]) )`.
#[derive(Clone, Debug)]
pub struct OdeFunc {
    cfg: OdeConfig,
    rel0_w: ParamId,
    rel0_b: ParamId,
    rel1_w: ParamId,
    rel1_b: ParamId,
    obj_w1: ParamId,
    obj_b1: ParamId,
    obj_w2: ParamId,
    obj_b2: ParamId,
}

/// Parameter views of an [`OdeFunc`] prepared once per tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundOdeFunc {
    r0_self: Var,
    r0_other: Var,
    r0_b: Var,
    r1_self: Var,
    r1_other: Var,
    r1_b: Var,
    o_w1: Var,
    o_b1: Var,
    o_w2: Var,
    o_b2: Var,
}

impl OdeFunc {
    pub fn new<T: Scalar, R: Rng>(cfg: OdeConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.state_width();
        Ok(Self {
            rel0_w: store.add_weight("ode.relation0.w", 2 * w, cfg.edge_hidden, rng),
            rel0_b: store.add_bias("ode.relation0.b", cfg.edge_hidden),
            rel1_w: store.add_weight("ode.relation1.w", 2 * w, cfg.edge_hidden, rng),
            rel1_b: store.add_bias("ode.relation1.b", cfg.edge_hidden),
            obj_w1: store.add_weight("ode.object.w1", cfg.edge_hidden, cfg.object_hidden, rng),
            obj_b1: store.add_bias("ode.object.b1", cfg.object_hidden),
            obj_w2: store.add_weight("ode.object.w2", cfg.object_hidden, w, rng),
            obj_b2: store.add_bias("ode.object.b2", w),
            cfg,
        })
    }

    pub fn config(&self) -> &OdeConfig {
        &self.cfg
    }

    /// Splits each relation matrix into the halves acting on `z_i` and `z_j`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound) -> Result<BoundOdeFunc> {
        let w = self.cfg.state_width();
        Ok(BoundOdeFunc {
            r0_self: tape.slice(p[self.rel0_w], 0, 0, w)?,
            r0_other: tape.slice(p[self.rel0_w], 0, w, w)?,
            r0_b: p[self.rel0_b],
            r1_self: tape.slice(p[self.rel1_w], 0, 0, w)?,
            r1_other: tape.slice(p[self.rel1_w], 0, w, w)?,
            r1_b: p[self.rel1_b],
            o_w1: p[self.obj_w1],
            o_b1: p[self.obj_b1],
            o_w2: p[self.obj_w2],
            o_b2: p[self.obj_b2],
        })
    }

    /// Time derivative of the stacked state `z`, `[objects, state_width]`.
    pub fn eval<T: Scalar>(&self, tape: &mut Tape<T>, f: &BoundOdeFunc, sys: &OdeSystem, z: Var) -> Result<Var> {
        let mut sums = Vec::with_capacity(2);
        for (pairs, ws, wo, b) in [(&sys.neighbor, f.r0_self, f.r0_other, f.r0_b), (&sys.latent, f.r1_self, f.r1_other, f.r1_b)] {
            if pairs.is_empty() {
                continue;
            }
            let a = tape.linear(z, ws, b)?;
            let c = tape.matmul(z, wo)?;
            sums.push(tape.pair_relu_sum(a, c, pairs.clone())?);
        }
        let s = match sums[..] {
            [] => tape.constant(Tensor::zeros(&[sys.n, self.cfg.edge_hidden])),
            [one] => one,
            [a, b] => tape.add(a, b)?,
            _ => unreachable!(),
        };
        let h = tape.linear(s, f.o_w1, f.o_b1)?;
        let h = tape.relu(h);
        Ok(tape.linear(h, f.o_w2, f.o_b2)?)
    }

    /// Appends the auxiliary zero columns to posterior samples.
    pub fn augment<T: Scalar>(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        if self.cfg.aux == 0 {
            return Ok(z);
        }
        let n = tape.shape(z)[0];
        let zeros = tape.constant(Tensor::zeros(&[n, self.cfg.aux]));
        Ok(tape.concat_last(&[z, zeros])?)
    }
}

/// Classical RK4 from `(t_start, z0)` through every query time, with
/// `densify` equal steps per interval. Returns one state per query time.
pub fn rk4_solve<T, F>(tape: &mut Tape<T>, z0: Var, t_start: f64, times: &[f64], densify: usize, mut f: F) -> Result<Vec<Var>>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, f64, Var) -> Result<Var>,
{
    if densify == 0 {
        return Err(Error::Config("densify must be at least 1".into()));
    }
    if times.first().is_some_and(|&t| !(t >= t_start)) || times.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(Error::UnsortedTimes { t_start });
    }
    let mut out = Vec::with_capacity(times.len());
    let (mut t, mut z) = (t_start, z0);
    for &target in times {
        if target > t {
            let h = (target - t) / densify as f64;
            for k in 0..densify {
                let tk = t + h * k as f64;
                z = rk4_step(tape, z, tk, h, &mut f)?;
            }
            t = target;
        }
        out.push(z);
    }
    Ok(out)
}

fn rk4_step<T, F>(tape: &mut Tape<T>, z: Var, t: f64, h: f64, f: &mut F) -> Result<Var>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, f64, Var) -> Result<Var>,
{
    let half: T = cast(h / 2.0);
    let k1 = f(tape, t, z)?;
    let s = tape.scale(k1, half);
    let z2 = tape.add(z, s)?;
    let k2 = f(tape, t + h / 2.0, z2)?;
    let s = tape.scale(k2, half);
    let z3 = tape.add(z, s)?;
    let k3 = f(tape, t + h / 2.0, z3)?;
    let s = tape.scale(k3, cast(h));
    let z4 = tape.add(z, s)?;
    let k4 = f(tape, t + h, z4)?;
    let a = tape.add(k2, k3)?;
    let a = tape.scale(a, cast(2.0));
    let b = tape.add(k1, k4)?;
    let sum = tape.add(a, b)?;
    let inc = tape.scale(sum, cast(h / 6.0));
    Ok(tape.add(z, inc)?)
}

/// Linear read-out of observations from latent states with fixed-variance
/// Gaussian noise.
#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    w: ParamId,
    b: ParamId,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(cfg: DecoderConfig, state_width: usize, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        if !(cfg.noise_std > 0.0) || cfg.output_dim == 0 {
            return Err(Error::Config("decoder needs a positive noise std and output width".into()));
        }
        let w = store.add_weight("decoder.w", state_width, cfg.output_dim, rng);
        let b = store.add_bias("decoder.b", cfg.output_dim);
        Ok(Self { cfg, w, b })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Predicted observations, one row per latent row.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        Ok(tape.linear(z, p[self.w], p[self.b])?)
    }

    /// Gaussian log-density of `target` around `pred`, summed over all
    /// entries.
    pub fn log_likelihood<T: Scalar>(&self, tape: &mut Tape<T>, pred: Var, target: Tensor<T>) -> Result<Var> {
        let count = target.numel() as f64;
        let target = tape.constant(target);
        let r = tape.sub(pred, target)?;
        let r2 = tape.square(r);
        let sse = tape.sum_all(r2);
        let sigma = self.cfg.noise_std;
        let scaled = tape.scale(sse, cast(-0.5 / (sigma * sigma)));
        Ok(tape.offset(scaled, cast(-count * log_norm_const(sigma))))
    }
}

/// `log sigma + log(2 pi) / 2`
pub fn log_norm_const(sigma: f64) -> f64 {
    sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Draws `z0 = mean + std * eps` (no draw when `rng` is `None`), integrates
/// and decodes. Returns predicted observations `[objects, D]` per query time.
#[allow(clippy::too_many_arguments)]
pub fn sample_trajectories<T: Scalar, R: Rng>(
    ode: &OdeFunc,
    decoder: &Decoder,
    store: &ParamStore<T>,
    sys: &OdeSystem,
    mean: &Tensor<T>,
    std: &Tensor<T>,
    t_start: f64,
    times: &[f64],
    rng: Option<&mut R>,
) -> Result<Vec<Tensor<T>>> {
    if mean.shape() != std.shape() || mean.dims2().map(|d| d.0) != Some(sys.n_objects()) {
        return Err(Error::Config(format!("posterior shapes {:?}/{:?} do not match {} objects", mean.shape(), std.shape(), sys.n_objects())));
    }
    let z0 = match rng {
        Some(rng) => {
            let data = mean.data().iter().zip(std.data()).map(|(&m, &s)| m + s * cast(rng.sample::<f64, _>(StandardNormal))).collect();
            Tensor::new(mean.shape().to_vec(), data)?
        }
        None => mean.clone(),
    };
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let f = ode.bind(&mut tape, &p)?;
    let z0 = tape.constant(z0);
    let z0 = ode.augment(&mut tape, z0)?;
    let states = rk4_solve(&mut tape, z0, t_start, times, ode.cfg.densify, |tape, _, z| ode.eval(tape, &f, sys, z))?;
    states
        .into_iter()
        .map(|z| {
            let o = decoder.decode(&mut tape, &p, z)?;
            Ok(tape.value(o).clone())
        })
        .collect()
}

/// Mean squared error between two equally-shaped tensors, in f64.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let n = a.numel().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(&x, &y)| (widen(x) - widen(y)).powi(2)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> OdeConfig {
        OdeConfig { latent: 3, aux: 2, edge_hidden: 6, object_hidden: 5, densify: 5 }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn derivative(ode: &OdeFunc, store: &ParamStore<f64>, sys: &OdeSystem, z: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let f = ode.bind(&mut tape, &p).unwrap();
        let z = tape.constant(z.clone());
        let dz = ode.eval(&mut tape, &f, sys, z).unwrap();
        tape.value(dz).clone()
    }

    #[test]
    fn single_object_has_constant_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ode = OdeFunc::new(small(), &mut store, &mut rng).unwrap();
        let sys = OdeSystem::single(&InteractionGraph::new(1));
        let a = derivative(&ode, &store, &sys, &random(&[1, 5], &mut rng));
        let b = derivative(&ode, &store, &sys, &random(&[1, 5], &mut rng));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_parameters_give_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ode = OdeFunc::new(small(), &mut store, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let sys = OdeSystem::single(&InteractionGraph::complete(3));
        let dz = derivative(&ode, &store, &sys, &random(&[3, 5], &mut rng));
        assert!(dz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pair_lists_exclude_self_and_stay_within_samples() {
        let mut g = InteractionGraph::new(3);
        g.add_edge(0, 1).unwrap();
        let sys = OdeSystem::new(&[&g, &InteractionGraph::new(2)]);
        assert_eq!(&sys.neighbor[..], &[(0, 1), (1, 0)]);
        assert_eq!(&sys.latent[..], &[(0, 2), (1, 2), (2, 0), (2, 1), (3, 4), (4, 3)]);
    }

    fn scalar_solve(times: &[f64], densify: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let z0 = tape.constant(Tensor::scalar(if times.is_empty() { 0.0 } else { 1.0 }));
        let states = rk4_solve(&mut tape, z0, 0.0, times, densify, |tape, t, z| {
            let v = f(t, tape.value(z).item().unwrap());
            Ok(tape.constant(Tensor::scalar(v)))
        })
        .unwrap();
        states.iter().map(|&s| tape.value(s).item().unwrap()).collect()
    }

    #[test]
    fn exponential_decay_at_default_grid() {
        let mut tape = Tape::<f64>::new();
        let z0 = tape.constant(Tensor::scalar(1.0));
        let times: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        let states = rk4_solve(&mut tape, z0, 0.0, &times, 5, |tape, _, z| Ok(tape.neg(z))).unwrap();
        let z1 = tape.value(*states.last().unwrap()).item().unwrap();
        assert!((z1 - (-1f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn zero_field_and_cubic_are_exact() {
        let times = [0.3, 0.5, 1.0];
        assert_eq!(scalar_solve(&times, 3, |_, _| 0.0), vec![1.0, 1.0, 1.0]);
        let cubic = scalar_solve(&times, 2, |t, _| 3.0 * t * t);
        for (z, t) in cubic.iter().zip(times) {
            assert!((z - (1.0 + t * t * t)).abs() < 1e-15);
        }
    }

    #[test]
    fn unsorted_or_early_times_rejected() {
        let mut tape = Tape::<f64>::new();
        let z0 = tape.constant(Tensor::scalar(1.0));
        let id = |_: &mut Tape<f64>, _: f64, z: Var| Ok(z);
        assert!(matches!(rk4_solve(&mut tape, z0, 0.0, &[0.5, 0.2], 5, id), Err(Error::UnsortedTimes { .. })));
        assert!(matches!(rk4_solve(&mut tape, z0, 0.3, &[0.2], 5, id), Err(Error::UnsortedTimes { .. })));
        assert!(rk4_solve(&mut tape, z0, 0.0, &[0.2], 0, id).is_err());
    }

    #[test]
    fn prefix_solves_agree() {
        let times = [0.1, 0.25, 0.3, 0.6, 0.9];
        let full = scalar_solve(&times, 5, |t, z| (t * z).sin() - z);
        for k in 1..times.len() {
            let pre = scalar_solve(&times[..k], 5, |t, z| (t * z).sin() - z);
            for (a, b) in pre.iter().zip(&full) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    fn decoder(store: &mut ParamStore<f64>) -> Decoder {
        Decoder::new(DecoderConfig::default(), 5, store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn log_likelihood_peaks_at_prediction() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store);
        let ll = |offset: f64| {
            let mut tape = Tape::<f64>::new();
            let pred = tape.constant(Tensor::from_f64(&[1, 4], &[0.1, 0.2, 0.3, 0.4]).unwrap());
            let target = Tensor::from_f64(&[1, 4], &[0.1 + offset, 0.2, 0.3, 0.4]).unwrap();
            let v = dec.log_likelihood(&mut tape, pred, target).unwrap();
            tape.value(v).item().unwrap()
        };
        let max = -4.0 * (0.1f64.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
        assert!((ll(0.0) - max).abs() < 1e-12);
        assert!(ll(0.1) < ll(0.0) && ll(0.2) < ll(0.1) && ll(-0.3) < ll(0.2));
    }

    #[test]
    fn mean_mode_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ode = OdeFunc::new(small(), &mut store, &mut rng).unwrap();
        let dec = Decoder::new(DecoderConfig::default(), 5, &mut store, &mut rng).unwrap();
        let sys = OdeSystem::single(&InteractionGraph::complete(2));
        let mean = random(&[2, 3], &mut rng);
        let std = Tensor::zeros(&[2, 3]);
        let run = |times: &[f64]| sample_trajectories::<f64, ChaCha8Rng>(&ode, &dec, &store, &sys, &mean, &std, 0.0, times, None).unwrap();
        let times = [0.2, 0.5];
        assert_eq!(run(&times), run(&times));
        let mut noisy = ChaCha8Rng::seed_from_u64(9);
        let zero_std = sample_trajectories(&ode, &dec, &store, &sys, &mean, &std, 0.0, &times, Some(&mut noisy)).unwrap();
        assert_eq!(zero_std, run(&times));

        let at_start = run(&[0.0]);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let z = tape.constant(mean.clone());
        let z = ode.augment(&mut tape, z).unwrap();
        assert!(tape.value(z).row(1)[3..].iter().all(|&v| v == 0.0));
        let o = dec.decode(&mut tape, &p, z).unwrap();
        assert_eq!(&at_start[0], tape.value(o));
    }
}
