//! Shared fixtures for the integration tests and the acceptance report.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use graphode::autodiff::{grad_check, grad_check_params, Bound, ParamStore, Tape, Tensor, TensorError, Var};
use graphode::encoder::{Encoder, EncoderBatch, EncoderConfig, Variant};
use graphode::graph_ode::{rk4_solve, Decoder, DecoderConfig, OdeConfig, OdeFunc, OdeSystem};
use graphode::model::{Model, ModelConfig, PreparedBatch};
use graphode::sim::{InteractionGraph, Observation, ObservationSet};
use graphode::task::Episode;
use graphode::temporal_graph::{build_temporal_graph, TemporalGraph};
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero, so relu kinks sit far from the probe.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|v| v.signum() * (0.2 + v.abs()))
}

/// `sum(w * y)` with fixed, non-uniform weights, so every output entry
/// carries a distinct cotangent.
pub fn weigh(tape: &mut Tape<f64>, y: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|k| (0.7317 * k as f64 + 0.3).sin() + 0.4).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

type Case = (String, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>>, Tensor<f64>);

fn case(name: &str, x: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError> + 'static) -> Case {
    (name.to_string(), Box::new(move |t, v| f(t, v).and_then(|y| weigh(t, y))), x)
}

fn idx(v: Vec<usize>) -> Arc<[usize]> {
    v.into()
}

/// One randomly sized instance of every primitive, each operand probed
/// separately.
pub fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let (m, n, k) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let c = |rng: &mut ChaCha8Rng, s: &[usize]| random(rng, s);
    let mut out = Vec::new();

    let other = c(rng, &[m, n]);
    out.push(case("add", random(rng, &[m, n]), move |t, x| {
        let o = t.constant(other.clone());
        t.add(x, o)
    }));
    let other = c(rng, &[m, n]);
    out.push(case("sub", random(rng, &[m, n]), move |t, x| {
        let o = t.constant(other.clone());
        t.sub(o, x)
    }));
    let other = c(rng, &[m, n]);
    out.push(case("mul", random(rng, &[m, n]), move |t, x| {
        let o = t.constant(other.clone());
        t.mul(x, o)
    }));
    let b = c(rng, &[k, n]);
    out.push(case("matmul.lhs", random(rng, &[m, k]), move |t, x| {
        let o = t.constant(b.clone());
        t.matmul(x, o)
    }));
    let a = c(rng, &[m, k]);
    out.push(case("matmul.rhs", random(rng, &[k, n]), move |t, x| {
        let o = t.constant(a.clone());
        t.matmul(o, x)
    }));
    let (w, bias) = (c(rng, &[k, n]), c(rng, &[n]));
    out.push(case("linear.x", random(rng, &[m, k]), move |t, x| {
        let (w, b) = (t.constant(w.clone()), t.constant(bias.clone()));
        t.linear(x, w, b)
    }));
    let (xin, bias) = (c(rng, &[m, k]), c(rng, &[1, n]));
    out.push(case("linear.w", random(rng, &[k, n]), move |t, w| {
        let (x, b) = (t.constant(xin.clone()), t.constant(bias.clone()));
        t.linear(x, w, b)
    }));
    let (xin, w) = (c(rng, &[m, k]), c(rng, &[k, n]));
    out.push(case("linear.b", random(rng, &[n]), move |t, b| {
        let (x, w) = (t.constant(xin.clone()), t.constant(w.clone()));
        t.linear(x, w, b)
    }));
    for axis in 0..2 {
        let other = c(rng, &[m, n]);
        out.push(case(&format!("concat.axis{axis}"), random(rng, &[m, n]), move |t, x| {
            let o = t.constant(other.clone());
            t.concat(&[o, x, o], axis)
        }));
        out.push(case(&format!("sum.axis{axis}"), random(rng, &[m, n]), move |t, x| t.sum(x, Some(axis))));
        out.push(case(&format!("mean.axis{axis}"), random(rng, &[m, n]), move |t, x| t.mean(x, Some(axis))));
        out.push(case(&format!("softmax.axis{axis}"), random(rng, &[m, n]), move |t, x| t.softmax(x, axis)));
    }
    let other = c(rng, &[m, k]);
    out.push(case("concat_last", random(rng, &[m, n]), move |t, x| {
        let o = t.constant(other.clone());
        t.concat_last(&[x, o])
    }));
    out.push(case("sum_all", random(rng, &[m, n]), |t, x| Ok(t.sum_all(x))));
    out.push(case("exp", random(rng, &[m, n]), |t, x| Ok(t.exp(x))));
    out.push(case("log", random(rng, &[m, n]).map(|v| v.abs() + 0.5), |t, x| Ok(t.log(x))));
    out.push(case("tanh", random(rng, &[m, n]), |t, x| Ok(t.tanh(x))));
    out.push(case("relu", away_from_zero(rng, &[m, n]), |t, x| Ok(t.relu(x))));
    out.push(case("sigmoid", random(rng, &[m, n]).map(|v| 3.0 * v), |t, x| Ok(t.sigmoid(x))));
    out.push(case("softplus", random(rng, &[m, n]).map(|v| 3.0 * v), |t, x| Ok(t.softplus(x))));
    out.push(case("scale", random(rng, &[m, n]), |t, x| Ok(t.scale(x, -1.7))));
    out.push(case("offset", random(rng, &[m, n]), |t, x| {
        let y = t.offset(x, 0.3);
        Ok(t.square(y))
    }));
    out.push(case("neg", random(rng, &[m, n]), |t, x| Ok(t.neg(x))));
    out.push(case("square", random(rng, &[m, n]), |t, x| Ok(t.square(x))));
    let len = rng.gen_range(1..=n);
    let start = rng.gen_range(0..=n - len);
    out.push(case("slice", random(rng, &[m, n]), move |t, x| t.slice(x, 1, start, len)));
    out.push(case("broadcast", random(rng, &[n]), move |t, x| t.broadcast(x, &[m, n])));
    let other = c(rng, &[m, n]);
    out.push(case("add_row", random(rng, &[1, n]), move |t, b| {
        let o = t.constant(other.clone());
        t.add_row(o, b)
    }));
    let e = rng.gen_range(1..8);
    let gi = idx((0..e).map(|_| rng.gen_range(0..m)).collect());
    out.push(case("gather_rows", random(rng, &[m, n]), move |t, x| t.gather_rows(x, gi.clone())));
    let si = idx((0..e).map(|_| rng.gen_range(0..m)).collect());
    out.push(case("scatter_add_rows", random(rng, &[e, n]), move |t, x| t.scatter_add_rows(x, si.clone(), m)));
    let seg = idx((0..e).map(|_| rng.gen_range(0..m)).collect());
    out.push(case("segment_softmax", random(rng, &[e, 1]).map(|v| 2.0 * v), move |t, x| t.segment_softmax(x, seg.clone(), m)));
    let w = c(rng, &[m, 1]);
    out.push(case("scale_rows.x", random(rng, &[m, n]), move |t, x| {
        let w = t.constant(w.clone());
        t.scale_rows(x, w)
    }));
    let xin = c(rng, &[m, n]);
    out.push(case("scale_rows.w", random(rng, &[m, 1]), move |t, w| {
        let x = t.constant(xin.clone());
        t.scale_rows(x, w)
    }));
    let pairs: Arc<[(usize, usize)]> = (0..e).map(|_| (rng.gen_range(0..m), rng.gen_range(0..k))).collect();
    let (p1, p2) = (pairs.clone(), pairs);
    let b = c(rng, &[k, n]);
    out.push(case("pair_relu_sum.a", random(rng, &[m, n]), move |t, a| {
        let b = t.constant(b.clone());
        t.pair_relu_sum(a, b, p1.clone())
    }));
    let a = c(rng, &[m, n]);
    out.push(case("pair_relu_sum.b", random(rng, &[k, n]), move |t, b| {
        let a = t.constant(a.clone());
        t.pair_relu_sum(a, b, p2.clone())
    }));
    let ti = idx((0..e).map(|_| rng.gen_range(0..m)).collect());
    let dt: Arc<[f64]> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (ti2, dt2) = (ti.clone(), dt.clone());
    let w = c(rng, &[1, n]);
    out.push(case("gather_time_relu.x", random(rng, &[m, n]), move |t, x| {
        let w = t.constant(w.clone());
        t.gather_time_relu(x, w, ti.clone(), dt.clone())
    }));
    let xin = c(rng, &[m, n]);
    out.push(case("gather_time_relu.w", random(rng, &[1, n]), move |t, w| {
        let x = t.constant(xin.clone());
        t.gather_time_relu(x, w, ti2.clone(), dt2.clone())
    }));
    let di = idx((0..e).map(|_| rng.gen_range(0..m)).collect());
    let di2 = di.clone();
    let y = c(rng, &[m, n]);
    out.push(case("gather_row_dot.x", random(rng, &[e, n]), move |t, x| {
        let y = t.constant(y.clone());
        t.gather_row_dot(x, y, di.clone())
    }));
    let xin = c(rng, &[e, n]);
    out.push(case("gather_row_dot.y", random(rng, &[m, n]), move |t, y| {
        let x = t.constant(xin.clone());
        t.gather_row_dot(x, y, di2.clone())
    }));
    out
}

#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub checks: usize,
    pub failure: Option<String>,
}

impl CheckLine {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_error < tol
    }
}

fn merge(lines: &mut Vec<CheckLine>, name: &str, rel: f64, failure: Option<String>) {
    match lines.iter_mut().find(|l| l.name == name) {
        Some(l) => {
            l.max_rel_error = l.max_rel_error.max(rel);
            l.checks += 1;
            l.failure = l.failure.take().or(failure);
        }
        None => lines.push(CheckLine { name: name.to_string(), max_rel_error: rel, checks: 1, failure }),
    }
}

/// Worst relative error per primitive over `trials` random instances.
pub fn primitive_sweep(trials: usize, seed: u64) -> Vec<CheckLine> {
    let mut r = rng(seed);
    let mut lines = Vec::new();
    for _ in 0..trials {
        for (name, f, x) in primitive_cases(&mut r) {
            let g = grad_check(|t, v| f(t, v), &x, FD_STEP);
            merge(&mut lines, &name, g.max_rel_error, g.failure);
        }
    }
    lines
}

pub fn observations(times: &[&[f64]], relations: &[(usize, usize)], seed: u64) -> ObservationSet {
    let mut r = rng(seed);
    let mut g = InteractionGraph::new(times.len());
    for &(i, j) in relations {
        g.add_edge(i, j).unwrap();
    }
    ObservationSet {
        objects: times.iter().map(|ts| ts.iter().map(|&t| Observation { time: t, features: (0..4).map(|_| r.gen_range(-1.0..1.0)).collect() }).collect()).collect(),
        relations: g,
        horizon: (0.0, 1.0),
    }
}

pub fn small_encoder_config(variant: Variant) -> EncoderConfig {
    EncoderConfig { hidden: 6, pool_width: 4, posterior_hidden: 5, latent: 3, variant, ..EncoderConfig::default() }
}

pub fn small_ode_config() -> OdeConfig {
    OdeConfig { latent: 3, aux: 2, edge_hidden: 5, object_hidden: 4, densify: 2 }
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig { encoder: small_encoder_config(Variant::Full), ode: small_ode_config(), decoder: DecoderConfig::default() }
}

fn toy_graph(seed: u64) -> TemporalGraph {
    let o = observations(&[&[0.1, 0.35, 0.6], &[0.2, 0.5], &[0.45]], &[(0, 1), (1, 2)], seed);
    build_temporal_graph(&o, 0.4, 0.0).unwrap()
}

fn param_lines(store: &ParamStore<f64>, name: &str, seed: u64, f: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var, TensorError>) -> CheckLine {
    let checks = grad_check_params(store, f, FD_STEP, Some(6), &mut rng(seed));
    let mut line = CheckLine { name: name.to_string(), max_rel_error: 0.0, checks: 0, failure: None };
    for c in checks {
        line.max_rel_error = line.max_rel_error.max(c.result.max_rel_error);
        line.checks += c.result.checked;
        if let Some(f) = c.result.failure {
            line.failure.get_or_insert(format!("{}: {f}", c.name));
        }
    }
    line
}

/// Parameter gradients of each composite layer on a 3-object toy graph.
pub fn composite_checks(seed: u64) -> Vec<CheckLine> {
    let mut lines = Vec::new();
    let graph = toy_graph(seed);
    let batch = EncoderBatch::single(&graph).unwrap();
    for variant in Variant::ALL {
        let mut store = ParamStore::new();
        let enc = Encoder::new(small_encoder_config(variant), &mut store, &mut rng(seed)).unwrap();
        let sfx = if variant == Variant::Full { String::new() } else { format!(" ({variant})") };
        lines.push(param_lines(&store, &format!("gnn layer{sfx}"), seed, |t, p| {
            let h = enc.embed(t, p, &batch).unwrap();
            let te = enc.edge_encodings(t, &batch).unwrap();
            let h = enc.gnn_layer(t, p, &batch, h, &te, 0).unwrap();
            weigh(t, h)
        }));
        lines.push(param_lines(&store, &format!("sequence aggregator{sfx}"), seed, |t, p| {
            let h = enc.embed(t, p, &batch).unwrap();
            let u = enc.sequence_aggregate(t, p, &batch, h).unwrap();
            weigh(t, u)
        }));
        if variant == Variant::Full {
            let u = away_from_zero(&mut rng(seed + 1), &[3, 4]);
            lines.push(param_lines(&store, "posterior head", seed, |t, p| {
                let u = t.constant(u.clone());
                let post = enc.posterior(t, p, u).unwrap();
                let s = t.concat_last(&[post.mean, post.std])?;
                weigh(t, s)
            }));
        }
    }
    let mut store = ParamStore::new();
    let dec = Decoder::new(DecoderConfig::default(), 5, &mut store, &mut rng(seed)).unwrap();
    let z = random(&mut rng(seed + 2), &[4, 5]);
    lines.push(param_lines(&store, "decoder", seed, |t, p| {
        let z = t.constant(z.clone());
        let o = dec.decode(t, p, z).unwrap();
        weigh(t, o)
    }));
    let g = grad_check(
        |t, z| {
            let p = store.bind_frozen(t);
            let o = dec.decode(t, &p, z).unwrap();
            weigh(t, o)
        },
        &z,
        FD_STEP,
    );
    merge(&mut lines, "decoder", g.max_rel_error, g.failure);

    let mut store = ParamStore::new();
    let ode = OdeFunc::new(small_ode_config(), &mut store, &mut rng(seed)).unwrap();
    let mut rel = InteractionGraph::new(3);
    rel.add_edge(0, 2).unwrap();
    let sys = OdeSystem::single(&rel);
    let times: Vec<f64> = (1..=5).map(|k| 0.2 * k as f64).collect();
    let solve = |t: &mut Tape<f64>, p: &Bound, z0: Var| -> Result<Var, TensorError> {
        let f = ode.bind(t, p).unwrap();
        let states = rk4_solve(t, z0, 0.0, &times, 2, |t, _, z| ode.eval(t, &f, &sys, z)).unwrap();
        let all = t.concat(&states, 0)?;
        weigh(t, all)
    };
    let z0 = random(&mut rng(seed + 3), &[3, 5]);
    lines.push(param_lines(&store, "rk4 solve (10 steps)", seed, |t, p| {
        let z = t.constant(z0.clone());
        solve(t, p, z)
    }));
    let g = grad_check(
        |t, z| {
            let p = store.bind_frozen(t);
            solve(t, &p, z)
        },
        &z0,
        FD_STEP,
    );
    merge(&mut lines, "rk4 solve (10 steps)", g.max_rel_error, g.failure);
    lines
}

/// Two objects with three observations in total.
pub fn toy_episode(seed: u64) -> Episode {
    let o = observations(&[&[0.2, 0.7], &[0.5]], &[(0, 1)], seed);
    Episode::new(o.clone(), o, 0.0, 1.0).unwrap()
}

/// Frozen-noise ELBO gradient on the two-object toy, every parameter tensor.
pub fn elbo_check(seed: u64) -> CheckLine {
    let model = Model::<f64>::new(small_model_config(), seed).unwrap();
    let ep = toy_episode(seed);
    let batch = PreparedBatch::new(&[&ep]).unwrap();
    let eps = random(&mut rng(seed + 4), &[2, 3]);
    param_lines(&model.store, "frozen-noise elbo", seed, |t, p| Ok(model.elbo(t, p, &batch, &eps, 1.0).unwrap().elbo))
}

/// `n` objects with 1 to 6 distinct sorted times each and random relations.
pub fn random_obs(seed: u64, n: usize) -> ObservationSet {
    let mut r = rng(seed);
    let mut g = InteractionGraph::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if r.gen_bool(0.5) {
                g.add_edge(i, j).unwrap();
            }
        }
    }
    let objects = (0..n)
        .map(|_| {
            let k = r.gen_range(1..=6);
            let mut idx = sample(&mut r, 100, k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|t| Observation { time: (t as f64 + 0.5) / 100.0, features: (0..4).map(|_| r.gen_range(-1.0..1.0)).collect() }).collect()
        })
        .collect();
    ObservationSet { objects, relations: g, horizon: (0.0, 1.0) }
}

pub fn random_perm(seed: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

pub fn encoder(cfg: EncoderConfig, seed: u64) -> (Encoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg, &mut store, &mut rng(seed)).unwrap();
    (enc, store)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation from 1 of any node's incoming attention mass.
pub fn attention_sum_error(seed: u64, n: usize) -> f64 {
    let (enc, store) = encoder(small_encoder_config(Variant::Full), seed);
    let g = build_temporal_graph(&random_obs(seed, n), 0.5, 0.0).unwrap();
    let batch = EncoderBatch::single(&g).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let h = enc.embed(&mut tape, &p, &batch).unwrap();
    let te = enc.edge_encodings(&mut tape, &batch).unwrap();
    let hhat = enc.time_aware_rep(&mut tape, &p, &batch, h, &te, 0).unwrap();
    let a = enc.attention(&mut tape, &p, &batch, h, &hhat, 0).unwrap();
    let mut sums = vec![0.0; batch.n_nodes()];
    for (&t, &w) in batch.edge_targets().iter().zip(tape.value(a).data()) {
        sums[t] += w;
    }
    let targets: BTreeSet<usize> = batch.edge_targets().iter().copied().collect();
    targets.into_iter().map(|t| (sums[t] - 1.0).abs()).fold(0.0, f64::max)
}

/// Largest gap between the posteriors of a permuted instance and the
/// permuted posteriors of the original.
pub fn encoder_equivariance_error(cfg: EncoderConfig, seed: u64, n: usize) -> f64 {
    let (enc, store) = encoder(cfg, seed);
    let obs = random_obs(seed, n);
    let perm = random_perm(seed, n);
    let post = |o: &ObservationSet| {
        let g = build_temporal_graph(o, 0.5, 0.0).unwrap();
        enc.posterior_values(&store, &EncoderBatch::single(&g).unwrap()).unwrap()
    };
    let (m, s) = post(&obs);
    let (pm, ps) = post(&obs.permuted(&perm));
    (0..n).map(|i| max_abs_diff(m.row(i), pm.row(perm[i])).max(max_abs_diff(s.row(i), ps.row(perm[i])))).fold(0.0, f64::max)
}

/// The same for the ODE vector field at a random state.
pub fn ode_equivariance_error(cfg: OdeConfig, seed: u64, n: usize) -> f64 {
    let mut store = ParamStore::new();
    let ode = OdeFunc::new(cfg, &mut store, &mut rng(seed)).unwrap();
    let relations = random_obs(seed, n).relations;
    let perm = random_perm(seed, n);
    let w = ode.config().state_width();
    let z = random(&mut rng(seed + 2), &[n, w]);
    let mut zp = Tensor::zeros(&[n, w]);
    for i in 0..n {
        zp.data_mut()[perm[i] * w..(perm[i] + 1) * w].copy_from_slice(z.row(i));
    }
    let field = |g: &InteractionGraph, z: &Tensor<f64>| {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let f = ode.bind(&mut tape, &p).unwrap();
        let z = tape.constant(z.clone());
        let dz = ode.eval(&mut tape, &f, &OdeSystem::single(g), z).unwrap();
        tape.value(dz).clone()
    };
    let a = field(&relations, &z);
    let b = field(&relations.permuted(&perm), &zp);
    (0..n).map(|i| max_abs_diff(a.row(i), b.row(perm[i]))).fold(0.0, f64::max)
}
