//! Temporal-graph encoder: time-aware attention GNN over observation nodes,
//! per-object temporal self-attention pooling toward the start time, and a
//! diagonal Gaussian posterior head over the initial latent state.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::temporal_graph::{temporal_encoding_matrix, EdgeKind, TemporalGraph};

/// Model variants: the full encoder and its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    First,
    Mean,
    NoAtt,
    NoPe,
    FixedPe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Attention,
    First,
    Mean,
}

/// How the GNN layers turn a source representation into `ĥ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeEncoding {
    /// `relu(W_t [h, dt]) + TE(dt)`
    Learned,
    /// `relu(W_t [h, dt])`
    Omitted,
    /// `h + TE(dt)`
    Fixed,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Full, Variant::First, Variant::Mean, Variant::NoAtt, Variant::NoPe, Variant::FixedPe];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::First => "first",
            Variant::Mean => "mean",
            Variant::NoAtt => "no-att",
            Variant::NoPe => "no-pe",
            Variant::FixedPe => "fixed-pe",
        }
    }

    pub fn pooling(self) -> Pooling {
        match self {
            Variant::First => Pooling::First,
            Variant::Mean => Pooling::Mean,
            _ => Pooling::Attention,
        }
    }

    pub fn attention(self) -> bool {
        self != Variant::NoAtt
    }

    pub fn time_encoding(self) -> TimeEncoding {
        match self {
            Variant::NoPe => TimeEncoding::Omitted,
            Variant::FixedPe => TimeEncoding::Fixed,
            _ => TimeEncoding::Learned,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected one of full, first, mean, no-att, no-pe, fixed-pe)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub pool_width: usize,
    pub posterior_hidden: usize,
    pub latent: usize,
    pub variant: Variant,
    /// Multiplier on the GNN layers' temporal encoding; 1 in normal use.
    pub te_gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { input_dim: 4, hidden: 64, layers: 2, pool_width: 128, posterior_hidden: 128, latent: 16, variant: Variant::Full, te_gain: 1.0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let even = |name: &str, v: usize| {
            if v < 2 || v % 2 != 0 {
                Err(Error::Config(format!("{name} must be even and at least 2, got {v}")))
            } else {
                Ok(())
            }
        };
        even("encoder hidden width", self.hidden)?;
        even("pool width", self.pool_width)?;
        if self.input_dim == 0 || self.latent == 0 || self.posterior_hidden == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if !self.te_gain.is_finite() {
            return Err(Error::Config("te_gain must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layer {
    wt: ParamId,
    wq: ParamId,
    wk_self: ParamId,
    wk_nbr: ParamId,
    wv_self: ParamId,
    wv_nbr: ParamId,
}

/// Parameter handles for the encoder; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    embed_w: ParamId,
    embed_b: ParamId,
    layers: Vec<Layer>,
    pool_wt: ParamId,
    pool_wa: ParamId,
    post_w1: ParamId,
    post_b1: ParamId,
    post_w2: ParamId,
    post_b2: ParamId,
}

/// Per-object posterior over the initial latent state, on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    /// `[objects, latent]`
    pub mean: Var,
    /// `[objects, latent]`, strictly positive.
    pub std: Var,
}

/// Edges of one kind in a merged batch.
#[derive(Clone, Debug)]
struct EdgeSet {
    src: Arc<[usize]>,
    target: Arc<[usize]>,
    dt: Vec<f64>,
}

impl EdgeSet {
    fn from_records(recs: &[(usize, usize, f64)]) -> Self {
        Self { src: recs.iter().map(|e| e.0).collect(), target: recs.iter().map(|e| e.1).collect(), dt: recs.iter().map(|e| e.2).collect() }
    }

    fn len(&self) -> usize {
        self.src.len()
    }
}

/// Per-kind edge tensors; a kind with no edges in the batch is `None`.
#[derive(Clone, Copy, Debug)]
pub struct KindPair {
    pub self_temporal: Option<Var>,
    pub neighbor: Option<Var>,
}

impl KindPair {
    fn get(&self, k: usize) -> Option<Var> {
        if k == 0 {
            self.self_temporal
        } else {
            self.neighbor
        }
    }
}

/// One or more temporal graphs merged into a single block-diagonal graph.
#[derive(Clone, Debug)]
pub struct EncoderBatch {
    n_objects: usize,
    input_dim: usize,
    sample_objects: Vec<usize>,
    features: Vec<f64>,
    node_object: Arc<[usize]>,
    node_index: Arc<[usize]>,
    pool_dt: Vec<f64>,
    first_node: Arc<[usize]>,
    inv_count: Vec<f64>,
    /// Self-temporal edges, then neighbor edges.
    kinds: [EdgeSet; 2],
    /// Targets of all edges in kind order.
    edge_target: Arc<[usize]>,
    inv_indegree: Vec<f64>,
}

impl EncoderBatch {
    /// Objects of `graphs[k]` are numbered after those of earlier graphs.
    /// Every object must have at least one observation.
    pub fn new(graphs: &[&TemporalGraph]) -> Result<Self> {
        let input_dim = graphs.iter().flat_map(|g| g.nodes.first()).map(|n| n.features.len()).next().unwrap_or(0);
        let (mut n_objects, mut sample_objects, mut features, mut pool_dt, mut inv_count) = (0, Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut node_object = Vec::new();
        let mut first_node = Vec::new();
        let mut self_edges = Vec::new();
        let mut nbr_edges = Vec::new();
        for g in graphs {
            let (obj_off, node_off) = (n_objects, node_object.len());
            let mut count = vec![0usize; g.n_objects];
            let mut first = vec![usize::MAX; g.n_objects];
            for (k, n) in g.nodes.iter().enumerate() {
                if n.features.len() != input_dim {
                    return Err(Error::Config(format!("node feature width {} differs from {input_dim}", n.features.len())));
                }
                if first[n.object] == usize::MAX || n.time < g.nodes[first[n.object]].time {
                    first[n.object] = k;
                }
                count[n.object] += 1;
                node_object.push(obj_off + n.object);
                features.extend_from_slice(&n.features);
                pool_dt.push(n.time - g.t_start);
            }
            if let Some(object) = count.iter().position(|&c| c == 0) {
                return Err(Error::ZeroObservations { object });
            }
            first_node.extend(first.iter().map(|&k| node_off + k));
            inv_count.extend(count.iter().map(|&c| 1.0 / c as f64));
            for e in &g.edges {
                let rec = (node_off + e.source, node_off + e.target, e.dt);
                match e.kind {
                    EdgeKind::SelfTemporal => self_edges.push(rec),
                    EdgeKind::Neighbor => nbr_edges.push(rec),
                }
            }
            n_objects += g.n_objects;
            sample_objects.push(g.n_objects);
        }
        let mut indegree = vec![0usize; node_object.len()];
        for &(_, t, _) in self_edges.iter().chain(&nbr_edges) {
            indegree[t] += 1;
        }
        let edge_target: Arc<[usize]> = self_edges.iter().chain(&nbr_edges).map(|e| e.1).collect();
        Ok(Self {
            n_objects,
            input_dim,
            sample_objects,
            features,
            node_index: (0..node_object.len()).collect(),
            node_object: node_object.into(),
            pool_dt,
            first_node: first_node.into(),
            inv_count,
            kinds: [EdgeSet::from_records(&self_edges), EdgeSet::from_records(&nbr_edges)],
            inv_indegree: edge_target.iter().map(|&t| 1.0 / indegree[t] as f64).collect(),
            edge_target,
        })
    }

    pub fn single(graph: &TemporalGraph) -> Result<Self> {
        Self::new(&[graph])
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn n_nodes(&self) -> usize {
        self.node_object.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_target.len()
    }

    /// Object count of each merged graph, in order.
    pub fn sample_objects(&self) -> &[usize] {
        &self.sample_objects
    }

    /// Target node of each edge, in the order used by [`Encoder::attention`]
    /// (self-temporal edges first).
    pub fn edge_targets(&self) -> &[usize] {
        &self.edge_target
    }
}

fn column<T: Scalar>(values: &[f64]) -> Tensor<T> {
    Tensor::new(vec![values.len(), 1], values.iter().map(|&v| cast(v)).collect()).expect("column shape")
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(cfg: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let embed_w = store.add_weight("encoder.embed.w", cfg.input_dim, d, rng);
        let embed_b = store.add_bias("encoder.embed.b", d);
        let layers = (0..cfg.layers)
            .map(|l| Layer {
                wt: store.add_weight(format!("encoder.layer{l}.wt"), d + 1, d, rng),
                wq: store.add_weight(format!("encoder.layer{l}.wq"), d, d, rng),
                wk_self: store.add_weight(format!("encoder.layer{l}.wk_self"), d, d, rng),
                wk_nbr: store.add_weight(format!("encoder.layer{l}.wk_nbr"), d, d, rng),
                wv_self: store.add_weight(format!("encoder.layer{l}.wv_self"), d, d, rng),
                wv_nbr: store.add_weight(format!("encoder.layer{l}.wv_nbr"), d, d, rng),
            })
            .collect();
        let p = cfg.pool_width;
        let pool_wt = store.add_weight("encoder.pool.wt", d + 1, p, rng);
        let pool_wa = store.add_weight("encoder.pool.wa", p, p, rng);
        let post_w1 = store.add_weight("encoder.posterior.w1", p, cfg.posterior_hidden, rng);
        let post_b1 = store.add_bias("encoder.posterior.b1", cfg.posterior_hidden);
        let post_w2 = store.add_weight("encoder.posterior.w2", cfg.posterior_hidden, 2 * cfg.latent, rng);
        let post_b2 = store.add_bias("encoder.posterior.b2", 2 * cfg.latent);
        Ok(Self { cfg, embed_w, embed_b, layers, pool_wt, pool_wa, post_w1, post_b1, post_w2, post_b2 })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Layer-0 node representations: observation features embedded linearly.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &EncoderBatch) -> Result<Var> {
        if batch.input_dim != self.cfg.input_dim && batch.n_nodes() > 0 {
            return Err(Error::Config(format!("batch feature width {} but encoder expects {}", batch.input_dim, self.cfg.input_dim)));
        }
        let x = Tensor::new(vec![batch.n_nodes(), self.cfg.input_dim], batch.features.iter().map(|&v| cast(v)).collect())?;
        let x = tape.constant(x);
        Ok(tape.linear(x, p[self.embed_w], p[self.embed_b])?)
    }

    /// `relu(W [h, dt])` for rows `src` of `h`, with `W` stored as
    /// `[width + 1, out]` (last row multiplies `dt`).
    fn time_projection<T: Scalar>(tape: &mut Tape<T>, hw: Var, wd: Var, src: &Arc<[usize]>, dt: &[f64]) -> Result<Var> {
        let dt: Arc<[T]> = dt.iter().map(|&v| cast(v)).collect();
        Ok(tape.gather_time_relu(hw, wd, src.clone(), dt)?)
    }

    /// `h W_top` and the `dt` row of a `[width + 1, out]` matrix.
    fn split_time_matrix<T: Scalar>(tape: &mut Tape<T>, h: Var, w: Var) -> Result<(Var, Var)> {
        let width = tape.shape(h)[1];
        let wh = tape.slice(w, 0, 0, width)?;
        let wd = tape.slice(w, 0, width, 1)?;
        Ok((tape.matmul(h, wh)?, wd))
    }

    /// Scaled temporal encodings of every edge, computed once per forward
    /// pass and shared by all layers.
    pub fn edge_encodings<T: Scalar>(&self, tape: &mut Tape<T>, batch: &EncoderBatch) -> Result<KindPair> {
        let gain: T = cast(self.cfg.te_gain);
        let mut out = [None, None];
        for (k, set) in batch.kinds.iter().enumerate() {
            if set.len() > 0 && self.cfg.variant.time_encoding() != TimeEncoding::Omitted {
                let te = temporal_encoding_matrix::<T>(&set.dt, self.cfg.hidden)?.map(|v| v * gain);
                out[k] = Some(tape.constant(te));
            }
        }
        Ok(KindPair { self_temporal: out[0], neighbor: out[1] })
    }

    /// Time-aware source representations `ĥ` for the edges of each kind.
    pub fn time_aware_rep<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        batch: &EncoderBatch,
        h: Var,
        te: &KindPair,
        layer: usize,
    ) -> Result<KindPair> {
        let mode = self.cfg.variant.time_encoding();
        let projected = match mode {
            TimeEncoding::Fixed => None,
            _ => Some(Self::split_time_matrix(tape, h, p[self.layers[layer].wt])?),
        };
        let mut out = [None, None];
        for (k, set) in batch.kinds.iter().enumerate() {
            if set.len() == 0 {
                continue;
            }
            let base = match projected {
                Some((hw, wd)) => Self::time_projection(tape, hw, wd, &set.src, &set.dt)?,
                None => tape.gather_rows(h, set.src.clone())?,
            };
            out[k] = Some(match te.get(k) {
                Some(e) => tape.add(base, e)?,
                None => base,
            });
        }
        Ok(KindPair { self_temporal: out[0], neighbor: out[1] })
    }

    /// Normalized attention weights `[edges, 1]` (self-temporal edges first),
    /// one softmax per target node over all of its incoming edges.
    ///
    /// The key matrices are stored transposed: the score of edge `s -> t` is
    /// `ĥ_s . (h_t W_q W_k)`, so per-edge keys are never materialized.
    pub fn attention<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &EncoderBatch, h: Var, hhat: &KindPair, layer: usize) -> Result<Var> {
        if !self.cfg.variant.attention() {
            return Ok(tape.constant(column(&batch.inv_indegree)));
        }
        if batch.n_edges() == 0 {
            return Ok(tape.constant(Tensor::zeros(&[0, 1])));
        }
        let lp = &self.layers[layer];
        let q = tape.matmul(h, p[lp.wq])?;
        let mut scores = Vec::with_capacity(2);
        for (k, (set, wk)) in batch.kinds.iter().zip([lp.wk_self, lp.wk_nbr]).enumerate() {
            if let Some(hk) = hhat.get(k) {
                let qk = tape.matmul(q, p[wk])?;
                scores.push(tape.gather_row_dot(hk, qk, set.target.clone())?);
            }
        }
        let score = match scores[..] {
            [one] => one,
            _ => tape.concat(&scores, 0)?,
        };
        let score = tape.scale(score, cast(1.0 / (self.cfg.hidden as f64).sqrt()));
        Ok(tape.segment_softmax(score, batch.edge_target.clone(), batch.n_nodes())?)
    }

    /// One propagation step: `h + relu(sum over incoming edges of α · W_v ĥ)`,
    /// with the value projection applied after per-kind aggregation.
    pub fn gnn_layer<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &EncoderBatch, h: Var, te: &KindPair, layer: usize) -> Result<Var> {
        if batch.n_edges() == 0 {
            return Ok(h);
        }
        let lp = &self.layers[layer];
        let hhat = self.time_aware_rep(tape, p, batch, h, te, layer)?;
        let alpha = self.attention(tape, p, batch, h, &hhat, layer)?;
        let mut start = 0;
        let mut parts = Vec::with_capacity(2);
        for (k, (set, wv)) in batch.kinds.iter().zip([lp.wv_self, lp.wv_nbr]).enumerate() {
            let Some(hk) = hhat.get(k) else { continue };
            let a = tape.slice(alpha, 0, start, set.len())?;
            start += set.len();
            let weighted = tape.scale_rows(hk, a)?;
            let summed = tape.scatter_add_rows(weighted, set.target.clone(), batch.n_nodes())?;
            parts.push(tape.matmul(summed, p[wv])?);
        }
        let agg = match parts[..] {
            [one] => one,
            [a, b] => tape.add(a, b)?,
            _ => unreachable!(),
        };
        let agg = tape.relu(agg);
        Ok(tape.add(h, agg)?)
    }

    /// Per-object sequence representations `u`, `[objects, pool_width]`.
    pub fn sequence_aggregate<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &EncoderBatch, h: Var) -> Result<Var> {
        let (hw, wd) = Self::split_time_matrix(tape, h, p[self.pool_wt])?;
        let hhat = Self::time_projection(tape, hw, wd, &batch.node_index, &batch.pool_dt)?;
        let te = tape.constant(temporal_encoding_matrix::<T>(&batch.pool_dt, self.cfg.pool_width)?);
        let hhat = tape.add(hhat, te)?;
        let inv = tape.constant(column(&batch.inv_count));
        let mean_of = |tape: &mut Tape<T>, rows: Var| -> Result<Var> {
            let s = tape.scatter_add_rows(rows, batch.node_object.clone(), batch.n_objects)?;
            Ok(tape.scale_rows(s, inv)?)
        };
        match self.cfg.variant.pooling() {
            Pooling::First => Ok(tape.gather_rows(hhat, batch.first_node.clone())?),
            Pooling::Mean => mean_of(tape, hhat),
            Pooling::Attention => {
                let m = mean_of(tape, hhat)?;
                let a = tape.matmul(m, p[self.pool_wa])?;
                let a = tape.tanh(a);
                let gate = tape.gather_row_dot(hhat, a, batch.node_object.clone())?;
                let gate = tape.sigmoid(gate);
                let weighted = tape.scale_rows(hhat, gate)?;
                mean_of(tape, weighted)
            }
        }
    }

    /// Gaussian head: two-layer perceptron, second half of the output passed
    /// through `softplus + 1e-6`.
    pub fn posterior<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, u: Var) -> Result<Posterior> {
        let z = self.cfg.latent;
        let h = tape.linear(u, p[self.post_w1], p[self.post_b1])?;
        let h = tape.relu(h);
        let o = tape.linear(h, p[self.post_w2], p[self.post_b2])?;
        let mean = tape.slice(o, 1, 0, z)?;
        let raw = tape.slice(o, 1, z, z)?;
        let sp = tape.softplus(raw);
        let std = tape.offset(sp, cast(1e-6));
        Ok(Posterior { mean, std })
    }

    /// Embedding, all GNN layers, pooling and the posterior head.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, batch: &EncoderBatch) -> Result<Posterior> {
        let mut h = self.embed(tape, p, batch)?;
        let te = self.edge_encodings(tape, batch)?;
        for l in 0..self.layers.len() {
            h = self.gnn_layer(tape, p, batch, h, &te, l)?;
        }
        let u = self.sequence_aggregate(tape, p, batch, h)?;
        self.posterior(tape, p, u)
    }

    /// Posterior means and standard deviations without recording gradients.
    pub fn posterior_values<T: Scalar>(&self, store: &ParamStore<T>, batch: &EncoderBatch) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let post = self.encode(&mut tape, &p, batch)?;
        Ok((tape.value(post.mean).clone(), tape.value(post.std).clone()))
    }

    /// Handle of a named layer matrix, for tests and diagnostics.
    pub fn layer_param(&self, layer: usize, name: &str) -> Option<ParamId> {
        let lp = self.layers.get(layer)?;
        Some(match name {
            "wt" => lp.wt,
            "wq" => lp.wq,
            "wk_self" => lp.wk_self,
            "wk_nbr" => lp.wk_nbr,
            "wv_self" => lp.wv_self,
            "wv_nbr" => lp.wv_nbr,
            _ => return None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{InteractionGraph, Observation, ObservationSet};
    use crate::temporal_graph::{build_temporal_graph, temporal_encode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(times: &[&[f64]], rel: &[(usize, usize)], seed: u64) -> ObservationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = InteractionGraph::new(times.len());
        for &(i, j) in rel {
            g.add_edge(i, j).unwrap();
        }
        ObservationSet {
            objects: times
                .iter()
                .map(|ts| ts.iter().map(|&t| Observation { time: t, features: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect() }).collect())
                .collect(),
            relations: g,
            horizon: (0.0, 1.0),
        }
    }

    fn small_cfg(variant: Variant) -> EncoderConfig {
        EncoderConfig { hidden: 6, pool_width: 8, posterior_hidden: 5, latent: 3, variant, ..EncoderConfig::default() }
    }

    fn setup(variant: Variant) -> (Encoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(small_cfg(variant), &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (enc, store)
    }

    fn zero(store: &mut ParamStore<f64>, id: ParamId) {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn zero_time_weights_leave_encoding() {
        let (enc, mut store) = setup(Variant::Full);
        zero(&mut store, enc.layer_param(0, "wt").unwrap());
        let g = build_temporal_graph(&obs(&[&[0.3, 0.3 + 1e-9]], &[], 1), 1.0, 0.0).unwrap();
        let mut g0 = g.clone();
        g0.edges.iter_mut().for_each(|e| e.dt = 0.0);
        let batch = EncoderBatch::single(&g0).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let h = enc.embed(&mut tape, &p, &batch).unwrap();
        let te = enc.edge_encodings(&mut tape, &batch).unwrap();
        let hhat = enc.time_aware_rep(&mut tape, &p, &batch, h, &te, 0).unwrap();
        assert!(hhat.neighbor.is_none());
        let hhat = hhat.self_temporal.unwrap();
        let expect = temporal_encode(0.0, 6).unwrap();
        for r in 0..2 {
            assert_eq!(tape.value(hhat).row(r), expect.as_slice());
        }
    }

    #[test]
    fn attention_weights_normalize() {
        let (enc, store) = setup(Variant::Full);
        let g = build_temporal_graph(&obs(&[&[0.1, 0.4, 0.7], &[0.2, 0.5], &[0.9]], &[(0, 1), (1, 2)], 2), 1.0, 0.0).unwrap();
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
        for s in sums {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_edge_has_unit_weight_and_equal_keys_split_evenly() {
        let (enc, mut store) = setup(Variant::Full);
        let g = build_temporal_graph(&obs(&[&[0.2], &[0.6]], &[(0, 1)], 4), 1.0, 0.0).unwrap();
        let batch = EncoderBatch::single(&g).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let h = enc.embed(&mut tape, &p, &batch).unwrap();
        let te = enc.edge_encodings(&mut tape, &batch).unwrap();
        let hhat = enc.time_aware_rep(&mut tape, &p, &batch, h, &te, 0).unwrap();
        let a = enc.attention(&mut tape, &p, &batch, h, &hhat, 0).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0, 1.0]);

        zero(&mut store, enc.layer_param(0, "wk_self").unwrap());
        zero(&mut store, enc.layer_param(0, "wk_nbr").unwrap());
        let g = build_temporal_graph(&obs(&[&[0.1, 0.3, 0.5, 0.8]], &[], 5), 1.0, 0.0).unwrap();
        let batch = EncoderBatch::single(&g).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let h = enc.embed(&mut tape, &p, &batch).unwrap();
        let te = enc.edge_encodings(&mut tape, &batch).unwrap();
        let hhat = enc.time_aware_rep(&mut tape, &p, &batch, h, &te, 0).unwrap();
        let a = enc.attention(&mut tape, &p, &batch, h, &hhat, 0).unwrap();
        assert!(tape.value(a).data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn residual_paths() {
        let (enc, mut store) = setup(Variant::Full);
        let g = build_temporal_graph(&obs(&[&[0.1, 0.4], &[0.2], &[0.9]], &[(0, 1)], 6), 0.5, 0.0).unwrap();
        let batch = EncoderBatch::single(&g).unwrap();
        let run = |store: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let h0 = enc.embed(&mut tape, &p, &batch).unwrap();
            let te = enc.edge_encodings(&mut tape, &batch).unwrap();
            let h1 = enc.gnn_layer(&mut tape, &p, &batch, h0, &te, 0).unwrap();
            (tape.value(h0).clone(), tape.value(h1).clone())
        };
        let (h0, h1) = run(&store);
        // node 3 (object 2) is isolated
        assert_eq!(h0.row(3), h1.row(3));
        assert_ne!(h0.row(0), h1.row(0));
        for l in 0..2 {
            zero(&mut store, enc.layer_param(l, "wv_self").unwrap());
            zero(&mut store, enc.layer_param(l, "wv_nbr").unwrap());
        }
        let (h0, h1) = run(&store);
        assert_eq!(h0, h1);
    }

    #[test]
    fn zero_head_gives_softplus_zero() {
        let (enc, mut store) = setup(Variant::Full);
        for id in [enc.post_w1, enc.post_b1, enc.post_w2, enc.post_b2] {
            zero(&mut store, id);
        }
        let g = build_temporal_graph(&obs(&[&[0.1, 0.4]], &[], 7), 1.0, 0.0).unwrap();
        let (mean, std) = enc.posterior_values(&store, &EncoderBatch::single(&g).unwrap()).unwrap();
        assert!(mean.data().iter().all(|&m| m == 0.0));
        assert!(std.data().iter().all(|&s| (s - (2f64.ln() + 1e-6)).abs() < 1e-15));
    }

    #[test]
    fn first_and_mean_agree_on_singletons() {
        let o = obs(&[&[0.3], &[0.6]], &[(0, 1)], 8);
        let g = build_temporal_graph(&o, 1.0, 0.0).unwrap();
        let batch = EncoderBatch::single(&g).unwrap();
        let (first, sf) = setup(Variant::First);
        let (mean, sm) = setup(Variant::Mean);
        assert_eq!(first.posterior_values(&sf, &batch).unwrap(), mean.posterior_values(&sm, &batch).unwrap());
    }

    #[test]
    fn start_time_shift() {
        let (enc, store) = setup(Variant::Full);
        let o = obs(&[&[0.1, 0.35], &[0.2]], &[(0, 1)], 9);
        let shifted = ObservationSet {
            objects: o.objects.iter().map(|v| v.iter().map(|x| Observation { time: x.time + 0.25, ..x.clone() }).collect()).collect(),
            ..o.clone()
        };
        let run = |set: &ObservationSet, t0: f64| {
            let g = build_temporal_graph(set, 1.0, t0).unwrap();
            enc.posterior_values(&store, &EncoderBatch::single(&g).unwrap()).unwrap().0
        };
        let base = run(&o, 0.0);
        let both = run(&shifted, 0.25);
        let only_times = run(&shifted, 0.0);
        for (a, b) in base.data().iter().zip(both.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(base.data().iter().zip(only_times.data()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn disconnected_objects_do_not_interact() {
        let (enc, store) = setup(Variant::Full);
        let o = obs(&[&[0.1, 0.5], &[0.3, 0.6]], &[], 10);
        let mut o2 = o.clone();
        o2.objects[1][0].features = vec![5.0, -3.0, 2.0, 1.0];
        let post = |set: &ObservationSet| {
            let g = build_temporal_graph(set, 1.0, 0.0).unwrap();
            enc.posterior_values(&store, &EncoderBatch::single(&g).unwrap()).unwrap().0
        };
        let (a, b) = (post(&o), post(&o2));
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn uniform_weights_match_attention_with_equal_keys() {
        let (full, mut store) = setup(Variant::Full);
        for l in 0..2 {
            zero(&mut store, full.layer_param(l, "wk_self").unwrap());
            zero(&mut store, full.layer_param(l, "wk_nbr").unwrap());
        }
        let mut store2 = ParamStore::<f64>::new();
        let no_att = Encoder::new(small_cfg(Variant::NoAtt), &mut store2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let g = build_temporal_graph(&obs(&[&[0.1, 0.4, 0.7], &[0.2, 0.5]], &[(0, 1)], 11), 1.0, 0.0).unwrap();
        let batch = EncoderBatch::single(&g).unwrap();
        let (a, _) = full.posterior_values(&store, &batch).unwrap();
        let (b, _) = no_att.posterior_values(&store, &batch).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_gain_matches_no_encoding_variant() {
        let mut s1 = ParamStore::<f64>::new();
        let full = Encoder::new(EncoderConfig { te_gain: 0.0, ..small_cfg(Variant::Full) }, &mut s1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut s2 = ParamStore::<f64>::new();
        let no_pe = Encoder::new(small_cfg(Variant::NoPe), &mut s2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let g = build_temporal_graph(&obs(&[&[0.1, 0.4, 0.7], &[0.2, 0.5]], &[(0, 1)], 12), 1.0, 0.0).unwrap();
        let batch = EncoderBatch::single(&g).unwrap();
        assert_eq!(full.posterior_values(&s1, &batch).unwrap(), no_pe.posterior_values(&s2, &batch).unwrap());
    }

    #[test]
    fn batching_matches_separate_runs() {
        let (enc, store) = setup(Variant::Full);
        let g1 = build_temporal_graph(&obs(&[&[0.1, 0.4], &[0.2]], &[(0, 1)], 13), 1.0, 0.0).unwrap();
        let g2 = build_temporal_graph(&obs(&[&[0.3], &[0.5, 0.8], &[0.6]], &[(1, 2)], 14), 1.0, 0.0).unwrap();
        let joint = enc.posterior_values(&store, &EncoderBatch::new(&[&g1, &g2]).unwrap()).unwrap().0;
        let a = enc.posterior_values(&store, &EncoderBatch::single(&g1).unwrap()).unwrap().0;
        let b = enc.posterior_values(&store, &EncoderBatch::single(&g2).unwrap()).unwrap().0;
        let sep: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        for (x, y) in joint.data().iter().zip(&sep) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_object_rejected_and_variants_parse() {
        let mut o = obs(&[&[0.1], &[0.2]], &[], 15);
        o.objects[1].clear();
        let g = build_temporal_graph(&o, 1.0, 0.0).unwrap();
        assert!(matches!(EncoderBatch::single(&g), Err(Error::ZeroObservations { object: 1 })));
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("attention".parse::<Variant>().is_err());
    }
}
