//! Observation-level temporal graph consumed by the encoder.
//!
//! One node per observation. Directed edges join every pair of observations
//! of the same object (self-temporal) and every pair of observations of two
//! related objects (neighbor), as long as their time gap fits the window.

use std::fmt::Write as _;

use crate::autodiff::Tensor;
use crate::scalar::{cast, Scalar};
use crate::sim::ObservationSet;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("observation set is empty")]
    Empty,
    #[error("window threshold must be non-negative, got {0}")]
    NegativeThreshold(f64),
    #[error("invalid window parameters: {0}")]
    Window(String),
    #[error("temporal encoding width must be even and at least 2, got {0}")]
    OddWidth(usize),
}

/// Window size derived from sequence lengths and the observed ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowThreshold {
    pub value: f64,
    /// The raw formula went negative and was clamped to 0.
    pub clamped: bool,
}

/// `(max_len - min_len * ratio) / max_len`, clamped at 0.
pub fn window_threshold(max_len: f64, min_len: f64, observed_ratio: f64) -> Result<WindowThreshold, GraphError> {
    if !(max_len > 0.0) {
        return Err(GraphError::Window(format!("max length must be positive, got {max_len}")));
    }
    if !(observed_ratio > 0.0 && observed_ratio <= 1.0) {
        return Err(GraphError::Window(format!("observed ratio must lie in (0, 1], got {observed_ratio}")));
    }
    let raw = (max_len - min_len * observed_ratio) / max_len;
    Ok(if raw < 0.0 { WindowThreshold { value: 0.0, clamped: true } } else { WindowThreshold { value: raw, clamped: false } })
}

/// Sinusoidal encoding of a time gap: even slots `sin(dt / 10000^(2i/d))`,
/// odd slots `cos` of the same angle.
pub fn temporal_encode(dt: f64, d: usize) -> Result<Vec<f64>, GraphError> {
    if d < 2 || d % 2 != 0 {
        return Err(GraphError::OddWidth(d));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = dt / 10000f64.powf((2 * i) as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Encodings of several gaps stacked as rows, `[gaps.len(), d]`.
pub fn temporal_encoding_matrix<T: Scalar>(gaps: &[f64], d: usize) -> Result<Tensor<T>, GraphError> {
    let mut data = Vec::with_capacity(gaps.len() * d);
    for &g in gaps {
        data.extend(temporal_encode(g, d)?.into_iter().map(cast::<T>));
    }
    Ok(Tensor::new(vec![gaps.len(), d], data).expect("consistent shape"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    SelfTemporal,
    Neighbor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub object: usize,
    pub time: f64,
    pub features: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalEdge {
    pub source: usize,
    pub target: usize,
    /// `time(target) - time(source)`.
    pub dt: f64,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    pub n_objects: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<TemporalEdge>,
    pub t_start: f64,
}

/// Builds the windowed temporal graph. Timestamps are expected in rescaled
/// time; edges with `|dt| > threshold` are dropped.
pub fn build_temporal_graph(obs: &ObservationSet, threshold: f64, t_start: f64) -> Result<TemporalGraph, GraphError> {
    if !(threshold >= 0.0) {
        return Err(GraphError::NegativeThreshold(threshold));
    }
    if obs.total_observations() == 0 {
        return Err(GraphError::Empty);
    }
    let nodes: Vec<GraphNode> = obs
        .objects
        .iter()
        .enumerate()
        .flat_map(|(i, list)| list.iter().map(move |o| GraphNode { object: i, time: o.time, features: o.features.clone() }))
        .collect();
    let mut edges = Vec::new();
    for (t, target) in nodes.iter().enumerate() {
        for (s, source) in nodes.iter().enumerate() {
            if s == t {
                continue;
            }
            let kind = if source.object == target.object {
                EdgeKind::SelfTemporal
            } else if obs.relations.has_edge(source.object, target.object) {
                EdgeKind::Neighbor
            } else {
                continue;
            };
            let dt = target.time - source.time;
            if dt.abs() <= threshold {
                edges.push(TemporalEdge { source: s, target: t, dt, kind });
            }
        }
    }
    Ok(TemporalGraph { n_objects: obs.n_objects(), nodes, edges, t_start })
}

impl TemporalGraph {
    pub fn count(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// Node ids of object `i`, in time order.
    pub fn object_nodes(&self, i: usize) -> Vec<usize> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.object == i).map(|(k, _)| k).collect()
    }

    /// Line-oriented text form: a node table followed by an edge table.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# temporal graph: {} objects, t_start {}", self.n_objects, self.t_start);
        let _ = writeln!(s, "# nodes: id object time features...");
        for (k, n) in self.nodes.iter().enumerate() {
            let feats: Vec<String> = n.features.iter().map(|x| format!("{x:.6}")).collect();
            let _ = writeln!(s, "{k} {} {:.6} {}", n.object, n.time, feats.join(" "));
        }
        let _ = writeln!(s, "# edges: source target dt kind");
        for e in &self.edges {
            let kind = match e.kind {
                EdgeKind::SelfTemporal => "self",
                EdgeKind::Neighbor => "neighbor",
            };
            let _ = writeln!(s, "{} {} {:.6} {kind}", e.source, e.target, e.dt);
        }
        s
    }
}
