//! Ground-truth multi-agent systems and the irregular observation protocol
//! that turns them into training data.

mod dataset;
mod observe;
mod physics;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_bundle, generate_split, read_dataset, write_dataset, Dataset, DatasetBundle, DatasetHeader, GenConfig, Manifest, Split,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use observe::{
    denormalize_features, normalize_features, normalize_observations, rescale_times, rescale_times_with, subsample_irregular,
    subsample_irregular_range, ScaleRecord,
};
pub use physics::{
    integrate, kinetic_energy, momentum, simulate, simulate_charged, simulate_springs, simulate_springs_with_energy, ForceLaw,
    Leapfrog, SimConfig, State, SystemKind, TrajectorySet,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("invalid edge ({0}, {1})")]
    Edge(usize, usize),
    #[error("cannot draw {wanted} observations from {available} grid points")]
    TooFewPoints { wanted: usize, available: usize },
    #[error("zero-length time horizon")]
    EmptyHorizon,
    #[error("nothing to normalize")]
    Empty,
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

/// Static relations between `n` objects; symmetric, no self-loops.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionGraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl InteractionGraph {
    pub fn new(n: usize) -> Self {
        Self { n, edges: BTreeSet::new() }
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Self::new(n);
        for i in 0..n {
            for j in i + 1..n {
                g.add_edge(i, j).expect("valid indices");
            }
        }
        g
    }

    /// Adds `i <-> j` (both directions).
    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<(), SimError> {
        if i == j || i >= self.n || j >= self.n {
            return Err(SimError::Edge(i, j));
        }
        self.edges.insert((i, j));
        self.edges.insert((j, i));
        Ok(())
    }

    pub fn n_objects(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i, j))
    }

    /// Ordered pairs, both directions.
    pub fn directed_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// Each relation once, as `(i, j)` with `i < j`.
    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied().filter(|(i, j)| i < j)
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.range((i, 0)..(i + 1, 0)).map(|&(_, j)| j)
    }

    /// The graph with object `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut g = Self::new(self.n);
        for (i, j) in self.undirected_edges() {
            g.add_edge(perm[i], perm[j]).expect("permutation keeps edges valid");
        }
        g
    }
}

/// One irregular observation of one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub features: Vec<f64>,
}

/// Per-object irregularly-timed observations plus the relation graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    /// `objects[i]` holds object `i`'s observations in increasing time.
    pub objects: Vec<Vec<Observation>>,
    pub relations: InteractionGraph,
    pub horizon: (f64, f64),
}

impl ObservationSet {
    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.objects.iter().flatten().next().map_or(0, |o| o.features.len())
    }

    pub fn total_observations(&self) -> usize {
        self.objects.iter().map(Vec::len).sum()
    }

    /// Checks ordering, horizon bounds and relation size.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.relations.n_objects() != self.objects.len() {
            return Err(SimError::Format("relation graph size differs from object count".into()));
        }
        let (lo, hi) = self.horizon;
        for (i, obs) in self.objects.iter().enumerate() {
            for w in obs.windows(2) {
                if w[1].time <= w[0].time {
                    return Err(SimError::Format(format!("object {i}: timestamps not strictly increasing")));
                }
            }
            if obs.iter().any(|o| o.time < lo || o.time > hi) {
                return Err(SimError::Format(format!("object {i}: timestamp outside horizon")));
            }
        }
        Ok(())
    }

    /// Keeps only observations for which `keep(object, obs)` holds.
    pub fn filtered(&self, keep: impl Fn(usize, &Observation) -> bool) -> Self {
        Self {
            objects: self
                .objects
                .iter()
                .enumerate()
                .map(|(i, obs)| obs.iter().filter(|o| keep(i, o)).cloned().collect())
                .collect(),
            relations: self.relations.clone(),
            horizon: self.horizon,
        }
    }

    /// Object `i` becomes object `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut objects = vec![Vec::new(); self.objects.len()];
        for (i, obs) in self.objects.iter().enumerate() {
            objects[perm[i]] = obs.clone();
        }
        Self { objects, relations: self.relations.permuted(perm), horizon: self.horizon }
    }
}
