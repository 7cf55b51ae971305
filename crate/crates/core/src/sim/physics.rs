//! Spring and charged-particle systems integrated with kick-drift-kick leapfrog.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{InteractionGraph, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Spring,
    Charged,
}

impl std::str::FromStr for SystemKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spring" | "springs" => Ok(Self::Spring),
            "charged" => Ok(Self::Charged),
            other => Err(format!("unknown system {other:?} (expected spring or charged)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_objects: usize,
    pub box_half_width: f64,
    pub step: f64,
    pub total_steps: usize,
    pub stride: usize,
    pub interaction_probability: f64,
    pub kind: SystemKind,
    pub seed: u64,
    pub spring_constant: f64,
    pub charge_constant: f64,
    pub softening: f64,
    /// Std-dev of initial positions.
    pub position_std: f64,
    /// Norm of each initial velocity.
    pub speed: f64,
    pub walls: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_objects: 5,
            box_half_width: 5.0,
            step: 0.001,
            total_steps: 6000,
            stride: 100,
            interaction_probability: 0.5,
            kind: SystemKind::Spring,
            seed: 0,
            spring_constant: 0.1,
            charge_constant: 1.0,
            softening: 1e-3,
            position_std: 0.5,
            speed: 0.5,
            walls: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.n_objects < 1 {
            return bad("n_objects must be at least 1");
        }
        if self.total_steps < 1 || self.stride < 1 {
            return bad("total_steps and stride must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.interaction_probability) {
            return bad("interaction_probability must lie in [0, 1]");
        }
        if !(self.step > 0.0 && self.box_half_width > 0.0) {
            return bad("step and box_half_width must be positive");
        }
        Ok(())
    }

    /// Number of stored grid points.
    pub fn grid_len(&self) -> usize {
        self.total_steps / self.stride
    }

    pub fn horizon(&self) -> (f64, f64) {
        (0.0, self.total_steps as f64 * self.step)
    }
}

/// Positions and velocities of every object, `[x, y, vx, vy]` each.
pub type State = Vec<[f64; 4]>;

/// Dense ground-truth trajectories on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    pub times: Vec<f64>,
    /// `states[k][i]` is object `i` at `times[k]`.
    pub states: Vec<State>,
    pub relations: InteractionGraph,
    /// Charges for charged systems, empty for springs.
    pub charges: Vec<f64>,
}

impl TrajectorySet {
    pub fn n_objects(&self) -> usize {
        self.relations.n_objects()
    }
}

/// Pairwise force field of one system.
#[derive(Clone, Debug)]
pub enum ForceLaw {
    /// Hooke springs on every edge.
    Spring { k: f64, graph: InteractionGraph },
    /// Softened Coulomb forces between every pair.
    Coulomb { c: f64, charges: Vec<f64>, softening: f64 },
}

impl ForceLaw {
    pub fn accelerations(&self, state: &State) -> Vec<[f64; 2]> {
        let n = state.len();
        let mut acc = vec![[0.0; 2]; n];
        match self {
            ForceLaw::Spring { k, graph } => {
                for (i, j) in graph.undirected_edges() {
                    let dx = state[i][0] - state[j][0];
                    let dy = state[i][1] - state[j][1];
                    acc[i][0] -= k * dx;
                    acc[i][1] -= k * dy;
                    acc[j][0] += k * dx;
                    acc[j][1] += k * dy;
                }
            }
            ForceLaw::Coulomb { c, charges, softening } => {
                for i in 0..n {
                    for j in i + 1..n {
                        let dx = state[i][0] - state[j][0];
                        let dy = state[i][1] - state[j][1];
                        let r = (dx * dx + dy * dy).sqrt();
                        let s = c * charges[i] * charges[j] / (r * r * r + softening);
                        acc[i][0] += s * dx;
                        acc[i][1] += s * dy;
                        acc[j][0] -= s * dx;
                        acc[j][1] -= s * dy;
                    }
                }
            }
        }
        acc
    }

    /// Potential energy, for springs only; `None` for the softened Coulomb law.
    pub fn potential(&self, state: &State) -> Option<f64> {
        match self {
            ForceLaw::Spring { k, graph } => Some(
                graph
                    .undirected_edges()
                    .map(|(i, j)| {
                        let dx = state[i][0] - state[j][0];
                        let dy = state[i][1] - state[j][1];
                        0.5 * k * (dx * dx + dy * dy)
                    })
                    .sum(),
            ),
            ForceLaw::Coulomb { .. } => None,
        }
    }
}

pub fn kinetic_energy(state: &State) -> f64 {
    state.iter().map(|s| 0.5 * (s[2] * s[2] + s[3] * s[3])).sum()
}

pub fn momentum(state: &State) -> [f64; 2] {
    state.iter().fold([0.0, 0.0], |m, s| [m[0] + s[2], m[1] + s[3]])
}

/// Kick-drift-kick integrator with optional elastic walls at `±half_width`.
#[derive(Clone, Debug)]
pub struct Leapfrog {
    pub law: ForceLaw,
    pub dt: f64,
    pub walls: Option<f64>,
}

impl Leapfrog {
    pub fn step(&self, state: &mut State) {
        let half = 0.5 * self.dt;
        let acc = self.law.accelerations(state);
        for (s, a) in state.iter_mut().zip(&acc) {
            s[2] += half * a[0];
            s[3] += half * a[1];
            s[0] += self.dt * s[2];
            s[1] += self.dt * s[3];
            if let Some(b) = self.walls {
                reflect(s, b);
            }
        }
        let acc = self.law.accelerations(state);
        for (s, a) in state.iter_mut().zip(&acc) {
            s[2] += half * a[0];
            s[3] += half * a[1];
        }
    }

    /// Total energy when the force law has a potential.
    pub fn energy(&self, state: &State) -> Option<f64> {
        self.law.potential(state).map(|p| p + kinetic_energy(state))
    }
}

fn reflect(s: &mut [f64; 4], b: f64) {
    for axis in 0..2 {
        if s[axis] > b {
            s[axis] = 2.0 * b - s[axis];
            s[axis + 2] = -s[axis + 2];
        } else if s[axis] < -b {
            s[axis] = -2.0 * b - s[axis];
            s[axis + 2] = -s[axis + 2];
        }
    }
}

/// Records every `stride`-th state of `steps` integration steps, starting
/// with the initial state. Also returns the largest relative energy drift
/// seen at any step (0 when the law has no potential).
pub fn integrate(integrator: &Leapfrog, initial: State, steps: usize, stride: usize) -> (Vec<State>, f64) {
    let mut state = initial;
    let e0 = integrator.energy(&state);
    let mut drift = 0.0f64;
    let mut out = Vec::with_capacity(steps / stride + 1);
    for k in 0..steps {
        if k % stride == 0 {
            out.push(state.clone());
        }
        integrator.step(&mut state);
        if let (Some(e0), Some(e)) = (e0, integrator.energy(&state)) {
            drift = drift.max(((e - e0) / e0.abs().max(f64::MIN_POSITIVE)).abs());
        }
    }
    (out, drift)
}

fn initial_state(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> State {
    (0..cfg.n_objects)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            let y: f64 = StandardNormal.sample(rng);
            let vx: f64 = StandardNormal.sample(rng);
            let vy: f64 = StandardNormal.sample(rng);
            let norm = (vx * vx + vy * vy).sqrt().max(1e-12);
            [x * cfg.position_std, y * cfg.position_std, vx * cfg.speed / norm, vy * cfg.speed / norm]
        })
        .collect()
}

fn grid_times(cfg: &SimConfig, len: usize) -> Vec<f64> {
    (0..len).map(|k| (k * cfg.stride) as f64 * cfg.step).collect()
}

/// Spring system; also returns the maximum relative energy drift.
pub fn simulate_springs_with_energy(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<(TrajectorySet, f64), SimError> {
    cfg.validate()?;
    if cfg.kind != SystemKind::Spring {
        return Err(SimError::Config("simulate_springs needs kind = spring".into()));
    }
    let mut graph = InteractionGraph::new(cfg.n_objects);
    for i in 0..cfg.n_objects {
        for j in i + 1..cfg.n_objects {
            if rng.gen_bool(cfg.interaction_probability) {
                graph.add_edge(i, j)?;
            }
        }
    }
    let initial = initial_state(cfg, rng);
    let integrator = Leapfrog {
        law: ForceLaw::Spring { k: cfg.spring_constant, graph: graph.clone() },
        dt: cfg.step,
        walls: cfg.walls.then_some(cfg.box_half_width),
    };
    let (states, drift) = integrate(&integrator, initial, cfg.total_steps, cfg.stride);
    let times = grid_times(cfg, states.len());
    Ok((TrajectorySet { times, states, relations: graph, charges: Vec::new() }, drift))
}

pub fn simulate_springs(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<TrajectorySet, SimError> {
    simulate_springs_with_energy(cfg, rng).map(|(t, _)| t)
}

pub fn simulate_charged(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<TrajectorySet, SimError> {
    cfg.validate()?;
    if cfg.kind != SystemKind::Charged {
        return Err(SimError::Config("simulate_charged needs kind = charged".into()));
    }
    let charges: Vec<f64> =
        (0..cfg.n_objects).map(|_| if rng.gen_bool(cfg.interaction_probability) { 1.0 } else { -1.0 }).collect();
    let graph = InteractionGraph::complete(cfg.n_objects);
    let initial = initial_state(cfg, rng);
    let integrator = Leapfrog {
        law: ForceLaw::Coulomb { c: cfg.charge_constant, charges: charges.clone(), softening: cfg.softening },
        dt: cfg.step,
        walls: cfg.walls.then_some(cfg.box_half_width),
    };
    let (states, _) = integrate(&integrator, initial, cfg.total_steps, cfg.stride);
    let times = grid_times(cfg, states.len());
    Ok(TrajectorySet { times, states, relations: graph, charges })
}

/// Dispatches on `cfg.kind`.
pub fn simulate(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<TrajectorySet, SimError> {
    match cfg.kind {
        SystemKind::Spring => simulate_springs(cfg, rng),
        SystemKind::Charged => simulate_charged(cfg, rng),
    }
}
