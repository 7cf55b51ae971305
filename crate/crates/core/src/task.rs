//! Interpolation and extrapolation episodes: which observations the encoder
//! sees, which ones the decoder is scored on, and where the ODE starts.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{rescale_times_with, Dataset, ObservationSet};
use crate::temporal_graph::{build_temporal_graph, window_threshold, TemporalGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Interpolation,
    Extrapolation,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Interpolation, Task::Extrapolation];

    pub fn name(self) -> &'static str {
        match self {
            Task::Interpolation => "interpolation",
            Task::Extrapolation => "extrapolation",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (expected interpolation or extrapolation)")))
    }
}

/// Training samples cover only the training horizon; test samples also
/// carry a second half beyond it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// One model input/target pair in rescaled time.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub conditioning: ObservationSet,
    pub targets: ObservationSet,
    pub t_start: f64,
    pub graph: TemporalGraph,
}

impl Episode {
    pub fn new(conditioning: ObservationSet, targets: ObservationSet, t_start: f64, threshold: f64) -> Result<Self> {
        let graph = build_temporal_graph(&conditioning, threshold, t_start)?;
        Ok(Self { conditioning, targets, t_start, graph })
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("observed ratio must lie in (0, 1], got {ratio}")))
    }
}

/// Keeps `ceil(ratio * T_i)` observations of each object, chosen uniformly
/// and independently per object.
pub fn subsample_ratio<R: Rng>(obs: &ObservationSet, ratio: f64, rng: &mut R) -> Result<ObservationSet> {
    check_ratio(ratio)?;
    let objects = obs
        .objects
        .iter()
        .map(|list| {
            let keep = ((ratio * list.len() as f64).ceil() as usize).min(list.len());
            let mut idx = sample(rng, list.len(), keep).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|k| list[k].clone()).collect()
        })
        .collect();
    Ok(ObservationSet { objects, relations: obs.relations.clone(), horizon: obs.horizon })
}

/// Conditioning on a ratio subset, targets are every observation, start at 0.
pub fn make_interpolation_split<R: Rng>(obs: &ObservationSet, ratio: f64, threshold: f64, rng: &mut R) -> Result<Episode> {
    let conditioning = subsample_ratio(obs, ratio, rng)?;
    Episode::new(conditioning, obs.clone(), 0.0, threshold)
}

/// Conditioning on a ratio subset of the first half, targets are the whole
/// second half, start at the boundary `t_start`.
pub fn make_extrapolation_split<R: Rng>(
    first: &ObservationSet,
    second: &ObservationSet,
    ratio: f64,
    t_start: f64,
    threshold: f64,
    rng: &mut R,
) -> Result<Episode> {
    if first.total_observations() == 0 || second.total_observations() == 0 {
        return Err(Error::Config("extrapolation needs observations on both sides of the boundary".into()));
    }
    let late = first.objects.iter().flatten().any(|o| o.time >= t_start);
    let early = second.objects.iter().flatten().any(|o| o.time < t_start);
    if late || early {
        return Err(Error::Config(format!("halves are not separated by t_start {t_start}")));
    }
    let conditioning = subsample_ratio(first, ratio, rng)?;
    Episode::new(conditioning, second.clone(), t_start, threshold)
}

/// Observations strictly before `boundary`, and the rest.
pub fn split_at(obs: &ObservationSet, boundary: f64) -> (ObservationSet, ObservationSet) {
    (obs.filtered(|_, o| o.time < boundary), obs.filtered(|_, o| o.time >= boundary))
}

/// Everything needed to turn raw dataset samples into episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePlan {
    pub task: Task,
    pub phase: Phase,
    /// Raw-time horizon mapped onto [0, 1].
    pub training_horizon: (f64, f64),
    /// Raw end of the first half of test samples.
    pub test_boundary: Option<f64>,
    /// Per-object observation counts used by the window threshold.
    pub length_range: (usize, usize),
}

impl EpisodePlan {
    /// Plan for samples of `ds`: rescaling uses the training horizon and the
    /// edge window uses the configured per-object observation counts.
    pub fn for_dataset(ds: &Dataset, task: Task, phase: Phase) -> Self {
        let cfg = &ds.header.config;
        EpisodePlan {
            task,
            phase,
            training_horizon: ds.training_horizon(),
            test_boundary: ds.header.boundary,
            length_range: (cfg.n_min, cfg.n_max),
        }
    }

    /// Edge window for a given conditioning ratio.
    pub fn threshold(&self, ratio: f64) -> Result<f64> {
        let (lo, hi) = self.length_range;
        Ok(window_threshold(hi as f64, lo as f64, ratio)?.value)
    }

    /// Rescaled start time of the ODE.
    pub fn t_start(&self) -> Result<f64> {
        match (self.task, self.phase) {
            (Task::Interpolation, _) => Ok(0.0),
            (Task::Extrapolation, Phase::Train) => Ok(0.5),
            (Task::Extrapolation, Phase::Test) => {
                let b = self.test_boundary.ok_or_else(|| Error::Config("test samples carry no boundary".into()))?;
                let (lo, hi) = self.training_horizon;
                Ok((b - lo) / (hi - lo))
            }
        }
    }

    pub fn episode<R: Rng>(&self, raw: &ObservationSet, ratio: f64, rng: &mut R) -> Result<Episode> {
        let obs = rescale_times_with(raw, self.training_horizon)?;
        let threshold = self.threshold(ratio)?;
        let t_start = self.t_start()?;
        match self.task {
            Task::Interpolation => {
                let within = match self.phase {
                    Phase::Train => obs,
                    Phase::Test => split_at(&obs, self.t_start_of_second_half()?).0,
                };
                make_interpolation_split(&within, ratio, threshold, rng)
            }
            Task::Extrapolation => {
                let (first, second) = split_at(&obs, t_start);
                make_extrapolation_split(&first, &second, ratio, t_start, threshold, rng)
            }
        }
    }

    fn t_start_of_second_half(&self) -> Result<f64> {
        EpisodePlan { task: Task::Extrapolation, ..self.clone() }.t_start()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{InteractionGraph, Observation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(times: &[f64]) -> ObservationSet {
        let o = |t: f64| Observation { time: t, features: vec![t, 0.0, 0.0, 0.0] };
        let mut g = InteractionGraph::new(2);
        g.add_edge(0, 1).unwrap();
        ObservationSet { objects: vec![times.iter().map(|&t| o(t)).collect(), times.iter().map(|&t| o(t + 0.05)).collect()], relations: g, horizon: (0.0, 12.0) }
    }

    fn plan(task: Task, phase: Phase) -> EpisodePlan {
        EpisodePlan { task, phase, training_horizon: (0.0, 6.0), test_boundary: Some(6.0), length_range: (40, 52) }
    }

    #[test]
    fn ceiling_counts() {
        let times: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sub = subsample_ratio(&raw(&times), 0.4, &mut rng).unwrap();
        assert!(sub.objects.iter().all(|o| o.len() == 20));
        let all = subsample_ratio(&raw(&times), 1.0, &mut rng).unwrap();
        assert_eq!(all, raw(&times));
        assert!(subsample_ratio(&raw(&times), 0.0, &mut rng).is_err());
        let tiny = subsample_ratio(&raw(&times[..3]), 0.01, &mut rng).unwrap();
        assert!(tiny.objects.iter().all(|o| o.len() == 1));
    }

    #[test]
    fn extrapolation_boundaries() {
        let times: Vec<f64> = (0..100).map(|k| k as f64 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let train = plan(Task::Extrapolation, Phase::Train).episode(&raw(&times[..55]), 0.6, &mut rng).unwrap();
        assert_eq!(train.t_start, 0.5);
        let test = plan(Task::Extrapolation, Phase::Test).episode(&raw(&times), 1.0, &mut rng).unwrap();
        assert_eq!(test.t_start, 1.0);
        for ep in [&train, &test] {
            assert!(ep.conditioning.objects.iter().flatten().all(|o| o.time < ep.t_start));
            assert!(ep.targets.objects.iter().flatten().all(|o| o.time >= ep.t_start));
        }
        let before = raw(&times).objects.iter().flatten().filter(|o| o.time < 6.0).count();
        assert_eq!(test.conditioning.total_observations(), before);
    }

    #[test]
    fn interpolation_test_drops_second_half() {
        let times: Vec<f64> = (0..100).map(|k| k as f64 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = plan(Task::Interpolation, Phase::Test).episode(&raw(&times), 0.4, &mut rng).unwrap();
        assert_eq!(ep.t_start, 0.0);
        assert!(ep.targets.objects.iter().flatten().all(|o| o.time < 1.0));
        for (c, t) in ep.conditioning.objects.iter().zip(&ep.targets.objects) {
            assert!(c.iter().all(|o| t.contains(o)));
        }
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
    }
}
