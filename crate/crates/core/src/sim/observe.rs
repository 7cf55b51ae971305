use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Observation, ObservationSet, SimError, TrajectorySet};

/// Independently per object: draw `n ~ U{n_min..=n_max}` and keep `n`
/// distinct grid points chosen uniformly, in time order.
pub fn subsample_irregular<R: Rng>(traj: &TrajectorySet, n_min: usize, n_max: usize, rng: &mut R) -> Result<ObservationSet, SimError> {
    subsample_irregular_range(traj, 0..traj.times.len(), n_min, n_max, rng)
}

/// [`subsample_irregular`] restricted to grid indices in `range`.
pub fn subsample_irregular_range<R: Rng>(
    traj: &TrajectorySet,
    range: Range<usize>,
    n_min: usize,
    n_max: usize,
    rng: &mut R,
) -> Result<ObservationSet, SimError> {
    let available = range.len();
    if n_min > n_max {
        return Err(SimError::Config(format!("n_min {n_min} exceeds n_max {n_max}")));
    }
    if n_min > available || range.end > traj.times.len() {
        return Err(SimError::TooFewPoints { wanted: n_min, available });
    }
    let n_max = n_max.min(available);
    let objects = (0..traj.n_objects())
        .map(|i| {
            let n = rng.gen_range(n_min..=n_max);
            let mut idx = sample(rng, available, n).into_vec();
            idx.sort_unstable();
            idx.into_iter()
                .map(|k| {
                    let k = range.start + k;
                    Observation { time: traj.times[k], features: traj.states[k][i].to_vec() }
                })
                .collect()
        })
        .collect();
    let dt = traj.times.get(1).map_or(0.0, |t| t - traj.times[0]);
    let horizon = (
        traj.times.get(range.start).copied().unwrap_or(0.0),
        traj.times.get(range.end - 1).map_or(0.0, |t| t + dt),
    );
    Ok(ObservationSet { objects, relations: traj.relations.clone(), horizon })
}

/// Per-feature divisors applied by normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub scales: Vec<f64>,
    /// Dimensions whose values were all zero (scale left at 1).
    pub degenerate: Vec<bool>,
}

impl ScaleRecord {
    pub fn identity(dim: usize) -> Self {
        Self { scales: vec![1.0; dim], degenerate: vec![false; dim] }
    }

    fn from_max_abs(max_abs: Vec<f64>) -> Self {
        let degenerate: Vec<bool> = max_abs.iter().map(|&m| m == 0.0).collect();
        let scales = max_abs.iter().map(|&m| if m == 0.0 { 1.0 } else { m }).collect();
        Self { scales, degenerate }
    }

    pub fn normalize(&self, features: &mut [f64]) {
        for (x, s) in features.iter_mut().zip(&self.scales) {
            *x /= s;
        }
    }

    pub fn denormalize(&self, features: &mut [f64]) {
        for (x, s) in features.iter_mut().zip(&self.scales) {
            *x *= s;
        }
    }
}

fn max_abs_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Option<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for r in rows {
        let m = acc.get_or_insert_with(|| vec![0.0; r.len()]);
        for (a, &x) in m.iter_mut().zip(r) {
            *a = a.max(x.abs());
        }
    }
    acc
}

/// Divides each feature dimension by its max-abs over every trajectory given.
pub fn normalize_features(datasets: &mut [TrajectorySet]) -> Result<ScaleRecord, SimError> {
    let max = max_abs_rows(datasets.iter().flat_map(|d| d.states.iter().flatten().map(|s| s.as_slice()))).ok_or(SimError::Empty)?;
    let record = ScaleRecord::from_max_abs(max);
    for d in datasets.iter_mut() {
        for s in d.states.iter_mut().flatten() {
            record.normalize(s);
        }
    }
    Ok(record)
}

/// Inverse of [`normalize_features`].
pub fn denormalize_features(datasets: &mut [TrajectorySet], record: &ScaleRecord) {
    for d in datasets.iter_mut() {
        for s in d.states.iter_mut().flatten() {
            record.denormalize(s);
        }
    }
}

/// [`normalize_features`] over observation sets (all splits at once).
pub fn normalize_observations<'a>(sets: impl IntoIterator<Item = &'a mut ObservationSet>) -> Result<ScaleRecord, SimError> {
    let mut sets: Vec<&mut ObservationSet> = sets.into_iter().collect();
    let max = max_abs_rows(sets.iter().flat_map(|s| s.objects.iter().flatten().map(|o| o.features.as_slice())))
        .ok_or(SimError::Empty)?;
    let record = ScaleRecord::from_max_abs(max);
    for s in sets.iter_mut() {
        for o in s.objects.iter_mut().flatten() {
            record.normalize(&mut o.features);
        }
    }
    Ok(record)
}

/// Maps the declared horizon affinely onto [0, 1].
pub fn rescale_times(obs: &ObservationSet) -> Result<ObservationSet, SimError> {
    rescale_times_with(obs, obs.horizon)
}

/// Maps `reference` affinely onto [0, 1]; times outside `reference` land
/// outside [0, 1] (extrapolation targets).
pub fn rescale_times_with(obs: &ObservationSet, reference: (f64, f64)) -> Result<ObservationSet, SimError> {
    let (lo, hi) = reference;
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(SimError::EmptyHorizon);
    }
    let map = |t: f64| (t - lo) / span;
    let mut out = obs.clone();
    for o in out.objects.iter_mut().flatten() {
        o.time = map(o.time);
    }
    out.horizon = (map(obs.horizon.0), map(obs.horizon.1));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_springs, InteractionGraph, SimConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(seed: u64) -> TrajectorySet {
        let cfg = SimConfig { n_objects: 3, ..SimConfig::default() };
        simulate_springs(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn degenerate_range_gives_exact_counts() {
        let t = traj(1);
        let obs = subsample_irregular(&t, 17, 17, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(obs.objects.iter().all(|o| o.len() == 17));
        obs.validate().unwrap();
    }

    #[test]
    fn counts_within_bounds_and_values_untouched() {
        let t = traj(4);
        let obs = subsample_irregular(&t, 40, 52, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (i, o) in obs.objects.iter().enumerate() {
            assert!((40..=52).contains(&o.len()));
            for ob in o {
                let k = t.times.iter().position(|&x| x == ob.time).unwrap();
                assert_eq!(ob.features, t.states[k][i].to_vec());
            }
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let t = traj(1);
        assert!(matches!(
            subsample_irregular(&t, 61, 70, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SimError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn normalization_divides_by_max_abs() {
        let o = |x: f64| Observation { time: 0.0, features: vec![x, 0.0] };
        let mut set = ObservationSet { objects: vec![vec![o(-4.0), o(2.0)]], relations: InteractionGraph::new(1), horizon: (0.0, 1.0) };
        let rec = normalize_observations([&mut set]).unwrap();
        assert_eq!(rec.scales, vec![4.0, 1.0]);
        assert_eq!(rec.degenerate, vec![false, true]);
        assert_eq!(set.objects[0][0].features[0], -1.0);
        let again = normalize_observations([&mut set]).unwrap();
        assert_eq!(again.scales[0], 1.0);
    }

    #[test]
    fn rescale_endpoints_and_midpoint() {
        let o = |t: f64| Observation { time: t, features: vec![] };
        let set = ObservationSet { objects: vec![vec![o(0.0), o(3000.0), o(6000.0)]], relations: InteractionGraph::new(1), horizon: (0.0, 6000.0) };
        let r = rescale_times(&set).unwrap();
        let times: Vec<f64> = r.objects[0].iter().map(|o| o.time).collect();
        assert_eq!(times, vec![0.0, 0.5, 1.0]);
        let flat = ObservationSet { horizon: (1.0, 1.0), ..set };
        assert!(matches!(rescale_times(&flat), Err(SimError::EmptyHorizon)));
    }
}
