//! Static SVG figures of observed and predicted 2-D paths.

use std::path::Path;

use plotters::prelude::*;

use crate::encoder::EncoderBatch;
use crate::error::{Error, Result};
use crate::graph_ode::{sample_trajectories, OdeSystem};
use crate::model::Model;
use crate::scalar::{widen, Scalar};
use crate::task::Episode;

/// Points along each object's path: `paths[object][k] = (x, y)`.
pub type Paths = Vec<Vec<(f64, f64)>>;

fn xy(set: &crate::sim::ObservationSet) -> Paths {
    set.objects.iter().map(|o| o.iter().map(|x| (x.features[0], x.features[1])).collect()).collect()
}

/// Posterior-mean trajectory of every object on `steps` equal intervals
/// from the start time to the last target time.
pub fn predicted_paths<T: Scalar>(model: &Model<T>, episode: &Episode, steps: usize) -> Result<Paths> {
    let end = episode.targets.objects.iter().flatten().map(|o| o.time).fold(episode.t_start, f64::max);
    let times: Vec<f64> = (1..=steps.max(1)).map(|k| episode.t_start + (end - episode.t_start) * k as f64 / steps.max(1) as f64).collect();
    let (mean, std) = model.encoder.posterior_values(&model.store, &EncoderBatch::single(&episode.graph)?)?;
    let sys = OdeSystem::single(&episode.targets.relations);
    let states = sample_trajectories::<T, rand_chacha::ChaCha8Rng>(&model.ode, &model.decoder, &model.store, &sys, &mean, &std, episode.t_start, &times, None)?;
    let n = episode.targets.n_objects();
    Ok((0..n).map(|i| states.iter().map(|s| (widen(s.at2(i, 0)), widen(s.at2(i, 1)))).collect()).collect())
}

fn bounds(paths: &[&Paths]) -> (std::ops::Range<f64>, std::ops::Range<f64>) {
    let pts = paths.iter().flat_map(|p| p.iter().flatten());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (-1.0..1.0, -1.0..1.0);
    }
    let pad = |a: f64, b: f64| {
        let m = 0.05 * (b - a).max(1e-3);
        (a - m)..(b + m)
    };
    (pad(x0, x1), pad(y0, y1))
}

/// Writes one figure: conditioning points filled, targets hollow, predicted
/// paths as lines, one colour per object.
pub fn write_trajectory_svg(path: &Path, title: &str, episode: &Episode, predicted: &Paths) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let (cond, targets) = (xy(&episode.conditioning), xy(&episode.targets));
    let (xr, yr) = bounds(&[&cond, &targets, predicted]);
    let root = SVGBackend::new(path, (640, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(40)
        .build_cartesian_2d(xr, yr)
        .map_err(|e| plot_err(&e))?;
    chart.configure_mesh().x_desc("x").y_desc("y").draw().map_err(|e| plot_err(&e))?;
    for (i, ((c, t), p)) in cond.iter().zip(&targets).zip(predicted).enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart.draw_series(LineSeries::new(p.iter().copied(), color.stroke_width(2))).map_err(|e| plot_err(&e))?;
        chart.draw_series(t.iter().map(|&q| Circle::new(q, 4, color.stroke_width(1)))).map_err(|e| plot_err(&e))?;
        chart.draw_series(c.iter().map(|&q| Circle::new(q, 3, color.filled()))).map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}
