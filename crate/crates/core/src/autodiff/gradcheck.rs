//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use crate::scalar::{cast, widen, Scalar};

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Set when the function or a gradient was not finite or evaluation failed.
    pub failure: Option<String>,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_error < tol
    }

    fn failed(msg: String) -> Self {
        Self { max_rel_error: f64::INFINITY, checked: 0, failure: Some(msg) }
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<f64, String> {
    let t = tape.value(v);
    let x = t.item().ok_or_else(|| format!("output has shape {:?}, expected one element", t.shape()))?;
    let x = widen(x);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("non-finite output {x}"))
    }
}

/// Checks the gradient of `f` at `x` against central differences with step `eps`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> GradCheck
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, TensorError>,
{
    if eps <= 0.0 {
        return GradCheck::failed(format!("step must be positive, got {eps}"));
    }
    let eval = |point: &Tensor<T>| -> Result<f64, String> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone());
        let out = f(&mut tape, v).map_err(|e| e.to_string())?;
        scalar_of(&tape, out)
    };
    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = match f(&mut tape, v) {
            Ok(o) => o,
            Err(e) => return GradCheck::failed(e.to_string()),
        };
        if let Err(e) = scalar_of(&tape, out) {
            return GradCheck::failed(e);
        }
        match tape.backward(out) {
            Ok(g) => g.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())),
            Err(e) => return GradCheck::failed(e.to_string()),
        }
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += cast(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] -= cast(eps);
        let numeric = match (eval(&plus), eval(&minus)) {
            (Ok(p), Ok(m)) => (p - m) / (2.0 * eps),
            (Err(e), _) | (_, Err(e)) => return GradCheck::failed(e),
        };
        let a = widen(analytic.data()[i]);
        if !a.is_finite() {
            return GradCheck::failed(format!("non-finite analytic gradient at {i}"));
        }
        worst = worst.max(rel_error(a, numeric));
    }
    GradCheck { max_rel_error: worst, checked: x.numel(), failure: None }
}

/// Per-parameter result of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub result: GradCheck,
}

/// Checks parameter gradients of a scalar function of a [`ParamStore`].
///
/// At most `per_param` coordinates of each tensor are probed (all of them
/// when `None`), picked with `rng`.
pub fn grad_check_params<T, F, R>(store: &ParamStore<T>, f: F, eps: f64, per_param: Option<usize>, rng: &mut R) -> Vec<ParamCheck>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &Bound) -> Result<Var, TensorError>,
    R: Rng,
{
    let eval = |s: &ParamStore<T>| -> Result<f64, String> {
        let mut tape = Tape::new();
        let bound = s.bind_frozen(&mut tape);
        let out = f(&mut tape, &bound).map_err(|e| e.to_string())?;
        scalar_of(&tape, out)
    };
    let analytic = {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let out = match f(&mut tape, &bound) {
            Ok(o) => o,
            Err(e) => return vec![ParamCheck { name: "<forward>".into(), result: GradCheck::failed(e.to_string()) }],
        };
        if let Err(e) = scalar_of(&tape, out) {
            return vec![ParamCheck { name: "<forward>".into(), result: GradCheck::failed(e) }];
        }
        match tape.backward(out) {
            Ok(g) => g.params(),
            Err(e) => return vec![ParamCheck { name: "<backward>".into(), result: GradCheck::failed(e.to_string()) }],
        }
    };
    let mut out = Vec::new();
    let mut scratch = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let zero = Tensor::zeros(store.get(id).shape());
        let grad = analytic.get(&id).unwrap_or(&zero);
        let mut worst = 0.0f64;
        let mut failure = None;
        for &c in &coords {
            let numeric = match perturbed(&mut scratch, id, c, eps, &eval) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            };
            worst = worst.max(rel_error(widen(grad.data()[c]), numeric));
        }
        let result = match failure {
            Some(msg) => GradCheck::failed(msg),
            None => GradCheck { max_rel_error: worst, checked: coords.len(), failure: None },
        };
        out.push(ParamCheck { name: store.name(id).to_string(), result });
    }
    out
}

fn perturbed<T: Scalar>(
    scratch: &mut ParamStore<T>,
    id: ParamId,
    c: usize,
    eps: f64,
    eval: &dyn Fn(&ParamStore<T>) -> Result<f64, String>,
) -> Result<f64, String> {
    let orig = scratch.get(id).data()[c];
    scratch.get_mut(id).data_mut()[c] = orig + cast(eps);
    let p = eval(scratch);
    scratch.get_mut(id).data_mut()[c] = orig - cast(eps);
    let m = eval(scratch);
    scratch.get_mut(id).data_mut()[c] = orig;
    Ok((p? - m?) / (2.0 * eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_f64(&[4], &[0.3, -1.2, 5.0, 2.2]).unwrap();
        let r = grad_check(|t, v| Ok(t.sum_all(v)), &x, 1e-5);
        assert!(r.passed(1e-10), "{r:?}");
    }

    #[test]
    fn non_finite_output_is_reported() {
        let x = Tensor::<f64>::from_f64(&[2], &[-1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let l = t.log(v);
                Ok(t.sum_all(l))
            },
            &x,
            1e-5,
        );
        assert!(r.failure.is_some());
        assert!(!r.passed(1.0));
    }

    #[test]
    fn non_positive_step_rejected() {
        let x = Tensor::<f64>::zeros(&[1]);
        assert!(grad_check(|t, v| Ok(t.sum_all(v)), &x, 0.0).failure.is_some());
    }
}
