use alloc::format;
use alloc::vec::Vec;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / (|analytic| + eps)` over all parameters.
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub evaluated: usize,
    /// Entries skipped because even the smallest step crossed a ReLU or
    /// max-pool switch, where central differences are meaningless.
    pub kinked: usize,
}

/// A scalar function of graph parameters that can be evaluated at any precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

/// Smallest step tried, relative to the requested one, before an entry is
/// declared to sit on a kink.
const MIN_STEP_RATIO: f64 = 1e-2;

fn eval_at<T: Real>(f: &impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>, params: &[Tensor<T>]) -> Result<(T, Vec<u64>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numerical { what: "function value is not finite".into(), residual: v.as_f64() });
    }
    Ok((v, g.branch_signature()))
}

fn analytic<T: Real>(
    f: &impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    params: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numerical { what: "function value is not finite".into(), residual: v.as_f64() });
    }
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect())
}

fn compare(
    grads: &[Tensor<f64>],
    params: &[Tensor<f64>],
    eps: f64,
    entries: Option<&[Vec<usize>]>,
    mut eval: impl FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<u64>)>,
) -> Result<GradCheck> {
    let mut best = GradCheck {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        evaluated: 0,
        kinked: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in grads.iter().enumerate() {
        let all: Vec<usize>;
        let picked = match entries {
            Some(e) => &e[pi],
            None => {
                all = (0..grad.numel()).collect();
                &all
            }
        };
        for &j in picked {
            let orig = work[pi].data()[j];
            // shrink the step until both probes sit on the same linear piece
            let mut h = eps;
            let numeric = loop {
                work[pi].data_mut()[j] = orig + h;
                let (up, up_sig) = eval(&work)?;
                work[pi].data_mut()[j] = orig - h;
                let (down, down_sig) = eval(&work)?;
                work[pi].data_mut()[j] = orig;
                if up_sig == down_sig {
                    break Some((up - down) / (2.0 * h));
                }
                if h <= eps * MIN_STEP_RATIO {
                    break None;
                }
                h /= 10.0;
            };
            let Some(numeric) = numeric else {
                best.kinked += 1;
                continue;
            };
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / (a.abs() + eps);
            best.evaluated += 1;
            if rel > best.max_rel_err || best.evaluated == 1 {
                best.max_rel_err = rel;
                best.worst_param = pi;
                best.worst_index = j;
                best.analytic = a;
                best.numeric = numeric;
            }
        }
    }
    Ok(best)
}

/// Central-difference check of a closure at one precision.
///
/// Returns the largest `|analytic - numeric| / (|analytic| + eps)` over every
/// parameter entry. Errors when `f` produces a non-finite value.
pub fn finite_difference_check<T: Real>(
    f: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    params: &[Tensor<T>],
    eps: f64,
) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite difference step must be positive, got {eps}")));
    }
    let grads: Vec<Tensor<f64>> = analytic(&f, params)?.iter().map(|t| t.cast()).collect();
    let p64: Vec<Tensor<f64>> = params.iter().map(|t| t.cast()).collect();
    compare(&grads, &p64, eps, None, |ps| {
        let cast: Vec<Tensor<T>> = ps.iter().map(|t| t.cast()).collect();
        eval_at(&f, &cast).map(|(v, sig)| (v.as_f64(), sig))
    })
}

/// Checks gradients computed at precision `T` against central differences
/// evaluated in 64-bit on the same function.
pub fn check_at_precision<T: Real>(f: &impl ScalarFn, params: &[Tensor<f64>], eps: f64) -> Result<GradCheck> {
    check_entries::<T>(f, params, eps, None)
}

/// Like [`check_at_precision`] but probes at most `per_tensor` seeded
/// random entries of each parameter tensor.
pub fn check_sampled<T: Real>(
    f: &impl ScalarFn,
    params: &[Tensor<f64>],
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheck> {
    use rand::seq::index::sample;
    let mut r = crate::rng::stream(seed, 0x4752_4144);
    let entries: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            if p.numel() <= per_tensor {
                (0..p.numel()).collect()
            } else {
                let mut v = sample(&mut r, p.numel(), per_tensor).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect();
    check_entries::<T>(f, params, eps, Some(&entries))
}

fn check_entries<T: Real>(
    f: &impl ScalarFn,
    params: &[Tensor<f64>],
    eps: f64,
    entries: Option<&[Vec<usize>]>,
) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite difference step must be positive, got {eps}")));
    }
    let low: Vec<Tensor<T>> = params.iter().map(|t| t.cast()).collect();
    let grads: Vec<Tensor<f64>> = analytic(&|g: &mut Graph<T>, v: &[Var]| f.eval(g, v), &low)?
        .iter()
        .map(|t| t.cast())
        .collect();
    compare(&grads, params, eps, entries, |ps| eval_at(&|g: &mut Graph<f64>, v: &[Var]| f.eval(g, v), ps))
}
