//! Linear epsilon-insensitive support vector regression of true depth on
//! apparent depth.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::raster::DepthRaster;
use crate::refraction::DepthPairSet;
use crate::rng;

/// `f(z0) = w * z0 + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSvrModel {
    pub w: f64,
    pub b: f64,
}

impl LinearSvrModel {
    pub fn predict_one(&self, z0: f64) -> f64 {
        self.w * z0 + self.b
    }

    pub fn predict(&self, z0: &[f64]) -> Vec<f64> {
        z0.iter().map(|v| self.predict_one(*v)).collect()
    }

    /// Corrects every valid cell; gaps stay gaps. Corrected depths are
    /// clamped to the surface.
    pub fn correct_raster(&self, dsm: &DepthRaster) -> DepthRaster {
        dsm.map_valid(|v| self.predict_one(v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvrTrainConfig {
    pub c: f64,
    /// Tube half-width (m).
    pub epsilon: f64,
    pub max_iter: usize,
    /// Largest accepted stationarity residual of the recovered duals,
    /// relative to `1 + C n`.
    pub tol: f64,
    pub c_grid: Vec<f64>,
    pub folds: usize,
    /// Validation RMSEs within this relative margin of the best count as ties.
    pub tie_tolerance: f64,
    pub seed: u64,
}

impl Default for SvrTrainConfig {
    fn default() -> Self {
        Self {
            c: 0.1,
            epsilon: 0.01,
            max_iter: 1_000,
            tol: 1e-6,
            c_grid: vec![0.001, 0.01, 0.1, 1.0, 10.0],
            folds: 5,
            tie_tolerance: 0.01,
            seed: 0,
        }
    }
}

impl SvrTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.epsilon >= 0.0 && self.tol > 0.0) {
            return Err(Error::Config(format!(
                "need C > 0, epsilon >= 0, tol > 0 (C={}, epsilon={}, tol={})",
                self.c, self.epsilon, self.tol
            )));
        }
        Ok(())
    }
}

/// Dual coefficients at exit. `alpha[n]` pairs with the upper tube edge,
/// `alpha_star[n]` with the lower.
#[derive(Clone, Debug, PartialEq)]
pub struct SvrTrainState {
    pub alpha: Vec<f64>,
    pub alpha_star: Vec<f64>,
    pub c: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub kkt_gap: f64,
}

pub fn train_svr(pairs: &DepthPairSet, cfg: &SvrTrainConfig) -> Result<LinearSvrModel> {
    Ok(train_svr_with_state(pairs, cfg)?.0)
}

/// The linear model has two primal unknowns, so the problem is solved
/// there: golden-section search over `w` with the intercept profiled out
/// exactly, then the dual coefficients are recovered from the KKT
/// conditions. `kkt_gap` is the stationarity residual of those duals.
pub fn train_svr_with_state(pairs: &DepthPairSet, cfg: &SvrTrainConfig) -> Result<(LinearSvrModel, SvrTrainState)> {
    cfg.validate()?;
    let x = pairs.apparent();
    let z = pairs.truth();
    fit(&x, &z, cfg)
}

/// `min_b sum h(r_n - b)` for the tube loss `h`, returning the optimal
/// intercept interval and the loss there.
fn profile_intercept(r: &[f64], eps: f64) -> (f64, f64, f64) {
    // d/db = #{r + eps < b} - #{r - eps > b}, non-decreasing in b
    let mut lower: Vec<f64> = r.iter().map(|v| v - eps).collect();
    let mut upper: Vec<f64> = r.iter().map(|v| v + eps).collect();
    lower.sort_by(f64::total_cmp);
    upper.sort_by(f64::total_cmp);
    let mut knots: Vec<f64> = lower.iter().chain(&upper).cloned().collect();
    knots.sort_by(f64::total_cmp);
    let slope_after = |b: f64| {
        let below = upper.partition_point(|u| *u <= b) as isize;
        let above = (lower.len() - lower.partition_point(|l| *l <= b)) as isize;
        below - above
    };
    let mut range = (knots[knots.len() - 1], knots[knots.len() - 1]);
    for k in 0..knots.len() {
        let s = slope_after(knots[k]);
        if s >= 0 {
            let end = if s == 0 && k + 1 < knots.len() { knots[k + 1] } else { knots[k] };
            range = (knots[k], end);
            break;
        }
    }
    let loss = r.iter().map(|v| ((v - range.0).abs() - eps).max(0.0)).sum::<f64>();
    (range.0, range.1, loss)
}

fn fit(x: &[f64], z: &[f64], cfg: &SvrTrainConfig) -> Result<(LinearSvrModel, SvrTrainState)> {
    let n = x.len();
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if n < 2 || !(hi > lo) {
        return Err(Error::Rank(format!("need at least two distinct apparent depths among {n} samples")));
    }
    if x.iter().chain(z).any(|v| !v.is_finite()) {
        return Err(Error::Contract("training pairs must be finite".into()));
    }
    let (c, eps) = (cfg.c, cfg.epsilon);
    let objective = |w: f64| {
        let r: Vec<f64> = x.iter().zip(z).map(|(a, b)| b - w * a).collect();
        0.5 * w * w + c * profile_intercept(&r, eps).2
    };

    // any minimizer has w^2 / 2 <= F(0)
    let reach = Float::sqrt(2.0 * objective(0.0)) + 1.0;
    let (mut a, mut b) = (-reach, reach);
    let g = (Float::sqrt(5.0) - 1.0) / 2.0;
    let (mut m1, mut m2) = (b - g * (b - a), a + g * (b - a));
    let (mut f1, mut f2) = (objective(m1), objective(m2));
    let mut iterations = 0;
    while b - a > 1e-14 * (1.0 + a.abs().max(b.abs())) {
        if iterations >= cfg.max_iter {
            return Err(Error::NonConvergence { iterations, kkt_gap: b - a });
        }
        iterations += 1;
        if f1 <= f2 {
            b = m2;
            m2 = m1;
            f2 = f1;
            m1 = b - g * (b - a);
            f1 = objective(m1);
        } else {
            a = m1;
            m1 = m2;
            f1 = f2;
            m2 = a + g * (b - a);
            f2 = objective(m2);
        }
    }
    let w = 0.5 * (a + b);
    let r: Vec<f64> = x.iter().zip(z).map(|(a, b)| b - w * a).collect();
    let (b_lo, b_hi, _) = profile_intercept(&r, eps);
    let intercept = 0.5 * (b_lo + b_hi);

    let (beta, gap) = recover_duals(x, z, w, intercept, cfg);
    if gap > cfg.tol * (1.0 + c * n as f64) {
        return Err(Error::NonConvergence { iterations, kkt_gap: gap });
    }
    let model = LinearSvrModel { w, b: intercept };
    if !(model.w.is_finite() && model.b.is_finite()) {
        return Err(Error::Numerical { what: "SVR produced a non-finite model".into(), residual: gap });
    }
    let state = SvrTrainState {
        alpha: beta.iter().map(|b| b.max(0.0)).collect(),
        alpha_star: beta.iter().map(|b| (-b).max(0.0)).collect(),
        c,
        epsilon: eps,
        iterations,
        kkt_gap: gap,
    };
    Ok((model, state))
}

/// `beta_n = a_n - a*_n` consistent with the primal solution: `+-C` outside
/// the tube, 0 inside, and edge samples solved so that `sum beta = 0` and
/// `sum beta x = w`. Returns the coefficients and the stationarity residual.
fn recover_duals(x: &[f64], z: &[f64], w: f64, b: f64, cfg: &SvrTrainConfig) -> (Vec<f64>, f64) {
    let (c, eps) = (cfg.c, cfg.epsilon);
    let scale = 1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let edge_tol = 1e-9 * scale;
    let mut beta = vec![0.0; x.len()];
    // free samples with their allowed interval
    let mut edge: Vec<(usize, f64, f64)> = Vec::new();
    for k in 0..x.len() {
        let r = z[k] - w * x[k] - b;
        if r > eps + edge_tol {
            beta[k] = c;
        } else if r < -eps - edge_tol {
            beta[k] = -c;
        } else if r >= eps - edge_tol && r > 0.0 || eps == 0.0 && r >= 0.0 {
            edge.push((k, if eps == 0.0 { -c } else { 0.0 }, c));
        } else if r <= -eps + edge_tol {
            edge.push((k, -c, 0.0));
        }
    }
    let residual = |beta: &[f64]| {
        let s0: f64 = beta.iter().sum();
        let s1: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>() - w;
        (s0, s1)
    };
    // cyclic coordinate descent on the two stationarity equations over the box
    for _ in 0..20_000 {
        let (s0, s1) = residual(&beta);
        if s0.abs().max(s1.abs()) < 1e-13 * scale {
            break;
        }
        for &(k, lo, hi) in &edge {
            let (s0, s1) = residual(&beta);
            let q = 1.0 + x[k] * x[k];
            let next = (beta[k] - (s0 + s1 * x[k]) / q).clamp(lo, hi);
            beta[k] = next;
        }
    }
    let (s0, s1) = residual(&beta);
    (beta, s0.abs().max(s1.abs()))
}

fn rmse(model: &LinearSvrModel, x: &[f64], z: &[f64]) -> f64 {
    let s: f64 = x.iter().zip(z).map(|(a, b)| (model.predict_one(*a) - b).powi(2)).sum();
    Float::sqrt(s / x.len() as f64)
}

/// Per-candidate mean validation RMSE and the selected C.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSearch {
    pub scores: Vec<(f64, f64)>,
    pub best_c: f64,
}

/// k-fold search over `cfg.c_grid`; near-ties go to the smaller C.
pub fn grid_search_c(pairs: &DepthPairSet, cfg: &SvrTrainConfig) -> Result<GridSearch> {
    if cfg.c_grid.is_empty() {
        return Err(Error::Config("C grid is empty".into()));
    }
    if cfg.folds < 2 || cfg.folds > pairs.len() {
        return Err(Error::Config(format!("need 2 <= folds <= {} samples, got {}", pairs.len(), cfg.folds)));
    }
    let x = pairs.apparent();
    let z = pairs.truth();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, 0x4356));
    let mut scores = Vec::with_capacity(cfg.c_grid.len());
    for &c in &cfg.c_grid {
        let fold_cfg = SvrTrainConfig { c, ..cfg.clone() };
        let mut total = 0.0;
        for f in 0..cfg.folds {
            let (mut tx, mut tz, mut vx, mut vz) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (rank, &k) in order.iter().enumerate() {
                if rank % cfg.folds == f {
                    vx.push(x[k]);
                    vz.push(z[k]);
                } else {
                    tx.push(x[k]);
                    tz.push(z[k]);
                }
            }
            fold_cfg.validate()?;
            let (model, _) = fit(&tx, &tz, &fold_cfg)?;
            total += rmse(&model, &vx, &vz);
        }
        scores.push((c, total / cfg.folds as f64));
    }
    let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let best_c = scores
        .iter()
        .filter(|s| s.1 <= best * (1.0 + cfg.tie_tolerance))
        .map(|s| s.0)
        .fold(f64::INFINITY, f64::min);
    Ok(GridSearch { scores, best_c })
}
