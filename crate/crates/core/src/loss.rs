//! Exact Euclidean distance transform and the boundary-sensitive weighted
//! RMSE loss.
//!
//! Pixels close to a gap in the supervising DSM get larger weights. The
//! weighted squared errors are normalized by the number of valid pixels, not
//! by the weight sum.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decay {
    Linear,
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BswConfig {
    /// Distances (pixels) are clipped to `[d_min, d_max]`.
    pub d_min: f64,
    pub d_max: f64,
    pub decay: Decay,
    /// Weight far from gaps.
    pub w_floor: f64,
    /// Weight right next to a gap.
    pub w_ceil: f64,
}

impl Default for BswConfig {
    fn default() -> Self {
        Self { d_min: 1.0, d_max: 8.0, decay: Decay::Linear, w_floor: 1.0, w_ceil: 2.0 }
    }
}

impl BswConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min >= 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= d_min < d_max, got d_min={} d_max={}",
                self.d_min, self.d_max
            )));
        }
        if !(self.w_floor <= self.w_ceil && self.w_floor >= 0.0) {
            return Err(Error::Config(format!(
                "need 0 <= w_floor <= w_ceil, got {} and {}",
                self.w_floor, self.w_ceil
            )));
        }
        Ok(())
    }

    /// Analytic range of the decay function.
    fn decay_range(&self) -> (f64, f64) {
        match self.decay {
            Decay::Linear => (0.0, 1.0),
            Decay::Exponential => ((-1.0f64).exp(), 1.0),
        }
    }

    fn decay_value(&self, distance: f64) -> f64 {
        let clipped = distance.max(self.d_min).min(self.d_max);
        let t = (clipped - self.d_min) / (self.d_max - self.d_min);
        match self.decay {
            Decay::Linear => 1.0 - t,
            Decay::Exponential => (-t).exp(),
        }
    }
}

/// 1-D squared distance transform (lower envelope of parabolas). Sites with
/// `f = inf` carry no parabola; a line without sites stays infinite.
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let (qf, pf) = (q as f64, p as f64);
            let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                if v.is_empty() {
                    continue;
                }
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest `false` pixel of a
/// row-major `width x height` mask. Infinite when the mask has no zeros.
pub fn edt_squared(mask: &[bool], width: usize, height: usize) -> Result<Vec<f64>> {
    if mask.len() != width * height {
        return Err(Error::Shape(format!(
            "mask of {} cells for a {width}x{height} grid",
            mask.len()
        )));
    }
    let mut grid: Vec<f64> = mask.iter().map(|m| if *m { f64::INFINITY } else { 0.0 }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        dt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; width];
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        dt_1d(row, &mut row_out, &mut v, &mut z);
        row.copy_from_slice(&row_out);
    }
    Ok(grid)
}

/// Euclidean distance (pixels) to the nearest gap pixel.
pub fn edt(mask: &[bool], width: usize, height: usize) -> Result<Vec<f64>> {
    Ok(edt_squared(mask, width, height)?.into_iter().map(Float::sqrt).collect())
}

/// Per-pixel loss weights; zero on gap pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightField {
    pub weights: Vec<f64>,
}

pub fn compute_weights(distances: &[f64], mask: &[bool], cfg: &BswConfig) -> Result<WeightField> {
    cfg.validate()?;
    if distances.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} distances for a mask of {} cells",
            distances.len(),
            mask.len()
        )));
    }
    let (lo, hi) = cfg.decay_range();
    let weights = distances
        .iter()
        .zip(mask)
        .map(|(d, m)| {
            if !*m {
                return 0.0;
            }
            let decay = cfg.decay_value(*d);
            cfg.w_floor + (cfg.w_ceil - cfg.w_floor) * (decay - lo) / (hi - lo)
        })
        .collect();
    Ok(WeightField { weights })
}

/// EDT of `mask` followed by [`compute_weights`].
pub fn boundary_weights(mask: &[bool], width: usize, height: usize, cfg: &BswConfig) -> Result<WeightField> {
    let d = edt(mask, width, height)?;
    compute_weights(&d, mask, cfg)
}

/// `sqrt(sum_i w_i (pred_i - target_i)^2 / sum_i m_i)` on the graph.
///
/// `target` entries at masked-out pixels are never read. Weights are
/// constants of the backward pass.
pub fn weighted_rmse<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &[f64],
    mask: &[bool],
    weights: &[f64],
) -> Result<Var> {
    let n = g.value(pred).numel();
    if target.len() != n || mask.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "prediction of {n} values with {} targets, {} mask cells and {} weights",
            target.len(),
            mask.len(),
            weights.len()
        )));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let clean: Vec<T> = target
        .iter()
        .zip(mask)
        .map(|(t, m)| if *m { T::lit(*t) } else { T::zero() })
        .collect();
    let w: Vec<T> = weights
        .iter()
        .zip(mask)
        .map(|(w, m)| if *m { T::lit(*w) } else { T::zero() })
        .collect();
    let shape = g.shape(pred).to_vec();
    let tv = g.constant(Tensor::new(shape, clean)?);
    let diff = g.sub(pred, tv)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul_const(sq, w)?;
    let total = g.sum(weighted);
    let mean = g.scale(total, T::one() / T::lit(count as f64));
    Ok(g.sqrt(mean))
}

fn grid_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] | [1, h, w] => Ok((*w, *h)),
        _ => Err(Error::Shape(format!("expected a [h, w] or [1, h, w] map, got {:?}", shape))),
    }
}

/// Boundary-sensitive weighted RMSE of a `[1, h, w]` (or `[h, w]`) prediction.
pub fn bsw_rmse<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &[f64],
    mask: &[bool],
    cfg: &BswConfig,
) -> Result<Var> {
    let (w, h) = grid_dims(g.shape(pred))?;
    let field = boundary_weights(mask, w, h, cfg)?;
    weighted_rmse(g, pred, target, mask, &field.weights)
}

/// Plain RMSE over valid pixels.
pub fn masked_rmse<T: Real>(g: &mut Graph<T>, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
    let ones: Vec<f64> = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    weighted_rmse(g, pred, target, mask, &ones)
}

/// Which loss drives training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Bsw(BswConfig),
    Rmse,
}

impl LossKind {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        match self {
            LossKind::Bsw(cfg) => bsw_rmse(g, pred, target, mask, cfg),
            LossKind::Rmse => masked_rmse(g, pred, target, mask),
        }
    }
}
