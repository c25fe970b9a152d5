//! Snell refraction at a flat water surface and the apparent (refraction
//! shallowed) depth a two-camera stereo pair would triangulate.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: Vec3) -> f64 {
    Float::sqrt(dot(a, a))
}

fn unit(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Flat air/water boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaterInterface {
    pub n_air: f64,
    pub n_water: f64,
    /// Elevation of the boundary plane (m).
    pub surface_z: f64,
}

impl Default for WaterInterface {
    fn default() -> Self {
        Self { n_air: 1.0, n_water: 1.34, surface_z: 0.0 }
    }
}

impl WaterInterface {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_air > 0.0 && self.n_water >= self.n_air && self.n_water.is_finite()) {
            return Err(Error::Config(format!(
                "need n_water >= n_air > 0, got n_air={} n_water={}",
                self.n_air, self.n_water
            )));
        }
        Ok(())
    }
}

/// Pinhole camera centre; only ray directions matter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
}

impl CameraPose {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { position: [x, y, z] }
    }
}

/// Symmetric stereo pair centred over `(cx, cy)` with its baseline along x.
pub fn stereo_pair(cx: f64, cy: f64, flying_height: f64, baseline: f64) -> (CameraPose, CameraPose) {
    (
        CameraPose::new(cx - baseline / 2.0, cy, flying_height),
        CameraPose::new(cx + baseline / 2.0, cy, flying_height),
    )
}

/// Refracts a unit direction at a surface with unit `normal` (either
/// orientation) going from index `n_from` into `n_to`.
pub fn snell_refract(incident: Vec3, normal: Vec3, n_from: f64, n_to: f64) -> Result<Vec3> {
    for (what, v) in [("incident", incident), ("normal", normal)] {
        if (norm(v) - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("{what} direction {:?} is not unit length", v)));
        }
    }
    if !(n_from > 0.0 && n_to > 0.0) {
        return Err(Error::Config(format!("refractive indices must be positive ({n_from}, {n_to})")));
    }
    let mut n = normal;
    let mut cos_i = -dot(n, incident);
    if cos_i < 0.0 {
        n = scale(n, -1.0);
        cos_i = -cos_i;
    }
    let eta = n_from / n_to;
    let sin2_t = eta * eta * (1.0 - cos_i * cos_i).max(0.0);
    if sin2_t > 1.0 {
        return Err(Error::TotalInternalReflection { sin_out: Float::sqrt(sin2_t) });
    }
    let cos_t = Float::sqrt(1.0 - sin2_t);
    Ok(unit(add(scale(incident, eta), scale(n, eta * cos_i - cos_t))))
}

const CROSSING_TOL: f64 = 1e-8;

/// Where the refracted ray from a bottom point to a camera crosses the
/// surface, found by bisection on the horizontal offset from the point.
pub fn surface_crossing(point: Vec3, cam: &CameraPose, iface: &WaterInterface) -> Result<Vec3> {
    let c = cam.position;
    let depth = iface.surface_z - point[2];
    let height = c[2] - iface.surface_z;
    let horiz = [c[0] - point[0], c[1] - point[1], 0.0];
    let d = norm(horiz);
    if d == 0.0 || depth == 0.0 {
        return Ok([point[0], point[1], iface.surface_z]);
    }
    let u = scale(horiz, 1.0 / d);
    // n_water sin(water angle) - n_air sin(air angle); increasing in s
    let f = |s: f64| {
        iface.n_water * s / Float::sqrt(s * s + depth * depth)
            - iface.n_air * (d - s) / Float::sqrt((d - s) * (d - s) + height * height)
    };
    let (mut lo, mut hi) = (0.0, d);
    let mut iterations = 0;
    while hi - lo > CROSSING_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
        if iterations > 200 {
            return Err(Error::Numerical {
                what: "surface crossing bisection did not reach tolerance".into(),
                residual: f(0.5 * (lo + hi)),
            });
        }
    }
    let s = 0.5 * (lo + hi);
    Ok([point[0] + u[0] * s, point[1] + u[1] * s, iface.surface_z])
}

/// Point minimizing the summed squared distance to a set of lines.
fn least_squares_intersection(lines: &[(Vec3, Vec3)]) -> Result<Vec3> {
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for (origin, dir) in lines {
        let d = unit(*dir);
        for i in 0..3 {
            for j in 0..3 {
                let m = if i == j { 1.0 } else { 0.0 } - d[i] * d[j];
                a[i][j] += m;
                b[i] += m * origin[j];
            }
        }
    }
    solve3(a, b)
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Result<Vec3> {
    let det = det3(&a);
    let scale_ref = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if det.abs() <= 1e-14 * scale_ref.powi(3).max(1e-300) {
        return Err(Error::Numerical { what: "back-projected rays are parallel".into(), residual: det });
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][k] = b[r];
        }
        *o = det3(&m) / det;
    }
    Ok(out)
}

/// Apparent position of a submerged point: the least-squares intersection of
/// the two in-air rays through the refracted surface crossings, extended
/// straight below the surface.
pub fn apparent_point(point: Vec3, cam_a: &CameraPose, cam_b: &CameraPose, iface: &WaterInterface) -> Result<Vec3> {
    iface.validate()?;
    if point[2] > iface.surface_z {
        return Err(Error::Contract(format!(
            "point elevation {} is above the water surface {}",
            point[2], iface.surface_z
        )));
    }
    for cam in [cam_a, cam_b] {
        if cam.position[2] <= iface.surface_z {
            return Err(Error::Contract(format!("camera at {:?} is not above the surface", cam.position)));
        }
    }
    if cam_a.position == cam_b.position {
        return Err(Error::Contract("cameras must be distinct".into()));
    }
    if point[2] == iface.surface_z {
        return Ok(point);
    }
    let sa = surface_crossing(point, cam_a, iface)?;
    let sb = surface_crossing(point, cam_b, iface)?;
    let mut q = least_squares_intersection(&[
        (cam_a.position, sub(sa, cam_a.position)),
        (cam_b.position, sub(sb, cam_b.position)),
    ])?;
    // bisection error can put the n_water == n_air case a hair below the point
    q[2] = q[2].max(point[2]);
    Ok(q)
}

/// Elevation `Z0` of the apparent point for a bottom point at elevation `Z`.
pub fn apparent_depth(point: Vec3, cam_a: &CameraPose, cam_b: &CameraPose, iface: &WaterInterface) -> Result<f64> {
    Ok(apparent_point(point, cam_a, cam_b, iface)?[2])
}

/// `(Z0, Z)` pairs: apparent and true elevations, both negative below the
/// surface, with `|Z0| <= |Z|`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthPairSet {
    pub pairs: Vec<(f64, f64)>,
}

impl DepthPairSet {
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self> {
        if let Some((z0, z)) = pairs.iter().find(|(z0, z)| !(z0.abs() <= z.abs() + 1e-12)) {
            return Err(Error::Contract(format!("apparent depth {z0} is deeper than true depth {z}")));
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn apparent(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn truth(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// Ordinary least-squares `(slope, intercept, r2)` of `Z` on `Z0`.
    pub fn least_squares(&self) -> Result<(f64, f64, f64)> {
        least_squares_line(&self.apparent(), &self.truth())
    }
}

/// `y = slope * x + intercept` by ordinary least squares, with R².
pub fn least_squares_line(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 || x.len() != y.len() {
        return Err(Error::Rank(format!("need >= 2 paired samples, got {} and {}", x.len(), y.len())));
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx <= 1e-12 * n {
        return Err(Error::Rank("regressor has no spread".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok((slope, intercept, r2))
}

/// Sampling plan for synthetic refraction training pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairConfig {
    /// Ground points per side of the sampling grid.
    pub grid: usize,
    /// Side length (m) of the square footprint centred under the cameras.
    pub extent: f64,
    /// `(deepest, shallowest)` true elevations, both negative.
    pub depth_range: (f64, f64),
    /// Gaussian noise (m) added to the apparent elevation.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { grid: 20, extent: 32.0, depth_range: (-15.0, -0.5), noise_sigma: 0.0, seed: 7 }
    }
}

/// Draws a uniform true depth at each footprint grid point and computes its
/// apparent depth for the given stereo pair.
pub fn generate_depth_pairs(
    cfg: &PairConfig,
    cameras: (CameraPose, CameraPose),
    iface: &WaterInterface,
) -> Result<DepthPairSet> {
    let (deep, shallow) = cfg.depth_range;
    if !(deep <= shallow && shallow < iface.surface_z) || cfg.grid == 0 || !(cfg.noise_sigma >= 0.0) {
        return Err(Error::Config(format!(
            "invalid pair sampling: depth range ({deep}, {shallow}), grid {}, noise {}",
            cfg.grid, cfg.noise_sigma
        )));
    }
    let mut r = rng::stream(cfg.seed, 0x5041_4952);
    let (ca, cb) = cameras;
    let cx = 0.5 * (ca.position[0] + cb.position[0]);
    let cy = 0.5 * (ca.position[1] + cb.position[1]);
    let step = if cfg.grid > 1 { cfg.extent / (cfg.grid - 1) as f64 } else { 0.0 };
    let mut pairs = Vec::with_capacity(cfg.grid * cfg.grid);
    for j in 0..cfg.grid {
        for i in 0..cfg.grid {
            let x = cx - cfg.extent / 2.0 + i as f64 * step;
            let y = cy - cfg.extent / 2.0 + j as f64 * step;
            let z = if deep == shallow { deep } else { r.random_range(deep..=shallow) };
            let mut z0 = apparent_depth([x, y, z], &ca, &cb, iface)?;
            if cfg.noise_sigma > 0.0 {
                z0 += cfg.noise_sigma * rng::normal(&mut r);
                // noise must not push the apparent point below the true one
                z0 = z0.max(z).min(iface.surface_z);
            }
            pairs.push((z0, z));
        }
    }
    DepthPairSet::new(pairs)
}
