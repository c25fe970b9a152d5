//! Synthetic through-water scenes: a smooth seabed, substrate albedo, a
//! radiative-transfer style orthoimage, and the gappy, refraction-shallowed
//! DSM a photogrammetric survey of it would produce.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{DepthRaster, RgbRaster};
use crate::refraction::{apparent_depth, stereo_pair, CameraPose, PairConfig, WaterInterface};
use crate::rng;

const STREAM_SEABED: u64 = 1;
const STREAM_SUBSTRATE: u64 = 2;
const STREAM_TEXTURE: u64 = 3;
const STREAM_GLINT: u64 = 4;
const STREAM_NOISE: u64 = 5;

/// Substrate classes, ordered from smoothest to most textured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Substrate {
    Sand,
    Seagrass,
    Rock,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubstrateAlbedo {
    /// Mean bottom radiance per band.
    pub rgb: [f64; 3],
    /// Relative per-pixel albedo jitter.
    pub texture: f64,
}

/// Water column optics per RGB band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaterColumn {
    /// Diffuse attenuation (1/m).
    pub k: [f64; 3],
    /// Deep-water column radiance.
    pub c: [f64; 3],
    /// Constant path radiance.
    pub path: [f64; 3],
}

impl Default for WaterColumn {
    fn default() -> Self {
        Self { k: [0.30, 0.08, 0.05], c: [10.0, 40.0, 55.0], path: [6.0, 10.0, 14.0] }
    }
}

impl WaterColumn {
    pub fn validate(&self) -> Result<()> {
        if self.k.iter().any(|k| !(*k >= 0.0)) {
            return Err(Error::Config(format!("attenuation must be non-negative, got {:?}", self.k)));
        }
        Ok(())
    }
}

/// Gap carving rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapConfig {
    /// Side of the square texture window (pixels, odd).
    pub window: usize,
    /// Luminance variance below which a pixel is a gap.
    pub texture_threshold: f64,
    /// Pixels with |depth| beyond this (m) are gaps.
    pub depth_cutoff: f64,
    /// Depth noise (m) added to surviving pixels.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self { window: 5, texture_threshold: 0.0, depth_cutoff: f64::INFINITY, noise_sigma: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub gsd: f64,
    /// `(deepest, shallowest)` elevation, both negative.
    pub depth_range: (f64, f64),
    pub bump_count: usize,
    /// Bump radius as a fraction of the scene side.
    pub smoothness: f64,
    /// Depth drop across the scene from the tilted plane, relative to the bumps.
    pub tilt: f64,
    pub sand: SubstrateAlbedo,
    pub seagrass: SubstrateAlbedo,
    pub rock: SubstrateAlbedo,
    /// Blobs in the substrate class field.
    pub substrate_blobs: usize,
    pub water: WaterColumn,
    pub glint_fraction: f64,
    pub interface: WaterInterface,
    pub flying_height: f64,
    pub baseline: f64,
    pub gap_window: usize,
    /// Fraction of pixels the texture threshold is tuned to remove.
    pub target_gap_fraction: f64,
    pub depth_cutoff: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            gsd: 0.25,
            depth_range: (-12.0, -1.0),
            bump_count: 10,
            smoothness: 0.25,
            tilt: 1.0,
            sand: SubstrateAlbedo { rgb: [190.0, 185.0, 160.0], texture: 0.04 },
            seagrass: SubstrateAlbedo { rgb: [70.0, 110.0, 80.0], texture: 0.25 },
            rock: SubstrateAlbedo { rgb: [120.0, 115.0, 100.0], texture: 0.35 },
            substrate_blobs: 8,
            water: WaterColumn::default(),
            glint_fraction: 0.004,
            interface: WaterInterface::default(),
            flying_height: 150.0,
            baseline: 60.0,
            gap_window: 5,
            target_gap_fraction: 0.4,
            depth_cutoff: f64::INFINITY,
            noise_sigma: 0.3,
            seed: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (deep, shallow) = self.depth_range;
        if !(deep <= shallow && shallow < 0.0) {
            return Err(Error::Config(format!(
                "depth range must be fully submerged with min <= max < 0, got ({deep}, {shallow})"
            )));
        }
        if self.width == 0 || self.height == 0 || !(self.gsd > 0.0) {
            return Err(Error::Config(format!("bad scene grid {}x{} @ {}", self.width, self.height, self.gsd)));
        }
        if !(0.0..1.0).contains(&self.target_gap_fraction) || !(0.0..=1.0).contains(&self.glint_fraction) {
            return Err(Error::Config("gap and glint fractions must lie in [0, 1)".into()));
        }
        if self.gap_window % 2 == 0 || !(self.smoothness > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("gap window must be odd; smoothness > 0; noise >= 0".into()));
        }
        self.interface.validate()?;
        self.water.validate()
    }

    pub fn cameras(&self) -> (CameraPose, CameraPose) {
        let cx = self.width as f64 * self.gsd / 2.0;
        let cy = self.height as f64 * self.gsd / 2.0;
        stereo_pair(cx, cy, self.interface.surface_z + self.flying_height, self.baseline)
    }

    /// Pair sampling over this scene's footprint and depth range.
    pub fn pair_config(&self, grid: usize) -> PairConfig {
        PairConfig {
            grid,
            extent: (self.width.max(self.height)) as f64 * self.gsd,
            depth_range: self.depth_range,
            noise_sigma: 0.0,
            seed: self.seed,
        }
    }

    fn albedo(&self, s: Substrate) -> SubstrateAlbedo {
        match s {
            Substrate::Sand => self.sand,
            Substrate::Seagrass => self.seagrass,
            Substrate::Rock => self.rock,
        }
    }
}

/// Coregistered products for one scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: RgbRaster,
    /// Apparent depths with gaps and noise, as a survey would deliver.
    pub sfm: DepthRaster,
    /// Complete true depths.
    pub truth: DepthRaster,
    /// Noise-free apparent depths without gaps.
    pub apparent: DepthRaster,
    pub substrate: Vec<Substrate>,
    pub gap_fraction: f64,
    pub texture_threshold: f64,
}

/// Sum of Gaussian bumps with random centres, radii and signed amplitudes.
fn bump_field<R: Rng + ?Sized>(w: usize, h: usize, count: usize, radius: f64, r: &mut R) -> Vec<f64> {
    let side = w.max(h) as f64;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let cx = r.random_range(0.0..w as f64);
            let cy = r.random_range(0.0..h as f64);
            let rad = radius * side * r.random_range(0.5..1.5);
            let amp = r.random_range(-1.0..1.0);
            (cx, cy, rad, amp)
        })
        .collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            out[y * w + x] = bumps
                .iter()
                .map(|(cx, cy, rad, amp)| {
                    let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
                    amp * Float::exp(-d2 / (2.0 * rad * rad))
                })
                .sum();
        }
    }
    out
}

/// Complete true-depth raster: radial bumps over a tilted plane, rescaled to
/// the configured depth range.
pub fn generate_seabed(cfg: &SceneConfig) -> Result<DepthRaster> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut r = rng::stream(cfg.seed, STREAM_SEABED);
    let angle = r.random_range(0.0..core::f64::consts::TAU);
    let (dx, dy) = (Float::cos(angle), Float::sin(angle));
    let mut field = bump_field(w, h, cfg.bump_count, cfg.smoothness, &mut r);
    let side = w.max(h) as f64;
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 + 0.5) * dx + (y as f64 + 0.5) * dy) / side;
            field[y * w + x] -= cfg.tilt * t;
        }
    }
    let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let (deep, shallow) = cfg.depth_range;
    let values = field
        .iter()
        .map(|v| if hi > lo { deep + (shallow - deep) * (v - lo) / (hi - lo) } else { shallow })
        .collect();
    DepthRaster::complete(w, h, cfg.gsd, values)
}

/// Substrate class map from a thresholded smooth random field.
pub fn generate_substrate(cfg: &SceneConfig) -> Vec<Substrate> {
    let mut r = rng::stream(cfg.seed, STREAM_SUBSTRATE);
    let field = bump_field(cfg.width, cfg.height, cfg.substrate_blobs, cfg.smoothness * 0.8, &mut r);
    field
        .iter()
        .map(|v| {
            if *v > 0.25 {
                Substrate::Rock
            } else if *v < -0.25 {
                Substrate::Seagrass
            } else {
                Substrate::Sand
            }
        })
        .collect()
}

/// Per-pixel bottom albedo with class-dependent texture.
pub fn generate_albedo(cfg: &SceneConfig, substrate: &[Substrate]) -> Result<RgbRaster> {
    if substrate.len() != cfg.width * cfg.height {
        return Err(Error::Shape(format!(
            "substrate map has {} cells for a {}x{} scene",
            substrate.len(),
            cfg.width,
            cfg.height
        )));
    }
    let mut r = rng::stream(cfg.seed, STREAM_TEXTURE);
    RgbRaster::from_fn(cfg.width, cfg.height, cfg.gsd, |x, y| {
        let a = cfg.albedo(substrate[y * cfg.width + x]);
        let jitter = 1.0 + a.texture * r.random_range(-1.0..1.0);
        let mut px = [0u8; 3];
        for (b, out) in px.iter_mut().enumerate() {
            *out = quantize(a.rgb[b] * jitter);
        }
        px
    })
}

fn quantize(v: f64) -> u8 {
    Float::round(v).clamp(0.0, 255.0) as u8
}

/// Observed radiance per band: `L_p + c (1 - e) + albedo e` with
/// `e = exp(-2 k |depth|)`, plus saturated glint on a random pixel subset.
pub fn render_orthoimage(
    truth: &DepthRaster,
    albedo: &RgbRaster,
    water: &WaterColumn,
    glint_fraction: f64,
    seed: u64,
) -> Result<RgbRaster> {
    water.validate()?;
    truth.check_coregistered_rgb(albedo)?;
    if !(0.0..=1.0).contains(&glint_fraction) {
        return Err(Error::Config(format!("glint fraction {glint_fraction} outside [0, 1]")));
    }
    let mut r = rng::stream(seed, STREAM_GLINT);
    let w = truth.width();
    let mut out = RgbRaster::from_fn(w, truth.height(), truth.gsd(), |x, y| {
        let depth = truth.get(x, y).map(f64::abs).unwrap_or(0.0);
        let bottom = albedo.pixel(x, y);
        let mut px = [0u8; 3];
        for b in 0..3 {
            let e = if water.k[b].is_infinite() {
                if depth == 0.0 { 1.0 } else { 0.0 }
            } else {
                Float::exp(-2.0 * water.k[b] * depth)
            };
            px[b] = quantize(water.path[b] + water.c[b] * (1.0 - e) + bottom[b] as f64 * e);
        }
        px
    })?;
    for y in 0..truth.height() {
        for x in 0..w {
            if r.random::<f64>() < glint_fraction {
                out.set_pixel(x, y, [255, 255, 255]);
            }
        }
    }
    Ok(out)
}

/// Luminance variance in a `window`-sized square (clipped at the borders).
pub fn texture_variance(image: &RgbRaster, window: usize) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let lum: Vec<f64> = (0..w * h).map(|i| image.luminance(i)).collect();
    let half = (window / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
            for yy in (y - half).max(0)..=(y + half).min(h as isize - 1) {
                for xx in (x - half).max(0)..=(x + half).min(w as isize - 1) {
                    let v = lum[yy as usize * w + xx as usize];
                    s += v;
                    s2 += v * v;
                    n += 1.0;
                }
            }
            let mean = s / n;
            out[y as usize * w + x as usize] = (s2 / n - mean * mean).max(0.0);
        }
    }
    out
}

fn gap_mask(dsm: &DepthRaster, variance: &[f64], threshold: f64, cutoff: f64) -> Vec<bool> {
    (0..dsm.len())
        .map(|i| match dsm.value(i) {
            None => true,
            Some(d) => variance[i] < threshold || d.abs() > cutoff,
        })
        .collect()
}

/// Removes texture-poor and over-deep pixels, then perturbs the survivors.
/// Returns the gappy raster and its gap fraction.
pub fn carve_gaps(apparent: &DepthRaster, image: &RgbRaster, cfg: &GapConfig) -> Result<(DepthRaster, f64)> {
    apparent.check_coregistered_rgb(image)?;
    if cfg.window == 0 || !(cfg.noise_sigma >= 0.0) {
        return Err(Error::Config("gap window must be positive and noise non-negative".into()));
    }
    let variance = texture_variance(image, cfg.window);
    let gaps = gap_mask(apparent, &variance, cfg.texture_threshold, cfg.depth_cutoff);
    let mut r = rng::stream(cfg.seed, STREAM_NOISE);
    let mut out = apparent.clone();
    for (i, gap) in gaps.iter().enumerate() {
        // one draw per pixel keeps the noise field independent of the gap pattern
        let noise = rng::normal(&mut r) * cfg.noise_sigma;
        if *gap {
            out.set_gap(i);
        } else if let Some(d) = apparent.value(i) {
            out.set(i, (d + noise).min(0.0))?;
        }
    }
    let fraction = out.gap_fraction();
    Ok((out, fraction))
}

/// Texture threshold whose gap fraction is closest to `target`, by bisection.
pub fn tune_texture_threshold(apparent: &DepthRaster, image: &RgbRaster, cfg: &GapConfig, target: f64) -> f64 {
    let variance = texture_variance(image, cfg.window);
    let fraction = |t: f64| {
        let g = gap_mask(apparent, &variance, t, cfg.depth_cutoff);
        g.iter().filter(|v| **v).count() as f64 / g.len() as f64
    };
    if fraction(0.0) >= target {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = variance.iter().fold(0.0f64, |m, v| m.max(*v)) + 1.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if fraction(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (fraction(lo) - target).abs() <= (fraction(hi) - target).abs() {
        lo
    } else {
        hi
    }
}

/// Apparent depth of every pixel centre for the scene's stereo pair.
pub fn apparent_dsm(truth: &DepthRaster, cameras: (CameraPose, CameraPose), iface: &WaterInterface) -> Result<DepthRaster> {
    let gsd = truth.gsd();
    let mut err = None;
    let out = DepthRaster::from_fn(truth.width(), truth.height(), gsd, |x, y| {
        let z = truth.get(x, y)?;
        match apparent_depth([(x as f64 + 0.5) * gsd, (y as f64 + 0.5) * gsd, z], &cameras.0, &cameras.1, iface) {
            Ok(v) => Some(v),
            Err(e) => {
                err.get_or_insert(e);
                None
            }
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Builds the full scene: truth, image, apparent DSM and the gappy survey DSM.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let truth = generate_seabed(cfg)?;
    let substrate = generate_substrate(cfg);
    let albedo = generate_albedo(cfg, &substrate)?;
    let image = render_orthoimage(&truth, &albedo, &cfg.water, cfg.glint_fraction, cfg.seed)?;
    let apparent = apparent_dsm(&truth, cfg.cameras(), &cfg.interface)?;
    let mut gap_cfg = GapConfig {
        window: cfg.gap_window,
        texture_threshold: 0.0,
        depth_cutoff: cfg.depth_cutoff,
        noise_sigma: cfg.noise_sigma,
        seed: cfg.seed,
    };
    gap_cfg.texture_threshold = tune_texture_threshold(&apparent, &image, &gap_cfg, cfg.target_gap_fraction);
    let (sfm, gap_fraction) = carve_gaps(&apparent, &image, &gap_cfg)?;
    Ok(Scene { image, sfm, truth, apparent, substrate, gap_fraction, texture_threshold: gap_cfg.texture_threshold })
}
