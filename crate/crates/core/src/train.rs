//! Preprocessing, Adam with cosine annealing, the training loop on gappy
//! depth supervision, and tiled inference.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::loss::{masked_rmse, BswConfig, LossKind};
use crate::network::{forward, ModelParams, NetworkConfig};
use crate::raster::{reflect, DepthRaster, NormalizationSpec, PatchPair, RgbRaster};
use crate::rng::{self, SeededRng};
use crate::tensor::{Graph, Real, Tensor};

const SHUFFLE: u64 = 0x5348;
const AUGMENT: u64 = 0x4155;
const DROPOUT: u64 = 0x4452;

/// Replaces every pixel brighter than `threshold` (luminance) by the mean of
/// its unflagged 8-neighbours. Pixels with no unflagged neighbour take the
/// mean of all unflagged pixels.
pub fn remove_glint(image: &RgbRaster, threshold: u8) -> RgbRaster {
    let (w, h) = (image.width(), image.height());
    let flagged: Vec<bool> = (0..w * h).map(|i| image.luminance(i) > threshold as f64).collect();
    if !flagged.iter().any(|f| *f) {
        return image.clone();
    }
    let mut fallback = [0.0; 3];
    let mut n = 0usize;
    for i in (0..w * h).filter(|i| !flagged[*i]) {
        let p = image.pixel(i % w, i / w);
        for c in 0..3 {
            fallback[c] += p[c] as f64;
        }
        n += 1;
    }
    if n == 0 {
        // nothing clean to borrow from; fall back to the mean of everything
        for i in 0..w * h {
            let p = image.pixel(i % w, i / w);
            for c in 0..3 {
                fallback[c] += p[c] as f64;
            }
        }
        n = w * h;
    }
    let fallback = fallback.map(|s| s / n as f64);
    let mut out = image.clone();
    for i in (0..w * h).filter(|i| flagged[*i]) {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        let mut sum = [0.0; 3];
        let mut k = 0usize;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (nx, ny) = (x + dx, y + dy);
                if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !flagged[j] {
                    let p = image.pixel(nx as usize, ny as usize);
                    for c in 0..3 {
                        sum[c] += p[c] as f64;
                    }
                    k += 1;
                }
            }
        }
        let mean = if k == 0 { fallback } else { sum.map(|s| s / k as f64) };
        out.set_pixel(x as usize, y as usize, mean.map(|v| Float::round(v) as u8));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub vflip: bool,
    /// Quarter turns only, so masks stay exact.
    pub rot90: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self { hflip: true, vflip: true, rot90: true }
    }
}

impl AugmentFlags {
    pub const NONE: Self = Self { hflip: false, vflip: false, rot90: false };
}

/// One rigid transform of a patch: optional flips, then `quarter_turns`
/// rotations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub fn draw<R: Rng + ?Sized>(flags: &AugmentFlags, rng: &mut R) -> Self {
        Self {
            hflip: flags.hflip && rng.random_bool(0.5),
            vflip: flags.vflip && rng.random_bool(0.5),
            quarter_turns: if flags.rot90 { rng.random_range(0..4u8) } else { 0 },
        }
    }

    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        let (mut x, mut y) = (x, y);
        if self.hflip {
            x = w - 1 - x;
        }
        if self.vflip {
            y = h - 1 - y;
        }
        for _ in 0..self.quarter_turns {
            (x, y) = (y, w - 1 - x);
        }
        (x, y)
    }

    pub fn apply(&self, image: &RgbRaster, dsm: &DepthRaster) -> Result<(RgbRaster, DepthRaster)> {
        dsm.check_coregistered_rgb(image)?;
        let (w, h) = (image.width(), image.height());
        if self.quarter_turns % 4 != 0 && w != h {
            return Err(Error::Config(format!("cannot rotate a non-square {w}x{h} patch")));
        }
        let t = *self;
        Ok((image.remap(w, h, |x, y| t.source(x, y, w, h)), dsm.remap(w, h, |x, y| t.source(x, y, w, h))))
    }
}

/// Draws and applies one random transform to a coregistered patch pair.
pub fn augment<R: Rng + ?Sized>(
    image: &RgbRaster,
    dsm: &DepthRaster,
    flags: &AugmentFlags,
    rng: &mut R,
) -> Result<(RgbRaster, DepthRaster)> {
    if flags.rot90 && image.width() != image.height() {
        return Err(Error::Config(format!(
            "rotation augmentation needs square patches, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    Transform::draw(flags, rng).apply(image, dsm)
}

/// Cosine annealing from `lr0` at `t = 0` to zero at `t = epochs`.
pub fn cosine_lr(t: f64, epochs: f64, lr0: f64) -> f64 {
    lr0 * (1.0 + Float::cos(core::f64::consts::PI * t / epochs)) / 2.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam update in place. Gradients are checked before any
/// parameter moves; a non-finite entry aborts with the parameter's name.
pub fn adam_step<T: Real, S: AsRef<str>>(
    names: &[S],
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || names.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment buffers, {} names",
            params.len(),
            grads.len(),
            state.m.len(),
            names.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() || state.m[i].shape() != params[i].shape() {
            return Err(Error::Shape(format!("gradient of `{}` does not match its parameter", names[i].as_ref())));
        }
        if !g.all_finite() {
            return Err(Error::NanGradient(names[i].as_ref().into()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - Float::powi(b1, t);
    let c2 = 1.0 - Float::powi(b2, t);
    for (i, g) in grads.iter().enumerate() {
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::lit(mj);
            v[j] = T::lit(vj);
            let update = lr * (mj / c1) / (Float::sqrt(vj / c2) + state.eps);
            p[j] = T::lit(p[j].as_f64() - update);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentFlags,
    /// Luminance above which pixels count as glint; `None` disables removal.
    pub glint_threshold: Option<u8>,
    pub norm: NormalizationSpec,
    pub loss: LossKind,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2.5e-4,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            augment: AugmentFlags::default(),
            glint_threshold: Some(240),
            norm: NormalizationSpec::default(),
            loss: LossKind::Bsw(BswConfig::default()),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr0)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if self.glint_threshold == Some(0) {
            return Err(Error::Config("glint threshold must lie in (0, 255]".into()));
        }
        if let LossKind::Bsw(b) = &self.loss {
            b.validate()?;
        }
        self.norm.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub lr: f64,
    /// Whole-prediction RMSE (meters) on the held-out reference, if given.
    pub val_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub trace: Vec<EpochRecord>,
    /// Patches dropped because they have no valid depth.
    pub skipped: usize,
}

/// Held-out image and reference used only for epoch-wise monitoring.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub image: &'a RgbRaster,
    pub reference: &'a DepthRaster,
    pub patch: usize,
}

fn prepare(patch: &PatchPair, glint: Option<u8>) -> PatchPair {
    match glint {
        Some(t) => PatchPair { image: remove_glint(&patch.image, t), ..patch.clone() },
        None => patch.clone(),
    }
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(patches: &[PatchPair], net: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainOutput> {
    let init = ModelParams::init(net, cfg.seed)?;
    train_from(init, patches, cfg, None)
}

/// Trains `init` on `patches`. Gap pixels contribute nothing to the loss and
/// their stored values are never read.
pub fn train_from(
    init: ModelParams,
    patches: &[PatchPair],
    cfg: &TrainConfig,
    validation: Option<Validation>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    init.validate()?;
    if patches.is_empty() {
        return Err(Error::NoSupervision);
    }
    let usable: Vec<PatchPair> = patches
        .iter()
        .filter(|p| p.dsm.valid_count() > 0)
        .map(|p| prepare(p, cfg.glint_threshold))
        .collect();
    let skipped = patches.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::NoSupervision);
    }
    for p in &usable {
        init.config.check_input(3, p.image.height(), p.image.width())?;
    }
    let mut params = init;
    let mut adam = AdamState::new(&params.tensors);
    let mut shuffle_rng = rng::stream(cfg.seed, SHUFFLE);
    let mut aug_rng = rng::stream(cfg.seed, AUGMENT);
    let mut drop_rng = rng::stream(cfg.seed, DROPOUT);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as f64, cfg.epochs as f64, cfg.lr0);
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let samples = batch
                .iter()
                .map(|i| {
                    let p = &usable[*i];
                    augment(&p.image, &p.dsm, &cfg.augment, &mut aug_rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = train_step(&mut params, &mut adam, &samples, cfg, lr, &mut drop_rng)?;
            total += loss;
            steps += 1;
        }
        let val_rmse = match validation {
            Some(v) => Some(validation_rmse(&params, &v, cfg)?),
            None => None,
        };
        trace.push(EpochRecord { epoch, loss: total / steps as f64, lr, val_rmse });
    }
    Ok(TrainOutput { params, trace, skipped })
}

fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState<f32>,
    samples: &[(RgbRaster, DepthRaster)],
    cfg: &TrainConfig,
    lr: f64,
    drop_rng: &mut SeededRng,
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, true);
    let mut losses = Vec::with_capacity(samples.len());
    for (image, dsm) in samples {
        let x = g.constant(image.to_tensor(&cfg.norm));
        let y = forward(&mut g, &params.config, &bound, x, Some(&mut *drop_rng))?;
        let (target, mask) = cfg.norm.depth_targets(dsm);
        losses.push(cfg.loss.apply(&mut g, y, &target, &mask)?);
    }
    let mut loss = losses[0];
    for l in &losses[1..] {
        loss = g.add(loss, *l)?;
    }
    let loss = g.scale(loss, 1.0 / samples.len() as f32);
    let value = g.value(loss).item()? as f64;
    g.backward(loss)?;
    let grads: Vec<Tensor<f32>> = bound
        .vars
        .iter()
        .zip(&params.tensors)
        .map(|(v, p)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    adam_step(&params.names, &mut params.tensors, &grads, adam, lr)?;
    Ok(value)
}

fn validation_rmse(params: &ModelParams, v: &Validation, cfg: &TrainConfig) -> Result<f64> {
    let pc = PredictConfig { patch: v.patch, norm: cfg.norm, glint_threshold: cfg.glint_threshold };
    let pred = predict_raster(params, v.image, &pc)?;
    pred.check_coregistered(v.reference)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..pred.len() {
        if let (Some(a), Some(b)) = (pred.value(i), v.reference.value(i)) {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(Float::sqrt(sum / n as f64))
}

/// Masked RMSE (normalized units) of the model on each patch, no dropout.
pub fn masked_rmse_on(params: &ModelParams, patches: &[PatchPair], cfg: &TrainConfig) -> Result<Vec<f64>> {
    patches
        .iter()
        .map(|p| {
            let p = prepare(p, cfg.glint_threshold);
            let mut g = Graph::<f32>::new();
            let bound = params.bind(&mut g, false);
            let x = g.constant(p.image.to_tensor(&cfg.norm));
            let y = forward(&mut g, &params.config, &bound, x, None)?;
            let (target, mask) = cfg.norm.depth_targets(&p.dsm);
            let l = masked_rmse(&mut g, y, &target, &mask)?;
            Ok(g.value(l).item()? as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictConfig {
    /// Tile size fed to the network.
    pub patch: usize,
    pub norm: NormalizationSpec,
    pub glint_threshold: Option<u8>,
}

/// Normalized network output for a whole image: tiles of `patch` at half
/// stride over a reflection-padded copy, blended with tent weights so tile
/// borders leave no seams.
pub fn predict_normalized(params: &ModelParams, image: &RgbRaster, cfg: &PredictConfig) -> Result<Vec<f64>> {
    let p = cfg.patch;
    params.config.check_input(3, p, p)?;
    cfg.norm.validate()?;
    let image = match cfg.glint_threshold {
        Some(t) => remove_glint(image, t),
        None => image.clone(),
    };
    let (w, h) = (image.width(), image.height());
    let s = p / 2;
    let span = |n: usize| (n + 2 * s).div_ceil(s) * s;
    let (pw, ph) = (span(w), span(h));
    let padded = image.remap(pw, ph, |x, y| {
        (reflect((x as isize - s as isize).unsigned_abs(), w), reflect((y as isize - s as isize).unsigned_abs(), h))
    });
    let tent: Vec<f64> = (0..p).map(|i| (i + 1).min(p - i) as f64).collect();
    let mut acc = vec![0.0; pw * ph];
    let mut wsum = vec![0.0; pw * ph];
    for y0 in (0..=ph - p).step_by(s) {
        for x0 in (0..=pw - p).step_by(s) {
            let tile = padded.crop(x0, y0, p, p)?;
            let out = crate::network::predict::<f32>(params, &tile.to_tensor(&cfg.norm))?;
            for ty in 0..p {
                for tx in 0..p {
                    let wt = tent[tx] * tent[ty];
                    let j = (y0 + ty) * pw + x0 + tx;
                    acc[j] += wt * out.data()[ty * p + tx] as f64;
                    wsum[j] += wt;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let j = (y + s) * pw + x + s;
            out.push(acc[j] / wsum[j]);
        }
    }
    Ok(out)
}

/// Whole prediction in meters: complete, clamped to the surface.
pub fn predict_raster(params: &ModelParams, image: &RgbRaster, cfg: &PredictConfig) -> Result<DepthRaster> {
    let norm = predict_normalized(params, image, cfg)?;
    let values = norm.iter().map(|v| cfg.norm.denormalize_depth(*v).min(0.0)).collect();
    DepthRaster::complete(image.width(), image.height(), image.gsd(), values)
}

/// Valid SfM cells pass through; gaps take the prediction.
pub fn combine_prediction(sfm: &DepthRaster, predicted: &DepthRaster) -> Result<DepthRaster> {
    sfm.check_coregistered(predicted)?;
    let values = (0..sfm.len())
        .map(|i| sfm.value(i).or_else(|| predicted.value(i)).unwrap_or(sfm.nodata()))
        .collect();
    DepthRaster::new(sfm.width(), sfm.height(), sfm.gsd(), values, sfm.nodata())
}
