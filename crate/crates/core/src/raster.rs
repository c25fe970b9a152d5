//! Depth grids with gaps, RGB orthoimages, patch tiling and normalization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_NODATA: f64 = -9999.0;

/// Depth grid in meters (negative below the water surface). Cells equal to
/// the nodata sentinel are gaps; everything else is a valid depth `<= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthRaster {
    width: usize,
    height: usize,
    gsd: f64,
    nodata: f64,
    values: Vec<f64>,
}

fn is_sentinel(v: f64, nodata: f64) -> bool {
    if nodata.is_nan() {
        v.is_nan()
    } else {
        v == nodata
    }
}

impl DepthRaster {
    pub fn new(width: usize, height: usize, gsd: f64, values: Vec<f64>, nodata: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("raster must be non-empty, got {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} raster given {} values",
                values.len()
            )));
        }
        if !(gsd > 0.0 && gsd.is_finite()) {
            return Err(Error::Config(format!("ground sample distance must be positive, got {gsd}")));
        }
        if !nodata.is_nan() && nodata <= 0.0 && nodata > -1.0e3 {
            // A sentinel inside the plausible depth range would be indistinguishable
            // from a real depth.
            return Err(Error::Config(format!("nodata sentinel {nodata} collides with valid depths")));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !is_sentinel(**v, nodata) && !(v.is_finite() && **v <= 0.0))
        {
            return Err(Error::Contract(format!(
                "cell {i} holds {v}; valid depths must be finite and <= 0"
            )));
        }
        Ok(Self { width, height, gsd, nodata, values })
    }

    /// A raster with every cell valid.
    pub fn complete(width: usize, height: usize, gsd: f64, values: Vec<f64>) -> Result<Self> {
        Self::new(width, height, gsd, values, DEFAULT_NODATA)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        gsd: f64,
        mut f: impl FnMut(usize, usize) -> Option<f64>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y).unwrap_or(DEFAULT_NODATA));
            }
        }
        Self::new(width, height, gsd, values, DEFAULT_NODATA)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gsd(&self) -> f64 {
        self.gsd
    }

    pub fn nodata(&self) -> f64 {
        self.nodata
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Raw cell values including nodata sentinels.
    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_valid(&self, i: usize) -> bool {
        !is_sentinel(self.values[i], self.nodata)
    }

    pub fn value(&self, i: usize) -> Option<f64> {
        self.is_valid(i).then(|| self.values[i])
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.value(y * self.width + x)
    }

    /// Validity mask, `true` where a depth is present.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.values.len()).map(|i| self.is_valid(i)).collect()
    }

    pub fn valid_count(&self) -> usize {
        (0..self.values.len()).filter(|&i| self.is_valid(i)).count()
    }

    pub fn gap_fraction(&self) -> f64 {
        1.0 - self.valid_count() as f64 / self.values.len() as f64
    }

    pub fn set_gap(&mut self, i: usize) {
        self.values[i] = self.nodata;
    }

    pub fn set(&mut self, i: usize, depth: f64) -> Result<()> {
        if !(depth.is_finite() && depth <= 0.0) {
            return Err(Error::Contract(format!("depth {depth} is not a finite value <= 0")));
        }
        self.values[i] = depth;
        Ok(())
    }

    /// Same grid with a different nodata sentinel.
    pub fn with_nodata(&self, nodata: f64) -> Result<Self> {
        let values = (0..self.values.len())
            .map(|i| self.value(i).unwrap_or(nodata))
            .collect();
        Self::new(self.width, self.height, self.gsd, values, nodata)
    }

    /// Applies `f` to every valid depth; gaps stay gaps. Results are clamped
    /// to the surface.
    pub fn map_valid(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let values = (0..self.values.len())
            .map(|i| match self.value(i) {
                Some(v) => f(v).min(0.0),
                None => self.nodata,
            })
            .collect();
        Self { values, ..self.clone() }
    }

    pub fn check_coregistered(&self, other: &DepthRaster) -> Result<()> {
        check_grid(
            (self.width, self.height, self.gsd),
            (other.width, other.height, other.gsd),
        )
    }

    pub fn check_coregistered_rgb(&self, image: &RgbRaster) -> Result<()> {
        check_grid(
            (self.width, self.height, self.gsd),
            (image.width, image.height, image.gsd),
        )
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{} raster",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            values.extend_from_slice(&self.values[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self { width: w, height: h, values, ..self.clone() })
    }

    /// Resamples cell positions: output `(x, y)` takes input `src(x, y)`.
    pub fn remap(&self, width: usize, height: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = src(x, y);
                values.push(self.values[sy * self.width + sx]);
            }
        }
        Self { width, height, values, ..self.clone() }
    }
}

fn check_grid(a: (usize, usize, f64), b: (usize, usize, f64)) -> Result<()> {
    let gsd_match = (a.2 - b.2).abs() <= 1e-9 * a.2.abs().max(b.2.abs());
    if a.0 != b.0 || a.1 != b.1 || !gsd_match {
        return Err(Error::Coregistration(format!(
            "{}x{} @ {} m vs {}x{} @ {} m",
            a.0, a.1, a.2, b.0, b.1, b.2
        )));
    }
    Ok(())
}

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbRaster {
    width: usize,
    height: usize,
    gsd: f64,
    data: Vec<u8>,
}

impl RgbRaster {
    pub fn new(width: usize, height: usize, gsd: f64, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image given {} bytes",
                data.len()
            )));
        }
        if !(gsd > 0.0 && gsd.is_finite()) {
            return Err(Error::Config(format!("ground sample distance must be positive, got {gsd}")));
        }
        Ok(Self { width, height, gsd, data })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        gsd: f64,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, gsd, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gsd(&self) -> f64 {
        self.gsd
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rec. 601 luma of pixel `i` (row-major index).
    pub fn luminance(&self, i: usize) -> f64 {
        let p = &self.data[3 * i..3 * i + 3];
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.remap(w, h, |x, y| (x + x0, y + y0)))
    }

    pub fn remap(&self, width: usize, height: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = src(x, y);
                let i = 3 * (sy * self.width + sx);
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        Self { width, height, gsd: self.gsd, data }
    }

    /// Extends the image to `width x height` by mirroring at the right and
    /// bottom edges (edge pixel not repeated).
    pub fn pad_reflect(&self, width: usize, height: usize) -> Result<Self> {
        if width < self.width || height < self.height {
            return Err(Error::Shape("reflection padding cannot shrink an image".into()));
        }
        let (w, h) = (self.width, self.height);
        Ok(self.remap(width, height, |x, y| (reflect(x, w), reflect(y, h))))
    }

    /// `[3, h, w]` tensor of values divided by the RGB divisor.
    pub fn to_tensor<T: Real>(&self, spec: &NormalizationSpec) -> Tensor<T> {
        let n = self.width * self.height;
        let mut data = Vec::with_capacity(3 * n);
        for c in 0..3 {
            data.extend((0..n).map(|i| T::lit(spec.normalize_rgb(self.data[3 * i + c]))));
        }
        Tensor::from_fn([3, self.height, self.width], |i| data[i])
    }
}

/// Mirror index `i` into `0..len` (whole-sample symmetric, edge not repeated).
pub fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len {
        r
    } else {
        period - r
    }
}

/// Divisors bringing RGB bytes and depths to roughly `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationSpec {
    pub rgb_divisor: f64,
    /// Negative, in meters, so that depths map to positive values.
    pub depth_divisor: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self { rgb_divisor: 255.0, depth_divisor: -15.0 }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rgb_divisor > 0.0) {
            return Err(Error::Config(format!("rgb divisor must be positive, got {}", self.rgb_divisor)));
        }
        if !(self.depth_divisor < 0.0) {
            return Err(Error::Config(format!(
                "depth divisor must be negative, got {}",
                self.depth_divisor
            )));
        }
        Ok(())
    }

    pub fn normalize_rgb(&self, v: u8) -> f64 {
        v as f64 / self.rgb_divisor
    }

    pub fn normalize_depth(&self, depth: f64) -> f64 {
        depth / self.depth_divisor
    }

    pub fn denormalize_depth(&self, value: f64) -> f64 {
        value * self.depth_divisor
    }

    /// Normalized targets and validity mask. Gap cells get a zero target and
    /// their stored value is never read.
    pub fn depth_targets(&self, dsm: &DepthRaster) -> (Vec<f64>, Vec<bool>) {
        let mut targets = vec![0.0; dsm.len()];
        let mask = dsm.mask();
        for (i, t) in targets.iter_mut().enumerate() {
            if mask[i] {
                *t = self.normalize_depth(dsm.raw_values()[i]);
            }
        }
        (targets, mask)
    }
}

/// Coregistered image/depth tile and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub x0: usize,
    pub y0: usize,
    pub image: RgbRaster,
    pub dsm: DepthRaster,
}

/// Tiles `image`/`dsm` into `patch x patch` pairs at the given stride.
/// Origins step by `stride` while the patch still fits.
pub fn extract_patches(
    image: &RgbRaster,
    dsm: &DepthRaster,
    patch: usize,
    stride: usize,
) -> Result<Vec<PatchPair>> {
    dsm.check_coregistered_rgb(image)?;
    if patch == 0 || stride == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    if image.width < patch || image.height < patch {
        return Err(Error::Shape(format!(
            "{}x{} raster is smaller than a {patch}px patch",
            image.width, image.height
        )));
    }
    let mut out = Vec::new();
    for y0 in (0..=image.height - patch).step_by(stride) {
        for x0 in (0..=image.width - patch).step_by(stride) {
            out.push(PatchPair {
                x0,
                y0,
                image: image.crop(x0, y0, patch, patch)?,
                dsm: dsm.crop(x0, y0, patch, patch)?,
            });
        }
    }
    Ok(out)
}

/// Writes tiles back into a `width x height` grid. Later tiles overwrite
/// earlier ones; uncovered cells are gaps.
pub fn reassemble(
    width: usize,
    height: usize,
    gsd: f64,
    tiles: &[(usize, usize, &DepthRaster)],
) -> Result<DepthRaster> {
    let mut out = DepthRaster::new(width, height, gsd, vec![DEFAULT_NODATA; width * height], DEFAULT_NODATA)?;
    for (x0, y0, tile) in tiles {
        if x0 + tile.width > width || y0 + tile.height > height {
            return Err(Error::Shape(format!(
                "tile at ({x0}, {y0}) of {}x{} exceeds {width}x{height}",
                tile.width, tile.height
            )));
        }
        for y in 0..tile.height {
            for x in 0..tile.width {
                let dst = (y0 + y) * width + x0 + x;
                match tile.get(x, y) {
                    Some(v) => out.values[dst] = v,
                    None => out.values[dst] = out.nodata,
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> DepthRaster {
        DepthRaster::from_fn(w, h, 0.25, |x, y| {
            if (x + y) % 5 == 0 {
                None
            } else {
                Some(-((x + 2 * y) as f64) * 0.1)
            }
        })
        .unwrap()
    }

    fn image(w: usize, h: usize) -> RgbRaster {
        RgbRaster::from_fn(w, h, 0.25, |x, y| [x as u8, y as u8, (x * y) as u8]).unwrap()
    }

    #[test]
    fn single_patch_when_raster_equals_patch() {
        let p = extract_patches(&image(4, 4), &ramp(4, 4), 4, 4).unwrap();
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn four_patches_tile_eight_by_eight() {
        let p = extract_patches(&image(8, 8), &ramp(8, 8), 4, 4).unwrap();
        assert_eq!(p.len(), 4);
        let origins: Vec<_> = p.iter().map(|q| (q.x0, q.y0)).collect();
        assert_eq!(origins, vec![(0, 0), (4, 0), (0, 4), (4, 4)]);
    }

    #[test]
    fn reassembly_reproduces_raster() {
        let dsm = ramp(12, 8);
        let patches = extract_patches(&image(12, 8), &dsm, 4, 4).unwrap();
        let tiles: Vec<_> = patches.iter().map(|p| (p.x0, p.y0, &p.dsm)).collect();
        let back = reassemble(12, 8, 0.25, &tiles).unwrap();
        assert_eq!(back, dsm);
    }

    #[test]
    fn mismatched_rasters_are_rejected() {
        let err = extract_patches(&image(8, 8), &ramp(8, 4), 4, 4).unwrap_err();
        assert!(matches!(err, Error::Coregistration(_)));
        let other_gsd = DepthRaster::complete(8, 8, 0.5, vec![-1.0; 64]).unwrap();
        assert!(other_gsd.check_coregistered_rgb(&image(8, 8)).is_err());
    }

    #[test]
    fn normalization_examples() {
        let spec = NormalizationSpec::default();
        assert_eq!(spec.normalize_depth(-15.0), 1.0);
        assert_eq!(spec.normalize_depth(0.0), 0.0);
        assert_eq!(spec.normalize_rgb(255), 1.0);
        for d in [-0.3, -6.0, -14.99, -20.0] {
            assert!((spec.denormalize_depth(spec.normalize_depth(d)) - d).abs() < 1e-6);
        }
        assert!(NormalizationSpec { rgb_divisor: 255.0, depth_divisor: 6.0 }.validate().is_err());
    }

    #[test]
    fn depth_targets_skip_gaps() {
        let dsm = ramp(5, 5);
        let (t, m) = NormalizationSpec::default().depth_targets(&dsm);
        for i in 0..dsm.len() {
            assert_eq!(m[i], dsm.is_valid(i));
            if !m[i] {
                assert_eq!(t[i], 0.0);
            }
        }
    }

    #[test]
    fn nan_sentinel_masks_like_numeric_sentinel() {
        let dsm = ramp(6, 3);
        let nan = dsm.with_nodata(f64::NAN).unwrap();
        assert_eq!(nan.mask(), dsm.mask());
        assert_eq!(nan.with_nodata(DEFAULT_NODATA).unwrap(), dsm);
    }

    #[test]
    fn positive_depths_are_rejected() {
        assert!(DepthRaster::complete(2, 1, 1.0, vec![-1.0, 0.5]).is_err());
    }

    #[test]
    fn reflect_pad_mirrors_edges() {
        let img = image(3, 2);
        let p = img.pad_reflect(5, 4).unwrap();
        assert_eq!(p.pixel(3, 0), img.pixel(1, 0));
        assert_eq!(p.pixel(4, 0), img.pixel(0, 0));
        assert_eq!(p.pixel(0, 2), img.pixel(0, 0));
        assert_eq!(p.crop(0, 0, 3, 2).unwrap(), img);
    }
}
