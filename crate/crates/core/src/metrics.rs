//! Depth accuracy metrics, threshold exceedance, coverage, hydrographic
//! banding and histograms.
//!
//! Errors are `predicted - reference`; both rasters hold negative-down
//! depths, so a positive error means the prediction is too shallow.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::raster::DepthRaster;

pub const DEFAULT_THRESHOLDS: [f64; 2] = [1.0, 0.5];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorStats {
    pub count: usize,
    pub rmse: f64,
    pub mae: f64,
    /// Population standard deviation, so `rmse^2 = bias^2 + std^2`.
    pub std: f64,
    pub bias: f64,
    pub max_abs: f64,
}

impl ErrorStats {
    /// `None` for an empty slice.
    pub fn from_errors(errors: &[f64]) -> Option<Self> {
        if errors.is_empty() {
            return None;
        }
        let n = errors.len() as f64;
        let bias = errors.iter().sum::<f64>() / n;
        let mse = errors.iter().map(|e| e * e).sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - bias) * (e - bias)).sum::<f64>() / n;
        Some(Self {
            count: errors.len(),
            rmse: Float::sqrt(mse),
            mae: errors.iter().map(|e| e.abs()).sum::<f64>() / n,
            std: Float::sqrt(var),
            bias,
            max_abs: errors.iter().fold(0.0, |m, e| m.max(e.abs())),
        })
    }
}

/// One evaluated region. An empty region keeps `count == 0` and no stats.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub count: usize,
    pub stats: Option<ErrorStats>,
    /// Percent of pixels with `|error|` strictly above each threshold.
    pub exceedance: Vec<(f64, f64)>,
}

impl MetricsRow {
    pub fn from_errors(label: &str, errors: &[f64], thresholds: &[f64]) -> Self {
        let stats = ErrorStats::from_errors(errors);
        let exceedance = match stats {
            Some(_) => thresholds.iter().map(|t| (*t, exceed_pct(errors, *t))).collect(),
            None => Vec::new(),
        };
        Self { label: label.into(), count: errors.len(), stats, exceedance }
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_none()
    }
}

fn exceed_pct(errors: &[f64], t: f64) -> f64 {
    100.0 * errors.iter().filter(|e| e.abs() > t).count() as f64 / errors.len() as f64
}

/// `(error, reference depth)` for pixels valid in both rasters and selected
/// by `region` (all pixels when `None`).
pub fn paired_errors(pred: &DepthRaster, reference: &DepthRaster, region: Option<&[bool]>) -> Result<Vec<(f64, f64)>> {
    pred.check_coregistered(reference)?;
    if let Some(r) = region {
        if r.len() != pred.len() {
            return Err(Error::Shape(format!("region mask has {} cells for {} pixels", r.len(), pred.len())));
        }
    }
    Ok((0..pred.len())
        .filter(|i| region.is_none_or(|r| r[*i]))
        .filter_map(|i| Some((pred.value(i)? - reference.value(i)?, reference.value(i)?)))
        .collect())
}

pub fn compute_metrics(
    label: &str,
    pred: &DepthRaster,
    reference: &DepthRaster,
    region: Option<&[bool]>,
    thresholds: &[f64],
) -> Result<MetricsRow> {
    let errs: Vec<f64> = paired_errors(pred, reference, region)?.into_iter().map(|p| p.0).collect();
    Ok(MetricsRow::from_errors(label, &errs, thresholds))
}

/// Percent of evaluated pixels whose `|error|` exceeds each threshold;
/// `None` when nothing is evaluated.
pub fn threshold_exceedance(
    pred: &DepthRaster,
    reference: &DepthRaster,
    region: Option<&[bool]>,
    thresholds: &[f64],
) -> Result<Option<Vec<f64>>> {
    let errs: Vec<f64> = paired_errors(pred, reference, region)?.into_iter().map(|p| p.0).collect();
    if errs.is_empty() {
        return Ok(None);
    }
    Ok(Some(thresholds.iter().map(|t| exceed_pct(&errs, *t)).collect()))
}

/// Percent of cells holding a valid depth.
pub fn coverage(dsm: &DepthRaster) -> f64 {
    100.0 * dsm.valid_count() as f64 / dsm.len() as f64
}

/// The rasters a Table-1-style breakdown is built from. Missing products
/// just drop their rows.
#[derive(Clone, Copy, Debug)]
pub struct Products<'a> {
    pub reference: &'a DepthRaster,
    pub sfm: Option<&'a DepthRaster>,
    pub corrected: Option<&'a DepthRaster>,
    pub whole: Option<&'a DepthRaster>,
    pub combined: Option<&'a DepthRaster>,
}

impl Products<'_> {
    /// Gap mask of the survey: from the corrected DSM if present, else the raw one.
    pub fn gap_mask(&self) -> Option<Vec<bool>> {
        self.corrected.or(self.sfm).map(|d| d.mask().iter().map(|m| !m).collect())
    }
}

pub const ROW_LABELS: [&str; 6] = ["sfm", "corrected_sfm", "pred_non_gaps", "pred_gaps", "combined", "whole"];

/// Rows: raw and corrected survey over their valid pixels, the whole
/// prediction split into non-gap and gap pixels, the combined product, and
/// the whole prediction over everything.
pub fn table_rows(p: &Products, thresholds: &[f64]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    if let Some(s) = p.sfm {
        rows.push(compute_metrics(ROW_LABELS[0], s, p.reference, None, thresholds)?);
    }
    if let Some(c) = p.corrected {
        rows.push(compute_metrics(ROW_LABELS[1], c, p.reference, None, thresholds)?);
    }
    if let Some(w) = p.whole {
        if let Some(gaps) = p.gap_mask() {
            let valid: Vec<bool> = gaps.iter().map(|g| !g).collect();
            rows.push(compute_metrics(ROW_LABELS[2], w, p.reference, Some(&valid), thresholds)?);
            rows.push(compute_metrics(ROW_LABELS[3], w, p.reference, Some(&gaps), thresholds)?);
        }
    }
    if let Some(c) = p.combined {
        rows.push(compute_metrics(ROW_LABELS[4], c, p.reference, None, thresholds)?);
    }
    if let Some(w) = p.whole {
        rows.push(compute_metrics(ROW_LABELS[5], w, p.reference, None, thresholds)?);
    }
    Ok(rows)
}

/// Half-open `[lo, hi)` interval of `|reference depth|` in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthBin {
    pub lo: f64,
    pub hi: f64,
}

impl DepthBin {
    pub fn contains(&self, depth: f64) -> bool {
        let d = depth.abs();
        d >= self.lo && d < self.hi
    }

    pub fn label(&self) -> String {
        format!("{}-{}m", self.lo, self.hi)
    }
}

pub fn default_depth_bins() -> Vec<DepthBin> {
    vec![DepthBin { lo: 0.0, hi: 5.0 }, DepthBin { lo: 5.0, hi: 10.0 }, DepthBin { lo: 10.0, hi: 20.0 }]
}

/// Metrics of `pred` split by reference depth.
pub fn binned_metrics(
    label: &str,
    pred: &DepthRaster,
    reference: &DepthRaster,
    region: Option<&[bool]>,
    bins: &[DepthBin],
    thresholds: &[f64],
) -> Result<Vec<(DepthBin, MetricsRow)>> {
    let pairs = paired_errors(pred, reference, region)?;
    Ok(bins
        .iter()
        .map(|b| {
            let errs: Vec<f64> = pairs.iter().filter(|p| b.contains(p.1)).map(|p| p.0).collect();
            (*b, MetricsRow::from_errors(label, &errs, thresholds))
        })
        .collect())
}

/// Metrics per class of a user-supplied label raster (e.g. habitat).
pub fn class_metrics(
    pred: &DepthRaster,
    reference: &DepthRaster,
    classes: &[u32],
    thresholds: &[f64],
) -> Result<Vec<(u32, MetricsRow)>> {
    if classes.len() != pred.len() {
        return Err(Error::Shape(format!("class raster has {} cells for {} pixels", classes.len(), pred.len())));
    }
    let mut ids: Vec<u32> = classes.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|c| {
            let region: Vec<bool> = classes.iter().map(|k| *k == c).collect();
            Ok((c, compute_metrics(&format!("class_{c}"), pred, reference, Some(&region), thresholds)?))
        })
        .collect()
}

/// Averages rows with matching labels across runs (e.g. several seeds).
/// Empty rows are left out of the average; counts are averaged too.
pub fn average_rows(runs: &[Vec<MetricsRow>]) -> Result<Vec<MetricsRow>> {
    let first = runs.first().ok_or_else(|| Error::Config("no runs to average".into()))?;
    let mut out = Vec::with_capacity(first.len());
    for (i, row) in first.iter().enumerate() {
        let same: Vec<&MetricsRow> = runs.iter().map(|r| r.get(i)).collect::<Option<_>>().ok_or_else(|| {
            Error::Shape(format!("runs disagree on the number of rows at `{}`", row.label))
        })?;
        if same.iter().any(|r| r.label != row.label) {
            return Err(Error::Shape(format!("runs disagree on row {i}")));
        }
        let full: Vec<&&MetricsRow> = same.iter().filter(|r| r.stats.is_some()).collect();
        let n = full.len() as f64;
        let avg = |f: fn(&ErrorStats) -> f64| full.iter().map(|r| f(r.stats.as_ref().unwrap())).sum::<f64>() / n;
        let stats = (!full.is_empty()).then(|| ErrorStats {
            count: (full.iter().map(|r| r.count).sum::<usize>() as f64 / n) as usize,
            rmse: avg(|s| s.rmse),
            mae: avg(|s| s.mae),
            std: avg(|s| s.std),
            bias: avg(|s| s.bias),
            max_abs: avg(|s| s.max_abs),
        });
        let exceedance = match full.first() {
            Some(r0) => (0..r0.exceedance.len())
                .map(|k| (r0.exceedance[k].0, full.iter().map(|r| r.exceedance[k].1).sum::<f64>() / n))
                .collect(),
            None => Vec::new(),
        };
        out.push(MetricsRow { label: row.label.clone(), count: stats.map_or(0, |s| s.count), stats, exceedance });
    }
    Ok(out)
}

/// One accuracy band: tolerance grows with depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub name: String,
    pub a: f64,
    pub b: f64,
}

impl Band {
    pub fn new(name: &str, a: f64, b: f64) -> Self {
        Self { name: name.into(), a, b }
    }
}

/// Depth-dependent vertical tolerances. CATZOC bands use `a + b*d`; S-44
/// orders use `sqrt(a^2 + (b*d)^2)`. Bands are listed tightest first.
#[derive(Clone, Debug, PartialEq)]
pub struct HydroBandingConfig {
    pub catzoc: Vec<Band>,
    pub s44: Vec<Band>,
}

impl Default for HydroBandingConfig {
    fn default() -> Self {
        Self {
            catzoc: vec![Band::new("A1", 0.5, 0.01), Band::new("A2/B", 1.0, 0.02), Band::new("C", 2.0, 0.05)],
            s44: vec![
                Band::new("Exclusive", 0.15, 0.0075),
                Band::new("Special", 0.25, 0.0075),
                Band::new("Order1", 0.5, 0.013),
                Band::new("Order2", 1.0, 0.023),
            ],
        }
    }
}

pub fn catzoc_tolerance(band: &Band, depth: f64) -> f64 {
    band.a + band.b * depth.abs()
}

pub fn s44_tolerance(band: &Band, depth: f64) -> f64 {
    Float::sqrt(band.a * band.a + (band.b * depth.abs()) * (band.b * depth.abs()))
}

fn check_bands(kind: &str, bands: &[Band]) -> Result<()> {
    if bands.is_empty() {
        return Err(Error::Config(format!("{kind}: no bands configured")));
    }
    for b in bands {
        if !(b.a >= 0.0 && b.b >= 0.0 && b.a.is_finite() && b.b.is_finite()) {
            return Err(Error::Config(format!("{kind} band {}: coefficients must be finite and >= 0", b.name)));
        }
    }
    for w in bands.windows(2) {
        let looser = w[1].a >= w[0].a && w[1].b >= w[0].b && (w[1].a > w[0].a || w[1].b > w[0].b);
        if !looser {
            return Err(Error::Config(format!(
                "{kind}: band {} is not strictly looser than {}",
                w[1].name, w[0].name
            )));
        }
    }
    Ok(())
}

impl HydroBandingConfig {
    pub fn validate(&self) -> Result<()> {
        check_bands("CATZOC", &self.catzoc)?;
        check_bands("S-44", &self.s44)
    }
}

/// Index of the tightest band admitting `|error|` at `depth` (equality is
/// inside), or `bands.len()` for the residual class.
pub fn assign_band(bands: &[Band], tolerance: fn(&Band, f64) -> f64, error: f64, depth: f64) -> usize {
    bands.iter().position(|b| error.abs() <= tolerance(b, depth)).unwrap_or(bands.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandShares {
    /// `(band name, percent)`, tightest first, then the residual `outside`.
    pub shares: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandingReport {
    pub count: usize,
    pub catzoc: BandShares,
    pub s44: BandShares,
}

fn shares(bands: &[Band], tol: fn(&Band, f64) -> f64, pairs: &[(f64, f64)]) -> BandShares {
    let mut counts = vec![0usize; bands.len() + 1];
    for (e, d) in pairs {
        counts[assign_band(bands, tol, *e, *d)] += 1;
    }
    let n = pairs.len().max(1) as f64;
    let mut out: Vec<(String, f64)> =
        bands.iter().zip(&counts).map(|(b, c)| (b.name.clone(), 100.0 * *c as f64 / n)).collect();
    out.push(("outside".into(), 100.0 * counts[bands.len()] as f64 / n));
    BandShares { shares: out }
}

/// Per-band percentages of evaluated pixels. Fails on an empty selection.
pub fn hydro_banding(
    pred: &DepthRaster,
    reference: &DepthRaster,
    region: Option<&[bool]>,
    cfg: &HydroBandingConfig,
) -> Result<BandingReport> {
    cfg.validate()?;
    let pairs = paired_errors(pred, reference, region)?;
    if pairs.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(BandingReport {
        count: pairs.len(),
        catzoc: shares(&cfg.catzoc, catzoc_tolerance, &pairs),
        s44: shares(&cfg.s44, s44_tolerance, &pairs),
    })
}

/// Normalized histogram over `[lo, hi]`; values outside land in the end bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    /// Fraction of samples per bin; sums to 1.
    pub density: Vec<f64>,
    pub count: usize,
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = (v - lo) / (hi - lo) * bins as f64;
    if t <= 0.0 {
        0
    } else {
        (Float::floor(t) as usize).min(bins - 1)
    }
}

/// Range of the finite values, widened to unit width around a single value.
fn auto_range(values: &[f64]) -> Option<(f64, f64)> {
    let finite = values.iter().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, |m, v| m.min(*v));
    let hi = finite.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    if !lo.is_finite() {
        None
    } else if hi > lo {
        Some((lo, hi))
    } else {
        Some((lo - 0.5, hi + 0.5))
    }
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("histogram needs bins > 0 and lo < hi, got {bins} bins over [{lo}, {hi}]")));
        }
        let mut counts = vec![0usize; bins];
        let mut n = 0usize;
        for v in values.iter().filter(|v| v.is_finite()) {
            counts[bin_of(*v, lo, hi, bins)] += 1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(Self { lo, hi, density: counts.iter().map(|c| *c as f64 / n as f64).collect(), count: n })
    }

    /// Histogram spanning the data range.
    pub fn auto(values: &[f64], bins: usize) -> Result<Self> {
        let (lo, hi) = auto_range(values).ok_or(Error::EmptyMask)?;
        Self::new(values, lo, hi, bins)
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.density.len() as f64;
        (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w)
    }

    pub fn mean(&self) -> f64 {
        (0..self.density.len()).map(|i| {
            let (a, b) = self.edges(i);
            0.5 * (a + b) * self.density[i]
        }).sum()
    }
}

/// Joint histogram of `(x, y)` pairs, row-major with `y` as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram2d {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
    pub density: Vec<f64>,
}

impl Histogram2d {
    pub fn auto(x: &[f64], y: &[f64], nx: usize, ny: usize) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Shape(format!("{} x values and {} y values", x.len(), y.len())));
        }
        if nx == 0 || ny == 0 {
            return Err(Error::Config("2-D histogram needs at least one bin per axis".into()));
        }
        let pairs: Vec<(f64, f64)> = x.iter().zip(y).filter(|(a, b)| a.is_finite() && b.is_finite()).map(|(a, b)| (*a, *b)).collect();
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let xr = auto_range(&xs).ok_or(Error::EmptyMask)?;
        let yr = auto_range(&ys).ok_or(Error::EmptyMask)?;
        let mut density = vec![0.0; nx * ny];
        let w = 1.0 / pairs.len() as f64;
        for (a, b) in &pairs {
            density[bin_of(*b, yr.0, yr.1, ny) * nx + bin_of(*a, xr.0, xr.1, nx)] += w;
        }
        Ok(Self { x_range: xr, y_range: yr, nx, ny, density })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raster(v: &[f64]) -> DepthRaster {
        DepthRaster::new(v.len(), 1, 1.0, v.to_vec(), -9999.0).unwrap()
    }

    #[test]
    fn identical_rasters_have_zero_error() {
        let a = raster(&[-1.0, -2.0, -3.0]);
        let row = compute_metrics("x", &a, &a, None, &DEFAULT_THRESHOLDS).unwrap();
        let s = row.stats.unwrap();
        assert_eq!((s.rmse, s.mae, s.std, s.bias), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(row.exceedance, vec![(1.0, 0.0), (0.5, 0.0)]);
    }

    #[test]
    fn symmetric_unit_errors() {
        let p = raster(&[-1.0, -3.0]);
        let r = raster(&[-2.0, -2.0]);
        let s = compute_metrics("x", &p, &r, None, &[]).unwrap().stats.unwrap();
        assert_eq!((s.rmse, s.mae, s.std, s.bias), (1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn half_the_pixels_off_by_two_meters() {
        let p = raster(&[-1.0, -1.0, -3.0, -3.0]);
        let r = raster(&[-1.0, -1.0, -1.0, -1.0]);
        assert_eq!(threshold_exceedance(&p, &r, None, &DEFAULT_THRESHOLDS).unwrap(), Some(vec![50.0, 50.0]));
    }

    #[test]
    fn empty_region_is_explicit() {
        let a = raster(&[-1.0, -9999.0]);
        let b = raster(&[-9999.0, -2.0]);
        let row = compute_metrics("gaps", &a, &b, None, &DEFAULT_THRESHOLDS).unwrap();
        assert!(row.is_empty());
        assert_eq!(row.count, 0);
        assert_eq!(threshold_exceedance(&a, &b, None, &[1.0]).unwrap(), None);
    }

    #[test]
    fn coverage_bounds() {
        assert_eq!(coverage(&raster(&[-1.0, -2.0])), 100.0);
        assert_eq!(coverage(&raster(&[-9999.0, -9999.0])), 0.0);
        assert_eq!(coverage(&raster(&[-1.0, -9999.0, -2.0, -9999.0])), 50.0);
    }

    proptest! {
        #[test]
        fn rmse_decomposes_into_bias_and_spread(seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let n = r.random_range(1..200);
            let p: Vec<f64> = (0..n).map(|_| -r.random_range(0.0..20.0)).collect();
            let q: Vec<f64> = (0..n).map(|_| -r.random_range(0.0..20.0)).collect();
            let s = compute_metrics("x", &raster(&p), &raster(&q), None, &[]).unwrap().stats.unwrap();
            prop_assert!((s.rmse * s.rmse - (s.bias * s.bias + s.std * s.std)).abs() < 1e-9);
        }

        #[test]
        fn banding_shares_sum_to_one_hundred(seed in 0u64..500) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let n = r.random_range(1..300);
            let q: Vec<f64> = (0..n).map(|_| -r.random_range(0.0..30.0)).collect();
            let p: Vec<f64> = q.iter().map(|d| (d + r.random_range(-3.0..3.0)).min(0.0)).collect();
            let rep = hydro_banding(&raster(&p), &raster(&q), None, &HydroBandingConfig::default()).unwrap();
            for s in [&rep.catzoc, &rep.s44] {
                prop_assert!((s.shares.iter().map(|x| x.1).sum::<f64>() - 100.0).abs() < 1e-9);
            }
        }

        #[test]
        fn histogram_mass_is_one(seed in 0u64..500, bins in 1usize..60) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..r.random_range(1..400)).map(|_| r.random_range(-5.0..5.0)).collect();
            let h = Histogram::new(&v, -2.0, 2.0, bins).unwrap();
            prop_assert!((h.density.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn catzoc_fixtures() {
        let cfg = HydroBandingConfig::default();
        // 0.5 + 1% of 10 m = 0.6 m
        assert_eq!(assign_band(&cfg.catzoc, catzoc_tolerance, 0.4, -10.0), 0);
        // 1.0 + 2% of 10 m = 1.2 m < 1.5 m
        assert!(assign_band(&cfg.catzoc, catzoc_tolerance, 1.5, -10.0) > 1);
        assert_eq!(assign_band(&cfg.catzoc, catzoc_tolerance, 0.0, -30.0), 0);
        assert_eq!(assign_band(&cfg.catzoc, catzoc_tolerance, 0.6, -10.0), 0);
        assert_eq!(assign_band(&cfg.catzoc, catzoc_tolerance, 50.0, -10.0), 3);
        let s = &cfg.s44[0];
        assert!((s44_tolerance(s, 20.0) - (0.15f64.powi(2) + 0.15f64.powi(2)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bands_must_loosen() {
        let mut cfg = HydroBandingConfig::default();
        cfg.catzoc.swap(0, 1);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let dup = HydroBandingConfig { catzoc: vec![Band::new("a", 1.0, 0.02), Band::new("b", 1.0, 0.02)], ..Default::default() };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn delta_histogram_is_one_bin() {
        let h = Histogram::auto(&[0.0; 50], 11).unwrap();
        assert_eq!(h.density.iter().filter(|d| **d > 0.0).count(), 1);
        assert_eq!(h.density[5], 1.0);
    }

    #[test]
    fn symmetric_samples_give_symmetric_histogram() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..200_000).map(|_| crate::rng::normal(&mut r)).collect();
        let h = Histogram::new(&v, -4.0, 4.0, 16).unwrap();
        for i in 0..8 {
            assert!((h.density[i] - h.density[15 - i]).abs() < 0.005);
        }
        assert!(h.mean().abs() < 0.01);
    }

    #[test]
    fn joint_histogram_mass() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        let h = Histogram2d::auto(&x, &y, 10, 5).unwrap();
        assert!((h.density.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // perfectly anti-correlated: mass only where high x meets low y
        assert_eq!(h.density[0], 0.0);
        assert!(h.density[9] > 0.0);
    }

    #[test]
    fn table_rows_split_whole_prediction() {
        let reference = raster(&[-1.0, -2.0, -3.0, -4.0]);
        let sfm = raster(&[-1.5, -9999.0, -3.5, -9999.0]);
        let whole = raster(&[-1.0, -2.5, -3.0, -4.5]);
        let combined = crate::train::combine_prediction(&sfm, &whole).unwrap();
        let p = Products { reference: &reference, sfm: Some(&sfm), corrected: Some(&sfm), whole: Some(&whole), combined: Some(&combined) };
        let rows = table_rows(&p, &DEFAULT_THRESHOLDS).unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ROW_LABELS.to_vec());
        assert_eq!(rows[5].count, rows[2].count + rows[3].count);
        assert_eq!(rows[3].stats.unwrap().rmse, 0.5);
        // combined over non-gap pixels is the survey itself
        let valid = sfm.mask();
        let a = compute_metrics("c", &combined, &reference, Some(&valid), &[]).unwrap();
        assert_eq!(a.stats, rows[1].stats);
    }

    #[test]
    fn depth_bins_partition_pixels() {
        let reference = raster(&[-1.0, -6.0, -12.0, -25.0]);
        let pred = raster(&[-1.5, -6.0, -11.0, -25.0]);
        let rows = binned_metrics("w", &pred, &reference, None, &default_depth_bins(), &[]).unwrap();
        assert_eq!(rows.iter().map(|r| r.1.count).collect::<Vec<_>>(), vec![1, 1, 1]);
        assert_eq!(rows[2].1.stats.unwrap().bias, 1.0);
    }

    #[test]
    fn averaging_runs() {
        let a = vec![MetricsRow::from_errors("w", &[1.0, -1.0], &[0.5])];
        let b = vec![MetricsRow::from_errors("w", &[3.0, -3.0], &[0.5])];
        let avg = average_rows(&[a, b]).unwrap();
        assert_eq!(avg[0].stats.unwrap().rmse, 2.0);
        assert_eq!(avg[0].exceedance, vec![(0.5, 100.0)]);
    }

    #[test]
    fn class_breakdown() {
        let reference = raster(&[-1.0, -2.0, -3.0]);
        let pred = raster(&[-1.0, -3.0, -3.0]);
        let rows = class_metrics(&pred, &reference, &[2, 7, 2], &[]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].1.count, 2);
        assert_eq!(rows[1].1.stats.unwrap().rmse, 1.0);
    }
}
