//! The pipeline stages the CLI strings together, callable in-process.

use bathy_core::metrics::{
    binned_metrics, class_metrics, coverage, hydro_banding, table_rows, average_rows, BandingReport, Histogram,
    Histogram2d, Products,
};
use bathy_core::network::ModelParams;
use bathy_core::raster::extract_patches;
use bathy_core::refraction::{generate_depth_pairs, DepthPairSet};
use bathy_core::svr::{grid_search_c, train_svr, LinearSvrModel, SvrTrainConfig};
use bathy_core::synth::{generate_scene, Scene};
use bathy_core::train::{predict_raster, train_from, TrainOutput, Validation};
use bathy_core::{DepthRaster, RgbRaster};

use crate::config::Settings;
use crate::error::{BathyError, Result};
use crate::formats::csv::ReportRow;

/// A synthetic scene plus refraction training pairs over its footprint.
pub fn synth(settings: &Settings) -> Result<(Scene, DepthPairSet)> {
    let scene = generate_scene(&settings.scene)?;
    let mut pc = settings.scene.pair_config(settings.pairs.grid);
    pc.noise_sigma = settings.pairs.noise_sigma;
    let pairs = generate_depth_pairs(&pc, settings.scene.cameras(), &settings.scene.interface)?;
    Ok((scene, pairs))
}

/// Fits the correction, choosing C by cross-validation when enabled.
pub fn fit_svr(pairs: &DepthPairSet, settings: &Settings) -> Result<LinearSvrModel> {
    let mut cfg: SvrTrainConfig = settings.svr.clone();
    if settings.svr_grid_search {
        cfg.c = grid_search_c(pairs, &cfg)?.best_c;
    }
    Ok(train_svr(pairs, &cfg)?)
}

/// Trains a fresh network on one image / depth pair.
pub fn train_model(
    image: &RgbRaster,
    dsm: &DepthRaster,
    settings: &Settings,
    init: Option<ModelParams>,
    reference: Option<&DepthRaster>,
) -> Result<TrainOutput> {
    let patches = extract_patches(image, dsm, settings.patch, settings.stride)?;
    let init = match init {
        Some(p) => p,
        None => ModelParams::init(&settings.net, settings.init_seed)?,
    };
    let validation = reference.map(|r| Validation { image, reference: r, patch: settings.predict_patch });
    Ok(train_from(init, &patches, &settings.train, validation)?)
}

pub fn predict(params: &ModelParams, image: &RgbRaster, settings: &Settings) -> Result<DepthRaster> {
    Ok(predict_raster(params, image, &settings.predict_config())?)
}

/// Inputs to `eval`. Several whole / combined predictions (one per training
/// seed) are averaged row by row.
#[derive(Clone, Copy, Debug)]
pub struct EvalInputs<'a> {
    pub reference: &'a DepthRaster,
    pub sfm: Option<&'a DepthRaster>,
    pub corrected: Option<&'a DepthRaster>,
    pub whole: &'a [DepthRaster],
    pub combined: &'a [DepthRaster],
    pub classes: Option<&'a [u32]>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub coverage: Vec<(String, f64)>,
}

fn rows_for(inputs: &EvalInputs, whole: Option<&DepthRaster>, combined: Option<&DepthRaster>, settings: &Settings) -> Result<Vec<ReportRow>> {
    let e = &settings.eval;
    let p = Products { reference: inputs.reference, sfm: inputs.sfm, corrected: inputs.corrected, whole, combined };
    let mut rows: Vec<ReportRow> = table_rows(&p, &e.thresholds)?.into_iter().map(ReportRow::all).collect();
    let gaps = p.gap_mask();
    let valid: Option<Vec<bool>> = gaps.as_ref().map(|g| g.iter().map(|x| !x).collect());
    let mut binned = |label: &str, r: Option<&DepthRaster>, region: Option<&[bool]>| -> Result<()> {
        if let Some(r) = r {
            for (bin, row) in binned_metrics(label, r, inputs.reference, region, &e.depth_bins, &e.thresholds)? {
                rows.push(ReportRow { group: bin.label(), row });
            }
        }
        Ok(())
    };
    binned("sfm", inputs.sfm, None)?;
    binned("corrected_sfm", inputs.corrected, None)?;
    if gaps.is_some() {
        binned("pred_non_gaps", whole, valid.as_deref())?;
        binned("pred_gaps", whole, gaps.as_deref())?;
    }
    binned("combined", combined, None)?;
    binned("whole", whole, None)?;
    if let (Some(classes), Some(w)) = (inputs.classes, whole) {
        for (c, row) in class_metrics(w, inputs.reference, classes, &e.thresholds)? {
            rows.push(ReportRow { group: format!("class_{c}"), row: bathy_core::metrics::MetricsRow { label: "whole".into(), ..row } });
        }
    }
    Ok(rows)
}

pub fn evaluate(inputs: &EvalInputs, settings: &Settings) -> Result<EvalReport> {
    let runs = inputs.whole.len().max(inputs.combined.len());
    if inputs.whole.len() > 1 && inputs.combined.len() > 1 && inputs.whole.len() != inputs.combined.len() {
        return Err(BathyError::Usage(format!(
            "{} whole and {} combined predictions; give one of each per run",
            inputs.whole.len(),
            inputs.combined.len()
        )));
    }
    let pick = |v: &'_ [DepthRaster], i: usize| -> Option<DepthRaster> { v.get(i).or(if v.len() == 1 { v.first() } else { None }).cloned() };
    let mut per_run = Vec::new();
    for i in 0..runs.max(1) {
        let (w, c) = (pick(inputs.whole, i), pick(inputs.combined, i));
        per_run.push(rows_for(inputs, w.as_ref(), c.as_ref(), settings)?);
    }
    let rows = if per_run.len() == 1 {
        per_run.pop().unwrap_or_default()
    } else {
        let groups: Vec<String> = per_run[0].iter().map(|r| r.group.clone()).collect();
        let plain: Vec<Vec<_>> = per_run.into_iter().map(|rs| rs.into_iter().map(|r| r.row).collect()).collect();
        average_rows(&plain)?.into_iter().zip(groups).map(|(row, group)| ReportRow { group, row }).collect()
    };
    let mut cov = Vec::new();
    if let Some(s) = inputs.sfm {
        cov.push(("sfm".into(), coverage(s)));
    }
    if let Some(c) = inputs.corrected {
        cov.push(("corrected_sfm".into(), coverage(c)));
    }
    if let Some(w) = inputs.whole.first() {
        cov.push(("whole".into(), coverage(w)));
    }
    if let Some(c) = inputs.combined.first() {
        cov.push(("combined".into(), coverage(c)));
    }
    Ok(EvalReport { rows, coverage: cov })
}

#[derive(Clone, Debug)]
pub struct Report {
    /// `(name, histogram of predicted - reference)` per supplied product.
    pub histograms: Vec<(String, Histogram)>,
    /// Reference depth (x) against predicted depth (y).
    pub joint: Histogram2d,
    pub banding: BandingReport,
}

fn differences(a: &DepthRaster, reference: &DepthRaster) -> Result<Vec<f64>> {
    Ok(bathy_core::metrics::paired_errors(a, reference, None)?.into_iter().map(|p| p.0).collect())
}

/// Difference histograms for every product, the depth scatter density of
/// the prediction, and its hydrographic banding.
pub fn report(
    reference: &DepthRaster,
    pred: &DepthRaster,
    others: &[(&str, &DepthRaster)],
    settings: &Settings,
) -> Result<Report> {
    let e = &settings.eval;
    let mut histograms = Vec::new();
    for (name, r) in [("pred", pred)].into_iter().chain(others.iter().copied()) {
        let d = differences(r, reference)?;
        let h = match e.hist_range {
            Some((lo, hi)) => Histogram::new(&d, lo, hi, e.hist_bins)?,
            None => Histogram::auto(&d, e.hist_bins)?,
        };
        histograms.push((name.to_string(), h));
    }
    let pairs = bathy_core::metrics::paired_errors(pred, reference, None)?;
    let xs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
    let joint = Histogram2d::auto(&xs, &ys, e.hist2d_bins, e.hist2d_bins)?;
    let banding = hydro_banding(pred, reference, None, &settings.banding)?;
    Ok(Report { histograms, joint, banding })
}
