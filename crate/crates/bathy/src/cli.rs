//! Command-line entry points. Exit codes: 0 success, 2 usage error,
//! 1 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use bathy_core::train::combine_prediction;
use bathy_core::DepthRaster;

use crate::config::Settings;
use crate::error::{write_file, BathyError, Result};
use crate::formats::csv::{banding_csv, coverage_csv, hist2d_csv, hist_csv, loss_csv, metrics_csv, metrics_table};
use crate::formats::svr::pairs_to_csv;
use crate::formats::{load_checkpoint, read_grid, read_pairs, read_ppm, read_svr, save_checkpoint, write_grid, write_ppm, write_svr};
use crate::pipeline::{self, EvalInputs};

#[derive(Parser, Debug)]
#[command(name = "bathy", version, about = "Refraction-corrected, gap-filled bathymetry from aerial imagery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the stage being run
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene: image.ppm, sfm.grid, truth.grid, apparent.grid, pairs.csv
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the refraction correction on apparent/true depth pairs
    SvrTrain {
        #[command(flatten)]
        common: Common,
        /// CSV with header `apparent,true`
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a fitted correction to a gappy DSM
    Correct {
        #[arg(long)]
        svr: PathBuf,
        #[arg(long)]
        dsm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the depth network; writes model.sbun and loss.csv
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        /// Supervision depths (gaps are ignored)
        #[arg(long)]
        dsm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out reference for per-epoch validation RMSE; never trained on
        #[arg(long)]
        val_ref: Option<PathBuf>,
        /// Continue from a checkpoint instead of a fresh initialization
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Predict depths for a whole image
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep survey depths and fill only their gaps from a prediction
    Combine {
        #[arg(long)]
        dsm: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy table against a reference; writes metrics.csv, metrics.txt, coverage.csv
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        sfm: Option<PathBuf>,
        #[arg(long)]
        corrected: Option<PathBuf>,
        /// Whole prediction; repeat once per training seed to average
        #[arg(long)]
        whole: Vec<PathBuf>,
        /// Combined prediction; repeat once per training seed to average
        #[arg(long)]
        combined: Vec<PathBuf>,
        /// Number of seed runs being averaged; must match the repeats
        #[arg(long)]
        seeds: Option<usize>,
        /// Integer class raster (e.g. habitat) for a per-class breakdown
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Difference histograms, depth scatter density and CATZOC / S-44 banding
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        sfm: Option<PathBuf>,
        #[arg(long)]
        corrected: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn settings(common: &Common) -> Result<Settings> {
    Settings::load(common.config.as_deref())
}

fn out_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    write_file(&dir.join(name), text.as_bytes())
}

fn class_raster(path: &Path) -> Result<Vec<u32>> {
    let g = read_grid(path)?;
    (0..g.len())
        .map(|i| match g.value(i) {
            Some(v) if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 => Ok(v as u32),
            Some(v) => Err(BathyError::Usage(format!("{}: class value {v} is not a non-negative integer", path.display()))),
            None => Err(BathyError::Usage(format!("{}: class raster has nodata cells", path.display()))),
        })
        .collect()
}

fn rasters(paths: &[PathBuf]) -> Result<Vec<DepthRaster>> {
    paths.iter().map(|p| read_grid(p)).collect()
}

/// Runs one subcommand. Human-readable output goes to `log`.
pub fn execute(cli: Cli, log: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let mut s = settings(&common)?;
            if let Some(seed) = common.seed {
                s.scene.seed = seed;
            }
            let (scene, pairs) = pipeline::synth(&s)?;
            write_ppm(&out.join("image.ppm"), &scene.image)?;
            write_grid(&out.join("sfm.grid"), &scene.sfm)?;
            write_grid(&out.join("truth.grid"), &scene.truth)?;
            write_grid(&out.join("apparent.grid"), &scene.apparent)?;
            out_file(&out, "pairs.csv", &pairs_to_csv(&pairs))?;
            let _ = writeln!(log, "scene {}x{}, gap fraction {:.3}", scene.image.width(), scene.image.height(), scene.gap_fraction);
        }
        Command::SvrTrain { common, pairs, out } => {
            let mut s = settings(&common)?;
            if let Some(seed) = common.seed {
                s.svr.seed = seed;
            }
            let m = pipeline::fit_svr(&read_pairs(&pairs)?, &s)?;
            write_svr(&out, &m)?;
            let _ = writeln!(log, "w {} b {}", m.w, m.b);
        }
        Command::Correct { svr, dsm, out } => {
            let m = read_svr(&svr)?;
            write_grid(&out, &m.correct_raster(&read_grid(&dsm)?))?;
        }
        Command::Train { common, image, dsm, out, val_ref, init } => {
            let mut s = settings(&common)?;
            if let Some(seed) = common.seed {
                s.train.seed = seed;
                s.init_seed = seed;
            }
            let reference = val_ref.as_deref().map(read_grid).transpose()?;
            let init = init.as_deref().map(load_checkpoint).transpose()?;
            let o = pipeline::train_model(&read_ppm(&image)?, &read_grid(&dsm)?, &s, init, reference.as_ref())?;
            save_checkpoint(&out.join("model.sbun"), &o.params)?;
            out_file(&out, "loss.csv", &loss_csv(&o.trace))?;
            if let Some(last) = o.trace.last() {
                let _ = writeln!(log, "epochs {} final loss {:.6} skipped patches {}", o.trace.len(), last.loss, o.skipped);
            }
        }
        Command::Predict { common, model, image, out } => {
            let s = settings(&common)?;
            let params = load_checkpoint(&model)?;
            write_grid(&out, &pipeline::predict(&params, &read_ppm(&image)?, &s)?)?;
        }
        Command::Combine { dsm, pred, out } => {
            write_grid(&out, &combine_prediction(&read_grid(&dsm)?, &read_grid(&pred)?)?)?;
        }
        Command::Eval { common, reference, sfm, corrected, whole, combined, seeds, classes, out } => {
            let s = settings(&common)?;
            if let Some(k) = seeds {
                let runs = whole.len().max(combined.len());
                if k == 0 || runs != k {
                    return Err(BathyError::Usage(format!("--seeds {k} but {runs} prediction runs were given")));
                }
            }
            let reference = read_grid(&reference)?;
            let sfm = sfm.as_deref().map(read_grid).transpose()?;
            let corrected = corrected.as_deref().map(read_grid).transpose()?;
            let (whole, combined) = (rasters(&whole)?, rasters(&combined)?);
            let classes = classes.as_deref().map(class_raster).transpose()?;
            let inputs = EvalInputs {
                reference: &reference,
                sfm: sfm.as_ref(),
                corrected: corrected.as_ref(),
                whole: &whole,
                combined: &combined,
                classes: classes.as_deref(),
            };
            let r = pipeline::evaluate(&inputs, &s)?;
            let table = metrics_table(&r.rows, &s.eval.thresholds, &r.coverage);
            out_file(&out, "metrics.csv", &metrics_csv(&r.rows, &s.eval.thresholds))?;
            out_file(&out, "metrics.txt", &table)?;
            out_file(&out, "coverage.csv", &coverage_csv(&r.coverage))?;
            let _ = write!(log, "{table}");
        }
        Command::Report { common, reference, pred, sfm, corrected, out } => {
            let s = settings(&common)?;
            let reference = read_grid(&reference)?;
            let pred = read_grid(&pred)?;
            let sfm = sfm.as_deref().map(read_grid).transpose()?;
            let corrected = corrected.as_deref().map(read_grid).transpose()?;
            let mut others = Vec::new();
            if let Some(r) = sfm.as_ref() {
                others.push(("sfm", r));
            }
            if let Some(r) = corrected.as_ref() {
                others.push(("corrected_sfm", r));
            }
            let r = pipeline::report(&reference, &pred, &others, &s)?;
            for (name, h) in &r.histograms {
                let file = if name == "pred" { "hist.csv".to_string() } else { format!("hist_{name}.csv") };
                out_file(&out, &file, &hist_csv(h))?;
                let _ = writeln!(log, "{name}: mean difference {:.3} m over {} pixels (predicted - reference)", h.mean(), h.count);
            }
            out_file(&out, "hist2d.csv", &hist2d_csv(&r.joint))?;
            out_file(&out, "banding.csv", &banding_csv(&r.banding))?;
            for (std, shares) in [("CATZOC", &r.banding.catzoc), ("S-44", &r.banding.s44)] {
                let parts: Vec<String> = shares.shares.iter().map(|(n, p)| format!("{n} {p:.1}%")).collect();
                let _ = writeln!(log, "{std}: {}", parts.join(", "));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e @ BathyError::Usage(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
