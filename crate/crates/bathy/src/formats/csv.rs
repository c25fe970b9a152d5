//! CSV and plain-text report writers. Floats use shortest round-trip
//! formatting so reruns on the same inputs are byte-identical.

use std::fmt::Write as _;

use bathy_core::metrics::{BandingReport, Histogram, Histogram2d, MetricsRow};
use bathy_core::train::EpochRecord;

pub fn loss_csv(trace: &[EpochRecord]) -> String {
    let with_val = trace.iter().any(|r| r.val_rmse.is_some());
    let mut s = String::from(if with_val { "epoch,loss,lr,val_rmse\n" } else { "epoch,loss,lr\n" });
    for r in trace {
        let _ = write!(s, "{},{},{}", r.epoch, r.loss, r.lr);
        if with_val {
            let _ = write!(s, ",{}", r.val_rmse.map(|v| v.to_string()).unwrap_or_default());
        }
        s.push('\n');
    }
    s
}

/// A metrics row with the depth bin (or other grouping) it belongs to.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub group: String,
    pub row: MetricsRow,
}

impl ReportRow {
    pub fn all(row: MetricsRow) -> Self {
        Self { group: "all".into(), row }
    }
}

fn threshold_header(thresholds: &[f64]) -> Vec<String> {
    thresholds.iter().map(|t| format!("pct_gt_{t}m")).collect()
}

pub fn metrics_csv(rows: &[ReportRow], thresholds: &[f64]) -> String {
    let mut s = String::from("row,group,count,rmse,mae,std,bias");
    for h in threshold_header(thresholds) {
        s.push(',');
        s.push_str(&h);
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.row.label, r.group, r.row.count);
        match &r.row.stats {
            Some(st) => {
                let _ = write!(s, ",{},{},{},{}", st.rmse, st.mae, st.std, st.bias);
            }
            None => s.push_str(",,,,"),
        }
        for t in thresholds {
            let v = r.row.exceedance.iter().find(|e| e.0 == *t).map(|e| e.1.to_string()).unwrap_or_default();
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Fixed-width table for terminals.
pub fn metrics_table(rows: &[ReportRow], thresholds: &[f64], coverage: &[(String, f64)]) -> String {
    let mut s = String::from("error = predicted - reference (m, negative-down depths)\n");
    let _ = write!(s, "{:<14} {:<8} {:>7} {:>8} {:>8} {:>8} {:>8}", "row", "group", "count", "rmse", "mae", "std", "bias");
    for t in thresholds {
        let _ = write!(s, " {:>9}", format!(">{t}m %"));
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<14} {:<8} {:>7}", r.row.label, r.group, r.row.count);
        match &r.row.stats {
            Some(st) => {
                let _ = write!(s, " {:>8.3} {:>8.3} {:>8.3} {:>8.3}", st.rmse, st.mae, st.std, st.bias);
                for (_, pct) in &r.row.exceedance {
                    let _ = write!(s, " {pct:>9.2}");
                }
            }
            None => s.push_str("    (empty region)"),
        }
        s.push('\n');
    }
    for (label, pct) in coverage {
        let _ = writeln!(s, "coverage {label}: {pct:.2}%");
    }
    s
}

pub fn coverage_csv(coverage: &[(String, f64)]) -> String {
    let mut s = String::from("raster,coverage_pct\n");
    for (l, c) in coverage {
        let _ = writeln!(s, "{l},{c}");
    }
    s
}

pub fn hist_csv(h: &Histogram) -> String {
    let mut s = String::from("bin_lo,bin_hi,density\n");
    for (i, d) in h.density.iter().enumerate() {
        let (lo, hi) = h.edges(i);
        let _ = writeln!(s, "{lo},{hi},{d}");
    }
    s
}

pub fn hist2d_csv(h: &Histogram2d) -> String {
    let mut s = String::from("x_lo,x_hi,y_lo,y_hi,density\n");
    let (wx, wy) = ((h.x_range.1 - h.x_range.0) / h.nx as f64, (h.y_range.1 - h.y_range.0) / h.ny as f64);
    for j in 0..h.ny {
        for i in 0..h.nx {
            let (x0, y0) = (h.x_range.0 + i as f64 * wx, h.y_range.0 + j as f64 * wy);
            let _ = writeln!(s, "{x0},{},{y0},{},{}", x0 + wx, y0 + wy, h.density[j * h.nx + i]);
        }
    }
    s
}

pub fn banding_csv(r: &BandingReport) -> String {
    let mut s = String::from("standard,band,percent\n");
    for (std, shares) in [("CATZOC", &r.catzoc), ("S-44", &r.s44)] {
        for (name, pct) in &shares.shares {
            let _ = writeln!(s, "{std},{name},{pct}");
        }
    }
    s
}
