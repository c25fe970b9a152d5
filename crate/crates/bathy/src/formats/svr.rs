//! Fitted refraction-correction model as text:
//!
//! ```text
//! svr v1
//! w 1.3369
//! b -0.0121
//! ```

use std::path::Path;

use bathy_core::refraction::DepthPairSet;
use bathy_core::svr::LinearSvrModel;

use crate::error::{read_file, write_file, BathyError, Result};

pub fn svr_to_string(m: &LinearSvrModel) -> String {
    format!("svr v1\nw {}\nb {}\n", m.w, m.b)
}

pub fn parse_svr(text: &str, origin: &str) -> Result<LinearSvrModel> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == "svr v1" => {}
        Some((i, l)) => return Err(BathyError::parse(origin, i + 1, format!("expected `svr v1`, found `{}`", l.trim()))),
        None => return Err(BathyError::parse(origin, 0, "empty file")),
    }
    let mut field = |key: &str| -> Result<f64> {
        let (i, l) = lines.next().ok_or_else(|| BathyError::parse(origin, 0, format!("missing `{key}`")))?;
        match l.split_whitespace().collect::<Vec<_>>()[..] {
            [k, v] if k == key => v.parse().map_err(|_| BathyError::parse(origin, i + 1, format!("bad `{key}` value `{v}`"))),
            _ => Err(BathyError::parse(origin, i + 1, format!("expected `{key} <value>`"))),
        }
    };
    let w = field("w")?;
    let b = field("b")?;
    if !(w.is_finite() && b.is_finite()) {
        return Err(BathyError::parse(origin, 0, "coefficients must be finite"));
    }
    Ok(LinearSvrModel { w, b })
}

pub fn read_svr(path: &Path) -> Result<LinearSvrModel> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| BathyError::parse(path.display().to_string(), 0, "not UTF-8 text"))?;
    parse_svr(&text, &path.display().to_string())
}

pub fn write_svr(path: &Path, m: &LinearSvrModel) -> Result<()> {
    write_file(path, svr_to_string(m).as_bytes())
}

/// Depth pairs as CSV with header `apparent,true`.
pub fn pairs_to_csv(p: &DepthPairSet) -> String {
    let mut s = String::from("apparent,true\n");
    for (z0, z) in &p.pairs {
        s.push_str(&format!("{z0},{z}\n"));
    }
    s
}

pub fn parse_pairs_csv(text: &str, origin: &str) -> Result<DepthPairSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == "apparent,true" => {}
        _ => return Err(BathyError::parse(origin, 1, "expected header `apparent,true`")),
    }
    let mut pairs = Vec::new();
    for (i, l) in lines {
        let bad = || BathyError::parse(origin, i + 1, format!("expected two numbers, found `{}`", l.trim()));
        let (a, b) = l.split_once(',').ok_or_else(bad)?;
        pairs.push((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?));
    }
    DepthPairSet::new(pairs).map_err(|e| BathyError::parse(origin, 0, e.to_string()))
}

pub fn read_pairs(path: &Path) -> Result<DepthPairSet> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| BathyError::parse(path.display().to_string(), 0, "not UTF-8 text"))?;
    parse_pairs_csv(&text, &path.display().to_string())
}
