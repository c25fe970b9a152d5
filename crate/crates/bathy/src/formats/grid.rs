//! ASCII depth grid: a four-line header followed by row-major values.
//!
//! ```text
//! ncols 2
//! nrows 2
//! cellsize 0.25
//! nodata_value -9999
//! -1.5 -2
//! -9999 -3.25
//! ```
//!
//! Values are written in shortest round-trip form so a read/write cycle is
//! exact. `NaN` is accepted as a nodata sentinel.

use std::fmt::Write as _;
use std::path::Path;

use bathy_core::DepthRaster;

use crate::error::{read_file, write_file, BathyError, Result};

const HEADER: [&str; 4] = ["ncols", "nrows", "cellsize", "nodata_value"];

pub fn grid_to_string(r: &DepthRaster) -> String {
    let mut s = format!("ncols {}\nnrows {}\ncellsize {}\nnodata_value {}\n", r.width(), r.height(), r.gsd(), r.nodata());
    for row in r.raw_values().chunks(r.width()) {
        let mut first = true;
        for v in row {
            if !first {
                s.push(' ');
            }
            first = false;
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_grid(text: &str, origin: &str) -> Result<DepthRaster> {
    let err = |line: usize, msg: String| BathyError::parse(origin, line, msg);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    let mut header = [0.0f64; 4];
    for (k, key) in HEADER.iter().enumerate() {
        let (n, line) = lines.next().ok_or_else(|| err(0, format!("missing header field `{key}`")))?;
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or_default();
        if !name.eq_ignore_ascii_case(key) {
            return Err(err(n, format!("expected `{key}`, found `{name}`")));
        }
        let value = parts.next().ok_or_else(|| err(n, format!("`{key}` has no value")))?;
        if parts.next().is_some() {
            return Err(err(n, format!("trailing text after `{key}`")));
        }
        header[k] = value.parse().map_err(|_| err(n, format!("bad `{key}` value `{value}`")))?;
    }
    let dim = |v: f64, n: &str| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(err(1, format!("`{n}` must be a positive integer, got {v}")))
        }
    };
    let (w, h) = (dim(header[0], "ncols")?, dim(header[1], "nrows")?);
    let mut values = Vec::with_capacity(w * h);
    let mut last = 4;
    for (n, line) in lines {
        last = n;
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| err(n, format!("bad value `{tok}`")))?;
            values.push(v);
        }
        if values.len() > w * h {
            return Err(err(n, format!("more than {} values", w * h)));
        }
    }
    if values.len() != w * h {
        return Err(err(last, format!("expected {} values ({w}x{h}), found {}", w * h, values.len())));
    }
    DepthRaster::new(w, h, header[2], values, header[3]).map_err(|e| err(0, e.to_string()))
}

pub fn read_grid(path: &Path) -> Result<DepthRaster> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| BathyError::parse(path.display().to_string(), 0, "not UTF-8 text"))?;
    parse_grid(&text, &path.display().to_string())
}

pub fn write_grid(path: &Path, r: &DepthRaster) -> Result<()> {
    write_file(path, grid_to_string(r).as_bytes())
}
