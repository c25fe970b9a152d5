//! Binary portable pixmap (P6, maxval 255). The ground sampling distance is
//! carried in a `# gsd <meters>` header comment; files without it read as
//! 1 m/pixel.

use std::path::Path;

use bathy_core::RgbRaster;

use crate::error::{read_file, write_file, BathyError, Result};

pub fn ppm_to_bytes(r: &RgbRaster) -> Vec<u8> {
    let mut out = format!("P6\n# gsd {}\n{} {}\n255\n", r.gsd(), r.width(), r.height()).into_bytes();
    out.extend_from_slice(r.bytes());
    out
}

pub fn parse_ppm(bytes: &[u8], origin: &str) -> Result<RgbRaster> {
    let mut pos = 0usize;
    let mut line = 1usize;
    let mut gsd = 1.0;
    let err = |line: usize, msg: String| BathyError::parse(origin, line, msg);
    // header tokens are separated by whitespace and may be interleaved with comments
    let next_token = |pos: &mut usize, line: &mut usize, gsd: &mut f64| -> Result<String> {
        loop {
            match bytes.get(*pos) {
                None => return Err(err(*line, "truncated header".into())),
                Some(b'#') => {
                    let end = bytes[*pos..].iter().position(|b| *b == b'\n').map_or(bytes.len(), |e| *pos + e);
                    let comment = String::from_utf8_lossy(&bytes[*pos + 1..end]);
                    let mut parts = comment.split_whitespace();
                    if parts.next() == Some("gsd") {
                        let v = parts.next().unwrap_or_default();
                        *gsd = v.parse().map_err(|_| err(*line, format!("bad gsd `{v}`")))?;
                    }
                    *pos = end;
                }
                Some(b) if b.is_ascii_whitespace() => {
                    if *b == b'\n' {
                        *line += 1;
                    }
                    *pos += 1;
                }
                Some(_) => break,
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos, &mut line, &mut gsd)?;
    if magic != "P6" {
        return Err(err(1, format!("wrong magic `{magic}`, expected P6")));
    }
    let num = |what: &str, pos: &mut usize, line: &mut usize, gsd: &mut f64| -> Result<usize> {
        let t = next_token(pos, line, gsd)?;
        t.parse().map_err(|_| err(*line, format!("bad {what} `{t}`")))
    };
    let w = num("width", &mut pos, &mut line, &mut gsd)?;
    let h = num("height", &mut pos, &mut line, &mut gsd)?;
    let maxval = num("maxval", &mut pos, &mut line, &mut gsd)?;
    if maxval != 255 {
        return Err(err(line, format!("maxval must be 255, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(err(line, "truncated header".into()));
    }
    pos += 1;
    let need = w * h * 3;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(err(line, format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(err(line, format!("{} trailing bytes after payload", payload.len() - need)));
    }
    RgbRaster::new(w, h, gsd, payload.to_vec()).map_err(|e| err(line, e.to_string()))
}

pub fn read_ppm(path: &Path) -> Result<RgbRaster> {
    parse_ppm(&read_file(path)?, &path.display().to_string())
}

pub fn write_ppm(path: &Path, r: &RgbRaster) -> Result<()> {
    write_file(path, &ppm_to_bytes(r))
}
