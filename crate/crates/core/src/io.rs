//! Artifact formats: sparse spike rasters, PGM images, dense matrices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::encoding::SpikeTrain;
use crate::error::{Error, Result};

const RASTER_TAG: &str = "# spike-raster";

/// Header `# spike-raster steps=T features=F`, then `t,feature` rows for every spike.
pub fn raster_to_csv(s: &SpikeTrain) -> String {
    let mut out = format!("{RASTER_TAG} steps={} features={}\nt,feature\n", s.steps(), s.features());
    for t in 0..s.steps() {
        for f in 0..s.features() {
            if s.get(t, f) == 1 {
                let _ = writeln!(out, "{t},{f}");
            }
        }
    }
    out
}

pub fn raster_from_csv(text: &str) -> Result<SpikeTrain> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let rest = header
        .strip_prefix(RASTER_TAG)
        .ok_or_else(|| Error::Format("missing spike-raster header".into()))?;
    let (mut steps, mut features) = (None, None);
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("steps", v)) => steps = v.parse().ok(),
            Some(("features", v)) => features = v.parse().ok(),
            _ => return Err(Error::Format(format!("bad raster header field `{kv}`"))),
        }
    }
    let (Some(steps), Some(features)) = (steps, features) else {
        return Err(Error::Format("raster header needs steps and features".into()));
    };
    if lines.next().map(str::trim) != Some("t,feature") {
        return Err(Error::Format("raster column header must be `t,feature`".into()));
    }
    let mut s = SpikeTrain::zeros(steps, features);
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("bad raster row {}: `{line}`", i + 3));
        let (t, f) = line.split_once(',').ok_or_else(bad)?;
        let t: usize = t.trim().parse().map_err(|_| bad())?;
        let f: usize = f.trim().parse().map_err(|_| bad())?;
        if t >= steps || f >= features {
            return Err(bad());
        }
        s.set(t, f, true);
    }
    Ok(s)
}

pub fn write_raster(path: &Path, s: &SpikeTrain) -> Result<()> {
    fs::write(path, raster_to_csv(s)).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<SpikeTrain> {
    raster_from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Maps `[0, 1]` to `0..=255` with rounding; out-of-range values saturate.
pub fn to_gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary 8-bit PGM (P5).
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Dimension(format!(
            "{width}x{height} image needs {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, pgm_bytes(width, height, pixels)?).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("malformed PGM".into());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data.to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    parse_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// `rows × cols` matrix as CSV with round-trip float formatting.
pub fn matrix_to_csv(rows: usize, cols: usize, data: &[f64]) -> String {
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..][..cols].iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| Error::Format(format!("bad value on line {}", i + 1))))
            .collect::<Result<_>>()?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Format(format!("ragged matrix row on line {}", i + 1)));
        }
        data.extend(vals);
        rows += 1;
    }
    Ok((rows, cols.unwrap_or(0), data))
}
