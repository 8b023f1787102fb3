//! On-disk formats for square/rectangular real matrices.
//!
//! * binary: `u32` rows, `u32` cols (little-endian), then `rows·cols` `f32` LE values row-major
//! * CSV: one row per line, no header
//! * PGM: binary `P5`, 8-bit, min-max scaled (a constant matrix maps to 0)

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_f32(values: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let header = |i: usize| -> Result<usize> {
        let b: [u8; 4] = bytes
            .get(i..i + 4)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| Error::Data("matrix file shorter than its header".into()))?;
        Ok(u32::from_le_bytes(b) as usize)
    };
    let (rows, cols) = (header(0)?, header(4)?);
    let body = &bytes[8..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Data(format!(
            "matrix body has {} bytes, header says {rows}x{cols}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((values, rows, cols))
}

pub fn to_csv(values: &[f64], cols: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn to_pgm(values: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let (lo, hi) = min_max(values);
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Writes `values` to `path`, format chosen by extension (`bin`, `csv`, `pgm`).
pub fn write_matrix(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => to_csv(values, cols).into_bytes(),
        Some("pgm") => to_pgm(values, rows, cols),
        Some("bin") => encode_f32(values, rows, cols),
        other => {
            return Err(Error::Parameter(format!(
                "unsupported matrix format {other:?}; use .bin, .csv or .pgm"
            )))
        }
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
