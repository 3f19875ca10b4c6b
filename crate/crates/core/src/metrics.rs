//! Classification scores and colour-coded class maps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<u64>>,
    /// Recall per class; `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    pub average_accuracy: f64,
    pub kappa: f64,
    pub samples: u64,
}

/// Scores zero-based `predictions` against zero-based `labels`.
pub fn evaluate(predictions: &[usize], labels: &[usize], classes: usize) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("evaluate", format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= classes || t >= classes {
            return Err(Error::InvalidArgument(format!("class index {} out of range for {classes} classes", p.max(t))));
        }
        confusion[t][p] += 1;
    }
    report_from_confusion(confusion)
}

/// Derives every score from a square confusion matrix.
pub fn report_from_confusion(confusion: Vec<Vec<u64>>) -> Result<EvalReport> {
    let k = confusion.len();
    if confusion.iter().any(|row| row.len() != k) {
        return Err(Error::shape("evaluate", "confusion matrix is not square"));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let n = total as f64;
    let diagonal: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();

    let per_class_accuracy: Vec<Option<f64>> =
        (0..k).map(|i| (rows[i] > 0).then(|| confusion[i][i] as f64 / rows[i] as f64)).collect();
    let present: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
    let empty = k - present.len();
    if empty > 0 {
        log::warn!("{empty} class(es) have no test samples and are left out of the average accuracy");
    }
    let average_accuracy = present.iter().sum::<f64>() / present.len() as f64;

    let p_o = diagonal as f64 / n;
    let p_e = rows.iter().zip(&cols).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (n * n);
    // A single populated class in both truth and prediction agrees perfectly.
    let kappa = if p_e == 1.0 { 1.0 } else { (p_o - p_e) / (1.0 - p_e) };
    Ok(EvalReport { confusion, per_class_accuracy, overall_accuracy: p_o, average_accuracy, kappa, samples: total })
}

/// Colours of classes `1..=22`; class `0` (unlabeled) is black.
pub const PALETTE: [[u8; 3]; 23] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 255, 255],
    [100, 60, 160],
];

pub const MAX_MAP_CLASSES: usize = PALETTE.len() - 1;

/// Binary P6 pixmap of a class raster (`0` = unlabeled).
pub fn emit_map(raster: &[u16], height: usize, width: usize) -> Result<Vec<u8>> {
    if raster.len() != height * width || height == 0 || width == 0 {
        return Err(Error::shape("emit_map", format!("{} cells for a {height}x{width} map", raster.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * raster.len());
    for &c in raster {
        let colour = PALETTE
            .get(c as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("class {c} exceeds the {MAX_MAP_CLASSES}-colour palette")))?;
        out.extend_from_slice(colour);
    }
    Ok(out)
}

pub fn write_map(path: &Path, raster: &[u16], height: usize, width: usize) -> Result<()> {
    let bytes = emit_map(raster, height, width)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format { what: "pixmap", detail: detail.into() }
}

/// Inverse of [`emit_map`]: `(height, width, raster)`.
pub fn parse_map(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
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
            return Err(malformed("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| malformed("non-ASCII header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(malformed(format!("unsupported header {} / {}", fields[0], fields[3])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| malformed(format!("bad extent {s}")));
    let (width, height) = (parse(fields[1])?, parse(fields[2])?);
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != 3 * width * height {
        return Err(malformed(format!("{} raster bytes for {width}x{height}", body.len())));
    }
    let raster = body
        .chunks_exact(3)
        .map(|px| {
            PALETTE
                .iter()
                .position(|c| c == px)
                .map(|i| i as u16)
                .ok_or_else(|| malformed(format!("colour {px:?} is not in the palette")))
        })
        .collect::<Result<_>>()?;
    Ok((height, width, raster))
}
