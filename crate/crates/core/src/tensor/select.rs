use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Fraction of entries per attention row kept by token selection, in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SelectionRate(f64);

impl SelectionRate {
    pub const DENSE: SelectionRate = SelectionRate(1.0);

    pub fn new(k: f64) -> Result<Self> {
        if !(k > 0.0 && k <= 1.0) {
            return Err(Error::InvalidArgument(format!("selection rate must lie in (0, 1], got {k}")));
        }
        Ok(Self(k))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `ceil(k · n)`, immune to representation error such as `0.6 · 5 = 3.0000000000000004`.
    pub fn retained(self, n: usize) -> usize {
        let exact = self.0 * n as f64;
        let m = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
        m.clamp(1, n)
    }
}

impl TryFrom<f64> for SelectionRate {
    type Error = Error;

    fn try_from(k: f64) -> Result<Self> {
        Self::new(k)
    }
}

impl From<SelectionRate> for f64 {
    fn from(k: SelectionRate) -> f64 {
        k.0
    }
}

/// Which entries of a `[rows, cols]` score matrix survived top-k selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    /// Per row, gap between the smallest kept and the largest dropped score.
    margins: Vec<f64>,
}

impl SelectionMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.cols + col]
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    pub fn retained_in_row(&self, row: usize) -> usize {
        self.keep[row * self.cols..(row + 1) * self.cols].iter().filter(|&&k| k).count()
    }

    /// `INFINITY` when nothing was dropped.
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Keeps exactly `ceil(k · cols)` entries per row: the largest scores, with
/// ties at the threshold going to the lowest column index. Every other entry
/// becomes `-inf`; kept entries keep their original values.
pub fn topk_row_threshold(attn: &Tensor, k: SelectionRate) -> Result<(Tensor, SelectionMask)> {
    attn.expect_dims(2, "topk_row_threshold")?;
    let (rows, cols) = (attn.shape()[0], attn.shape()[1]);
    let m = k.retained(cols);
    let mut out = attn.clone();
    let mut keep = vec![true; rows * cols];
    let mut margins = vec![f64::INFINITY; rows];
    if m < cols {
        let mut order: Vec<usize> = Vec::with_capacity(cols);
        for r in 0..rows {
            let row = &attn.data()[r * cols..(r + 1) * cols];
            order.clear();
            order.extend(0..cols);
            order.sort_by(|&a, &b| match row[b].total_cmp(&row[a]) {
                Ordering::Equal => a.cmp(&b),
                other => other,
            });
            for &dropped in &order[m..] {
                keep[r * cols + dropped] = false;
                out.data_mut()[r * cols + dropped] = f64::NEG_INFINITY;
            }
            margins[r] = row[order[m - 1]] - row[order[m]];
        }
    }
    Ok((out, SelectionMask { rows, cols, keep, margins }))
}

/// The mask is a constant: gradient passes through kept entries and is zero elsewhere.
pub fn topk_backward(mask: &SelectionMask, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != [mask.rows, mask.cols] {
        return Err(Error::shape(
            "topk_backward",
            format!("gradient {:?} for a {}x{} mask", grad_out.shape(), mask.rows, mask.cols),
        ));
    }
    Ok(Tensor::from_fn([mask.rows, mask.cols], |i| if mask.keep[i] { grad_out.data()[i] } else { 0.0 }))
}

/// Row-wise softmax with max subtraction; `-inf` entries map to exactly zero.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.expect_dims(2, "softmax_rows")?;
    let cols = x.shape()[1];
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Numerical(format!("softmax row {r} has no finite entry (empty selection)")));
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Takes the forward *output* `y`.
pub fn softmax_rows_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    y.expect_dims(2, "softmax_rows_backward")?;
    y.expect_same_shape(grad_out, "softmax_rows_backward")?;
    let cols = y.shape()[1];
    let mut gx = Tensor::zeros(y.shape().to_vec());
    for ((gx_row, y_row), dy_row) in
        gx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)).zip(grad_out.data().chunks(cols))
    {
        let inner: f64 = y_row.iter().zip(dy_row).map(|(a, b)| a * b).sum();
        for ((g, &s), &d) in gx_row.iter_mut().zip(y_row).zip(dy_row) {
            *g = s * (d - inner);
        }
    }
    Ok(gx)
}
