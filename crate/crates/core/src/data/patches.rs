use super::HsiCube;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled `[bands, w, w]` patches, one per centre pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub bands: usize,
    pub samples: Vec<Tensor>,
    /// Zero-based class index (`label − 1`); unlabeled centres carry `None`.
    pub labels: Vec<Option<usize>>,
    /// Row-major pixel index of each centre.
    pub pixels: Vec<usize>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keeps the patches whose centre pixel index is in `pixels` (in that order).
    pub fn select(&self, pixels: &[usize]) -> Result<PatchSet> {
        let lookup: std::collections::HashMap<usize, usize> =
            self.pixels.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let mut out = PatchSet {
            patch_size: self.patch_size,
            bands: self.bands,
            samples: Vec::with_capacity(pixels.len()),
            labels: Vec::with_capacity(pixels.len()),
            pixels: Vec::with_capacity(pixels.len()),
        };
        for &p in pixels {
            let &i = lookup.get(&p).ok_or_else(|| Error::InvalidArgument(format!("pixel {p} has no patch")))?;
            out.samples.push(self.samples[i].clone());
            out.labels.push(self.labels[i]);
            out.pixels.push(p);
        }
        Ok(out)
    }

    /// Class indices, failing on unlabeled patches.
    pub fn class_indices(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .zip(&self.pixels)
            .map(|(l, p)| l.ok_or_else(|| Error::InvalidArgument(format!("pixel {p} is unlabeled"))))
            .collect()
    }
}

/// Mirror (reflect-101) index: `-1 → 1`, `n → n − 2`; periodic for large offsets.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn patch_at(cube: &HsiCube, pixel: usize, w: usize) -> Tensor {
    let (h, width) = (cube.height(), cube.width());
    let (cy, cx) = ((pixel / width) as isize, (pixel % width) as isize);
    // Even widths put the centre at offset w/2 − 1.
    let off = ((w - 1) / 2) as isize;
    let mut data = Vec::with_capacity(cube.bands() * w * w);
    for b in 0..cube.bands() {
        for dy in 0..w as isize {
            let y = reflect_index(cy - off + dy, h);
            for dx in 0..w as isize {
                let x = reflect_index(cx - off + dx, width);
                data.push(cube.value(b, y, x));
            }
        }
    }
    Tensor::new([cube.bands(), w, w], data).expect("patch extents")
}

fn extract(cube: &HsiCube, w: usize, pixels: impl Iterator<Item = usize>) -> Result<PatchSet> {
    if w == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let mut set =
        PatchSet { patch_size: w, bands: cube.bands(), samples: Vec::new(), labels: Vec::new(), pixels: Vec::new() };
    for p in pixels {
        set.samples.push(patch_at(cube, p, w));
        let l = cube.labels()[p];
        set.labels.push((l > 0).then(|| l as usize - 1));
        set.pixels.push(p);
    }
    Ok(set)
}

/// One patch per labeled pixel, in row-major pixel order.
pub fn extract_patches(cube: &HsiCube, w: usize) -> Result<PatchSet> {
    let labels = cube.labels().to_vec();
    extract(cube, w, (0..cube.pixels()).filter(move |&p| labels[p] > 0))
}

/// One patch per pixel, labeled or not (for full classification maps).
pub fn extract_all_patches(cube: &HsiCube, w: usize) -> Result<PatchSet> {
    extract(cube, w, 0..cube.pixels())
}
