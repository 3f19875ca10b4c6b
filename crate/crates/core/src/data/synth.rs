use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::HsiCube;
use crate::error::{Error, Result};

/// Minimum Euclidean distance between any two class signatures.
pub const MIN_SIGNATURE_DISTANCE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub seed: u64,
    /// Side of the square tiles that are dealt out to classes.
    #[serde(default = "default_tile")]
    pub tile: usize,
}

fn default_tile() -> usize {
    8
}

impl SynthSpec {
    pub fn new(classes: usize, bands: usize, height: usize, width: usize, noise: f64, seed: u64) -> Self {
        Self { classes, bands, height, width, noise, seed, tile: default_tile() }
    }
}

/// A smooth spectrum: offset plus two low-frequency sinusoids over the band axis.
fn signature(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let offset = rng.random_range(0.3..0.7);
    let waves: Vec<(f64, f64, f64)> =
        (0..2).map(|_| (rng.random_range(0.1..0.3), rng.random_range(0.3..1.5), rng.random_range(0.0..TAU))).collect();
    (0..bands)
        .map(|b| {
            let t = b as f64 / bands.max(2) as f64;
            offset + waves.iter().map(|(amp, freq, phase)| amp * (TAU * freq * t + phase).sin()).sum::<f64>()
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Class signatures drawn by rejection until all pairs are at least
/// [`MIN_SIGNATURE_DISTANCE`] apart.
pub fn class_signatures(classes: usize, bands: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while out.len() < classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidArgument(format!(
                "could not draw {classes} separable signatures over {bands} bands"
            )));
        }
        let s = signature(bands, rng);
        if out.iter().all(|o| distance(o, &s) >= MIN_SIGNATURE_DISTANCE) {
            out.push(s);
        }
    }
    Ok(out)
}

/// A fully labeled scene of square class tiles; each pixel is its class
/// signature plus i.i.d. Gaussian noise.
pub fn synth_scene(spec: &SynthSpec) -> Result<HsiCube> {
    let SynthSpec { classes, bands, height, width, noise, seed, tile } = *spec;
    if classes == 0 || classes > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!("invalid class count {classes}")));
    }
    if tile == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid noise level {noise}")));
    }
    let tiles_y = height.div_ceil(tile);
    let tiles_x = width.div_ceil(tile);
    if tiles_y * tiles_x < classes {
        return Err(Error::InvalidArgument(format!("{tiles_y}x{tiles_x} tiles cannot host {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signatures = class_signatures(classes, bands, &mut rng)?;
    let mut assignment: Vec<usize> = (0..tiles_y * tiles_x).map(|i| i % classes).collect();
    assignment.shuffle(&mut rng);

    let n = height * width;
    let mut labels = vec![0u16; n];
    for y in 0..height {
        for x in 0..width {
            labels[y * width + x] = assignment[(y / tile) * tiles_x + x / tile] as u16 + 1;
        }
    }
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut values = vec![0.0; bands * n];
    for p in 0..n {
        let sig = &signatures[labels[p] as usize - 1];
        for b in 0..bands {
            let e = if noise > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
            values[b * n + p] = sig[b] + e;
        }
    }
    let names = (1..=classes).map(|c| format!("class_{c}")).collect();
    HsiCube::new(bands, height, width, values, labels, names)
}
