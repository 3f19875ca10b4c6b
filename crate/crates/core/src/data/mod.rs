//! Hyperspectral scenes: containers, band scaling, PCA, patches and splits.

mod patches;
mod pca;
mod scene;
mod split;
mod synth;

pub use patches::{extract_all_patches, extract_patches, reflect_index, PatchSet};
pub use pca::{fit_pca, PcaModel, PCA_MAX_ITERATIONS, PCA_TOLERANCE};
pub use scene::{read_scene, write_scene, SceneHeader, SCENE_HEADER};
pub use split::{stratified_split, Split, SplitSpec};
pub use synth::{class_signatures, synth_scene, SynthSpec, MIN_SIGNATURE_DISTANCE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `bands × height × width` scene with a ground-truth raster
/// (`0` = unlabeled, `1..=K` = classes).
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    bands: usize,
    height: usize,
    width: usize,
    /// Band-major values, index `(b·H + y)·W + x`.
    values: Vec<f64>,
    labels: Vec<u16>,
    class_names: Vec<String>,
}

impl HsiCube {
    pub fn new(
        bands: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
        labels: Vec<u16>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument("scene extents must be positive".into()));
        }
        if values.len() != bands * height * width {
            return Err(Error::shape("HsiCube", format!("{} values for {bands}x{height}x{width}", values.len())));
        }
        if labels.len() != height * width {
            return Err(Error::shape("HsiCube", format!("{} labels for {height}x{width}", labels.len())));
        }
        let k = class_names.len();
        if let Some(bad) = labels.iter().find(|&&l| l as usize > k) {
            return Err(Error::InvalidArgument(format!("label {bad} exceeds class count {k}")));
        }
        Ok(Self { bands, height, width, values, labels, class_names })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn value(&self, band: usize, y: usize, x: usize) -> f64 {
        self.values[(band * self.height + y) * self.width + x]
    }

    /// Spectrum of pixel `p` (row-major pixel index).
    pub fn spectrum(&self, p: usize) -> Vec<f64> {
        (0..self.bands).map(|b| self.values[b * self.pixels() + p]).collect()
    }

    pub fn labeled_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.bands, self.height, self.width], self.values.clone())
            .expect("extents validated at construction")
    }

    /// Same raster and classes, new band values.
    pub fn with_values(&self, bands: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(bands, self.height, self.width, values, self.labels.clone(), self.class_names.clone())
    }
}

/// Per-band affine map onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandScaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl BandScaling {
    pub fn fit(cube: &HsiCube) -> Self {
        let n = cube.pixels();
        let (min, max) = (0..cube.bands())
            .map(|b| {
                let band = &cube.values()[b * n..(b + 1) * n];
                band.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
            })
            .unzip();
        Self { min, max }
    }

    /// Constant bands map to zero.
    pub fn apply(&self, cube: &HsiCube) -> Result<HsiCube> {
        if self.min.len() != cube.bands() {
            return Err(Error::shape(
                "BandScaling",
                format!("{} bands fitted, scene has {}", self.min.len(), cube.bands()),
            ));
        }
        let n = cube.pixels();
        let values = cube
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let b = i / n;
                let span = self.max[b] - self.min[b];
                if span > 0.0 {
                    (v - self.min[b]) / span
                } else {
                    0.0
                }
            })
            .collect();
        cube.with_values(cube.bands(), values)
    }
}

/// Scene preprocessing recorded with every trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub scaling: BandScaling,
    pub pca: Option<PcaModel>,
}

impl Preprocessing {
    /// Min-max scaling, then PCA to `components` bands fitted on every pixel.
    pub fn fit(cube: &HsiCube, components: Option<usize>) -> Result<Self> {
        let scaling = BandScaling::fit(cube);
        let pca = match components {
            Some(c) => Some(fit_pca(&scaling.apply(cube)?, c)?),
            None => None,
        };
        Ok(Self { scaling, pca })
    }

    pub fn output_bands(&self, input_bands: usize) -> usize {
        self.pca.as_ref().map_or(input_bands, |p| p.components())
    }

    pub fn apply(&self, cube: &HsiCube) -> Result<HsiCube> {
        let scaled = self.scaling.apply(cube)?;
        match &self.pca {
            Some(p) => p.apply(&scaled),
            None => Ok(scaled),
        }
    }
}
