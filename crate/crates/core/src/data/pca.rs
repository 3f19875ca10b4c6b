use serde::{Deserialize, Serialize};

use super::HsiCube;
use crate::error::{Error, Result};

pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 10_000;

/// Principal axes of a scene's band covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub means: Vec<f64>,
    /// `bands × components`, row-major; column `j` is component `j`.
    pub components: Vec<f64>,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn bands(&self) -> usize {
        self.means.len()
    }

    pub fn components(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        let c = self.components();
        (0..self.bands()).map(|b| self.components[b * c + j]).collect()
    }

    pub fn project(&self, spectrum: &[f64]) -> Vec<f64> {
        let c = self.components();
        (0..c)
            .map(|j| {
                spectrum
                    .iter()
                    .zip(&self.means)
                    .enumerate()
                    .map(|(b, (v, m))| (v - m) * self.components[b * c + j])
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let c = self.components();
        (0..self.bands())
            .map(|b| {
                self.means[b] + scores.iter().enumerate().map(|(j, s)| s * self.components[b * c + j]).sum::<f64>()
            })
            .collect()
    }

    pub fn apply(&self, cube: &HsiCube) -> Result<HsiCube> {
        if cube.bands() != self.bands() {
            return Err(Error::shape(
                "pca apply",
                format!("model fitted on {} bands, scene has {}", self.bands(), cube.bands()),
            ));
        }
        let n = cube.pixels();
        let c = self.components();
        let mut values = vec![0.0; c * n];
        for p in 0..n {
            for (j, s) in self.project(&cube.spectrum(p)).into_iter().enumerate() {
                values[j * n + p] = s;
            }
        }
        cube.with_values(c, values)
    }
}

/// Top-`c` eigenpairs of the mean-centred covariance (denominator `n − 1`)
/// by power iteration with deflation. Each component is sign-fixed so its
/// largest-magnitude entry is positive.
pub fn fit_pca(cube: &HsiCube, c: usize) -> Result<PcaModel> {
    let bands = cube.bands();
    let n = cube.pixels();
    if c == 0 || c > bands {
        return Err(Error::InvalidArgument(format!("cannot keep {c} components of {bands} bands")));
    }
    if n < c + 1 {
        return Err(Error::InvalidArgument(format!("{n} pixels are too few for {c} components")));
    }
    let means: Vec<f64> =
        (0..bands).map(|b| cube.values()[b * n..(b + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; bands * bands];
    for p in 0..n {
        let centred: Vec<f64> = (0..bands).map(|b| cube.values()[b * n + p] - means[b]).collect();
        for i in 0..bands {
            for j in i..bands {
                cov[i * bands + j] += centred[i] * centred[j];
            }
        }
    }
    for i in 0..bands {
        for j in i..bands {
            let v = cov[i * bands + j] / (n - 1) as f64;
            cov[i * bands + j] = v;
            cov[j * bands + i] = v;
        }
    }
    let (vectors, values) = top_eigenpairs(&cov, bands, c)?;
    let mut components = vec![0.0; bands * c];
    for (j, v) in vectors.iter().enumerate() {
        for b in 0..bands {
            components[b * c + j] = v[b];
        }
    }
    Ok(PcaModel { means, components, explained_variance: values })
}

fn mat_vec(m: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    (0..n).map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

/// Deterministic start vector orthogonal to `basis`.
fn start_vector(n: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sqrt()).collect();
    orthogonalize(&mut v, basis);
    if normalize(&mut v) > 1e-6 {
        return v;
    }
    for axis in 0..n {
        let mut e = vec![0.0; n];
        e[axis] = 1.0;
        orthogonalize(&mut e, basis);
        if normalize(&mut e) > 1e-6 {
            return e;
        }
    }
    unreachable!("basis cannot span the whole space before the last component")
}

fn top_eigenpairs(cov: &[f64], n: usize, count: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut deflated = cov.to_vec();
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for component in 0..count {
        let mut v = start_vector(n, &vectors);
        let mut residual = f64::INFINITY;
        let mut converged = false;
        for _ in 0..PCA_MAX_ITERATIONS {
            let mut w = mat_vec(&deflated, n, &v);
            orthogonalize(&mut w, &vectors);
            let lambda = dot(&v, &w);
            residual = w.iter().zip(&v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
            if residual <= PCA_TOLERANCE {
                converged = true;
                break;
            }
            if normalize(&mut w) == 0.0 {
                converged = true;
                break;
            }
            v = w;
        }
        if !converged {
            return Err(Error::NotConverged { component, iterations: PCA_MAX_ITERATIONS, residual });
        }
        let top = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if top < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let lambda = dot(&v, &mat_vec(cov, n, &v));
        for i in 0..n {
            for j in 0..n {
                deflated[i * n + j] -= lambda * v[i] * v[j];
            }
        }
        vectors.push(v);
        values.push(lambda);
    }
    Ok((vectors, values))
}
