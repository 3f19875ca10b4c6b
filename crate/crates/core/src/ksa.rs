//! Kernel selective attention and the kernel selective transformer block.
//!
//! Two depthwise branches with different receptive fields (3×3, and 3×3
//! followed by a 5×5 dilated by 2) are weighted per pixel by spatial masks and
//! per channel by a paired spectral softmax, fused by a 1×1 conv, and used to
//! gate the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::{FfnCache, FfnParams};
use crate::nn::{join, Conv, LayerNorm, Linear, Parameters};
use crate::tensor::{self, ChannelPool, PoolMode, Tensor};

/// Number of receptive-field branches (and spatial attention maps).
pub const BRANCHES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct KsaParams {
    pub dw3: Conv,
    pub dw5: Conv,
    pub proj1: Conv,
    pub proj2: Conv,
    pub spatial_conv: Conv,
    pub spectral_fc: Linear,
    /// Spectral logit scale of the small-kernel branch.
    pub m: Tensor,
    /// Spectral logit scale of the large-kernel branch.
    pub n: Tensor,
    pub fuse: Conv,
}

impl KsaParams {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel selective attention needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        Ok(Self {
            dw3: Conv::depthwise(channels, &[3, 3], &[1, 1], rng)?,
            dw5: Conv::depthwise(channels, &[5, 5], &[2, 2], rng)?,
            proj1: Conv::pointwise(2, channels, half, rng),
            proj2: Conv::pointwise(2, channels, half, rng),
            spatial_conv: Conv::pointwise(2, 2, BRANCHES, rng),
            spectral_fc: Linear::new(channels, half, rng),
            m: Tensor::zeros([half]),
            n: Tensor::zeros([half]),
            fuse: Conv::pointwise(2, half, channels, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.dw3.c_out()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, KsaCache)> {
        let c = self.channels();
        if x.dims() != 3 || x.shape()[0] != c {
            return Err(Error::shape("ksa_forward", format!("input {:?} for {c} channels", x.shape())));
        }
        let half = c / 2;
        let small = self.dw3.forward(x)?;
        let large = self.dw5.forward(&small)?;
        let u1 = self.proj1.forward(&small)?;
        let u2 = self.proj2.forward(&large)?;
        let u = tensor::concat_channels(&[&u1, &u2])?;

        let pooled = tensor::concat_channels(&[
            &tensor::channel_pool(&u, PoolMode::Avg)?,
            &tensor::channel_pool(&u, PoolMode::Max)?,
        ])?;
        let spatial = tensor::sigmoid(&self.spatial_conv.forward(&pooled)?);

        let gap = tensor::global_avg_pool(&u)?;
        let z = self.spectral_fc.forward(&gap)?;
        let (c1, c2) = paired_softmax(&self.m, &self.n, &z);

        let plane = x.shape()[1] * x.shape()[2];
        let s = spatial.data();
        let mut mixed = Tensor::zeros(u1.shape().to_vec());
        for j in 0..half {
            for p in 0..plane {
                let i = j * plane + p;
                mixed.data_mut()[i] = c1[j] * s[p] * u1.data()[i] + c2[j] * s[plane + p] * u2.data()[i];
            }
        }
        let gate = self.fuse.forward(&mixed)?;
        let out = tensor::mul(x, &gate)?;
        Ok((out, KsaCache { x: x.clone(), small, large, u1, u2, u, pooled, spatial, gap, z, c1, c2, mixed, gate }))
    }

    pub fn backward(&self, cache: &KsaCache, grad_out: &Tensor, grads: &mut KsaParams) -> Result<Tensor> {
        let half = self.channels() / 2;
        let plane = cache.x.shape()[1] * cache.x.shape()[2];

        let mut dx = tensor::mul(grad_out, &cache.gate)?;
        let dgate = tensor::mul(grad_out, &cache.x)?;
        let dmixed = self.fuse.backward(&cache.mixed, &dgate, &mut grads.fuse)?;

        let s = cache.spatial.data();
        let mut du1 = Tensor::zeros(cache.u1.shape().to_vec());
        let mut du2 = Tensor::zeros(cache.u2.shape().to_vec());
        let mut ds = Tensor::zeros([BRANCHES, cache.x.shape()[1], cache.x.shape()[2]]);
        let mut dc1 = vec![0.0; half];
        let mut dc2 = vec![0.0; half];
        for j in 0..half {
            for p in 0..plane {
                let i = j * plane + p;
                let g = dmixed.data()[i];
                let (v1, v2) = (cache.u1.data()[i], cache.u2.data()[i]);
                du1.data_mut()[i] = g * cache.c1[j] * s[p];
                du2.data_mut()[i] = g * cache.c2[j] * s[plane + p];
                dc1[j] += g * v1 * s[p];
                dc2[j] += g * v2 * s[plane + p];
                ds.data_mut()[p] += g * v1 * cache.c1[j];
                ds.data_mut()[plane + p] += g * v2 * cache.c2[j];
            }
        }

        // Two-way softmax per channel over logits (m·z, n·z).
        let mut dz = Tensor::zeros([half]);
        for j in 0..half {
            let (a, b) = (cache.c1[j], cache.c2[j]);
            let inner = dc1[j] * a + dc2[j] * b;
            let dl1 = a * (dc1[j] - inner);
            let dl2 = b * (dc2[j] - inner);
            let zj = cache.z.data()[j];
            grads.m.data_mut()[j] += dl1 * zj;
            grads.n.data_mut()[j] += dl2 * zj;
            dz.data_mut()[j] = dl1 * self.m.data()[j] + dl2 * self.n.data()[j];
        }
        let dgap = self.spectral_fc.backward(&cache.gap, &dz, &mut grads.spectral_fc)?;
        let mut du = tensor::global_avg_pool_backward(cache.u.shape(), &dgap)?;

        let dspatial_pre = tensor::sigmoid_backward(&cache.spatial, &ds)?;
        let dpooled = self.spatial_conv.backward(&cache.pooled, &dspatial_pre, &mut grads.spatial_conv)?;
        let dpool = tensor::split_channels(&dpooled, &[1, 1])?;
        du.add_assign(&tensor::channel_pool_backward(&cache.u, PoolMode::Avg, &dpool[0])?)?;
        du.add_assign(&tensor::channel_pool_backward(&cache.u, PoolMode::Max, &dpool[1])?)?;
        let du_parts = tensor::split_channels(&du, &[half, half])?;
        du1.add_assign(&du_parts[0])?;
        du2.add_assign(&du_parts[1])?;

        let mut dsmall = self.proj1.backward(&cache.small, &du1, &mut grads.proj1)?;
        let dlarge = self.proj2.backward(&cache.large, &du2, &mut grads.proj2)?;
        dsmall.add_assign(&self.dw5.backward(&cache.small, &dlarge, &mut grads.dw5)?)?;
        dx.add_assign(&self.dw3.backward(&cache.x, &dsmall, &mut grads.dw3)?)?;
        Ok(dx)
    }
}

/// Per channel `j`: `(e^{m_j z_j}, e^{n_j z_j})` normalized to sum to one.
fn paired_softmax(m: &Tensor, n: &Tensor, z: &Tensor) -> (Vec<f64>, Vec<f64>) {
    m.data()
        .iter()
        .zip(n.data())
        .zip(z.data())
        .map(|((&mj, &nj), &zj)| {
            let (l1, l2) = (mj * zj, nj * zj);
            let top = l1.max(l2);
            let (e1, e2) = ((l1 - top).exp(), (l2 - top).exp());
            (e1 / (e1 + e2), e2 / (e1 + e2))
        })
        .unzip()
}

impl Parameters for KsaParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.dw3.visit(&join(prefix, "dw3"), f);
        self.dw5.visit(&join(prefix, "dw5"), f);
        self.proj1.visit(&join(prefix, "proj1"), f);
        self.proj2.visit(&join(prefix, "proj2"), f);
        self.spatial_conv.visit(&join(prefix, "spatial_conv"), f);
        self.spectral_fc.visit(&join(prefix, "spectral_fc"), f);
        f(join(prefix, "m"), &self.m);
        f(join(prefix, "n"), &self.n);
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.dw3.visit_mut(f);
        self.dw5.visit_mut(f);
        self.proj1.visit_mut(f);
        self.proj2.visit_mut(f);
        self.spatial_conv.visit_mut(f);
        self.spectral_fc.visit_mut(f);
        f(&mut self.m);
        f(&mut self.n);
        self.fuse.visit_mut(f);
    }
}

/// Intermediates of one KSA evaluation.
pub struct KsaCache {
    x: Tensor,
    small: Tensor,
    large: Tensor,
    u1: Tensor,
    u2: Tensor,
    u: Tensor,
    pooled: Tensor,
    spatial: Tensor,
    gap: Tensor,
    z: Tensor,
    c1: Vec<f64>,
    c2: Vec<f64>,
    mixed: Tensor,
    gate: Tensor,
}

impl KsaCache {
    /// Spectral selection weights `(C1, C2)`.
    pub fn spectral_masks(&self) -> (&[f64], &[f64]) {
        (&self.c1, &self.c2)
    }

    /// Spatial selection masks `[2, w, w]` (sigmoid outputs).
    pub fn spatial_masks(&self) -> &Tensor {
        &self.spatial
    }

    /// Full selection weights `W_i = C_i ⊗ S_i`, each `[c/2, w, w]`.
    pub fn selection_weights(&self) -> [Tensor; BRANCHES] {
        let plane = self.spatial.len() / BRANCHES;
        let half = self.c1.len();
        let (h, w) = (self.x.shape()[1], self.x.shape()[2]);
        let build = |branch: usize, coeff: &[f64]| {
            Tensor::from_fn([half, h, w], |i| coeff[i / plane] * self.spatial.data()[branch * plane + i % plane])
        };
        [build(0, &self.c1), build(1, &self.c2)]
    }

    /// Smallest top-1/top-2 gap of the channel max pool; a guard for finite differences.
    pub fn selection_margin(&self) -> f64 {
        ChannelPool::margin(&self.u)
    }

    pub fn fingerprint(&self, out: &mut Vec<usize>) {
        out.extend(ChannelPool::winners(&self.u));
    }

    pub fn trace(&self) -> KsaTrace {
        let (h, w) = (self.x.shape()[1], self.x.shape()[2]);
        let branches = self
            .selection_weights()
            .iter()
            .enumerate()
            .map(|(branch, weights)| {
                let half = weights.shape()[0];
                let plane = h * w;
                let channel_mean = (0..half)
                    .map(|j| weights.data()[j * plane..(j + 1) * plane].iter().sum::<f64>() / plane as f64)
                    .collect();
                let spatial_map = (0..plane)
                    .map(|p| (0..half).map(|j| weights.data()[j * plane + p]).sum::<f64>() / half as f64)
                    .collect();
                BranchWeights { branch, mean: weights.mean(), channel_mean, spatial_map, shape: [h, w] }
            })
            .collect();
        KsaTrace { branches }
    }
}

/// Receptive-field selection weights of one KSA evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsaTrace {
    pub branches: Vec<BranchWeights>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights {
    pub branch: usize,
    pub mean: f64,
    /// Spatial mean of the branch weights, per channel.
    pub channel_mean: Vec<f64>,
    /// Channel mean of the branch weights, per pixel (row-major).
    pub spatial_map: Vec<f64>,
    pub shape: [usize; 2],
}

/// Pre-norm residual block: `y = x + KSA(LN(x))`, `out = y + FFN(LN(y))`.
#[derive(Clone, Debug, PartialEq)]
pub struct KstbParams {
    pub norm1: LayerNorm,
    pub ksa: KsaParams,
    pub norm2: LayerNorm,
    pub ffn: FfnParams,
}

pub struct KstbCache {
    x: Tensor,
    normed1: Tensor,
    ksa: KsaCache,
    y: Tensor,
    ffn: FfnCache,
}

impl KstbCache {
    pub fn ksa(&self) -> &KsaCache {
        &self.ksa
    }

    pub fn normed_input(&self) -> &Tensor {
        &self.normed1
    }
}

impl KstbParams {
    pub fn new(channels: usize, ffn_ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(channels),
            ksa: KsaParams::new(channels, rng)?,
            norm2: LayerNorm::new(channels),
            ffn: FfnParams::new(channels, ffn_ratio, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, KstbCache)> {
        let normed1 = self.norm1.forward(x)?;
        let (attended, ksa) = self.ksa.forward(&normed1)?;
        let y = tensor::add(x, &attended)?;
        let (fed, ffn) = self.ffn.forward(&self.norm2.forward(&y)?)?;
        let out = tensor::add(&y, &fed)?;
        Ok((out, KstbCache { x: x.clone(), normed1, ksa, y, ffn }))
    }

    pub fn backward(&self, cache: &KstbCache, grad_out: &Tensor, grads: &mut KstbParams) -> Result<Tensor> {
        let dnormed2 = self.ffn.backward(&cache.ffn, grad_out, &mut grads.ffn)?;
        let mut dy = grad_out.clone();
        dy.add_assign(&self.norm2.backward(&cache.y, &dnormed2, &mut grads.norm2)?)?;
        let dnormed1 = self.ksa.backward(&cache.ksa, &dy, &mut grads.ksa)?;
        let mut dx = dy;
        dx.add_assign(&self.norm1.backward(&cache.x, &dnormed1, &mut grads.norm1)?)?;
        Ok(dx)
    }
}

impl Parameters for KstbParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ksa.visit(&join(prefix, "ksa"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.norm1.visit_mut(f);
        self.ksa.visit_mut(f);
        self.norm2.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randomize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(c: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut x = Tensor::zeros([c, w, w]);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        x.data_mut().iter_mut().for_each(|v| *v = rand_distr::Distribution::sample(&normal, rng));
        x
    }

    #[test]
    fn odd_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(KsaParams::new(5, &mut rng).is_err());
    }

    #[test]
    fn equal_m_n_gives_even_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = KsaParams::new(6, &mut rng).unwrap();
        randomize(&mut p, 0.5, &mut rng);
        p.n = p.m.clone();
        let (_, cache) = p.forward(&random_input(6, 4, &mut rng)).unwrap();
        let (c1, c2) = cache.spectral_masks();
        assert!(c1.iter().chain(c2).all(|&v| v == 0.5));
    }

    #[test]
    fn zero_spatial_conv_gives_half_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = KsaParams::new(4, &mut rng).unwrap();
        randomize(&mut p, 0.5, &mut rng);
        p.spatial_conv.weight.fill(0.0);
        p.spatial_conv.bias.as_mut().unwrap().fill(0.0);
        let (_, cache) = p.forward(&random_input(4, 3, &mut rng)).unwrap();
        assert!(cache.spatial_masks().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_fuse_and_ffn_out_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = KstbParams::new(4, 1, &mut rng).unwrap();
        randomize(&mut p, 0.5, &mut rng);
        p.ksa.fuse.weight.fill(0.0);
        p.ksa.fuse.bias.as_mut().unwrap().fill(0.0);
        p.ffn.fc_out.weight.fill(0.0);
        p.ffn.fc_out.bias.as_mut().unwrap().fill(0.0);
        let x = random_input(4, 3, &mut rng);
        let (y, _) = p.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn shape_is_preserved_and_trace_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (c, w) in [(2, 1), (4, 3), (8, 5), (6, 10)] {
            let mut p = KstbParams::new(c, 1, &mut rng).unwrap();
            randomize(&mut p, 0.3, &mut rng);
            let x = random_input(c, w, &mut rng);
            let (y, cache) = p.forward(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            let trace = cache.ksa().trace();
            assert_eq!(trace.branches.len(), 2);
            assert_eq!(trace.branches[0].channel_mean.len(), c / 2);
            assert_eq!(trace.branches[1].spatial_map.len(), w * w);
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = KsaParams::new(4, &mut rng).unwrap();
        assert!(p.forward(&Tensor::zeros([6, 3, 3])).is_err());
    }
}
