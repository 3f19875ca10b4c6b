//! Token selective attention and the token selective transformer block.
//!
//! Each head's slice of the input is split into `g` groups of `c` channels and
//! treated as a 4-D volume `[g, c, H, W]`: groups play the role of 3-D conv
//! channels, `(c, H, W)` the spatial volume. A pointwise 3-D conv triples the
//! group axis, a depthwise `1×3×3` conv mixes each group spatially, and the
//! result is chunked into Q, K, V with `g·H·W` tokens of width `c`. Every query
//! row of the scaled score matrix keeps only its top `ceil(k·n)` entries
//! before the softmax.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ffn::{FfnCache, FfnParams};
use crate::nn::{join, Conv, LayerNorm, Parameters};
use crate::tensor::{self, SelectionMask, SelectionRate, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TsaHead {
    /// `1×1×1` conv, `g → 3g` group channels, with bias.
    pub pconv: Conv,
    /// Depthwise `1×3×3` conv over the `3g` group channels.
    pub dwconv: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsaParams {
    pub heads: Vec<TsaHead>,
    pub out_proj: Conv,
    pub groups: usize,
    pub rate: SelectionRate,
}

/// Shape bookkeeping derived from `(C, h, g)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadGeometry {
    pub channels: usize,
    pub heads: usize,
    pub groups: usize,
    /// Channels per head, `C / h`.
    pub head_dim: usize,
    /// Channels per group (token width), `C / (h·g)`.
    pub group_dim: usize,
}

impl HeadGeometry {
    pub fn new(channels: usize, heads: usize, groups: usize) -> Result<Self> {
        if heads == 0 || groups == 0 || channels == 0 {
            return Err(Error::Config("channels, heads and groups must be positive".into()));
        }
        if !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("channels {channels} not divisible by heads {heads}")));
        }
        let head_dim = channels / heads;
        if !head_dim.is_multiple_of(groups) {
            return Err(Error::Config(format!("head dimension {head_dim} not divisible by groups {groups}")));
        }
        Ok(Self { channels, heads, groups, head_dim, group_dim: head_dim / groups })
    }

    /// Score scale `λ = √(C/h)`.
    pub fn temperature(&self) -> f64 {
        (self.head_dim as f64).sqrt()
    }

    pub fn tokens(&self, height: usize, width: usize) -> usize {
        self.groups * height * width
    }
}

impl TsaParams {
    pub fn new(channels: usize, heads: usize, groups: usize, rate: SelectionRate, rng: &mut impl Rng) -> Result<Self> {
        HeadGeometry::new(channels, heads, groups)?;
        let heads = (0..heads)
            .map(|_| {
                Ok(TsaHead {
                    pconv: Conv::pointwise(3, groups, 3 * groups, rng),
                    dwconv: Conv::depthwise(3 * groups, &[1, 3, 3], &[1, 1, 1], rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads, out_proj: Conv::pointwise(2, channels, channels, rng), groups, rate })
    }

    pub fn geometry(&self) -> HeadGeometry {
        HeadGeometry::new(self.out_proj.c_out(), self.heads.len(), self.groups).expect("validated at construction")
    }

    pub fn forward(&self, p: &Tensor) -> Result<(Tensor, TsaCache)> {
        let geo = self.geometry();
        if p.dims() != 3 || p.shape()[0] != geo.channels {
            return Err(Error::shape("tsa_forward", format!("input {:?} for {} channels", p.shape(), geo.channels)));
        }
        let (h, w) = (p.shape()[1], p.shape()[2]);
        let slices = tensor::split_channels(p, &vec![geo.head_dim; geo.heads])?;
        let mut head_caches = Vec::with_capacity(geo.heads);
        let mut merged = Vec::with_capacity(geo.heads);
        for (head, slice) in self.heads.iter().zip(&slices) {
            let grouped = slice.reshape([geo.groups, geo.group_dim, h, w])?;
            let mixed = head.pconv.forward(&grouped)?;
            let qkv = head.dwconv.forward(&mixed)?;
            let parts = tensor::split_channels(&qkv, &[geo.groups; 3])?;
            let q = to_tokens(&parts[0])?;
            let k = to_tokens(&parts[1])?;
            let v = to_tokens(&parts[2])?;
            let scores = tensor::scale(&tensor::matmul(&q, &tensor::transpose(&k)?)?, 1.0 / geo.temperature());
            let (masked, mask) = tensor::topk_row_threshold(&scores, self.rate)?;
            let attn = tensor::softmax_rows(&masked)?;
            let attended = tensor::matmul(&attn, &v)?;
            let update = from_tokens(&attended, geo.groups, h, w)?.into_shape([geo.head_dim, h, w])?;
            merged.push(tensor::add(slice, &update)?);
            head_caches.push(HeadCache { grouped, mixed, q, k, v, scores, mask, attn });
        }
        let merged = tensor::concat_channels(&merged.iter().collect::<Vec<_>>())?;
        let out = self.out_proj.forward(&merged)?;
        Ok((out, TsaCache { heads: head_caches, merged, height: h, width: w }))
    }

    pub fn backward(&self, cache: &TsaCache, grad_out: &Tensor, grads: &mut TsaParams) -> Result<Tensor> {
        let geo = self.geometry();
        let (h, w) = (cache.height, cache.width);
        let dmerged = self.out_proj.backward(&cache.merged, grad_out, &mut grads.out_proj)?;
        let dslices = tensor::split_channels(&dmerged, &vec![geo.head_dim; geo.heads])?;
        let mut dinputs = Vec::with_capacity(geo.heads);
        for (((head, hc), dslice), hgrads) in
            self.heads.iter().zip(&cache.heads).zip(dslices).zip(grads.heads.iter_mut())
        {
            let dattended = to_tokens(&dslice.reshape([geo.groups, geo.group_dim, h, w])?)?;
            let (dattn, dv) = tensor::matmul_backward(&hc.attn, &hc.v, &dattended)?;
            let dmasked = tensor::softmax_rows_backward(&hc.attn, &dattn)?;
            let dscores = tensor::scale(&tensor::topk_backward(&hc.mask, &dmasked)?, 1.0 / geo.temperature());
            let kt = tensor::transpose(&hc.k)?;
            let (dq, dkt) = tensor::matmul_backward(&hc.q, &kt, &dscores)?;
            let dk = tensor::transpose(&dkt)?;
            let dqkv = tensor::concat_channels(&[
                &from_tokens(&dq, geo.groups, h, w)?,
                &from_tokens(&dk, geo.groups, h, w)?,
                &from_tokens(&dv, geo.groups, h, w)?,
            ])?;
            let dmixed = head.dwconv.backward(&hc.mixed, &dqkv, &mut hgrads.dwconv)?;
            let dgrouped = head.pconv.backward(&hc.grouped, &dmixed, &mut hgrads.pconv)?;
            let mut dslice = dslice;
            dslice.add_assign(&dgrouped.into_shape([geo.head_dim, h, w])?)?;
            dinputs.push(dslice);
        }
        tensor::concat_channels(&dinputs.iter().collect::<Vec<_>>())
    }
}

/// `[g, c, H, W] -> [g·H·W, c]`, token index `(group·H + y)·W + x`.
pub fn to_tokens(volume: &Tensor) -> Result<Tensor> {
    volume.expect_dims(4, "to_tokens")?;
    let [g, c, h, w] = [volume.shape()[0], volume.shape()[1], volume.shape()[2], volume.shape()[3]];
    let plane = h * w;
    Ok(Tensor::from_fn([g * plane, c], |i| {
        let (token, ch) = (i / c, i % c);
        let (group, pixel) = (token / plane, token % plane);
        volume.data()[(group * c + ch) * plane + pixel]
    }))
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tokens: &Tensor, groups: usize, height: usize, width: usize) -> Result<Tensor> {
    tokens.expect_dims(2, "from_tokens")?;
    let plane = height * width;
    if tokens.shape()[0] != groups * plane {
        return Err(Error::shape("from_tokens", format!("{:?} tokens for {groups}x{height}x{width}", tokens.shape())));
    }
    let c = tokens.shape()[1];
    Ok(Tensor::from_fn([groups, c, height, width], |i| {
        let pixel = i % plane;
        let ch = (i / plane) % c;
        let group = i / (plane * c);
        tokens.data()[(group * plane + pixel) * c + ch]
    }))
}

struct HeadCache {
    grouped: Tensor,
    mixed: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    scores: Tensor,
    mask: SelectionMask,
    attn: Tensor,
}

pub struct TsaCache {
    heads: Vec<HeadCache>,
    merged: Tensor,
    height: usize,
    width: usize,
}

impl TsaCache {
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Scaled dense scores `QKᵀ/λ` of one head, before selection.
    pub fn dense_scores(&self, head: usize) -> &Tensor {
        &self.heads[head].scores
    }

    pub fn mask(&self, head: usize) -> &SelectionMask {
        &self.heads[head].mask
    }

    /// Row-stochastic attention after selection and softmax.
    pub fn attention(&self, head: usize) -> &Tensor {
        &self.heads[head].attn
    }

    pub fn selection_margin(&self) -> f64 {
        self.heads.iter().map(|h| h.mask.min_margin()).fold(f64::INFINITY, f64::min)
    }

    pub fn fingerprint(&self, out: &mut Vec<usize>) {
        for h in &self.heads {
            out.extend(h.mask.bits().iter().map(|&b| b as usize));
        }
    }

    pub fn traces(&self) -> Vec<SelectiveAttentionTrace> {
        self.heads
            .iter()
            .enumerate()
            .map(|(head, h)| SelectiveAttentionTrace { head, dense: h.scores.clone(), mask: h.mask.clone() })
            .collect()
    }
}

/// Dense score matrix of one head and the entries that survived selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveAttentionTrace {
    pub head: usize,
    pub dense: Tensor,
    pub mask: SelectionMask,
}

impl Parameters for TsaHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.pconv.visit(&join(prefix, "pconv"), f);
        self.dwconv.visit(&join(prefix, "dwconv"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.pconv.visit_mut(f);
        self.dwconv.visit_mut(f);
    }
}

impl Parameters for TsaParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.heads.visit(&join(prefix, "heads"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.heads.visit_mut(f);
        self.out_proj.visit_mut(f);
    }
}

/// Pre-norm residual block: `y = x + TSA(LN(x))`, `out = y + FFN(LN(y))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TstbParams {
    pub norm1: LayerNorm,
    pub tsa: TsaParams,
    pub norm2: LayerNorm,
    pub ffn: FfnParams,
}

pub struct TstbCache {
    x: Tensor,
    tsa: TsaCache,
    y: Tensor,
    ffn: FfnCache,
}

impl TstbCache {
    pub fn tsa(&self) -> &TsaCache {
        &self.tsa
    }
}

impl TstbParams {
    pub fn new(
        channels: usize,
        heads: usize,
        groups: usize,
        rate: SelectionRate,
        ffn_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(channels),
            tsa: TsaParams::new(channels, heads, groups, rate, rng)?,
            norm2: LayerNorm::new(channels),
            ffn: FfnParams::new(channels, ffn_ratio, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, TstbCache)> {
        let (attended, tsa) = self.tsa.forward(&self.norm1.forward(x)?)?;
        let y = tensor::add(x, &attended)?;
        let (fed, ffn) = self.ffn.forward(&self.norm2.forward(&y)?)?;
        let out = tensor::add(&y, &fed)?;
        Ok((out, TstbCache { x: x.clone(), tsa, y, ffn }))
    }

    pub fn backward(&self, cache: &TstbCache, grad_out: &Tensor, grads: &mut TstbParams) -> Result<Tensor> {
        let dnormed2 = self.ffn.backward(&cache.ffn, grad_out, &mut grads.ffn)?;
        let mut dy = grad_out.clone();
        dy.add_assign(&self.norm2.backward(&cache.y, &dnormed2, &mut grads.norm2)?)?;
        let dnormed1 = self.tsa.backward(&cache.tsa, &dy, &mut grads.tsa)?;
        let mut dx = dy;
        dx.add_assign(&self.norm1.backward(&cache.x, &dnormed1, &mut grads.norm1)?)?;
        Ok(dx)
    }
}

impl Parameters for TstbParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.tsa.visit(&join(prefix, "tsa"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.norm1.visit_mut(f);
        self.tsa.visit_mut(f);
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

    fn rate(k: f64) -> SelectionRate {
        SelectionRate::new(k).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(shape.to_vec(), |_| rand_distr::Distribution::sample(&normal, rng))
    }

    #[test]
    fn divisibility_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TsaParams::new(8, 3, 1, rate(0.5), &mut rng).is_err());
        assert!(TsaParams::new(8, 2, 3, rate(0.5), &mut rng).is_err());
        assert!(TsaParams::new(8, 2, 2, rate(0.5), &mut rng).is_ok());
    }

    #[test]
    fn token_layout_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random(&[3, 2, 2, 5], &mut rng);
        let t = to_tokens(&v).unwrap();
        assert_eq!(t.shape(), &[30, 2]);
        // group 1, y 1, x 3 -> token (1*2 + 1)*5 + 3 = 18
        assert_eq!(t.at(&[18, 1]), v.at(&[1, 1, 1, 3]));
        assert_eq!(from_tokens(&t, 3, 2, 5).unwrap(), v);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = TsaParams::new(4, 2, 1, rate(0.3), &mut rng).unwrap();
        randomize(&mut p, 0.5, &mut rng);
        let (_, cache) = p.forward(&random(&[4, 1, 1], &mut rng)).unwrap();
        for head in 0..2 {
            assert_eq!(cache.attention(head).data(), &[1.0]);
        }
    }

    #[test]
    fn retained_count_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = TsaParams::new(8, 2, 2, rate(0.3), &mut rng).unwrap();
        randomize(&mut p, 0.5, &mut rng);
        let (y, cache) = p.forward(&random(&[8, 3, 3], &mut rng)).unwrap();
        assert_eq!(y.shape(), &[8, 3, 3]);
        let n = 2 * 9;
        for head in 0..2 {
            let mask = cache.mask(head);
            let attn = cache.attention(head);
            for r in 0..n {
                assert_eq!(mask.retained_in_row(r), 6);
                let row = &attn.data()[r * n..(r + 1) * n];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (c, &a) in row.iter().enumerate() {
                    if !mask.is_kept(r, c) {
                        assert_eq!(a, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn one_group_uses_spatial_tokens_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = TsaParams::new(8, 2, 1, rate(1.0), &mut rng).unwrap();
        let (_, cache) = p.forward(&random(&[8, 2, 3], &mut rng)).unwrap();
        assert_eq!(cache.dense_scores(0).shape(), &[6, 6]);
    }

    #[test]
    fn zero_projections_give_identity_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = TstbParams::new(8, 2, 2, rate(0.5), 1, &mut rng).unwrap();
        randomize(&mut p, 0.5, &mut rng);
        p.tsa.out_proj.weight.fill(0.0);
        p.tsa.out_proj.bias.as_mut().unwrap().fill(0.0);
        p.ffn.fc_out.weight.fill(0.0);
        p.ffn.fc_out.bias.as_mut().unwrap().fill(0.0);
        let x = random(&[8, 2, 2], &mut rng);
        assert_eq!(p.forward(&x).unwrap().0, x);
        for head in &mut p.tsa.heads {
            head.pconv.weight.fill(0.0);
            head.pconv.bias.as_mut().unwrap().fill(0.0);
        }
        assert_eq!(p.forward(&x).unwrap().0, x);
    }
}
