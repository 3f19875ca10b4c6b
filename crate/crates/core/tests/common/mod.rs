//! Straight-line reference implementations used as test oracles. Nothing here
//! calls into the library's numerical code; parameters are read as raw slices.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sformer::ksa::KsaParams;
use sformer::nn::Conv;
use sformer::tsa::TsaParams;
use sformer::Tensor;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| normal(rng))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Convolution hyper-parameters per spatial axis.
#[derive(Clone, Debug)]
pub struct NaiveSpec {
    pub kernel: Vec<usize>,
    pub dilation: Vec<usize>,
    pub padding: Vec<usize>,
    pub stride: Vec<usize>,
    pub groups: usize,
}

/// Nested-loop cross-correlation with zero padding over 2 or 3 spatial axes.
/// `input` is `[C_in, *extents]`, `weight` is `[C_out, C_in/groups, *kernel]`.
pub fn naive_conv(
    input: &[f64],
    extents: &[usize],
    c_in: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
    spec: &NaiveSpec,
) -> (Vec<f64>, Vec<usize>) {
    let axes = extents.len();
    let out_ext: Vec<usize> = (0..axes)
        .map(|a| {
            let span = spec.dilation[a] * (spec.kernel[a] - 1) + 1;
            (extents[a] + 2 * spec.padding[a] - span) / spec.stride[a] + 1
        })
        .collect();
    let cin_g = c_in / spec.groups;
    let cout_g = c_out / spec.groups;
    let in_plane: usize = extents.iter().product();
    let out_plane: usize = out_ext.iter().product();
    let k_plane: usize = spec.kernel.iter().product();
    let mut out = vec![0.0; c_out * out_plane];
    // Unravel helpers with 3 slots; a 2-D problem uses a leading extent of 1.
    let pad3 = |v: &[usize], fill: usize| -> [usize; 3] {
        if v.len() == 2 {
            [fill, v[0], v[1]]
        } else {
            [v[0], v[1], v[2]]
        }
    };
    let ext = pad3(extents, 1);
    let oext = pad3(&out_ext, 1);
    let ker = pad3(&spec.kernel, 1);
    let dil = pad3(&spec.dilation, 1);
    let pad = pad3(&spec.padding, 0);
    let st = pad3(&spec.stride, 1);
    for o in 0..c_out {
        let g = o / cout_g;
        for od in 0..oext[0] {
            for oy in 0..oext[1] {
                for ox in 0..oext[2] {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for ci in 0..cin_g {
                        let ich = g * cin_g + ci;
                        for kd in 0..ker[0] {
                            for ky in 0..ker[1] {
                                for kx in 0..ker[2] {
                                    let id = (od * st[0] + kd * dil[0]) as isize - pad[0] as isize;
                                    let iy = (oy * st[1] + ky * dil[1]) as isize - pad[1] as isize;
                                    let ix = (ox * st[2] + kx * dil[2]) as isize - pad[2] as isize;
                                    if id < 0
                                        || iy < 0
                                        || ix < 0
                                        || id as usize >= ext[0]
                                        || iy as usize >= ext[1]
                                        || ix as usize >= ext[2]
                                    {
                                        continue;
                                    }
                                    let pix = (id as usize * ext[1] + iy as usize) * ext[2] + ix as usize;
                                    let kidx = (kd * ker[1] + ky) * ker[2] + kx;
                                    acc += weight[(o * cin_g + ci) * k_plane + kidx] * input[ich * in_plane + pix];
                                }
                            }
                        }
                    }
                    out[o * out_plane + (od * oext[1] + oy) * oext[2] + ox] = acc;
                }
            }
        }
    }
    (out, out_ext)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn conv_bias(c: &Conv) -> Option<&[f64]> {
    c.bias.as_ref().map(|b| b.data())
}

/// Depthwise `k×k` same-padded 2-D convolution, written out by hand.
fn depthwise2d(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], k: usize, dil: usize) -> Vec<f64> {
    let half = (dil * (k - 1) / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = y as isize + (ky * dil) as isize - half;
                        let ix = xx as isize + (kx * dil) as isize - half;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += weight[(ch * k + ky) * k + kx] * x[(ch * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(ch * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

/// `out[o,p] = b[o] + Σ_i W[o,i] x[i,p]`.
fn pointwise(x: &[f64], c_in: usize, plane: usize, weight: &[f64], bias: Option<&[f64]>, c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * plane];
    for o in 0..c_out {
        for p in 0..plane {
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for i in 0..c_in {
                acc += weight[o * c_in + i] * x[i * plane + p];
            }
            out[o * plane + p] = acc;
        }
    }
    out
}

/// Kernel selective attention evaluated step by step from its definition.
pub fn ksa_oracle(params: &KsaParams, x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let half = c / 2;
    let plane = h * w;
    let xs = x.data();

    let small = depthwise2d(xs, c, h, w, params.dw3.weight.data(), 3, 1);
    let large = depthwise2d(&small, c, h, w, params.dw5.weight.data(), 5, 2);
    let u1 = pointwise(&small, c, plane, params.proj1.weight.data(), conv_bias(&params.proj1), half);
    let u2 = pointwise(&large, c, plane, params.proj2.weight.data(), conv_bias(&params.proj2), half);
    let u_at = |ch: usize, p: usize| if ch < half { u1[ch * plane + p] } else { u2[(ch - half) * plane + p] };

    // Spatial selection maps from channel-wise average and max.
    let ws = params.spatial_conv.weight.data();
    let bs = conv_bias(&params.spatial_conv).unwrap();
    let mut s = [vec![0.0; plane], vec![0.0; plane]];
    for p in 0..plane {
        let mut sum = 0.0;
        let mut max = f64::NEG_INFINITY;
        for ch in 0..c {
            sum += u_at(ch, p);
            max = max.max(u_at(ch, p));
        }
        let avg = sum / c as f64;
        for (i, map) in s.iter_mut().enumerate() {
            map[p] = sigmoid(ws[i * 2] * avg + ws[i * 2 + 1] * max + bs[i]);
        }
    }

    // Spectral selection weights.
    let gap: Vec<f64> = (0..c).map(|ch| (0..plane).map(|p| u_at(ch, p)).sum::<f64>() / plane as f64).collect();
    let wf = params.spectral_fc.weight.data();
    let bf = params.spectral_fc.bias.data();
    let (m, n) = (params.m.data(), params.n.data());
    let mut c1 = vec![0.0; half];
    let mut c2 = vec![0.0; half];
    for j in 0..half {
        let z: f64 = bf[j] + (0..c).map(|i| wf[j * c + i] * gap[i]).sum::<f64>();
        let (a, b) = ((m[j] * z).exp(), (n[j] * z).exp());
        c1[j] = a / (a + b);
        c2[j] = b / (a + b);
    }

    let mut mixed = vec![0.0; half * plane];
    for j in 0..half {
        for p in 0..plane {
            mixed[j * plane + p] = c1[j] * s[0][p] * u1[j * plane + p] + c2[j] * s[1][p] * u2[j * plane + p];
        }
    }
    let gate = pointwise(&mixed, half, plane, params.fuse.weight.data(), conv_bias(&params.fuse), c);
    xs.iter().zip(&gate).map(|(a, b)| a * b).collect()
}

/// Retained count `ceil(num/den · n)` by integer arithmetic.
pub fn ceil_fraction(num: usize, den: usize, n: usize) -> usize {
    (num * n).div_ceil(den)
}

/// Kept columns of a row: sort every index by descending score, ascending
/// index on ties, and take the first `m`.
pub fn full_sort_keep(row: &[f64], m: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    let mut keep = vec![false; row.len()];
    for &i in &idx[..m] {
        keep[i] = true;
    }
    keep
}

/// Per-head Q, K, V as `[tokens][group_dim]` matrices, token `(group·H + y)·W + x`.
struct HeadQkv {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn head_qkv(params: &TsaParams, head: usize, x: &Tensor) -> HeadQkv {
    let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let heads = params.heads.len();
    let g = params.groups;
    let d = ch / heads;
    let c = d / g;
    let plane = h * w;
    let hp = &params.heads[head];
    let pw = hp.pconv.weight.data();
    let pb = conv_bias(&hp.pconv).unwrap();
    let dw = hp.dwconv.weight.data();
    let e = |gi: usize, ci: usize, y: usize, xx: usize| x.data()[(head * d + gi * c + ci) * plane + y * w + xx];
    // Pointwise mixing across the group axis, independently per (ci, y, x).
    let mut mixed = vec![0.0; 3 * g * c * plane];
    for o in 0..3 * g {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = pb[o];
                    for gi in 0..g {
                        acc += pw[o * g + gi] * e(gi, ci, y, xx);
                    }
                    mixed[((o * c + ci) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    // Depthwise 3×3 over (y, x) inside each (channel, depth) slice.
    let mut qkv = vec![0.0; mixed.len()];
    for o in 0..3 * g {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            let ix = xx as isize + kx as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc +=
                                    dw[o * 9 + ky * 3 + kx] * mixed[((o * c + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    qkv[((o * c + ci) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    let tokens = |part: usize| -> Vec<Vec<f64>> {
        let mut t = vec![vec![0.0; c]; g * plane];
        for gi in 0..g {
            for y in 0..h {
                for xx in 0..w {
                    for ci in 0..c {
                        t[(gi * h + y) * w + xx][ci] = qkv[(((part * g + gi) * c + ci) * h + y) * w + xx];
                    }
                }
            }
        }
        t
    };
    HeadQkv { q: tokens(0), k: tokens(1), v: tokens(2) }
}

fn finish_tsa(params: &TsaParams, x: &Tensor, updates: Vec<Vec<Vec<f64>>>) -> Vec<f64> {
    let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let heads = params.heads.len();
    let g = params.groups;
    let d = ch / heads;
    let c = d / g;
    let plane = h * w;
    let mut merged = x.data().to_vec();
    for (head, attended) in updates.iter().enumerate() {
        for gi in 0..g {
            for ci in 0..c {
                for p in 0..plane {
                    merged[(head * d + gi * c + ci) * plane + p] += attended[gi * plane + p][ci];
                }
            }
        }
    }
    pointwise(&merged, ch, plane, params.out_proj.weight.data(), conv_bias(&params.out_proj), ch)
}

/// Token selective attention: scores, top-k by full sort, masked softmax,
/// weighted sum, residual and output projection.
pub fn tsa_oracle(params: &TsaParams, x: &Tensor, num: usize, den: usize) -> Vec<f64> {
    let d = x.shape()[0] / params.heads.len();
    let scale = (d as f64).sqrt();
    let updates = (0..params.heads.len())
        .map(|head| {
            let HeadQkv { q, k, v } = head_qkv(params, head, x);
            let n = q.len();
            let m = ceil_fraction(num, den, n);
            q.iter()
                .map(|qt| {
                    let row: Vec<f64> =
                        k.iter().map(|ks| qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() / scale).collect();
                    let keep = full_sort_keep(&row, m);
                    let top =
                        row.iter().zip(&keep).filter(|(_, &kp)| kp).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
                    let weights: Vec<f64> =
                        row.iter().zip(&keep).map(|(&s, &kp)| if kp { (s - top).exp() } else { 0.0 }).collect();
                    let z: f64 = weights.iter().sum();
                    let mut out = vec![0.0; v[0].len()];
                    for (wt, vs) in weights.iter().zip(&v) {
                        for (o, vv) in out.iter_mut().zip(vs) {
                            *o += wt / z * vv;
                        }
                    }
                    out
                })
                .collect()
        })
        .collect();
    finish_tsa(params, x, updates)
}

/// Conventional dense multi-head attention over the same projections, as
/// `softmax(Q Kᵀ / √d) V` with no selection step at all.
pub fn dense_mha_oracle(params: &TsaParams, x: &Tensor) -> Vec<f64> {
    let d = x.shape()[0] / params.heads.len();
    let updates = (0..params.heads.len())
        .map(|head| {
            let HeadQkv { q, k, v } = head_qkv(params, head, x);
            let n = q.len();
            let c = v[0].len();
            let mut scores = vec![vec![0.0; n]; n];
            for t in 0..n {
                for s in 0..n {
                    for i in 0..c {
                        scores[t][s] += q[t][i] * k[s][i];
                    }
                    scores[t][s] /= (d as f64).sqrt();
                }
            }
            let mut out = vec![vec![0.0; c]; n];
            for t in 0..n {
                let mx = scores[t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores[t].iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for s in 0..n {
                    for i in 0..c {
                        out[t][i] += e[s] / z * v[s][i];
                    }
                }
            }
            out
        })
        .collect();
    finish_tsa(params, x, updates)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order with matching unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = cs * akp - sn * akq;
                    row[q] = sn * akp + cs * akq;
                }
                let (rp, rq) = (a[p].clone(), a[q].clone());
                for (k, (apk, aqk)) in rp.into_iter().zip(rq).enumerate() {
                    a[p][k] = cs * apk - sn * aqk;
                    a[q][k] = sn * apk + cs * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = cs * vp - sn * vq;
                    row[q] = sn * vp + cs * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|r| v[r][i]).collect()).collect();
    (values, vectors)
}

/// Scores recomputed from raw prediction/label pairs.
pub struct ScalarScores {
    pub confusion: Vec<Vec<u64>>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub recall: Vec<Option<f64>>,
}

pub fn scalar_scores(preds: &[usize], labels: &[usize], k: usize) -> ScalarScores {
    let mut confusion = vec![vec![0u64; k]; k];
    let mut correct = 0u64;
    for i in 0..preds.len() {
        confusion[labels[i]][preds[i]] += 1;
        if preds[i] == labels[i] {
            correct += 1;
        }
    }
    let n = preds.len() as f64;
    let oa = correct as f64 / n;
    let mut recall = Vec::new();
    for c in 0..k {
        let total = labels.iter().filter(|&&l| l == c).count();
        let hit = (0..preds.len()).filter(|&i| labels[i] == c && preds[i] == c).count();
        recall.push((total > 0).then(|| hit as f64 / total as f64));
    }
    let present: Vec<f64> = recall.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let mut pe = 0.0;
    for c in 0..k {
        let truth = labels.iter().filter(|&&l| l == c).count() as f64;
        let pred = preds.iter().filter(|&&p| p == c).count() as f64;
        pe += truth * pred / (n * n);
    }
    let kappa = if pe == 1.0 { 1.0 } else { (oa - pe) / (1.0 - pe) };
    ScalarScores { confusion, oa, aa, kappa, recall }
}

/// Mirror index without repeating the edge sample, computed by walking a
/// padded line explicitly.
pub fn mirrored(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period: Vec<usize> = (0..n).chain((1..n - 1).rev()).collect();
    period[i.rem_euclid(period.len() as isize) as usize]
}

/// Nearest class mean in Euclidean distance.
pub fn nearest_centroid(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (0..centroids.len()).min_by(|&a, &b| dist(&centroids[a]).partial_cmp(&dist(&centroids[b])).unwrap()).unwrap()
}

pub fn random_fraction(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let den = rng.random_range(1..=100);
    (rng.random_range(1..=den), den)
}
