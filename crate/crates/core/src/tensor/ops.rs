use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(logistic)
}

pub(crate) fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Takes the forward *output* `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    y.zip_map(grad_out, "sigmoid_backward", |s, g| g * s * (1.0 - s))
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2)))
}

/// Takes the forward *input* `x`.
pub fn gelu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let inv_sqrt_2pi = 1.0 / (2.0 * PI).sqrt();
    x.zip_map(grad_out, "gelu_backward", |v, g| {
        let cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
        let pdf = inv_sqrt_2pi * (-0.5 * v * v).exp();
        g * (cdf + v * pdf)
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    a.map(|x| x * factor)
}

/// Concatenates along axis 0; all trailing extents must agree.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat_channels of zero tensors".into()))?;
    let tail = &first.shape()[1..];
    let mut channels = 0;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", first.shape(), p.shape())));
        }
        channels += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data)
}

/// Splits along axis 0 into consecutive pieces of the given channel counts.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if sizes.iter().sum::<usize>() != x.shape()[0] {
        return Err(Error::shape("split_channels", format!("sizes {sizes:?} do not cover {:?}", x.shape())));
    }
    let per_channel: usize = x.shape()[1..].iter().product();
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let mut shape = x.shape().to_vec();
            shape[0] = n;
            let piece = x.data()[start * per_channel..(start + n) * per_channel].to_vec();
            start += n;
            Tensor::new(shape, piece)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Squeezes `[C, H, W]` to `[1, H, W]` across channels.
pub fn channel_pool(x: &Tensor, mode: PoolMode) -> Result<Tensor> {
    x.expect_dims(3, "channel_pool")?;
    let c = x.shape()[0];
    let plane = x.shape()[1] * x.shape()[2];
    let d = x.data();
    let out = (0..plane)
        .map(|p| {
            let column = (0..c).map(|ch| d[ch * plane + p]);
            match mode {
                PoolMode::Avg => column.sum::<f64>() / c as f64,
                PoolMode::Max => column.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Tensor::new([1, x.shape()[1], x.shape()[2]], out)
}

/// Max-pooling routes the gradient to the first maximal channel.
pub fn channel_pool_backward(x: &Tensor, mode: PoolMode, grad_out: &Tensor) -> Result<Tensor> {
    x.expect_dims(3, "channel_pool_backward")?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if grad_out.shape() != [1, h, w] {
        return Err(Error::shape(
            "channel_pool_backward",
            format!("gradient {:?} for input {:?}", grad_out.shape(), x.shape()),
        ));
    }
    let plane = h * w;
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let g = gx.data_mut();
    let d = x.data();
    for p in 0..plane {
        let dy = grad_out.data()[p];
        match mode {
            PoolMode::Avg => {
                for ch in 0..c {
                    g[ch * plane + p] = dy / c as f64;
                }
            }
            PoolMode::Max => {
                g[ChannelPool::argmax(d, c, plane, p) * plane + p] = dy;
            }
        }
    }
    Ok(gx)
}

/// Helpers for inspecting the discrete choice made by max pooling.
pub struct ChannelPool;

impl ChannelPool {
    fn argmax(d: &[f64], c: usize, plane: usize, p: usize) -> usize {
        let mut best = 0;
        for ch in 1..c {
            if d[ch * plane + p] > d[best * plane + p] {
                best = ch;
            }
        }
        best
    }

    /// Per-pixel winning channel of a `[C, H, W]` tensor.
    pub fn winners(x: &Tensor) -> Vec<usize> {
        let c = x.shape()[0];
        let plane = x.len() / c;
        (0..plane).map(|p| Self::argmax(x.data(), c, plane, p)).collect()
    }

    /// Smallest gap between the largest and second-largest channel over all
    /// pixels; `INFINITY` for a single channel.
    pub fn margin(x: &Tensor) -> f64 {
        let c = x.shape()[0];
        let plane = x.len() / c;
        let d = x.data();
        let mut margin = f64::INFINITY;
        for p in 0..plane {
            let mut top = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = d[ch * plane + p];
                if v > top {
                    second = top;
                    top = v;
                } else if v > second {
                    second = v;
                }
            }
            if c > 1 {
                margin = margin.min(top - second);
            }
        }
        margin
    }
}

/// Spatial mean per channel: `[C, ...] -> [C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.dims() < 2 {
        return Err(Error::shape("global_avg_pool", format!("need [C, spatial...], got {:?}", x.shape())));
    }
    let c = x.shape()[0];
    let per = x.len() / c;
    Ok(Tensor::from_fn([c], |ch| x.data()[ch * per..(ch + 1) * per].iter().sum::<f64>() / per as f64))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let c = input_shape[0];
    if grad_out.shape() != [c] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("gradient {:?} for input {input_shape:?}", grad_out.shape()),
        ));
    }
    let per: usize = input_shape[1..].iter().product();
    let g = grad_out.data();
    Ok(Tensor::from_fn(input_shape.to_vec(), |i| g[i / per] / per as f64))
}

fn check_norm_params(op: &'static str, x: &Tensor, gamma: &Tensor, beta: Option<&Tensor>) -> Result<()> {
    let c = x.shape()[0];
    if gamma.shape() != [c] || beta.is_some_and(|b| b.shape() != [c]) {
        return Err(Error::shape(op, format!("scale/shift must be [{c}] for input {:?}", x.shape())));
    }
    Ok(())
}

/// Normalizes over axis 0 independently at every trailing position, then
/// applies the per-channel scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    check_norm_params("layer_norm", x, gamma, Some(beta))?;
    let c = x.shape()[0];
    let per = x.len() / c;
    let d = x.data();
    let mut out = Tensor::zeros(x.shape().to_vec());
    let o = out.data_mut();
    for p in 0..per {
        let (mean, inv_std) = moments(d, c, per, p);
        for ch in 0..c {
            let i = ch * per + p;
            o[i] = gamma.data()[ch] * (d[i] - mean) * inv_std + beta.data()[ch];
        }
    }
    Ok(out)
}

fn moments(d: &[f64], c: usize, per: usize, p: usize) -> (f64, f64) {
    let mean = (0..c).map(|ch| d[ch * per + p]).sum::<f64>() / c as f64;
    let var = (0..c).map(|ch| (d[ch * per + p] - mean).powi(2)).sum::<f64>() / c as f64;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

#[derive(Clone, Debug)]
pub struct LayerNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn layer_norm_backward(x: &Tensor, gamma: &Tensor, grad_out: &Tensor) -> Result<LayerNormGrads> {
    check_norm_params("layer_norm_backward", x, gamma, None)?;
    x.expect_same_shape(grad_out, "layer_norm_backward")?;
    let c = x.shape()[0];
    let per = x.len() / c;
    let d = x.data();
    let dy = grad_out.data();
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gg = Tensor::zeros([c]);
    let mut gb = Tensor::zeros([c]);
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for p in 0..per {
        let (mean, inv_std) = moments(d, c, per, p);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ch in 0..c {
            let i = ch * per + p;
            xhat[ch] = (d[i] - mean) * inv_std;
            dxhat[ch] = dy[i] * gamma.data()[ch];
            sum_dxhat += dxhat[ch];
            sum_dxhat_xhat += dxhat[ch] * xhat[ch];
            gg.data_mut()[ch] += dy[i] * xhat[ch];
            gb.data_mut()[ch] += dy[i];
        }
        for ch in 0..c {
            gx.data_mut()[ch * per + p] =
                inv_std / c as f64 * (c as f64 * dxhat[ch] - sum_dxhat - xhat[ch] * sum_dxhat_xhat);
        }
    }
    Ok(LayerNormGrads { input: gx, gamma: gg, beta: gb })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    a.expect_dims(2, "transpose")?;
    let (n, m) = (a.shape()[0], a.shape()[1]);
    Ok(Tensor::from_fn([m, n], |i| a.data()[(i % n) * m + i / n]))
}

/// `[n, k] × [k, m] -> [n, m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_dims(2, "matmul")?;
    b.expect_dims(2, "matmul")?;
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    if b.shape()[0] != k {
        return Err(Error::shape("matmul", format!("{:?} × {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new([n, m], out)
}

/// Returns `(dA, dB)` for `C = A B`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(grad_out, &transpose(b)?)?;
    let db = matmul(&transpose(a)?, grad_out)?;
    Ok((da, db))
}

/// `y = x Wᵀ + b` for `x` of shape `[in]` or `[n, in]` and `W` of shape `[out, in]`.
pub fn fully_connected(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, vector) = fc_rows(x, weight, bias)?;
    let out_dim = weight.shape()[0];
    let mut y = matmul(&rows, &transpose(weight)?)?;
    if let Some(b) = bias {
        for row in y.data_mut().chunks_mut(out_dim) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    if vector {
        y.into_shape([out_dim])
    } else {
        Ok(y)
    }
}

fn fc_rows(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<(Tensor, bool)> {
    weight.expect_dims(2, "fully_connected")?;
    let in_dim = weight.shape()[1];
    let (rows, vector) = match x.dims() {
        1 => (x.reshape([1, x.len()])?, true),
        2 => (x.clone(), false),
        _ => return Err(Error::shape("fully_connected", format!("input {:?} is neither [in] nor [n, in]", x.shape()))),
    };
    if rows.shape()[1] != in_dim {
        return Err(Error::shape("fully_connected", format!("input {:?} vs weight {:?}", x.shape(), weight.shape())));
    }
    if let Some(b) = bias {
        if b.shape() != [weight.shape()[0]] {
            return Err(Error::shape(
                "fully_connected",
                format!("bias {:?} vs weight {:?}", b.shape(), weight.shape()),
            ));
        }
    }
    Ok((rows, vector))
}

/// Returns `(dx, dW, db)`.
pub fn fully_connected_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, vector) = fc_rows(x, weight, None)?;
    let out_dim = weight.shape()[0];
    let dy = grad_out.reshape([rows.shape()[0], out_dim])?;
    let dx = matmul(&dy, weight)?;
    let dw = matmul(&transpose(&dy)?, &rows)?;
    let db = Tensor::from_fn([out_dim], |o| dy.data().chunks(out_dim).map(|r| r[o]).sum());
    let dx = if vector { dx.into_shape([x.len()])? } else { dx };
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero() {
        let y = sigmoid(&Tensor::scalar(0.0));
        assert_eq!(y.data(), &[0.5]);
        let g = sigmoid_backward(&y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.data(), &[0.25]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let y = sigmoid(&Tensor::new([2], vec![-800.0, 800.0]).unwrap());
        assert_eq!(y.data(), &[0.0, 1.0]);
        assert!(y.all_finite());
    }

    #[test]
    fn gelu_reference_values() {
        let y = gelu(&Tensor::new([3], vec![0.0, 1.0, -1.0]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((y.data()[2] + 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn channel_pool_avg_and_max() {
        let x = Tensor::new([2, 1, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(channel_pool(&x, PoolMode::Avg).unwrap().data(), &[2.0]);
        assert_eq!(channel_pool(&x, PoolMode::Max).unwrap().data(), &[3.0]);
        let c = Tensor::full([3, 2, 2], 1.5);
        assert!(channel_pool(&c, PoolMode::Avg).unwrap().data().iter().all(|&v| v == 1.5));
        assert!(channel_pool(&c, PoolMode::Max).unwrap().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn gap_of_ramp() {
        let x = Tensor::new([1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.5]);
    }

    #[test]
    fn layer_norm_of_constant_is_shift() {
        let x = Tensor::full([4], 3.0);
        let gamma = Tensor::full([4], 2.0);
        let beta = Tensor::new([4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = layer_norm(&x, &gamma, &beta).unwrap();
        assert_eq!(y.data(), beta.data());
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_fn([2, 3], |i| i as f64);
        let b = Tensor::from_fn([1, 3], |i| 10.0 + i as f64);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        let parts = split_channels(&c, &[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat_channels(&[&a, &Tensor::zeros([1, 2])]).is_err());
    }

    #[test]
    fn transpose_and_fc() {
        let a = Tensor::from_fn([2, 3], |i| i as f64);
        let t = transpose(&a).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.at(&[2, 1]), a.at(&[1, 2]));
        let w = Tensor::from_fn([2, 3], |i| (i as f64) - 2.0);
        let b = Tensor::new([2], vec![0.5, -0.5]).unwrap();
        let y = fully_connected(&Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap(), &w, Some(&b)).unwrap();
        // rows of w: [-2,-1,0], [1,2,3]
        assert_eq!(y.data(), &[-4.0 + 0.5, 14.0 - 0.5]);
    }
}
