//! Learnable layers and the parameter-visiting machinery shared by every block.
//!
//! A parameter bundle doubles as its own gradient shadow: gradients are
//! accumulated into a value of the same type (see [`zeros_like`]), so the two
//! always have identical tensor shapes and visiting order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{self, ConvSpec, Tensor};

/// Ordered traversal of every learnable tensor in a bundle.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_tensors<P: Parameters + ?Sized>(params: &P) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    params.visit("", &mut |name, t| out.push((name, t)));
    out
}

pub fn count_parameters<P: Parameters + ?Sized>(params: &P) -> usize {
    let mut n = 0;
    params.visit("", &mut |_, t| n += t.len());
    n
}

pub fn zeros_like<P: Parameters + Clone>(params: &P) -> P {
    let mut z = params.clone();
    z.visit_mut(&mut |t| t.fill(0.0));
    z
}

/// `target += source`, tensor by tensor.
pub fn accumulate<P: Parameters>(target: &mut P, source: &P) -> Result<()> {
    let sources: Vec<Tensor> = named_tensors(source).into_iter().map(|(_, t)| t.clone()).collect();
    let mut i = 0;
    let mut status = Ok(());
    target.visit_mut(&mut |t| {
        if status.is_ok() {
            status = t.add_assign(&sources[i]);
        }
        i += 1;
    });
    status
}

/// Overwrites every tensor with i.i.d. normal draws; used by gradient checks.
pub fn randomize<P: Parameters>(params: &mut P, std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("finite std");
    params.visit_mut(&mut |t| t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng)));
}

/// Normal draws with standard deviation `std`, redrawn outside ±2·std.
pub fn trunc_normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

pub const INIT_STD: f64 = 0.02;

/// 2-D or 3-D convolution with an optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(c_in: usize, c_out: usize, spec: ConvSpec, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: trunc_normal(spec.weight_shape(c_in, c_out), INIT_STD, rng),
            bias: bias.then(|| Tensor::zeros([c_out])),
            spec,
        }
    }

    /// Depthwise, odd-kernel, same-padded, no bias.
    pub fn depthwise(channels: usize, kernel: &[usize], dilation: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let spec = ConvSpec::same(kernel, dilation, channels)?;
        Ok(Self::new(channels, channels, spec, false, rng))
    }

    /// 1×1 (or 1×1×1) channel mixing with bias.
    pub fn pointwise(axes: usize, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self::new(c_in, c_out, ConvSpec::pointwise(axes), true, rng)
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.spec.axes() {
            2 => tensor::conv2d(x, &self.weight, self.bias.as_ref(), &self.spec),
            _ => tensor::conv3d(x, &self.weight, self.bias.as_ref(), &self.spec),
        }
    }

    /// Accumulates parameter gradients into `grads`, returns the input gradient.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: &mut Conv) -> Result<Tensor> {
        let g = match self.spec.axes() {
            2 => tensor::conv2d_backward(x, &self.weight, self.bias.is_some(), &self.spec, grad_out)?,
            _ => tensor::conv3d_backward(x, &self.weight, self.bias.is_some(), &self.spec, grad_out)?,
        };
        grads.weight.add_assign(&g.weight)?;
        if let (Some(acc), Some(gb)) = (grads.bias.as_mut(), g.bias.as_ref()) {
            acc.add_assign(gb)?;
        }
        Ok(g.input)
    }
}

impl Parameters for Conv {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self { weight: trunc_normal([d_out, d_in], INIT_STD, rng), bias: Tensor::zeros([d_out]) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::fully_connected(x, &self.weight, Some(&self.bias))
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: &mut Linear) -> Result<Tensor> {
        let (dx, dw, db) = tensor::fully_connected_backward(x, &self.weight, grad_out)?;
        grads.weight.add_assign(&dw)?;
        grads.bias.add_assign(&db)?;
        Ok(dx)
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Layer normalization over the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        Self { gamma: Tensor::full([channels], 1.0), beta: Tensor::zeros([channels]) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::layer_norm(x, &self.gamma, &self.beta)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: &mut LayerNorm) -> Result<Tensor> {
        let g = tensor::layer_norm_backward(x, &self.gamma, grad_out)?;
        grads.gamma.add_assign(&g.gamma)?;
        grads.beta.add_assign(&g.beta)?;
        Ok(g.input)
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for p in self {
            p.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_follow_declaration_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = vec![Linear::new(3, 2, &mut rng), Linear::new(2, 1, &mut rng)];
        let names: Vec<String> = named_tensors(&layers).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["0.weight", "0.bias", "1.weight", "1.bias"]);
        assert_eq!(count_parameters(&layers), 6 + 2 + 2 + 1);
    }

    #[test]
    fn trunc_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = trunc_normal([1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        assert!(t.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn accumulate_adds_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Linear::new(2, 2, &mut rng);
        let mut acc = zeros_like(&a);
        accumulate(&mut acc, &a).unwrap();
        accumulate(&mut acc, &a).unwrap();
        assert_eq!(acc.weight, tensor::scale(&a.weight, 2.0));
    }
}
