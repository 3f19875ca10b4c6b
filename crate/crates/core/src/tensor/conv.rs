use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 2-D or 3-D cross-correlation.
///
/// All per-axis vectors have the same length as the number of spatial axes.
/// `groups == 1` is a full convolution, `groups == channels` is depthwise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub dilation: Vec<usize>,
    pub padding: Vec<usize>,
    pub stride: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: &[usize],
        dilation: &[usize],
        padding: &[usize],
        stride: &[usize],
        groups: usize,
    ) -> Result<Self> {
        let n = kernel.len();
        if !(2..=3).contains(&n) || dilation.len() != n || padding.len() != n || stride.len() != n {
            return Err(Error::InvalidArgument(format!(
                "conv spec axes disagree: kernel {kernel:?}, dilation {dilation:?}, padding {padding:?}, stride {stride:?}"
            )));
        }
        if groups == 0 {
            return Err(Error::InvalidArgument("conv groups must be >= 1".into()));
        }
        for axis in 0..n {
            if kernel[axis] == 0 || dilation[axis] == 0 || stride[axis] == 0 {
                return Err(Error::InvalidArgument(format!(
                    "conv kernel, dilation and stride must be positive (axis {axis})"
                )));
            }
            if padding[axis] > 0 && kernel[axis].is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!(
                    "even kernel extent {} on padded axis {axis}",
                    kernel[axis]
                )));
            }
        }
        Ok(Self {
            kernel: kernel.to_vec(),
            dilation: dilation.to_vec(),
            padding: padding.to_vec(),
            stride: stride.to_vec(),
            groups,
        })
    }

    /// Stride-1 zero padding that preserves spatial extents; kernels must be odd.
    pub fn same(kernel: &[usize], dilation: &[usize], groups: usize) -> Result<Self> {
        if let Some(k) = kernel.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "same padding needs odd kernels, got extent {k} in {kernel:?}"
            )));
        }
        let padding: Vec<usize> = kernel.iter().zip(dilation).map(|(&k, &d)| d * (k - 1) / 2).collect();
        let ones = vec![1; kernel.len()];
        Self::new(kernel, dilation, &padding, &ones, groups)
    }

    pub fn pointwise(axes: usize) -> Self {
        Self {
            kernel: vec![1; axes],
            dilation: vec![1; axes],
            padding: vec![0; axes],
            stride: vec![1; axes],
            groups: 1,
        }
    }

    /// Non-overlapping `size`×`size` patches (kernel = stride, no padding).
    pub fn patchify(size: usize) -> Result<Self> {
        Self::new(&[size, size], &[1, 1], &[0, 0], &[size, size], 1)
    }

    pub fn axes(&self) -> usize {
        self.kernel.len()
    }

    pub fn output_extent(&self, axis: usize, input: usize) -> Option<usize> {
        let span = self.dilation[axis] * (self.kernel[axis] - 1) + 1;
        let padded = input + 2 * self.padding[axis];
        (padded >= span).then(|| (padded - span) / self.stride[axis] + 1)
    }

    /// Weight shape `[c_out, c_in / groups, kernel...]`.
    pub fn weight_shape(&self, c_in: usize, c_out: usize) -> Vec<usize> {
        let mut shape = vec![c_out, c_in / self.groups];
        shape.extend_from_slice(&self.kernel);
        shape
    }

    fn lift(&self) -> Geometry {
        if self.axes() == 3 {
            Geometry {
                kernel: [self.kernel[0], self.kernel[1], self.kernel[2]],
                dilation: [self.dilation[0], self.dilation[1], self.dilation[2]],
                padding: [self.padding[0], self.padding[1], self.padding[2]],
                stride: [self.stride[0], self.stride[1], self.stride[2]],
                groups: self.groups,
            }
        } else {
            Geometry {
                kernel: [1, self.kernel[0], self.kernel[1]],
                dilation: [1, self.dilation[0], self.dilation[1]],
                padding: [0, self.padding[0], self.padding[1]],
                stride: [1, self.stride[0], self.stride[1]],
                groups: self.groups,
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    kernel: [usize; 3],
    dilation: [usize; 3],
    padding: [usize; 3],
    stride: [usize; 3],
    groups: usize,
}

#[derive(Clone, Copy)]
struct Plan {
    geo: Geometry,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Plan {
    fn new(op: &'static str, input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Self> {
        let axes = spec.axes();
        if input.dims() != axes + 1 {
            return Err(Error::shape(op, format!("input {:?} is not [C, {axes} spatial axes]", input.shape())));
        }
        if weight.dims() != axes + 2 {
            return Err(Error::shape(
                op,
                format!("weight {:?} is not [C_out, C_in/groups, kernel...]", weight.shape()),
            ));
        }
        let c_in = input.shape()[0];
        let c_out = weight.shape()[0];
        let groups = spec.groups;
        if !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(Error::shape(op, format!("channels in={c_in} out={c_out} not divisible by groups={groups}")));
        }
        let expected = spec.weight_shape(c_in, c_out);
        if weight.shape() != expected.as_slice() {
            return Err(Error::shape(
                op,
                format!(
                    "input {:?} needs weight {expected:?} for this spec, got weight {:?}",
                    input.shape(),
                    weight.shape()
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(op, format!("bias {:?} for {c_out} output channels", b.shape())));
            }
        }
        let geo = spec.lift();
        let mut in_ext = [1usize; 3];
        in_ext[3 - axes..].copy_from_slice(&input.shape()[1..]);
        let mut out_ext = [1usize; 3];
        for a in 0..3 {
            let span = geo.dilation[a] * (geo.kernel[a] - 1) + 1;
            let padded = in_ext[a] + 2 * geo.padding[a];
            if padded < span {
                return Err(Error::shape(op, format!("input {:?} smaller than kernel span {span}", input.shape())));
            }
            out_ext[a] = (padded - span) / geo.stride[a] + 1;
        }
        Ok(Self { geo, c_in, c_out, input: in_ext, output: out_ext })
    }

    fn output_shape(&self, axes: usize) -> Vec<usize> {
        let mut shape = vec![self.c_out];
        shape.extend_from_slice(&self.output[3 - axes..]);
        shape
    }

    /// Input coordinate touched by output `o` at kernel tap `k` along `axis`.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.geo.stride[axis] + k * self.geo.dilation[axis]) as isize - self.geo.padding[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    /// Calls `f(out_offset, in_offset, weight_offset)` for every multiply-add.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [kd, kh, kw] = self.geo.kernel;
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let cin_g = self.c_in / self.geo.groups;
        let cout_g = self.c_out / self.geo.groups;
        for co in 0..self.c_out {
            let group = co / cout_g;
            for cig in 0..cin_g {
                let ci = group * cin_g + cig;
                for z in 0..kd {
                    for y in 0..kh {
                        for x in 0..kw {
                            let w_off = (((co * cin_g + cig) * kd + z) * kh + y) * kw + x;
                            for oz in 0..od {
                                let Some(iz) = self.source(0, oz, z) else { continue };
                                for oy in 0..oh {
                                    let Some(iy) = self.source(1, oy, y) else { continue };
                                    let out_row = ((co * od + oz) * oh + oy) * ow;
                                    let in_row = ((ci * id + iz) * ih + iy) * iw;
                                    for ox in 0..ow {
                                        if let Some(ix) = self.source(2, ox, x) {
                                            f(out_row + ox, in_row + ix, w_off);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(
    op: &'static str,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let plan = Plan::new(op, input, weight, bias, spec)?;
    let mut out = Tensor::zeros(plan.output_shape(spec.axes()));
    let per_channel: usize = plan.output.iter().product();
    if let Some(b) = bias {
        for (chunk, &bv) in out.data_mut().chunks_mut(per_channel).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v = bv);
        }
    }
    let x = input.data();
    let w = weight.data();
    let y = out.data_mut();
    plan.for_each_tap(|o, i, k| y[o] += w[k] * x[i]);
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

fn conv_backward(
    op: &'static str,
    input: &Tensor,
    weight: &Tensor,
    with_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let plan = Plan::new(op, input, weight, None, spec)?;
    let out_shape = plan.output_shape(spec.axes());
    if grad_out.shape() != out_shape.as_slice() {
        return Err(Error::shape(op, format!("output gradient {:?}, expected {out_shape:?}", grad_out.shape())));
    }
    let mut gx = Tensor::zeros(input.shape().to_vec());
    let mut gw = Tensor::zeros(weight.shape().to_vec());
    {
        let x = input.data();
        let w = weight.data();
        let dy = grad_out.data();
        let gxd = gx.data_mut();
        // Two passes keep both accumulators mutably borrowed in turn.
        plan.for_each_tap(|o, i, k| gxd[i] += w[k] * dy[o]);
        let gwd = gw.data_mut();
        plan.for_each_tap(|o, i, k| gwd[k] += x[i] * dy[o]);
    }
    let bias = with_bias.then(|| {
        let per_channel: usize = plan.output.iter().product();
        Tensor::from_fn([plan.c_out], |c| grad_out.data()[c * per_channel..(c + 1) * per_channel].iter().sum())
    });
    Ok(ConvGrads { input: gx, weight: gw, bias })
}

fn expect_axes(spec: &ConvSpec, axes: usize, op: &'static str) -> Result<()> {
    if spec.axes() != axes {
        return Err(Error::InvalidArgument(format!("{op} needs a {axes}-axis spec, got {} axes", spec.axes())));
    }
    Ok(())
}

/// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in/groups, kh, kw]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    expect_axes(spec, 2, "conv2d")?;
    conv_forward("conv2d", input, weight, bias, spec)
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    with_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    expect_axes(spec, 2, "conv2d")?;
    conv_backward("conv2d", input, weight, with_bias, spec, grad_out)
}

/// Cross-correlation of `[C_in, D, H, W]` with `[C_out, C_in/groups, kd, kh, kw]`.
pub fn conv3d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    expect_axes(spec, 3, "conv3d")?;
    conv_forward("conv3d", input, weight, bias, spec)
}

pub fn conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    with_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    expect_axes(spec, 3, "conv3d")?;
    conv_backward("conv3d", input, weight, with_bias, spec, grad_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depthwise_box_on_constant_input() {
        let x = Tensor::full([1, 3, 3], 1.0);
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        let spec = ConvSpec::same(&[3, 3], &[1, 1], 1).unwrap();
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 1]), 6.0);
    }

    #[test]
    fn pointwise_identity() {
        let x = Tensor::from_fn([3, 2, 2], |i| i as f64 * 0.5 - 1.0);
        let w = Tensor::from_fn([3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::zeros([3]);
        let y = conv2d(&x, &w, Some(&b), &ConvSpec::pointwise(2)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros([3, 4, 4]);
        let w = Tensor::zeros([2, 2, 1, 1]);
        let err = conv2d(&x, &w, None, &ConvSpec::pointwise(2)).unwrap_err().to_string();
        assert!(err.contains("[3, 4, 4]") && err.contains("[2, 2, 1, 1]"), "{err}");
    }

    #[test]
    fn even_kernel_on_padded_axis_rejected() {
        assert!(ConvSpec::same(&[1, 2, 3], &[1, 1, 1], 1).is_err());
        assert!(ConvSpec::new(&[1, 4, 3], &[1, 1, 1], &[0, 1, 1], &[1, 1, 1], 1).is_err());
        assert!(ConvSpec::new(&[2, 2], &[1, 1], &[0, 0], &[2, 2], 1).is_ok());
    }

    #[test]
    fn patchify_halves_extent() {
        let x = Tensor::from_fn([2, 4, 4], |i| i as f64);
        let w = Tensor::full([3, 2, 2, 2], 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::patchify(2).unwrap()).unwrap();
        assert_eq!(y.shape(), &[3, 2, 2]);
        // top-left 2x2 block, both channels: (0+1+4+5) + (16+17+20+21)
        assert_eq!(y.at(&[0, 0, 0]), 84.0);
    }

    #[test]
    fn same_padding_preserves_extents_3d() {
        let spec = ConvSpec::same(&[1, 3, 3], &[1, 1, 1], 6).unwrap();
        let x = Tensor::zeros([6, 4, 5, 3]);
        let w = Tensor::zeros([6, 1, 1, 3, 3]);
        let y = conv3d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), x.shape());
    }
}
