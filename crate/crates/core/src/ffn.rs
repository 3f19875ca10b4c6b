use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Conv, Parameters};
use crate::tensor::{self, Tensor};

/// Feed-forward sublayer on a `[c, h, w]` map: 1×1 expand, depthwise 3×3, GELU, 1×1 project.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub fc_in: Conv,
    pub dw: Conv,
    pub fc_out: Conv,
}

pub struct FfnCache {
    input: Tensor,
    expanded: Tensor,
    mixed: Tensor,
    activated: Tensor,
}

impl FfnParams {
    pub fn new(channels: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("ffn expansion ratio must be >= 1".into()));
        }
        let hidden = channels * ratio;
        Ok(Self {
            fc_in: Conv::pointwise(2, channels, hidden, rng),
            dw: Conv::depthwise(hidden, &[3, 3], &[1, 1], rng)?,
            fc_out: Conv::pointwise(2, hidden, channels, rng),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, FfnCache)> {
        let expanded = self.fc_in.forward(x)?;
        let mixed = self.dw.forward(&expanded)?;
        let activated = tensor::gelu(&mixed);
        let out = self.fc_out.forward(&activated)?;
        Ok((out, FfnCache { input: x.clone(), expanded, mixed, activated }))
    }

    pub fn backward(&self, cache: &FfnCache, grad_out: &Tensor, grads: &mut FfnParams) -> Result<Tensor> {
        let g = self.fc_out.backward(&cache.activated, grad_out, &mut grads.fc_out)?;
        let g = tensor::gelu_backward(&cache.mixed, &g)?;
        let g = self.dw.backward(&cache.expanded, &g, &mut grads.dw)?;
        self.fc_in.backward(&cache.input, &g, &mut grads.fc_in)
    }
}

impl Parameters for FfnParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.fc_in.visit(&join(prefix, "fc_in"), f);
        self.dw.visit(&join(prefix, "dw"), f);
        self.fc_out.visit(&join(prefix, "fc_out"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.fc_in.visit_mut(f);
        self.dw.visit_mut(f);
        self.fc_out.visit_mut(f);
    }
}
