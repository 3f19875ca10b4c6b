//! Central finite differences against the hand-written backward passes.
//!
//! The scalar objective is `L = Σ r ⊙ f(θ, x)` for a fixed random `r`, so the
//! analytic gradient comes from a single backward pass seeded with `r`.
//! Selection steps (top-k masks, channel max) are piecewise constant, so an
//! evaluation point is redrawn whenever any selection sits closer than
//! `margin` to a tie, and a coordinate is skipped when either probe flips a
//! discrete choice.

use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::FfnParams;
use crate::ksa::{KsaCache, KsaParams, KstbCache, KstbParams};
use crate::model::{ModelCache, ModelConfig, ModelParams};
use crate::nn::{join, randomize, zeros_like, Conv, LayerNorm, Linear, Parameters};
use crate::tensor::{self, ChannelPool, ConvSpec, PoolMode, SelectionMask, SelectionRate, Tensor};
use crate::tsa::{TsaCache, TsaParams, TstbCache, TstbParams};

/// A block with a hand-written backward pass.
pub trait Differentiable: Parameters + Clone {
    type Cache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Self::Cache)>;

    /// Accumulates parameter gradients into `grads`; returns the input gradient.
    fn backward(&self, cache: &Self::Cache, grad_out: &Tensor, grads: &mut Self) -> Result<Tensor>;

    /// Distance of the closest discrete selection to a tie.
    fn margin(_cache: &Self::Cache) -> f64 {
        f64::INFINITY
    }

    /// Every discrete choice made in the forward pass.
    fn fingerprint(_cache: &Self::Cache, _out: &mut Vec<usize>) {}

    /// Whether the input tensor is differentiated too.
    fn checks_input(&self) -> bool {
        true
    }
}

macro_rules! layer {
    ($ty:ty) => {
        impl Differentiable for $ty {
            type Cache = Tensor;

            fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
                Ok((<$ty>::forward(self, x)?, x.clone()))
            }

            fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: &mut Self) -> Result<Tensor> {
                <$ty>::backward(self, x, grad_out, grads)
            }
        }
    };
}

layer!(Conv);
layer!(Linear);
layer!(LayerNorm);

impl Differentiable for FfnParams {
    type Cache = crate::ffn::FfnCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Self::Cache)> {
        FfnParams::forward(self, x)
    }

    fn backward(&self, cache: &Self::Cache, grad_out: &Tensor, grads: &mut Self) -> Result<Tensor> {
        FfnParams::backward(self, cache, grad_out, grads)
    }
}

impl Differentiable for KsaParams {
    type Cache = KsaCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, KsaCache)> {
        KsaParams::forward(self, x)
    }

    fn backward(&self, cache: &KsaCache, grad_out: &Tensor, grads: &mut Self) -> Result<Tensor> {
        KsaParams::backward(self, cache, grad_out, grads)
    }

    fn margin(cache: &KsaCache) -> f64 {
        cache.selection_margin()
    }

    fn fingerprint(cache: &KsaCache, out: &mut Vec<usize>) {
        cache.fingerprint(out)
    }
}

impl Differentiable for KstbParams {
    type Cache = KstbCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, KstbCache)> {
        KstbParams::forward(self, x)
    }

    fn backward(&self, cache: &KstbCache, grad_out: &Tensor, grads: &mut Self) -> Result<Tensor> {
        KstbParams::backward(self, cache, grad_out, grads)
    }

    fn margin(cache: &KstbCache) -> f64 {
        cache.ksa().selection_margin()
    }

    fn fingerprint(cache: &KstbCache, out: &mut Vec<usize>) {
        cache.ksa().fingerprint(out)
    }
}

impl Differentiable for TsaParams {
    type Cache = TsaCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, TsaCache)> {
        TsaParams::forward(self, x)
    }

    fn backward(&self, cache: &TsaCache, grad_out: &Tensor, grads: &mut Self) -> Result<Tensor> {
        TsaParams::backward(self, cache, grad_out, grads)
    }

    fn margin(cache: &TsaCache) -> f64 {
        cache.selection_margin()
    }

    fn fingerprint(cache: &TsaCache, out: &mut Vec<usize>) {
        cache.fingerprint(out)
    }
}

impl Differentiable for TstbParams {
    type Cache = TstbCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, TstbCache)> {
        TstbParams::forward(self, x)
    }

    fn backward(&self, cache: &TstbCache, grad_out: &Tensor, grads: &mut Self) -> Result<Tensor> {
        TstbParams::backward(self, cache, grad_out, grads)
    }

    fn margin(cache: &TstbCache) -> f64 {
        cache.tsa().selection_margin()
    }

    fn fingerprint(cache: &TstbCache, out: &mut Vec<usize>) {
        cache.tsa().fingerprint(out)
    }
}

impl Differentiable for ModelParams {
    type Cache = ModelCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, ModelCache)> {
        self.forward_sample(x)
    }

    fn backward(&self, cache: &ModelCache, grad_out: &Tensor, grads: &mut Self) -> Result<Tensor> {
        self.backward_sample(cache, grad_out, grads)
    }

    fn margin(cache: &ModelCache) -> f64 {
        cache.selection_margin()
    }

    fn fingerprint(cache: &ModelCache, out: &mut Vec<usize>) {
        cache.fingerprint(out)
    }
}

/// Output, selection margin and fingerprint of a stateless op.
pub type OpForward = Arc<dyn Fn(&[Tensor]) -> Result<(Tensor, f64, Vec<usize>)> + Send + Sync>;
/// Gradient of every operand given the operands and the output gradient.
pub type OpBackward = Arc<dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>> + Send + Sync>;

/// A stateless tensor op whose operands are all treated as parameters.
#[derive(Clone)]
pub struct OpCase {
    pub operands: Vec<Tensor>,
    forward: OpForward,
    backward: OpBackward,
}

impl OpCase {
    pub fn new(operands: Vec<Tensor>, forward: OpForward, backward: OpBackward) -> Self {
        Self { operands, forward, backward }
    }

    /// A smooth op without discrete choices.
    pub fn smooth(
        operands: Vec<Tensor>,
        forward: impl Fn(&[Tensor]) -> Result<Tensor> + Send + Sync + 'static,
        backward: impl Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>> + Send + Sync + 'static,
    ) -> Self {
        Self::new(operands, Arc::new(move |ops| Ok((forward(ops)?, f64::INFINITY, Vec::new()))), Arc::new(backward))
    }
}

impl Parameters for OpCase {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, t) in self.operands.iter().enumerate() {
            f(join(prefix, &i.to_string()), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.operands.iter_mut().for_each(f);
    }
}

impl Differentiable for OpCase {
    type Cache = (f64, Vec<usize>);

    fn forward(&self, _x: &Tensor) -> Result<(Tensor, Self::Cache)> {
        let (y, margin, fp) = (self.forward)(&self.operands)?;
        Ok((y, (margin, fp)))
    }

    fn backward(&self, _cache: &Self::Cache, grad_out: &Tensor, grads: &mut Self) -> Result<Tensor> {
        let g = (self.backward)(&self.operands, grad_out)?;
        if g.len() != grads.operands.len() {
            return Err(Error::shape(
                "gradcheck op",
                format!("{} gradients for {} operands", g.len(), grads.operands.len()),
            ));
        }
        for (acc, gi) in grads.operands.iter_mut().zip(&g) {
            acc.add_assign(gi)?;
        }
        Ok(Tensor::scalar(0.0))
    }

    fn margin(cache: &Self::Cache) -> f64 {
        cache.0
    }

    fn fingerprint(cache: &Self::Cache, out: &mut Vec<usize>) {
        out.extend_from_slice(&cache.1)
    }

    fn checks_input(&self) -> bool {
        false
    }
}

/// Relative errors use `max(|a|, |n|, floor)` as the denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates drawn from each tensor (all of them for smaller tensors).
    pub per_tensor: usize,
    pub margin: f64,
    pub floor: f64,
    pub tolerance: f64,
    pub max_resamples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            per_tensor: 6,
            margin: 1e-3,
            floor: REL_ERROR_FLOOR,
            tolerance: 1e-4,
            max_resamples: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub module: String,
    pub checked: usize,
    /// Coordinates whose probes flipped a discrete selection.
    pub skipped: usize,
    /// Evaluation points redrawn for falling under the margin.
    pub resamples: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<String>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

fn nudge<P: Parameters>(params: &mut P, tensor: usize, elem: usize, delta: f64) {
    let mut i = 0;
    params.visit_mut(&mut |t| {
        if i == tensor {
            t.data_mut()[elem] += delta;
        }
        i += 1;
    });
}

struct Probe {
    loss: f64,
    fingerprint: Vec<usize>,
}

fn probe<M: Differentiable>(module: &M, x: &Tensor, r: &Tensor) -> Result<Probe> {
    let (y, cache) = module.forward(x)?;
    let mut fingerprint = Vec::new();
    M::fingerprint(&cache, &mut fingerprint);
    Ok(Probe { loss: y.dot(r)?, fingerprint })
}

/// Draws evaluation points from `sample` until one clears the selection
/// margin, then compares analytic and numerical derivatives coordinate by
/// coordinate.
pub fn gradcheck<M: Differentiable>(
    name: &str,
    config: &GradCheckConfig,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Result<(M, Tensor)>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut resamples = 0;
    let (mut module, mut x, y, cache) = loop {
        let (module, x) = sample(&mut rng)?;
        let (y, cache) = module.forward(&x)?;
        if M::margin(&cache) >= config.margin {
            break (module, x, y, cache);
        }
        resamples += 1;
        if resamples > config.max_resamples {
            return Err(Error::Numerical(format!(
                "{name}: no evaluation point cleared the selection margin {} in {} draws",
                config.margin, config.max_resamples
            )));
        }
    };
    let r = Tensor::from_fn(y.shape().to_vec(), |_| StandardNormal.sample(&mut rng));
    let mut grads = zeros_like(&module);
    let dx = module.backward(&cache, &r, &mut grads)?;
    let mut base = Vec::new();
    M::fingerprint(&cache, &mut base);
    drop(cache);

    let analytic: Vec<(String, Tensor)> =
        crate::nn::named_tensors(&grads).into_iter().map(|(n, t)| (n, t.clone())).collect();
    let h = config.step;
    let mut report = GradCheckReport {
        module: name.to_string(),
        checked: 0,
        skipped: 0,
        resamples,
        max_rel_error: 0.0,
        worst: None,
        tolerance: config.tolerance,
    };
    let record = |label: String, a: f64, plus: &Probe, minus: &Probe, report: &mut GradCheckReport| {
        if plus.fingerprint != base || minus.fingerprint != base {
            report.skipped += 1;
            return;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(format!("{label}: analytic {a:.6e}, numeric {numeric:.6e}"));
        }
    };

    for (t, (tname, g)) in analytic.iter().enumerate() {
        let picks = draw(g.len(), config.per_tensor, &mut rng);
        for e in picks {
            nudge(&mut module, t, e, h);
            let plus = probe(&module, &x, &r)?;
            nudge(&mut module, t, e, -2.0 * h);
            let minus = probe(&module, &x, &r)?;
            nudge(&mut module, t, e, h);
            record(format!("{tname}[{e}]"), g.data()[e], &plus, &minus, &mut report);
        }
    }
    if module.checks_input() {
        for e in draw(x.len(), config.per_tensor, &mut rng) {
            let orig = x.data()[e];
            x.data_mut()[e] = orig + h;
            let plus = probe(&module, &x, &r)?;
            x.data_mut()[e] = orig - h;
            let minus = probe(&module, &x, &r)?;
            x.data_mut()[e] = orig;
            record(format!("input[{e}]"), dx.data()[e], &plus, &minus, &mut report);
        }
    }
    Ok(report)
}

fn draw(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut v = index::sample(rng, len, count).into_vec();
    v.sort_unstable();
    v
}

fn normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(&mut *rng);
        std * v
    })
}

/// Scale applied to freshly initialised blocks so that attention scores are
/// spread out enough to clear the selection margin.
pub const PARAM_STD: f64 = 0.5;
/// The stacked model needs a slightly wider spread than a single block.
pub const MODEL_PARAM_STD: f64 = 0.6;

pub fn check_ksa(config: &GradCheckConfig) -> Result<GradCheckReport> {
    gradcheck("ksa", config, |rng| {
        let mut block = KsaParams::new(4, rng)?;
        randomize(&mut block, PARAM_STD, rng);
        Ok((block, normal([4, 5, 5], 1.0, rng)))
    })
}

pub fn check_kstb(config: &GradCheckConfig) -> Result<GradCheckReport> {
    gradcheck("kstb", config, |rng| {
        let mut block = KstbParams::new(4, 1, rng)?;
        randomize(&mut block, PARAM_STD, rng);
        Ok((block, normal([4, 4, 4], 1.0, rng)))
    })
}

pub fn check_tsa(config: &GradCheckConfig, rate: SelectionRate) -> Result<GradCheckReport> {
    gradcheck(&format!("tsa(k={})", rate.value()), config, |rng| {
        let mut block = TsaParams::new(8, 2, 2, rate, rng)?;
        randomize(&mut block, PARAM_STD, rng);
        Ok((block, normal([8, 2, 3], 1.0, rng)))
    })
}

pub fn check_tstb(config: &GradCheckConfig, rate: SelectionRate) -> Result<GradCheckReport> {
    gradcheck(&format!("tstb(k={})", rate.value()), config, |rng| {
        let mut block = TstbParams::new(8, 2, 2, rate, 1, rng)?;
        randomize(&mut block, PARAM_STD, rng);
        Ok((block, normal([8, 2, 2], 1.0, rng)))
    })
}

pub fn check_ffn(config: &GradCheckConfig) -> Result<GradCheckReport> {
    gradcheck("ffn", config, |rng| {
        let mut block = FfnParams::new(4, 2, rng)?;
        randomize(&mut block, PARAM_STD, rng);
        Ok((block, normal([4, 3, 3], 1.0, rng)))
    })
}

/// The tiny classifier on a 4-band, 3-class problem.
pub fn check_model(config: &GradCheckConfig) -> Result<GradCheckReport> {
    gradcheck("model(tiny)", config, |rng| {
        let mut model = ModelParams::new(ModelConfig::tiny(4, 3), rng)?;
        randomize(&mut model, MODEL_PARAM_STD, rng);
        Ok((model, normal([4, 4, 4], 1.0, rng)))
    })
}

fn conv_case(dims: &[usize], c_in: usize, c_out: usize, spec: ConvSpec, rng: &mut ChaCha8Rng) -> OpCase {
    let three = spec.axes() == 3;
    let mut shape = vec![c_in];
    shape.extend_from_slice(dims);
    let operands =
        vec![normal(shape, 1.0, rng), normal(spec.weight_shape(c_in, c_out), 1.0, rng), normal([c_out], 1.0, rng)];
    let fspec = spec.clone();
    OpCase::smooth(
        operands,
        move |o| {
            if three {
                tensor::conv3d(&o[0], &o[1], Some(&o[2]), &fspec)
            } else {
                tensor::conv2d(&o[0], &o[1], Some(&o[2]), &fspec)
            }
        },
        move |o, dy| {
            let g = if three {
                tensor::conv3d_backward(&o[0], &o[1], true, &spec, dy)?
            } else {
                tensor::conv2d_backward(&o[0], &o[1], true, &spec, dy)?
            };
            Ok(vec![g.input, g.weight, g.bias.expect("bias requested")])
        },
    )
}

fn topk_softmax(x: &Tensor, rate: SelectionRate) -> Result<(Tensor, SelectionMask)> {
    let (masked, mask) = tensor::topk_row_threshold(x, rate)?;
    Ok((tensor::softmax_rows(&masked)?, mask))
}

/// One case per tensor op, each with its own operands.
pub fn op_cases(rng: &mut ChaCha8Rng) -> Result<Vec<(String, OpCase)>> {
    let mut cases: Vec<(String, OpCase)> = Vec::new();
    let mut push = |name: &str, case: OpCase| cases.push((name.to_string(), case));

    push("conv2d 3x3", conv_case(&[5, 4], 3, 2, ConvSpec::same(&[3, 3], &[1, 1], 1)?, rng));
    push("conv2d dilated depthwise", conv_case(&[7, 7], 2, 2, ConvSpec::same(&[5, 5], &[2, 2], 2)?, rng));
    push("conv2d grouped", conv_case(&[4, 4], 4, 6, ConvSpec::same(&[3, 3], &[1, 1], 2)?, rng));
    push("conv2d patchify", conv_case(&[4, 6], 3, 2, ConvSpec::patchify(2)?, rng));
    push("conv2d strided", conv_case(&[6, 5], 2, 3, ConvSpec::new(&[3, 3], &[1, 1], &[1, 1], &[2, 2], 1)?, rng));
    push("conv3d pointwise", conv_case(&[2, 3, 3], 2, 6, ConvSpec::pointwise(3), rng));
    push("conv3d depthwise 1x3x3", conv_case(&[2, 3, 4], 3, 3, ConvSpec::same(&[1, 3, 3], &[1, 1, 1], 3)?, rng));

    push(
        "sigmoid",
        OpCase::smooth(
            vec![normal([3, 4], 2.0, rng)],
            |o| Ok(tensor::sigmoid(&o[0])),
            |o, dy| Ok(vec![tensor::sigmoid_backward(&tensor::sigmoid(&o[0]), dy)?]),
        ),
    );
    push(
        "gelu",
        OpCase::smooth(
            vec![normal([3, 4], 2.0, rng)],
            |o| Ok(tensor::gelu(&o[0])),
            |o, dy| Ok(vec![tensor::gelu_backward(&o[0], dy)?]),
        ),
    );
    push(
        "add",
        OpCase::smooth(
            vec![normal([2, 3], 1.0, rng), normal([2, 3], 1.0, rng)],
            |o| tensor::add(&o[0], &o[1]),
            |_, dy| Ok(vec![dy.clone(), dy.clone()]),
        ),
    );
    push(
        "mul",
        OpCase::smooth(
            vec![normal([2, 3], 1.0, rng), normal([2, 3], 1.0, rng)],
            |o| tensor::mul(&o[0], &o[1]),
            |o, dy| Ok(vec![tensor::mul(dy, &o[1])?, tensor::mul(dy, &o[0])?]),
        ),
    );
    push(
        "scale",
        OpCase::smooth(
            vec![normal([5], 1.0, rng)],
            |o| Ok(tensor::scale(&o[0], -1.7)),
            |_, dy| Ok(vec![tensor::scale(dy, -1.7)]),
        ),
    );
    push(
        "concat/split channels",
        OpCase::smooth(
            vec![normal([1, 2, 2], 1.0, rng), normal([3, 2, 2], 1.0, rng)],
            |o| tensor::concat_channels(&[&o[0], &o[1]]),
            |_, dy| tensor::split_channels(dy, &[1, 3]),
        ),
    );
    push(
        "transpose",
        OpCase::smooth(
            vec![normal([3, 5], 1.0, rng)],
            |o| tensor::transpose(&o[0]),
            |_, dy| Ok(vec![tensor::transpose(dy)?]),
        ),
    );
    push(
        "matmul",
        OpCase::smooth(
            vec![normal([3, 4], 1.0, rng), normal([4, 2], 1.0, rng)],
            |o| tensor::matmul(&o[0], &o[1]),
            |o, dy| {
                let (a, b) = tensor::matmul_backward(&o[0], &o[1], dy)?;
                Ok(vec![a, b])
            },
        ),
    );
    push(
        "fully_connected",
        OpCase::smooth(
            vec![normal([3, 4], 1.0, rng), normal([2, 4], 1.0, rng), normal([2], 1.0, rng)],
            |o| tensor::fully_connected(&o[0], &o[1], Some(&o[2])),
            |o, dy| {
                let (dx, dw, db) = tensor::fully_connected_backward(&o[0], &o[1], dy)?;
                Ok(vec![dx, dw, db])
            },
        ),
    );
    push(
        "layer_norm",
        OpCase::smooth(
            vec![normal([4, 2, 3], 1.0, rng), normal([4], 1.0, rng), normal([4], 1.0, rng)],
            |o| tensor::layer_norm(&o[0], &o[1], &o[2]),
            |o, dy| {
                let g = tensor::layer_norm_backward(&o[0], &o[1], dy)?;
                Ok(vec![g.input, g.gamma, g.beta])
            },
        ),
    );
    push(
        "global_avg_pool",
        OpCase::smooth(
            vec![normal([3, 2, 4], 1.0, rng)],
            |o| tensor::global_avg_pool(&o[0]),
            |o, dy| Ok(vec![tensor::global_avg_pool_backward(o[0].shape(), dy)?]),
        ),
    );
    push(
        "channel_pool avg",
        OpCase::smooth(
            vec![normal([3, 2, 3], 1.0, rng)],
            |o| tensor::channel_pool(&o[0], PoolMode::Avg),
            |o, dy| Ok(vec![tensor::channel_pool_backward(&o[0], PoolMode::Avg, dy)?]),
        ),
    );
    push(
        "channel_pool max",
        OpCase::new(
            vec![normal([3, 2, 3], 1.0, rng)],
            Arc::new(|o| {
                Ok((
                    tensor::channel_pool(&o[0], PoolMode::Max)?,
                    ChannelPool::margin(&o[0]),
                    ChannelPool::winners(&o[0]),
                ))
            }),
            Arc::new(|o, dy| Ok(vec![tensor::channel_pool_backward(&o[0], PoolMode::Max, dy)?])),
        ),
    );
    push(
        "softmax_rows",
        OpCase::smooth(
            vec![normal([3, 5], 2.0, rng)],
            |o| tensor::softmax_rows(&o[0]),
            |o, dy| Ok(vec![tensor::softmax_rows_backward(&tensor::softmax_rows(&o[0])?, dy)?]),
        ),
    );
    let rate = SelectionRate::new(0.5)?;
    push(
        "topk + softmax",
        OpCase::new(
            vec![normal([4, 6], 2.0, rng)],
            Arc::new(move |o| {
                let (y, mask) = topk_softmax(&o[0], rate)?;
                let bits = mask.bits().iter().map(|&b| b as usize).collect();
                Ok((y, mask.min_margin(), bits))
            }),
            Arc::new(move |o, dy| {
                let (y, mask) = topk_softmax(&o[0], rate)?;
                let g = tensor::softmax_rows_backward(&y, dy)?;
                Ok(vec![tensor::topk_backward(&mask, &g)?])
            }),
        ),
    );
    Ok(cases)
}

pub fn check_ops(config: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let names: Vec<String> = op_cases(&mut rng)?.into_iter().map(|(n, _)| n).collect();
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            gradcheck(name, config, |rng| {
                let (_, case) = op_cases(rng)?.swap_remove(i);
                Ok((case, Tensor::scalar(0.0)))
            })
        })
        .collect()
}

/// Every op, every block, and the tiny model.
pub fn check_all(config: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let half = SelectionRate::new(0.5)?;
    let mut reports = check_ops(config)?;
    reports.push(check_ffn(config)?);
    reports.push(check_ksa(config)?);
    reports.push(check_kstb(config)?);
    reports.push(check_tsa(config, half)?);
    reports.push(check_tsa(config, SelectionRate::DENSE)?);
    reports.push(check_tstb(config, half)?);
    reports.push(check_model(config)?);
    Ok(reports)
}
