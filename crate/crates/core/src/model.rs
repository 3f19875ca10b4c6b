//! Full classifier: 3×3 stem, patch embedding, selective transformer groups,
//! spatial readout, layer norm and a fully connected head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ksa::{KsaTrace, KstbCache, KstbParams};
use crate::nn::{self, join, Conv, LayerNorm, Linear, Parameters};
use crate::tensor::{ConvSpec, SelectionRate, Tensor};
use crate::tsa::{HeadGeometry, SelectiveAttentionTrace, TstbCache, TstbParams};

/// How the final feature map is reduced to one vector per patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    MeanPool,
    CenterToken,
}

impl Readout {
    pub fn apply(self, features: &Tensor) -> Result<Tensor> {
        features.expect_dims(3, "readout")?;
        let c = features.shape()[0];
        let (h, w) = (features.shape()[1], features.shape()[2]);
        match self {
            Readout::MeanPool => crate::tensor::global_avg_pool(features),
            Readout::CenterToken => {
                let p = ((h - 1) / 2) * w + (w - 1) / 2;
                Ok(Tensor::from_fn([c], |ch| features.data()[ch * h * w + p]))
            }
        }
    }

    fn backward(self, shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
        match self {
            Readout::MeanPool => crate::tensor::global_avg_pool_backward(shape, grad_out),
            Readout::CenterToken => {
                let (h, w) = (shape[1], shape[2]);
                let p = ((h - 1) / 2) * w + (w - 1) / 2;
                let mut g = Tensor::zeros(shape.to_vec());
                for ch in 0..shape[0] {
                    g.data_mut()[ch * h * w + p] = grad_out.data()[ch];
                }
                Ok(g)
            }
        }
    }
}

impl std::str::FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_pool" | "mean" => Ok(Readout::MeanPool),
            "center_token" | "center" => Ok(Readout::CenterToken),
            other => Err(Error::Config(format!("unknown readout '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Spectral bands of the input patches.
    pub pca_dim: usize,
    /// Patch width `w` in pixels.
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Side of the non-overlapping patch embedding.
    pub transformer_patch: usize,
    pub groups: usize,
    pub heads: usize,
    pub selection_rate: SelectionRate,
    pub stg_count: usize,
    pub tstb_per_stg: usize,
    pub class_count: usize,
    pub ffn_ratio: usize,
    #[serde(default)]
    pub readout: Readout,
}

/// Selection rates tuned per benchmark scene.
pub const DATASET_PRESETS: [(&str, usize, f64); 4] =
    [("pavia", 9, 0.4), ("houston", 15, 0.6), ("indian_pines", 16, 0.8), ("honghu", 22, 0.8)];

impl ModelConfig {
    /// Full-size geometry: 10×10 patches, width 128, 2×2 patch embedding, 4 groups, 4 heads.
    pub fn full(pca_dim: usize, class_count: usize, selection_rate: SelectionRate) -> Self {
        Self {
            pca_dim,
            patch_size: 10,
            embed_dim: 128,
            transformer_patch: 2,
            groups: 4,
            heads: 4,
            selection_rate,
            stg_count: 2,
            tstb_per_stg: 3,
            class_count,
            ffn_ratio: 1,
            readout: Readout::MeanPool,
        }
    }

    pub fn for_dataset(name: &str, pca_dim: usize) -> Result<Self> {
        let (_, classes, k) = DATASET_PRESETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown dataset preset '{name}'")))?;
        Ok(Self::full(pca_dim, *classes, SelectionRate::new(*k)?))
    }

    /// Desk-scale geometry used by gradient checks and synthetic runs.
    pub fn tiny(pca_dim: usize, class_count: usize) -> Self {
        Self {
            pca_dim,
            patch_size: 4,
            embed_dim: 8,
            transformer_patch: 2,
            groups: 2,
            heads: 2,
            selection_rate: SelectionRate::new(0.5).expect("valid"),
            stg_count: 2,
            tstb_per_stg: 3,
            class_count,
            ffn_ratio: 1,
            readout: Readout::MeanPool,
        }
    }

    pub fn grid(&self) -> usize {
        self.patch_size / self.transformer_patch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pca_dim", self.pca_dim),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("transformer_patch", self.transformer_patch),
            ("stg_count", self.stg_count),
            ("class_count", self.class_count),
            ("ffn_ratio", self.ffn_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.patch_size.is_multiple_of(self.transformer_patch) {
            return Err(Error::Config(format!(
                "patch size {} is not a multiple of transformer patch {}",
                self.patch_size, self.transformer_patch
            )));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("embed_dim {} must be even", self.embed_dim)));
        }
        HeadGeometry::new(self.embed_dim, self.heads, self.groups)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StgParams {
    pub kstb: KstbParams,
    pub tstbs: Vec<TstbParams>,
}

impl Parameters for StgParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.kstb.visit(&join(prefix, "kstb"), f);
        self.tstbs.visit(&join(prefix, "tstb"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.kstb.visit_mut(f);
        self.tstbs.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub stem: Conv,
    pub patch_embed: Conv,
    pub stages: Vec<StgParams>,
    pub head_norm: LayerNorm,
    pub head: Linear,
}

pub struct ModelCache {
    input: Tensor,
    stem_out: Tensor,
    stages: Vec<(KstbCache, Vec<TstbCache>)>,
    features_shape: Vec<usize>,
    pooled: Tensor,
    normed: Tensor,
}

impl ModelCache {
    pub fn selection_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for (kstb, tstbs) in &self.stages {
            margin = margin.min(kstb.ksa().selection_margin());
            for t in tstbs {
                margin = margin.min(t.tsa().selection_margin());
            }
        }
        margin
    }

    pub fn fingerprint(&self, out: &mut Vec<usize>) {
        for (kstb, tstbs) in &self.stages {
            kstb.ksa().fingerprint(out);
            for t in tstbs {
                t.tsa().fingerprint(out);
            }
        }
    }

    pub fn trace(&self) -> SampleTrace {
        let mut trace = SampleTrace::default();
        for (stage, (kstb, tstbs)) in self.stages.iter().enumerate() {
            trace.ksa.push((stage, kstb.ksa().trace()));
            for (block, t) in tstbs.iter().enumerate() {
                trace.tsa.push(TsaBlockTrace { stage, block, heads: t.tsa().traces() });
            }
        }
        trace
    }
}

/// Selection records of every attention block for one patch.
#[derive(Clone, Debug, Default)]
pub struct SampleTrace {
    pub ksa: Vec<(usize, KsaTrace)>,
    pub tsa: Vec<TsaBlockTrace>,
}

#[derive(Clone, Debug)]
pub struct TsaBlockTrace {
    pub stage: usize,
    pub block: usize,
    pub heads: Vec<SelectiveAttentionTrace>,
}

pub struct ForwardOutput {
    /// `[batch, class_count]`.
    pub logits: Tensor,
    /// One entry per sample when tracing was requested.
    pub traces: Option<Vec<SampleTrace>>,
}

impl ModelParams {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let stem = Conv::new(config.pca_dim, c, ConvSpec::same(&[3, 3], &[1, 1], 1)?, true, rng);
        let patch_embed = Conv::new(c, c, ConvSpec::patchify(config.transformer_patch)?, true, rng);
        let stages = (0..config.stg_count)
            .map(|_| {
                Ok(StgParams {
                    kstb: KstbParams::new(c, config.ffn_ratio, rng)?,
                    tstbs: (0..config.tstb_per_stg)
                        .map(|_| {
                            TstbParams::new(
                                c,
                                config.heads,
                                config.groups,
                                config.selection_rate,
                                config.ffn_ratio,
                                rng,
                            )
                        })
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            head_norm: LayerNorm::new(c),
            head: Linear::new(c, config.class_count, rng),
            config,
            stem,
            patch_embed,
            stages,
        })
    }

    pub fn count_parameters(&self) -> usize {
        nn::count_parameters(self)
    }

    fn check_sample(&self, x: &Tensor) -> Result<()> {
        let cfg = &self.config;
        if x.dims() != 3 {
            return Err(Error::shape("model forward", format!("sample {:?} is not [bands, w, w]", x.shape())));
        }
        if x.shape()[0] != cfg.pca_dim {
            return Err(Error::shape(
                "model forward",
                format!("sample has {} bands, model expects {}", x.shape()[0], cfg.pca_dim),
            ));
        }
        if x.shape()[1] != cfg.patch_size || x.shape()[2] != cfg.patch_size {
            return Err(Error::shape(
                "model forward",
                format!("sample {:?} vs patch size {}", x.shape(), cfg.patch_size),
            ));
        }
        Ok(())
    }

    /// Logits `[class_count]` for one `[pca_dim, w, w]` patch.
    pub fn forward_sample(&self, x: &Tensor) -> Result<(Tensor, ModelCache)> {
        self.check_sample(x)?;
        let stem_out = self.stem.forward(x)?;
        let mut h = self.patch_embed.forward(&stem_out)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (out, kc) = stage.kstb.forward(&h)?;
            h = out;
            let mut tcs = Vec::with_capacity(stage.tstbs.len());
            for block in &stage.tstbs {
                let (out, tc) = block.forward(&h)?;
                h = out;
                tcs.push(tc);
            }
            stages.push((kc, tcs));
        }
        let pooled = self.config.readout.apply(&h)?;
        let normed = self.head_norm.forward(&pooled)?;
        let logits = self.head.forward(&normed)?;
        if !logits.all_finite() {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok((
            logits,
            ModelCache { input: x.clone(), stem_out, stages, features_shape: h.shape().to_vec(), pooled, normed },
        ))
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient.
    pub fn backward_sample(&self, cache: &ModelCache, grad_logits: &Tensor, grads: &mut ModelParams) -> Result<Tensor> {
        let dnormed = self.head.backward(&cache.normed, grad_logits, &mut grads.head)?;
        let dpooled = self.head_norm.backward(&cache.pooled, &dnormed, &mut grads.head_norm)?;
        let mut g = self.config.readout.backward(&cache.features_shape, &dpooled)?;
        for ((stage, (kc, tcs)), sgrads) in self.stages.iter().zip(&cache.stages).zip(grads.stages.iter_mut()).rev() {
            for ((block, tc), bgrads) in stage.tstbs.iter().zip(tcs).zip(sgrads.tstbs.iter_mut()).rev() {
                g = block.backward(tc, &g, bgrads)?;
            }
            g = stage.kstb.backward(kc, &g, &mut sgrads.kstb)?;
        }
        let g = self.patch_embed.backward(&cache.stem_out, &g, &mut grads.patch_embed)?;
        self.stem.backward(&cache.input, &g, &mut grads.stem)
    }

    /// Batched inference over `[B, pca_dim, w, w]`.
    pub fn forward(&self, batch: &Tensor, trace: bool) -> Result<ForwardOutput> {
        if batch.dims() != 4 {
            return Err(Error::shape("model forward", format!("batch {:?} is not [B, bands, w, w]", batch.shape())));
        }
        let b = batch.shape()[0];
        let sample_shape = batch.shape()[1..].to_vec();
        let per: usize = sample_shape.iter().product();
        let k = self.config.class_count;
        let mut logits = Vec::with_capacity(b * k);
        let mut traces = trace.then(Vec::new);
        for i in 0..b {
            let x = Tensor::new(sample_shape.clone(), batch.data()[i * per..(i + 1) * per].to_vec())?;
            let (l, cache) = self.forward_sample(&x)?;
            logits.extend_from_slice(l.data());
            if let Some(t) = traces.as_mut() {
                t.push(cache.trace());
            }
        }
        Ok(ForwardOutput { logits: Tensor::new([b, k], logits)?, traces })
    }

    /// Arg-max class of every sample, sharded across `threads` workers.
    pub fn predict(&self, samples: &[Tensor], threads: usize) -> Result<Vec<usize>> {
        let classify = |x: &Tensor| -> Result<usize> {
            let (logits, _) = self.forward_sample(x)?;
            Ok(argmax(logits.data()))
        };
        let threads = threads.max(1).min(samples.len().max(1));
        if threads == 1 {
            return samples.iter().map(classify).collect();
        }
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(classify).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(samples.len());
            for h in handles {
                out.extend(h.join().expect("inference worker panicked")?);
            }
            Ok(out)
        })
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Parameters for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        self.stages.visit(&join(prefix, "stg"), f);
        self.head_norm.visit(&join(prefix, "head_norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.stem.visit_mut(f);
        self.patch_embed.visit_mut(f);
        self.stages.visit_mut(f);
        self.head_norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}
