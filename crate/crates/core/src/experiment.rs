//! End-to-end runs on a scene: preprocessing, patches, split, training,
//! evaluation; plus the selection-rate/group sweep and the attention timer.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{extract_patches, stratified_split, HsiCube, PatchSet, Preprocessing, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::randomize;
use crate::tensor::{SelectionRate, Tensor};
use crate::train::{train_loop, EpochLog, RunOutput, TrainConfig, TrainReport};
use crate::tsa::TsaParams;

/// Preprocessed train and test patches of one scene.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub preprocessing: Preprocessing,
    pub classes: usize,
    pub train: PatchSet,
    pub test: PatchSet,
}

impl Dataset {
    pub fn bands(&self) -> usize {
        self.train.bands
    }
}

pub fn prepare_dataset(cube: &HsiCube, pca: Option<usize>, patch_size: usize, split: SplitSpec) -> Result<Dataset> {
    let preprocessing = Preprocessing::fit(cube, pca)?;
    let reduced = preprocessing.apply(cube)?;
    let patches = extract_patches(&reduced, patch_size)?;
    let parts = stratified_split(cube.labels(), cube.class_count(), split)?;
    Ok(Dataset {
        preprocessing,
        classes: cube.class_count(),
        train: patches.select(&parts.train)?,
        test: patches.select(&parts.test)?,
    })
}

pub struct Outcome {
    pub model: ModelParams,
    pub training: TrainReport,
    pub test: EvalReport,
}

impl Outcome {
    pub fn final_log(&self) -> &EpochLog {
        self.training.logs.last().expect("at least one epoch")
    }
}

/// Initialises a model from `train.seed`, trains it and scores the test split.
pub fn train_and_evaluate(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train: &TrainConfig,
    output: Option<&RunOutput>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Outcome> {
    if model_config.pca_dim != dataset.bands() || model_config.class_count != dataset.classes {
        return Err(Error::Config(format!(
            "model expects {} bands / {} classes, data has {} / {}",
            model_config.pca_dim,
            model_config.class_count,
            dataset.bands(),
            dataset.classes
        )));
    }
    let mut model = ModelParams::new(model_config.clone(), &mut ChaCha8Rng::seed_from_u64(train.seed))?;
    let labels = dataset.train.class_indices()?;
    let training = train_loop(&mut model, &dataset.train.samples, &labels, train, output, on_epoch)?;
    let test = score(&model, &dataset.test, train.threads)?;
    Ok(Outcome { model, training, test })
}

pub fn score(model: &ModelParams, patches: &PatchSet, threads: usize) -> Result<EvalReport> {
    let predictions = model.predict(&patches.samples, threads)?;
    evaluate(&predictions, &patches.class_indices()?, model.config.class_count)
}

pub const SWEEP_RATES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const SWEEP_GROUPS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: f64,
    pub g: usize,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub final_loss: f64,
    pub train_acc: f64,
}

pub const SWEEP_HEADER: [&str; 7] = ["k", "g", "oa", "aa", "kappa", "final_loss", "train_acc"];

/// Trains one model per `(k, g)` cell of the cross product.
pub fn sweep(
    dataset: &Dataset,
    base: &ModelConfig,
    train: &TrainConfig,
    rates: &[f64],
    groups: &[usize],
    on_cell: &mut dyn FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(rates.len() * groups.len());
    for &k in rates {
        for &g in groups {
            let config = ModelConfig { selection_rate: SelectionRate::new(k)?, groups: g, ..base.clone() };
            config.validate()?;
            let outcome = train_and_evaluate(dataset, &config, train, None, &mut |_| {})?;
            let last = outcome.final_log();
            let row = SweepRow {
                k,
                g,
                oa: outcome.test.overall_accuracy,
                aa: outcome.test.average_accuracy,
                kappa: outcome.test.kappa,
                final_loss: last.loss,
                train_acc: last.train_acc,
            };
            on_cell(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.g.to_string(),
            r.oa.to_string(),
            r.aa.to_string(),
            r.kappa.to_string(),
            r.final_loss.to_string(),
            r.train_acc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Io { path: "<csv>".into(), source: e })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub channels: usize,
    pub heads: usize,
    pub groups: usize,
    pub height: usize,
    pub width: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self { channels: 32, heads: 4, groups: 4, height: 5, width: 5, repeats: 20, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: f64,
    pub tokens: usize,
    pub retained_per_row: usize,
    pub mean_us: f64,
    pub min_us: f64,
}

pub const BENCH_HEADER: [&str; 5] = ["k", "tokens", "retained_per_row", "mean_us", "min_us"];

/// Wall time of one TSA forward pass at each selection rate, with the same
/// weights and input for every rate.
pub fn bench_tsa(spec: &BenchSpec, rates: &[f64]) -> Result<Vec<BenchRow>> {
    if spec.repeats == 0 {
        return Err(Error::InvalidArgument("bench needs at least one repeat".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut block = TsaParams::new(spec.channels, spec.heads, spec.groups, SelectionRate::DENSE, &mut rng)?;
    randomize(&mut block, 0.5, &mut rng);
    let x = Tensor::from_fn([spec.channels, spec.height, spec.width], |_| StandardNormal.sample(&mut rng));
    let tokens = block.geometry().tokens(spec.height, spec.width);
    rates
        .iter()
        .map(|&k| {
            block.rate = SelectionRate::new(k)?;
            block.forward(&x)?;
            let mut times = Vec::with_capacity(spec.repeats);
            for _ in 0..spec.repeats {
                let t = Instant::now();
                std::hint::black_box(block.forward(&x)?);
                times.push(t.elapsed().as_secs_f64() * 1e6);
            }
            Ok(BenchRow {
                k,
                tokens,
                retained_per_row: block.rate.retained(tokens),
                mean_us: times.iter().sum::<f64>() / times.len() as f64,
                min_us: times.iter().copied().fold(f64::INFINITY, f64::min),
            })
        })
        .collect()
}

pub fn write_bench_csv<W: std::io::Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_HEADER)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.tokens.to_string(),
            r.retained_per_row.to_string(),
            format!("{:.3}", r.mean_us),
            format!("{:.3}", r.min_us),
        ])?;
    }
    w.flush().map_err(|e| Error::Io { path: "<csv>".into(), source: e })
}
