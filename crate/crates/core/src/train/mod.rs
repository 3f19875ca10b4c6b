//! Cross-entropy training with AdamW, plus the finite-difference harness in
//! [`gradcheck`].

pub mod gradcheck;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{argmax, ModelParams};
use crate::nn::{accumulate, zeros_like, Parameters};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Write an intermediate checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            checkpoint_every: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 500 epochs, otherwise the defaults.
    pub fn full_schedule() -> Self {
        Self { epochs: 500, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("weight_decay", self.weight_decay)?;
        positive("epsilon", self.epsilon)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("epochs, batch_size and threads must be >= 1".into()));
        }
        Ok(())
    }
}

/// First and second moments, flattened in parameter visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let n = crate::nn::count_parameters(params);
        Self { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

fn flatten<P: Parameters + ?Sized>(params: &P) -> Vec<f64> {
    let mut out = Vec::new();
    params.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

/// One AdamW update: `θ ← θ(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    let g = flatten(grads);
    if g.len() != state.m.len() {
        return Err(Error::shape("adamw_step", format!("{} gradients for {} moments", g.len(), state.m.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = config.learning_rate;
    let decay = 1.0 - lr * config.weight_decay;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let mut i = 0;
    params.visit_mut(&mut |tensor| {
        for theta in tensor.data_mut() {
            let gi = g[i];
            let m = config.beta1 * state.m[i] + (1.0 - config.beta1) * gi;
            let v = config.beta2 * state.v[i] + (1.0 - config.beta2) * gi * gi;
            state.m[i] = m;
            state.v[i] = v;
            *theta *= decay;
            *theta -= lr * (m / c1) / ((v / c2).sqrt() + config.epsilon);
            i += 1;
        }
    });
    Ok(())
}

/// Mean negative log-likelihood of `logits [B, K]` and its gradient.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    logits.expect_dims(2, "cross_entropy")?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", format!("{} labels for {b} rows", labels.len())));
    }
    let mut grad = Tensor::zeros([b, k]);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = &mut grad.data_mut()[r * k..(r + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = ((row[j] - log_z).exp() - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite cross-entropy".into()));
    }
    Ok((loss / b as f64, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub wall_ms: u64,
}

/// Loss, correct count and parameter gradients of one shard of a batch.
fn shard_gradients(
    model: &ModelParams,
    samples: &[&Tensor],
    labels: &[usize],
    batch_len: usize,
) -> Result<(f64, usize, ModelParams)> {
    let mut grads = zeros_like(model);
    let mut loss = 0.0;
    let mut correct = 0;
    for (x, &y) in samples.iter().zip(labels) {
        let (logits, cache) = model.forward_sample(x)?;
        let k = logits.len();
        let (l, g) = cross_entropy(&logits.reshape([1, k])?, &[y])?;
        if argmax(logits.data()) == y {
            correct += 1;
        }
        loss += l;
        // Per-sample gradient of the batch mean.
        let mut g = g.into_shape([k])?;
        g.scale_in_place(1.0 / batch_len as f64);
        model.backward_sample(&cache, &g, &mut grads)?;
    }
    Ok((loss, correct, grads))
}

/// Loss sum, correct count and summed gradient over a batch. With several
/// threads the batch is cut into contiguous shards whose gradients are added
/// in shard order.
fn batch_gradients(
    model: &ModelParams,
    samples: &[&Tensor],
    labels: &[usize],
    threads: usize,
) -> Result<(f64, usize, ModelParams)> {
    let n = samples.len();
    if threads <= 1 || n < 2 {
        return shard_gradients(model, samples, labels, n);
    }
    let chunk = n.div_ceil(threads.min(n));
    let parts: Vec<Result<(f64, usize, ModelParams)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .zip(labels.chunks(chunk))
            .map(|(xs, ys)| scope.spawn(move || shard_gradients(model, xs, ys, n)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
    });
    let mut iter = parts.into_iter();
    let (mut loss, mut correct, mut grads) = iter.next().expect("at least one shard")?;
    for part in iter {
        let (l, c, g) = part?;
        loss += l;
        correct += c;
        accumulate(&mut grads, &g)?;
    }
    Ok((loss, correct, grads))
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Stored under `extra` in every checkpoint.
    pub metadata: serde_json::Value,
}

pub const LOG_FILE: &str = "log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.sfck";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.sfck")
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    pub steps: u64,
}

/// Mini-batch AdamW over `samples` with a per-epoch shuffle drawn from
/// `config.seed`. `on_epoch` sees each log line as it is produced.
pub fn train_loop(
    model: &mut ModelParams,
    samples: &[Tensor],
    labels: &[usize],
    config: &TrainConfig,
    output: Option<&RunOutput>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() || samples.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} samples and {} labels", samples.len(), labels.len())));
    }
    let mut log_file = match output {
        Some(out) => {
            fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
            let path = out.dir.join(LOG_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut state = AdamState::new(model);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<&Tensor> = batch.iter().map(|&i| &samples[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, c, grads) = batch_gradients(model, &xs, &ys, config.threads)?;
            loss_sum += loss;
            correct += c;
            adamw_step(model, &grads, &mut state, config)?;
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / samples.len() as f64,
            train_acc: correct as f64 / samples.len() as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if !entry.loss.is_finite() {
            return Err(Error::Numerical(format!("loss diverged at epoch {epoch}")));
        }
        if let Some((file, path)) = log_file.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(out) = output {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && epoch < config.epochs {
                checkpoint::save(&out.dir.join(epoch_checkpoint_name(epoch)), model, out.metadata.clone())?;
            }
        }
        on_epoch(&entry);
        logs.push(entry);
    }
    if let Some(out) = output {
        checkpoint::save(&out.dir.join(FINAL_CHECKPOINT), model, out.metadata.clone())?;
    }
    Ok(TrainReport { logs, steps: state.step })
}

/// Reads a `log.jsonl` written by [`train_loop`].
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    fn scalar(v: f64) -> Linear {
        Linear { weight: Tensor::new([1, 1], vec![v]).unwrap(), bias: Tensor::zeros([1]) }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(1.0);
        let mut g = scalar(1.0);
        g.bias.data_mut()[0] = 0.0;
        let config = TrainConfig { learning_rate: 0.1, weight_decay: 0.0, ..TrainConfig::default() };
        let mut state = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut state, &config).unwrap();
        assert!((p.weight.data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(p.bias.data()[0], 0.0);
    }

    #[test]
    fn decay_without_gradient() {
        let mut p = scalar(2.0);
        let g = scalar(0.0);
        let config = TrainConfig { learning_rate: 0.1, weight_decay: 0.5, ..TrainConfig::default() };
        let mut state = AdamState::new(&p);
        for _ in 0..3 {
            adamw_step(&mut p, &g, &mut state, &config).unwrap();
        }
        assert!((p.weight.data()[0] - 2.0 * 0.95f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let (loss, grad) = cross_entropy(&Tensor::zeros([2, 5]), &[0, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
        assert!((grad.at(&[0, 0]) - (0.2 - 1.0) / 2.0).abs() < 1e-15);
        assert!((grad.sum()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_small_loss() {
        let logits = Tensor::new([1, 3], vec![800.0, 0.0, -800.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-300);
        assert!(cross_entropy(&logits, &[3]).is_err());
    }
}
