use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sformer::checkpoint;
use sformer::data::{
    extract_all_patches, extract_patches, read_scene, stratified_split, synth_scene, write_scene, HsiCube,
    Preprocessing, SplitSpec, SynthSpec,
};
use sformer::experiment::{
    self, bench_tsa, prepare_dataset, train_and_evaluate, write_bench_csv, write_sweep_csv, BenchSpec, SWEEP_GROUPS,
    SWEEP_RATES,
};
use sformer::metrics::{evaluate, write_map, EvalReport};
use sformer::model::ModelParams;
use sformer::trace::TraceWriter;
use sformer::train::gradcheck::{check_all, GradCheckConfig};
use sformer::train::{RunOutput, TrainConfig, FINAL_CHECKPOINT, LOG_FILE};
use sformer::{Error, Result, Tensor};

use crate::settings::{read_config_file, RunSettings};
use crate::{
    AggregateArgs, BenchArgs, EvalArgs, EvalSplit, GradcheckArgs, MapArgs, PcaArgs, SettingArgs, SweepArgs, SweepAxis,
    SynthArgs, TrainArgs, RUN_ROOT_ENV,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEST_REPORT_FILE: &str = "test_report.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn resolve_settings(args: &SettingArgs) -> Result<RunSettings> {
    let mut pairs = match &args.config {
        Some(path) => read_config_file(path)?,
        None => Vec::new(),
    };
    pairs.extend(args.set.iter().cloned());
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    flag("preset", args.preset.clone());
    flag("epochs", args.epochs.map(|v| v.to_string()));
    flag("learning_rate", args.lr.map(|v| v.to_string()));
    flag("seed", args.seed.map(|v| v.to_string()));
    flag("pca", args.pca.clone());
    flag("train_per_class", args.train_per_class.map(|v| v.to_string()));
    flag("threads", args.threads.map(|v| v.to_string()));
    RunSettings::from_pairs(&pairs)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: a.classes,
        bands: a.bands,
        height: a.height,
        width: a.width,
        noise: a.noise,
        seed: a.seed,
        tile: a.tile,
    };
    let cube = synth_scene(&spec)?;
    write_scene(&a.out, &cube)?;
    log::info!("wrote {}x{}x{} scene to {}", cube.bands(), cube.height(), cube.width(), a.out.display());
    Ok(())
}

pub fn pca(a: PcaArgs) -> Result<()> {
    let cube = read_scene(&a.scene)?;
    let prep = Preprocessing::fit(&cube, Some(a.components))?;
    let reduced = prep.apply(&cube)?;
    write_scene(&a.out, &reduced)?;
    write_text(&a.out.join("pca.json"), &serde_json::to_string_pretty(&prep)?)
}

/// Everything `eval` and `map` need to reproduce the training-time view of a scene.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointExtra {
    pub preprocessing: Preprocessing,
    pub split: SplitSpec,
    pub patch_size: usize,
    pub class_names: Vec<String>,
    pub train: TrainConfig,
}

#[derive(Serialize)]
struct Decisions {
    normalization: &'static str,
    pca_fit: &'static str,
    patch_border: &'static str,
    even_patch_center_offset: &'static str,
    token_order: &'static str,
}

const DECISIONS: Decisions = Decisions {
    normalization: "per-band min-max to [0, 1] before PCA",
    pca_fit: "all pixels, labeled and unlabeled",
    patch_border: "mirror (reflect-101) padding",
    even_patch_center_offset: "w/2 - 1",
    token_order: "(group * H + y) * W + x",
};

#[derive(Serialize)]
struct Outputs {
    checkpoint: PathBuf,
    log: PathBuf,
    test_report: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    code_version: &'static str,
    seed: u64,
    scene: &'a Path,
    settings: &'a RunSettings,
    decisions: Decisions,
    bit_reproducible: bool,
    started_unix: u64,
    finished_unix: u64,
    outputs: Outputs,
}

fn run_dir(a: &TrainArgs, seed: u64) -> PathBuf {
    if let Some(out) = &a.out {
        return out.clone();
    }
    let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(a.name.clone().unwrap_or_else(|| format!("train-seed{seed}")))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let started = unix_now();
    let mut settings = resolve_settings(&a.settings)?;
    let cube = read_scene(&a.scene)?;
    let dataset = prepare_dataset(&cube, settings.data.pca, settings.data.patch_size, settings.split())?;
    settings.model.class_count = dataset.classes;
    settings.model.pca_dim = dataset.bands();
    settings.model.validate()?;

    let dir = run_dir(&a, settings.train.seed);
    if dir.join(MANIFEST_FILE).exists() && !a.force {
        return Err(Error::InvalidArgument(format!(
            "{} already holds a run; pass --force to replace it",
            dir.display()
        )));
    }
    let reproducible = settings.train.threads == 1;
    if !reproducible {
        log::warn!("multi-threaded training is not bit-reproducible");
    }
    let extra = CheckpointExtra {
        preprocessing: dataset.preprocessing.clone(),
        split: settings.split(),
        patch_size: settings.data.patch_size,
        class_names: cube.class_names().to_vec(),
        train: settings.train.clone(),
    };
    let output = RunOutput { dir: dir.clone(), metadata: serde_json::to_value(&extra)? };
    let outcome = train_and_evaluate(&dataset, &settings.model, &settings.train, Some(&output), &mut |log| {
        log::info!("epoch {} loss {:.6} train_acc {:.4}", log.epoch, log.loss, log.train_acc);
    })?;
    write_text(&dir.join(TEST_REPORT_FILE), &serde_json::to_string_pretty(&outcome.test)?)?;
    let manifest = RunManifest {
        command: "train",
        code_version: env!("CARGO_PKG_VERSION"),
        seed: settings.train.seed,
        scene: &a.scene,
        settings: &settings,
        decisions: DECISIONS,
        bit_reproducible: reproducible,
        started_unix: started,
        finished_unix: unix_now(),
        outputs: Outputs {
            checkpoint: dir.join(FINAL_CHECKPOINT),
            log: dir.join(LOG_FILE),
            test_report: dir.join(TEST_REPORT_FILE),
        },
    };
    write_text(&dir.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest)?)?;
    let last = outcome.final_log();
    println!(
        "{}",
        serde_json::json!({
            "run_dir": dir,
            "epochs": last.epoch,
            "final_loss": last.loss,
            "train_acc": last.train_acc,
            "test_oa": outcome.test.overall_accuracy,
        })
    );
    Ok(())
}

fn load_checkpoint(path: &Path, cube: &HsiCube) -> Result<(ModelParams, CheckpointExtra, HsiCube)> {
    let (model, extra) = checkpoint::load(path)?;
    let extra: CheckpointExtra = serde_json::from_value(extra)
        .map_err(|e| Error::Format { what: "checkpoint metadata", detail: e.to_string() })?;
    if cube.class_count() != model.config.class_count {
        return Err(Error::InvalidArgument(format!(
            "scene has {} classes, model was trained on {}",
            cube.class_count(),
            model.config.class_count
        )));
    }
    let reduced = extra.preprocessing.apply(cube)?;
    Ok((model, extra, reduced))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cube = read_scene(&a.scene)?;
    let (model, extra, reduced) = load_checkpoint(&a.checkpoint, &cube)?;
    let patches = extract_patches(&reduced, extra.patch_size)?;
    let patches = match a.split {
        EvalSplit::All => patches,
        EvalSplit::Test => patches.select(&stratified_split(cube.labels(), cube.class_count(), extra.split)?.test)?,
    };
    let predictions = model.predict(&patches.samples, a.threads)?;
    let report = evaluate(&predictions, &patches.class_indices()?, model.config.class_count)?;
    if let Some(dir) = &a.trace_dir {
        let mut writer = TraceWriter::create(dir, a.first_head_only)?;
        for (i, x) in patches.samples.iter().take(a.trace_samples).enumerate() {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            let batch = Tensor::new(shape, x.data().to_vec())?;
            let out = model.forward(&batch, true)?;
            writer.record(i, &out.traces.expect("tracing requested")[0])?;
        }
        writer.finish()?;
    }
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

pub fn map(a: MapArgs) -> Result<()> {
    let cube = read_scene(&a.scene)?;
    let (model, extra, reduced) = load_checkpoint(&a.checkpoint, &cube)?;
    let patches = if a.labeled_only {
        extract_patches(&reduced, extra.patch_size)?
    } else {
        extract_all_patches(&reduced, extra.patch_size)?
    };
    let predictions = model.predict(&patches.samples, a.threads)?;
    let mut raster = vec![0u16; cube.pixels()];
    for (&p, &c) in patches.pixels.iter().zip(&predictions) {
        raster[p] = c as u16 + 1;
    }
    write_map(&a.out, &raster, cube.height(), cube.width())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let config = GradCheckConfig { seed: a.seed, per_tensor: a.per_tensor, ..GradCheckConfig::default() };
    let reports = check_all(&config)?;
    for r in &reports {
        println!(
            "{} {:<26} max_rel_error={:.3e} checked={} skipped={}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.module,
            r.max_rel_error,
            r.checked,
            r.skipped
        );
    }
    if let Some(out) = &a.out {
        write_text(out, &serde_json::to_string_pretty(&reports)?)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.module.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let mut settings = resolve_settings(&a.settings)?;
    let cube = read_scene(&a.scene)?;
    let dataset = prepare_dataset(&cube, settings.data.pca, settings.data.patch_size, settings.split())?;
    settings.model.class_count = dataset.classes;
    settings.model.pca_dim = dataset.bands();
    let base = &settings.model;
    let rates: Vec<f64> = match a.axis {
        SweepAxis::G => vec![base.selection_rate.value()],
        _ => SWEEP_RATES.to_vec(),
    };
    let groups: Vec<usize> = match a.axis {
        SweepAxis::K => vec![base.groups],
        _ => SWEEP_GROUPS.to_vec(),
    };
    let head_dim = base.embed_dim / base.heads.max(1);
    if let Some(g) = groups.iter().find(|&&g| head_dim % g != 0) {
        return Err(Error::Config(format!(
            "head dimension {head_dim} is not divisible by group count {g}; raise embed_dim (e.g. --set embed_dim=16)"
        )));
    }
    let rows = experiment::sweep(&dataset, base, &settings.train, &rates, &groups, &mut |row| {
        log::info!("k={} g={} oa={:.4}", row.k, row.g, row.oa);
    })?;
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &rows)?;
    emit(a.out.as_deref(), &String::from_utf8(buf).expect("csv is utf-8"))
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let spec = BenchSpec {
        channels: a.channels,
        heads: a.heads,
        groups: a.groups,
        height: a.height,
        width: a.width,
        repeats: a.repeats,
        seed: a.seed,
    };
    let rows = bench_tsa(&spec, &SWEEP_RATES)?;
    let mut buf = Vec::new();
    write_bench_csv(&mut buf, &rows)?;
    emit(a.out.as_deref(), &String::from_utf8(buf).expect("csv is utf-8"))
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

fn spread(values: &[f64]) -> Spread {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Spread { mean, std }
}

pub fn aggregate(a: AggregateArgs) -> Result<()> {
    let reports: Vec<EvalReport> = a
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect::<Result<_>>()?;
    let pick = |f: fn(&EvalReport) -> f64| spread(&reports.iter().map(f).collect::<Vec<_>>());
    let summary = serde_json::json!({
        "runs": reports.len(),
        "overall_accuracy": pick(|r| r.overall_accuracy),
        "average_accuracy": pick(|r| r.average_accuracy),
        "kappa": pick(|r| r.kappa),
    });
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&summary)? + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_standard_deviation() {
        let s = spread(&[1.0, 2.0, 3.0]);
        assert_eq!(s, Spread { mean: 2.0, std: 1.0 });
        assert_eq!(spread(&[0.5]).std, 0.0);
    }
}
