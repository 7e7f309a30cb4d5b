//! Subcommand implementations, callable without going through the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use cda_core::data::ImageSet;
use cda_core::pipeline::{linear_evaluate, Checkpoint, EvalReport, LossReport, Trainer, Variant};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::idx::{write_idx, write_idx_labels};
use crate::manifest::{config_hash, ManifestRow, RunManifest, CODE_VERSION};
use crate::metrics::{read_metrics, MetricsWriter};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_FILE: &str = "run.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.md";

/// `<out>/<pair>/<variant>/<seed>`.
pub fn run_dir(out: &Path, pair: &str, variant: Variant, seed: u64) -> PathBuf {
    out.join(pair).join(variant.name()).join(seed.to_string())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::io(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedFiles {
    pub dir: PathBuf,
    pub source_images: PathBuf,
    pub source_labels: Option<PathBuf>,
    pub target_images: PathBuf,
    pub target_labels: Option<PathBuf>,
}

/// Writes a pair as IDX files under `<out>/data/<pair>/` with a
/// `provenance.json` sidecar.
pub fn gen_data(cfg: &ExperimentConfig, base_dir: &Path, pair: Option<&str>) -> Result<GeneratedFiles> {
    let spec = cfg.pair(pair)?;
    let (source, target) = spec.load(base_dir)?;
    let dir = cfg.out.join("data").join(spec.name());
    create_dir(&dir)?;
    let write_set = |stem: &str, set: &ImageSet| -> Result<(PathBuf, Option<PathBuf>)> {
        let images = dir.join(format!("{stem}-images.idx"));
        write_idx(&images, set)?;
        let labels = match set.labels() {
            Some(l) => {
                let path = dir.join(format!("{stem}-labels.idx"));
                write_idx_labels(&path, l)?;
                Some(path)
            }
            None => None,
        };
        Ok((images, labels))
    };
    let (source_images, source_labels) = write_set("source", &source)?;
    let (target_images, target_labels) = write_set("target", &target)?;

    let sidecar = serde_json::json!({
        "pair": spec,
        "code_version": CODE_VERSION,
        "shape": source.shape(),
        "source": { "count": source.len(), "provenance": source.provenance() },
        "target": { "count": target.len(), "provenance": target.provenance() },
    });
    let path = dir.join("provenance.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&sidecar).expect("json value") + "\n",
    )
    .map_err(Error::io(&path))?;
    Ok(GeneratedFiles {
        dir,
        source_images,
        source_labels,
        target_images,
        target_labels,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Fill the `seconds` metrics column with per-step wall time.
    pub wall_time: bool,
    /// Continue from an existing checkpoint in the run directory.
    pub resume: bool,
    /// Stop after this many epochs in this invocation.
    pub max_epochs: Option<u64>,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub code_version: String,
    pub pair: String,
    pub variant: Variant,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub final_losses: Option<LossReport>,
    pub pretrain_seconds: f64,
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

/// Pretrains one `(variant, seed)` cell on an already loaded pair, writing
/// the checkpoint after every epoch and one metrics row per step.
pub fn pretrain_cell(
    cfg: &ExperimentConfig,
    pair: &str,
    data: (&ImageSet, &ImageSet),
    variant: Variant,
    seed: u64,
    opts: RunOptions,
) -> Result<PretrainOutcome> {
    let (source, target) = data;
    let dir = run_dir(&cfg.out, pair, variant, seed);
    create_dir(&dir)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    let train = cfg.train_for(variant, seed);
    let model = cfg.model.build(source.shape())?;

    let mut trainer = if opts.resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.model != model || ckpt.train != train {
            return Err(Error::Checkpoint(format!(
                "{} was written with a different model or training config",
                ckpt_path.display()
            )));
        }
        Trainer::from_checkpoint(ckpt)?
    } else {
        Trainer::new(model, train)?
    };

    // Rows past the checkpoint belong to an interrupted epoch and are replayed.
    let kept: Vec<LossReport> = if trainer.step() > 0 && metrics_path.exists() {
        read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.step < trainer.step())
            .collect()
    } else {
        Vec::new()
    };
    let mut metrics = MetricsWriter::create(&metrics_path, variant)?;
    for r in &kept {
        metrics.write(r)?;
    }

    let started = Instant::now();
    let mut last = kept.last().copied();
    let mut epochs_run = 0;
    while !trainer.is_finished() && opts.max_epochs.is_none_or(|m| epochs_run < m) {
        let mut tick = Instant::now();
        let mut write_error = None;
        trainer.run_epoch(source, target, &mut |r| {
            let mut r = *r;
            if opts.wall_time {
                r.seconds = tick.elapsed().as_secs_f64();
                tick = Instant::now();
            }
            if let Err(e) = metrics.write(&r) {
                write_error.get_or_insert(e);
            }
            last = Some(r);
        })?;
        if let Some(e) = write_error {
            return Err(e);
        }
        save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
        epochs_run += 1;
    }
    metrics.finish()?;
    if !ckpt_path.exists() {
        save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    }

    let checkpoint = trainer.into_checkpoint();
    let record = RunRecord {
        config_hash: config_hash(cfg)?,
        code_version: CODE_VERSION.to_string(),
        pair: pair.to_string(),
        variant,
        seed,
        epoch: checkpoint.epoch,
        step: checkpoint.step,
        final_losses: last,
        pretrain_seconds: started.elapsed().as_secs_f64(),
        eval: None,
    };
    write_record(&dir, &record)?;
    Ok(PretrainOutcome {
        dir,
        record,
        checkpoint,
    })
}

fn write_record(dir: &Path, record: &RunRecord) -> Result<()> {
    let path = dir.join(RUN_FILE);
    let text = serde_json::to_string_pretty(record).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(Error::io(&path))
}

/// Pretrains the configured variant for every seed of the config.
pub fn pretrain(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    pair: Option<&str>,
    opts: RunOptions,
) -> Result<Vec<PretrainOutcome>> {
    let spec = cfg.pair(pair)?;
    let (source, target) = spec.load(base_dir)?;
    cfg.seeds
        .iter()
        .map(|&seed| pretrain_cell(cfg, &spec.name(), (&source, &target), cfg.train.variant, seed, opts))
        .collect()
}

/// Linear evaluation of a checkpoint on the pair's labeled data. The result
/// is written into the run's `run.json` when one sits next to the
/// checkpoint, and upserted into `<out>/manifest.json`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    checkpoint: &Path,
    pair: Option<&str>,
) -> Result<(Checkpoint, EvalReport)> {
    let spec = cfg.pair(pair)?;
    let (source, target) = spec.load(base_dir)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let expected = cfg.model.build(source.shape())?;
    if ckpt.model.encoder != expected.encoder {
        return Err(Error::Config(format!(
            "checkpoint encoder {:?} does not match the configured encoder {:?}",
            ckpt.model.encoder, expected.encoder
        )));
    }
    let report = linear_evaluate(
        &ckpt.model,
        &ckpt.params,
        &source,
        &target,
        &cfg.eval_for(ckpt.train.seed),
    )?;

    let run_file = checkpoint.with_file_name(RUN_FILE);
    let mut final_losses = None;
    let mut pretrain_seconds = 0.0;
    if run_file.exists() {
        let text = fs::read_to_string(&run_file).map_err(Error::io(&run_file))?;
        if let Ok(mut record) = serde_json::from_str::<RunRecord>(&text) {
            record.eval = Some(report);
            final_losses = record.final_losses;
            pretrain_seconds = record.pretrain_seconds;
            write_record(checkpoint.parent().unwrap_or(Path::new(".")), &record)?;
        }
    }
    append_manifest(
        cfg,
        ManifestRow {
            pair: spec.name(),
            variant: ckpt.train.variant,
            seed: ckpt.train.seed,
            source_accuracy: Some(report.source_accuracy),
            target_accuracy: Some(report.target_accuracy),
            final_losses,
            pretrain_seconds,
            error: None,
        },
    )?;
    Ok((ckpt, report))
}

fn append_manifest(cfg: &ExperimentConfig, row: ManifestRow) -> Result<RunManifest> {
    create_dir(&cfg.out)?;
    let path = cfg.out.join(MANIFEST_FILE);
    let mut manifest = RunManifest::open(&path, cfg)?;
    manifest.upsert(row);
    manifest.save(&path)?;
    Ok(manifest)
}

/// Pretrains and evaluates every `(pair, variant, seed)` cell on up to
/// `threads` worker threads. A failing cell becomes a manifest row with its
/// error and the remaining cells continue. The summary table is written to
/// `<out>/summary.md`.
pub fn bench(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    threads: usize,
    opts: RunOptions,
    progress: &(dyn Fn(&ManifestRow) + Sync),
) -> Result<RunManifest> {
    create_dir(&cfg.out)?;
    let mut pairs = Vec::new();
    for spec in &cfg.data.pairs {
        pairs.push((spec.name(), spec.load(base_dir)?));
    }
    let cells: Vec<(usize, Variant, u64)> = (0..pairs.len())
        .flat_map(|p| {
            cfg.bench
                .variants
                .iter()
                .flat_map(move |&v| cfg.seeds.iter().map(move |&s| (p, v, s)))
        })
        .collect();

    let manifest_path = cfg.out.join(MANIFEST_FILE);
    let manifest = Mutex::new(RunManifest::new(cfg)?);
    let next = AtomicUsize::new(0);
    let worker = || -> Result<()> {
        loop {
            let Some(&(p, variant, seed)) = cells.get(next.fetch_add(1, Ordering::Relaxed)) else {
                return Ok(());
            };
            let (name, (source, target)) = &pairs[p];
            let row = run_cell(cfg, name, (source, target), variant, seed, opts);
            progress(&row);
            let mut m = manifest.lock().unwrap_or_else(|e| e.into_inner());
            m.upsert(row);
            m.save(&manifest_path)?;
        }
    };
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads.clamp(1, cells.len().max(1)))
            .map(|_| s.spawn(worker))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect()
    });
    results.into_iter().collect::<Result<()>>()?;

    let mut manifest = manifest.into_inner().unwrap_or_else(|e| e.into_inner());
    let order = |r: &ManifestRow| {
        let v = Variant::ALL.iter().position(|&v| v == r.variant);
        (cfg.data.pairs.iter().position(|p| p.name() == r.pair), v, r.seed)
    };
    manifest.rows.sort_by_key(order);
    manifest.save(&manifest_path)?;
    let path = cfg.out.join(SUMMARY_FILE);
    fs::write(&path, manifest.summary_table()).map_err(Error::io(&path))?;
    Ok(manifest)
}

fn run_cell(
    cfg: &ExperimentConfig,
    pair: &str,
    data: (&ImageSet, &ImageSet),
    variant: Variant,
    seed: u64,
    opts: RunOptions,
) -> ManifestRow {
    let mut row = ManifestRow {
        pair: pair.to_string(),
        variant,
        seed,
        source_accuracy: None,
        target_accuracy: None,
        final_losses: None,
        pretrain_seconds: 0.0,
        error: None,
    };
    let result = pretrain_cell(cfg, pair, data, variant, seed, opts).and_then(|mut out| {
        row.final_losses = out.record.final_losses;
        row.pretrain_seconds = out.record.pretrain_seconds;
        let ckpt = &out.checkpoint;
        let report = linear_evaluate(&ckpt.model, &ckpt.params, data.0, data.1, &cfg.eval_for(seed))?;
        out.record.eval = Some(report);
        write_record(&out.dir, &out.record)?;
        Ok(report)
    });
    match result {
        Ok(report) => {
            row.source_accuracy = Some(report.source_accuracy);
            row.target_accuracy = Some(report.target_accuracy);
        }
        Err(e) => row.error = Some(format!("{} error: {e}", e.category())),
    }
    row
}

/// Human-readable dump of a checkpoint's metadata and tensor table.
pub fn inspect(path: &Path) -> Result<String> {
    let ckpt = load_checkpoint(path)?;
    let mut out = String::new();
    let model = serde_json::to_string(&ckpt.model).map_err(|e| Error::Data(e.to_string()))?;
    let train = serde_json::to_string(&ckpt.train).map_err(|e| Error::Data(e.to_string()))?;
    let _ = writeln!(out, "checkpoint: {}", path.display());
    let _ = writeln!(out, "variant:    {}", ckpt.train.variant);
    let _ = writeln!(out, "seed:       {}", ckpt.train.seed);
    let _ = writeln!(out, "epoch:      {} of {}", ckpt.epoch, ckpt.train.epochs);
    let _ = writeln!(out, "step:       {}", ckpt.step);
    let _ = writeln!(out, "model:      {model}");
    let _ = writeln!(out, "train:      {train}");
    let scalars: usize = ckpt.params.iter().map(|(_, t)| t.len()).sum();
    let _ = writeln!(out, "parameters: {scalars} in {} tensors", ckpt.params.len());
    for (name, t) in ckpt.tensors() {
        let _ = writeln!(out, "  {name:<40} {:?}", t.shape());
    }
    Ok(out)
}
