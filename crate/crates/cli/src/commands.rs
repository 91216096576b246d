use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use image::GrayImage;
use log::{info, warn};
use serde::Serialize;

use segkit::data::{
    list_pairs, load_dataset, load_image, select, split_ids, DatasetLayout, DatasetSplit, Sample,
    SplitName,
};
use segkit::gradcheck::{run_suite, GradcheckOptions, Scale, SUITE_SEED};
use segkit::model::ModelParams;
use segkit::train::{
    append_history, Checkpoint, EarlyStopping, FitProgress, MetricsRecord, SegmentationTrainer,
};
use segkit::Tensor;

use crate::config::RunConfig;
use crate::Common;

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn run_config(
    common: &Common,
    dataset: Option<PathBuf>,
    manifest: Option<PathBuf>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(dataset) = dataset {
        cfg.dataset_root = dataset;
    }
    if manifest.is_some() {
        cfg.manifest = manifest;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn split(common: &Common, dataset: Option<PathBuf>, manifest: Option<PathBuf>) -> Result<()> {
    let cfg = run_config(common, dataset, manifest)?;
    let pairs = list_pairs(&DatasetLayout::from_root(&cfg.dataset_root))
        .with_context(|| format!("scanning dataset {}", cfg.dataset_root.display()))?;
    let ids: Vec<String> = pairs.into_iter().map(|(id, _, _)| id).collect();
    let split = split_ids(&ids, cfg.ratios(), cfg.seed)?;
    let path = cfg.manifest_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    split.write_manifest(&path)?;
    println!(
        "train={} val={} test={} -> {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        path.display()
    );
    Ok(())
}

struct Splits {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

fn load_split(cfg: &RunConfig, side: usize) -> Result<(DatasetSplit, Vec<Sample>)> {
    let manifest = cfg.manifest_path();
    let split = DatasetSplit::read_manifest(&manifest).with_context(|| {
        format!(
            "reading manifest {} (run `segkit split` first)",
            manifest.display()
        )
    })?;
    let layout = DatasetLayout::from_root(&cfg.dataset_root);
    let samples = load_dataset(&layout.images_dir, &layout.masks_dir, side)
        .with_context(|| format!("loading dataset {}", cfg.dataset_root.display()))?;
    Ok((split, samples))
}

fn load_splits(cfg: &RunConfig, side: usize) -> Result<Splits> {
    let (split, samples) = load_split(cfg, side)?;
    let pick = |name: SplitName| {
        select(&samples, split.ids(name)).with_context(|| format!("{name} split"))
    };
    Ok(Splits {
        train: pick(SplitName::Train)?,
        val: pick(SplitName::Val)?,
        test: pick(SplitName::Test)?,
    })
}

#[derive(Serialize)]
struct TrainReport {
    best_epoch: usize,
    best_val_loss: Option<f64>,
    last_epoch: usize,
    stopped_early: bool,
    final_train: Option<MetricsRecord>,
    test: MetricsRecord,
}

/// Keeps the lines of a history file up to `epoch`, so a resumed run
/// rewrites exactly what an uninterrupted one would have.
fn truncate_history(path: &Path, epoch: usize) -> Result<()> {
    let kept: Vec<MetricsRecord> = if path.exists() {
        segkit::train::read_history(path)?
            .into_iter()
            .filter(|r| r.epoch <= epoch)
            .collect()
    } else {
        Vec::new()
    };
    fs::write(path, b"").with_context(|| format!("writing {}", path.display()))?;
    append_history(path, &kept)?;
    Ok(())
}

fn resume_state(
    path: &Path,
    cfg: &RunConfig,
) -> Result<(SegmentationTrainer, FitProgress<ModelParams<f32>>)> {
    let mut ckpt = Checkpoint::load(path)?;
    ensure!(
        ckpt.model_config == cfg.model_config(),
        "{} was trained with a different model configuration",
        path.display()
    );
    let mut resumed_train = ckpt.train_config.clone();
    resumed_train.max_epochs = cfg.max_epochs;
    if resumed_train != cfg.train_config() {
        warn!(
            "resuming with the training settings stored in {}",
            path.display()
        );
    }
    ckpt.train_config = resumed_train;
    let best = if ckpt.best_val_loss.is_none() || ckpt.best_epoch == ckpt.epoch {
        ckpt.params.clone()
    } else {
        let best_path = path.with_file_name("best.ckpt");
        let best = Checkpoint::load(&best_path)
            .context("resuming needs the best checkpoint of the run")?;
        ensure!(
            best.epoch == ckpt.best_epoch,
            "{} holds epoch {}, but {} expects the best at epoch {}",
            best_path.display(),
            best.epoch,
            path.display(),
            ckpt.best_epoch
        );
        best.params
    };
    let progress = FitProgress {
        epoch: ckpt.epoch,
        early: EarlyStopping {
            patience: ckpt.train_config.early_stop_patience,
            best_val_loss: ckpt.best_val_loss,
            best_epoch: ckpt.best_epoch,
            epochs_since_improvement: ckpt.epochs_since_improvement,
        },
        best,
    };
    let trainer = SegmentationTrainer::from_checkpoint(&ckpt, cfg.augment_spec())?;
    Ok((trainer, progress))
}

/// Overwrites every tensor of `params` that `path` holds under the same
/// name and shape.
fn import_params(params: &mut ModelParams<f32>, path: &Path) -> Result<()> {
    let source = Checkpoint::load(path)?;
    let mut copied = 0;
    for (name, tensor) in params.iter_mut() {
        if let Some(src) = source
            .params
            .get(name)
            .filter(|s| s.shape() == tensor.shape())
        {
            *tensor = src.clone();
            copied += 1;
        }
    }
    ensure!(
        copied > 0,
        "{} shares no tensors with this model",
        path.display()
    );
    info!(
        "initialized {copied} of {} tensors from {}",
        params.len(),
        path.display()
    );
    Ok(())
}

pub fn train(
    common: &Common,
    dataset: Option<PathBuf>,
    manifest: Option<PathBuf>,
    max_epochs: Option<usize>,
    resume: Option<PathBuf>,
    init: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = run_config(common, dataset, manifest)?;
    if let Some(n) = max_epochs {
        cfg.max_epochs = n;
    }
    let splits = load_splits(&cfg, cfg.input_side)?;
    info!(
        "dataset: {} train, {} val, {} test",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );

    let (mut trainer, progress) = match &resume {
        Some(path) => resume_state(path, &cfg)?,
        None => {
            let mut trainer = SegmentationTrainer::new(
                cfg.model_config(),
                cfg.train_config(),
                cfg.augment_spec(),
            )?;
            if let Some(path) = &init {
                import_params(&mut trainer.params, path)?;
            }
            let progress = trainer.initial_progress();
            (trainer, progress)
        }
    };

    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    let best_path = out.join("best.ckpt");
    let last_path = out.join("last.ckpt");
    let history_path = out.join("history.jsonl");
    let train_history_path = out.join("train_history.jsonl");
    truncate_history(&history_path, progress.epoch)?;
    truncate_history(&train_history_path, progress.epoch)?;
    if resume.is_none() {
        let initial = trainer.checkpoint(0, &progress.early);
        initial.save(&best_path)?;
        initial.save(&last_path)?;
    }

    let result = trainer.fit(
        &splits.train,
        &splits.val,
        &splits.test,
        progress,
        |session, report, early, best| {
            let trainer = session.trainer();
            append_history(&history_path, std::slice::from_ref(&report.val))?;
            if let Some(record) = session.last_train_record() {
                append_history(&train_history_path, std::slice::from_ref(record))?;
            }
            if report.improved {
                trainer
                    .checkpoint_with(best.clone(), report.epoch, early)
                    .save(&best_path)?;
            }
            trainer.checkpoint(report.epoch, early).save(&last_path)?;
            Ok(())
        },
    )?;

    let outcome = &result.outcome;
    let report = TrainReport {
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        last_epoch: outcome.last_epoch,
        stopped_early: outcome.stopped_early,
        final_train: result.train_history.last().cloned(),
        test: result.test.clone(),
    };
    write_json(&out.join("report.json"), &report)?;
    match outcome.best_val_loss {
        Some(loss) => println!(
            "best epoch {} val_loss={loss:.4} test dice={:.4} iou={:.4}",
            outcome.best_epoch, result.test.dice, result.test.iou
        ),
        None => println!(
            "no epochs run; test dice={:.4} iou={:.4}",
            result.test.dice, result.test.iou
        ),
    }
    Ok(())
}

pub fn eval(
    common: &Common,
    checkpoint: &Path,
    dataset: Option<PathBuf>,
    manifest: Option<PathBuf>,
    split_name: SplitName,
) -> Result<()> {
    let cfg = run_config(common, dataset, manifest)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if common.config.is_some() && ckpt.model_config != cfg.model_config() {
        bail!(
            "{} does not match the model configuration in {}",
            checkpoint.display(),
            common.config.as_deref().unwrap_or(Path::new("")).display()
        );
    }
    let (split, samples) = load_split(&cfg, ckpt.model_config.input_side)?;
    let subset = select(&samples, split.ids(split_name))?;
    ensure!(!subset.is_empty(), "{split_name} split is empty");
    let trainer =
        SegmentationTrainer::from_checkpoint(&ckpt, segkit::data::AugmentSpec::identity())?;
    let record = trainer.evaluate(&subset, ckpt.epoch, split_name.as_str())?;
    create_dir(&cfg.out_dir)?;
    write_json(
        &cfg.out_dir.join(format!("eval_{split_name}.json")),
        &record,
    )?;
    println!("dice={:.4} iou={:.4}", record.dice, record.iou);
    Ok(())
}

fn image_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        ensure!(input.exists(), "{} does not exist", input.display());
        return Ok(vec![input.to_owned()]);
    }
    let mut paths = Vec::new();
    for entry in fs::read_dir(input).with_context(|| format!("listing {}", input.display()))? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            paths.push(path);
        }
    }
    paths.sort();
    ensure!(!paths.is_empty(), "no images in {}", input.display());
    Ok(paths)
}

fn to_png(probs: &[f32], side: usize, f: impl Fn(f32) -> u8) -> GrayImage {
    let side = side as u32;
    GrayImage::from_fn(side, side, |x, y| {
        image::Luma([f(probs[(y * side + x) as usize])])
    })
}

pub fn predict(
    common: &Common,
    checkpoint: &Path,
    input: &Path,
    threshold: Option<f64>,
) -> Result<()> {
    let cfg = run_config(common, None, None)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let threshold = threshold.unwrap_or(ckpt.train_config.threshold);
    ensure!(
        threshold > 0.0 && threshold < 1.0,
        "threshold must lie in (0,1), got {threshold}"
    );
    let trainer =
        SegmentationTrainer::from_checkpoint(&ckpt, segkit::data::AugmentSpec::identity())?;
    let side = ckpt.model_config.input_side;
    let channels = ckpt.model_config.in_channels;
    ensure!(
        channels == 3,
        "prediction reads RGB images; the checkpoint expects {channels} channels"
    );

    let paths = image_inputs(input)?;
    create_dir(&cfg.out_dir)?;
    let mut written = 0;
    for path in &paths {
        let image = match load_image(path, side) {
            Ok(image) => image,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let mask = Tensor::zeros(&[1, side, side]);
        let sample = Sample::new(stem, image, mask)?;
        let probs = trainer.predict(&[&sample])?;
        let probs = probs.data();
        let prob_png = to_png(probs, side, |p| (p.clamp(0.0, 1.0) * 255.0).round() as u8);
        let mask_png = to_png(
            probs,
            side,
            |p| if f64::from(p) > threshold { 255 } else { 0 },
        );
        for (suffix, img) in [("prob", prob_png), ("mask", mask_png)] {
            let target = cfg.out_dir.join(format!("{stem}_{suffix}.png"));
            img.save(&target)
                .with_context(|| format!("writing {}", target.display()))?;
        }
        written += 1;
    }
    ensure!(
        written > 0,
        "none of the {} inputs could be decoded",
        paths.len()
    );
    println!(
        "wrote masks for {written} of {} images to {}",
        paths.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

pub fn gradcheck(common: &Common, scale: Scale, corrupt: Option<String>) -> Result<()> {
    let options = GradcheckOptions {
        scale,
        seed: common.seed.unwrap_or(SUITE_SEED),
        corrupt,
    };
    let report = run_suite(&options)?;
    print!("{report}");
    if let Some(out) = &common.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    let failed: Vec<&str> = report.failures().map(|c| c.op.as_str()).collect();
    ensure!(
        failed.is_empty(),
        "gradient check failed for {}",
        failed.join(", ")
    );
    Ok(())
}
