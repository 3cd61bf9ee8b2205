use std::fs;
use std::path::{Path, PathBuf};

use glandseg_core::augmentation::build_augmented_set;
use glandseg_core::dataset::{
    generate_synthetic, load_dataset, read_label_map, read_rgb, save_dataset, write_gray_png, write_label_png,
    write_rgb_png,
};
use glandseg_core::evaluation::{ImageMetrics, MetricsReport};
use glandseg_core::network::{checkpoint, predict_image};
use glandseg_core::postprocess::{fuse, render_overlay};
use glandseg_core::training::{make_patches, train, TrainOutcome, TrainSink};
use glandseg_core::{DatasetSplit, ProbMap, RgbRaster};

use crate::config::RunConfig;
use crate::{CliError, OutputLock};

const MIN_SYNTH_SIDE: usize = 64;

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} {} does not exist", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(CliError::io(format!("cannot write {}", path.display())))
}

/// Generate a synthetic dataset into `dest` (default: `dataset_root`).
pub fn cmd_synth(cfg: &RunConfig, dest: Option<&Path>) -> Result<PathBuf, CliError> {
    let s = &cfg.synth;
    if s.count == 0 {
        return Err(CliError::Input("synth_count must be at least 1".into()));
    }
    if s.height < MIN_SYNTH_SIDE || s.width < MIN_SYNTH_SIDE {
        return Err(CliError::Input(format!(
            "synthetic images must be at least {MIN_SYNTH_SIDE}x{MIN_SYNTH_SIDE}, got {}x{}",
            s.height, s.width
        )));
    }
    let dest = dest.unwrap_or(&cfg.dataset_root).to_path_buf();
    let _lock = OutputLock::acquire(&dest)?;
    let split = generate_synthetic(s.count, s.height, s.width, cfg.train.seed);
    save_dataset(&dest, &split)?;
    log::info!(
        "wrote {} training and {} test samples to {}",
        split.train.len(),
        split.test.len(),
        dest.display()
    );
    Ok(dest)
}

fn load(cfg: &RunConfig) -> Result<DatasetSplit, CliError> {
    require_dir(&cfg.dataset_root, "dataset directory")?;
    if let Some(m) = &cfg.split_manifest {
        if !m.is_file() {
            return Err(CliError::Input(format!("split manifest {} does not exist", m.display())));
        }
    }
    Ok(load_dataset(&cfg.dataset_root, &cfg.split_spec())?)
}

/// Augment the training split, cut it into patches and train. Checkpoints,
/// the loss CSV and the effective config land in `output_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let split = load(cfg)?;
    if split.train.is_empty() {
        return Err(CliError::Input(format!(
            "no training samples in {}",
            cfg.dataset_root.display()
        )));
    }
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("config.used.txt"), &cfg.to_text())?;

    // One sample at a time keeps only the patches in memory; augmented copies
    // are keyed by sample id, so this equals augmenting the whole split.
    let mut patches = Vec::new();
    for sample in &split.train {
        let one = DatasetSplit {
            train: vec![sample.clone()],
            test: Vec::new(),
        };
        let aug = build_augmented_set(&one, cfg.band_width, &cfg.augment)?;
        patches.extend(make_patches(&aug, cfg.network.input_size, cfg.pad_mode));
    }
    log::info!(
        "{} training images, x{} augmentation, {} patches of {}px",
        split.train.len(),
        cfg.augment.factor,
        patches.len(),
        cfg.network.input_size
    );
    let sink = TrainSink {
        dir: cfg.output_dir.clone(),
    };
    let outcome = train(&patches, &cfg.network, &cfg.train, Some(&sink))?;
    log::info!("checkpoint written to {}", sink.latest_checkpoint().display());
    Ok(outcome)
}

/// Paths written by [`cmd_predict`] for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFiles {
    pub id: String,
    pub gland: PathBuf,
    pub contour: PathBuf,
    pub labels: PathBuf,
    pub overlay: PathBuf,
    pub panel: PathBuf,
    pub object_count: usize,
}

fn prob_to_gray(p: &ProbMap) -> glandseg_core::Mask {
    p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Source, gland map, contour map and overlay side by side.
fn panel(columns: &[&RgbRaster]) -> RgbRaster {
    let (h, w) = columns[0].dims();
    RgbRaster::from_fn(h, w * columns.len(), 3, |y, x, c| columns[x / w].get(y, x % w, c))
}

fn gray_to_rgb(m: &glandseg_core::Mask) -> RgbRaster {
    RgbRaster::from_fn(m.height(), m.width(), 3, |y, x, _| m.at(y, x))
}

/// Segment `images` (default: the test split of `dataset_root`) with the
/// configured checkpoint; outputs go to `predictions_dir`.
pub fn cmd_predict(cfg: &RunConfig, images: &[PathBuf]) -> Result<Vec<PredictionFiles>, CliError> {
    cfg.fusion.validate()?;
    if cfg.infer_batch == 0 {
        return Err(CliError::Input("infer_batch must be positive".into()));
    }
    let ckpt = cfg.checkpoint_path();
    if !ckpt.is_file() {
        return Err(CliError::Input(format!("checkpoint {} not found", ckpt.display())));
    }
    for p in images {
        if !p.is_file() {
            return Err(CliError::Input(format!("image {} not found", p.display())));
        }
    }
    let params = checkpoint::load(&ckpt)?;
    if params.config != cfg.network {
        log::warn!("checkpoint network settings differ from the config; using the checkpoint's");
    }

    let inputs: Vec<(String, RgbRaster)> = if images.is_empty() {
        load(cfg)?.test.into_iter().map(|s| (s.id, s.image)).collect()
    } else {
        images
            .iter()
            .map(|p| {
                let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                Ok((id, read_rgb(p)?))
            })
            .collect::<Result<_, CliError>>()?
    };
    if inputs.is_empty() {
        return Err(CliError::Input("no images to predict".into()));
    }

    let out_dir = cfg.predictions_path();
    let _lock = OutputLock::acquire(&out_dir)?;
    let mut written = Vec::with_capacity(inputs.len());
    for (id, image) in &inputs {
        let probs = predict_image(&params, image, cfg.pad_mode, cfg.infer_batch)?;
        let (h, w) = image.dims();
        let inst = fuse(&probs, &cfg.fusion_for(h, w))?;
        let files = PredictionFiles {
            id: id.clone(),
            gland: out_dir.join(format!("{id}_gland.png")),
            contour: out_dir.join(format!("{id}_contour.png")),
            labels: out_dir.join(format!("{id}_labels.png")),
            overlay: out_dir.join(format!("{id}_overlay.png")),
            panel: out_dir.join(format!("{id}_panel.png")),
            object_count: inst.object_count,
        };
        let gland = prob_to_gray(&probs.gland);
        let contour = prob_to_gray(&probs.contour);
        let overlay = render_overlay(image, &inst.labels);
        write_gray_png(&files.gland, &gland)?;
        write_gray_png(&files.contour, &contour)?;
        write_label_png(&files.labels, &inst.labels)?;
        write_rgb_png(&files.overlay, &overlay)?;
        write_rgb_png(&files.panel, &panel(&[image, &gray_to_rgb(&gland), &gray_to_rgb(&contour), &overlay]))?;
        log::info!("{id}: {h}x{w}, {} glands", inst.object_count);
        written.push(files);
    }
    Ok(written)
}

/// Score `<id>_labels.png` in `predictions_dir` against the test split of
/// `dataset_root`; writes `metrics.json` and `metrics.txt` to `output_dir`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<MetricsReport, CliError> {
    let pred_dir = cfg.predictions_path();
    require_dir(&pred_dir, "predictions directory")?;
    let gt = load(cfg)?.test;
    if gt.is_empty() {
        return Err(CliError::Input(format!("no test samples in {}", cfg.dataset_root.display())));
    }

    let suffix = "_labels.png";
    let mut predicted: Vec<String> = fs::read_dir(&pred_dir)
        .map_err(CliError::io(format!("cannot list {}", pred_dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(suffix)).map(str::to_owned))
        .collect();
    predicted.sort();
    let missing: Vec<&str> = gt
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| !predicted.iter().any(|p| p == id))
        .collect();
    let extra: Vec<&str> = predicted
        .iter()
        .map(String::as_str)
        .filter(|p| !gt.iter().any(|s| s.id == *p))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = String::from("predictions and ground truth do not match");
        if !missing.is_empty() {
            msg += &format!("; no prediction for: {}", missing.join(", "));
        }
        if !extra.is_empty() {
            msg += &format!("; no ground truth for: {}", extra.join(", "));
        }
        return Err(CliError::Input(msg));
    }

    let mut per_image = Vec::with_capacity(gt.len());
    for sample in &gt {
        let pred = read_label_map(&pred_dir.join(format!("{}{suffix}", sample.id)))?;
        if pred.dims() != sample.instance_mask.dims() {
            return Err(CliError::Input(format!(
                "prediction for {} is {:?}, ground truth {:?}",
                sample.id,
                pred.dims(),
                sample.instance_mask.dims()
            )));
        }
        let mut m = ImageMetrics::compute(&sample.id, &pred, &sample.instance_mask)?;
        let overlay = format!("{}_overlay.png", sample.id);
        if pred_dir.join(&overlay).is_file() {
            m.overlay = Some(overlay);
        }
        per_image.push(m);
    }
    let report = MetricsReport::from_images(per_image)?;

    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("metrics.json"), &report.to_json()?)?;
    write_text(&cfg.output_dir.join("metrics.txt"), &report.to_table())?;
    Ok(report)
}
