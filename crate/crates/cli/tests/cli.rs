use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glandseg_core::dataset::{read_label_map, read_rgb, write_label_png, write_rgb_png};
use glandseg_core::{LabelMap, RgbRaster};

fn glandseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glandseg")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small, fast settings: 64px synthetic images, one 64px patch each.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "dataset_root = data\noutput_dir = out\nsynth_count = 4\nsynth_height = 64\nsynth_width = 64\nseed = 7\n\
         depth = 1\nbase_filters = 4\npatch_size = 64\nepochs = 1\nbatch_size = 2\naug_factor = 2\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn synth(cfg: &Path) {
    let o = glandseg(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn synth_writes_pairs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    synth(&cfg);
    let files = listing(&dir.path().join("data"));
    let annos = files.iter().filter(|(n, _)| n.ends_with("_anno.png")).count();
    assert_eq!((files.len(), annos), (8, 4));

    let again = dir.path().join("again");
    let o = glandseg(&["synth", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(listing(&again), files);
}

#[test]
fn synth_rejects_zero_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("synth_count = 4", "synth_count = 0")).unwrap();
    let o = glandseg(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("synth_count"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning_rat = 0.1\n");
    let o = glandseg(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rat"));
    let o = glandseg(&["train", "--config", dir.path().join("nope.cfg").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = glandseg(&["train"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_dataset_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = glandseg(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(&dir.path().join("data").display().to_string()), "{}", stderr(&o));
}

#[test]
fn locked_output_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    synth(&cfg);
    fs::create_dir_all(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/.glandseg.lock"), "1").unwrap();
    let o = glandseg(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("in use"));
}

#[test]
fn train_predict_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg_s = cfg.to_str().unwrap();
    synth(&cfg);
    let data = dir.path().join("data");
    let before = listing(&data);

    // train: 3 training images x2 augmentation = 6 patches, batch 2 -> 3 rows
    let o = glandseg(&["train", "--config", cfg_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("out");
    assert!(out.join("model.gsck").is_file());
    assert!(out.join("epoch_001.gsck").is_file());
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6usize.div_ceil(2));
    assert_eq!(listing(&data), before, "training must not touch the dataset");

    let o = glandseg(&["train", "--config", cfg_s, "--out", dir.path().join("out2").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(dir.path().join("out2/loss.csv")).unwrap(), csv);

    // predict on the default test split, then a 775x522 frame and a 64x64 one
    let o = glandseg(&["predict", "--config", cfg_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("testA_1_labels.png").is_file());
    assert!(out.join("testA_1_panel.png").is_file());

    let big = dir.path().join("big.png");
    let frame = RgbRaster::from_fn(522, 775, 3, |y, x, c| ((y * 3 + x * 5 + c * 11) % 256) as u8);
    write_rgb_png(&big, &frame).unwrap();
    let small = data.join("testA_1.png");
    let pred_dir = dir.path().join("pred");
    let run = |d: &Path| {
        glandseg(&[
            "predict",
            "--config",
            cfg_s,
            "--out",
            d.to_str().unwrap(),
            big.to_str().unwrap(),
            small.to_str().unwrap(),
        ])
    };
    let o = run(&pred_dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let labels = read_label_map(&pred_dir.join("big_labels.png")).unwrap();
    assert_eq!(labels.dims(), (522, 775));
    assert_eq!(read_rgb(&pred_dir.join("big_gland.png")).unwrap().dims(), (522, 775));
    assert_eq!(read_rgb(&pred_dir.join("big_panel.png")).unwrap().dims(), (522, 4 * 775));
    assert_eq!(read_label_map(&pred_dir.join("testA_1_labels.png")).unwrap().dims(), (64, 64));
    let pred_again = dir.path().join("pred_again");
    assert_eq!(code(&run(&pred_again)), 0);
    assert_eq!(listing(&pred_dir), listing(&pred_again));

    // evaluate the model's predictions: the report mean is the per-image mean
    let o = glandseg(&["evaluate", "--config", cfg_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let images = report["images"].as_array().unwrap();
    assert_eq!(images.len(), 1);
    for key in ["pixel_dice", "pixel_iou", "object_f1", "object_dice"] {
        let mean = images.iter().map(|m| m[key].as_f64().unwrap()).sum::<f64>() / images.len() as f64;
        assert_eq!(report[key].as_f64().unwrap(), mean);
    }
    assert_eq!(images[0]["overlay"], "testA_1_overlay.png");
    assert!(out.join("metrics.txt").is_file());

    let o = glandseg(&["predict", "--config", cfg_s, dir.path().join("missing.png").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

fn evaluate_with(dir: &Path, make: impl Fn(&LabelMap) -> LabelMap) -> serde_json::Value {
    let cfg = write_config(dir, "predictions_dir = preds\n");
    synth(&cfg);
    let preds = dir.join("preds");
    fs::create_dir_all(&preds).unwrap();
    let gt = read_label_map(&dir.join("data/testA_1_anno.png")).unwrap();
    write_label_png(&preds.join("testA_1_labels.png"), &make(&gt)).unwrap();
    let o = glandseg(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    serde_json::from_str(&fs::read_to_string(dir.join("out/metrics.json")).unwrap()).unwrap()
}

#[test]
fn evaluate_ground_truth_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let r = evaluate_with(dir.path(), |gt| gt.clone());
    for key in ["pixel_dice", "pixel_iou", "object_f1", "object_dice"] {
        assert_eq!(r[key].as_f64().unwrap(), 1.0, "{key}");
    }
}

#[test]
fn evaluate_empty_prediction_scores_zero_f1() {
    let dir = tempfile::tempdir().unwrap();
    let r = evaluate_with(dir.path(), |gt| gt.map(|_| 0));
    assert_eq!(r["object_f1"].as_f64().unwrap(), 0.0);
}

#[test]
fn evaluate_lists_unmatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "predictions_dir = preds\n");
    synth(&cfg);
    let preds = dir.path().join("preds");
    fs::create_dir_all(&preds).unwrap();
    write_label_png(&preds.join("stray_labels.png"), &LabelMap::filled(64, 64, 1, 0)).unwrap();
    let o = glandseg(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("testA_1") && msg.contains("stray"), "{msg}");
}

#[test]
fn predict_without_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    synth(&cfg);
    let o = glandseg(&["predict", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.gsck"));
}
