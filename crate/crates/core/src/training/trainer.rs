use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::head_loss_grad;
use super::rmsprop::{rmsprop_step, OptimizerState};
use crate::augmentation::AugmentedSample;
use crate::error::{Error, Result};
use crate::network::{backward, checkpoint, forward_batch, update_running_stats, Mode, NetworkConfig, NetworkParams, Tensor};
use crate::raster::{Mask, RgbRaster};
use crate::rng::stream_rng;
use crate::tiling::{split, PadMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// RMS decay.
    pub rho: f64,
    pub eps: f64,
    pub dice_smooth: f64,
    /// Weights of the (gland, contour) head losses.
    pub head_weights: (f64, f64),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 4,
            lr: 1e-3,
            rho: 0.9,
            eps: 1e-8,
            dice_smooth: 1.0,
            head_weights: (1.0, 1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.eps >= 0.0) {
            return bad("eps must be non-negative");
        }
        if !(self.dice_smooth > 0.0) {
            return bad("dice_smooth must be positive");
        }
        if !(self.head_weights.0 >= 0.0 && self.head_weights.1 >= 0.0) {
            return bad("head weights must be non-negative");
        }
        Ok(())
    }
}

/// A network-sized training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPatch {
    pub image: RgbRaster,
    pub gland: Mask,
    pub contour: Mask,
}

/// Tile every augmented sample (image and both targets) into patches.
pub fn make_patches(samples: &[AugmentedSample], patch_size: usize, pad_mode: PadMode) -> Vec<TrainPatch> {
    let mut out = Vec::new();
    for s in samples {
        let (_, images) = split(&s.sample.image, patch_size, pad_mode);
        let (_, glands) = split(&s.targets.gland, patch_size, pad_mode);
        let (_, contours) = split(&s.targets.contour, patch_size, pad_mode);
        out.extend(
            images
                .into_iter()
                .zip(glands)
                .zip(contours)
                .map(|((image, gland), contour)| TrainPatch { image, gland, contour }),
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    /// 1-based across the whole run.
    pub step: usize,
    pub loss_total: f64,
    pub loss_gland: f64,
    pub loss_contour: f64,
    /// Hard Dice of the thresholded gland map on the batch.
    pub pixel_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub pixel_dice: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub optimizer: OptimizerState,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Where per-epoch checkpoints and the loss CSV go.
#[derive(Clone, Debug)]
pub struct TrainSink {
    pub dir: PathBuf,
}

impl TrainSink {
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.gsck"))
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.dir.join("model.gsck")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
}

pub fn write_loss_csv(path: &Path, steps: &[StepLog]) -> Result<()> {
    let mut s = String::from("epoch,step,loss_total,loss_gland,loss_contour,pixel_dice\n");
    for r in steps {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.step, r.loss_total, r.loss_gland, r.loss_contour, r.pixel_dice
        )
        .unwrap();
    }
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, s)?;
    fs::rename(tmp, path)?;
    Ok(())
}

struct Batch {
    x: Tensor,
    gland: Vec<f64>,
    contour: Vec<f64>,
}

fn assemble(patches: &[TrainPatch], idx: &[usize]) -> Result<Batch> {
    let p0 = &patches[idx[0]];
    let (s, c) = (p0.image.height(), p0.image.channels());
    let hw = s * s;
    let mut x = Tensor::zeros(idx.len(), c, s, s);
    let mut gland = Vec::with_capacity(idx.len() * hw);
    let mut contour = Vec::with_capacity(idx.len() * hw);
    for (i, &k) in idx.iter().enumerate() {
        let p = &patches[k];
        if p.image.dims() != (s, s) || p.gland.dims() != (s, s) || p.contour.dims() != (s, s) {
            return Err(Error::Shape(format!("training patch {k} is not {s}x{s}")));
        }
        let dst = x.sample_mut(i);
        for (px, rgb) in p.image.as_slice().chunks_exact(c).enumerate() {
            for (ch, &v) in rgb.iter().enumerate() {
                dst[ch * hw + px] = f64::from(v) / 255.0;
            }
        }
        gland.extend(p.gland.as_slice().iter().map(|&v| f64::from(v)));
        contour.extend(p.contour.as_slice().iter().map(|&v| f64::from(v)));
    }
    Ok(Batch { x, gland, contour })
}

fn hard_dice(pred: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let b = f64::from(u8::from(p >= 0.5));
        inter += b * t;
        sp += b;
        st += t;
    }
    if sp + st == 0.0 {
        1.0
    } else {
        2.0 * inter / (sp + st)
    }
}

/// One optimizer step on a batch. Returns the step's losses and gland Dice.
fn train_step(
    params: &mut NetworkParams,
    state: &mut OptimizerState,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64, f64)> {
    let (out, cache) = forward_batch(params, &batch.x, Mode::Train)?;
    let cache = cache.expect("train mode caches");
    let (lg, mut dg) = head_loss_grad(&out.gland.data, &batch.gland, cfg.dice_smooth)?;
    let (lc, mut dc) = head_loss_grad(&out.contour.data, &batch.contour, cfg.dice_smooth)?;
    let (wg, wc) = cfg.head_weights;
    let total = wg * lg + wc * lc;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, step: 0 });
    }
    dg.iter_mut().for_each(|v| *v *= wg);
    dc.iter_mut().for_each(|v| *v *= wc);
    let shape = |d: Vec<f64>| Tensor::from_vec(out.gland.n, 1, out.gland.h, out.gland.w, d);
    let grads = backward(params, &cache, &shape(dg)?, &shape(dc)?);
    rmsprop_step(params, &grads, state, cfg.lr, cfg.rho, cfg.eps)?;
    update_running_stats(params, &cache);
    Ok((total, lg, lc, hard_dice(&out.gland.data, &batch.gland)))
}

/// Train from a fresh initialization for `cfg.epochs` epochs of
/// `⌈N / batch_size⌉` steps. Data order and initialization depend only on
/// `cfg.seed`. With a sink, a checkpoint and the loss CSV are written after
/// every epoch; on a non-finite loss the previous epoch's files remain.
pub fn train(
    patches: &[TrainPatch],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    sink: Option<&TrainSink>,
) -> Result<TrainOutcome> {
    net_cfg.validate()?;
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::Config("no training patches".into()));
    }
    if let Some(s) = sink {
        fs::create_dir_all(&s.dir)?;
    }
    let mut params = NetworkParams::init(net_cfg, cfg.seed);
    let mut state = OptimizerState::new(&params);
    let mut rng = stream_rng(&[cfg.seed, 0x0D4A]);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0;
    if let Some(s) = sink {
        // so a run that diverges in its first epoch still leaves a loadable model
        checkpoint::save(&s.latest_checkpoint(), &params)?;
    }

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let first = steps.len();
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = assemble(patches, idx)?;
            let (total, lg, lc, dice) = match train_step(&mut params, &mut state, &batch, cfg) {
                Ok(v) => v,
                Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteActivation(_) | Error::NonFiniteGradient(_))) => {
                    log::error!("{e}");
                    if let Some(s) = sink {
                        write_loss_csv(&s.loss_csv(), &steps)?;
                    }
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                Err(e) => return Err(e),
            };
            steps.push(StepLog {
                epoch,
                step,
                loss_total: total,
                loss_gland: lg,
                loss_contour: lc,
                pixel_dice: dice,
            });
        }
        let this = &steps[first..];
        let n = this.len() as f64;
        let log = EpochLog {
            epoch,
            mean_loss: this.iter().map(|s| s.loss_total).sum::<f64>() / n,
            pixel_dice: this.iter().map(|s| s.pixel_dice).sum::<f64>() / n,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.5}, pixel dice {:.4}",
            cfg.epochs,
            log.mean_loss,
            log.pixel_dice
        );
        epochs.push(log);
        if let Some(s) = sink {
            checkpoint::save(&s.epoch_checkpoint(epoch), &params)?;
            checkpoint::save(&s.latest_checkpoint(), &params)?;
            write_loss_csv(&s.loss_csv(), &steps)?;
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer: state,
        steps,
        epochs,
    })
}
