//! Pixel-level Dice/IoU and object-level F1 and Dice.
//!
//! Object metrics work on label maps (0 = background). Labels need not be
//! contiguous; only labels present in the map count as objects.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_same_dims, LabelMap, Mask};

/// IoU above which a predicted object matches a ground-truth object.
pub const MATCH_IOU: f64 = 0.5;

fn overlap_counts(pred: &Mask, gt: &Mask) -> Result<(usize, usize, usize)> {
    ensure_same_dims(pred, gt, "prediction vs ground truth")?;
    let (mut inter, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        let (a, b) = (a != 0, b != 0);
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    Ok((inter, p, g))
}

/// 2|P∩G| / (|P|+|G|); 1 when both masks are empty.
pub fn pixel_dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (inter, p, g) = overlap_counts(pred, gt)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * inter as f64 / (p + g) as f64 })
}

/// |P∩G| / |P∪G|; 1 when both masks are empty.
pub fn pixel_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (inter, p, g) = overlap_counts(pred, gt)?;
    let union = p + g - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Object sizes and pairwise intersections between two label maps.
struct Overlaps {
    pred_sizes: BTreeMap<u32, usize>,
    gt_sizes: BTreeMap<u32, usize>,
    /// (gt label, pred label) → shared pixels
    inter: BTreeMap<(u32, u32), usize>,
}

impl Overlaps {
    fn new(pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        ensure_same_dims(pred, gt, "prediction vs ground truth labels")?;
        let mut o = Self {
            pred_sizes: BTreeMap::new(),
            gt_sizes: BTreeMap::new(),
            inter: BTreeMap::new(),
        };
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if p != 0 {
                *o.pred_sizes.entry(p).or_default() += 1;
            }
            if g != 0 {
                *o.gt_sizes.entry(g).or_default() += 1;
            }
            if p != 0 && g != 0 {
                *o.inter.entry((g, p)).or_default() += 1;
            }
        }
        Ok(o)
    }

    fn iou(&self, g: u32, p: u32, inter: usize) -> f64 {
        let union = self.gt_sizes[&g] + self.pred_sizes[&p] - inter;
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScores {
    pub true_positives: usize,
    pub predicted: usize,
    pub ground_truth: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Detection F1 with one-to-one greedy matching: candidate pairs are taken in
/// decreasing IoU order (ties by ground-truth then predicted label) and
/// accepted while both objects are unmatched and IoU > `match_iou`.
/// Two empty maps score 1.
pub fn object_f1(pred: &LabelMap, gt: &LabelMap, match_iou: f64) -> Result<ObjectScores> {
    if !(0.0..1.0).contains(&match_iou) {
        return Err(Error::Config(format!("match IoU {match_iou} outside [0, 1)")));
    }
    let o = Overlaps::new(pred, gt)?;
    let (n_pred, n_gt) = (o.pred_sizes.len(), o.gt_sizes.len());
    if n_pred == 0 && n_gt == 0 {
        return Ok(ObjectScores {
            true_positives: 0,
            predicted: 0,
            ground_truth: 0,
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        });
    }
    let mut pairs: Vec<(f64, u32, u32)> = o
        .inter
        .iter()
        .map(|(&(g, p), &i)| (o.iou(g, p, i), g, p))
        .filter(|&(iou, _, _)| iou > match_iou)
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_g = BTreeMap::new();
    let mut used_p = BTreeMap::new();
    let mut tp = 0;
    for (_, g, p) in pairs {
        if used_g.contains_key(&g) || used_p.contains_key(&p) {
            continue;
        }
        used_g.insert(g, p);
        used_p.insert(p, g);
        tp += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gt);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ObjectScores {
        true_positives: tp,
        predicted: n_pred,
        ground_truth: n_gt,
        precision,
        recall,
        f1,
    })
}

/// Object-level Dice: each object is paired with the object of the other
/// map it overlaps most, Dice is computed per
/// pair, weighted by object area within its own map, and the two directions
/// are averaged. Two empty maps score 1, one empty map scores 0.
pub fn object_dice(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let o = Overlaps::new(pred, gt)?;
    match (o.pred_sizes.is_empty(), o.gt_sizes.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    // Best partner per object on each side: largest intersection, ties to
    // the smaller partner (higher Dice), so the score ignores label values.
    let mut best_for_gt: BTreeMap<u32, (usize, u32)> = BTreeMap::new();
    let mut best_for_pred: BTreeMap<u32, (usize, u32)> = BTreeMap::new();
    let better = |i: usize, size: usize, cur: Option<&(usize, u32)>, sizes: &BTreeMap<u32, usize>| match cur {
        None => true,
        Some(&(ci, cl)) => i > ci || (i == ci && size < sizes[&cl]),
    };
    for (&(g, p), &i) in &o.inter {
        if better(i, o.pred_sizes[&p], best_for_gt.get(&g), &o.pred_sizes) {
            best_for_gt.insert(g, (i, p));
        }
        if better(i, o.gt_sizes[&g], best_for_pred.get(&p), &o.gt_sizes) {
            best_for_pred.insert(p, (i, g));
        }
    }
    let side = |sizes: &BTreeMap<u32, usize>, other: &BTreeMap<u32, usize>, best: &BTreeMap<u32, (usize, u32)>| {
        let total: usize = sizes.values().sum();
        sizes
            .iter()
            .map(|(l, &size)| {
                let dice = best.get(l).map_or(0.0, |&(i, partner)| {
                    2.0 * i as f64 / (size + other[&partner]) as f64
                });
                size as f64 / total as f64 * dice
            })
            .sum::<f64>()
    };
    let g_side = side(&o.gt_sizes, &o.pred_sizes, &best_for_gt);
    let p_side = side(&o.pred_sizes, &o.gt_sizes, &best_for_pred);
    Ok(0.5 * (g_side + p_side))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub pixel_dice: f64,
    pub pixel_iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub object_f1: f64,
    pub object_dice: f64,
    /// Overlay image for this prediction, relative to the predictions directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay: Option<String>,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        let pm = pred.map(|l| u8::from(l != 0));
        let gm = gt.map(|l| u8::from(l != 0));
        let f1 = object_f1(pred, gt, MATCH_IOU)?;
        Ok(Self {
            id: id.into(),
            pixel_dice: pixel_dice(&pm, &gm)?,
            pixel_iou: pixel_iou(&pm, &gm)?,
            precision: f1.precision,
            recall: f1.recall,
            object_f1: f1.f1,
            object_dice: object_dice(pred, gt)?,
            overlay: None,
        })
    }
}

/// Per-image metrics plus their unweighted means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pixel_dice: f64,
    pub pixel_iou: f64,
    pub object_f1: f64,
    pub object_dice: f64,
    pub images: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("no images to evaluate".into()));
        }
        let n = images.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            pixel_dice: mean(|m| m.pixel_dice),
            pixel_iou: mean(|m| m.pixel_iou),
            object_f1: mean(|m| m.object_f1),
            object_dice: mean(|m| m.object_dice),
            images,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width text table, one row per image and a closing mean row.
    pub fn to_table(&self) -> String {
        let width = self.images.iter().map(|m| m.id.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
            "image", "dice", "iou", "obj_f1", "obj_dice"
        );
        let mut row = |id: &str, d: f64, i: f64, f: f64, od: f64| {
            let _ = writeln!(s, "{id:<width$}  {d:>8.4}  {i:>8.4}  {f:>8.4}  {od:>8.4}");
        };
        for m in &self.images {
            row(&m.id, m.pixel_dice, m.pixel_iou, m.object_f1, m.object_dice);
        }
        row("mean", self.pixel_dice, self.pixel_iou, self.object_f1, self.object_dice);
        s
    }
}
