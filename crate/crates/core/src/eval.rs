//! Crown-level evaluation: one-to-one overlap matching, precision, recall,
//! F1, per-tree mIoU and a tree-level percentile bootstrap for the mIoU.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelset::{AnnotationSet, InstanceMask, PixelMask, TileSpec};

pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_SEED: u64 = 42;

/// Which overlap measure decides whether a prediction matches a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    #[default]
    Iou,
    /// Intersection divided by the ground-truth area.
    IntersectionOverGt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalWindow {
    /// Only instances whose centroid lies in each tile's center window.
    #[default]
    Center,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub gt: u64,
    pub pred: u64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_gt: Vec<u64>,
    pub unmatched_pred: Vec<u64>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_pred.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_gt.len()
    }

    fn extend(&mut self, other: MatchResult) {
        self.pairs.extend(other.pairs);
        self.unmatched_gt.extend(other.unmatched_gt);
        self.unmatched_pred.extend(other.unmatched_pred);
    }
}

/// Greedy one-to-one matching: every pair whose overlap reaches `thr` is a
/// candidate; candidates are accepted in descending overlap (ties: smaller
/// gt id, then smaller pred id) while both sides are still free.
pub fn match_instances(
    preds: &[InstanceMask],
    gts: &[InstanceMask],
    thr: f64,
    mode: OverlapMode,
) -> Result<MatchResult> {
    let pm: Vec<PixelMask> = preds.iter().map(InstanceMask::decode).collect::<Result<_>>()?;
    let gm: Vec<PixelMask> = gts.iter().map(InstanceMask::decode).collect::<Result<_>>()?;

    // (overlap, iou, gt index, pred index)
    let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::new();
    for (gi, g) in gm.iter().enumerate() {
        let g_area = g.area();
        for (pi, p) in pm.iter().enumerate() {
            if g.bbox.intersect(&p.bbox).is_none() {
                continue;
            }
            let inter = g.intersection(p);
            let union = g_area + p.area() - inter;
            let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            let overlap = match mode {
                OverlapMode::Iou => iou,
                OverlapMode::IntersectionOverGt if g_area > 0 => inter as f64 / g_area as f64,
                OverlapMode::IntersectionOverGt => 0.0,
            };
            if overlap >= thr && inter > 0 {
                candidates.push((overlap, iou, gi, pi));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(gts[a.2].id.cmp(&gts[b.2].id))
            .then(preds[a.3].id.cmp(&preds[b.3].id))
    });

    let mut gt_used = vec![false; gts.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut pairs = Vec::new();
    for (_, iou, gi, pi) in candidates {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            pairs.push(MatchPair {
                gt: gts[gi].id,
                pred: preds[pi].id,
                iou,
            });
        }
    }
    Ok(MatchResult {
        pairs,
        unmatched_gt: gts
            .iter()
            .zip(&gt_used)
            .filter(|(_, u)| !**u)
            .map(|(g, _)| g.id)
            .collect(),
        unmatched_pred: preds
            .iter()
            .zip(&pred_used)
            .filter(|(_, u)| !**u)
            .map(|(p, _)| p.id)
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn prf1(m: &MatchResult) -> Prf {
    let tp = m.tp() as f64;
    let precision = ratio(tp, tp + m.fp() as f64);
    let recall = ratio(tp, tp + m.fn_() as f64);
    Prf {
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeIou {
    pub gt: u64,
    pub iou: f64,
}

/// IoU per ground-truth tree (0 when unmatched) and their mean.
pub fn mean_iou(m: &MatchResult, gts: &[InstanceMask]) -> (f64, Vec<TreeIou>) {
    let matched: BTreeMap<u64, f64> = m.pairs.iter().map(|p| (p.gt, p.iou)).collect();
    let per_tree: Vec<TreeIou> = gts
        .iter()
        .map(|g| TreeIou {
            gt: g.id,
            iou: matched.get(&g.id).copied().unwrap_or(0.0),
        })
        .collect();
    let miou = ratio(
        per_tree.iter().map(|t| t.iou).sum(),
        per_tree.len() as f64,
    );
    (miou, per_tree)
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of the mean.
///
/// Resample `i` draws from its own generator seeded with `seed + i`, so the
/// interval does not depend on how resamples are spread over threads.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one value"));
    }
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::invalid(format!("confidence level {level} outside [0, 1]")));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_add(i));
            let sum: f64 = (0..n).map(|_| values[rng.gen_range(0..n)]).sum();
            sum / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo = percentile(&means, tail);
    let hi = percentile(&means, 1.0 - tail);
    // Clamp away rounding in the summation; a mean of resampled values
    // always lies within their range.
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Ok((lo.clamp(min, max), hi.clamp(min, max)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub overlap: f64,
    pub mode: OverlapMode,
    pub window: EvalWindow,
    pub bootstrap: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            overlap: DEFAULT_OVERLAP,
            mode: OverlapMode::Iou,
            window: EvalWindow::Center,
            bootstrap: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
    /// `None` when there are no ground-truth trees to resample.
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub per_tree_iou: Vec<TreeIou>,
    pub config: EvalConfig,
}

fn in_window(tile_size: u32, window: EvalWindow, inst: &InstanceMask) -> bool {
    match window {
        EvalWindow::Full => true,
        EvalWindow::Center if tile_size == 0 => true,
        EvalWindow::Center => TileSpec {
            x: 0,
            y: 0,
            size: tile_size,
        }
        .center_contains(inst.centroid),
    }
}

/// Match predictions to ground truth tile by tile and aggregate.
///
/// Tiles are paired by origin and size; a prediction tile with no
/// ground-truth counterpart is a grid mismatch, a missing prediction tile
/// counts as no predictions.
pub fn evaluate_dataset(
    preds: &AnnotationSet,
    gts: &AnnotationSet,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if (preds.cell_size_m - gts.cell_size_m).abs() > 1e-12 {
        return Err(Error::invalid(format!(
            "grid mismatch: predictions at {} m/px, ground truth at {} m/px",
            preds.cell_size_m, gts.cell_size_m
        )));
    }
    let key = |t: &crate::labelset::Tile| (t.origin, t.size);
    let mut pred_tiles: BTreeMap<([u32; 2], u32), Vec<InstanceMask>> = BTreeMap::new();
    for t in &preds.tiles {
        pred_tiles.entry(key(t)).or_default().extend(t.instances.iter().cloned());
    }
    for k in pred_tiles.keys() {
        if !gts.tiles.iter().any(|t| key(t) == *k) {
            return Err(Error::invalid(format!(
                "grid mismatch: prediction tile at {:?} (size {}) has no ground-truth tile",
                k.0, k.1
            )));
        }
    }

    let per_tile = gts
        .tiles
        .par_iter()
        .map(|t| {
            let keep = |m: &&InstanceMask| in_window(t.size, config.window, m);
            let g: Vec<InstanceMask> = t.instances.iter().filter(keep).cloned().collect();
            let p: Vec<InstanceMask> = pred_tiles
                .get(&key(t))
                .map(|v| v.iter().filter(keep).cloned().collect())
                .unwrap_or_default();
            let m = match_instances(&p, &g, config.overlap, config.mode)?;
            let (_, trees) = mean_iou(&m, &g);
            Ok((m, trees))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut all = MatchResult::default();
    let mut per_tree_iou = Vec::new();
    for (m, trees) in per_tile {
        all.extend(m);
        per_tree_iou.extend(trees);
    }
    let prf = prf1(&all);
    let values: Vec<f64> = per_tree_iou.iter().map(|t| t.iou).collect();
    let miou = ratio(values.iter().sum(), values.len() as f64);
    let ci = if values.is_empty() {
        None
    } else {
        Some(bootstrap_ci(&values, config.bootstrap, config.level, config.seed)?)
    };
    let report = EvalReport {
        tp: all.tp(),
        fp: all.fp(),
        fn_: all.fn_(),
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        miou,
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        per_tree_iou,
        config: *config,
    };
    check_report(&report)?;
    Ok(report)
}

fn check_report(r: &EvalReport) -> Result<()> {
    if r.tp + r.fn_ != r.per_tree_iou.len() {
        return Err(Error::Invariant(format!(
            "tp {} + fn {} != {} ground-truth trees",
            r.tp,
            r.fn_,
            r.per_tree_iou.len()
        )));
    }
    if r.miou > r.recall + 1e-12 {
        return Err(Error::Invariant(format!(
            "mIoU {} exceeds recall {}",
            r.miou, r.recall
        )));
    }
    Ok(())
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One-row summary CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::format(format!("writing report csv: {e}"));
        w.write_record([
            "tp", "fp", "fn", "precision", "recall", "f1", "miou", "ci_low", "ci_high",
        ])
        .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            self.tp.to_string(),
            self.fp.to_string(),
            self.fn_.to_string(),
            self.precision.to_string(),
            self.recall.to_string(),
            self.f1.to_string(),
            self.miou.to_string(),
            opt(self.ci_low),
            opt(self.ci_high),
        ])
        .map_err(err)?;
        w.flush()
            .map_err(|e| Error::format(format!("writing report csv: {e}")))
    }
}

/// Markdown table with columns Method, F1, Precision, Recall, mIoU,
/// mIoU 95% CI.
pub fn markdown_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = String::from("| Method | F1 | Precision | Recall | mIoU | mIoU 95% CI |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for (name, r) in rows {
        let ci = match (r.ci_low, r.ci_high) {
            (Some(lo), Some(hi)) => format!("[{lo:.3}, {hi:.3}]"),
            _ => "n/a".to_string(),
        };
        let _ = writeln!(
            s,
            "| {name} | {:.3} | {:.3} | {:.3} | {:.3} | {ci} |",
            r.f1, r.precision, r.recall, r.miou
        );
    }
    s
}
