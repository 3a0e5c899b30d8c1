//! Inference-time filtering of predicted crowns.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelset::{AnnotationSet, BBox, InstanceMask, PixelMask};
use crate::raster::Raster;

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;
pub const DEFAULT_NMS_IOU: f64 = 0.3;
pub const DEFAULT_CONTAINMENT: f64 = 0.8;

pub fn pixel_iou(a: &PixelMask, b: &PixelMask) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn mask_iou(a: &InstanceMask, b: &InstanceMask) -> Result<f64> {
    Ok(pixel_iou(&a.decode()?, &b.decode()?))
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersect(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Keep instances scoring at least `score_thr`; unscored ones pass.
pub fn threshold_filter(instances: &[InstanceMask], score_thr: f64) -> Vec<InstanceMask> {
    instances
        .iter()
        .filter(|m| m.score.is_none_or(|s| s >= score_thr))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapKind {
    #[default]
    Mask,
    Box,
}

fn score(m: &InstanceMask) -> f64 {
    m.score.unwrap_or(1.0)
}

/// Greedy non-maximum suppression in descending score order (ties: smaller
/// id first). An instance survives when its overlap with every survivor so
/// far is below `iou_thr`. Survivors keep their input order.
pub fn nms(instances: &[InstanceMask], iou_thr: f64, kind: OverlapKind) -> Result<Vec<InstanceMask>> {
    let masks = decode_all(instances)?;
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&i, &j| {
        score(&instances[j])
            .total_cmp(&score(&instances[i]))
            .then(instances[i].id.cmp(&instances[j].id))
    });
    let mut accepted: Vec<usize> = Vec::new();
    for i in order {
        let clear = accepted.iter().all(|&j| {
            let iou = match kind {
                OverlapKind::Mask => pixel_iou(&masks[i], &masks[j]),
                OverlapKind::Box => box_iou(&instances[i].bbox, &instances[j].bbox),
            };
            iou < iou_thr
        });
        if clear {
            accepted.push(i);
        }
    }
    Ok(keep_in_order(instances, accepted))
}

/// Remove masks largely inside another: for a pair whose intersection over
/// the smaller area reaches `ios_thr`, the smaller one goes (ties: lower
/// score, then larger id). Processed greedily from the largest area down.
pub fn containment_filter(instances: &[InstanceMask], ios_thr: f64) -> Result<Vec<InstanceMask>> {
    let masks = decode_all(instances)?;
    let areas: Vec<u64> = masks.iter().map(PixelMask::area).collect();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&i, &j| {
        areas[j]
            .cmp(&areas[i])
            .then_with(|| score(&instances[j]).total_cmp(&score(&instances[i])))
            .then(instances[i].id.cmp(&instances[j].id))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let contained = kept.iter().any(|&j| {
            let smaller = areas[i].min(areas[j]);
            smaller > 0 && masks[i].intersection(&masks[j]) as f64 / smaller as f64 >= ios_thr
        });
        if !contained {
            kept.push(i);
        }
    }
    Ok(keep_in_order(instances, kept))
}

fn decode_all(instances: &[InstanceMask]) -> Result<Vec<PixelMask>> {
    instances.iter().map(InstanceMask::decode).collect()
}

fn keep_in_order(instances: &[InstanceMask], mut keep: Vec<usize>) -> Vec<InstanceMask> {
    keep.sort_unstable();
    keep.into_iter().map(|i| instances[i].clone()).collect()
}

/// Binary mask of the pixels of a soft mask (band 0) with probability at
/// least `mask_thr`, in the raster's pixel grid.
pub fn binarize(soft: &Raster, mask_thr: f64, id: u64, score: Option<f64>) -> Result<InstanceMask> {
    let w = soft.width();
    let pixels: Vec<(u32, u32)> = soft
        .band(0)
        .iter()
        .enumerate()
        .filter(|(_, &p)| !soft.is_nodata(p) && p >= mask_thr)
        .map(|(i, _)| ((i % w) as u32, (i / w) as u32))
        .collect();
    let mask = PixelMask::from_pixels(&pixels)
        .ok_or_else(|| Error::invalid(format!("empty mask for instance {id}")))?;
    InstanceMask::from_mask(id, &mask, score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostfilterParams {
    pub score: f64,
    pub nms_iou: f64,
    pub nms_kind: OverlapKind,
    /// Containment threshold; `None` disables the containment pass.
    pub ios: Option<f64>,
}

impl Default for PostfilterParams {
    fn default() -> Self {
        PostfilterParams {
            score: DEFAULT_SCORE_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            nms_kind: OverlapKind::Mask,
            ios: Some(DEFAULT_CONTAINMENT),
        }
    }
}

/// Score gate, NMS, then containment, tile by tile.
pub fn postfilter_set(set: &AnnotationSet, params: &PostfilterParams) -> Result<AnnotationSet> {
    let tiles = set
        .tiles
        .par_iter()
        .map(|tile| {
            let scored = threshold_filter(&tile.instances, params.score);
            let mut kept = nms(&scored, params.nms_iou, params.nms_kind)?;
            if let Some(ios) = params.ios {
                kept = containment_filter(&kept, ios)?;
            }
            let mut t = tile.clone();
            t.instances = kept;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnnotationSet {
        tiles,
        ..set.clone()
    })
}
