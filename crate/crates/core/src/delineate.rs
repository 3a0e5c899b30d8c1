//! Treetop detection and marker-controlled watershed crown segmentation.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelset::{InstanceMask, PixelMask};
use crate::raster::{gaussian_smooth, Geotransform, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Treetop {
    pub row: u32,
    pub col: u32,
    pub height: f64,
}

/// Parameters of crown delineation. The search radius around a cell of
/// height `h` is `win_a + win_b * h` meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelineateParams {
    /// Gaussian sigma in CHM cells applied before detection and flooding.
    pub sigma: f64,
    pub min_tree_height: f64,
    pub win_a: f64,
    pub win_b: f64,
}

impl Default for DelineateParams {
    fn default() -> Self {
        DelineateParams {
            sigma: 1.0,
            min_tree_height: 2.0,
            win_a: 1.0,
            win_b: 0.05,
        }
    }
}

impl DelineateParams {
    /// Search radius in whole cells for a cell of height `h`.
    pub fn radius_cells(&self, h: f64, cell_size: f64) -> u32 {
        ((self.win_a + self.win_b * h) / cell_size).ceil().max(0.0) as u32
    }
}

/// Offsets `(dr, dc)` with `dr^2 + dc^2 <= r^2`, excluding the origin.
fn disc_offsets(r: u32) -> Vec<(i64, i64)> {
    let r = r as i64;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if (dr, dc) != (0, 0) && dr * dr + dc * dc <= r * r {
                out.push((dr, dc));
            }
        }
    }
    out
}

fn heights(chm: &Raster) -> Vec<f64> {
    chm.band(0)
        .iter()
        .map(|&v| if chm.is_nodata(v) { f64::NEG_INFINITY } else { v })
        .collect()
}

/// Variable-window local maxima of a smoothed CHM.
///
/// A cell qualifies when it reaches `min_tree_height` and no cell within
/// its search disc is higher. Equal-valued 4-connected qualifying cells are
/// reduced to the first in row-major order.
pub fn local_maxima(chm: &Raster, params: &DelineateParams) -> Vec<Treetop> {
    let (w, h) = (chm.width(), chm.height());
    let cs = chm.geotransform().cell_size;
    let z = heights(chm);

    let max_radius = z
        .iter()
        .filter(|v| v.is_finite())
        .fold(0, |m, &v| m.max(params.radius_cells(v, cs)));
    let discs: Vec<Vec<(i64, i64)>> = (0..=max_radius).map(disc_offsets).collect();

    let candidate: Vec<bool> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let v = z[i];
            if !(v >= params.min_tree_height) {
                return false;
            }
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            discs[params.radius_cells(v, cs) as usize]
                .iter()
                .all(|&(dr, dc)| {
                    let (rr, cc) = (r + dr, c + dc);
                    rr < 0
                        || cc < 0
                        || rr >= h as i64
                        || cc >= w as i64
                        || z[rr as usize * w + cc as usize] <= v
                })
        })
        .collect();

    let mut seen = vec![false; w * h];
    let mut tops = Vec::new();
    let mut queue = VecDeque::new();
    for i in 0..w * h {
        if !candidate[i] || seen[i] {
            continue;
        }
        tops.push(Treetop {
            row: (i / w) as u32,
            col: (i % w) as u32,
            height: z[i],
        });
        seen[i] = true;
        queue.push_back(i);
        while let Some(j) = queue.pop_front() {
            for k in neighbors4(j, w, h) {
                if candidate[k] && !seen[k] && z[k] == z[i] {
                    seen[k] = true;
                    queue.push_back(k);
                }
            }
        }
    }
    tops
}

#[inline]
fn neighbors4(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / w, i % w);
    [
        (r > 0).then(|| i - w),
        (c > 0).then(|| i - 1),
        (c + 1 < w).then(|| i + 1),
        (r + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// Integer-labeled crowns on the CHM grid; 0 is background and label `k`
/// grew from `tops[k - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    pub width: usize,
    pub height: usize,
    pub geotransform: Geotransform,
    pub labels: Vec<u32>,
    pub tops: Vec<Treetop>,
}

impl SegmentMap {
    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn segment_count(&self) -> usize {
        self.tops.len()
    }
}

#[derive(PartialEq)]
struct FloodEntry {
    height: f64,
    seq: u64,
    index: usize,
}

impl Eq for FloodEntry {}

impl Ord for FloodEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Highest first; among equals, earliest enqueued first.
        self.height
            .total_cmp(&other.height)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for FloodEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Priority-flood region growing from treetop markers, highest cells first.
///
/// Markers are sorted by `(row, col)` and labeled 1.. in that order, so the
/// result does not depend on the order they are passed in. A cell takes the
/// label of the neighbor that first reached it; cells below
/// `min_tree_height` stay background.
pub fn marker_watershed(
    chm: &Raster,
    markers: &[Treetop],
    min_tree_height: f64,
) -> Result<SegmentMap> {
    let (w, h) = (chm.width(), chm.height());
    let z = heights(chm);

    let mut tops = markers.to_vec();
    tops.sort_by_key(|t| (t.row, t.col));
    let mut distinct = BTreeSet::new();
    for t in &tops {
        if t.row as usize >= h || t.col as usize >= w {
            return Err(Error::invalid(format!(
                "marker ({}, {}) outside the {w}x{h} grid",
                t.row, t.col
            )));
        }
        if !distinct.insert((t.row, t.col)) {
            return Err(Error::invalid(format!(
                "duplicate marker at ({}, {})",
                t.row, t.col
            )));
        }
        let v = z[t.row as usize * w + t.col as usize];
        if !(v >= min_tree_height) {
            return Err(Error::invalid(format!(
                "marker ({}, {}) at height {v} is below the minimum tree height",
                t.row, t.col
            )));
        }
    }

    let mut labels = vec![0u32; w * h];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for (k, t) in tops.iter().enumerate() {
        let i = t.row as usize * w + t.col as usize;
        labels[i] = k as u32 + 1;
        heap.push(FloodEntry {
            height: z[i],
            seq,
            index: i,
        });
        seq += 1;
    }
    while let Some(FloodEntry { index, .. }) = heap.pop() {
        let label = labels[index];
        for n in neighbors4(index, w, h) {
            if labels[n] == 0 && z[n] >= min_tree_height {
                labels[n] = label;
                heap.push(FloodEntry {
                    height: z[n],
                    seq,
                    index: n,
                });
                seq += 1;
            }
        }
    }

    // Report the marker heights as seen on the flooded surface.
    for t in &mut tops {
        t.height = z[t.row as usize * w + t.col as usize];
    }
    Ok(SegmentMap {
        width: w,
        height: h,
        geotransform: *chm.geotransform(),
        labels,
        tops,
    })
}

/// One coarse crown on the CHM grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CrownInstance {
    pub label: u32,
    pub mask: InstanceMask,
    pub apex: Treetop,
}

pub fn segments_to_instances(sm: &SegmentMap) -> Result<Vec<CrownInstance>> {
    let mut pixels: Vec<Vec<(u32, u32)>> = vec![Vec::new(); sm.tops.len()];
    for (i, &l) in sm.labels.iter().enumerate() {
        if l > 0 {
            pixels[l as usize - 1].push(((i % sm.width) as u32, (i / sm.width) as u32));
        }
    }
    pixels
        .iter()
        .zip(&sm.tops)
        .enumerate()
        .filter(|(_, (p, _))| !p.is_empty())
        .map(|(k, (p, top))| {
            let label = k as u32 + 1;
            let mask = PixelMask::from_pixels(p).expect("non-empty");
            Ok(CrownInstance {
                label,
                mask: InstanceMask::from_mask(label as u64, &mask, None)?,
                apex: *top,
            })
        })
        .collect()
}

/// Smooth, detect treetops and flood: the full coarse delineation.
pub fn delineate(chm: &Raster, params: &DelineateParams) -> Result<SegmentMap> {
    let smoothed = gaussian_smooth(chm, params.sigma)?;
    let tops = local_maxima(&smoothed, params);
    marker_watershed(&smoothed, &tops, params.min_tree_height)
}
