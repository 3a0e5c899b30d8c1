//! Canopy height model from normalized first returns.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::raster::{Raster, DEFAULT_NODATA};

pub const DEFAULT_CHM_CELL: f64 = 0.5;

/// Per-cell maximum height of first returns from the selected channels.
/// Cells without a qualifying return are nodata.
pub fn rasterize_chm(pc: &PointCloud, cell_size: f64, channels: &BTreeSet<u8>) -> Result<Raster> {
    if channels.is_empty() {
        return Err(Error::invalid("channel set for the canopy model is empty"));
    }
    let (gt, w, h) = pc.grid(cell_size)?;
    let mut cells = vec![f64::NEG_INFINITY; w * h];
    for p in pc
        .points()
        .iter()
        .filter(|p| p.return_number == 1 && channels.contains(&p.channel))
    {
        let (r, c) = gt.cell_of(p.x, p.y);
        let i = r as usize * w + c as usize;
        cells[i] = cells[i].max(p.z);
    }
    let values = cells
        .into_iter()
        .map(|v| if v.is_finite() { v } else { DEFAULT_NODATA })
        .collect();
    Raster::new(w, h, 1, gt, DEFAULT_NODATA, values)
}

/// Fill nodata cells: the median of the valid 8-neighbors when at least
/// five exist, otherwise 0 (open ground).
pub fn fill_chm_gaps(chm: &Raster) -> Result<Raster> {
    let (w, h) = (chm.width() as i64, chm.height() as i64);
    let mut values = chm.band(0).to_vec();
    let mut neighbors = Vec::with_capacity(8);
    for r in 0..h {
        for c in 0..w {
            if chm.sample(r, c).is_some() {
                continue;
            }
            neighbors.clear();
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if (dr, dc) != (0, 0) {
                        if let Some(v) = chm.sample(r + dr, c + dc) {
                            neighbors.push(v);
                        }
                    }
                }
            }
            values[(r * w + c) as usize] = if neighbors.len() >= 5 {
                median(&mut neighbors)
            } else {
                0.0
            };
        }
    }
    chm.with_values(values)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
