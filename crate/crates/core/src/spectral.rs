//! Red-edge vegetation index and per-segment filtering.
//!
//! The index is `(RE - Red) / (RE + Red)`: the red-edge band stands in for
//! near infrared. [`BandSet`] chooses which orthophoto bands feed it.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelset::InstanceMask;
use crate::raster::{map_pixel, Geotransform, Raster};

pub const DEFAULT_NDVI_THRESHOLD: f64 = 0.2;

/// Band indices into the orthophoto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSet {
    pub blue: usize,
    pub green: usize,
    pub red: usize,
    pub red_edge: usize,
    pub nir: usize,
}

impl Default for BandSet {
    fn default() -> Self {
        BandSet {
            blue: 0,
            green: 1,
            red: 2,
            red_edge: 3,
            nir: 4,
        }
    }
}

impl BandSet {
    pub fn validate(&self, band_count: usize) -> Result<()> {
        let all = [self.blue, self.green, self.red, self.red_edge, self.nir];
        for (i, b) in all.iter().enumerate() {
            if *b >= band_count {
                return Err(Error::invalid(format!(
                    "band index {b} out of range for a {band_count}-band raster"
                )));
            }
            if all[..i].contains(b) {
                return Err(Error::invalid(format!("band index {b} used twice")));
            }
        }
        Ok(())
    }
}

/// `(RE - Red) / (RE + Red)` per pixel; nodata where either input is nodata
/// or the denominator is zero.
pub fn compute_ndvi(ortho: &Raster, bands: &BandSet) -> Result<Raster> {
    bands.validate(ortho.bands())?;
    let red = ortho.band(bands.red);
    let re = ortho.band(bands.red_edge);
    let nodata = ortho.nodata();
    let values = red
        .par_iter()
        .zip(re.par_iter())
        .map(|(&r, &e)| {
            let sum = e + r;
            if ortho.is_nodata(r) || ortho.is_nodata(e) || sum == 0.0 {
                nodata
            } else {
                ((e - r) / sum).clamp(-1.0, 1.0)
            }
        })
        .collect();
    ortho.with_values(values)
}

/// Mean index value per instance id over the index-raster pixels whose
/// centers fall in the instance's CHM cells. Instances without any valid
/// pixel get `f64::NEG_INFINITY`.
pub fn segment_mean_index(
    instances: &[InstanceMask],
    chm_gt: &Geotransform,
    index: &Raster,
) -> Result<BTreeMap<u64, f64>> {
    let igt = index.geotransform();
    let means = instances
        .par_iter()
        .map(|inst| {
            let mask = inst.decode()?;
            let b = mask.bbox;
            let (x0, y0) = chm_gt.cell_center(b.y as i64, b.x as i64);
            let (x1, y1) = chm_gt.cell_center(b.y1() as i64 - 1, b.x1() as i64 - 1);
            let half = 0.5 * chm_gt.cell_size;
            let (r0, c0) = igt.cell_of(x0 - half, y0 + half);
            let (r1, c1) = igt.cell_of(x1 + half, y1 - half);
            let mut sum = 0.0;
            let mut n = 0u64;
            for r in (r0 - 1).max(0)..=(r1 + 1).min(index.height() as i64 - 1) {
                for c in (c0 - 1).max(0)..=(c1 + 1).min(index.width() as i64 - 1) {
                    let (cr, cc) = map_pixel(igt, r, c, chm_gt);
                    if cr < 0 || cc < 0 || !mask.get(cc as u32, cr as u32) {
                        continue;
                    }
                    if let Some(v) = index.sample(r, c) {
                        sum += v;
                        n += 1;
                    }
                }
            }
            let mean = if n == 0 {
                f64::NEG_INFINITY
            } else {
                sum / n as f64
            };
            Ok((inst.id, mean))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(means.into_iter().collect())
}

/// Keep instances whose segment mean is at least `threshold`, in order.
pub fn filter_by_ndvi(
    instances: &[InstanceMask],
    means: &BTreeMap<u64, f64>,
    threshold: f64,
) -> Result<Vec<InstanceMask>> {
    let mut kept = Vec::with_capacity(instances.len());
    for inst in instances {
        let mean = means
            .get(&inst.id)
            .ok_or_else(|| Error::invalid(format!("no index mean for instance {}", inst.id)))?;
        if *mean >= threshold {
            kept.push(inst.clone());
        }
    }
    Ok(kept)
}

/// `label,mean_ndvi` rows, ascending label.
pub fn write_histogram_csv<W: Write>(means: &BTreeMap<u64, f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::format(format!("writing histogram csv: {e}"));
    w.write_record(["label", "mean_ndvi"]).map_err(err)?;
    for (label, mean) in means {
        let v = if mean.is_finite() {
            mean.to_string()
        } else {
            "-inf".to_string()
        };
        w.write_record([label.to_string(), v]).map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::format(format!("writing histogram csv: {e}")))
}
