use rayon::prelude::*;

use super::Raster;
use crate::error::{Error, Result};

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`,
/// `radius = ceil(3 * sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`),
/// periodic so that kernels wider than the raster still resolve.
#[inline]
fn reflect(i: isize, n: isize) -> usize {
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Separable Gaussian blur of a single-band raster.
///
/// Nodata cells carry zero weight and the remaining weights are
/// renormalized, so gaps do not pull neighbors toward the sentinel. Nodata
/// cells stay nodata in the output. `sigma == 0` returns the input as-is.
pub fn gaussian_smooth(raster: &Raster, sigma: f64) -> Result<Raster> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian sigma must be >= 0, got {sigma}"
        )));
    }
    if raster.bands() != 1 {
        return Err(Error::invalid(format!(
            "gaussian smoothing expects a single-band raster, got {} bands",
            raster.bands()
        )));
    }
    if sigma == 0.0 || raster.width() == 0 || raster.height() == 0 {
        return Ok(raster.clone());
    }

    let (w, h) = (raster.width(), raster.height());
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let src = raster.band(0);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut weighted = vec![0.0; w * h];
    let mut mask = vec![0.0; w * h];
    for (i, &v) in src.iter().enumerate() {
        if !raster.is_nodata(v) {
            weighted[i] = v;
            mask[i] = 1.0;
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return Ok(raster.clone());
    }

    // Normalized convolution: blur value*mask and mask with the same
    // separable kernel, then divide.
    let horizontal = |plane: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        out.par_chunks_mut(w).enumerate().for_each(|(r, row_out)| {
            let row = &plane[r * w..(r + 1) * w];
            for (c, o) in row_out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &tap) in kernel.iter().enumerate() {
                    let idx = reflect(c as isize + k as isize - radius, w as isize);
                    acc += tap * row[idx];
                }
                *o = acc;
            }
        });
        out
    };
    let vertical = |plane: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        out.par_chunks_mut(w).enumerate().for_each(|(r, row_out)| {
            for (k, &tap) in kernel.iter().enumerate() {
                let src_r = reflect(r as isize + k as isize - radius, h as isize);
                let row = &plane[src_r * w..(src_r + 1) * w];
                for (o, &v) in row_out.iter_mut().zip(row) {
                    *o += tap * v;
                }
            }
        });
        out
    };

    let num = vertical(&horizontal(&weighted));
    let den = vertical(&horizontal(&mask));

    let nodata = raster.nodata();
    let values: Vec<f64> = src
        .iter()
        .zip(num.iter().zip(&den))
        .map(|(&v, (&n, &d))| {
            if raster.is_nodata(v) {
                nodata
            } else {
                (n / d).clamp(lo, hi)
            }
        })
        .collect();
    raster.with_values(values)
}
