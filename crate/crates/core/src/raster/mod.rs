//! Gridded data model shared by every stage.
//!
//! A [`Raster`] is a band-sequential, row-major block of `f64` values placed
//! on the map by a north-up [`Geotransform`]. Rasters are never mutated after
//! construction; operations return new rasters.

mod rasterbin;
mod smooth;

pub use rasterbin::{
    decode_rasterbin, encode_rasterbin, read_raster, read_raster_header, write_raster,
    write_raster_with_config, RasterHeader, RasterPaths,
};
pub use smooth::{gaussian_kernel, gaussian_smooth};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default nodata sentinel used by rasters this crate creates.
pub const DEFAULT_NODATA: f64 = -9999.0;

// Absorbs representation error when a map coordinate lands exactly on a
// cell edge (0.25 / 0.05 is not exactly 5 in binary floating point).
const EDGE_EPS: f64 = 1e-9;

/// North-up affine placement of a grid: square cells, rows run southward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geotransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
}

impl Geotransform {
    pub fn new(origin_x: f64, origin_y: f64, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        if !origin_x.is_finite() || !origin_y.is_finite() {
            return Err(Error::invalid("geotransform origin must be finite"));
        }
        Ok(Geotransform {
            origin_x,
            origin_y,
            cell_size,
        })
    }

    /// Smallest grid aligned to multiples of `cell_size` that covers the
    /// bounding box. Returns the transform plus `(width, height)`.
    pub fn covering(
        min_x: f64,
        min_y: f64,
        max_x: f64,
        max_y: f64,
        cell_size: f64,
    ) -> Result<(Self, usize, usize)> {
        let origin_x = (min_x / cell_size).floor() * cell_size;
        let origin_y = (max_y / cell_size).ceil() * cell_size;
        let gt = Geotransform::new(origin_x, origin_y, cell_size)?;
        let width = ((max_x - origin_x) / cell_size + EDGE_EPS).floor() as usize + 1;
        let height = ((origin_y - min_y) / cell_size + EDGE_EPS).floor() as usize + 1;
        Ok((gt, width, height))
    }

    /// Map coordinates of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: i64, col: i64) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.cell_size,
            self.origin_y - (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// `(row, col)` of the cell containing the map point. May be out of range.
    pub fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        let col = ((x - self.origin_x) / self.cell_size + EDGE_EPS).floor() as i64;
        let row = ((self.origin_y - y) / self.cell_size + EDGE_EPS).floor() as i64;
        (row, col)
    }
}

/// Pixel of `dst` that contains the center of `src` cell `(row, col)`.
///
/// Results outside the destination grid are returned as-is.
pub fn map_pixel(src: &Geotransform, row: i64, col: i64, dst: &Geotransform) -> (i64, i64) {
    let (x, y) = src.cell_center(row, col);
    dst.cell_of(x, y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    bands: usize,
    geotransform: Geotransform,
    nodata: f64,
    values: Vec<f64>,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        bands: usize,
        geotransform: Geotransform,
        nodata: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if bands == 0 {
            return Err(Error::invalid("raster needs at least one band"));
        }
        if !nodata.is_finite() {
            return Err(Error::invalid("nodata sentinel must be finite"));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(bands))
            .ok_or_else(|| Error::invalid("raster dimensions overflow"))?;
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "raster of {width}x{height}x{bands} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite raster value at index {bad}"
            )));
        }
        Ok(Raster {
            width,
            height,
            bands,
            geotransform,
            nodata,
            values,
        })
    }

    /// Single-band raster filled with `value`.
    pub fn filled(
        width: usize,
        height: usize,
        geotransform: Geotransform,
        nodata: f64,
        value: f64,
    ) -> Result<Self> {
        Raster::new(
            width,
            height,
            1,
            geotransform,
            nodata,
            vec![value; width * height],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn geotransform(&self) -> &Geotransform {
        &self.geotransform
    }

    pub fn nodata(&self) -> f64 {
        self.nodata
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.values[band * n..(band + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f64 {
        self.values[(band * self.height + row) * self.width + col]
    }

    /// Value at `(row, col)` of band 0, or `None` when outside or nodata.
    pub fn sample(&self, row: i64, col: i64) -> Option<f64> {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            return None;
        }
        let v = self.get(0, row as usize, col as usize);
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn contains(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    /// Same grid and nodata, new single-band values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Raster> {
        Raster::new(
            self.width,
            self.height,
            1,
            self.geotransform,
            self.nodata,
            values,
        )
    }

    /// Copy of one band as a single-band raster.
    pub fn extract_band(&self, band: usize) -> Result<Raster> {
        if band >= self.bands {
            return Err(Error::invalid(format!(
                "band {band} out of range for {}-band raster",
                self.bands
            )));
        }
        self.with_values(self.band(band).to_vec())
    }

    /// Rectangular crop of all bands; the window must lie inside the raster.
    pub fn window(&self, col0: usize, row0: usize, width: usize, height: usize) -> Result<Raster> {
        if col0 + width > self.width || row0 + height > self.height {
            return Err(Error::invalid(format!(
                "window {col0},{row0} {width}x{height} exceeds raster {}x{}",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(width * height * self.bands);
        for b in 0..self.bands {
            let band = self.band(b);
            for r in row0..row0 + height {
                let start = r * self.width + col0;
                values.extend_from_slice(&band[start..start + width]);
            }
        }
        let cs = self.geotransform.cell_size;
        let gt = Geotransform {
            origin_x: self.geotransform.origin_x + col0 as f64 * cs,
            origin_y: self.geotransform.origin_y - row0 as f64 * cs,
            cell_size: cs,
        };
        Raster::new(width, height, self.bands, gt, self.nodata, values)
    }
}
