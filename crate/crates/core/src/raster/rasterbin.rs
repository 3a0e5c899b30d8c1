//! `rasterbin`: a JSON sidecar describing the grid plus a headerless
//! little-endian `f32` payload, row-major and band-sequential.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Geotransform, Raster};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterHeader {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub dtype: String,
    pub nodata: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    /// Effective configuration of the stage that wrote the raster.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl RasterHeader {
    pub fn of(raster: &Raster) -> Self {
        let gt = raster.geotransform();
        RasterHeader {
            width: raster.width(),
            height: raster.height(),
            bands: raster.bands(),
            dtype: "f32".to_string(),
            nodata: raster.nodata(),
            origin_x: gt.origin_x,
            origin_y: gt.origin_y,
            cell_size: gt.cell_size,
            config: None,
        }
    }

    pub fn geotransform(&self) -> Result<Geotransform> {
        Geotransform::new(self.origin_x, self.origin_y, self.cell_size)
            .map_err(|e| Error::format(format!("rasterbin header: {e}")))
    }

    fn payload_len(&self) -> Result<usize> {
        self.width
            .checked_mul(self.height)
            .and_then(|n| n.checked_mul(self.bands))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("rasterbin header: dimensions overflow"))
    }
}

/// Sidecar and payload locations for a raster path.
///
/// `out/chm`, `out/chm.rasterbin`, `out/chm.json` and `out/chm.bin` all
/// name the pair `out/chm.json` + `out/chm.bin`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterPaths {
    pub header: PathBuf,
    pub payload: PathBuf,
}

impl RasterPaths {
    pub fn new(path: impl AsRef<Path>) -> Self {
        let path = path.as_ref();
        let base = match path.extension().and_then(|e| e.to_str()) {
            Some("rasterbin" | "json" | "bin") => path.with_extension(""),
            _ => path.to_path_buf(),
        };
        let with = |ext: &str| {
            let mut s = base.clone().into_os_string();
            s.push(".");
            s.push(ext);
            PathBuf::from(s)
        };
        RasterPaths {
            header: with("json"),
            payload: with("bin"),
        }
    }
}

/// Serialize a raster to its header and payload bytes.
pub fn encode_rasterbin(raster: &Raster) -> (RasterHeader, Vec<u8>) {
    let mut bytes = Vec::with_capacity(raster.values().len() * 4);
    for &v in raster.values() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    (RasterHeader::of(raster), bytes)
}

pub fn decode_rasterbin(header: &RasterHeader, bytes: &[u8]) -> Result<Raster> {
    if header.dtype != "f32" {
        return Err(Error::format(format!(
            "unsupported rasterbin dtype {:?} (only \"f32\")",
            header.dtype
        )));
    }
    if header.bands == 0 {
        return Err(Error::format("rasterbin header: bands must be >= 1"));
    }
    let expected = header.payload_len()?;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "rasterbin size mismatch: header {}x{}x{} needs {expected} bytes, payload has {}",
            header.width,
            header.height,
            header.bands,
            bytes.len()
        )));
    }
    let gt = header.geotransform()?;
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Raster::new(
        header.width,
        header.height,
        header.bands,
        gt,
        header.nodata,
        values,
    )
    .map_err(|e| Error::format(format!("rasterbin payload: {e}")))
}

pub fn read_raster_header(path: impl AsRef<Path>) -> Result<RasterHeader> {
    let paths = RasterPaths::new(path);
    let text = fs::read_to_string(&paths.header).map_err(|e| Error::io(&paths.header, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::format(format!(
            "{}: malformed rasterbin header: {e}",
            paths.header.display()
        ))
    })
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let paths = RasterPaths::new(path.as_ref());
    let header = read_raster_header(path)?;
    let bytes = fs::read(&paths.payload).map_err(|e| Error::io(&paths.payload, e))?;
    decode_rasterbin(&header, &bytes)
        .map_err(|e| Error::format(format!("{}: {e}", paths.payload.display())))
}

pub fn write_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    write_raster_with_config(raster, path, None)
}

pub fn write_raster_with_config(
    raster: &Raster,
    path: impl AsRef<Path>,
    config: Option<serde_json::Value>,
) -> Result<()> {
    let paths = RasterPaths::new(path);
    let (mut header, bytes) = encode_rasterbin(raster);
    header.config = config;
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&paths.header, text + "\n").map_err(|e| Error::io(&paths.header, e))?;
    fs::write(&paths.payload, bytes).map_err(|e| Error::io(&paths.payload, e))?;
    Ok(())
}
