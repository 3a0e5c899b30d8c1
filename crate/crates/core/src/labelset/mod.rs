//! Instance annotations: RLE masks, tiling with the centroid-in-center
//! rule, grid upscaling and the annotation JSON format.

mod mask;

pub use mask::{rle_decode, rle_encode, BBox, InstanceMask, PixelMask};

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{map_pixel, Geotransform};

pub const DEFAULT_TILE_SIZE: u32 = 1024;
pub const DEFAULT_TILE_STRIDE: u32 = 512;

/// Square image patch; its center window is the middle `size / 2` square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileSpec {
    pub x: u32,
    pub y: u32,
    pub size: u32,
}

impl TileSpec {
    pub fn bounds(&self) -> BBox {
        BBox::new(self.x, self.y, self.size, self.size)
    }

    pub fn center_window(&self) -> BBox {
        let q = self.size / 4;
        BBox::new(self.x + q, self.y + q, self.size - 2 * q, self.size - 2 * q)
    }

    /// Whether a centroid (continuous pixel coordinates) falls in the center
    /// window. Windows are half-open so neighbors never share a point.
    pub fn center_contains(&self, centroid: [f64; 2]) -> bool {
        let w = self.center_window();
        let [x, y] = centroid;
        x >= w.x as f64 && x < w.x1() as f64 && y >= w.y as f64 && y < w.y1() as f64
    }
}

fn tile_starts(extent: u32, size: u32, stride: u32) -> Vec<u32> {
    let mut starts = Vec::new();
    let mut p = 0u32;
    loop {
        starts.push(p.min(extent - size));
        if p + size >= extent {
            break;
        }
        p += stride;
    }
    starts.dedup();
    starts
}

/// Tiles covering `width x height`, stepping by `stride`. The last row and
/// column are shifted inward to end at the extent boundary.
pub fn make_tiles(width: u32, height: u32, size: u32, stride: u32) -> Result<Vec<TileSpec>> {
    if size == 0 || stride == 0 || stride > size {
        return Err(Error::invalid(format!(
            "tile size {size} / stride {stride}: need 0 < stride <= size"
        )));
    }
    if width < size || height < size {
        return Err(Error::invalid(format!(
            "extent {width}x{height} is smaller than one {size}x{size} tile"
        )));
    }
    let xs = tile_starts(width, size, stride);
    let ys = tile_starts(height, size, stride);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| TileSpec { x, y, size }))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tile {
    pub origin: [u32; 2],
    /// Edge length in pixels; 0 marks an untiled set covering the whole grid.
    pub size: u32,
    pub instances: Vec<InstanceMask>,
}

impl Tile {
    pub fn spec(&self) -> Option<TileSpec> {
        (self.size > 0).then_some(TileSpec {
            x: self.origin[0],
            y: self.origin[1],
            size: self.size,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub cell_size_m: f64,
    /// Map coordinates of the host grid's top-left corner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_m: Option<[f64; 2]>,
    /// Host grid `(width, height)` in pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub tiles: Vec<Tile>,
}

impl AnnotationSet {
    /// A single untiled group of instances on the given grid.
    pub fn untiled(
        gt: &Geotransform,
        width: u32,
        height: u32,
        instances: Vec<InstanceMask>,
    ) -> Self {
        AnnotationSet {
            cell_size_m: gt.cell_size,
            origin_m: Some([gt.origin_x, gt.origin_y]),
            extent: Some([width, height]),
            config: None,
            tiles: vec![Tile {
                origin: [0, 0],
                size: 0,
                instances,
            }],
        }
    }

    pub fn geotransform(&self) -> Option<Geotransform> {
        let [x, y] = self.origin_m?;
        Geotransform::new(x, y, self.cell_size_m).ok()
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceMask> {
        self.tiles.iter().flat_map(|t| t.instances.iter())
    }

    pub fn instance_count(&self) -> usize {
        self.tiles.iter().map(|t| t.instances.len()).sum()
    }

    pub fn is_tiled(&self) -> bool {
        self.tiles.iter().any(|t| t.size > 0)
    }

    /// All instances of an untiled set; errors on a tiled one.
    pub fn untiled_instances(&self) -> Result<Vec<InstanceMask>> {
        if self.is_tiled() {
            return Err(Error::invalid(
                "expected an untiled annotation set, got a tiled one",
            ));
        }
        Ok(self.instances().cloned().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size_m > 0.0) {
            return Err(Error::format("annotation cell_size_m must be > 0"));
        }
        let mut ids = BTreeSet::new();
        for tile in &self.tiles {
            for inst in &tile.instances {
                inst.validate()?;
                if tile.size > 0 && (inst.bbox.x1() > tile.size || inst.bbox.y1() > tile.size) {
                    return Err(Error::format(format!(
                        "instance {} bbox exceeds its {}px tile",
                        inst.id, tile.size
                    )));
                }
                if !ids.insert(inst.id) {
                    return Err(Error::format(format!("duplicate instance id {}", inst.id)));
                }
            }
        }
        Ok(())
    }
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn parse_annotations(text: &str) -> Result<AnnotationSet> {
    let set: AnnotationSet =
        serde_json::from_str(text).map_err(|e| Error::format(format!("annotation json: {e}")))?;
    set.validate()?;
    Ok(set)
}

pub fn annotations_to_string(set: &AnnotationSet) -> String {
    serde_json::to_string(set).expect("annotation set serializes") + "\n"
}

pub fn write_annotations(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, annotations_to_string(set)).map_err(|e| Error::io(path, e))
}

/// Result of [`assign_to_tiles`].
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub tiles: Vec<Tile>,
    /// Instances whose centroid lay in no center window.
    pub dropped: usize,
}

/// Attach each instance (global pixels) to the first tile whose center
/// window holds its centroid, rebased to tile-local pixels and clipped to
/// the tile. Assignment uses the unclipped centroid.
pub fn assign_to_tiles(instances: &[InstanceMask], tiles: &[TileSpec]) -> Result<Assignment> {
    let owner: Vec<Option<usize>> = instances
        .iter()
        .map(|inst| tiles.iter().position(|t| t.center_contains(inst.centroid)))
        .collect();
    let dropped = owner.iter().filter(|o| o.is_none()).count();
    if dropped > 0 {
        log::info!("{dropped} instance(s) had no center window and were dropped");
    }

    let tiles = tiles
        .par_iter()
        .enumerate()
        .map(|(ti, spec)| {
            let mut out = Vec::new();
            for (inst, _) in instances
                .iter()
                .zip(&owner)
                .filter(|(_, o)| **o == Some(ti))
            {
                let mask = inst.decode()?;
                let Some(clipped) = mask.clip(&spec.bounds()) else {
                    continue;
                };
                let local = clipped.shifted(spec.x, spec.y);
                let mut rebased = InstanceMask::from_mask(inst.id, &local, inst.score)?;
                rebased.fallback = inst.fallback;
                out.push(rebased);
            }
            Ok(Tile {
                origin: [spec.x, spec.y],
                size: spec.size,
                instances: out,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Assignment { tiles, dropped })
}

/// Nearest-neighbor transfer of masks from a coarse grid to a finer one:
/// each destination pixel inherits the source cell holding its center.
/// Pixels outside `dst_extent` are dropped, as are masks left empty.
pub fn upscale_instances(
    instances: &[InstanceMask],
    src: &Geotransform,
    dst: &Geotransform,
    dst_extent: (u32, u32),
) -> Result<Vec<InstanceMask>> {
    let results = instances
        .par_iter()
        .map(|inst| {
            let mask = inst.decode()?;
            let b = mask.bbox;
            // Destination window covering the source bbox, padded one pixel
            // against rounding at the edges.
            let (x0, y0) = src.cell_center(b.y as i64, b.x as i64);
            let half = 0.5 * src.cell_size;
            let (r0, c0) = dst.cell_of(x0 - half, y0 + half);
            let (x1, y1) = src.cell_center(b.y1() as i64 - 1, b.x1() as i64 - 1);
            let (r1, c1) = dst.cell_of(x1 + half, y1 - half);
            let c_lo = (c0 - 1).max(0);
            let r_lo = (r0 - 1).max(0);
            let c_hi = (c1 + 1).min(dst_extent.0 as i64 - 1);
            let r_hi = (r1 + 1).min(dst_extent.1 as i64 - 1);
            let mut pixels = Vec::new();
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    let (sr, sc) = map_pixel(dst, r, c, src);
                    if sr >= 0 && sc >= 0 && mask.get(sc as u32, sr as u32) {
                        pixels.push((c as u32, r as u32));
                    }
                }
            }
            match PixelMask::from_pixels(&pixels) {
                Some(m) => {
                    let mut out = InstanceMask::from_mask(inst.id, &m, inst.score)?;
                    out.fallback = inst.fallback;
                    Ok(Some(out))
                }
                None => Ok(None),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().flatten().collect())
}
