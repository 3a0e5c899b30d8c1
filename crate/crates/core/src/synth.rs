//! Seeded synthetic scenes: disc crowns over a tilted terrain, seen by a
//! simulated lidar and a five-band orthophoto, with exact ground truth.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelset::{
    assign_to_tiles, make_tiles, write_annotations, AnnotationSet, InstanceMask, PixelMask,
    DEFAULT_TILE_SIZE, DEFAULT_TILE_STRIDE,
};
use crate::pointcloud::{write_point_cloud, Classification, LidarPoint, PointCloud};
use crate::raster::{write_raster, Geotransform, Raster, DEFAULT_NODATA};
use crate::spectral::BandSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    /// Orthophoto side length in pixels.
    pub ortho_px: u32,
    pub ortho_cell: f64,
    pub trees: usize,
    /// Lidar-only objects over pavement (no vegetation signal).
    pub ghosts: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub min_height: f64,
    pub max_height: f64,
    /// Lidar pulse spacing in meters.
    pub pulse_spacing: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 42,
            ortho_px: 2048,
            ortho_cell: 0.05,
            trees: 110,
            ghosts: 10,
            min_radius: 1.5,
            max_radius: 3.5,
            min_height: 8.0,
            max_height: 20.0,
            pulse_spacing: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crown {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub height: f64,
    /// Ghosts have height but pavement spectra.
    pub ghost: bool,
}

impl Crown {
    /// Canopy height above ground at `(x, y)`: a dome whose rim sits at
    /// 60% of the apex height.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        let d2 = ((x - self.x).powi(2) + (y - self.y).powi(2)) / self.radius.powi(2);
        (d2 <= 1.0).then_some(self.height * (1.0 - 0.4 * d2))
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SceneConfig,
    pub geotransform: Geotransform,
    pub crowns: Vec<Crown>,
}

pub const CROWN_SPECTRUM: [f64; 5] = [0.04, 0.08, 0.05, 0.25, 0.45];
pub const PAVEMENT_SPECTRUM: [f64; 5] = [0.15, 0.18, 0.20, 0.22, 0.25];

fn terrain(x: f64, y: f64) -> f64 {
    10.0 + 0.02 * x + 0.01 * y
}

impl Scene {
    pub fn generate(config: SceneConfig) -> Result<Scene> {
        if config.ortho_px == 0 || !(config.ortho_cell > 0.0) || !(config.pulse_spacing > 0.0) {
            return Err(Error::invalid("scene: sizes must be positive"));
        }
        if !(config.min_radius > 0.0 && config.min_radius <= config.max_radius) {
            return Err(Error::invalid("scene: need 0 < min_radius <= max_radius"));
        }
        let side = config.ortho_px as f64 * config.ortho_cell;
        let geotransform = Geotransform::new(0.0, side, config.ortho_cell)?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
        let margin = config.max_radius + 1.0;
        if side <= 2.0 * margin {
            return Err(Error::invalid("scene: extent too small for the crown radius"));
        }
        let mut crowns: Vec<Crown> = Vec::new();
        let wanted = config.trees + config.ghosts;
        let mut tries = 0;
        while crowns.len() < wanted && tries < 200 * wanted {
            tries += 1;
            let c = Crown {
                x: rng.gen_range(margin..side - margin),
                y: rng.gen_range(margin..side - margin),
                radius: rng.gen_range(config.min_radius..=config.max_radius),
                height: rng.gen_range(config.min_height..=config.max_height),
                ghost: crowns.len() >= config.trees,
            };
            let clear = crowns
                .iter()
                .all(|o| (o.x - c.x).hypot(o.y - c.y) >= o.radius + c.radius + 1.0);
            if clear {
                crowns.push(c);
            }
        }
        if crowns.len() < wanted {
            return Err(Error::invalid(format!(
                "scene: could only place {} of {wanted} crowns",
                crowns.len()
            )));
        }
        Ok(Scene {
            config,
            geotransform,
            crowns,
        })
    }

    pub fn side(&self) -> f64 {
        self.config.ortho_px as f64 * self.config.ortho_cell
    }

    fn canopy(&self, x: f64, y: f64) -> Option<f64> {
        self.crowns.iter().filter_map(|c| c.height_at(x, y)).reduce(f64::max)
    }

    /// One jittered pulse per grid node. First returns hit the canopy or
    /// the ground; about a third of canopy hits also yield a ground echo.
    pub fn point_cloud(&self) -> Result<PointCloud> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(self.config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let s = self.config.pulse_spacing;
        let n = (self.side() / s).floor() as usize;
        let mut points = Vec::with_capacity(n * n * 5 / 4);
        for i in 0..n {
            for j in 0..n {
                let x = (j as f64 + rng.gen_range(0.05..0.95)) * s;
                let y = (i as f64 + rng.gen_range(0.05..0.95)) * s;
                let channel = match rng.gen_range(0..10) {
                    0 => 3,
                    k => 1 + (k % 2) as u8,
                };
                let ground = terrain(x, y);
                match self.canopy(x, y) {
                    Some(h) => {
                        points.push(LidarPoint {
                            x,
                            y,
                            z: ground + h,
                            return_number: 1,
                            classification: Classification::Vegetation,
                            channel,
                        });
                        if rng.gen_bool(0.35) {
                            points.push(LidarPoint {
                                x,
                                y,
                                z: ground,
                                return_number: 2,
                                classification: Classification::Ground,
                                channel,
                            });
                        }
                    }
                    None => points.push(LidarPoint {
                        x,
                        y,
                        z: ground,
                        return_number: 1,
                        classification: Classification::Ground,
                        channel,
                    }),
                }
            }
        }
        PointCloud::new(points)
    }

    /// Five bands (blue, green, red, red edge, NIR) with a little seeded
    /// texture. A pixel belongs to a crown when its center is in the disc.
    pub fn ortho(&self) -> Result<Raster> {
        let px = self.config.ortho_px as usize;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(self.config.seed.wrapping_add(7));
        let mut values = vec![0.0; 5 * px * px];
        for r in 0..px {
            for c in 0..px {
                let (x, y) = self.geotransform.cell_center(r as i64, c as i64);
                let vegetated = self
                    .crowns
                    .iter()
                    .any(|k| !k.ghost && k.height_at(x, y).is_some());
                let spectrum = if vegetated { CROWN_SPECTRUM } else { PAVEMENT_SPECTRUM };
                for (b, v) in spectrum.iter().enumerate() {
                    values[b * px * px + r * px + c] = v + rng.gen_range(-0.005..0.005);
                }
            }
        }
        Raster::new(px, px, 5, self.geotransform, DEFAULT_NODATA, values)
    }

    /// Exact disc masks of the real trees on the ortho grid, ids from 1.
    pub fn truth(&self) -> Result<Vec<InstanceMask>> {
        let gt = &self.geotransform;
        let px = self.config.ortho_px as i64;
        let mut out = Vec::new();
        for (k, c) in self.crowns.iter().filter(|c| !c.ghost).enumerate() {
            let (r0, c0) = gt.cell_of(c.x - c.radius, c.y + c.radius);
            let (r1, c1) = gt.cell_of(c.x + c.radius, c.y - c.radius);
            let mut pixels = Vec::new();
            for r in r0.max(0)..=r1.min(px - 1) {
                for col in c0.max(0)..=c1.min(px - 1) {
                    let (x, y) = gt.cell_center(r, col);
                    if c.height_at(x, y).is_some() {
                        pixels.push((col as u32, r as u32));
                    }
                }
            }
            let mask = PixelMask::from_pixels(&pixels)
                .ok_or_else(|| Error::Invariant(format!("crown {k} covers no pixel")))?;
            out.push(InstanceMask::from_mask(k as u64 + 1, &mask, None)?);
        }
        Ok(out)
    }

    /// Ground truth tiled the same way as the pipeline's labels.
    pub fn truth_tiled(&self, size: u32, stride: u32) -> Result<AnnotationSet> {
        let px = self.config.ortho_px;
        let truth = self.truth()?;
        let mut set = AnnotationSet::untiled(&self.geotransform, px, px, Vec::new());
        set.tiles = assign_to_tiles(&truth, &make_tiles(px, px, size, stride)?)?.tiles;
        Ok(set)
    }
}

/// Paths of a scene written by [`write_scene`].
#[derive(Debug, Clone)]
pub struct SceneFiles {
    pub points: PathBuf,
    pub ortho: PathBuf,
    pub bands: PathBuf,
    pub gt: PathBuf,
    pub config: PathBuf,
}

/// Write `points.csv`, `ortho.rasterbin`, `bands.json`, `gt.json` and a
/// `pipeline.json` that runs the whole pipeline on them.
pub fn write_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<SceneFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = SceneFiles {
        points: dir.join("points.csv"),
        ortho: dir.join("ortho.rasterbin"),
        bands: dir.join("bands.json"),
        gt: dir.join("gt.json"),
        config: dir.join("pipeline.json"),
    };
    let f = fs::File::create(&files.points).map_err(|e| Error::io(&files.points, e))?;
    write_point_cloud(&scene.point_cloud()?, std::io::BufWriter::new(f))?;
    write_raster(&scene.ortho()?, &files.ortho)?;
    let bands = serde_json::to_string_pretty(&BandSet::default()).expect("bands serialize");
    fs::write(&files.bands, bands).map_err(|e| Error::io(&files.bands, e))?;
    let mut gt = scene.truth_tiled(DEFAULT_TILE_SIZE, DEFAULT_TILE_STRIDE)?;
    gt.config = Some(serde_json::to_value(scene.config).expect("config serializes"));
    write_annotations(&gt, &files.gt)?;
    let pipeline = serde_json::json!({
        "points": "points.csv",
        "ortho": "ortho.rasterbin",
        "bands": "bands.json",
        "gt": "gt.json",
    });
    fs::write(&files.config, serde_json::to_string_pretty(&pipeline).unwrap())
        .map_err(|e| Error::io(&files.config, e))?;
    Ok(files)
}

/// Area of a disc, for sanity checks on rasterized crowns.
pub fn disc_area(radius: f64, cell: f64) -> f64 {
    PI * radius * radius / (cell * cell)
}
