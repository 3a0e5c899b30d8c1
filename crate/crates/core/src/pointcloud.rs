//! Lidar returns, a grid-minimum ground fallback, terrain model and
//! height normalization.

use std::collections::BTreeMap;
use std::io::Read;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::raster::{Geotransform, Raster, DEFAULT_NODATA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Classification {
    Ground,
    Vegetation,
    Building,
    Noise,
    Unclassified,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Ground => "ground",
            Classification::Vegetation => "vegetation",
            Classification::Building => "building",
            Classification::Noise => "noise",
            Classification::Unclassified => "unclassified",
        }
    }
}

impl FromStr for Classification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ground" => Ok(Classification::Ground),
            "vegetation" => Ok(Classification::Vegetation),
            "building" => Ok(Classification::Building),
            "noise" => Ok(Classification::Noise),
            "unclassified" => Ok(Classification::Unclassified),
            other => Err(Error::format(format!(
                "unknown classification token {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub return_number: u8,
    pub classification: Classification,
    /// Scanner channel, 1..=3.
    pub channel: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<LidarPoint>,
    bounds: Bounds,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::invalid("empty point cloud"));
        };
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::invalid(format!("point {i}: non-finite coordinate")));
            }
            if p.return_number < 1 {
                return Err(Error::invalid(format!("point {i}: return_number must be >= 1")));
            }
            if !(1..=3).contains(&p.channel) {
                return Err(Error::invalid(format!(
                    "point {i}: channel {} not in 1..=3",
                    p.channel
                )));
            }
        }
        let init = Bounds {
            min_x: first.x,
            min_y: first.y,
            max_x: first.x,
            max_y: first.y,
        };
        let bounds = points.iter().fold(init, |b, p| Bounds {
            min_x: b.min_x.min(p.x),
            min_y: b.min_y.min(p.y),
            max_x: b.max_x.max(p.x),
            max_y: b.max_y.max(p.y),
        });
        Ok(PointCloud { points, bounds })
    }

    pub fn points(&self) -> &[LidarPoint] {
        &self.points
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Grid aligned to `cell_size` multiples covering the cloud.
    pub fn grid(&self, cell_size: f64) -> Result<(Geotransform, usize, usize)> {
        let b = self.bounds;
        Geotransform::covering(b.min_x, b.min_y, b.max_x, b.max_y, cell_size)
    }

    fn with_points(&self, points: Vec<LidarPoint>) -> PointCloud {
        PointCloud {
            points,
            bounds: self.bounds,
        }
    }
}

#[derive(Debug, Deserialize)]
struct PointRow {
    x: String,
    y: String,
    z: String,
    return_number: String,
    classification: String,
    channel: String,
}

const REQUIRED_COLUMNS: [&str; 6] = ["x", "y", "z", "return_number", "classification", "channel"];

/// Parse the point CSV (`x,y,z,return_number,classification,channel`).
pub fn parse_point_cloud<R: Read>(reader: R) -> Result<PointCloud> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::format(format!("point csv header: {e}")))?
        .clone();
    let missing: Vec<_> = REQUIRED_COLUMNS
        .iter()
        .filter(|c| !headers.iter().any(|h| h == **c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "point csv missing columns: {}",
            missing.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
        )));
    }

    let mut points = Vec::new();
    for (i, row) in csv.deserialize::<PointRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::format(format!("point csv line {line}: {e}")))?;
        let coord = |name: &str, s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::format(format!("point csv line {line}: non-numeric {name} {s:?}"))
                })
        };
        let int = |name: &str, s: &str| -> Result<u8> {
            s.parse::<u8>().map_err(|_| {
                Error::format(format!("point csv line {line}: bad {name} {s:?}"))
            })
        };
        let classification = row
            .classification
            .parse::<Classification>()
            .map_err(|e| Error::format(format!("point csv line {line}: {e}")))?;
        points.push(LidarPoint {
            x: coord("x", &row.x)?,
            y: coord("y", &row.y)?,
            z: coord("z", &row.z)?,
            return_number: int("return_number", &row.return_number)?,
            classification,
            channel: int("channel", &row.channel)?,
        });
    }
    if points.is_empty() {
        return Err(Error::format("empty point cloud"));
    }
    PointCloud::new(points).map_err(|e| Error::format(e.to_string()))
}

/// Write the point CSV understood by [`parse_point_cloud`].
pub fn write_point_cloud<W: std::io::Write>(pc: &PointCloud, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::format(format!("writing point csv: {e}"));
    w.write_record(REQUIRED_COLUMNS).map_err(io)?;
    for p in pc.points() {
        w.write_record([
            p.x.to_string(),
            p.y.to_string(),
            p.z.to_string(),
            p.return_number.to_string(),
            p.classification.as_str().to_string(),
            p.channel.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::format(format!("writing point csv: {e}")))
}

/// Mark unclassified points within `tol` of their grid cell's lowest point
/// as ground. Coordinates and other classes are untouched.
pub fn classify_ground_fallback(pc: &PointCloud, grid: f64, tol: f64) -> Result<PointCloud> {
    if !(grid > 0.0) {
        return Err(Error::invalid(format!("ground grid must be > 0, got {grid}")));
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid(format!("ground tolerance must be >= 0, got {tol}")));
    }
    let b = pc.bounds();
    let cell = |p: &LidarPoint| {
        (
            ((p.x - b.min_x) / grid).floor() as i64,
            ((p.y - b.min_y) / grid).floor() as i64,
        )
    };
    let mut lowest: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    for p in pc.points() {
        let e = lowest.entry(cell(p)).or_insert(f64::INFINITY);
        *e = e.min(p.z);
    }
    let points = pc
        .points()
        .iter()
        .map(|p| {
            let mut q = *p;
            if q.classification == Classification::Unclassified && q.z <= lowest[&cell(p)] + tol {
                q.classification = Classification::Ground;
            }
            q
        })
        .collect();
    Ok(pc.with_points(points))
}

/// Terrain model: per-cell mean of ground returns, gaps filled by repeated
/// 3x3 neighbor-mean passes.
pub fn build_dtm(pc: &PointCloud, cell_size: f64) -> Result<Raster> {
    let (gt, w, h) = pc.grid(cell_size)?;
    let mut sum = vec![0.0; w * h];
    let mut count = vec![0u32; w * h];
    for p in pc
        .points()
        .iter()
        .filter(|p| p.classification == Classification::Ground)
    {
        let (r, c) = gt.cell_of(p.x, p.y);
        let i = r as usize * w + c as usize;
        sum[i] += p.z;
        count[i] += 1;
    }
    if count.iter().all(|&n| n == 0) {
        return Err(Error::invalid("cannot build a terrain model from zero ground points"));
    }
    let mut grid: Vec<Option<f64>> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();

    for _ in 0..(w + h) {
        if grid.iter().all(Option::is_some) {
            break;
        }
        grid = fill_pass(&grid, w, h);
    }
    let values = grid
        .into_iter()
        .map(|v| v.ok_or_else(|| Error::Invariant("terrain fill did not converge".into())))
        .collect::<Result<Vec<_>>>()?;
    Raster::new(w, h, 1, gt, DEFAULT_NODATA, values)
}

fn fill_pass(grid: &[Option<f64>], w: usize, h: usize) -> Vec<Option<f64>> {
    (0..w * h)
        .into_par_iter()
        .map(|i| {
            if grid[i].is_some() {
                return grid[i];
            }
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            let mut acc = 0.0;
            let mut n = 0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    if let Some(v) = grid[rr as usize * w + cc as usize] {
                        acc += v;
                        n += 1;
                    }
                }
            }
            (n > 0).then(|| acc / n as f64)
        })
        .collect()
}

/// Replace each elevation with height above the terrain cell beneath it,
/// clamped at zero.
pub fn normalize_heights(pc: &PointCloud, dtm: &Raster) -> Result<PointCloud> {
    let gt = dtm.geotransform();
    let points = pc
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (r, c) = gt.cell_of(p.x, p.y);
            let ground = dtm.sample(r, c).ok_or_else(|| {
                Error::invalid(format!(
                    "point {i} at ({}, {}) lies outside the terrain model",
                    p.x, p.y
                ))
            })?;
            Ok(LidarPoint {
                z: (p.z - ground).max(0.0),
                ..*p
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pc.with_points(points))
}
