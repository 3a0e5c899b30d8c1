//! Stage functions shared by the command line and the one-shot driver.
//!
//! Stage order: terrain and CHM, delineation, vegetation filter, tiling on
//! the orthophoto grid, enhancement, then evaluation against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::chm::{fill_chm_gaps, rasterize_chm, DEFAULT_CHM_CELL};
use crate::delineate::{delineate, segments_to_instances, DelineateParams};
use crate::enhancer::{enhance_set, EnhanceOptions, EnhanceStats, HttpSegmenter, MockSegmenter, Segmenter};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, markdown_table, EvalConfig, EvalReport};
use crate::labelset::{
    assign_to_tiles, make_tiles, read_annotations, upscale_instances, write_annotations,
    AnnotationSet, DEFAULT_TILE_SIZE, DEFAULT_TILE_STRIDE,
};
use crate::pointcloud::{
    build_dtm, classify_ground_fallback, normalize_heights, parse_point_cloud, Classification,
    PointCloud,
};
use crate::postfilter::{postfilter_set, PostfilterParams};
use crate::raster::{read_raster, write_raster_with_config, Raster};
use crate::spectral::{
    compute_ndvi, filter_by_ndvi, segment_mean_index, write_histogram_csv, BandSet,
    DEFAULT_NDVI_THRESHOLD,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChmConfig {
    pub cell: f64,
    pub channels: BTreeSet<u8>,
    /// Grid and tolerance of the ground classifier used when the input
    /// carries no ground returns.
    pub ground_grid: f64,
    pub ground_tol: f64,
}

impl Default for ChmConfig {
    fn default() -> Self {
        ChmConfig {
            cell: DEFAULT_CHM_CELL,
            channels: BTreeSet::from([1, 2]),
            ground_grid: 5.0,
            ground_tol: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NdviConfig {
    pub threshold: f64,
}

impl Default for NdviConfig {
    fn default() -> Self {
        NdviConfig {
            threshold: DEFAULT_NDVI_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileConfig {
    pub size: u32,
    pub stride: u32,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            size: DEFAULT_TILE_SIZE,
            stride: DEFAULT_TILE_STRIDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    /// Segmenter base URL; the NDVI-flood mock is used when absent.
    pub endpoint: Option<String>,
    pub mock_threshold: f64,
    pub max_attempts: u32,
    pub max_in_flight: usize,
    pub timeout_s: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        let o = EnhanceOptions::default();
        EnhanceConfig {
            endpoint: None,
            mock_threshold: DEFAULT_NDVI_THRESHOLD,
            max_attempts: o.max_attempts,
            max_in_flight: o.max_in_flight,
            timeout_s: 60.0,
        }
    }
}

impl EnhanceConfig {
    pub fn options(&self) -> EnhanceOptions {
        EnhanceOptions {
            max_attempts: self.max_attempts,
            max_in_flight: self.max_in_flight,
        }
    }

    pub fn client(&self, guide: impl FnOnce() -> Result<Raster>) -> Result<Box<dyn Segmenter>> {
        Ok(match &self.endpoint {
            Some(url) => {
                if !(self.timeout_s > 0.0) {
                    return Err(Error::invalid("enhance timeout must be > 0"));
                }
                Box::new(HttpSegmenter::new(url, Duration::from_secs_f64(self.timeout_s)))
            }
            None => Box::new(MockSegmenter {
                guide: guide()?,
                threshold: self.mock_threshold,
            }),
        })
    }
}

/// `run-all` configuration. Relative paths resolve against the directory
/// of the config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub points: Option<PathBuf>,
    pub ortho: Option<PathBuf>,
    /// Band index JSON; the default layout when absent.
    pub bands: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    /// Optional model predictions to post-filter and score.
    pub predictions: Option<PathBuf>,
    pub chm: ChmConfig,
    pub delineate: DelineateParams,
    pub ndvi: NdviConfig,
    pub tile: TileConfig,
    pub enhance: EnhanceConfig,
    pub postfilter: PostfilterParams,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.points,
            &mut cfg.ortho,
            &mut cfg.bands,
            &mut cfg.gt,
            &mut cfg.predictions,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::invalid(format!("config: missing `{what}` path")))
}

pub fn read_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_point_cloud(std::io::BufReader::new(f))
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn read_bands(path: Option<&Path>) -> Result<BandSet> {
    match path {
        None => Ok(BandSet::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", p.display())))
        }
    }
}

/// Terrain model and gap-filled CHM on the same grid.
pub fn build_chm(pc: &PointCloud, cfg: &ChmConfig) -> Result<(Raster, Raster)> {
    let classified;
    let pc = if pc.points().iter().any(|p| p.classification == Classification::Ground) {
        pc
    } else {
        log::info!("no ground returns in input; using grid-minimum classification");
        classified = classify_ground_fallback(pc, cfg.ground_grid, cfg.ground_tol)?;
        &classified
    };
    let dtm = build_dtm(pc, cfg.cell)?;
    let normalized = normalize_heights(pc, &dtm)?;
    let chm = fill_chm_gaps(&rasterize_chm(&normalized, cfg.cell, &cfg.channels)?)?;
    Ok((dtm, chm))
}

/// Coarse crowns as an untiled set on the CHM grid.
pub fn coarse_annotations(chm: &Raster, params: &DelineateParams) -> Result<AnnotationSet> {
    let sm = delineate(chm, params)?;
    let instances = segments_to_instances(&sm)?
        .into_iter()
        .map(|c| c.mask)
        .collect();
    let mut set = AnnotationSet::untiled(
        chm.geotransform(),
        chm.width() as u32,
        chm.height() as u32,
        instances,
    );
    set.config = Some(serde_json::to_value(params).expect("params serialize"));
    Ok(set)
}

fn grid_of(set: &AnnotationSet) -> Result<crate::raster::Geotransform> {
    set.geotransform()
        .ok_or_else(|| Error::invalid("annotation set has no origin_m; cannot place it on a map grid"))
}

/// Result of [`ndvi_filter`].
pub struct NdviFiltered {
    pub set: AnnotationSet,
    pub means: BTreeMap<u64, f64>,
    pub ndvi: Raster,
}

/// Drop untiled instances whose mean index over the orthophoto is below
/// `threshold`.
pub fn ndvi_filter(set: &AnnotationSet, ortho: &Raster, bands: &BandSet, threshold: f64) -> Result<NdviFiltered> {
    let gt = grid_of(set)?;
    let instances = set.untiled_instances()?;
    let ndvi = compute_ndvi(ortho, bands)?;
    let means = segment_mean_index(&instances, &gt, &ndvi)?;
    let kept = filter_by_ndvi(&instances, &means, threshold)?;
    log::info!("vegetation filter kept {} of {} segments", kept.len(), instances.len());
    let mut out = AnnotationSet {
        tiles: vec![crate::labelset::Tile {
            origin: [0, 0],
            size: 0,
            instances: kept,
        }],
        ..set.clone()
    };
    out.config = Some(serde_json::json!({
        "threshold": threshold,
        "bands": bands,
        "source": set.config,
    }));
    Ok(NdviFiltered { set: out, means, ndvi })
}

/// Move an untiled set onto `target` (upscaling if the grids differ) and
/// cut it into tiles with the centroid rule.
pub fn tile_annotations(
    set: &AnnotationSet,
    target: Option<(&crate::raster::Geotransform, u32, u32)>,
    tile: &TileConfig,
) -> Result<(AnnotationSet, usize)> {
    let src = grid_of(set)?;
    let instances = set.untiled_instances()?;
    let (dst, w, h) = match target {
        Some((g, w, h)) => (*g, w, h),
        None => {
            let [w, h] = set
                .extent
                .ok_or_else(|| Error::invalid("annotation set has no extent; pass a target raster"))?;
            (src, w, h)
        }
    };
    let same = dst == src && set.extent == Some([w, h]);
    let placed = if same {
        instances
    } else {
        upscale_instances(&instances, &src, &dst, (w, h))?
    };
    let specs = make_tiles(w, h, tile.size, tile.stride)?;
    let assignment = assign_to_tiles(&placed, &specs)?;
    let mut out = AnnotationSet::untiled(&dst, w, h, Vec::new());
    out.tiles = assignment.tiles;
    out.config = Some(serde_json::json!({ "tile": tile, "source": set.config }));
    Ok((out, assignment.dropped))
}

/// Enhance a tiled set with the configured segmenter.
pub fn enhance(
    set: &AnnotationSet,
    ortho: &Raster,
    guide: impl FnOnce() -> Result<Raster>,
    cfg: &EnhanceConfig,
) -> Result<(AnnotationSet, EnhanceStats)> {
    let client = cfg.client(guide)?;
    let (mut out, stats) = enhance_set(set, ortho, client.as_ref(), &cfg.options())?;
    log::info!("enhanced {} instances, {} fell back", stats.instances, stats.fallbacks);
    out.config = Some(serde_json::json!({ "enhance": cfg, "source": set.config }));
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub coarse: usize,
    pub vegetation: usize,
    pub tiled: usize,
    pub dropped_by_tiling: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: Value,
    pub counts: StageCounts,
    /// Named evaluations in a fixed order.
    pub evaluations: Vec<(String, EvalReport)>,
}

impl RunReport {
    pub fn get(&self, name: &str) -> Option<&EvalReport> {
        self.evaluations.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run every stage and write the artifacts into `out_dir`.
pub fn run_all(cfg: &PipelineConfig, out_dir: impl AsRef<Path>) -> Result<RunReport> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = cfg.to_value();
    write_text(&out.join("config.json"), &(serde_json::to_string_pretty(&echo).unwrap() + "\n"))?;

    let pc = read_points(required(&cfg.points, "points")?)?;
    let ortho = read_raster(required(&cfg.ortho, "ortho")?)?;
    let bands = read_bands(cfg.bands.as_deref())?;
    bands.validate(ortho.bands())?;

    let (dtm, chm) = build_chm(&pc, &cfg.chm)?;
    let chm_cfg = serde_json::to_value(&cfg.chm).unwrap();
    write_raster_with_config(&dtm, out.join("dtm.rasterbin"), Some(chm_cfg.clone()))?;
    write_raster_with_config(&chm, out.join("chm.rasterbin"), Some(chm_cfg))?;

    let coarse = coarse_annotations(&chm, &cfg.delineate)?;
    write_annotations(&coarse, out.join("coarse.json"))?;

    let filtered = ndvi_filter(&coarse, &ortho, &bands, cfg.ndvi.threshold)?;
    write_annotations(&filtered.set, out.join("filtered.json"))?;
    let hist_path = out.join("ndvi_hist.csv");
    let f = fs::File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
    write_histogram_csv(&filtered.means, f)?;
    write_raster_with_config(
        &filtered.ndvi,
        out.join("ndvi.rasterbin"),
        Some(serde_json::to_value(bands).unwrap()),
    )?;

    let target = (ortho.geotransform(), ortho.width() as u32, ortho.height() as u32);
    let (tiled, dropped) = tile_annotations(&filtered.set, Some(target), &cfg.tile)?;
    write_annotations(&tiled, out.join("tiled.json"))?;

    let ndvi = filtered.ndvi;
    let (pseudo, stats) = enhance(&tiled, &ortho, || Ok(ndvi), &cfg.enhance)?;
    write_annotations(&pseudo, out.join("pseudo.json"))?;

    let mut evaluations = Vec::new();
    if let Some(gt_path) = &cfg.gt {
        let gt = read_annotations(gt_path)?;
        evaluations.push(("Coarse masks".to_string(), evaluate_dataset(&tiled, &gt, &cfg.eval)?));
        evaluations.push(("Pseudo masks".to_string(), evaluate_dataset(&pseudo, &gt, &cfg.eval)?));
        if let Some(pred_path) = &cfg.predictions {
            let mut preds = postfilter_set(&read_annotations(pred_path)?, &cfg.postfilter)?;
            preds.config = Some(serde_json::to_value(cfg.postfilter).unwrap());
            write_annotations(&preds, out.join("predictions_filtered.json"))?;
            evaluations.push(("Predictions".to_string(), evaluate_dataset(&preds, &gt, &cfg.eval)?));
        }
    }

    let report = RunReport {
        config: echo,
        counts: StageCounts {
            coarse: coarse.instance_count(),
            vegetation: filtered.set.instance_count(),
            tiled: tiled.instance_count(),
            dropped_by_tiling: dropped,
            fallbacks: stats.fallbacks,
        },
        evaluations,
    };
    write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&report).unwrap() + "\n"))?;
    write_report_csv(&report, &out.join("report.csv"))?;
    let rows: Vec<(&str, &EvalReport)> = report.evaluations.iter().map(|(n, r)| (n.as_str(), r)).collect();
    write_text(&out.join("report.md"), &markdown_table(&rows))?;
    Ok(report)
}

fn write_report_csv(report: &RunReport, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    let err = |e: csv::Error| Error::format(format!("{}: {e}", path.display()));
    w.write_record(["method", "tp", "fp", "fn", "precision", "recall", "f1", "miou", "ci_low", "ci_high"])
        .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, r) in &report.evaluations {
        w.write_record([
            name.clone(),
            r.tp.to_string(),
            r.fp.to_string(),
            r.fn_.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
            r.miou.to_string(),
            opt(r.ci_low),
            opt(r.ci_high),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
