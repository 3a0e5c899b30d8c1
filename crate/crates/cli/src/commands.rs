use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use crownlab::delineate::DelineateParams;
use crownlab::enhancer::{enhance_set, FileSegmenter, MockSegmenter, Segmenter};
use crownlab::eval::{evaluate_dataset, markdown_table, EvalWindow, OverlapMode};
use crownlab::labelset::{read_annotations, write_annotations};
use crownlab::pipeline::{self, PipelineConfig, TileConfig};
use crownlab::postfilter::{postfilter_set, OverlapKind};
use crownlab::raster::{read_raster, read_raster_header, write_raster_with_config};
use crownlab::spectral::write_histogram_csv;
use crownlab::synth::{write_scene, Scene, SceneConfig};
use crownlab::{Error, Result};

use crate::ConfigArg;

fn load_config(c: &ConfigArg) -> Result<PipelineConfig> {
    match &c.config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn parse_serde<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_channels(s: &str) -> std::result::Result<BTreeSet<u8>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<u8>().map_err(|e| format!("bad channel {t:?}: {e}")))
        .collect()
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

#[derive(Args, Debug)]
pub struct ChmArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Point CSV with header x,y,z,return_number,classification,channel.
    #[arg(long)]
    points: PathBuf,
    /// Cell size in meters.
    #[arg(long)]
    cell: Option<f64>,
    /// First-return channels, comma separated.
    #[arg(long, value_parser = parse_channels)]
    channels: Option<BTreeSet<u8>>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the terrain model here.
    #[arg(long)]
    dtm_out: Option<PathBuf>,
}

pub fn chm(a: ChmArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?.chm;
    set(&mut cfg.cell, a.cell);
    set(&mut cfg.channels, a.channels);
    let pc = pipeline::read_points(&a.points)?;
    let (dtm, chm) = pipeline::build_chm(&pc, &cfg)?;
    let echo = serde_json::to_value(&cfg).unwrap();
    if let Some(p) = &a.dtm_out {
        write_raster_with_config(&dtm, p, Some(echo.clone()))?;
    }
    write_raster_with_config(&chm, &a.out, Some(echo))
}

#[derive(Args, Debug)]
pub struct DelineateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    chm: PathBuf,
    /// Gaussian sigma in CHM cells.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    min_height: Option<f64>,
    /// Window radius intercept in meters.
    #[arg(long)]
    win_a: Option<f64>,
    /// Window radius growth per meter of height.
    #[arg(long)]
    win_b: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn delineate(a: DelineateArgs) -> Result<()> {
    let mut p: DelineateParams = load_config(&a.config)?.delineate;
    set(&mut p.sigma, a.sigma);
    set(&mut p.min_tree_height, a.min_height);
    set(&mut p.win_a, a.win_a);
    set(&mut p.win_b, a.win_b);
    let chm = read_raster(&a.chm)?;
    let set = pipeline::coarse_annotations(&chm, &p)?;
    write_annotations(&set, &a.out)
}

#[derive(Args, Debug)]
pub struct NdviArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    ortho: PathBuf,
    /// Band index JSON (blue, green, red, red_edge, nir).
    #[arg(long)]
    bands: Option<PathBuf>,
    /// Untiled coarse annotations on the CHM grid.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    /// Per-segment mean index CSV.
    #[arg(long)]
    hist: Option<PathBuf>,
    /// Also write the index raster here.
    #[arg(long)]
    ndvi_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn ndvi_filter(a: NdviArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let threshold = a.threshold.unwrap_or(cfg.ndvi.threshold);
    let bands = pipeline::read_bands(a.bands.as_deref().or(cfg.bands.as_deref()))?;
    let ortho = read_raster(&a.ortho)?;
    bands.validate(ortho.bands())?;
    let coarse = read_annotations(&a.annotations)?;
    let r = pipeline::ndvi_filter(&coarse, &ortho, &bands, threshold)?;
    if let Some(h) = &a.hist {
        write_histogram_csv(&r.means, create(h)?)?;
    }
    if let Some(p) = &a.ndvi_out {
        write_raster_with_config(&r.ndvi, p, Some(serde_json::to_value(bands).unwrap()))?;
    }
    write_annotations(&r.set, &a.out)
}

#[derive(Args, Debug)]
pub struct TileArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Untiled annotations.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    stride: Option<u32>,
    /// Raster defining the target pixel grid (masks are upscaled onto it).
    #[arg(long)]
    ortho: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn tile(a: TileArgs) -> Result<()> {
    let mut t: TileConfig = load_config(&a.config)?.tile;
    set(&mut t.size, a.size);
    set(&mut t.stride, a.stride);
    let src = read_annotations(&a.annotations)?;
    let target = match &a.ortho {
        Some(p) => {
            let h = read_raster_header(p)?;
            Some((h.geotransform()?, h.width as u32, h.height as u32))
        }
        None => None,
    };
    let (tiled, dropped) = pipeline::tile_annotations(&src, target.as_ref().map(|(g, w, h)| (g, *w, *h)), &t)?;
    if dropped > 0 {
        log::warn!("{dropped} instance(s) had centroids outside every tile center window");
    }
    write_annotations(&tiled, &a.out)
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    tiles: PathBuf,
    #[arg(long)]
    ortho: PathBuf,
    /// Segmenter base URL (requests go to <endpoint>/segment).
    #[arg(long, conflicts_with_all = ["mock_guide", "exchange_dir"])]
    endpoint: Option<String>,
    /// Guide band for the built-in flood-fill segmenter.
    #[arg(long, conflicts_with = "exchange_dir")]
    mock_guide: Option<PathBuf>,
    /// Directory for file-based exchange (requests/ and responses/).
    #[arg(long)]
    exchange_dir: Option<PathBuf>,
    #[arg(long)]
    mock_threshold: Option<f64>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    max_attempts: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn enhance(a: EnhanceArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?.enhance;
    if a.endpoint.is_some() {
        cfg.endpoint = a.endpoint.clone();
    }
    if a.mock_guide.is_some() || a.exchange_dir.is_some() {
        cfg.endpoint = None;
    }
    set(&mut cfg.mock_threshold, a.mock_threshold);
    set(&mut cfg.max_in_flight, a.max_in_flight);
    set(&mut cfg.max_attempts, a.max_attempts);
    set(&mut cfg.timeout_s, a.timeout);
    let tiles = read_annotations(&a.tiles)?;
    let ortho = read_raster(&a.ortho)?;

    let (mut out, stats) = if let Some(dir) = &a.exchange_dir {
        let client = FileSegmenter::new(
            dir,
            std::time::Duration::from_millis(50),
            std::time::Duration::from_secs_f64(cfg.timeout_s),
        )?;
        enhance_set(&tiles, &ortho, &client, &cfg.options())?
    } else if cfg.endpoint.is_some() {
        let client = cfg.client(|| unreachable!("endpoint configured"))?;
        enhance_set(&tiles, &ortho, client.as_ref(), &cfg.options())?
    } else {
        let guide_path = a
            .mock_guide
            .as_ref()
            .ok_or_else(|| Error::Invalid("enhance needs --endpoint, --mock-guide or --exchange-dir".into()))?;
        let client: Box<dyn Segmenter> = Box::new(MockSegmenter {
            guide: read_raster(guide_path)?.extract_band(0)?,
            threshold: cfg.mock_threshold,
        });
        enhance_set(&tiles, &ortho, client.as_ref(), &cfg.options())?
    };
    log::info!("{} instances, {} fallbacks", stats.instances, stats.fallbacks);
    out.config = Some(serde_json::json!({
        "enhance": cfg,
        "exchange_dir": a.exchange_dir,
        "mock_guide": a.mock_guide,
        "source": tiles.config,
    }));
    write_annotations(&out, &a.out)
}

#[derive(Args, Debug)]
pub struct PostfilterArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    score: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Overlap used by NMS: mask or box.
    #[arg(long, value_parser = parse_serde::<OverlapKind>)]
    nms_kind: Option<OverlapKind>,
    /// Containment threshold (intersection over the smaller area).
    #[arg(long, conflicts_with = "no_containment")]
    ios: Option<f64>,
    #[arg(long)]
    no_containment: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn postfilter(a: PostfilterArgs) -> Result<()> {
    let mut p = load_config(&a.config)?.postfilter;
    set(&mut p.score, a.score);
    set(&mut p.nms_iou, a.nms_iou);
    set(&mut p.nms_kind, a.nms_kind);
    if a.ios.is_some() {
        p.ios = a.ios;
    }
    if a.no_containment {
        p.ios = None;
    }
    let input = read_annotations(&a.annotations)?;
    let mut out = postfilter_set(&input, &p)?;
    out.config = Some(serde_json::json!({ "postfilter": p, "source": input.config }));
    write_annotations(&out, &a.out)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Minimum overlap for a match.
    #[arg(long)]
    overlap: Option<f64>,
    /// Overlap measure: iou or intersection_over_gt.
    #[arg(long, value_parser = parse_serde::<OverlapMode>)]
    mode: Option<OverlapMode>,
    /// Evaluation window: center or full.
    #[arg(long, value_parser = parse_serde::<EvalWindow>)]
    window: Option<EvalWindow>,
    /// Bootstrap resamples for the mIoU interval (at least 1).
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Markdown table row labeled with this method name.
    #[arg(long)]
    markdown: Option<PathBuf>,
    #[arg(long, default_value = "Predictions")]
    method: String,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut c = load_config(&a.config)?.eval;
    set(&mut c.overlap, a.overlap);
    set(&mut c.mode, a.mode);
    set(&mut c.window, a.window);
    set(&mut c.bootstrap, a.bootstrap);
    set(&mut c.level, a.level);
    set(&mut c.seed, a.seed);
    let preds = read_annotations(&a.pred)?;
    let gts = read_annotations(&a.gt)?;
    let report = evaluate_dataset(&preds, &gts, &c)?;
    fs::write(&a.out, report.to_json()).map_err(|e| Error::io(&a.out, e))?;
    if let Some(p) = &a.csv {
        report.write_csv(create(p)?)?;
    }
    if let Some(p) = &a.markdown {
        fs::write(p, markdown_table(&[(&a.method, &report)])).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RunAllArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn run_all(a: RunAllArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&a.config)?;
    let report = pipeline::run_all(&cfg, &a.out_dir)?;
    for (name, r) in &report.evaluations {
        log::info!("{name}: F1 {:.3} mIoU {:.3}", r.f1, r.miou);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Scene JSON; flags override it.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Orthophoto side length in pixels.
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    ghosts: Option<usize>,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut c: SceneConfig = match &a.scene {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
        }
        None => SceneConfig::default(),
    };
    set(&mut c.seed, a.seed);
    set(&mut c.ortho_px, a.size);
    set(&mut c.trees, a.trees);
    set(&mut c.ghosts, a.ghosts);
    write_scene(&Scene::generate(c)?, &a.out_dir)?;
    Ok(())
}
