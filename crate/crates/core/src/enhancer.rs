//! Box-prompted refinement of coarse crown masks.
//!
//! Each tile's coarse boxes are sent to a [`Segmenter`], one request per
//! tile. Returned masks are clipped to their prompt boxes; a box whose
//! result is empty or failed keeps its coarse mask and is flagged
//! `fallback`.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelset::{AnnotationSet, BBox, InstanceMask, PixelMask, Tile};
use crate::raster::{decode_rasterbin, encode_rasterbin, Raster, RasterHeader};

/// Tile pixels shipped with a request: rasterbin header plus base64 payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineImage {
    pub header: RasterHeader,
    pub data: String,
}

impl InlineImage {
    pub fn encode(raster: &Raster) -> Self {
        let (header, bytes) = encode_rasterbin(raster);
        InlineImage {
            header,
            data: BASE64.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Raster> {
        let bytes = BASE64
            .decode(&self.data)
            .map_err(|e| Error::format(format!("inline image: bad base64: {e}")))?;
        decode_rasterbin(&self.header, &bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageRef {
    /// A rasterbin path readable by the segmenter.
    Path(String),
    Inline(InlineImage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterRequest {
    pub id: String,
    /// Global pixel position of the tile's top-left corner.
    pub tile_origin: [u32; 2],
    pub tile_size: u32,
    pub image: ImageRef,
    /// Prompt boxes in tile-local pixels.
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoxResult {
    Mask {
        /// Tile-local bbox of the RLE bitmap.
        bbox: BBox,
        rle: Vec<u32>,
        confidence: f64,
    },
    Failure {
        failure: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterResponse {
    pub id: String,
    pub results: Vec<BoxResult>,
}

/// Why a segmenter call failed. Transport failures are retried.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallError {
    Transport(String),
    Malformed(String),
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, request: &SegmenterRequest) -> std::result::Result<SegmenterResponse, CallError>;
}

/// Deterministic stand-in segmenter that floods a guide band (in the same
/// global pixel grid as the tiles) from the center of each prompt box.
#[derive(Debug, Clone)]
pub struct MockSegmenter {
    pub guide: Raster,
    pub threshold: f64,
}

impl Segmenter for MockSegmenter {
    fn segment(&self, request: &SegmenterRequest) -> std::result::Result<SegmenterResponse, CallError> {
        Ok(mock_segmenter(request, &self.guide, self.threshold))
    }
}

/// Flood-fill each prompt box of `request` on `guide`.
///
/// The seed is the box-center pixel, or if that is below `threshold`, the
/// nearest pixel in the box that is not (ties: smallest row, then column).
/// The mask is the 4-connected region of pixels at or above the threshold
/// around the seed, limited to the box. Confidence is the region's mean
/// guide value clamped to `[0, 1]`.
pub fn mock_segmenter(request: &SegmenterRequest, guide: &Raster, threshold: f64) -> SegmenterResponse {
    let [ox, oy] = request.tile_origin;
    let value = |x: u32, y: u32| -> Option<f64> {
        guide
            .sample((oy + y) as i64, (ox + x) as i64)
            .filter(|&v| v >= threshold)
    };
    let results = request
        .boxes
        .iter()
        .map(|b| {
            if b.w == 0 || b.h == 0 {
                return BoxResult::Failure {
                    failure: "degenerate box".into(),
                };
            }
            let center = (b.x + b.w / 2, b.y + b.h / 2);
            let seed = if value(center.0, center.1).is_some() {
                Some(center)
            } else {
                nearest_above(b, center, &value)
            };
            let Some(seed) = seed else {
                return BoxResult::Failure {
                    failure: "no pixel above threshold in box".into(),
                };
            };

            let mut inside = vec![false; b.area() as usize];
            let idx = |x: u32, y: u32| ((y - b.y) * b.w + (x - b.x)) as usize;
            let mut queue = VecDeque::from([seed]);
            inside[idx(seed.0, seed.1)] = true;
            let mut pixels = Vec::new();
            let mut sum = 0.0;
            while let Some((x, y)) = queue.pop_front() {
                pixels.push((x, y));
                sum += value(x, y).unwrap_or(threshold);
                let steps = [
                    (x > b.x).then(|| (x - 1, y)),
                    (x + 1 < b.x1()).then(|| (x + 1, y)),
                    (y > b.y).then(|| (x, y - 1)),
                    (y + 1 < b.y1()).then(|| (x, y + 1)),
                ];
                for (nx, ny) in steps.into_iter().flatten() {
                    if !inside[idx(nx, ny)] && value(nx, ny).is_some() {
                        inside[idx(nx, ny)] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
            let mask = PixelMask::from_pixels(&pixels).expect("seed pixel is in the region");
            BoxResult::Mask {
                bbox: mask.bbox,
                rle: crate::labelset::rle_encode(&mask.bits),
                confidence: (sum / pixels.len() as f64).clamp(0.0, 1.0),
            }
        })
        .collect();
    SegmenterResponse {
        id: request.id.clone(),
        results,
    }
}

fn nearest_above(
    b: &BBox,
    center: (u32, u32),
    value: &impl Fn(u32, u32) -> Option<f64>,
) -> Option<(u32, u32)> {
    let mut best: Option<(u64, u32, u32)> = None;
    for y in b.y..b.y1() {
        for x in b.x..b.x1() {
            if value(x, y).is_none() {
                continue;
            }
            let dx = x as i64 - center.0 as i64;
            let dy = y as i64 - center.1 as i64;
            let key = ((dx * dx + dy * dy) as u64, y, x);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
    }
    best.map(|(_, y, x)| (x, y))
}

/// POSTs requests as JSON to `<endpoint>/segment`.
pub struct HttpSegmenter {
    url: String,
    agent: ureq::Agent,
}

impl HttpSegmenter {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        HttpSegmenter {
            url: format!("{}/segment", endpoint.trim_end_matches('/')),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Segmenter for HttpSegmenter {
    fn segment(&self, request: &SegmenterRequest) -> std::result::Result<SegmenterResponse, CallError> {
        let body = serde_json::to_string(request).expect("request serializes");
        let resp = self
            .agent
            .post(&self.url)
            .set("Content-Type", "application/json")
            .send_string(&body)
            .map_err(|e| CallError::Transport(format!("POST {}: {e}", self.url)))?;
        let text = resp
            .into_string()
            .map_err(|e| CallError::Transport(format!("reading response: {e}")))?;
        serde_json::from_str(&text).map_err(|e| CallError::Malformed(format!("response json: {e}")))
    }
}

/// Exchanges requests and responses through a directory:
/// `requests/<id>.json` is written, `responses/<id>.json` is polled.
pub struct FileSegmenter {
    dir: PathBuf,
    poll: Duration,
    timeout: Duration,
}

impl FileSegmenter {
    pub fn new(dir: impl AsRef<Path>, poll: Duration, timeout: Duration) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        for sub in ["requests", "responses"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(FileSegmenter { dir, poll, timeout })
    }
}

impl Segmenter for FileSegmenter {
    fn segment(&self, request: &SegmenterRequest) -> std::result::Result<SegmenterResponse, CallError> {
        let name = format!("{}.json", request.id);
        let req_path = self.dir.join("requests").join(&name);
        let tmp = self.dir.join("requests").join(format!(".{name}.tmp"));
        let body = serde_json::to_string(request).expect("request serializes");
        fs::write(&tmp, body)
            .and_then(|_| fs::rename(&tmp, &req_path))
            .map_err(|e| CallError::Transport(format!("{}: {e}", req_path.display())))?;

        let resp_path = self.dir.join("responses").join(&name);
        let start = Instant::now();
        loop {
            if let Ok(text) = fs::read_to_string(&resp_path) {
                return serde_json::from_str(&text).map_err(|e| {
                    CallError::Malformed(format!("{}: {e}", resp_path.display()))
                });
            }
            if start.elapsed() >= self.timeout {
                return Err(CallError::Transport(format!(
                    "no response at {} after {:?}",
                    resp_path.display(),
                    self.timeout
                )));
            }
            std::thread::sleep(self.poll);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceOptions {
    /// Attempts per tile before a transport failure becomes an error.
    pub max_attempts: u32,
    /// Tiles in flight at once.
    pub max_in_flight: usize,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        EnhanceOptions {
            max_attempts: 3,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhanceStats {
    pub instances: usize,
    pub fallbacks: usize,
}

fn call_with_retry(
    client: &dyn Segmenter,
    request: &SegmenterRequest,
    attempts: u32,
) -> Result<SegmenterResponse> {
    let mut last = String::new();
    for attempt in 1..=attempts.max(1) {
        match client.segment(request) {
            Ok(r) => return Ok(r),
            Err(CallError::Malformed(m)) => {
                return Err(Error::Segmenter(format!("request {}: malformed response: {m}", request.id)))
            }
            Err(CallError::Transport(m)) => {
                log::warn!("request {} attempt {attempt} failed: {m}", request.id);
                last = m;
            }
        }
    }
    Err(Error::Segmenter(format!(
        "request {} failed after {} attempt(s): {last}",
        request.id,
        attempts.max(1)
    )))
}

/// Replace the coarse masks of one tile with segmenter masks.
pub fn enhance_tile(
    tile: &Tile,
    image: ImageRef,
    client: &dyn Segmenter,
    options: &EnhanceOptions,
) -> Result<(Tile, EnhanceStats)> {
    let tile_box = (tile.size > 0).then(|| BBox::new(0, 0, tile.size, tile.size));
    let boxes: Vec<BBox> = tile
        .instances
        .iter()
        .map(|m| tile_box.and_then(|t| t.intersect(&m.bbox)).unwrap_or(m.bbox))
        .collect();
    let request = SegmenterRequest {
        id: format!("tile-{}-{}", tile.origin[0], tile.origin[1]),
        tile_origin: tile.origin,
        tile_size: tile.size,
        image,
        boxes: boxes.clone(),
    };
    let response = call_with_retry(client, &request, options.max_attempts)?;
    if response.id != request.id {
        return Err(Error::Segmenter(format!(
            "response id {:?} does not match request {:?}",
            response.id, request.id
        )));
    }
    if response.results.len() != boxes.len() {
        return Err(Error::Segmenter(format!(
            "request {}: {} boxes sent, {} results returned",
            request.id,
            boxes.len(),
            response.results.len()
        )));
    }

    let mut stats = EnhanceStats::default();
    let mut out = Vec::with_capacity(tile.instances.len());
    for ((coarse, prompt), result) in tile.instances.iter().zip(&boxes).zip(&response.results) {
        stats.instances += 1;
        let refined = match result {
            BoxResult::Mask {
                bbox,
                rle,
                confidence,
            } => {
                if !(0.0..=1.0).contains(confidence) {
                    return Err(Error::Segmenter(format!(
                        "request {}: confidence {confidence} outside [0, 1]",
                        request.id
                    )));
                }
                let bits = crate::labelset::rle_decode(rle, bbox.w, bbox.h)
                    .map_err(|e| Error::Segmenter(format!("request {}: {e}", request.id)))?;
                PixelMask::new(*bbox, bits)?
                    .clip(prompt)
                    .map(|m| InstanceMask::from_mask(coarse.id, &m, Some(*confidence)))
                    .transpose()?
            }
            BoxResult::Failure { failure } => {
                log::debug!("instance {}: segmenter failure: {failure}", coarse.id);
                None
            }
        };
        out.push(match refined {
            Some(m) => m,
            None => {
                stats.fallbacks += 1;
                InstanceMask {
                    fallback: true,
                    ..coarse.clone()
                }
            }
        });
    }
    Ok((
        Tile {
            instances: out,
            ..tile.clone()
        },
        stats,
    ))
}

/// Enhance every tile of a tiled set. `ortho` supplies the inline images.
pub fn enhance_set(
    set: &AnnotationSet,
    ortho: &Raster,
    client: &dyn Segmenter,
    options: &EnhanceOptions,
) -> Result<(AnnotationSet, EnhanceStats)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.max_in_flight.max(1))
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
    let results = pool.install(|| {
        set.tiles
            .par_iter()
            .map(|tile| {
                let image = if tile.size > 0 {
                    ortho.window(
                        tile.origin[0] as usize,
                        tile.origin[1] as usize,
                        tile.size as usize,
                        tile.size as usize,
                    )?
                } else {
                    ortho.clone()
                };
                enhance_tile(tile, ImageRef::Inline(InlineImage::encode(&image)), client, options)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut stats = EnhanceStats::default();
    let mut tiles = Vec::with_capacity(results.len());
    for (t, s) in results {
        stats.instances += s.instances;
        stats.fallbacks += s.fallbacks;
        tiles.push(t);
    }
    if stats.instances != set.instance_count() {
        return Err(Error::Invariant("enhancement changed the instance count".into()));
    }
    Ok((
        AnnotationSet {
            tiles,
            ..set.clone()
        },
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::raster::Geotransform;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn guide(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Raster {
        let values = (0..w * h).map(|i| f(i % w, i / w)).collect();
        Raster::new(w, h, 1, Geotransform::new(0.0, 0.0, 0.05).unwrap(), -9999.0, values).unwrap()
    }

    fn request(origin: [u32; 2], boxes: Vec<BBox>) -> SegmenterRequest {
        SegmenterRequest {
            id: "t".into(),
            tile_origin: origin,
            tile_size: 64,
            image: ImageRef::Path("unused".into()),
            boxes,
        }
    }

    #[test]
    fn mock_uniform_patch_fills_box() {
        let g = guide(64, 64, |_, _| 0.6);
        let resp = mock_segmenter(&request([0, 0], vec![BBox::new(10, 12, 8, 5)]), &g, 0.2);
        match &resp.results[0] {
            BoxResult::Mask { bbox, rle, confidence } => {
                assert_eq!(*bbox, BBox::new(10, 12, 8, 5));
                assert_eq!(rle, &vec![0, 40]);
                assert!((confidence - 0.6).abs() < 1e-12);
            }
            other => panic!("expected mask, got {other:?}"),
        }
    }

    #[test]
    fn mock_below_threshold_fails() {
        let g = guide(64, 64, |_, _| 0.05);
        let resp = mock_segmenter(&request([0, 0], vec![BBox::new(0, 0, 10, 10)]), &g, 0.2);
        assert!(matches!(resp.results[0], BoxResult::Failure { .. }));
    }

    #[test]
    fn mock_disc_recovered_exactly() {
        // Disc off-center in the tile grid: origin shifts the guide lookup.
        let (cx, cy, r) = (40.0, 30.0, 9.0);
        let g = guide(80, 60, |x, y| {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            if d <= r { 0.7 } else { 0.05 }
        });
        let prompt = BBox::new(30 - 20, 20 - 16, 21, 21);
        let resp = mock_segmenter(&request([20, 16], vec![prompt]), &g, 0.2);
        let BoxResult::Mask { bbox, rle, .. } = &resp.results[0] else { panic!() };
        let got = PixelMask::new(*bbox, crate::labelset::rle_decode(rle, bbox.w, bbox.h).unwrap()).unwrap();
        let expected = oracle::flood_region(&g, (40 - 20 + 20, 30), 0.2, &BBox::new(30, 20, 21, 21));
        let got_global: Vec<(u32, u32)> = got.pixels().map(|(x, y)| (x + 20, y + 16)).collect();
        assert_eq!(got_global, expected);
    }

    #[test]
    fn mock_reseeds_at_nearest_pixel() {
        // Only a small patch in the corner of the box is above threshold.
        let g = guide(32, 32, |x, y| if x >= 12 && y >= 12 && x < 15 && y < 15 { 0.9 } else { 0.0 });
        let resp = mock_segmenter(&request([0, 0], vec![BBox::new(0, 0, 16, 16)]), &g, 0.5);
        let BoxResult::Mask { bbox, .. } = &resp.results[0] else { panic!() };
        assert_eq!(*bbox, BBox::new(12, 12, 3, 3));
    }

    fn coarse_tile() -> Tile {
        let sq = |id, x, y, s| {
            let px: Vec<_> = (y..y + s).flat_map(|r| (x..x + s).map(move |c| (c, r))).collect();
            InstanceMask::from_mask(id, &PixelMask::from_pixels(&px).unwrap(), None).unwrap()
        };
        Tile {
            origin: [0, 0],
            size: 64,
            instances: vec![sq(1, 5, 5, 10), sq(2, 40, 40, 10)],
        }
    }

    #[test]
    fn empty_result_falls_back_to_coarse() {
        let g = guide(64, 64, |x, _| if x < 32 { 0.8 } else { 0.0 });
        let mock = MockSegmenter { guide: g, threshold: 0.2 };
        let tile = coarse_tile();
        let (out, stats) =
            enhance_tile(&tile, ImageRef::Path("x".into()), &mock, &EnhanceOptions::default()).unwrap();
        assert_eq!(stats, EnhanceStats { instances: 2, fallbacks: 1 });
        assert!(!out.instances[0].fallback);
        assert!((out.instances[0].score.unwrap() - 0.8).abs() < 1e-9);
        assert!(out.instances[1].fallback);
        assert_eq!(out.instances[1].rle, tile.instances[1].rle);
        assert_eq!(out.instances[1].id, 2);
    }

    struct Flaky {
        fail_first: u32,
        calls: AtomicU32,
        inner: MockSegmenter,
    }

    impl Segmenter for Flaky {
        fn segment(&self, r: &SegmenterRequest) -> std::result::Result<SegmenterResponse, CallError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail_first {
                return Err(CallError::Transport("connection refused".into()));
            }
            self.inner.segment(r)
        }
    }

    #[test]
    fn transport_failures_are_retried_then_reported() {
        let inner = MockSegmenter { guide: guide(64, 64, |_, _| 0.5), threshold: 0.2 };
        let opts = EnhanceOptions { max_attempts: 3, max_in_flight: 1 };
        let ok = Flaky { fail_first: 2, calls: AtomicU32::new(0), inner: inner.clone() };
        assert!(enhance_tile(&coarse_tile(), ImageRef::Path("x".into()), &ok, &opts).is_ok());
        let bad = Flaky { fail_first: 3, calls: AtomicU32::new(0), inner };
        let err = enhance_tile(&coarse_tile(), ImageRef::Path("x".into()), &bad, &opts).unwrap_err();
        assert!(matches!(err, Error::Segmenter(_)));
        assert_eq!(bad.calls.load(Ordering::SeqCst), 3);
    }

    struct Truncating;

    impl Segmenter for Truncating {
        fn segment(&self, r: &SegmenterRequest) -> std::result::Result<SegmenterResponse, CallError> {
            Ok(SegmenterResponse { id: r.id.clone(), results: vec![] })
        }
    }

    #[test]
    fn misaligned_response_is_an_error() {
        let err = enhance_tile(&coarse_tile(), ImageRef::Path("x".into()), &Truncating, &EnhanceOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("2 boxes sent, 0 results"));
    }

    #[test]
    fn inline_image_round_trip() {
        let g = guide(8, 4, |x, y| (x * 10 + y) as f64 * 0.125);
        assert_eq!(InlineImage::encode(&g).decode().unwrap(), g);
    }

    #[test]
    fn wire_format_shapes() {
        let resp = SegmenterResponse {
            id: "tile-0-0".into(),
            results: vec![
                BoxResult::Mask { bbox: BBox::new(1, 2, 1, 1), rle: vec![0, 1], confidence: 0.5 },
                BoxResult::Failure { failure: "empty".into() },
            ],
        };
        let text = serde_json::to_string(&resp).unwrap();
        assert_eq!(
            text,
            r#"{"id":"tile-0-0","results":[{"bbox":[1,2,1,1],"rle":[0,1],"confidence":0.5},{"failure":"empty"}]}"#
        );
        assert_eq!(serde_json::from_str::<SegmenterResponse>(&text).unwrap(), resp);
    }
}
