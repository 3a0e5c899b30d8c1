//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test -p crownlab-cli --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use crownlab::delineate::{local_maxima, marker_watershed, DelineateParams};
use crownlab::enhancer::{enhance_set, EnhanceOptions, MockSegmenter};
use crownlab::eval::{bootstrap_ci, evaluate_dataset, EvalConfig, EvalWindow};
use crownlab::labelset::{
    assign_to_tiles, make_tiles, AnnotationSet, BBox, InstanceMask, PixelMask, Tile,
};
use crownlab::oracle;
use crownlab::pipeline::{self, PipelineConfig};
use crownlab::postfilter::{containment_filter, nms, OverlapKind};
use crownlab::raster::{gaussian_smooth, Geotransform, Raster};
use crownlab::spectral::{compute_ndvi, BandSet};
use crownlab::synth::{write_scene, Scene, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond { Ok(ok) } else { Err(bad) }
}

fn mask_of(id: u64, pixels: &[(u32, u32)], score: Option<f64>) -> InstanceMask {
    InstanceMask::from_mask(id, &PixelMask::from_pixels(pixels).unwrap(), score).unwrap()
}

fn rect(id: u64, x: u32, y: u32, w: u32, h: u32) -> InstanceMask {
    let px: Vec<_> = (y..y + h).flat_map(|r| (x..x + w).map(move |c| (c, r))).collect();
    mask_of(id, &px, None)
}

fn disc(id: u64, cx: f64, cy: f64, r: f64, window: &BBox) -> Option<InstanceMask> {
    let mut px = Vec::new();
    for y in window.y..window.y1() {
        for x in window.x..window.x1() {
            if (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r {
                px.push((x, y));
            }
        }
    }
    PixelMask::from_pixels(&px).map(|m| InstanceMask::from_mask(id, &m, None).unwrap())
}

fn c1_watershed_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    let params = DelineateParams::default();
    let cs = 0.5;
    let sep = 2.0 * params.radius_cells(20.0, cs) as f64;
    let (n, w) = (50, 128usize);
    let mut mismatched = Vec::new();
    let mut wrong_count = Vec::new();
    for scene in 0..n {
        let k = rng.gen_range(2..=10);
        let mut bumps: Vec<(f64, f64, f64, f64)> = Vec::new();
        while bumps.len() < k {
            let b = (
                rng.gen_range(10.0..118.0),
                rng.gen_range(10.0..118.0),
                rng.gen_range(8.0..20.0),
                rng.gen_range(1.5..2.5),
            );
            if bumps.iter().all(|o: &(f64, f64, f64, f64)| (o.0 - b.0).hypot(o.1 - b.1) > sep) {
                bumps.push(b);
            }
        }
        let values = oracle::gaussian_bumps(w, w, &bumps);
        let chm = Raster::new(w, w, 1, Geotransform::new(0.0, 64.0, cs).unwrap(), -9999.0, values).unwrap();
        let smooth = gaussian_smooth(&chm, params.sigma).unwrap();
        let tops = local_maxima(&smooth, &params);
        let sm = marker_watershed(&smooth, &tops, params.min_tree_height).unwrap();
        let reference = oracle::naive_flood(smooth.values(), w, w, &tops, params.min_tree_height);
        if sm.labels != reference {
            mismatched.push(scene);
        }
        if sm.segment_count() != k {
            wrong_count.push((scene, k, sm.segment_count()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatched.is_empty() && wrong_count.is_empty() && secs < 10.0,
        format!("{n}/{n} scenes equal the naive flood, segment count = bump count, {secs:.2} s"),
        format!("label mismatches in {mismatched:?}, count mismatches {wrong_count:?}, {secs:.2} s"),
    )
}

fn c2_fixed_window_maxima() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    let mut bad = Vec::new();
    for i in 0..20 {
        let (w, h) = (rng.gen_range(20..80), rng.gen_range(20..80));
        let values: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..30.0)).collect();
        let params = DelineateParams {
            win_a: rng.gen_range(0.5..3.0),
            win_b: 0.0,
            ..DelineateParams::default()
        };
        let r = Raster::new(w, h, 1, Geotransform::new(0.0, 0.0, 0.5).unwrap(), -9999.0, values.clone()).unwrap();
        if local_maxima(&r, &params) != oracle::brute_force_maxima(&values, w, h, 0.5, &params) {
            bad.push(i);
        }
    }
    check(bad.is_empty(), "20/20 rasters equal the brute-force maximum filter".into(), format!("mismatch on rasters {bad:?}"))
}

fn c3_ndvi_filter() -> Outcome {
    // 20 square segments of 4x4 CHM cells; ortho 10x finer.
    let chm_gt = Geotransform::new(0.0, 10.0, 0.5).unwrap();
    let (ow, oh) = (400usize, 200usize);
    let ortho_gt = Geotransform::new(0.0, 10.0, 0.05).unwrap();
    let bands = BandSet::default();
    let mut values = vec![0.1; 5 * ow * oh];
    let mut instances = Vec::new();
    let mut vegetation = Vec::new();
    for k in 0..20u32 {
        let (cx, cy) = (1 + 5 * (k % 8), 1 + 5 * (k / 8) + 2);
        let id = k as u64 + 1;
        instances.push(rect(id, cx, cy, 4, 4));
        let veg = k % 2 == 0;
        if veg {
            vegetation.push(id);
        }
        // Vegetation index 0.5 (0.3 vs 0.1) or 0.05 (0.21 vs 0.19).
        let (red, re) = if veg { (0.1, 0.3) } else { (0.19, 0.21) };
        for r in cy * 10..(cy + 4) * 10 {
            for c in cx * 10..(cx + 4) * 10 {
                let i = r as usize * ow + c as usize;
                values[bands.red * ow * oh + i] = red;
                values[bands.red_edge * ow * oh + i] = re;
            }
        }
    }
    let ortho = Raster::new(ow, oh, 5, ortho_gt, -9999.0, values).unwrap();
    let set = AnnotationSet::untiled(&chm_gt, 40, 20, instances);
    let out = pipeline::ndvi_filter(&set, &ortho, &bands, 0.2).map_err(|e| e.to_string())?;
    let kept: Vec<u64> = out.set.instances().map(|m| m.id).collect();
    let means_ok = out.means.iter().all(|(id, m)| {
        let want = if vegetation.contains(id) { 0.5 } else { 0.05 };
        (m - want).abs() < 1e-6
    });
    check(
        kept == vegetation && means_ok,
        "threshold 0.2 keeps exactly the 10 vegetation segments (means 0.5 / 0.05)".into(),
        format!("kept {kept:?}, means {:?}", out.means),
    )
}

fn c4_tiling() -> Outcome {
    let specs = make_tiles(2048, 2048, 1024, 512).map_err(|e| e.to_string())?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
    let mut instances = Vec::new();
    while instances.len() < 500 {
        let (w, h) = (rng.gen_range(1..60), rng.gen_range(1..60));
        let (x, y) = (rng.gen_range(200..1800 - w), rng.gen_range(200..1800 - h));
        let m = rect(instances.len() as u64 + 1, x, y, w, h);
        let [cx, cy] = m.centroid;
        if (256.0..1792.0).contains(&cx) && (256.0..1792.0).contains(&cy) {
            instances.push(m);
        }
    }
    let a = assign_to_tiles(&instances, &specs).map_err(|e| e.to_string())?;
    let mut seen: BTreeMap<u64, usize> = BTreeMap::new();
    for t in &a.tiles {
        for m in &t.instances {
            *seen.entry(m.id).or_default() += 1;
        }
    }
    let exhaustive = instances
        .iter()
        .all(|m| specs.iter().filter(|s| s.center_contains(m.centroid)).count() == 1);
    let once = seen.len() == 500 && seen.values().all(|&c| c == 1);
    check(
        specs.len() == 9 && once && exhaustive && a.dropped == 0,
        "9 tiles; 500/500 instances appear exactly once".into(),
        format!("{} tiles, {} distinct ids, dropped {}, exhaustive {exhaustive}", specs.len(), seen.len(), a.dropped),
    )
}

fn c5_coarse_to_pseudo(scene_dir: &Path) -> Outcome {
    let scene = Scene::generate(SceneConfig::default()).map_err(|e| e.to_string())?;
    let ortho = scene.ortho().map_err(|e| e.to_string())?;
    let gt = scene.truth_tiled(1024, 512).map_err(|e| e.to_string())?;
    // Bounding-square coarse masks, tiled like the truth.
    let squares: Vec<InstanceMask> = scene
        .truth()
        .unwrap()
        .iter()
        .map(|m| rect(m.id, m.bbox.x, m.bbox.y, m.bbox.w, m.bbox.h))
        .collect();
    let mut coarse = gt.clone();
    coarse.tiles = assign_to_tiles(&squares, &make_tiles(2048, 2048, 1024, 512).unwrap()).unwrap().tiles;
    let guide = compute_ndvi(&ortho, &BandSet::default()).map_err(|e| e.to_string())?;
    let mock = MockSegmenter { guide, threshold: 0.2 };
    let (pseudo, _) = enhance_set(&coarse, &ortho, &mock, &EnhanceOptions::default()).map_err(|e| e.to_string())?;
    let cfg = EvalConfig::default();
    let c = evaluate_dataset(&coarse, &gt, &cfg).map_err(|e| e.to_string())?.miou;
    let p = evaluate_dataset(&pseudo, &gt, &cfg).map_err(|e| e.to_string())?.miou;

    // The same ordering through the full pipeline (watershed coarse masks).
    let cfg = PipelineConfig::load(scene_dir.join("pipeline.json")).map_err(|e| e.to_string())?;
    let report = pipeline::run_all(&cfg, scene_dir.join("c5_out")).map_err(|e| e.to_string())?;
    let pc = report.get("Coarse masks").unwrap().miou;
    let pp = report.get("Pseudo masks").unwrap().miou;
    check(
        p - c >= 0.05 && pp - pc >= 0.05,
        format!("bounding squares {c:.3} -> pseudo {p:.3}; pipeline coarse {pc:.3} -> pseudo {pp:.3}"),
        format!("bounding squares {c:.3} -> {p:.3}; pipeline {pc:.3} -> {pp:.3} (need +0.05)"),
    )
}

fn c6_metrics() -> Outcome {
    // Three 10x10 trees; predictions at IoU 0.9, 90/110 and 1/3.
    let gts = vec![rect(1, 0, 0, 10, 10), rect(2, 20, 0, 10, 10), rect(3, 40, 0, 10, 10)];
    let preds = vec![rect(11, 0, 0, 10, 9), rect(12, 21, 0, 10, 10), rect(13, 45, 0, 10, 10)];
    let gt = Geotransform::new(0.0, 0.0, 1.0).unwrap();
    let g = AnnotationSet::untiled(&gt, 64, 16, gts);
    let p = AnnotationSet::untiled(&gt, 64, 16, preds);
    let r = evaluate_dataset(&p, &g, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let third = 2.0 / 3.0;
    let counts_ok = (r.tp, r.fp, r.fn_) == (2, 1, 1) && r.precision == third && r.recall == third && r.f1 == third;
    let same = evaluate_dataset(&g, &g, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let perfect = [same.precision, same.recall, same.f1, same.miou] == [1.0; 4]
        && same.ci_low == Some(1.0)
        && same.ci_high == Some(1.0);
    check(
        counts_ok && perfect,
        "tp=2/fp=1/fn=1 gives P=R=F1=2/3 exactly; pred=gt gives 1.0 and CI [1,1]".into(),
        format!("tp {} fp {} fn {} P {} R {} F1 {}; pred=gt {:?}", r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1,
            (same.precision, same.recall, same.f1, same.miou, same.ci_low, same.ci_high)),
    )
}

fn c7_bootstrap(scene_dir: &Path) -> Outcome {
    let constant = bootstrap_ci(&[0.37; 50], 1000, 0.95, 42).map_err(|e| e.to_string())?;
    let z = 1.959_963_984_540_054;
    let mut worst: f64 = 0.0;
    for (ones, n) in [(500usize, 1000usize), (100, 200)] {
        let values: Vec<f64> = (0..n).map(|i| if i < ones { 1.0 } else { 0.0 }).collect();
        let (lo, hi) = bootstrap_ci(&values, 1000, 0.95, 42).map_err(|e| e.to_string())?;
        let p = ones as f64 / n as f64;
        let half = z * (p * (1.0 - p) / n as f64).sqrt();
        worst = worst.max((lo - (p - half)).abs()).max((hi - (p + half)).abs());
    }
    // Byte identity across runs and worker counts, through the binary.
    let out = scene_dir.join("c5_out");
    let mut reports = Vec::new();
    for jobs in ["1", "3", "8", "1"] {
        let path = scene_dir.join(format!("c7_jobs{jobs}_{}.json", reports.len()));
        let o = Command::new(env!("CARGO_BIN_EXE_crownlab"))
            .args(["--jobs", jobs, "eval", "--pred"])
            .arg(out.join("pseudo.json"))
            .arg("--gt")
            .arg(scene_dir.join("gt.json"))
            .arg("--out")
            .arg(&path)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
        reports.push(fs::read(&path).unwrap());
    }
    let identical = reports.windows(2).all(|w| w[0] == w[1]);
    check(
        constant == (0.37, 0.37) && worst <= 0.02 && identical,
        format!("constant CI [c,c]; Bernoulli CI within {worst:.4} of analytic; reports identical across --jobs 1/3/8"),
        format!("constant {constant:?}, Bernoulli deviation {worst:.4}, identical {identical}"),
    )
}

fn c8_nms_containment() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
    let mut bad = Vec::new();
    for set_no in 0..100 {
        let n = rng.gen_range(2..25);
        let set: Vec<InstanceMask> = (0..n)
            .map(|i| {
                let (w, h) = (rng.gen_range(2..15), rng.gen_range(2..15));
                let mut m = rect(i as u64 + 1, rng.gen_range(0..30), rng.gen_range(0..30), w, h);
                // Coarse scores so ties occur.
                m.score = Some((rng.gen_range(0..10) as f64) / 10.0);
                m
            })
            .collect();
        if nms(&set, 0.3, OverlapKind::Mask).unwrap() != oracle::reference_nms(&set, 0.3) {
            bad.push(set_no);
        }
    }
    let triple = vec![rect(1, 10, 10, 10, 10), rect(2, 0, 0, 30, 30), rect(3, 5, 5, 20, 20)];
    let kept = containment_filter(&triple, 0.8).unwrap();
    let kept_ids: Vec<u64> = kept.iter().map(|m| m.id).collect();
    let replay_ok = kept == oracle::containment_replay(&triple, 0.8);
    check(
        bad.is_empty() && kept_ids == [2] && replay_ok,
        "100/100 NMS sets equal the reference; nested triple keeps only the outermost".into(),
        format!("NMS mismatches {bad:?}; nested triple kept {kept_ids:?}, replay agrees {replay_ok}"),
    )
}

fn c9_center_vs_full() -> Outcome {
    let tile = BBox::new(0, 0, 256, 256);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    // Interior crowns predicted exactly.
    for (k, (cx, cy)) in [(100.0, 100.0), (150.0, 100.0), (100.0, 150.0), (150.0, 150.0)].into_iter().enumerate() {
        let m = disc(k as u64 + 1, cx, cy, 18.0, &tile).unwrap();
        gts.push(m.clone());
        preds.push(m);
    }
    // Crowns cut by the tile edge: the prediction only sees the inner part.
    for (k, (cx, cy)) in [(6.0, 60.0), (250.0, 200.0), (60.0, 4.0), (200.0, 252.0)].into_iter().enumerate() {
        let id = k as u64 + 5;
        gts.push(disc(id, cx, cy, 20.0, &tile).unwrap());
        let inner = BBox::new(12, 12, 232, 232);
        preds.push(disc(id + 100, cx, cy, 20.0, &inner).unwrap());
    }
    let gt = Geotransform::new(0.0, 0.0, 0.05).unwrap();
    let mk = |instances| AnnotationSet {
        tiles: vec![Tile { origin: [0, 0], size: 256, instances }],
        ..AnnotationSet::untiled(&gt, 256, 256, Vec::new())
    };
    let (g, p) = (mk(gts), mk(preds));
    let center = evaluate_dataset(&p, &g, &EvalConfig { window: EvalWindow::Center, ..EvalConfig::default() })
        .map_err(|e| e.to_string())?
        .miou;
    let full = evaluate_dataset(&p, &g, &EvalConfig { window: EvalWindow::Full, ..EvalConfig::default() })
        .map_err(|e| e.to_string())?
        .miou;
    check(full < center, format!("full {full:.3} < center {center:.3}"), format!("full {full:.3} vs center {center:.3}"))
}

fn checksums(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let digest = Sha256::digest(fs::read(&p).unwrap());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), hex);
    }
    out
}

fn c10_determinism(root: &Path) -> Outcome {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_crownlab");
    let scene = root.join("c10_scene");
    let run = |args: &[&std::ffi::OsStr]| -> Result<(), String> {
        let o = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if o.status.success() { Ok(()) } else { Err(String::from_utf8_lossy(&o.stderr).into_owned()) }
    };
    run(&["synth".as_ref(), "--out-dir".as_ref(), scene.as_os_str()])?;
    let (a, b) = (root.join("c10_a"), root.join("c10_b"));
    for out in [&a, &b] {
        run(&["run-all".as_ref(), "--config".as_ref(), scene.join("pipeline.json").as_os_str(), "--out-dir".as_ref(), out.as_os_str()])?;
    }
    let secs = start.elapsed().as_secs_f64();
    let (ca, cb) = (checksums(&a), checksums(&b));
    check(
        ca == cb && !ca.is_empty() && secs < 60.0,
        format!("{} files bitwise identical across two runs; synth + 2 runs {secs:.1} s", ca.len()),
        format!("checksums equal {}, {secs:.1} s", ca == cb),
    )
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let scene_dir = root.path().join("scene");
    write_scene(&Scene::generate(SceneConfig::default()).unwrap(), &scene_dir).expect("bundled scene");

    let criteria: Vec<Criterion> = vec![
        ("watershed oracle equivalence", Box::new(c1_watershed_oracle)),
        ("local-maximum filter", Box::new(c2_fixed_window_maxima)),
        ("NDVI filter", Box::new(c3_ndvi_filter)),
        ("tiling and centroid rule", Box::new(c4_tiling)),
        ("coarse to pseudo ordering", Box::new(|| c5_coarse_to_pseudo(&scene_dir))),
        ("metrics arithmetic", Box::new(c6_metrics)),
        ("bootstrap correctness", Box::new(|| c7_bootstrap(&scene_dir))),
        ("NMS and containment", Box::new(c8_nms_containment)),
        ("center vs full evaluation", Box::new(c9_center_vs_full)),
        ("end-to-end determinism", Box::new(|| c10_determinism(root.path()))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(msg) => println!("PASS criterion {:>2} {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
