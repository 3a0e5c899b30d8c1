use crownlab::chm::{fill_chm_gaps, rasterize_chm};
use crownlab::pointcloud::{
    build_dtm, classify_ground_fallback, normalize_heights, Classification, LidarPoint, PointCloud,
};
use crownlab::raster::{
    decode_rasterbin, encode_rasterbin, gaussian_smooth, map_pixel, read_raster, write_raster, Geotransform,
    Raster,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use std::collections::BTreeSet;

fn raster(w: usize, h: usize, seed: u64) -> Raster {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let values = (0..w * h).map(|_| rng.gen_range(-5.0..30.0)).collect();
    Raster::new(w, h, 1, Geotransform::new(10.0, 50.0, 0.5).unwrap(), -9999.0, values).unwrap()
}

fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let points = (0..n)
        .map(|i| LidarPoint {
            x: rng.gen_range(0.0..20.0),
            y: rng.gen_range(0.0..15.0),
            z: rng.gen_range(0.0..25.0),
            return_number: if i % 5 == 0 { 2 } else { 1 },
            classification: match rng.gen_range(0..4) {
                0 => Classification::Ground,
                1 => Classification::Vegetation,
                _ => Classification::Unclassified,
            },
            channel: rng.gen_range(1..=3),
        })
        .collect();
    PointCloud::new(points).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smoothing_preserves_sum_and_range(w in 1usize..40, h in 1usize..40, sigma in 0.0f64..4.0, seed: u64) {
        let r = raster(w, h, seed);
        let s = gaussian_smooth(&r, sigma).unwrap();
        let (a, b): (f64, f64) = (r.values().iter().sum(), s.values().iter().sum());
        let scale = r.values().iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        prop_assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b}");
        let lo = r.values().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = r.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.values().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn map_pixel_round_trip(row in -50i64..500, col in -50i64..500, ratio in 1u32..20, ox in -100.0f64..100.0) {
        let coarse = Geotransform::new(ox, 300.0, 0.5).unwrap();
        let fine = Geotransform::new(ox + 0.013, 300.0 - 0.021, 0.5 / ratio as f64).unwrap();
        for (src, dst) in [(coarse, fine), (fine, coarse)] {
            let (r2, c2) = map_pixel(&src, row, col, &dst);
            let (r3, c3) = map_pixel(&dst, r2, c2, &src);
            let (x0, y0) = src.cell_center(row, col);
            let (x1, y1) = src.cell_center(r3, c3);
            let tol = dst.cell_size.max(src.cell_size) + 1e-9;
            prop_assert!((x0 - x1).abs() <= tol && (y0 - y1).abs() <= tol);
        }
    }

    #[test]
    fn ground_fallback_only_touches_classes(n in 1usize..300, seed: u64, grid in 0.5f64..5.0, tol in 0.0f64..2.0) {
        let pc = cloud(n, seed);
        let out = classify_ground_fallback(&pc, grid, tol).unwrap();
        for (a, b) in pc.points().iter().zip(out.points()) {
            prop_assert_eq!((a.x, a.y, a.z, a.return_number, a.channel), (b.x, b.y, b.z, b.return_number, b.channel));
            if a.classification != Classification::Unclassified {
                prop_assert_eq!(a.classification, b.classification);
            }
        }
    }

    #[test]
    fn dtm_is_total_and_normalization_idempotent(n in 1usize..300, seed: u64) {
        let pc = cloud(n, seed);
        prop_assume!(pc.points().iter().any(|p| p.classification == Classification::Ground));
        let dtm = build_dtm(&pc, 0.5).unwrap();
        prop_assert!(dtm.values().iter().all(|&v| !dtm.is_nodata(v)));
        let norm = normalize_heights(&pc, &dtm).unwrap();
        let zero = Raster::filled(dtm.width(), dtm.height(), *dtm.geotransform(), -9999.0, 0.0).unwrap();
        let again = normalize_heights(&norm, &zero).unwrap();
        prop_assert_eq!(norm.points(), again.points());
    }

    #[test]
    fn chm_nonnegative_and_order_free(n in 1usize..300, seed: u64) {
        let pc = cloud(n, seed);
        let channels = BTreeSet::from([1, 2]);
        let chm = rasterize_chm(&pc, 0.5, &channels).unwrap();
        prop_assert_eq!(chm.geotransform().cell_size, 0.5);
        let filled = fill_chm_gaps(&chm).unwrap();
        prop_assert!(filled.values().iter().all(|&v| v >= 0.0));
        let mut pts = pc.points().to_vec();
        pts.reverse();
        pts.rotate_left(n / 3);
        let shuffled = rasterize_chm(&PointCloud::new(pts).unwrap(), 0.5, &channels).unwrap();
        prop_assert_eq!(chm.values(), shuffled.values());
    }
}

#[test]
fn five_band_rasterbin_round_trip() {
    let (w, h) = (1024, 1024);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    // f32-representable values so the round trip is exact.
    let values: Vec<f64> = (0..5 * w * h).map(|_| rng.gen::<f32>() as f64).collect();
    let r = Raster::new(w, h, 5, Geotransform::new(385000.0, 6672000.0, 0.05).unwrap(), -9999.0, values).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ortho.rasterbin");
    write_raster(&r, &path).unwrap();
    let back = read_raster(&path).unwrap();
    assert_eq!(back, r);
    let (header, bytes) = encode_rasterbin(&r);
    assert_eq!(bytes, std::fs::read(dir.path().join("ortho.bin")).unwrap());
    assert_eq!(bytes.len(), 5 * w * h * 4);
    assert_eq!(decode_rasterbin(&header, &bytes).unwrap(), r);
}
