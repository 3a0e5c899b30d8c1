use crownlab::delineate::{local_maxima, marker_watershed, segments_to_instances, DelineateParams, Treetop};
use crownlab::labelset::{
    assign_to_tiles, make_tiles, parse_annotations, annotations_to_string, AnnotationSet, InstanceMask, PixelMask,
    Tile,
};
use crownlab::raster::{gaussian_smooth, Geotransform, Raster};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn blob(id: u64, rng: &mut impl Rng, extent: u32) -> InstanceMask {
    let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
    let (x, y) = (rng.gen_range(0..extent - w), rng.gen_range(0..extent - h));
    let px: Vec<_> = (y..y + h)
        .flat_map(|r| (x..x + w).map(move |c| (c, r)))
        .filter(|&(c, r)| (c * 7 + r * 3) % 5 != 0 || (c, r) == (x, y))
        .collect();
    InstanceMask::from_mask(id, &PixelMask::from_pixels(&px).unwrap(), Some(rng.gen_range(0.0..=1.0))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn interior_centroids_land_in_one_tile(seed: u64, stride in 8u32..64, nx in 2u32..6, ny in 2u32..6) {
        let size = 2 * stride;
        let (w, h) = (size + nx * stride + stride / 3, size + ny * stride);
        let specs = make_tiles(w, h, size, stride).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let q = size / 4;
        let instances: Vec<InstanceMask> = (0..100)
            .map(|i| {
                let cx = rng.gen_range(q..w - q - 1);
                let cy = rng.gen_range(q..h - q - 1);
                InstanceMask::from_mask(i, &PixelMask::from_pixels(&[(cx, cy)]).unwrap(), None).unwrap()
            })
            .collect();
        let a = assign_to_tiles(&instances, &specs).unwrap();
        let mut count = vec![0; 100];
        for t in &a.tiles {
            for m in &t.instances {
                count[m.id as usize] += 1;
                m.validate().unwrap();
            }
        }
        prop_assert!(count.iter().all(|&c| c == 1), "{count:?}");
    }

    #[test]
    fn clipping_keeps_assignment(seed: u64) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let specs = make_tiles(300, 300, 128, 64).unwrap();
        let instances: Vec<_> = (0..60).map(|i| blob(i, &mut rng, 300)).collect();
        let a = assign_to_tiles(&instances, &specs).unwrap();
        for (t, spec) in a.tiles.iter().zip(&specs) {
            for m in &t.instances {
                let orig = &instances[m.id as usize];
                prop_assert!(spec.center_contains(orig.centroid));
                m.validate().unwrap();
                prop_assert!(m.area() <= orig.area());
            }
        }
    }

    #[test]
    fn annotation_json_is_a_fixed_point(seed: u64, tiles in 1usize..5) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut next = 0;
        let set = AnnotationSet {
            cell_size_m: 0.05,
            origin_m: Some([rng.gen_range(-1e6..1e6), rng.gen_range(-1e6..1e6)]),
            extent: Some([300, 300]),
            config: Some(serde_json::json!({"seed": seed})),
            tiles: (0..tiles)
                .map(|t| Tile {
                    origin: [t as u32 * 64, 0],
                    size: 128,
                    instances: (0..rng.gen_range(0..8))
                        .map(|_| {
                            next += 1;
                            let mut m = blob(next, &mut rng, 128);
                            m.fallback = rng.gen_bool(0.2);
                            if rng.gen_bool(0.3) {
                                m.score = None;
                            }
                            m
                        })
                        .collect(),
                })
                .collect(),
        };
        let text = annotations_to_string(&set);
        let parsed = parse_annotations(&text).unwrap();
        prop_assert_eq!(&parsed, &set);
        prop_assert_eq!(annotations_to_string(&parsed), text);
    }

    #[test]
    fn watershed_set_semantics(seed: u64) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let (w, h) = (rng.gen_range(10..50), rng.gen_range(10..50));
        let values: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..20.0)).collect();
        let chm = gaussian_smooth(
            &Raster::new(w, h, 1, Geotransform::new(0.0, 0.0, 0.5).unwrap(), -9999.0, values).unwrap(),
            1.0,
        )
        .unwrap();
        let p = DelineateParams::default();
        let mut tops: Vec<Treetop> = local_maxima(&chm, &p);
        let sm = marker_watershed(&chm, &tops, p.min_tree_height).unwrap();
        prop_assert_eq!(sm.segment_count(), tops.len());
        for (i, &l) in sm.labels.iter().enumerate() {
            if l > 0 {
                prop_assert!(chm.values()[i] >= p.min_tree_height);
            }
        }
        let instances = segments_to_instances(&sm).unwrap();
        prop_assert_eq!(instances.len(), tops.len());
        for c in &instances {
            prop_assert_eq!(sm.label(c.apex.row as usize, c.apex.col as usize), c.label);
        }
        tops.shuffle(&mut rng);
        let again = marker_watershed(&chm, &tops, p.min_tree_height).unwrap();
        prop_assert_eq!(again.labels, sm.labels);
    }
}
