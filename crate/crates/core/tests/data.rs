use fcn_core::data::{
    apply_mask, encode_pnm, generate, generate_splits, load_dataset, parse_pnm, save_dataset, transform, MaskMode,
    Raster, ShapesConfig, BACKGROUND,
};
use fcn_core::tensor::IGNORE;
use fcn_core::Error;
use proptest::prelude::*;

#[test]
fn minimal_pgm() {
    let mut bytes = b"P5\n4 4\n255\n".to_vec();
    bytes.extend(0..16u8);
    let r = parse_pnm(&bytes).unwrap();
    assert_eq!((r.width, r.height, r.channels), (4, 4, 1));
    assert_eq!(r.data, (0..16).collect::<Vec<u8>>());
    let img = r.to_image().unwrap();
    assert_eq!(img.at(0, 0, 3, 3), 15.0 / 255.0);
    assert_eq!(encode_pnm(&r), bytes);
}

#[test]
fn truncated_payload_reports_its_offset() {
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    bytes.extend([1u8; 5]);
    match parse_pnm(&bytes) {
        Err(Error::Parse { offset, message }) => {
            assert_eq!(offset, bytes.len());
            assert!(message.contains("5 of 12"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_pnm(b"P3\n1 1\n255\n0"), Err(Error::Parse { offset: 0, .. })));
    assert!(matches!(parse_pnm(b"P5\n1 1\n300\n\0"), Err(Error::Parse { .. })));
}

#[test]
fn comments_and_low_maxval() {
    let mut bytes = b"P5 # grey\n2 1\n# depth\n15\n".to_vec();
    bytes.extend([0u8, 15]);
    let r = parse_pnm(&bytes).unwrap();
    assert_eq!(r.data, vec![0, 255]);
}

fn small() -> ShapesConfig {
    ShapesConfig {
        size: 24,
        radius_min: 3.0,
        radius_max: 6.0,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn labels_follow_shape_geometry() {
    for s in generate(&small(), 20).unwrap().samples {
        for i in 0..24 {
            for j in 0..24 {
                let (y, x) = (i as f64, j as f64);
                // The last shape drawn that covers the pixel owns it.
                let want = s
                    .shapes
                    .iter()
                    .rev()
                    .find(|sh| sh.contains(y, x))
                    .map_or(BACKGROUND, |sh| sh.kind.class());
                assert_eq!(s.label.at(0, i, j), want);
            }
        }
    }
}

#[test]
fn masking_modes() {
    let ds = generate(&small(), 10).unwrap();
    for s in &ds.samples {
        let fg = apply_mask(s, MaskMode::FgOnly);
        let both = apply_mask(&fg, MaskMode::BgOnly);
        assert!(both.image.data().iter().all(|&v| v == 0.0));
        assert_eq!(fg.label, s.label);
        let shape = apply_mask(s, MaskMode::ShapeOnly);
        assert!(shape.image.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let d = s.image.dims();
        for c in 0..d.c {
            for i in 0..d.h {
                for j in 0..d.w {
                    let is_fg = s.label.at(0, i, j) != BACKGROUND;
                    assert_eq!(shape.image.at(0, c, i, j), if is_fg { 1.0 } else { 0.0 });
                    let kept = if is_fg { s.image.at(0, c, i, j) } else { 0.0 };
                    assert_eq!(fg.image.at(0, c, i, j), kept);
                }
            }
        }
        assert_eq!(apply_mask(s, MaskMode::None), *s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn translation_matches_index_shift(seed in 0u64..500, dy in -5i64..=5, dx in -5i64..=5, flip in any::<bool>()) {
        let s = generate(&ShapesConfig { seed, ..small() }, 1).unwrap().samples.remove(0);
        let t = transform(&s, flip, dy, dx);
        for i in 0..24i64 {
            for j in 0..24i64 {
                let (si, sj) = (i - dy, j - dx);
                let inside = (0..24).contains(&si) && (0..24).contains(&sj);
                let label = t.label.at(0, i as usize, j as usize);
                if inside {
                    let sj = if flip { 23 - sj } else { sj } as usize;
                    prop_assert_eq!(label, s.label.at(0, si as usize, sj));
                    prop_assert_eq!(t.image.at(0, 1, i as usize, j as usize), s.image.at(0, 1, si as usize, sj));
                } else {
                    prop_assert_eq!(label, IGNORE);
                    prop_assert_eq!(t.image.at(0, 0, i as usize, j as usize), 0.0);
                }
            }
        }
    }

    #[test]
    fn mirroring_twice_is_identity(seed in 0u64..500) {
        let mut s = generate(&ShapesConfig { seed, ..small() }, 1).unwrap().samples.remove(0);
        let twice = transform(&transform(&s, true, 0, 0), true, 0, 0);
        s.shapes.clear();
        prop_assert_eq!(twice, s);
    }
}

#[test]
fn splits_are_distinct_streams() {
    let splits = generate_splits(&small(), (5, 3, 3)).unwrap();
    assert_eq!((splits.train.len(), splits.val.len(), splits.test.len()), (5, 3, 3));
    assert_ne!(splits.train.samples[0].image, splits.val.samples[0].image);
    assert_ne!(splits.val.samples[0].image, splits.test.samples[0].image);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&small(), 3).unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(dir.path(), 5).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.label, b.label);
        // Images are quantised to 8 bits on disk.
        assert_eq!(Raster::from_image(&a.image).unwrap(), Raster::from_image(&b.image).unwrap());
    }
    let missing = load_dataset(dir.path().join("nope"), 5).unwrap_err();
    assert!(missing.to_string().contains("nope"));
}
