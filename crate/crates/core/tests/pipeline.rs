//! Manifest loading, split assignment, image decoding and augmentation.

use std::fs;

use coatnet_core::data::{
    assign_splits, augment, decode_image, draw_params, load_manifest, load_subset, make_batches,
    parse_manifest, save_png, AugmentationConfig, Split, Subset, DEFAULT_TEST_PER_GROUP,
    DEFAULT_VAL_FRACTION,
};
use coatnet_core::synthetic::{labelled_manifest, quadrant_dataset, write_demo_dataset};
use coatnet_core::taxonomy::{LesionClass, LesionGroup};
use coatnet_core::{Error, Tensor};
use proptest::prelude::*;

const LESION_COUNTS: [usize; 7] = [332, 514, 1099, 115, 1563, 3061, 142];

#[test]
fn split_sizes_on_full_class_counts() {
    let manifest = labelled_manifest(&LESION_COUNTS);
    let split = assign_splits(&manifest, DEFAULT_TEST_PER_GROUP, DEFAULT_VAL_FRACTION, 7).unwrap();
    let total = |s| split.subset(s).len();
    assert_eq!((total(Split::Test), total(Split::Train), total(Split::Val)), (300, 5221, 1305));
    assert_eq!(total(Split::Unassigned), 0);

    let test = split.split_counts(Split::Test);
    for group in LesionGroup::ALL {
        let n: usize = LesionClass::ALL.iter().filter(|c| c.group() == group).map(|c| test[c.index()]).sum();
        assert_eq!(n, 100, "{group}");
    }
    let val = split.split_counts(Split::Val);
    for c in 0..7 {
        let rest = LESION_COUNTS[c] - test[c];
        let exact = 0.2 * rest as f64;
        assert!((val[c] as f64 - exact).abs() <= 1.0, "class {c}: {} vs {exact}", val[c]);
    }
}

#[test]
fn split_is_deterministic_and_seed_dependent() {
    let manifest = labelled_manifest(&LESION_COUNTS);
    let a = assign_splits(&manifest, 100, 0.2, 11).unwrap();
    let b = assign_splits(&manifest, 100, 0.2, 11).unwrap();
    let c = assign_splits(&manifest, 100, 0.2, 12).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_ne!(a.to_csv(), c.to_csv());
}

#[test]
fn split_rejects_small_groups_and_bad_fractions() {
    let manifest = labelled_manifest(&[5, 5, 5, 5, 5, 5, 5]);
    assert!(matches!(assign_splits(&manifest, 20, 0.2, 0), Err(Error::Capacity(_))));
    assert!(matches!(assign_splits(&manifest, 1, 1.0, 0), Err(Error::Config(_))));
}

#[test]
fn manifest_csv_round_trips() {
    let manifest = assign_splits(&labelled_manifest(&[3, 3, 3, 3, 3, 3, 3]), 1, 0.2, 3).unwrap();
    let parsed = parse_manifest(&manifest.to_csv()).unwrap();
    assert_eq!(parsed.records(), manifest.records());
}

#[test]
fn manifest_errors() {
    let header = "path,label,source,split\n";
    let dup = format!("{header}a.png,nevus,consensus,train\na.png,melanoma,consensus,train\n");
    assert!(matches!(parse_manifest(&dup), Err(Error::Duplicate(_))));
    let unknown = format!("{header}a.png,freckle,consensus,train\n");
    assert!(matches!(parse_manifest(&unknown), Err(Error::Taxonomy(_))));
    assert!(matches!(parse_manifest("path,label\na.png,nevus\n"), Err(Error::Format(_))));
}

#[test]
fn demo_dataset_loads_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    write_demo_dataset(dir.path(), 2, 12, 4).unwrap();
    let manifest = load_manifest(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest.len(), 14);
    let manifest = assign_splits(&manifest, 1, 0.2, 0).unwrap();
    let train = load_subset(&manifest, Split::Train, 8, 8).unwrap();
    assert!(!train.is_empty());
    assert!(train.samples.iter().all(|s| s.image.shape() == [3, 8, 8]));
}

#[test]
fn png_and_ppm_decode_to_the_same_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f64> = (0..3 * 4 * 5).map(|i| ((i * 13) % 256) as f64 / 255.0).collect();
    let image = Tensor::new([3, 4, 5], values).unwrap();
    let png = dir.path().join("x.png");
    save_png(&image, &png).unwrap();

    let mut ppm = b"P6\n# comment\n5 4\n255\n".to_vec();
    for y in 0..4 {
        for x in 0..5 {
            for c in 0..3 {
                ppm.push((image.values()[(c * 4 + y) * 5 + x] * 255.0).round() as u8);
            }
        }
    }
    let ppm_path = dir.path().join("x.ppm");
    fs::write(&ppm_path, &ppm).unwrap();

    let a = decode_image(&png).unwrap();
    let b = decode_image(&ppm_path).unwrap();
    assert_eq!(a, b);
    assert!(a.max_abs_diff(&image) <= 0.5 / 255.0 + 1e-12);

    fs::write(&ppm_path, &ppm[..ppm.len() - 3]).unwrap();
    assert!(matches!(decode_image(&ppm_path), Err(Error::Corruption(_))));
    fs::write(&ppm_path, b"GIF89a").unwrap();
    assert!(matches!(decode_image(&ppm_path), Err(Error::Format(_))));
}

#[test]
fn augmentation_draws_stay_in_range() {
    let cfg = AugmentationConfig::default();
    for i in 0..10_000 {
        let p = draw_params(&cfg, i);
        assert!(p.rotation.abs() <= 0.25);
        assert!((0.75..=1.25).contains(&p.zoom));
        for v in [p.contrast, p.brightness, p.saturation] {
            assert!((0.9..=1.1).contains(&v));
        }
    }
    assert_eq!(draw_params(&cfg, 5), draw_params(&cfg, 5));
    assert_ne!(draw_params(&cfg, 5), draw_params(&cfg, 6));
}

#[test]
fn augmentation_is_refused_for_held_out_subsets() {
    let mut set = quadrant_dataset(4, 8, 0);
    set.split = Split::Val;
    let cfg = AugmentationConfig::default();
    assert!(matches!(make_batches(&set, 2, None, Some(&cfg)), Err(Error::Usage(_))));
    assert!(make_batches(&set, 2, None, None).is_ok());
    let empty = Subset::new(Split::Train, vec![]);
    assert!(matches!(make_batches(&empty, 2, None, None), Err(Error::EmptyDataset(_))));
}

#[test]
fn batches_cover_every_sample_once() {
    let set = quadrant_dataset(10, 8, 0);
    let batches = make_batches(&set, 4, Some(3), None).unwrap();
    assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
    let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    for b in &batches {
        for (k, &i) in b.indices.iter().enumerate() {
            assert_eq!(b.labels[k], set.samples[i].label);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmented_images_keep_shape_and_range(
        h in 2usize..10, w in 2usize..10,
        seed in any::<u64>(), index in any::<u64>(),
        pixels in prop::collection::vec(0.0f64..=1.0, 300),
    ) {
        let image = Tensor::new([3, h, w], pixels[..3 * h * w].to_vec()).unwrap();
        let cfg = AugmentationConfig { seed, ..AugmentationConfig::default() };
        let out = augment(&image, &cfg, index).unwrap();
        prop_assert_eq!(out.shape(), image.shape());
        prop_assert!(out.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_augmentation_is_a_no_op(
        seed in any::<u64>(),
        pixels in prop::collection::vec(0.0f64..=1.0, 3 * 36),
    ) {
        let image = Tensor::new([3, 6, 6], pixels).unwrap();
        let out = augment(&image, &AugmentationConfig::identity(seed), 0).unwrap();
        prop_assert!(out.max_abs_diff(&image) <= 1e-12);
    }
}
