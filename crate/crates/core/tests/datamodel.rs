mod common;

use std::fs;

use common::{render, scene, sprite, window};
use image::RgbImage;
use motseg_core::datamodel::{
    compute_stats, decode_image, image_path, load_sequence, preprocess_frame, DatasetIndex, Frame, Image, LoadOptions,
    MotionMask, SequenceSample,
};
use motseg_core::flow::FlowField;
use motseg_core::synth::write_scene;
use motseg_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn rgb(h: u32, w: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)))
}

fn sample_with_target(mask: MotionMask) -> SequenceSample {
    let (h, w) = (mask.height(), mask.width());
    SequenceSample {
        sequence_id: "s".into(),
        end_index: 0,
        frames: vec![Frame { image: Image::filled(h, w, [0.0; 3]), timestamp_index: 0, sequence_id: "s".into() }],
        flows: vec![FlowField::zeros(h, w)],
        masks: vec![Some(mask)],
    }
}

#[test]
fn kitti_resolution_crop() {
    let raw = rgb(375, 1242, |x, y| [(x % 251) as u8, (y % 241) as u8, 9]);
    let f = preprocess_frame(&raw, 119.0 / 375.0, 256, 1224).unwrap();
    assert_eq!((f.height(), f.width()), (256, 1224));
}

#[test]
fn zero_crop_same_size_is_identity() {
    let raw = rgb(20, 30, |x, y| [(x * 7) as u8, (y * 11) as u8, (x + y) as u8]);
    let f = preprocess_frame(&raw, 0.0, 20, 30).unwrap();
    assert_eq!(f, Image::from_rgb8(&raw));
}

#[test]
fn constant_image_survives_crop_and_resize() {
    let raw = rgb(8, 8, |_, _| [128, 128, 128]);
    let f = preprocess_frame(&raw, 0.5, 4, 8).unwrap();
    assert_eq!((f.height(), f.width()), (4, 8));
    assert!(f.data().iter().all(|&v| v == 128.0 / 255.0));
}

#[test]
fn preprocess_rejects_bad_input() {
    let raw = rgb(8, 8, |_, _| [0, 0, 0]);
    assert!(matches!(preprocess_frame(&raw, 1.0, 4, 8), Err(Error::Argument(_))));
    assert!(matches!(preprocess_frame(&rgb(1, 8, |_, _| [0; 3]), 0.0, 1, 8), Err(Error::Argument(_))));
    assert!(matches!(decode_image(b"not an image"), Err(Error::Format(_))));
}

fn write_small_dataset(root: &std::path::Path) {
    let spec = scene("seq00", 32, 64, 6, 1, vec![sprite("a", 10, 8, 20, 5, 3, 1)]);
    write_scene(&render(&spec), root).unwrap();
}

#[test]
fn load_sequence_contract() {
    let dir = tempfile::tempdir().unwrap();
    write_small_dataset(dir.path());
    let s = load_sequence(dir.path(), "seq00", 3, 4).unwrap();
    let idx: Vec<usize> = s.frames.iter().map(|f| f.timestamp_index).collect();
    assert_eq!(idx, vec![0, 1, 2, 3]);
    assert_eq!(s.flows.len(), 4);
    assert!(s.target().is_some());

    assert!(matches!(load_sequence(dir.path(), "seq00", 2, 4), Err(Error::Argument(_))));
    assert!(matches!(load_sequence(dir.path(), "seq00", 9, 4), Err(Error::NotFound(_))));

    fs::remove_file(image_path(dir.path(), "seq00", 2)).unwrap();
    match load_sequence(dir.path(), "seq00", 4, 4) {
        Err(Error::Integrity(msg)) => assert!(msg.contains("frame 2"), "{msg}"),
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn dataset_index_windows() {
    let dir = tempfile::tempdir().unwrap();
    write_small_dataset(dir.path());
    let index = DatasetIndex::scan(dir.path()).unwrap();
    assert_eq!(index.sequences, vec![("seq00".to_string(), 6)]);
    assert_eq!(index.windows(4).len(), 3);
    let all = index.load_windows(4, &LoadOptions::default()).unwrap();
    assert_eq!(all.iter().map(|s| s.end_index).collect::<Vec<_>>(), vec![3, 4, 5]);
}

#[test]
fn stats_hand_counts() {
    let m = MotionMask::new(2, 2, vec![0, 0, 1, 255]).unwrap();
    let one = compute_stats([&sample_with_target(m.clone())]).unwrap();
    assert_eq!(one.pixel_count_per_class, [2, 1]);
    let s = sample_with_target(m);
    let two = compute_stats([&s, &s]).unwrap();
    assert_eq!(two.pixel_count_per_class, [4, 2]);
    assert_eq!(two.num_samples, 2);
    assert!(matches!(compute_stats(std::iter::empty::<&SequenceSample>()), Err(Error::Argument(_))));
}

#[test]
fn stats_match_brute_force_tally() {
    let mut r = common::rng(5);
    let samples: Vec<SequenceSample> = (0..100)
        .map(|_| {
            let labels = (0..6 * 9).map(|_| [0u8, 1, 255][r.gen_range(0..3)]).collect();
            sample_with_target(MotionMask::new(6, 9, labels).unwrap())
        })
        .collect();
    let stats = compute_stats(&samples).unwrap();
    let mut tally = [0u64; 2];
    for s in &samples {
        let m = s.target().unwrap();
        for y in 0..m.height() {
            for x in 0..m.width() {
                match m.get(y, x) {
                    0 => tally[0] += 1,
                    1 => tally[1] += 1,
                    _ => {}
                }
            }
        }
    }
    assert_eq!(stats.pixel_count_per_class, tally);
}

#[test]
fn invalid_mask_labels_rejected() {
    assert!(matches!(MotionMask::new(1, 2, vec![0, 2]), Err(Error::Format(_))));
}

#[test]
fn in_memory_windows_validate() {
    let data = render(&scene("w", 32, 64, 5, 2, vec![sprite("a", 8, 8, 10, 4, 4, 2)]));
    window(&data, 4, 4).validate().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn files_round_trip_bit_identical(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut r = common::rng(seed);
        let raw = rgb(h as u32, w as u32, |_, _| [r.gen(), r.gen(), r.gen()]);
        let img = Image::from_rgb8(&raw);
        let p = dir.path().join("i.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        back.save_png(&p).unwrap();
        prop_assert_eq!(&Image::load_png(&p).unwrap(), &img);

        let labels = (0..h * w).map(|_| [0u8, 1, 255][r.gen_range(0..3)]).collect();
        let m = MotionMask::new(h, w, labels).unwrap();
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        prop_assert_eq!(&MotionMask::load_png(&p).unwrap(), &m);

        let f = FlowField::from_fn(h, w, |_, _| (r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0)));
        let p = dir.path().join("f.flo");
        f.save(&p).unwrap();
        let back = FlowField::load(&p).unwrap();
        prop_assert_eq!(back.to_bytes(), f.to_bytes());
    }

    #[test]
    fn stats_additive_over_partitions(n in 1usize..20, split in 0usize..20, seed in any::<u64>()) {
        let split = split.min(n);
        let mut r = common::rng(seed);
        let samples: Vec<SequenceSample> = (0..n)
            .map(|_| {
                let labels = (0..12).map(|_| [0u8, 1, 255][r.gen_range(0..3)]).collect();
                sample_with_target(MotionMask::new(3, 4, labels).unwrap())
            })
            .collect();
        let whole = compute_stats(&samples).unwrap();
        let (a, b) = samples.split_at(split);
        let merged = match (compute_stats(a), compute_stats(b)) {
            (Ok(x), Ok(y)) => x.merge(&y),
            (Ok(x), Err(_)) | (Err(_), Ok(x)) => x,
            _ => unreachable!(),
        };
        prop_assert_eq!(whole, merged);
    }

    #[test]
    fn preprocess_stays_in_unit_range(h in 2u32..40, w in 1u32..40, frac in 0.0f64..0.9, oh in 1usize..30, ow in 1usize..30, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let raw = rgb(h, w, |_, _| [r.gen(), r.gen(), r.gen()]);
        if let Ok(f) = preprocess_frame(&raw, frac, oh, ow) {
            prop_assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!((f.height(), f.width()), (oh, ow));
        }
    }
}
