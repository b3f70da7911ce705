mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use common::{render, scene, sprite};
use motseg_core::annotation::{generate_masks, MotionState, SceneRecord};
use motseg_core::datamodel::{compute_stats, mask_path, DatasetIndex, LoadOptions, MotionMask};
use motseg_core::synth::{generate_dataset, generate_scene, scene_record_path, write_scene, DatasetSpec, SceneOutcome, SceneSpec};
use proptest::prelude::*;

/// Surface id per pixel (-1 background), painter's order, from the sprite
/// paths alone.
fn surfaces(spec: &SceneSpec, t: usize) -> Vec<i32> {
    let (h, w) = (spec.height as i64, spec.width as i64);
    let mut out = vec![-1; (h * w) as usize];
    for (i, s) in spec.objects.iter().enumerate() {
        let x0 = s.x0 + (s.velocity[0] - spec.ego_px_per_frame) * t as i64;
        let y0 = s.y0 + s.velocity[1] * t as i64;
        for y in 0..h {
            for x in 0..w {
                if x >= x0 && x < x0 + s.width as i64 && y >= y0 && y < y0 + s.height as i64 {
                    out[(y * w + x) as usize] = i as i32;
                }
            }
        }
    }
    out
}

#[test]
fn static_sprite_under_pan_has_flow_but_no_mask() {
    let spec = scene("pan", 32, 64, 5, 2, vec![sprite("still", 10, 8, 30, 10, 0, 3)]);
    let data = render(&spec);
    for t in 1..5 {
        let surf = surfaces(&spec, t);
        for y in 0..32 {
            for x in 0..64 {
                if surf[y * 64 + x] == 0 {
                    assert_eq!(data.flows[t].get(y, x), (-2.0, 0.0));
                }
            }
        }
    }
    assert!(data.masks.iter().all(|m| m.labels().iter().all(|&l| l == 0)));
    assert_eq!(data.flows[0], motseg_core::flow::FlowField::zeros(32, 64));
}

#[test]
fn mover_without_ego_motion() {
    let spec = scene("mv", 32, 64, 5, 0, vec![sprite("m", 9, 7, 5, 12, 3, 4)]);
    let data = render(&spec);
    for t in 0..5 {
        let surf = surfaces(&spec, t);
        for y in 0..32 {
            for x in 0..64 {
                let on = surf[y * 64 + x] == 0;
                assert_eq!(data.masks[t].get(y, x), on as u8, "t={t} ({y},{x})");
                if t > 0 {
                    assert_eq!(data.flows[t].get(y, x), if on { (3.0, 0.0) } else { (0.0, 0.0) });
                }
            }
        }
    }
}

#[test]
fn annotation_pipeline_reproduces_generator_masks() {
    let spec = DatasetSpec { num_sequences: 4, num_frames: 6, height: 64, width: 160, ..DatasetSpec::default() };
    let (data_root, ann_root) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let summary = generate_dataset(&spec, 21, data_root.path()).unwrap();
    for id in &summary.sequences {
        let rec = SceneRecord::load(&scene_record_path(data_root.path(), id)).unwrap();
        assert_eq!(generate_masks(&rec, ann_root.path()).unwrap(), 6);
        for t in 0..6 {
            let a = MotionMask::load_png(&mask_path(data_root.path(), id, t)).unwrap();
            let b = MotionMask::load_png(&mask_path(ann_root.path(), id, t)).unwrap();
            assert_eq!(a, b, "{id} frame {t}");
        }
    }
}

fn warp_error(spec: &SceneSpec) -> f32 {
    let data = render(spec);
    let (h, w) = (spec.height, spec.width);
    let mut worst = 0.0f32;
    for t in 1..spec.num_frames {
        let (prev, cur) = (surfaces(spec, t - 1), surfaces(spec, t));
        for y in 0..h {
            for x in 0..w {
                let (u, v) = data.flows[t].get(y, x);
                let (sx, sy) = (x as i64 - u as i64, y as i64 - v as i64);
                if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                    continue;
                }
                let (sx, sy) = (sx as usize, sy as usize);
                if prev[sy * w + sx] != cur[y * w + x] {
                    continue;
                }
                let (a, b) = (data.frames[t].pixel(y, x), data.frames[t - 1].pixel(sy, sx));
                for c in 0..3 {
                    worst = worst.max((a[c] - b[c]).abs());
                }
            }
        }
    }
    worst
}

#[test]
fn dataset_generation_is_deterministic() {
    let spec = DatasetSpec { num_sequences: 3, num_frames: 5, height: 32, width: 64, sprite_width: [6, 12], sprite_height: [5, 10], ..DatasetSpec::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&spec, 8, a.path()).unwrap();
    generate_dataset(&spec, 8, b.path()).unwrap();
    let stats = |root: &Path| {
        let idx = DatasetIndex::scan(root).unwrap();
        compute_stats(&idx.load_windows(1, &LoadOptions::default()).unwrap()).unwrap()
    };
    assert_eq!(stats(a.path()), stats(b.path()));
    let files = |root: &Path| {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    };
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn every_scene_has_static_and_moving_objects() {
    let spec = DatasetSpec { num_sequences: 12, num_frames: 6, height: 64, width: 160, ..DatasetSpec::default() };
    for i in 0..spec.num_sequences {
        let s = spec.sample_scene(5, i, 0);
        let SceneOutcome::Rendered(data) = generate_scene(&s).unwrap() else { continue };
        let mut states = BTreeSet::new();
        for t in 0..s.num_frames {
            for l in data.record.labels_at(t).unwrap() {
                states.insert(match l.state {
                    MotionState::Moving => 1,
                    MotionState::Static => 0,
                });
            }
        }
        assert_eq!(states.len(), 2, "scene {i}");
    }
}

#[test]
fn object_that_never_appears_skips_scene() {
    let spec = scene("gone", 32, 64, 4, 0, vec![sprite("far", 8, 8, 500, 4, 0, 1)]);
    assert!(matches!(generate_scene(&spec).unwrap(), SceneOutcome::Skipped(_)));
}

#[test]
fn written_scene_round_trips() {
    let spec = scene("rt", 32, 64, 3, 1, vec![sprite("a", 8, 8, 10, 4, 3, 1)]);
    let data = render(&spec);
    let dir = tempfile::tempdir().unwrap();
    write_scene(&data, dir.path()).unwrap();
    let rec = SceneRecord::load(&scene_record_path(dir.path(), "rt")).unwrap();
    assert_eq!(rec, data.record);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn warping_reconstructs_next_frame(
        ego in 0i64..4, vx in -5i64..6, vy in -2i64..3, x0 in 0i64..50, y0 in 0i64..20, vx2 in -4i64..5, seed in 0u64..1000,
    ) {
        let mut spec = scene("w", 32, 64, 4, ego, vec![sprite("a", 12, 8, x0, y0, vx, seed), sprite("b", 8, 6, 30, 12, vx2, seed + 1)]);
        spec.objects[0].velocity[1] = vy;
        spec.texture_seed = seed;
        prop_assume!(matches!(generate_scene(&spec).unwrap(), SceneOutcome::Rendered(_)));
        prop_assert!(warp_error(&spec) < 2.0 / 255.0);
    }
}
