use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use motseg_core::autograd::par;
use motseg_core::network::{NetInput, Network, NetworkConfig, Preset, Variant};
use motseg_core::synth::{generate_scene, CameraSpec, FlowNoise, SceneOutcome, SceneSpec, SpriteSpec};

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10).measurement_time(Duration::from_secs(5));
    for variant in [Variant::RgbFlow, Variant::MultiLstm] {
        let net = Network::new(NetworkConfig::new(variant, Preset::Desk), 0).expect("network builds");
        let input = NetInput::zeros(2, net.config.window, 64, 160);
        for (mode, on) in MODES {
            group.bench_with_input(BenchmarkId::new(variant.name(), mode), &on, |b, &on| {
                par::set_enabled(on);
                b.iter(|| net.predict(&input).expect("forward pass"));
            });
        }
    }
    par::set_enabled(true);
    group.finish();
}

fn scene_spec() -> SceneSpec {
    let sprite = |id: &str, x0, vx| SpriteSpec {
        object_id: id.into(),
        class_name: "car".into(),
        width: 24,
        height: 16,
        x0,
        y0: 20,
        velocity: [vx, 0],
        texture_seed: 5,
    };
    SceneSpec {
        sequence_id: "bench".into(),
        height: 64,
        width: 160,
        num_frames: 10,
        texture_seed: 1,
        noise_seed: 2,
        ego_px_per_frame: 2,
        camera: CameraSpec::default(),
        objects: vec![sprite("a", 30, 0), sprite("b", 90, 4)],
        flow_noise: FlowNoise::default(),
        ignore_disocclusions: false,
        thresholds: Default::default(),
    }
}

fn annotation(c: &mut Criterion) {
    let SceneOutcome::Rendered(data) = generate_scene(&scene_spec()).expect("scene renders") else {
        panic!("bench scene skipped");
    };
    let dir = tempfile::tempdir().expect("temp dir");
    let mut group = c.benchmark_group("generate_masks");
    group.sample_size(10);
    for (mode, on) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(mode), &on, |b, &on| {
            par::set_enabled(on);
            b.iter(|| motseg_core::annotation::generate_masks(&data.record, dir.path()).expect("masks written"));
        });
    }
    par::set_enabled(true);
    group.finish();
}

criterion_group!(benches, forward, annotation);
criterion_main!(benches);
