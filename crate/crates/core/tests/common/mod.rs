#![allow(dead_code)]

use motseg_core::autograd::Tensor;
use motseg_core::datamodel::{Frame, SequenceSample};
use motseg_core::synth::{CameraSpec, FlowNoise, SceneData, SceneOutcome, SceneSpec, SpriteSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn sprite(id: &str, w: usize, h: usize, x0: i64, y0: i64, vx: i64, seed: u64) -> SpriteSpec {
    SpriteSpec {
        object_id: id.into(),
        class_name: "car".into(),
        width: w,
        height: h,
        x0,
        y0,
        velocity: [vx, 0],
        texture_seed: seed,
    }
}

pub fn scene(id: &str, h: usize, w: usize, frames: usize, ego: i64, objects: Vec<SpriteSpec>) -> SceneSpec {
    SceneSpec {
        sequence_id: id.into(),
        height: h,
        width: w,
        num_frames: frames,
        texture_seed: 11,
        noise_seed: 12,
        ego_px_per_frame: ego,
        camera: CameraSpec::default(),
        objects,
        flow_noise: FlowNoise::default(),
        ignore_disocclusions: false,
        thresholds: Default::default(),
    }
}

pub fn render(spec: &SceneSpec) -> SceneData {
    match motseg_core::synth::generate_scene(spec).unwrap() {
        SceneOutcome::Rendered(d) => *d,
        SceneOutcome::Skipped(why) => panic!("scene skipped: {why}"),
    }
}

/// In-memory window ending at `end` of length `t`, using exact flow.
pub fn window(data: &SceneData, end: usize, t: usize) -> SequenceSample {
    let id = data.record.sequence_id.clone();
    let start = end + 1 - t;
    let flows = data.flows[start..=end].to_vec();
    SequenceSample {
        sequence_id: id.clone(),
        end_index: end,
        frames: (start..=end)
            .map(|k| Frame { image: data.frames[k].clone(), timestamp_index: k, sequence_id: id.clone() })
            .collect(),
        flows,
        masks: (start..=end).map(|k| Some(data.masks[k].clone())).collect(),
    }
}
