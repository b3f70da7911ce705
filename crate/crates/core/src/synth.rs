//! Synthetic sequences with exact ground truth.
//!
//! A side-looking camera on a forward-moving car sees a textured plane at
//! fixed depth, so the ego motion is a pure horizontal pan. Objects are
//! textured rectangles on the same plane. All displacements are integer
//! pixels per frame, which makes the rendered frames exact warps of one
//! another and lets the exact flow, masks and 3-D box records agree to the
//! pixel.
//!
//! Besides the exact flow (`flow/`), every sequence carries a degraded flow
//! (`flow_est/`) that imitates a real estimator: object flow that drops out
//! for single frames, spurious blobs, and per-pixel noise.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use motseg_autograd::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{
    classify_motion, BoxRecord, Box3D, Calibration, EgoPose, MotionState, SceneRecord, Thresholds,
};
use crate::datamodel::{
    estimated_flow_path, flow_path, image_path, mask_path, Image, MotionMask, DESK_HEIGHT, DESK_WIDTH, MOVING,
};
use crate::error::{Error, IoContext, Result};
use crate::flow::FlowField;

/// Depth extent of the thin boxes written to scene records, meters.
const BOX_DEPTH: f64 = 0.01;
const CLASS_NAMES: [&str; 3] = ["car", "pedestrian", "cyclist"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub focal: f64,
    /// Distance of the scene plane, meters.
    pub depth: f64,
    pub frame_interval: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self { focal: 100.0, depth: 10.0, frame_interval: 0.1 }
    }
}

impl CameraSpec {
    pub fn meters_per_pixel(&self) -> f64 {
        self.depth / self.focal
    }

    /// Converts an image-plane speed in px/frame to m/s on the scene plane.
    pub fn speed_mps(&self, px_per_frame: f64) -> f64 {
        px_per_frame * self.meters_per_pixel() / self.frame_interval
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub object_id: String,
    pub class_name: String,
    pub width: usize,
    pub height: usize,
    /// Top-left corner at frame 0 in image pixels.
    pub x0: i64,
    pub y0: i64,
    /// Own motion relative to the world in px/frame, `(vx, vy)`.
    pub velocity: [i64; 2],
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowNoise {
    /// Per-frame probability that a moving object's flow is replaced by the
    /// background flow.
    pub dropout: f64,
    /// Per-frame probability of one spurious flow blob.
    pub spurious: f64,
    /// Standard deviation of per-pixel Gaussian noise, px/frame.
    pub sigma: f64,
}

impl Default for FlowNoise {
    fn default() -> Self {
        Self { dropout: 0.3, spurious: 0.3, sigma: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub sequence_id: String,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub texture_seed: u64,
    pub noise_seed: u64,
    /// Horizontal pan of the background, px/frame; the car drives toward +x.
    pub ego_px_per_frame: i64,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub objects: Vec<SpriteSpec>,
    #[serde(default)]
    pub flow_noise: FlowNoise,
    #[serde(default)]
    pub ignore_disocclusions: bool,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl SceneSpec {
    pub fn ego_speed_mps(&self) -> f64 {
        self.camera.speed_mps(self.ego_px_per_frame as f64)
    }

    pub fn object_speed_mps(&self, s: &SpriteSpec) -> f64 {
        let [vx, vy] = s.velocity;
        self.camera.speed_mps(((vx * vx + vy * vy) as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.num_frames == 0 {
            return Err(Error::Argument("scene needs non-zero resolution and frame count".into()));
        }
        if !(self.camera.focal > 0.0 && self.camera.depth > 0.0 && self.camera.frame_interval > 0.0) {
            return Err(Error::Argument("camera focal, depth and frame interval must be positive".into()));
        }
        for s in &self.objects {
            if s.width == 0 || s.height == 0 {
                return Err(Error::Argument(format!("object {} has zero size", s.object_id)));
            }
        }
        let n = &self.flow_noise;
        if !(0.0..=1.0).contains(&n.dropout) || !(0.0..=1.0).contains(&n.spurious) || !(n.sigma >= 0.0) {
            return Err(Error::Argument("flow noise probabilities must be in [0, 1] and sigma >= 0".into()));
        }
        Ok(())
    }

    /// Top-left corner of an object in frame `t`.
    pub fn position(&self, s: &SpriteSpec, t: usize) -> (i64, i64) {
        let t = t as i64;
        (s.x0 + (s.velocity[0] - self.ego_px_per_frame) * t, s.y0 + s.velocity[1] * t)
    }

    /// Image displacement of an object between consecutive frames.
    pub fn image_velocity(&self, s: &SpriteSpec) -> (i64, i64) {
        (s.velocity[0] - self.ego_px_per_frame, s.velocity[1])
    }

    pub fn is_moving(&self, s: &SpriteSpec) -> Result<bool> {
        Ok(classify_motion(self.object_speed_mps(s), &s.class_name, &self.thresholds)? == MotionState::Moving)
    }

    fn visible(&self, s: &SpriteSpec, t: usize) -> bool {
        let (x, y) = self.position(s, t);
        x < self.width as i64 && x + s.width as i64 > 0 && y < self.height as i64 && y + s.height as i64 > 0
    }
}

/// Rendered sequence held in memory.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub frames: Vec<Image>,
    /// Exact flow; entry 0 is a zero field.
    pub flows: Vec<FlowField>,
    pub estimated_flows: Vec<FlowField>,
    pub masks: Vec<MotionMask>,
    pub record: SceneRecord,
}

#[derive(Clone, Debug)]
pub enum SceneOutcome {
    Rendered(Box<SceneData>),
    /// An object never enters the view; nothing was rendered.
    Skipped(String),
}

struct Texture {
    // (amplitude, fy, fx, phase) per channel
    waves: Vec<[(f64, f64, f64, f64); 3]>,
    base: [f64; 3],
    stripe: Option<(usize, bool)>,
    accent: [f64; 3],
}

impl Texture {
    fn background(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..4)
            .map(|_| {
                let mut w = [(0.0, 0.0, 0.0, 0.0); 3];
                let fy = rng.gen_range(0.02..0.25);
                let fx = rng.gen_range(0.02..0.25);
                for c in w.iter_mut() {
                    *c = (rng.gen_range(0.02..0.08), fy, fx, rng.gen_range(0.0..std::f64::consts::TAU));
                }
                w
            })
            .collect();
        let g = rng.gen_range(0.35..0.55);
        let base = [g + rng.gen_range(-0.05..0.05), g + rng.gen_range(-0.05..0.05), g + rng.gen_range(-0.05..0.05)];
        Self { waves, base, stripe: None, accent: base }
    }

    fn sprite(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)];
        let accent = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let stripe = Some((rng.gen_range(2..6), rng.gen_bool(0.5)));
        let waves = (0..2)
            .map(|_| {
                let mut w = [(0.0, 0.0, 0.0, 0.0); 3];
                let fy = rng.gen_range(0.1..0.6);
                let fx = rng.gen_range(0.1..0.6);
                for c in w.iter_mut() {
                    *c = (rng.gen_range(0.02..0.06), fy, fx, rng.gen_range(0.0..std::f64::consts::TAU));
                }
                w
            })
            .collect();
        Self { waves, base, stripe, accent }
    }

    fn color(&self, y: i64, x: i64) -> [f32; 3] {
        let mut base = self.base;
        if let Some((period, checker)) = self.stripe {
            let p = period as i64;
            let on = if checker { (y.div_euclid(p) + x.div_euclid(p)) % 2 == 0 } else { x.div_euclid(p) % 2 == 0 };
            if on {
                base = self.accent;
            }
        }
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let mut v = base[c];
            for w in &self.waves {
                let (a, fy, fx, ph) = w[c];
                v += a * (fy * y as f64 + fx * x as f64 + ph).sin();
            }
            out[c] = v.clamp(0.0, 1.0) as f32;
        }
        out
    }
}

/// Index of the surface visible at each pixel: `-1` for background,
/// otherwise the object index (later objects are drawn on top).
fn surface_map(spec: &SceneSpec, t: usize) -> Vec<i32> {
    let (h, w) = (spec.height as i64, spec.width as i64);
    let mut map = vec![-1i32; (h * w) as usize];
    for (i, s) in spec.objects.iter().enumerate() {
        let (x0, y0) = spec.position(s, t);
        for y in y0.max(0)..(y0 + s.height as i64).min(h) {
            for x in x0.max(0)..(x0 + s.width as i64).min(w) {
                map[(y * w + x) as usize] = i as i32;
            }
        }
    }
    map
}

fn render(spec: &SceneSpec, t: usize, map: &[i32], bg: &Texture, sprites: &[Texture]) -> Image {
    let w = spec.width;
    let pan = spec.ego_px_per_frame * t as i64;
    let mut img = Image::filled(spec.height, w, [0.0; 3]);
    for y in 0..spec.height {
        for x in 0..w {
            let c = match map[y * w + x] {
                -1 => bg.color(y as i64, x as i64 + pan),
                i => {
                    let s = &spec.objects[i as usize];
                    let (x0, y0) = spec.position(s, t);
                    sprites[i as usize].color(y as i64 - y0, x as i64 - x0)
                }
            };
            img.set_pixel(y, x, c);
        }
    }
    img
}

fn surface_flow(spec: &SceneSpec, id: i32) -> (f32, f32) {
    if id < 0 {
        (-spec.ego_px_per_frame as f32, 0.0)
    } else {
        let (u, v) = spec.image_velocity(&spec.objects[id as usize]);
        (u as f32, v as f32)
    }
}

/// Calibration of the side camera: sensor x (driving direction) maps to
/// image right, sensor y (left of the car) is the viewing direction and
/// sensor z points up.
pub fn side_camera(spec: &SceneSpec) -> Calibration {
    let f = spec.camera.focal;
    Calibration {
        intrinsics: [[f, 0.0, spec.width as f64 / 2.0], [0.0, f, spec.height as f64 / 2.0], [0.0, 0.0, 1.0]],
        extrinsics: [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    }
}

/// Ego poses and one thin box per object and frame, consistent with the
/// rendered images.
pub fn scene_record(spec: &SceneSpec) -> SceneRecord {
    let m = spec.camera.meters_per_pixel();
    let (cx, cy) = (spec.width as f64 / 2.0, spec.height as f64 / 2.0);
    let ego = (0..spec.num_frames)
        .map(|t| EgoPose {
            position: [(spec.ego_px_per_frame * t as i64) as f64 * m, 0.0, 0.0],
            heading: 0.0,
            speed: spec.ego_speed_mps(),
            timestamp_index: t,
        })
        .collect();
    let mut boxes = Vec::new();
    for t in 0..spec.num_frames {
        for s in &spec.objects {
            let (x, y) = spec.position(s, t);
            let center = [
                (x as f64 + s.width as f64 / 2.0 - cx) * m,
                spec.camera.depth + BOX_DEPTH / 2.0,
                -(y as f64 + s.height as f64 / 2.0 - cy) * m,
            ];
            boxes.push(BoxRecord {
                timestamp: t,
                bbox: Box3D {
                    center,
                    size: [s.width as f64 * m, BOX_DEPTH, s.height as f64 * m],
                    yaw: 0.0,
                    object_id: s.object_id.clone(),
                    class_name: s.class_name.clone(),
                },
            });
        }
    }
    SceneRecord {
        sequence_id: spec.sequence_id.clone(),
        height: spec.height,
        width: spec.width,
        num_frames: spec.num_frames,
        frame_interval: spec.camera.frame_interval,
        calibration: side_camera(spec),
        thresholds: spec.thresholds.clone(),
        ego,
        boxes,
    }
}

/// Renders frames, exact and estimated flow, and amodal motion masks.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneOutcome> {
    spec.validate()?;
    for s in &spec.objects {
        if !(0..spec.num_frames).any(|t| spec.visible(s, t)) {
            let msg = format!("{}: object {} never enters the view", spec.sequence_id, s.object_id);
            warn!("{msg}; sample skipped");
            return Ok(SceneOutcome::Skipped(msg));
        }
    }
    let moving: Vec<bool> = spec.objects.iter().map(|s| spec.is_moving(s)).collect::<Result<_>>()?;
    let bg = Texture::background(spec.texture_seed);
    let sprites: Vec<Texture> = spec.objects.iter().map(|s| Texture::sprite(s.texture_seed)).collect();
    let (h, w) = (spec.height, spec.width);
    let maps: Vec<Vec<i32>> = (0..spec.num_frames).map(|t| surface_map(spec, t)).collect();

    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut flows = Vec::with_capacity(spec.num_frames);
    let mut estimated = Vec::with_capacity(spec.num_frames);
    let mut masks = Vec::with_capacity(spec.num_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    for t in 0..spec.num_frames {
        let map = &maps[t];
        frames.push(render(spec, t, map, &bg, &sprites));

        let flow = if t == 0 {
            FlowField::zeros(h, w)
        } else {
            FlowField::from_fn(h, w, |y, x| surface_flow(spec, map[y * w + x]))
        };

        let mut mask = MotionMask::zeros(h, w);
        for (i, s) in spec.objects.iter().enumerate() {
            if !moving[i] {
                continue;
            }
            let (x0, y0) = spec.position(s, t);
            for y in y0.max(0)..(y0 + s.height as i64).min(h as i64) {
                for x in x0.max(0)..(x0 + s.width as i64).min(w as i64) {
                    mask.set(y as usize, x as usize, MOVING);
                }
            }
        }
        if spec.ignore_disocclusions && t > 0 {
            let prev = &maps[t - 1];
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = flow.get(y, x);
                    let sx = x as i64 - u as i64;
                    let sy = y as i64 - v as i64;
                    if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                        continue;
                    }
                    if prev[sy as usize * w + sx as usize] != map[y * w + x] {
                        mask.set(y, x, motseg_autograd::IGNORE_LABEL);
                    }
                }
            }
        }

        estimated.push(if t == 0 { FlowField::zeros(h, w) } else { degrade_flow(spec, &flow, map, &mut rng) });
        flows.push(flow);
        masks.push(mask);
    }
    Ok(SceneOutcome::Rendered(Box::new(SceneData {
        frames,
        flows,
        estimated_flows: estimated,
        masks,
        record: scene_record(spec),
    })))
}

fn degrade_flow(spec: &SceneSpec, exact: &FlowField, map: &[i32], rng: &mut ChaCha8Rng) -> FlowField {
    let (h, w) = (spec.height, spec.width);
    let noise = &spec.flow_noise;
    let dropped: Vec<bool> = spec
        .objects
        .iter()
        .map(|s| s.velocity != [0, 0] && rng.gen_bool(noise.dropout))
        .collect();
    let blob = if rng.gen_bool(noise.spurious) {
        let bw = rng.gen_range(8..=24i64);
        let bh = rng.gen_range(6..=16i64);
        let bx = rng.gen_range(-bw / 2..w as i64 - bw / 2);
        let by = rng.gen_range(-bh / 2..h as i64 - bh / 2);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let mag = rng.gen_range(2.0..6.0);
        Some((bx, by, bw, bh, (mag * angle.cos()) as f32, (mag * angle.sin()) as f32))
    } else {
        None
    };
    let bg = surface_flow(spec, -1);
    let normal = Normal::new(0.0, noise.sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut out = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let id = map[y * w + x];
            let (mut u, mut v) = if id >= 0 && dropped[id as usize] { bg } else { exact.get(y, x) };
            if let Some((bx, by, bw, bh, bu, bv)) = blob {
                let (xi, yi) = (x as i64, y as i64);
                if xi >= bx && xi < bx + bw && yi >= by && yi < by + bh {
                    u = bu;
                    v = bv;
                }
            }
            if noise.sigma > 0.0 {
                u += normal.sample(rng) as f32;
                v += normal.sample(rng) as f32;
            }
            out.set(y, x, u, v);
        }
    }
    out
}

/// Writes a rendered sequence into the dataset layout under `root`.
pub fn write_scene(data: &SceneData, root: &Path) -> Result<()> {
    let id = &data.record.sequence_id;
    for sub in ["image", "flow", "flow_est", "mask"] {
        let dir = root.join(id).join(sub);
        fs::create_dir_all(&dir).at(&dir)?;
    }
    for t in 0..data.frames.len() {
        data.frames[t].save_png(&image_path(root, id, t))?;
        data.flows[t].save(&flow_path(root, id, t))?;
        data.estimated_flows[t].save(&estimated_flow_path(root, id, t))?;
        data.masks[t].save_png(&mask_path(root, id, t))?;
    }
    data.record.save(&scene_record_path(root, id))
}

pub fn scene_record_path(root: &Path, sequence_id: &str) -> PathBuf {
    root.join(sequence_id).join("scene.toml")
}

/// Parameters of the random scene sampler. Ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_sequences: usize,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub ego_speed: [i64; 2],
    pub static_objects: [usize; 2],
    pub moving_objects: [usize; 2],
    /// Horizontal own speed of moving objects, px/frame, either direction.
    pub moving_speed: [i64; 2],
    pub sprite_width: [usize; 2],
    pub sprite_height: [usize; 2],
    pub camera: CameraSpec,
    pub flow_noise: FlowNoise,
    pub ignore_disocclusions: bool,
    pub sequence_prefix: String,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_sequences: 43,
            num_frames: 10,
            height: DESK_HEIGHT,
            width: DESK_WIDTH,
            ego_speed: [1, 3],
            static_objects: [1, 3],
            moving_objects: [1, 2],
            moving_speed: [2, 5],
            sprite_width: [12, 28],
            sprite_height: [10, 22],
            camera: CameraSpec::default(),
            flow_noise: FlowNoise::default(),
            ignore_disocclusions: false,
            sequence_prefix: "seq".into(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |a: [i64; 2]| a[0] <= a[1];
        if self.num_sequences == 0 || self.num_frames == 0 {
            return Err(Error::Argument("dataset needs at least one sequence and one frame".into()));
        }
        if !ordered(self.ego_speed) || !ordered(self.moving_speed) || self.moving_speed[0] < 1 {
            return Err(Error::Argument("speed ranges must be ordered and moving speeds at least 1".into()));
        }
        for r in [self.static_objects, self.moving_objects, self.sprite_width, self.sprite_height] {
            if r[0] > r[1] {
                return Err(Error::Argument(format!("range {r:?} is not ordered")));
            }
        }
        if self.sprite_width[0] == 0 || self.sprite_height[0] == 0 {
            return Err(Error::Argument("sprite sizes must be positive".into()));
        }
        if self.sprite_height[1] > self.height || self.sprite_width[1] > self.width {
            return Err(Error::Argument("sprites must fit inside the image".into()));
        }
        Ok(())
    }

    /// Random scene number `index`; deterministic in `(seed, index)`.
    pub fn sample_scene(&self, seed: u64, index: usize, attempt: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((index as u64) << 20) ^ (attempt << 48));
        let ego = rng.gen_range(self.ego_speed[0]..=self.ego_speed[1]);
        let n_static = rng.gen_range(self.static_objects[0]..=self.static_objects[1]);
        let n_moving = rng.gen_range(self.moving_objects[0]..=self.moving_objects[1]);
        let mid = (self.num_frames / 2) as i64;
        let mut objects = Vec::with_capacity(n_static + n_moving);
        for k in 0..n_static + n_moving {
            let moving = k >= n_static;
            let w = rng.gen_range(self.sprite_width[0]..=self.sprite_width[1]);
            let h = rng.gen_range(self.sprite_height[0]..=self.sprite_height[1]);
            let vx = if moving {
                let s = rng.gen_range(self.moving_speed[0]..=self.moving_speed[1]);
                if rng.gen_bool(0.5) {
                    s
                } else {
                    -s
                }
            } else {
                0
            };
            let x_mid = rng.gen_range(-(w as i64) / 2..=self.width as i64 - w as i64 / 2);
            let y0 = rng.gen_range(0..=(self.height - h) as i64);
            objects.push(SpriteSpec {
                object_id: format!("obj{k}"),
                class_name: CLASS_NAMES[rng.gen_range(0..CLASS_NAMES.len())].into(),
                width: w,
                height: h,
                x0: x_mid - (vx - ego) * mid,
                y0,
                velocity: [vx, 0],
                texture_seed: rng.gen(),
            });
        }
        // painter's order independent of motion state
        for i in (1..objects.len()).rev() {
            let j = rng.gen_range(0..=i);
            objects.swap(i, j);
        }
        SceneSpec {
            sequence_id: format!("{}{index:03}", self.sequence_prefix),
            height: self.height,
            width: self.width,
            num_frames: self.num_frames,
            texture_seed: rng.gen(),
            noise_seed: rng.gen(),
            ego_px_per_frame: ego,
            camera: self.camera.clone(),
            objects,
            flow_noise: self.flow_noise.clone(),
            ignore_disocclusions: self.ignore_disocclusions,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub seed: u64,
    pub sequences: Vec<String>,
    pub spec: DatasetSpec,
}

const MAX_ATTEMPTS: u64 = 16;

/// Samples, renders and writes `spec.num_sequences` scenes under `root`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64, root: &Path) -> Result<DatasetSummary> {
    spec.validate()?;
    fs::create_dir_all(root).at(root)?;
    let results = par::map_range(spec.num_sequences, |i| -> Result<String> {
        for attempt in 0..MAX_ATTEMPTS {
            let scene = spec.sample_scene(seed, i, attempt);
            if let SceneOutcome::Rendered(data) = generate_scene(&scene)? {
                write_scene(&data, root)?;
                return Ok(scene.sequence_id);
            }
        }
        Err(Error::Argument(format!("could not sample a visible scene for sequence {i}")))
    });
    let sequences = results.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = DatasetSummary { seed, sequences, spec: spec.clone() };
    let path = root.join("dataset.toml");
    let text = toml::to_string(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).at(&path)?;
    Ok(summary)
}
