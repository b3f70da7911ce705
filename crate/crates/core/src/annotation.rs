//! Motion-mask generation from 3-D object tracks, camera calibration and
//! ego-vehicle poses.
//!
//! Boxes live in the ego (sensor) frame. Poses place that frame in the
//! world, so object velocities are computed in world coordinates and the
//! vehicle's own motion cancels out. Objects faster than their class
//! threshold are painted into the mask as the filled convex hull of their
//! projected corners.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use motseg_autograd::par;
use serde::{Deserialize, Serialize};

use crate::datamodel::{image_path, mask_path, Image, MotionMask, MOVING};
use crate::error::{Error, IoContext, Result};

pub type Vec3 = [f64; 3];

/// Default moving/static speed threshold in m/s.
pub const DEFAULT_THRESHOLD: f64 = 1.0;
/// KITTI frame interval.
pub const DEFAULT_FRAME_INTERVAL: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// Box center in the sensor frame, meters.
    pub center: Vec3,
    /// `(l, w, h)` along the box's local x, y, z axes.
    pub size: Vec3,
    /// Rotation about the sensor z axis, radians.
    pub yaw: f64,
    pub object_id: String,
    pub class_name: String,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Argument(format!("box {} has non-positive size {:?}", self.object_id, self.size)));
        }
        Ok(())
    }

    /// The eight corners in the sensor frame.
    pub fn corners(&self) -> [Vec3; 8] {
        let (s, c) = self.yaw.sin_cos();
        let [l, w, h] = self.size;
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let dx = if i & 1 == 0 { -l / 2.0 } else { l / 2.0 };
            let dy = if i & 2 == 0 { -w / 2.0 } else { w / 2.0 };
            let dz = if i & 4 == 0 { -h / 2.0 } else { h / 2.0 };
            *corner = [
                self.center[0] + c * dx - s * dy,
                self.center[1] + s * dx + c * dy,
                self.center[2] + dz,
            ];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    /// Sensor origin in the world frame, meters.
    pub position: Vec3,
    /// Rotation of the sensor frame about the world z axis, radians.
    pub heading: f64,
    /// m/s, as reported by GPS.
    pub speed: f64,
    pub timestamp_index: usize,
}

impl EgoPose {
    pub fn to_world(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.heading.sin_cos();
        [
            self.position[0] + c * p[0] - s * p[1],
            self.position[1] + s * p[0] + c * p[1],
            self.position[2] + p[2],
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub intrinsics: [[f64; 3]; 3],
    /// Rigid transform taking sensor-frame points into the camera frame.
    pub extrinsics: [[f64; 4]; 4],
}

impl Calibration {
    /// Pinhole camera with the sensor frame equal to the camera frame.
    pub fn pinhole(focal: f64, cx: f64, cy: f64) -> Self {
        Self {
            intrinsics: [[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]],
            extrinsics: IDENTITY4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            return Err(Error::Argument("intrinsics must be upper triangular".into()));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) || k[2][2] == 0.0 {
            return Err(Error::Argument(format!("intrinsics are singular or have non-positive focal lengths: {k:?}")));
        }
        let e = &self.extrinsics;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|r| e[r][i] * e[r][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::Argument("extrinsic rotation is not orthonormal".into()));
                }
            }
        }
        if e[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Argument("extrinsics must have last row 0 0 0 1".into()));
        }
        Ok(())
    }

    pub fn sensor_to_camera(&self, p: Vec3) -> Vec3 {
        let e = &self.extrinsics;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = e[r][0] * p[0] + e[r][1] * p[1] + e[r][2] * p[2] + e[r][3];
        }
        out
    }

    /// Image coordinates of a camera-frame point in front of the camera.
    pub fn project(&self, p: Vec3) -> (f64, f64) {
        let k = &self.intrinsics;
        let x = k[0][0] * p[0] + k[0][1] * p[1] + k[0][2] * p[2];
        let y = k[1][1] * p[1] + k[1][2] * p[2];
        let z = k[2][2] * p[2];
        (x / z, y / z)
    }
}

pub const IDENTITY4: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MotionState {
    Moving,
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionLabel {
    pub object_id: String,
    pub state: MotionState,
    pub speed_world: f64,
}

/// Per-class speed thresholds with a fallback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    #[serde(default = "default_threshold")]
    pub default: f64,
    #[serde(default)]
    pub per_class: BTreeMap<String, f64>,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { default: DEFAULT_THRESHOLD, per_class: BTreeMap::new() }
    }
}

impl Thresholds {
    pub fn for_class(&self, class_name: &str) -> f64 {
        self.per_class.get(class_name).copied().unwrap_or(self.default)
    }
}

/// Points strictly closer than this to the camera plane count as behind it.
const NEAR_PLANE: f64 = 1e-6;

/// Rasterizes the filled convex hull of the box corners in front of the
/// camera. Pixel `(y, x)` is inside when its center `(x + 0.5, y + 0.5)` is.
pub fn project_box(b: &Box3D, calib: &Calibration, image_h: usize, image_w: usize) -> Result<MotionMask> {
    calib.validate()?;
    b.validate()?;
    let pts: Vec<(f64, f64)> = b
        .corners()
        .iter()
        .map(|&c| calib.sensor_to_camera(c))
        .filter(|c| c[2] > NEAR_PLANE)
        .map(|c| calib.project(c))
        .collect();
    let mut mask = MotionMask::zeros(image_h, image_w);
    let hull = convex_hull(pts);
    if hull.len() < 3 {
        return Ok(mask);
    }
    let (min_x, max_x) = hull.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (min_y, max_y) = hull.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
    let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((max_x - 0.5).floor() + 1.0).clamp(0.0, image_w as f64) as usize;
    let y1 = ((max_y - 0.5).floor() + 1.0).clamp(0.0, image_h as f64) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            if inside_convex(&hull, (x as f64 + 0.5, y as f64 + 0.5)) {
                mask.set(y, x, MOVING);
            }
        }
    }
    Ok(mask)
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise hull (monotone chain), collinear points dropped.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite projections"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

/// World-frame velocity of a tracked object at `t`, from the finite
/// difference of its world positions at `t - 1` and `t` (or `t` and `t + 1`
/// when `t` is the first observation).
pub fn object_world_velocity(
    track: &BTreeMap<usize, Box3D>,
    ego: &BTreeMap<usize, EgoPose>,
    t: usize,
    frame_interval: f64,
) -> Result<Vec3> {
    if track.len() < 2 {
        return Err(Error::InsufficientData(format!("track has {} observation(s), need 2", track.len())));
    }
    if !(frame_interval > 0.0) {
        return Err(Error::Argument(format!("frame interval must be positive, got {frame_interval}")));
    }
    let (a, b) = if t > 0 && track.contains_key(&(t - 1)) && ego.contains_key(&(t - 1)) {
        (t - 1, t)
    } else {
        (t, t + 1)
    };
    let world = |k: usize| -> Result<Vec3> {
        let bx = track
            .get(&k)
            .ok_or_else(|| Error::InsufficientData(format!("track has no box at timestamp {k}")))?;
        let pose = ego
            .get(&k)
            .ok_or_else(|| Error::InsufficientData(format!("no ego pose at timestamp {k}")))?;
        Ok(pose.to_world(bx.center))
    };
    let (pa, pb) = (world(a)?, world(b)?);
    Ok([
        (pb[0] - pa[0]) / frame_interval,
        (pb[1] - pa[1]) / frame_interval,
        (pb[2] - pa[2]) / frame_interval,
    ])
}

/// MOVING iff `speed_world` is strictly above the class threshold.
pub fn classify_motion(speed_world: f64, class_name: &str, thresholds: &Thresholds) -> Result<MotionState> {
    if speed_world < 0.0 || speed_world.is_nan() {
        return Err(Error::Argument(format!("speed must be non-negative, got {speed_world}")));
    }
    Ok(if speed_world > thresholds.for_class(class_name) { MotionState::Moving } else { MotionState::Static })
}

/// One box observation in a scene record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub timestamp: usize,
    #[serde(flatten)]
    pub bbox: Box3D,
}

/// Everything needed to annotate one sequence; stored as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub sequence_id: String,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    #[serde(default = "default_interval")]
    pub frame_interval: f64,
    pub calibration: Calibration,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub ego: Vec<EgoPose>,
    #[serde(default)]
    pub boxes: Vec<BoxRecord>,
}

fn default_interval() -> f64 {
    DEFAULT_FRAME_INTERVAL
}

impl SceneRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let rec: SceneRecord =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        rec.validate()?;
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).at(path)
    }

    /// Checks calibration, box sizes and that every referenced timestamp
    /// has an ego pose.
    pub fn validate(&self) -> Result<()> {
        self.calibration.validate()?;
        let poses = self.ego_by_time();
        for b in &self.boxes {
            b.bbox.validate()?;
            if b.timestamp >= self.num_frames {
                return Err(Error::Integrity(format!(
                    "box {} at timestamp {} beyond {} frames",
                    b.bbox.object_id, b.timestamp, self.num_frames
                )));
            }
            if !poses.contains_key(&b.timestamp) {
                return Err(Error::Integrity(format!("no ego pose for timestamp {}", b.timestamp)));
            }
        }
        Ok(())
    }

    pub fn ego_by_time(&self) -> BTreeMap<usize, EgoPose> {
        self.ego.iter().map(|p| (p.timestamp_index, p.clone())).collect()
    }

    pub fn tracks(&self) -> BTreeMap<String, BTreeMap<usize, Box3D>> {
        let mut tracks: BTreeMap<String, BTreeMap<usize, Box3D>> = BTreeMap::new();
        for b in &self.boxes {
            tracks.entry(b.bbox.object_id.clone()).or_default().insert(b.timestamp, b.bbox.clone());
        }
        tracks
    }

    /// Motion label of every object visible at `t`.
    pub fn labels_at(&self, t: usize) -> Result<Vec<MotionLabel>> {
        let ego = self.ego_by_time();
        let mut out = Vec::new();
        for (id, track) in self.tracks() {
            let Some(b) = track.get(&t) else { continue };
            let speed = match object_world_velocity(&track, &ego, t, self.frame_interval) {
                Ok(v) => (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt(),
                Err(Error::InsufficientData(msg)) => {
                    warn!("object {id} at {t}: {msg}; labelled static");
                    0.0
                }
                Err(e) => return Err(e),
            };
            let state = classify_motion(speed, &b.class_name, &self.thresholds)?;
            out.push(MotionLabel { object_id: id, state, speed_world: speed });
        }
        Ok(out)
    }

    /// Union of the projections of every MOVING object at `t`.
    pub fn mask_at(&self, t: usize) -> Result<MotionMask> {
        let labels = self.labels_at(t)?;
        let mut mask = MotionMask::zeros(self.height, self.width);
        for b in self.boxes.iter().filter(|b| b.timestamp == t) {
            let moving = labels
                .iter()
                .any(|l| l.object_id == b.bbox.object_id && l.state == MotionState::Moving);
            if !moving {
                continue;
            }
            let proj = project_box(&b.bbox, &self.calibration, self.height, self.width)?;
            for (i, &l) in proj.labels().iter().enumerate() {
                if l == MOVING {
                    mask.set(i / self.width, i % self.width, MOVING);
                }
            }
        }
        Ok(mask)
    }
}

/// Writes a mask for every frame of the scene into the dataset layout under
/// `out_root`. Returns the number of masks written.
pub fn generate_masks(scene: &SceneRecord, out_root: &Path) -> Result<usize> {
    scene.validate()?;
    let dir = out_root.join(&scene.sequence_id).join("mask");
    fs::create_dir_all(&dir).at(&dir)?;
    let results = par::map_range(scene.num_frames, |t| -> Result<()> {
        let mask = scene.mask_at(t)?;
        mask.save_png(&mask_path(out_root, &scene.sequence_id, t))
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(scene.num_frames)
}

/// Writes `review/<index>.png` overlays (moving pixels tinted red) for
/// manual inspection. Frames without an image get a gray background.
pub fn write_review_overlays(scene: &SceneRecord, root: &Path) -> Result<usize> {
    let dir = root.join(&scene.sequence_id).join("review");
    fs::create_dir_all(&dir).at(&dir)?;
    for t in 0..scene.num_frames {
        let mask = MotionMask::load_png(&mask_path(root, &scene.sequence_id, t))?;
        let mut img = Image::load_png(&image_path(root, &scene.sequence_id, t))
            .unwrap_or_else(|_| Image::filled(scene.height, scene.width, [0.5; 3]));
        for y in 0..scene.height.min(img.height()) {
            for x in 0..scene.width.min(img.width()) {
                if mask.get(y, x) == MOVING {
                    let p = img.pixel(y, x);
                    img.set_pixel(y, x, [0.5 + 0.5 * p[0], 0.5 * p[1], 0.5 * p[2]]);
                }
            }
        }
        img.save_png(&dir.join(format!("{t:06}.png")))?;
    }
    Ok(scene.num_frames)
}
