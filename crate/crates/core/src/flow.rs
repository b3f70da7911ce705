//! Dense optical flow fields, their binary file format, and the color-wheel
//! encoding fed to the motion stream.
//!
//! File layout (little endian): the magic `FLO1`, `u32` height, `u32` width,
//! then `height * width` pairs of `f32` `(u, v)` in row-major order.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use crate::datamodel::Image;
use crate::error::{Error, IoContext, Result};

pub const FLOW_MAGIC: &[u8; 4] = b"FLO1";

/// Default saturation cap in pixels per frame at desk resolution.
pub const DEFAULT_MAGNITUDE_CAP: f64 = 16.0;

/// Per-pixel displacement in pixels/frame, stored interleaved `(u, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 2] }
    }

    pub fn uniform(height: usize, width: usize, u: f32, v: f32) -> Self {
        let data = (0..height * width).flat_map(|_| [u, v]).collect();
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(y, x);
                data.push(u);
                data.push(v);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, y: usize, x: usize, u: f32, v: f32) {
        let i = (y * self.width + x) * 2;
        self.data[i] = u;
        self.data[i + 1] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data
            .chunks(2)
            .map(|p| (p[0] as f64).hypot(p[1] as f64))
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(FLOW_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
            return Err(Error::Format("flow data does not start with FLO1".into()));
        }
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = 12 + height * width * 8;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "flow {height}x{width} needs {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { height, width, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

// Segment lengths of the Middlebury color wheel.
const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;
pub const WHEEL_BINS: usize = RY + YG + GC + CB + BM + MR;

/// The 55 wheel colors in `[0, 1]`.
pub fn color_wheel() -> &'static [[f64; 3]; WHEEL_BINS] {
    static WHEEL: OnceLock<[[f64; 3]; WHEEL_BINS]> = OnceLock::new();
    WHEEL.get_or_init(|| {
        let mut w = [[0.0; 3]; WHEEL_BINS];
        let ramp = |i: usize, n: usize| (255 * i / n) as f64;
        let mut k = 0;
        for i in 0..RY {
            w[k] = [255.0, ramp(i, RY), 0.0];
            k += 1;
        }
        for i in 0..YG {
            w[k] = [255.0 - ramp(i, YG), 255.0, 0.0];
            k += 1;
        }
        for i in 0..GC {
            w[k] = [0.0, 255.0, ramp(i, GC)];
            k += 1;
        }
        for i in 0..CB {
            w[k] = [0.0, 255.0 - ramp(i, CB), 255.0];
            k += 1;
        }
        for i in 0..BM {
            w[k] = [ramp(i, BM), 0.0, 255.0];
            k += 1;
        }
        for i in 0..MR {
            w[k] = [255.0, 0.0, 255.0 - ramp(i, MR)];
            k += 1;
        }
        for c in w.iter_mut() {
            for v in c.iter_mut() {
                *v /= 255.0;
            }
        }
        w
    })
}

/// Position on the wheel in `[0, WHEEL_BINS)` and saturation in `[0, 1]`
/// for a single flow vector.
///
/// The wheel is treated as periodic over all 55 bins, so a rotation of the
/// flow by θ shifts the position by `θ / 2π · 55` modulo 55.
pub fn wheel_coordinates(u: f64, v: f64, magnitude_cap: f64) -> (f64, f64) {
    let rad = u.hypot(v).min(magnitude_cap) / magnitude_cap;
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let pos = ((a + 1.0) / 2.0 * WHEEL_BINS as f64).rem_euclid(WHEEL_BINS as f64);
    (pos, rad)
}

/// Color of one flow vector; zero flow is white.
pub fn flow_color(u: f64, v: f64, magnitude_cap: f64) -> [f64; 3] {
    let (pos, rad) = wheel_coordinates(u, v, magnitude_cap);
    let wheel = color_wheel();
    let k0 = (pos.floor() as usize).min(WHEEL_BINS - 1);
    let k1 = (k0 + 1) % WHEEL_BINS;
    let f = pos - k0 as f64;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        *o = (1.0 - rad * (1.0 - col)).clamp(0.0, 1.0);
    }
    out
}

/// Encodes a flow field as an RGB image with a fixed saturation cap.
pub fn flow_to_colorwheel(flow: &FlowField, magnitude_cap: f64) -> Result<Image> {
    if !(magnitude_cap > 0.0 && magnitude_cap.is_finite()) {
        return Err(Error::Argument(format!("magnitude cap must be positive, got {magnitude_cap}")));
    }
    if !flow.is_finite() {
        return Err(Error::Argument("flow field contains non-finite values".into()));
    }
    let mut data = Vec::with_capacity(flow.height * flow.width * 3);
    for p in flow.data.chunks(2) {
        let c = flow_color(p[0] as f64, p[1] as f64, magnitude_cap);
        data.extend(c.iter().map(|&v| v as f32));
    }
    Image::new(flow.height, flow.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wheel_has_55_bins_starting_red() {
        assert_eq!(WHEEL_BINS, 55);
        assert_eq!(color_wheel()[0], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_colorwheel(&FlowField::zeros(3, 4), 16.0).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn antipodal_flows_are_half_a_wheel_apart() {
        let cap = 10.0;
        let (p1, s1) = wheel_coordinates(cap, 0.0, cap);
        let (p2, s2) = wheel_coordinates(-cap, 0.0, cap);
        let d = (p1 - p2).rem_euclid(WHEEL_BINS as f64);
        assert!((d - WHEEL_BINS as f64 / 2.0).abs() < 1e-9);
        assert_eq!(s1, 1.0);
        assert_eq!(s2, 1.0);
        let a = flow_to_colorwheel(&FlowField::uniform(2, 2, cap as f32, 0.0), cap).unwrap();
        let b = flow_to_colorwheel(&FlowField::uniform(2, 2, -cap as f32, 0.0), cap).unwrap();
        assert_ne!(a, b);
        // each image is uniform
        assert!(a.data().chunks(3).all(|p| p == &a.data()[..3]));
    }

    #[test]
    fn rejects_bad_input() {
        let mut f = FlowField::zeros(2, 2);
        assert!(flow_to_colorwheel(&f, 0.0).is_err());
        f.set(0, 0, f32::NAN, 0.0);
        assert!(matches!(flow_to_colorwheel(&f, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let mut bytes = FlowField::uniform(2, 3, 1.0, -2.0).to_bytes();
        bytes.pop();
        assert!(matches!(FlowField::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(FlowField::from_bytes(b"FLO2\0\0\0\0\0\0\0\0"), Err(Error::Format(_))));
    }
}
