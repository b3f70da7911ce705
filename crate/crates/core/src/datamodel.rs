//! Dataset layout, loading, preprocessing and class statistics.
//!
//! A dataset root holds one directory per sequence:
//!
//! ```text
//! <root>/<sequence_id>/image/<index>.png     RGB frame
//! <root>/<sequence_id>/flow/<index>.flo      exact flow into frame <index>
//! <root>/<sequence_id>/flow_est/<index>.flo  estimated flow (optional)
//! <root>/<sequence_id>/mask/<index>.png      8-bit labels 0 / 1 / 255
//! ```
//!
//! `<index>` is zero-padded to six digits. Flow `k` is defined on the pixel
//! grid of frame `k` and holds the displacement each pixel underwent since
//! frame `k - 1`; flow `0` is a zero field.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use motseg_autograd::IGNORE_LABEL;

use crate::error::{Error, IoContext, Result};
use crate::flow::FlowField;

pub const NUM_CLASSES: usize = 2;
pub const STATIC: u8 = 0;
pub const MOVING: u8 = 1;

/// Default window length.
pub const DEFAULT_T: usize = 4;
/// Desk-scale training resolution.
pub const DESK_HEIGHT: usize = 64;
pub const DESK_WIDTH: usize = 160;

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Argument(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self { height: img.height() as usize, width: img.width() as usize, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches dimensions")
    }

    /// Planar `[3, h, w]` copy with `offset` added to every value.
    pub fn to_chw(&self, offset: f64) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f64 + offset;
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| image_error(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Bilinear resize with half-pixel centers; identity when sizes match.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let mut out = Self::filled(out_h, out_w, [0.0; 3]);
        for y in 0..out_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..out_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let (a, b, c, d) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
                let mut px = [0.0f32; 3];
                for k in 0..3 {
                    let top = a[k] as f64 * (1.0 - wx) + b[k] as f64 * wx;
                    let bot = c[k] as f64 * (1.0 - wx) + d[k] as f64 * wx;
                    px[k] = (top * (1.0 - wy) + bot * wy) as f32;
                }
                out.set_pixel(y, x, px);
            }
        }
        out
    }

    /// Rows `top..height`.
    pub fn crop_rows(&self, top: usize) -> Self {
        Self {
            height: self.height - top,
            width: self.width,
            data: self.data[top * self.width * 3..].to_vec(),
        }
    }
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Err::<(), _>(io).at(path).unwrap_err(),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// One appearance frame of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub timestamp_index: usize,
    pub sequence_id: String,
}

/// Per-pixel labels: 0 static/background, 1 moving, 255 ignore.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl MotionMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Argument(format!("{height}x{width} mask needs {} labels", height * width)));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != STATIC && l != MOVING && l != IGNORE_LABEL) {
            return Err(Error::Format(format!("mask label {bad} is not one of 0, 1, 255")));
        }
        Ok(Self { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, labels: vec![STATIC; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("buffer matches dimensions")
            .save(path)
            .map_err(|e| image_error(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => return Err(Error::Format(format!("{}: mask must be 8-bit gray, got {:?}", path.display(), other.color()))),
        };
        Self::new(gray.height() as usize, gray.width() as usize, gray.into_raw())
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// `T` consecutive frames with their flows and motion masks.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    pub sequence_id: String,
    pub end_index: usize,
    pub frames: Vec<Frame>,
    pub flows: Vec<FlowField>,
    /// Masks per frame; the last one is the supervision target.
    pub masks: Vec<Option<MotionMask>>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].image.height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].image.width()
    }

    /// Mask of the last frame, if present.
    pub fn target(&self) -> Option<&MotionMask> {
        self.masks.last().and_then(|m| m.as_ref())
    }

    /// Checks lengths, consecutive timestamps and matching resolutions.
    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 || self.flows.len() != t || self.masks.len() != t {
            return Err(Error::Integrity(format!(
                "sample has {} frames, {} flows, {} masks",
                t,
                self.flows.len(),
                self.masks.len()
            )));
        }
        let (h, w) = (self.height(), self.width());
        for (k, f) in self.frames.iter().enumerate() {
            let expected = self.end_index + 1 + k - t;
            if f.timestamp_index != expected || f.sequence_id != self.sequence_id {
                return Err(Error::Integrity(format!(
                    "frame {} of {} is not consecutive (expected index {expected})",
                    f.timestamp_index, f.sequence_id
                )));
            }
            if f.image.height() != h || f.image.width() != w {
                return Err(Error::Integrity(format!("frame {} resolution differs", f.timestamp_index)));
            }
            if self.flows[k].height() != h || self.flows[k].width() != w {
                return Err(Error::Integrity(format!("flow {} resolution differs", f.timestamp_index)));
            }
            if let Some(m) = &self.masks[k] {
                if m.height() != h || m.width() != w {
                    return Err(Error::Integrity(format!("mask {} resolution differs", f.timestamp_index)));
                }
            }
        }
        Ok(())
    }
}

/// Per-class pixel counts over the supervision targets of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetStats {
    pub pixel_count_per_class: [u64; NUM_CLASSES],
    pub num_samples: usize,
}

impl DatasetStats {
    pub fn merge(&self, other: &DatasetStats) -> DatasetStats {
        let mut out = self.clone();
        for (a, b) in out.pixel_count_per_class.iter_mut().zip(&other.pixel_count_per_class) {
            *a += b;
        }
        out.num_samples += other.num_samples;
        out
    }
}

/// Crops the top fraction of a raw frame, resizes the remainder and scales
/// values to `[0, 1]`.
pub fn preprocess_frame(raw: &RgbImage, crop_top_fraction: f64, out_h: usize, out_w: usize) -> Result<Image> {
    let h = raw.height() as usize;
    if h < 2 || raw.width() == 0 {
        return Err(Error::Argument(format!("raw image must be at least 2 rows, got {h}")));
    }
    if !(0.0..1.0).contains(&crop_top_fraction) {
        return Err(Error::Argument(format!("crop fraction {crop_top_fraction} outside [0, 1)")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument("output size must be positive".into()));
    }
    let top = (h as f64 * crop_top_fraction).round() as usize;
    if top >= h {
        return Err(Error::Argument(format!("cropping {top} of {h} rows leaves nothing")));
    }
    Ok(Image::from_rgb8(raw).crop_rows(top).resize(out_h, out_w))
}

/// Decodes encoded image bytes (PNG).
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Format(format!("not a decodable image: {e}")))
}

pub fn image_path(root: &Path, sequence_id: &str, index: usize) -> PathBuf {
    root.join(sequence_id).join("image").join(format!("{index:06}.png"))
}

pub fn flow_path(root: &Path, sequence_id: &str, index: usize) -> PathBuf {
    root.join(sequence_id).join("flow").join(format!("{index:06}.flo"))
}

pub fn estimated_flow_path(root: &Path, sequence_id: &str, index: usize) -> PathBuf {
    root.join(sequence_id).join("flow_est").join(format!("{index:06}.flo"))
}

pub fn mask_path(root: &Path, sequence_id: &str, index: usize) -> PathBuf {
    root.join(sequence_id).join("mask").join(format!("{index:06}.png"))
}

/// Which flow the loader hands to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FlowSource {
    /// Estimated flow when the sequence has it, exact flow otherwise.
    #[default]
    Auto,
    Exact,
    Estimated,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    pub flow_source: FlowSource,
    /// Tolerate missing masks (they load as `None`).
    pub allow_missing_masks: bool,
}

fn resolve_flow_path(root: &Path, sequence_id: &str, index: usize, source: FlowSource) -> PathBuf {
    match source {
        FlowSource::Exact => flow_path(root, sequence_id, index),
        FlowSource::Estimated => estimated_flow_path(root, sequence_id, index),
        FlowSource::Auto => {
            let est = estimated_flow_path(root, sequence_id, index);
            if est.exists() {
                est
            } else {
                flow_path(root, sequence_id, index)
            }
        }
    }
}

/// Loads the `t` frames ending at `end_index`.
pub fn load_sequence(root: &Path, sequence_id: &str, end_index: usize, t: usize) -> Result<SequenceSample> {
    load_sequence_with(root, sequence_id, end_index, t, &LoadOptions::default())
}

pub fn load_sequence_with(
    root: &Path,
    sequence_id: &str,
    end_index: usize,
    t: usize,
    opts: &LoadOptions,
) -> Result<SequenceSample> {
    if t == 0 {
        return Err(Error::Argument("window length must be at least 1".into()));
    }
    if end_index + 1 < t {
        return Err(Error::Argument(format!(
            "window of {t} frames ending at {end_index} would start at index {}",
            end_index as isize + 1 - t as isize
        )));
    }
    let start = end_index + 1 - t;
    let end_image = image_path(root, sequence_id, end_index);
    if !end_image.exists() {
        return Err(Error::NotFound(end_image));
    }
    for k in start..end_index {
        if !image_path(root, sequence_id, k).exists() {
            return Err(Error::Integrity(format!(
                "sequence {sequence_id} has a gap: frame {k} is missing before frame {end_index}"
            )));
        }
    }
    let mut frames = Vec::with_capacity(t);
    let mut flows = Vec::with_capacity(t);
    let mut masks = Vec::with_capacity(t);
    for k in start..=end_index {
        frames.push(Frame {
            image: Image::load_png(&image_path(root, sequence_id, k))?,
            timestamp_index: k,
            sequence_id: sequence_id.to_string(),
        });
        flows.push(FlowField::load(&resolve_flow_path(root, sequence_id, k, opts.flow_source))?);
        let mp = mask_path(root, sequence_id, k);
        masks.push(match MotionMask::load_png(&mp) {
            Ok(m) => Some(m),
            Err(Error::NotFound(_)) if opts.allow_missing_masks || k != end_index => None,
            Err(e) => return Err(e),
        });
    }
    let sample = SequenceSample { sequence_id: sequence_id.to_string(), end_index, frames, flows, masks };
    sample.validate()?;
    Ok(sample)
}

/// Loads the exact flow into every frame of `start..=end`.
pub fn load_exact_flows(root: &Path, sequence_id: &str, start: usize, end: usize) -> Result<Vec<FlowField>> {
    (start..=end).map(|k| FlowField::load(&flow_path(root, sequence_id, k))).collect()
}

/// Writes one frame, its flows and its mask in the dataset layout.
pub fn save_frame_files(
    root: &Path,
    sequence_id: &str,
    index: usize,
    image: &Image,
    flow: &FlowField,
    estimated_flow: Option<&FlowField>,
    mask: &MotionMask,
) -> Result<()> {
    for dir in ["image", "flow", "mask"] {
        let d = root.join(sequence_id).join(dir);
        fs::create_dir_all(&d).at(&d)?;
    }
    image.save_png(&image_path(root, sequence_id, index))?;
    flow.save(&flow_path(root, sequence_id, index))?;
    if let Some(est) = estimated_flow {
        let d = root.join(sequence_id).join("flow_est");
        fs::create_dir_all(&d).at(&d)?;
        est.save(&estimated_flow_path(root, sequence_id, index))?;
    }
    mask.save_png(&mask_path(root, sequence_id, index))
}

/// Sequences found under a dataset root, with their frame counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub sequences: Vec<(String, usize)>,
}

impl DatasetIndex {
    /// Scans `root` for sequence directories containing `image/`.
    pub fn scan(root: &Path) -> Result<Self> {
        let mut sequences = Vec::new();
        for entry in fs::read_dir(root).at(root)? {
            let entry = entry.at(root)?;
            let images = entry.path().join("image");
            if !images.is_dir() {
                continue;
            }
            let count = fs::read_dir(&images)
                .at(&images)?
                .filter(|e| e.as_ref().is_ok_and(|e| e.path().extension().is_some_and(|x| x == "png")))
                .count();
            sequences.push((entry.file_name().to_string_lossy().into_owned(), count));
        }
        sequences.sort();
        if sequences.is_empty() {
            return Err(Error::NotFound(root.join("<sequence>/image")));
        }
        Ok(Self { root: root.to_path_buf(), sequences })
    }

    /// Every `(sequence_id, end_index)` that has `t` frames available.
    pub fn windows(&self, t: usize) -> Vec<(String, usize)> {
        self.sequences
            .iter()
            .flat_map(|(id, n)| (t.max(1) - 1..*n).map(move |end| (id.clone(), end)))
            .collect()
    }

    pub fn load_windows(&self, t: usize, opts: &LoadOptions) -> Result<Vec<SequenceSample>> {
        self.windows(t)
            .iter()
            .map(|(id, end)| load_sequence_with(&self.root, id, *end, t, opts))
            .collect()
    }
}

/// Counts target pixels per class, excluding ignored pixels.
pub fn compute_stats<'a>(dataset: impl IntoIterator<Item = &'a SequenceSample>) -> Result<DatasetStats> {
    let mut stats = DatasetStats::default();
    for sample in dataset {
        let target = sample
            .target()
            .ok_or_else(|| Error::Argument(format!("sample {}:{} has no target", sample.sequence_id, sample.end_index)))?;
        accumulate_mask(&mut stats, target);
        stats.num_samples += 1;
    }
    if stats.num_samples == 0 {
        return Err(Error::Argument("cannot compute statistics of an empty dataset".into()));
    }
    Ok(stats)
}

pub fn accumulate_mask(stats: &mut DatasetStats, mask: &MotionMask) {
    for &l in mask.labels() {
        if (l as usize) < NUM_CLASSES {
            stats.pixel_count_per_class[l as usize] += 1;
        }
    }
}
