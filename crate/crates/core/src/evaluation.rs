//! Segmentation metrics, temporal stability, throughput and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use motseg_autograd::{Tensor, IGNORE_LABEL};
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_exact_flows, DatasetIndex, LoadOptions, MotionMask, SequenceSample, MOVING, NUM_CLASSES, STATIC};
use crate::error::{Error, Result};
use crate::flow::{FlowField, DEFAULT_MAGNITUDE_CAP};
use crate::network::{NetInput, Network};

/// Pixel counts indexed by `(target, prediction)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn count(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.k + pred]
    }

    /// Accumulates one prediction; pixels labelled 255 are skipped.
    pub fn add(&mut self, pred: &[u8], target: &[u8]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::Argument(format!("prediction has {} pixels, target {}", pred.len(), target.len())));
        }
        for (&p, &t) in pred.iter().zip(target) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(Error::Argument(format!("label outside 0..{}: pred {p}, target {t}", self.k)));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class appears in neither
    /// prediction nor target.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.count(class, class);
        let fn_: u64 = (0..self.k).filter(|&p| p != class).map(|p| self.count(class, p)).sum();
        let fp: u64 = (0..self.k).filter(|&t| t != class).map(|t| self.count(t, class)).sum();
        let union = tp + fp + fn_;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU over classes with a defined IoU.
    pub fn miou(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..self.k).filter_map(|c| self.iou(c)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..self.k).map(|c| self.count(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

/// IoU of one class between two label maps, ignoring target pixels of 255.
/// `None` when the class is absent from both.
pub fn iou(pred: &[u8], target: &[u8], class: u8) -> Result<Option<f64>> {
    let mut cm = ConfusionMatrix::new(NUM_CLASSES.max(class as usize + 1));
    cm.add(pred, target)?;
    if cm.pixel_accuracy().is_none() {
        return Err(Error::InsufficientData("no valid pixels to score".into()));
    }
    Ok(cm.iou(class as usize))
}

/// Per-item argmax of `[n, k, h, w]` logits; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<MotionMask>> {
    let (n, k, h, w) = logits.dims4()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let item = logits.item(i);
        let labels = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if item[c * plane + p] > item[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        out.push(MotionMask::new(h, w, labels)?);
    }
    Ok(out)
}

/// Agreement between a prediction and the previous prediction warped along
/// the flow into the current frame. Pixels whose source lies outside the
/// image, or that `ignore` marks with 255, are excluded. Returns the mean
/// IoU over classes present in either map, or `None` with no valid pixels.
pub fn pair_stability(prev: &MotionMask, cur: &MotionMask, flow: &FlowField, ignore: Option<&MotionMask>) -> Result<Option<f64>> {
    let (h, w) = (cur.height(), cur.width());
    if prev.height() != h || prev.width() != w || flow.height() != h || flow.width() != w {
        return Err(Error::Argument("prediction and flow resolutions differ".into()));
    }
    if let Some(m) = ignore {
        if m.height() != h || m.width() != w {
            return Err(Error::Argument("ignore mask resolution differs".into()));
        }
    }
    let mut inter = [0u64; 256];
    let mut union = [0u64; 256];
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if ignore.is_some_and(|m| m.get(y, x) == IGNORE_LABEL) {
                continue;
            }
            let (u, v) = flow.get(y, x);
            let sx = (x as f64 - u as f64).round();
            let sy = (y as f64 - v as f64).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            any = true;
            let a = cur.get(y, x) as usize;
            let b = prev.get(sy as usize, sx as usize) as usize;
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    if !any {
        return Ok(None);
    }
    let ious: Vec<f64> = (0..256).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    Ok(Some(ious.iter().sum::<f64>() / ious.len() as f64))
}

/// Mean [`pair_stability`] over consecutive predictions. `flows[t]` maps
/// frame `t - 1` to frame `t`; `flows[0]` is unused.
pub fn temporal_stability(preds: &[MotionMask], flows: &[FlowField], ignore: Option<&[MotionMask]>) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::InsufficientData(format!("need two predictions, got {}", preds.len())));
    }
    if flows.len() != preds.len() || ignore.is_some_and(|m| m.len() != preds.len()) {
        return Err(Error::Argument("predictions, flows and ignore masks differ in length".into()));
    }
    let mut scores = Vec::new();
    for t in 1..preds.len() {
        if let Some(s) = pair_stability(&preds[t - 1], &preds[t], &flows[t], ignore.map(|m| &m[t]))? {
            scores.push(s);
        }
    }
    if scores.is_empty() {
        return Err(Error::InsufficientData("no pixel pairs survive warping".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub median_fps: f64,
    pub median_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub iterations: usize,
}

/// Fewest timed runs for meaningful percentiles.
pub const MIN_FPS_ITERATIONS: usize = 10;

/// Times repeated single-window inference after `warmup` untimed runs.
pub fn benchmark_fps(net: &Network, input: &NetInput, warmup: usize, iterations: usize) -> Result<FpsReport> {
    if iterations < MIN_FPS_ITERATIONS {
        return Err(Error::Argument(format!("need at least {MIN_FPS_ITERATIONS} timed iterations, got {iterations}")));
    }
    for _ in 0..warmup {
        net.predict(input)?;
    }
    let mut lat = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        net.predict(input)?;
        lat.push(start.elapsed().as_secs_f64());
    }
    lat.sort_by(|a, b| a.partial_cmp(b).expect("finite durations"));
    let median = if iterations % 2 == 1 { lat[iterations / 2] } else { (lat[iterations / 2 - 1] + lat[iterations / 2]) / 2.0 };
    let p95 = lat[((iterations as f64 * 0.95).ceil() as usize).clamp(1, iterations) - 1];
    Ok(FpsReport { median_fps: 1.0 / median, median_latency_ms: median * 1e3, p95_latency_ms: p95 * 1e3, iterations })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub flow_cap: f64,
    pub batch_size: usize,
    pub load: LoadOptions,
    /// Timed inference runs; 0 skips the throughput benchmark.
    pub fps_iterations: usize,
    pub fps_warmup: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { flow_cap: DEFAULT_MAGNITUDE_CAP, batch_size: 4, load: LoadOptions::default(), fps_iterations: 0, fps_warmup: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub frames: usize,
    pub moving_iou: Option<f64>,
    pub static_iou: Option<f64>,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub temporal_stability: Option<f64>,
    pub fps: Option<f64>,
    pub p95_latency_ms: Option<f64>,
}

/// Predicted label maps for the last frame of each window.
pub fn predict_windows(net: &Network, samples: &[SequenceSample], opts: &EvalOptions) -> Result<Vec<MotionMask>> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(opts.batch_size.max(1)) {
        let input = NetInput::from_samples(chunk, opts.flow_cap)?;
        preds.extend(argmax_labels(&net.predict(&input)?)?);
    }
    Ok(preds)
}

fn report(net: &Network, samples: &[SequenceSample], stability_flows: &[&FlowField], opts: &EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no windows to evaluate".into()));
    }
    let preds = predict_windows(net, samples, opts)?;
    let mut cm = ConfusionMatrix::new(net.config.num_classes);
    for (s, p) in samples.iter().zip(&preds) {
        if let Some(t) = s.target() {
            cm.add(p.labels(), t.labels())?;
        }
    }
    // consecutive windows of the same sequence form prediction pairs
    let mut by_seq: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_seq.insert((s.sequence_id.as_str(), s.end_index), i);
    }
    let mut scores = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.end_index == 0 {
            continue;
        }
        let Some(&j) = by_seq.get(&(s.sequence_id.as_str(), s.end_index - 1)) else { continue };
        if let Some(v) = pair_stability(&preds[j], &preds[i], stability_flows[i], s.target())? {
            scores.push(v);
        }
    }
    let temporal_stability = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    let fps = if opts.fps_iterations > 0 {
        let input = NetInput::from_samples(&samples[..1], opts.flow_cap)?;
        Some(benchmark_fps(net, &input, opts.fps_warmup, opts.fps_iterations)?)
    } else {
        None
    };
    Ok(EvalReport {
        variant: net.config.variant.name().to_string(),
        frames: samples.len(),
        moving_iou: cm.iou(MOVING as usize),
        static_iou: cm.iou(STATIC as usize),
        miou: cm.miou(),
        pixel_accuracy: cm.pixel_accuracy(),
        temporal_stability,
        fps: fps.as_ref().map(|f| f.median_fps),
        p95_latency_ms: fps.as_ref().map(|f| f.p95_latency_ms),
    })
}

/// Metrics over already-loaded windows. Temporal stability warps with each
/// window's last flow.
pub fn evaluate_samples(net: &Network, samples: &[SequenceSample], opts: &EvalOptions) -> Result<EvalReport> {
    let flows: Vec<&FlowField> = samples
        .iter()
        .map(|s| s.flows.last().ok_or_else(|| Error::Integrity("window without flow".into())))
        .collect::<Result<_>>()?;
    report(net, samples, &flows, opts)
}

/// Metrics over every window of a dataset. The network sees the flow chosen
/// by `opts.load`; temporal stability always warps with the exact flow.
pub fn evaluate_dataset(net: &Network, root: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let index = DatasetIndex::scan(root)?;
    let samples = index.load_windows(net.config.window, &opts.load)?;
    let exact: Vec<FlowField> = samples
        .iter()
        .map(|s| load_exact_flows(root, &s.sequence_id, s.end_index, s.end_index).map(|mut v| v.remove(0)))
        .collect::<Result<_>>()?;
    let refs: Vec<&FlowField> = exact.iter().collect();
    report(net, &samples, &refs, opts)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Fixed-width text table of reports.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>7} {:>10} {:>10} {:>8} {:>10} {:>8}",
        "variant", "frames", "moving_iou", "static_iou", "miou", "stability", "fps"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<16} {:>7} {:>10} {:>10} {:>8} {:>10} {:>8}",
            r.variant,
            r.frames,
            fmt_opt(r.moving_iou, 4),
            fmt_opt(r.static_iou, 4),
            fmt_opt(r.miou, 4),
            fmt_opt(r.temporal_stability, 4),
            fmt_opt(r.fps, 1)
        );
    }
    out
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn write_reports_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    write_csv(path, reports)
}

/// One throughput measurement with the configuration it was taken at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub preset: String,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub iterations: usize,
    pub median_fps: f64,
    pub median_latency_ms: f64,
    pub p95_latency_ms: f64,
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    write_csv(path, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, labels: &[u8]) -> MotionMask {
        MotionMask::new(h, w, labels.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_iou() {
        let pred = [1, 1, 0, 0, 1, 0];
        let target = [1, 0, 0, 1, 1, 255];
        // moving: tp 2, fp 1, fn 1
        assert_eq!(iou(&pred, &target, 1).unwrap(), Some(0.5));
        // static: tp 1, fp 1, fn 1
        assert_eq!(iou(&pred, &target, 0).unwrap(), Some(1.0 / 3.0));
        assert_eq!(iou(&[0, 0], &[0, 0], 1).unwrap(), None);
    }

    #[test]
    fn argmax_prefers_lower_class_on_ties() {
        let logits = Tensor::new(&[1, 2, 1, 3], vec![0.0, 1.0, 2.0, 0.0, 2.0, 1.0]).unwrap();
        assert_eq!(argmax_labels(&logits).unwrap()[0].labels(), &[0, 1, 0]);
    }

    #[test]
    fn identical_predictions_under_zero_flow_are_stable() {
        let m = mask(2, 3, &[0, 1, 1, 0, 0, 1]);
        let s = temporal_stability(&[m.clone(), m], &[FlowField::zeros(2, 3), FlowField::zeros(2, 3)], None).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn shifted_prediction_tracked_by_flow() {
        let a = mask(1, 4, &[1, 0, 0, 0]);
        let b = mask(1, 4, &[0, 1, 0, 0]);
        let flow = FlowField::uniform(1, 4, 1.0, 0.0);
        // pixel 0 warps from outside and is excluded
        let s = pair_stability(&a, &b, &flow, None).unwrap().unwrap();
        assert_eq!(s, 1.0);
        let stale = pair_stability(&a, &a, &FlowField::zeros(1, 4), None).unwrap().unwrap();
        assert_eq!(stale, 1.0);
        let moved = pair_stability(&a, &b, &FlowField::zeros(1, 4), None).unwrap().unwrap();
        assert!(moved < 1.0);
    }

    #[test]
    fn single_prediction_is_insufficient() {
        let m = mask(1, 1, &[0]);
        assert!(matches!(temporal_stability(&[m], &[FlowField::zeros(1, 1)], None), Err(Error::InsufficientData(_))));
    }
}
