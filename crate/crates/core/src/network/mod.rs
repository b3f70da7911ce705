//! Two-stream encoder-decoder segmentation networks and their temporal
//! variants.
//!
//! Each stream is a ShuffleNet encoder producing features at strides 8, 16
//! and 32. The appearance (RGB) and motion (color-coded flow) streams are
//! fused at each of those levels and decoded by an FCN8s head. Temporal
//! variants add convolutional recurrent cells at different depths.

pub mod params;
pub mod recurrent;

use std::borrow::Borrow;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use motseg_autograd::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{SequenceSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::flow::flow_to_colorwheel;
pub use params::{read_checkpoint, replicate_first_layer, write_checkpoint, Ctx, Init, ParamStore};
pub use recurrent::{CellKind, CellState};

/// Output stride of the encoder; input sides must be multiples of it.
pub const MAX_STRIDE: usize = 32;
/// Offset added to `[0, 1]` image values before they enter the network.
pub const INPUT_OFFSET: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    RgbOnly,
    RgbFlow,
    Stacking,
    Conv3d,
    EarlyLstm,
    LateLstm,
    MultiLstm,
    MultiGru,
    Multi2Filters,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::RgbOnly,
        Variant::RgbFlow,
        Variant::Stacking,
        Variant::Conv3d,
        Variant::EarlyLstm,
        Variant::LateLstm,
        Variant::MultiLstm,
        Variant::MultiGru,
        Variant::Multi2Filters,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RgbOnly => "RGB_ONLY",
            Variant::RgbFlow => "RGB_FLOW",
            Variant::Stacking => "STACKING",
            Variant::Conv3d => "CONV3D",
            Variant::EarlyLstm => "EARLY_LSTM",
            Variant::LateLstm => "LATE_LSTM",
            Variant::MultiLstm => "MULTI_LSTM",
            Variant::MultiGru => "MULTI_GRU",
            Variant::Multi2Filters => "MULTI_2FILTERS",
        }
    }

    /// Whether the variant looks at more than the last frame.
    pub fn is_temporal(self) -> bool {
        !matches!(self, Variant::RgbOnly | Variant::RgbFlow)
    }

    pub fn uses_flow(self) -> bool {
        self != Variant::RgbOnly
    }

    fn is_multistage(self) -> bool {
        matches!(self, Variant::MultiLstm | Variant::MultiGru | Variant::Multi2Filters)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Argument(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Encoder size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tiny" => Ok(Preset::Tiny),
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Argument(format!("unknown preset {s:?}; expected tiny, desk or full"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Channels after the stem and after each of the three stages.
    pub widths: [usize; 4],
    /// Units per stage, the first of which downsamples.
    pub units: [usize; 3],
    pub groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl EncoderConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Tiny => Self { widths: [12, 24, 36, 48], units: [1, 1, 1], groups: 3 },
            Preset::Desk => Self { widths: [24, 48, 96, 192], units: [2, 2, 2], groups: 3 },
            Preset::Full => Self { widths: [24, 240, 480, 960], units: [4, 8, 4], groups: 3 },
        }
    }

    /// Checks that every grouped convolution divides evenly.
    pub fn validate(&self) -> Result<()> {
        let g = self.groups;
        if g == 0 || self.widths.contains(&0) || self.units.contains(&0) {
            return Err(Error::Argument("encoder widths, units and groups must be positive".into()));
        }
        for s in 0..3 {
            let (c_in, c_out) = (self.widths[s], self.widths[s + 1]);
            if c_out <= c_in {
                return Err(Error::Argument(format!("stage {} must widen {c_in} -> {c_out}", s + 2)));
            }
            let mid = c_out / 4;
            let branch = c_out - c_in;
            let first_groups = if s == 0 { 1 } else { g };
            let bad = mid == 0
                || mid % g != 0
                || branch % g != 0
                || c_out % g != 0
                || c_in % first_groups != 0
                || c_out % 4 != 0;
            if bad {
                return Err(Error::Argument(format!(
                    "stage {} widths {c_in} -> {c_out} are not divisible by {g} groups (bottleneck {mid})",
                    s + 2
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    /// Frames per window.
    pub window: usize,
    /// Recurrent stage positions for the multistage variants: 1 after the
    /// deepest fusion, 2 after the first upsampling, 3 on the final logits.
    pub stages: Vec<usize>,
    /// Recurrent stages output `x + h` instead of `h`.
    pub residual: bool,
    pub recurrent_kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::RgbFlow,
            encoder: EncoderConfig::default(),
            num_classes: NUM_CLASSES,
            window: crate::datamodel::DEFAULT_T,
            stages: vec![1, 2, 3],
            residual: true,
            recurrent_kernel: 3,
        }
    }
}

impl NetworkConfig {
    pub fn new(variant: Variant, preset: Preset) -> Self {
        Self { variant, encoder: EncoderConfig::preset(preset), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Argument("need at least two classes".into()));
        }
        if self.window == 0 {
            return Err(Error::Argument("window length must be positive".into()));
        }
        if self.recurrent_kernel.is_multiple_of(2) {
            return Err(Error::Argument("recurrent kernel must be odd".into()));
        }
        if self.stages.iter().any(|s| !(1..=3).contains(s)) {
            return Err(Error::Argument(format!("stages must be drawn from 1, 2, 3; got {:?}", self.stages)));
        }
        Ok(())
    }

    /// Frames the variant consumes from each window.
    pub fn frames_used(&self) -> usize {
        if self.variant.is_temporal() {
            self.window
        } else {
            1
        }
    }
}

/// Network input: per-frame RGB and color-coded flow, each `[n, 3, h, w]`.
#[derive(Clone, Debug)]
pub struct NetInput {
    pub rgb: Vec<Tensor>,
    pub flow: Vec<Tensor>,
}

impl NetInput {
    /// Builds a batch from windows of equal length and resolution.
    pub fn from_samples<S: Borrow<SequenceSample>>(samples: &[S], magnitude_cap: f64) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Argument("empty batch".into()))?.borrow();
        let (t, h, w) = (first.len(), first.height(), first.width());
        let mut rgb = Vec::with_capacity(t);
        let mut flow = Vec::with_capacity(t);
        for k in 0..t {
            let mut r = Vec::with_capacity(samples.len() * 3 * h * w);
            let mut f = Vec::with_capacity(samples.len() * 3 * h * w);
            for s in samples {
                let s = s.borrow();
                if s.len() != t || s.height() != h || s.width() != w {
                    return Err(Error::Argument("batch windows differ in length or resolution".into()));
                }
                r.extend(s.frames[k].image.to_chw(INPUT_OFFSET));
                f.extend(flow_to_colorwheel(&s.flows[k], magnitude_cap)?.to_chw(INPUT_OFFSET));
            }
            rgb.push(Tensor::new(&[samples.len(), 3, h, w], r)?);
            flow.push(Tensor::new(&[samples.len(), 3, h, w], f)?);
        }
        Ok(Self { rgb, flow })
    }

    /// All-zero input, used to materialize parameters.
    pub fn zeros(n: usize, t: usize, h: usize, w: usize) -> Self {
        Self { rgb: vec![Tensor::zeros(&[n, 3, h, w]); t], flow: vec![Tensor::zeros(&[n, 3, h, w]); t] }
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    fn dims(&self) -> Result<(usize, usize, usize)> {
        let t = self.rgb.first().ok_or_else(|| Error::Argument("input has no frames".into()))?;
        let (n, _, h, w) = t.dims4()?;
        Ok((n, h, w))
    }
}

/// Encoder outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub s4: Var,
    pub s8: Var,
    pub s16: Var,
    pub s32: Var,
}

fn conv(ctx: &mut Ctx, name: &str, x: Var, c_out: usize, k: usize, stride: usize, groups: usize, init: Init) -> Result<Var> {
    let c_in = ctx.g.shape(x)[1];
    let w = ctx.param(&format!("{name}.w"), &[c_out, c_in / groups, k, k], init)?;
    Ok(ctx.g.conv2d(x, w, None, stride, k / 2, groups)?)
}

fn conv_bias(ctx: &mut Ctx, name: &str, x: Var, c_out: usize, init: Init) -> Result<Var> {
    let c_in = ctx.g.shape(x)[1];
    let w = ctx.param(&format!("{name}.w"), &[c_out, c_in, 1, 1], init)?;
    let b = ctx.param(&format!("{name}.b"), &[c_out], Init::Zeros)?;
    Ok(ctx.g.conv2d(x, w, Some(b), 1, 0, 1)?)
}

fn batch_norm(ctx: &mut Ctx, name: &str, x: Var) -> Result<Var> {
    let c = ctx.g.shape(x)[1];
    let gamma = ctx.param(&format!("{name}.gamma"), &[c], Init::Ones)?;
    let beta = ctx.param(&format!("{name}.beta"), &[c], Init::Zeros)?;
    let rm = ctx.buffer(&format!("{name}.running_mean"), c, 0.0)?;
    let rv = ctx.buffer(&format!("{name}.running_var"), c, 1.0)?;
    Ok(ctx.g.batch_norm(x, gamma, beta, &rm, &rv, name)?)
}

fn bn_relu(ctx: &mut Ctx, name: &str, x: Var) -> Result<Var> {
    let y = batch_norm(ctx, name, x)?;
    Ok(ctx.g.relu(y))
}

/// ShuffleNet unit. Downsampling units concatenate an average-pooled
/// shortcut with the branch; the others add the input back.
fn shuffle_unit(ctx: &mut Ctx, name: &str, x: Var, c_out: usize, groups: usize, downsample: bool, first_stage: bool) -> Result<Var> {
    let c_in = ctx.g.shape(x)[1];
    let mid = c_out / 4;
    let branch_out = if downsample { c_out - c_in } else { c_out };
    let g1 = if first_stage && downsample { 1 } else { groups };
    let mut y = conv(ctx, &format!("{name}.gconv1"), x, mid, 1, 1, g1, Init::HeNormal)?;
    y = bn_relu(ctx, &format!("{name}.bn1"), y)?;
    y = ctx.g.channel_shuffle(y, groups)?;
    y = conv(ctx, &format!("{name}.dwconv"), y, mid, 3, if downsample { 2 } else { 1 }, mid, Init::HeNormal)?;
    y = batch_norm(ctx, &format!("{name}.bn2"), y)?;
    y = conv(ctx, &format!("{name}.gconv2"), y, branch_out, 1, 1, groups, Init::HeNormal)?;
    y = batch_norm(ctx, &format!("{name}.bn3"), y)?;
    let out = if downsample {
        let short = ctx.g.avg_pool(x, 3, 2, 1)?;
        ctx.g.concat(&[short, y])?
    } else {
        ctx.g.add(x, y)?
    };
    Ok(ctx.g.relu(out))
}

fn stem(ctx: &mut Ctx, name: &str, x: Var, c0: usize, init: Init) -> Result<Var> {
    let y = conv(ctx, &format!("{name}.stem.conv"), x, c0, 3, 2, 1, init)?;
    let y = bn_relu(ctx, &format!("{name}.stem.bn"), y)?;
    Ok(ctx.g.max_pool(y, 3, 2, 1)?)
}

fn body(ctx: &mut Ctx, name: &str, enc: &EncoderConfig, x: Var) -> Result<Pyramid> {
    let s4 = x;
    let mut y = x;
    let mut levels = Vec::with_capacity(3);
    for s in 0..3 {
        for u in 0..enc.units[s] {
            y = shuffle_unit(ctx, &format!("{name}.stage{}.unit{u}", s + 2), y, enc.widths[s + 1], enc.groups, u == 0, s == 0)?;
        }
        levels.push(y);
    }
    Ok(Pyramid { s4, s8: levels[0], s16: levels[1], s32: levels[2] })
}

/// ShuffleNet encoder named `name` (stem plus three stages of units).
pub fn encode(ctx: &mut Ctx, name: &str, enc: &EncoderConfig, x: Var, stem_init: Init) -> Result<Pyramid> {
    let y = stem(ctx, name, x, enc.widths[0], stem_init)?;
    body(ctx, name, enc, y)
}

/// Stem of the 3-D convolution variant: a temporal kernel of three frames
/// with zero padding in time, averaged over the window.
pub fn stem3d(ctx: &mut Ctx, enc: &EncoderConfig, xs: &[Var]) -> Result<Var> {
    let c0 = enc.widths[0];
    let c_in = ctx.g.shape(xs[0])[1];
    let ws: Vec<Var> = (0..3)
        .map(|o| ctx.param(&format!("stack.stem3d.w.t{o}"), &[c0, c_in, 3, 3], Init::Scaled(2f64.sqrt() / 3f64.sqrt())))
        .collect::<Result<_>>()?;
    let b = ctx.param("stack.stem3d.b", &[c0], Init::Zeros)?;
    let mut per_time = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        let mut acc: Option<Var> = None;
        for (o, &w) in ws.iter().enumerate() {
            let src = t as isize + o as isize - 1;
            if src < 0 || src as usize >= xs.len() {
                continue;
            }
            let bias = if acc.is_none() { Some(b) } else { None };
            let y = ctx.g.conv2d(xs[src as usize], w, bias, 2, 1, 1)?;
            acc = Some(match acc {
                Some(a) => ctx.g.add(a, y)?,
                None => y,
            });
        }
        per_time.push(acc.expect("window has at least one frame"));
    }
    let y = ctx.g.mean_of(&per_time)?;
    let y = bn_relu(ctx, "stack.stem.bn", y)?;
    Ok(ctx.g.max_pool(y, 3, 2, 1)?)
}

/// Mid-fusion: concatenation, 1x1 convolution, batch norm and ReLU.
pub fn fuse(ctx: &mut Ctx, level: usize, a: Var, b: Var) -> Result<Var> {
    let c = ctx.g.shape(a)[1];
    let cat = ctx.g.concat(&[a, b])?;
    let y = conv_bias(ctx, &format!("fuse{level}"), cat, c, Init::HeNormal)?;
    bn_relu(ctx, &format!("fuse{level}.bn"), y)
}

/// Transposed convolution initialized to bilinear interpolation.
pub fn upsample(ctx: &mut Ctx, name: &str, x: Var, k: usize, stride: usize) -> Result<Var> {
    let c = ctx.g.shape(x)[1];
    let w = ctx.param(&format!("{name}.w"), &[c, c, k, k], Init::Bilinear)?;
    Ok(ctx.g.conv_transpose2d(x, w, None, stride, (k - stride) / 2)?)
}

struct Stages<'c> {
    cfg: &'c NetworkConfig,
    kind: CellKind,
    state: [Option<CellState>; 3],
}

impl<'c> Stages<'c> {
    fn new(cfg: &'c NetworkConfig) -> Self {
        let kind = if cfg.variant == Variant::MultiGru { CellKind::Gru } else { CellKind::Lstm };
        Self { cfg, kind, state: [None; 3] }
    }

    fn enabled(&self, stage: usize) -> bool {
        self.cfg.variant.is_multistage() && self.cfg.stages.contains(&stage)
    }

    /// Applies recurrent stage `stage` to `x` if it is enabled.
    fn apply(&mut self, ctx: &mut Ctx, stage: usize, x: Var) -> Result<Var> {
        if !self.enabled(stage) {
            return Ok(x);
        }
        let x = if self.cfg.variant == Variant::Multi2Filters {
            conv_bias(ctx, &format!("stage{stage}.squeeze"), x, self.cfg.num_classes, Init::HeNormal)?
        } else {
            x
        };
        let c = ctx.g.shape(x)[1];
        let k = self.cfg.recurrent_kernel;
        let s = recurrent::step(ctx, self.kind, &format!("stage{stage}.cell"), x, self.state[stage - 1], c, k)?;
        self.state[stage - 1] = Some(s);
        residual(ctx, self.cfg, x, s.hidden())
    }
}

fn residual(ctx: &mut Ctx, cfg: &NetworkConfig, x: Var, h: Var) -> Result<Var> {
    if cfg.residual {
        Ok(ctx.g.add(x, h)?)
    } else {
        Ok(h)
    }
}

/// FCN8s decoder with optional recurrent stages. Returns full-resolution
/// logits.
fn decode(ctx: &mut Ctx, cfg: &NetworkConfig, p: &Pyramid, stages: &mut Stages) -> Result<Var> {
    let k = cfg.num_classes;
    let score = if stages.enabled(1) && cfg.variant == Variant::Multi2Filters {
        stages.apply(ctx, 1, p.s32)?
    } else {
        let f = stages.apply(ctx, 1, p.s32)?;
        conv_bias(ctx, "score32", f, k, Init::HeNormal)?
    };
    let up = upsample(ctx, "up32", score, 4, 2)?;
    let skip = conv_bias(ctx, "score16", p.s16, k, Init::Zeros)?;
    let s16 = ctx.g.add(up, skip)?;
    let s16 = stages.apply(ctx, 2, s16)?;
    let up = upsample(ctx, "up16", s16, 4, 2)?;
    let skip = conv_bias(ctx, "score8", p.s8, k, Init::Zeros)?;
    let s8 = ctx.g.add(up, skip)?;
    let logits = upsample(ctx, "up8", s8, 16, 8)?;
    stages.apply(ctx, 3, logits)
}

fn fused_pyramid(ctx: &mut Ctx, enc: &EncoderConfig, rgb: Var, flow: Var) -> Result<Pyramid> {
    let a = encode(ctx, "rgb", enc, rgb, Init::HeNormal)?;
    let b = encode(ctx, "flow", enc, flow, Init::HeNormal)?;
    Ok(Pyramid { s4: a.s4, s8: fuse(ctx, 8, a.s8, b.s8)?, s16: fuse(ctx, 16, a.s16, b.s16)?, s32: fuse(ctx, 32, a.s32, b.s32)? })
}

/// Builds the forward graph and returns the logits of the last frame,
/// `[n, num_classes, h, w]`.
pub fn forward(ctx: &mut Ctx, cfg: &NetworkConfig, input: &NetInput) -> Result<Var> {
    let (_, h, w) = input.dims()?;
    if h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::Argument(format!("input {h}x{w} must be a positive multiple of {MAX_STRIDE}")));
    }
    let t = cfg.frames_used();
    if input.len() < t || input.flow.len() != input.rgb.len() {
        return Err(Error::Argument(format!("{} needs {t} frames, input has {}", cfg.variant, input.len())));
    }
    let first = input.len() - t;
    let rgb: Vec<Var> = input.rgb[first..].iter().map(|x| ctx.g.input(x.clone())).collect();
    let flow: Vec<Var> = input.flow[first..].iter().map(|x| ctx.g.input(x.clone())).collect();
    let enc = &cfg.encoder;
    let last = t - 1;
    let mut stages = Stages::new(cfg);
    match cfg.variant {
        Variant::RgbOnly => {
            let p = encode(ctx, "rgb", enc, rgb[last], Init::HeNormal)?;
            decode(ctx, cfg, &p, &mut stages)
        }
        Variant::RgbFlow => {
            let p = fused_pyramid(ctx, enc, rgb[last], flow[last])?;
            decode(ctx, cfg, &p, &mut stages)
        }
        Variant::Stacking => {
            let mut frames = Vec::with_capacity(2 * t);
            for k in 0..t {
                frames.push(rgb[k]);
                frames.push(flow[k]);
            }
            let x = ctx.g.concat(&frames)?;
            let p = encode(ctx, "stack", enc, x, Init::Replicated { base: 6 })?;
            decode(ctx, cfg, &p, &mut stages)
        }
        Variant::Conv3d => {
            let xs: Vec<Var> = (0..t).map(|k| ctx.g.concat(&[rgb[k], flow[k]])).collect::<std::result::Result<_, _>>()?;
            let y = stem3d(ctx, enc, &xs)?;
            let p = body(ctx, "stack", enc, y)?;
            decode(ctx, cfg, &p, &mut stages)
        }
        Variant::EarlyLstm => {
            let c = enc.widths[3];
            let kk = cfg.recurrent_kernel;
            let (mut sr, mut sf) = (None, None);
            let mut out = None;
            for k in 0..t {
                let a = encode(ctx, "rgb", enc, rgb[k], Init::HeNormal)?;
                let b = encode(ctx, "flow", enc, flow[k], Init::HeNormal)?;
                let r = recurrent::step(ctx, CellKind::Lstm, "early.rgb", a.s32, sr, c, kk)?;
                let f = recurrent::step(ctx, CellKind::Lstm, "early.flow", b.s32, sf, c, kk)?;
                sr = Some(r);
                sf = Some(f);
                if k == last {
                    let r32 = residual(ctx, cfg, a.s32, r.hidden())?;
                    let f32 = residual(ctx, cfg, b.s32, f.hidden())?;
                    let p = Pyramid { s4: a.s4, s8: fuse(ctx, 8, a.s8, b.s8)?, s16: fuse(ctx, 16, a.s16, b.s16)?, s32: fuse(ctx, 32, r32, f32)? };
                    out = Some(decode(ctx, cfg, &p, &mut stages)?);
                }
            }
            Ok(out.expect("window has at least one frame"))
        }
        Variant::LateLstm => {
            let kk = cfg.recurrent_kernel;
            let mut state = None;
            let mut out = None;
            for k in 0..t {
                let p = fused_pyramid(ctx, enc, rgb[k], flow[k])?;
                let logits = decode(ctx, cfg, &p, &mut stages)?;
                let s = recurrent::step(ctx, CellKind::Lstm, "late", logits, state, cfg.num_classes, kk)?;
                state = Some(s);
                out = Some(residual(ctx, cfg, logits, s.hidden())?);
            }
            Ok(out.expect("window has at least one frame"))
        }
        Variant::MultiLstm | Variant::MultiGru | Variant::Multi2Filters => {
            let mut out = None;
            for k in 0..t {
                let p = fused_pyramid(ctx, enc, rgb[k], flow[k])?;
                out = Some(decode(ctx, cfg, &p, &mut stages)?);
            }
            Ok(out.expect("window has at least one frame"))
        }
    }
}

/// Checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: NetworkConfig,
    #[serde(default)]
    pub epoch: usize,
}

/// A network configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub store: ParamStore,
}

impl Network {
    /// Initializes every parameter with a seeded RNG by running one forward
    /// pass in creation mode.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        {
            let mut ctx = Ctx::create(&mut store, &mut rng);
            let input = NetInput::zeros(1, config.window.max(config.frames_used()), MAX_STRIDE, MAX_STRIDE);
            forward(&mut ctx, &config, &input)?;
        }
        Ok(Self { config, store })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Builds a graph over `input` and returns it with the logits node.
    pub fn graph(&self, input: &NetInput, training: bool) -> Result<(Graph, Var)> {
        let mut ctx = Ctx::read(&self.store, training);
        let logits = forward(&mut ctx, &self.config, input)?;
        Ok((ctx.g, logits))
    }

    /// Inference logits of the last frame.
    pub fn predict(&self, input: &NetInput) -> Result<Tensor> {
        let (g, logits) = self.graph(input, false)?;
        Ok(g.value(logits).clone())
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        write_checkpoint(path, &CheckpointMeta { config: self.config.clone(), epoch }, &self.store)
    }

    /// Loads a checkpoint and checks it against the parameters its
    /// configuration requires.
    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let (meta, store): (CheckpointMeta, ParamStore) = read_checkpoint(path)?;
        let reference = Network::new(meta.config.clone(), 0)?;
        for (name, t) in &reference.store.params {
            match store.params.get(name) {
                Some(s) if s.shape() == t.shape() => {}
                Some(s) => {
                    return Err(Error::Integrity(format!(
                        "checkpoint parameter {name} has shape {:?}, expected {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Integrity(format!("checkpoint lacks parameter {name}"))),
            }
        }
        if store.params.len() != reference.store.params.len() {
            return Err(Error::Integrity("checkpoint has parameters the configuration does not use".into()));
        }
        Ok((Self { config: meta.config, store }, meta.epoch))
    }
}
