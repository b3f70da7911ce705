use std::fs;
use std::path::Path;

use log::info;
use motseg_core::annotation::{generate_masks, write_review_overlays, SceneRecord};
use motseg_core::autograd::{par, IGNORE_LABEL};
use motseg_core::datamodel::{load_sequence_with, DatasetIndex, Image, LoadOptions, MotionMask, MOVING};
use motseg_core::evaluation::{
    argmax_labels, benchmark_fps, evaluate_dataset, format_table, write_bench_csv, write_reports_csv, BenchRow, EvalOptions,
};
use motseg_core::flow::{flow_to_colorwheel, DEFAULT_MAGNITUDE_CAP};
use motseg_core::network::{EncoderConfig, NetInput, Network, NetworkConfig, Preset, Variant};
use motseg_core::synth::{generate_dataset, DatasetSpec, FlowNoise};
use motseg_core::training::{train, TrainConfig};
use motseg_core::{Error, Result};

use crate::manifest::RunManifest;
use crate::{AnnotateArgs, BenchArgs, Cli, Command, EvalArgs, ParamsArgs, SynthArgs, TrainArgs, VizArgs};

pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Annotate(a) => annotate(a),
        Command::Synth(a) => synth(a, seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a, seed),
        Command::Viz(a) => viz(a),
        Command::Params(a) => params(a),
    }
}

fn variants(names: &[String]) -> Result<Vec<Variant>> {
    if names.is_empty() {
        return Ok(Variant::ALL.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

fn annotate(a: &AnnotateArgs) -> Result<()> {
    let mut scenes = Vec::new();
    let entries = fs::read_dir(&a.root).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(a.root.clone()),
        _ => Error::Io { path: a.root.clone(), source },
    })?;
    for entry in entries.flatten() {
        let path = entry.path().join("scene.toml");
        if path.is_file() {
            scenes.push(path);
        }
    }
    scenes.sort();
    if !a.sequences.is_empty() {
        scenes.retain(|p| {
            let id = p.parent().and_then(Path::file_name).map(|s| s.to_string_lossy().into_owned());
            id.is_some_and(|id| a.sequences.contains(&id))
        });
    }
    if scenes.is_empty() {
        return Err(Error::NotFound(a.root.join("<sequence>/scene.toml")));
    }
    let mut manifest = RunManifest::start("annotate", 0);
    let mut total = 0;
    for path in &scenes {
        let scene = SceneRecord::load(path)?;
        total += generate_masks(&scene, &a.root)?;
        if a.review {
            write_review_overlays(&scene, &a.root)?;
        }
    }
    println!("annotated {} sequences, {total} masks", scenes.len());
    manifest.outputs = scenes.iter().filter_map(|p| p.parent().map(|d| d.join("mask"))).collect();
    manifest.finish(&a.root)
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| Error::NotFound(p.clone()))?;
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
        }
        None => DatasetSpec::default(),
    };
    if let Some(n) = a.sequences {
        spec.num_sequences = n;
    }
    if let Some(n) = a.frames {
        spec.num_frames = n;
    }
    if let Some(h) = a.height {
        spec.height = h;
    }
    if let Some(w) = a.width {
        spec.width = w;
    }
    if let Some(p) = &a.prefix {
        spec.sequence_prefix = p.clone();
    }
    spec.ignore_disocclusions |= a.ignore_disocclusions;
    if a.no_flow_noise {
        spec.flow_noise = FlowNoise { dropout: 0.0, spurious: 0.0, sigma: 0.0 };
    }
    let mut manifest = RunManifest::start("synth", seed).with_config(a.config.as_deref(), &spec)?;
    let summary = generate_dataset(&spec, seed, &a.out)?;
    println!("wrote {} sequences to {}", summary.sequences.len(), a.out.display());
    manifest.outputs = summary.sequences.iter().map(|s| a.out.join(s)).collect();
    manifest.finish(&a.out)
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = &a.variant {
        cfg.network.variant = v.parse()?;
    }
    if let Some(p) = &a.preset {
        cfg.network.encoder = EncoderConfig::preset(p.parse::<Preset>()?);
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(w) = a.window {
        cfg.network.window = w;
    }
    if let Some(s) = &a.stages {
        cfg.network.stages = s.clone();
    }
    if a.max_batches.is_some() {
        cfg.max_batches_per_epoch = a.max_batches;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut manifest = RunManifest::start("train", cfg.seed).with_config(a.config.as_deref(), &cfg)?;
    let load = LoadOptions { flow_source: a.flow.into(), allow_missing_masks: false };
    let t = cfg.network.window;
    let train_set = DatasetIndex::scan(&a.data)?.load_windows(t, &load)?;
    let val_set = match &a.val {
        Some(v) => DatasetIndex::scan(v)?.load_windows(t, &load)?,
        None => Vec::new(),
    };
    info!(
        "training {} on {} windows ({} validation), {} parameters",
        cfg.network.variant,
        train_set.len(),
        val_set.len(),
        Network::new(cfg.network.clone(), cfg.seed)?.param_count()
    );
    let report = train(&cfg, &train_set, &val_set, Some(&a.out))?;
    let last = report.history.last().expect("at least one epoch");
    println!(
        "{}: {} epochs, final loss {:.4}, best epoch {}",
        cfg.network.variant,
        report.history.len(),
        last.train_loss,
        report.best_epoch
    );
    manifest.outputs = ["metrics.csv", "config.toml", "best.ckpt", "last.ckpt"].iter().map(|f| a.out.join(f)).collect();
    manifest.finish(&a.out)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut manifest = RunManifest::start("eval", 0);
    let opts = EvalOptions {
        batch_size: a.batch_size,
        load: LoadOptions { flow_source: a.flow.into(), allow_missing_masks: false },
        fps_iterations: a.fps_iters,
        ..EvalOptions::default()
    };
    let mut reports = Vec::new();
    for path in &a.checkpoints {
        let (net, _) = Network::load(path)?;
        reports.push(evaluate_dataset(&net, &a.data, &opts)?);
    }
    print!("{}", format_table(&reports));
    if let Some(csv) = &a.csv {
        write_reports_csv(csv, &reports)?;
        manifest.outputs = vec![csv.clone()];
        manifest.finish(csv.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
    }
    Ok(())
}

fn bench(a: &BenchArgs, seed: u64) -> Result<()> {
    let mut manifest = RunManifest::start("bench", seed);
    par::set_enabled(!a.sequential);
    let preset: Preset = a.preset.parse()?;
    let input = NetInput::zeros(1, a.window, a.height, a.width);
    let mut rows = Vec::new();
    println!("{:<16} {:>10} {:>12} {:>12}", "variant", "fps", "median_ms", "p95_ms");
    for v in variants(&a.variants)? {
        let cfg = NetworkConfig { window: a.window, ..NetworkConfig::new(v, preset) };
        let net = Network::new(cfg, seed)?;
        let r = benchmark_fps(&net, &input, a.warmup, a.iters)?;
        println!("{:<16} {:>10.2} {:>12.2} {:>12.2}", v.name(), r.median_fps, r.median_latency_ms, r.p95_latency_ms);
        rows.push(BenchRow {
            variant: v.name().into(),
            preset: a.preset.clone(),
            height: a.height,
            width: a.width,
            window: a.window,
            iterations: r.iterations,
            median_fps: r.median_fps,
            median_latency_ms: r.median_latency_ms,
            p95_latency_ms: r.p95_latency_ms,
        });
    }
    if let Some(csv) = &a.csv {
        write_bench_csv(csv, &rows)?;
        manifest.outputs = vec![csv.clone()];
        manifest.finish(csv.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
    }
    Ok(())
}

fn mask_image(m: &MotionMask) -> Image {
    let mut img = Image::filled(m.height(), m.width(), [0.0; 3]);
    for y in 0..m.height() {
        for x in 0..m.width() {
            let v = match m.get(y, x) {
                MOVING => 1.0,
                IGNORE_LABEL => 0.5,
                _ => 0.0,
            };
            img.set_pixel(y, x, [v; 3]);
        }
    }
    img
}

/// Blank rows between panel rows.
pub const PANEL_MARGIN: usize = 4;

/// Stacks equally wide images top to bottom, each followed by a white margin.
fn vstack(rows: &[Image]) -> Result<Image> {
    let w = rows[0].width();
    let mut data = Vec::new();
    for r in rows {
        if r.width() != w {
            return Err(Error::Argument("panel rows differ in width".into()));
        }
        data.extend_from_slice(r.data());
        data.extend(std::iter::repeat_n(1.0, PANEL_MARGIN * w * 3));
    }
    Image::new(data.len() / (w * 3), w, data)
}

/// Gray tile crossed in red, standing in for a missing mask.
fn absent(h: usize, w: usize) -> Image {
    let mut img = Image::filled(h, w, [0.5; 3]);
    for y in 0..h {
        let x = y * w / h.max(1);
        for xx in [x, w - 1 - x] {
            img.set_pixel(y, xx.min(w - 1), [1.0, 0.0, 0.0]);
        }
    }
    img
}

fn viz(a: &VizArgs) -> Result<()> {
    let mut manifest = RunManifest::start("viz", 0);
    let nets = a.checkpoints.iter().map(|p| Network::load(p).map(|(n, _)| n)).collect::<Result<Vec<_>>>()?;
    let load = LoadOptions { flow_source: a.flow.into(), allow_missing_masks: true };
    let sample = load_sequence_with(&a.data, &a.sequence, a.index, 1, &load)?;
    let (h, w) = (sample.height(), sample.width());
    let mut rows = vec![
        sample.frames[0].image.clone(),
        flow_to_colorwheel(&sample.flows[0], DEFAULT_MAGNITUDE_CAP)?,
        sample.target().map_or_else(|| absent(h, w), mask_image),
    ];
    for net in &nets {
        let window = net.config.window;
        if window > a.index + 1 {
            return Err(Error::Argument(format!(
                "{} needs {window} frames but frame {} of {} has only {} before it",
                net.config.variant,
                a.index,
                a.sequence,
                a.index + 1
            )));
        }
        let s = load_sequence_with(&a.data, &a.sequence, a.index, window, &load)?;
        let input = NetInput::from_samples(std::slice::from_ref(&s), DEFAULT_MAGNITUDE_CAP)?;
        let pred = argmax_labels(&net.predict(&input)?)?;
        rows.push(mask_image(&pred[0]));
    }
    vstack(&rows)?.save_png(&a.out)?;
    println!("wrote {} ({} rows)", a.out.display(), rows.len());
    manifest.outputs = vec![a.out.clone()];
    manifest.finish(a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))
}

fn params(a: &ParamsArgs) -> Result<()> {
    let preset: Preset = a.preset.parse()?;
    println!("{:<16} {:>12}", "variant", "parameters");
    for v in variants(&a.variants)? {
        let cfg = NetworkConfig { window: a.window, ..NetworkConfig::new(v, preset) };
        println!("{:<16} {:>12}", v.name(), Network::new(cfg, 0)?.param_count());
    }
    Ok(())
}
