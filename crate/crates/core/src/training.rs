//! Supervised training with class-balanced cross-entropy and Adam.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use motseg_autograd::{Graph, Tensor, IGNORE_LABEL};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{compute_stats, DatasetStats, SequenceSample, NUM_CLASSES};
use crate::error::{Error, IoContext, Result};
use crate::evaluation::{evaluate_samples, EvalOptions};
use crate::flow::DEFAULT_MAGNITUDE_CAP;
use crate::network::{NetInput, Network, NetworkConfig};

pub use crate::network::replicate_first_layer;

/// `w_k = N / (K n_k)` over non-ignored target pixels.
pub fn compute_class_weights(stats: &DatasetStats) -> Result<[f64; NUM_CLASSES]> {
    let counts = stats.pixel_count_per_class;
    let total: u64 = counts.iter().sum();
    let mut w = [0.0; NUM_CLASSES];
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::InsufficientData(format!("class {k} has no labelled pixels")));
        }
        w[k] = total as f64 / (NUM_CLASSES as f64 * n as f64);
    }
    Ok(w)
}

/// Class-weighted cross-entropy of `[n, k, h, w]` logits against per-pixel
/// labels, averaged over non-ignored pixels. Returns 0 when every pixel is
/// ignored.
pub fn weighted_cross_entropy(logits: &Tensor, targets: &[u8], weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new(false);
    let x = g.input(logits.clone());
    let loss = g.weighted_cross_entropy(x, targets, weights)?;
    Ok(g.value(loss).data()[0])
}

/// Adam with decoupled weight decay on multi-dimensional weights.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let decay = if p.shape().len() > 1 { self.lr * self.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= decay * *w + self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub flow_cap: f64,
    /// Stop an epoch after this many batches.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            seed: 0,
            flow_cap: DEFAULT_MAGNITUDE_CAP,
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Argument("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || !(self.flow_cap > 0.0) {
            return Err(Error::Argument("weight decay must be >= 0 and flow cap > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_moving_iou: Option<f64>,
    pub val_miou: Option<f64>,
    /// Wall time; kept out of the metric log so logs are reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub network: Network,
}

/// One optimization step on a batch; returns the loss before the update.
pub fn train_step(net: &mut Network, adam: &mut Adam, batch: &[&SequenceSample], weights: &[f64], flow_cap: f64) -> Result<f64> {
    let input = NetInput::from_samples(batch, flow_cap)?;
    let mut targets = Vec::new();
    for s in batch {
        let t = s.target().ok_or_else(|| {
            Error::Argument(format!("window {}:{} has no target mask", s.sequence_id, s.end_index))
        })?;
        targets.extend_from_slice(t.labels());
    }
    let (mut g, logits) = net.graph(&input, true)?;
    let loss = g.weighted_cross_entropy(logits, &targets, weights)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Divergence(format!("loss became {value} at step {}", adam.steps() + 1)));
    }
    let grads = g.backward(loss)?.params();
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::Divergence(format!("non-finite gradient for {name} at step {}", adam.steps() + 1)));
    }
    let obs = g.take_bn_observations();
    adam.update(&mut net.store.params, &grads);
    net.store.update_running_stats(&obs);
    Ok(value)
}

/// Pixels that are not ignored in the last-frame targets.
fn labelled_pixels(samples: &[SequenceSample]) -> usize {
    samples
        .iter()
        .filter_map(|s| s.target())
        .map(|m| m.labels().iter().filter(|&&l| l != IGNORE_LABEL).count())
        .sum()
}

/// Trains a network, logging per-epoch metrics to `out_dir/metrics.csv` and
/// writing `best.ckpt` and `last.ckpt` when `out_dir` is given.
pub fn train(cfg: &TrainConfig, train_set: &[SequenceSample], val_set: &[SequenceSample], out_dir: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || labelled_pixels(train_set) == 0 {
        return Err(Error::InsufficientData("training set has no labelled pixels".into()));
    }
    let weights = compute_class_weights(&compute_stats(train_set)?)?;
    let mut net = Network::new(cfg.network.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).at(dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml()?).at(dir.join("config.toml"))?;
            let path = dir.join("metrics.csv");
            Some(csv::Writer::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    // canonical order before the seeded shuffle
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&train_set[a], &train_set[b]);
        (&x.sequence_id, x.end_index).cmp(&(&y.sequence_id, y.end_index))
    });
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize)> = None;
    let (mut best_ckpt, mut last_ckpt) = (None, None);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_batches_per_epoch.is_some_and(|m| batches >= m) {
                break;
            }
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            match train_step(&mut net, &mut adam, &batch, &weights, cfg.flow_cap) {
                Ok(loss) => total += loss,
                Err(e @ Error::Divergence(_)) => {
                    if let Some(dir) = out_dir {
                        net.save(&dir.join("diverged.ckpt"), epoch)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            batches += 1;
        }
        let train_loss = total / batches.max(1) as f64;
        let (val_moving_iou, val_miou) = if val_set.is_empty() {
            (None, None)
        } else {
            let opts = EvalOptions { flow_cap: cfg.flow_cap, batch_size: cfg.batch_size, ..EvalOptions::default() };
            let r = evaluate_samples(&net, val_set, &opts)?;
            (r.moving_iou, r.miou)
        };
        let m = EpochMetrics { epoch, train_loss, val_moving_iou, val_miou, seconds: start.elapsed().as_secs_f64() };
        info!(
            "epoch {epoch}: loss {train_loss:.4} val moving IoU {} ({:.1}s)",
            val_moving_iou.map_or("-".into(), |v| format!("{v:.4}")),
            m.seconds
        );
        let score = val_moving_iou.unwrap_or(-train_loss);
        let improved = best.is_none_or(|(b, _)| score > b);
        if improved {
            best = Some((score, epoch));
        }
        if let (Some(w), Some(dir)) = (writer.as_mut(), out_dir) {
            w.serialize(&m).map_err(|e| Error::Format(e.to_string()))?;
            w.flush().at(dir.join("metrics.csv"))?;
            let last = dir.join("last.ckpt");
            net.save(&last, epoch)?;
            last_ckpt = Some(last);
            if improved {
                let path = dir.join("best.ckpt");
                net.save(&path, epoch)?;
                best_ckpt = Some(path);
            }
        }
        history.push(m);
    }
    Ok(TrainReport {
        history,
        best_epoch: best.map_or(0, |(_, e)| e),
        best_checkpoint: best_ckpt,
        last_checkpoint: last_ckpt,
        network: net,
    })
}
