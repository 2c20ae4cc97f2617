//! Softmax-regression trainer for the linear classifier.
//!
//! Training runs in f32 on the quantized input values, so the deployed model
//! sees the same inputs it was fitted to. Gradients of each minibatch are
//! computed over fixed shards and summed in shard order, which keeps results
//! identical across thread counts and execution policies.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::formats::{FixedFormat, NumericFormat};
use crate::modelio::{pixel_codes, IdxDataset, LayerRecord, Manifest, WeightContainer};

pub const DEFAULT_TRAIN_SEED: u64 = 20_240_601;
const SHARDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub batch: usize,
    /// Width of the unsigned input format (`u<bits>`).
    pub input_bits: u32,
    pub learning_rate: f32,
    /// Episode after which the rate decays as `lr * sqrt(decay_start / t)`.
    pub decay_start: usize,
    pub classes: usize,
    pub seed: u64,
    #[serde(skip)]
    pub policy: ExecPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 50_000,
            batch: 100,
            input_bits: 3,
            learning_rate: 0.05,
            decay_start: 10_000,
            classes: 10,
            seed: DEFAULT_TRAIN_SEED,
            policy: ExecPolicy::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn input_format(&self) -> Result<NumericFormat> {
        if !(1..=16).contains(&self.input_bits) {
            return Err(Error::Training(format!(
                "input bits must be in 1..=16, got {}",
                self.input_bits
            )));
        }
        Ok(NumericFormat::Fixed(FixedFormat::unsigned(self.input_bits)))
    }

    pub fn rate(&self, episode: usize) -> f32 {
        if episode <= self.decay_start || self.decay_start == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (self.decay_start as f32 / episode as f32).sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub episodes: usize,
    pub seed: u64,
    /// Mean loss over the last 1000 episodes (or all, if fewer).
    pub final_loss: f64,
}

/// Mean softmax cross-entropy of `W x + b` over a batch, with gradients.
/// `w` is `classes x dim` row-major.
pub fn loss_and_grad<T: Float>(
    w: &[T],
    b: &[T],
    xs: &[&[T]],
    labels: &[usize],
    classes: usize,
) -> (T, Vec<T>, Vec<T>) {
    let (gw, gb, loss) = shard_grad(w, b, xs, labels, classes);
    let n = T::from(xs.len().max(1)).unwrap();
    (
        loss / n,
        gw.into_iter().map(|g| g / n).collect(),
        gb.into_iter().map(|g| g / n).collect(),
    )
}

/// Summed (unnormalized) gradients and loss of a shard.
fn shard_grad<T: Float>(w: &[T], b: &[T], xs: &[&[T]], labels: &[usize], classes: usize) -> (Vec<T>, Vec<T>, T) {
    let dim = b.len().max(1);
    let dim = w.len() / dim;
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); classes];
    let mut loss = T::zero();
    let mut z = vec![T::zero(); classes];
    for (x, &y) in xs.iter().zip(labels) {
        for (c, zc) in z.iter_mut().enumerate() {
            let row = &w[c * dim..(c + 1) * dim];
            *zc = row.iter().zip(x.iter()).fold(b[c], |s, (&wv, &xv)| s + wv * xv);
        }
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = z.iter().fold(T::zero(), |s, &v| s + (v - m).exp());
        loss = loss + sum.ln() + m - z[y];
        for c in 0..classes {
            let mut d = (z[c] - m).exp() / sum;
            if c == y {
                d = d - T::one();
            }
            gb[c] = gb[c] + d;
            for (g, &xv) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x.iter()) {
                *g = *g + d * xv;
            }
        }
    }
    (gw, gb, loss)
}

/// Dequantized inputs of every sample, as f32 in `[0, 1)`.
fn quantized_inputs(data: &IdxDataset, fmt: NumericFormat) -> Vec<f32> {
    let values: Vec<f32> = pixel_codes(&(0..=255u8).collect::<Vec<_>>(), fmt)
        .into_iter()
        .map(|c| fmt.value(c) as f32)
        .collect();
    data.images.iter().map(|&p| values[p as usize]).collect()
}

/// Trains a `classes x pixels` linear classifier and packages it as a container.
pub fn train_linear(data: &IdxDataset, cfg: &TrainConfig) -> Result<(WeightContainer, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if cfg.batch == 0 || cfg.episodes == 0 {
        return Err(Error::Training("episodes and batch size must be positive".into()));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l as usize >= cfg.classes) {
        return Err(Error::Training(format!("label {l} outside {} classes", cfg.classes)));
    }
    let fmt = cfg.input_format()?;
    let dim = data.pixels();
    let inputs = quantized_inputs(data, fmt);
    let classes = cfg.classes;
    let mut w = vec![0f32; classes * dim];
    let mut b = vec![0f32; classes];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut recent = std::collections::VecDeque::with_capacity(1000);

    let shard_len = cfg.batch.div_ceil(SHARDS);
    for t in 1..=cfg.episodes {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..data.len())).collect();
        let shards: Vec<&[usize]> = idx.chunks(shard_len).collect();
        let parts = exec::map_slice(cfg.policy, &shards, |s| {
            let xs: Vec<&[f32]> = s.iter().map(|&i| &inputs[i * dim..(i + 1) * dim]).collect();
            let ys: Vec<usize> = s.iter().map(|&i| data.labels[i] as usize).collect();
            shard_grad(&w, &b, &xs, &ys, classes)
        });
        let step = cfg.rate(t) / cfg.batch as f32;
        let mut loss = 0f32;
        for (gw, gb, l) in parts {
            w.iter_mut().zip(&gw).for_each(|(wv, g)| *wv -= step * g);
            b.iter_mut().zip(&gb).for_each(|(bv, g)| *bv -= step * g);
            loss += l;
        }
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss diverged at episode {t}")));
        }
        if recent.len() == 1000 {
            recent.pop_front();
        }
        recent.push_back(loss as f64 / cfg.batch as f64);
    }

    let manifest = Manifest {
        name: "linear".into(),
        arch: "linear".into(),
        input_shape: vec![dim],
        input_format: Some(fmt.to_string()),
        ..Manifest::default()
    };
    let mut manifest = manifest;
    manifest.extra.insert("train_seed".into(), cfg.seed.into());
    manifest.extra.insert("episodes".into(), cfg.episodes.into());
    let container = WeightContainer {
        manifest,
        layers: vec![LayerRecord::dense("dense", classes, dim, w, b)],
    };
    let report = TrainReport {
        episodes: cfg.episodes,
        seed: cfg.seed,
        final_loss: recent.iter().sum::<f64>() / recent.len() as f64,
    };
    Ok((container, report))
}

/// Input codes of every sample in the container's input format.
pub fn dataset_codes(data: &IdxDataset, fmt: NumericFormat) -> Vec<Vec<u32>> {
    (0..data.len()).map(|i| pixel_codes(data.image(i), fmt)).collect()
}
