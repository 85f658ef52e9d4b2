//! Encoder-decoder segmentation network with dropout, trained from scratch.
//!
//! Each level runs two `conv3x3 -> batch norm -> ReLU` units followed by a
//! dropout layer. The encoder halves the resolution with 2x2 max pooling; the
//! decoder doubles it with nearest-neighbour upsampling and a `conv3x3 -> BN
//! -> ReLU` unit, concatenates the matching encoder output and runs another
//! block. A 1x1 convolution and a softmax produce the class probabilities.
//!
//! Forward modes differ only in batch-norm statistics and dropout:
//!
//! | mode            | batch norm         | dropout |
//! |-----------------|--------------------|---------|
//! | `Train`         | batch statistics   | on      |
//! | `McDropout`     | running statistics | on      |
//! | `Deterministic` | running statistics | off     |

pub mod augment;
pub mod layers;
mod net;
pub mod real;
pub mod train;
pub mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BScan, Grid, LabelMap};
use crate::rng::{derive_path, rng_from, Rng};
use layers::{cross_entropy, softmax, Act, BnStats};
use net::Net;
use real::Real;
use weights::BnP;

pub use layers::DropoutStyle;
pub use train::{train, TrainConfig, TrainOutcome, TrainingLog};
pub use weights::{init_weights, load_weights, save_weights, WeightStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub dropout_style: DropoutStyle,
    pub kernel_size: usize,
    pub input_rows: usize,
    pub input_cols: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 4,
            channels: vec![16, 32, 64, 128],
            num_classes: 7,
            dropout_rate: 0.2,
            dropout_style: DropoutStyle::Channel,
            kernel_size: 3,
            input_rows: 64,
            input_cols: 128,
        }
    }
}

impl NetworkConfig {
    /// Five levels with 64 to 1024 channels on 496x512 inputs, 11 classes,
    /// dropout 0.4.
    pub fn full_scale() -> Self {
        NetworkConfig {
            depth: 5,
            channels: vec![64, 128, 256, 512, 1024],
            num_classes: 11,
            dropout_rate: 0.4,
            input_rows: 496,
            input_cols: 512,
            ..Self::default()
        }
    }

    /// Depth 2, two channels, 8x8 inputs.
    pub fn micro() -> Self {
        NetworkConfig {
            depth: 2,
            channels: vec![2, 2],
            num_classes: 3,
            input_rows: 8,
            input_cols: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.channels.len() != self.depth {
            return Err(Error::config(format!(
                "{} channel counts for depth {}",
                self.channels.len(),
                self.depth
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config("num_classes must lie in 2..=255"));
        }
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return Err(Error::config(format!(
                "dropout_rate {} outside (0, 1)",
                self.dropout_rate
            )));
        }
        if self.kernel_size != 3 {
            return Err(Error::config("kernel_size is fixed at 3"));
        }
        let f = 1usize << (self.depth - 1);
        if self.input_rows == 0
            || self.input_cols == 0
            || self.input_rows % f != 0
            || self.input_cols % f != 0
        {
            return Err(Error::config(format!(
                "input {}x{} not divisible by {f}",
                self.input_rows, self.input_cols
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Train,
    McDropout,
    Deterministic,
}

/// `K x rows x cols` softmax output, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilityMap {
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl ClassProbabilityMap {
    pub fn plane(&self, k: usize) -> &[f32] {
        let p = self.rows * self.cols;
        &self.data[k * p..(k + 1) * p]
    }

    pub fn prob(&self, k: usize, r: usize, c: usize) -> f32 {
        self.data[(k * self.rows + r) * self.cols + c]
    }

    /// Most probable class per pixel; ties go to the lower index.
    pub fn argmax(&self) -> LabelMap {
        Grid::from_fn(self.rows, self.cols, |r, c| {
            let mut best = 0;
            for k in 1..self.classes {
                if self.prob(k, r, c) > self.prob(best, r, c) {
                    best = k;
                }
            }
            best as u8
        })
    }

    /// Largest deviation of a pixel's class sum from one, and whether every
    /// entry is nonnegative.
    pub fn simplex_error(&self) -> (f64, bool) {
        let p = self.rows * self.cols;
        let mut worst = 0f64;
        for j in 0..p {
            let s: f64 = (0..self.classes).map(|k| self.data[k * p + j] as f64).sum();
            worst = worst.max((s - 1.0).abs());
        }
        (worst, self.data.iter().all(|&v| v >= 0.0))
    }
}

/// `n` Monte-Carlo dropout predictions of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionStack {
    pub maps: Vec<ClassProbabilityMap>,
    pub seeds: Vec<u64>,
    pub dropout: f64,
}

impl PredictionStack {
    pub fn validate(&self) -> Result<()> {
        if self.maps.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: self.maps.len(),
            });
        }
        let first = &self.maps[0];
        for m in &self.maps[1..] {
            if (m.classes, m.rows, m.cols) != (first.classes, first.rows, first.cols) {
                return Err(Error::shape(
                    format!("{}x{}x{}", first.classes, first.rows, first.cols),
                    format!("{}x{}x{}", m.classes, m.rows, m.cols),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

fn pack<T: Real>(images: &[&BScan], config: &NetworkConfig) -> Result<Act<T>> {
    let (h, w) = (config.input_rows, config.input_cols);
    let mut x = Act::zeros(1, images.len(), h, w);
    for (n, img) in images.iter().enumerate() {
        if img.shape() != (h, w) {
            return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", img.rows(), img.cols())));
        }
        for (d, &v) in x.data[n * h * w..(n + 1) * h * w].iter_mut().zip(img.as_slice()) {
            *d = T::lit(v as f64);
        }
    }
    Ok(x)
}

fn unpack<T: Real>(probs: &Act<T>) -> Vec<ClassProbabilityMap> {
    let hw = probs.h * probs.w;
    let p = probs.plane();
    (0..probs.n)
        .map(|n| {
            let mut data = Vec::with_capacity(probs.c * hw);
            for k in 0..probs.c {
                data.extend(probs.data[k * p + n * hw..][..hw].iter().map(|v| v.f64() as f32));
            }
            ClassProbabilityMap {
                classes: probs.c,
                rows: probs.h,
                cols: probs.w,
                data,
            }
        })
        .collect()
}

/// Runs a batch through the network. `rngs` supplies one dropout stream per
/// image and is ignored in deterministic mode.
pub fn forward_batch<T: Real>(
    weights: &WeightStore<T>,
    images: &[&BScan],
    mode: ForwardMode,
    rngs: &mut [Rng],
) -> Result<Vec<ClassProbabilityMap>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let x = pack::<T>(images, &weights.config)?;
    if mode != ForwardMode::Deterministic && rngs.len() != images.len() {
        return Err(Error::shape(format!("{} rngs", images.len()), rngs.len()));
    }
    let mut net = Net::new(weights);
    let logits = match mode {
        ForwardMode::Deterministic => net.forward_infer(&x, None)?,
        ForwardMode::McDropout => net.forward_infer(&x, Some(rngs))?,
        ForwardMode::Train => net.forward_train(x, Some(rngs))?.0,
    };
    Ok(unpack(&softmax(&logits)))
}

/// Single-image forward pass. `rng` is required unless `mode` is
/// deterministic.
pub fn forward<T: Real>(
    weights: &WeightStore<T>,
    image: &BScan,
    mode: ForwardMode,
    rng: Option<&mut Rng>,
) -> Result<ClassProbabilityMap> {
    let mut rngs = match (mode, rng) {
        (ForwardMode::Deterministic, _) => Vec::new(),
        (_, Some(r)) => vec![r.clone()],
        (_, None) => return Err(Error::config(format!("{mode:?} forward needs an rng"))),
    };
    let out = forward_batch(weights, &[image], mode, &mut rngs)?;
    Ok(out.into_iter().next().expect("one output"))
}

/// Deterministic predictions for many images, `chunk` at a time.
pub fn predict_all(weights: &WeightStore, images: &[&BScan], chunk: usize) -> Result<Vec<ClassProbabilityMap>> {
    let mut out = Vec::with_capacity(images.len());
    for c in images.chunks(chunk.max(1)) {
        out.extend(forward_batch(weights, c, ForwardMode::Deterministic, &mut [])?);
    }
    Ok(out)
}

/// Passes evaluated together in one batch by [`mc_sample`].
pub const MC_CHUNK: usize = 10;

/// `n` MC-dropout passes; pass `i` draws its masks from `derive_path(seed, [i])`,
/// so the result does not depend on how passes are batched.
pub fn mc_sample(weights: &WeightStore, image: &BScan, n: usize, seed: u64) -> Result<PredictionStack> {
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive_path(seed, &[i])).collect();
    let mut maps = Vec::with_capacity(n);
    for chunk in seeds.chunks(MC_CHUNK) {
        let images = vec![image; chunk.len()];
        let mut rngs: Vec<Rng> = chunk.iter().map(|&s| rng_from(s)).collect();
        maps.extend(forward_batch(weights, &images, ForwardMode::McDropout, &mut rngs)?);
    }
    Ok(PredictionStack {
        maps,
        seeds,
        dropout: weights.config.dropout_rate,
    })
}

/// Loss, gradients and the batch-norm statistics of one train-mode pass.
pub struct Gradients<T> {
    pub loss: f64,
    /// One buffer per tensor of the store; running statistics stay zero.
    pub grads: Vec<Vec<T>>,
    pub(crate) bn_stats: Vec<(BnP, BnStats)>,
}

/// Mean cross-entropy over all batch pixels and its gradient with respect to
/// every trainable tensor. Dropout masks come from `rngs` (one per example);
/// pass `None` to disable dropout.
pub fn loss_and_gradients<T: Real>(
    weights: &WeightStore<T>,
    batch: &[(&BScan, &LabelMap)],
    rngs: Option<&mut [Rng]>,
) -> Result<Gradients<T>> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let k = weights.config.num_classes;
    let images: Vec<&BScan> = batch.iter().map(|b| b.0).collect();
    let x = pack::<T>(&images, &weights.config)?;
    let mut labels = Vec::with_capacity(x.plane());
    for (img, lab) in batch {
        img.check_shape(lab)?;
        if let Some(&bad) = lab.as_slice().iter().find(|&&l| l as usize >= k) {
            return Err(Error::config(format!("label {bad} outside 0..{k}")));
        }
        labels.extend_from_slice(lab.as_slice());
    }
    if let Some(r) = &rngs {
        if r.len() != batch.len() {
            return Err(Error::shape(format!("{} rngs", batch.len()), r.len()));
        }
    }
    let mut net = Net::new(weights);
    let (logits, mut tape) = net.forward_train(x, rngs)?;
    let (loss, dlogits) = cross_entropy(&logits, &labels);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let bn_stats = std::mem::take(&mut tape.bn_stats);
    let mut grads: Vec<Vec<T>> = weights
        .tensors
        .iter()
        .map(|t| vec![T::zero(); t.data.len()])
        .collect();
    net.backward(tape, dlogits, &mut grads);
    Ok(Gradients { loss, grads, bn_stats })
}
