//! Adam training with step learning-rate decay and validation-Dice
//! checkpoint selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::weights::{init_weights, ParamKind, WeightStore};
use super::{loss_and_gradients, predict_all, Gradients, NetworkConfig};
use crate::error::{Error, Result};
use crate::grid::{BScan, LabelMap};
use crate::rng::{derive_seed, rng_for, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub batch_size: usize,
    pub augmentation: AugmentConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            learning_rate: 1e-3,
            lr_decay_factor: 0.2,
            lr_decay_every_epochs: 5,
            batch_size: 4,
            augmentation: AugmentConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate 1e-4, for the full-scale network and data volume.
    pub fn full_scale() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lr_decay_factor", self.lr_decay_factor),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.batch_size == 0 || self.lr_decay_every_epochs == 0 {
            return Err(Error::config("batch_size and lr_decay_every_epochs must be positive"));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("bn_momentum", self.bn_momentum)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        self.augmentation.validate()
    }

    /// Learning rate used during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_factor.powi((epoch / self.lr_decay_every_epochs) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,lr,val_dice\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.lr, e.val_dice));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("epoch,loss,lr,val_dice") {
            return Err(Error::format("training log", "missing header"));
        }
        let bad = |l: &str| Error::format("training log", format!("bad row {l:?}"));
        let epochs = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 4 {
                    return Err(bad(l));
                }
                Ok(EpochRecord {
                    epoch: f[0].parse().map_err(|_| bad(l))?,
                    loss: f[1].parse().map_err(|_| bad(l))?,
                    lr: f[2].parse().map_err(|_| bad(l))?,
                    val_dice: f[3].parse().map_err(|_| bad(l))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainingLog { epochs })
    }

    /// First epoch with the highest validation Dice.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .fold(None, |best: Option<&EpochRecord>, e| match best {
                Some(b) if b.val_dice >= e.val_dice => Some(b),
                _ => Some(e),
            })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: WeightStore,
    pub log: TrainingLog,
    /// One-based epoch of the returned checkpoint, 0 for the initial weights.
    pub best_epoch: usize,
    /// Set when a non-finite loss or weight stopped training early.
    pub diverged: bool,
}

/// Per-class Dice pooled over all maps, averaged over the `k` classes. A class
/// absent from both prediction and reference scores 1.
pub fn macro_dice(pred: &[LabelMap], truth: &[LabelMap], k: usize) -> f64 {
    let mut inter = vec![0u64; k];
    let mut sizes = vec![0u64; k];
    for (p, t) in pred.iter().zip(truth) {
        for (&a, &b) in p.as_slice().iter().zip(t.as_slice()) {
            if a == b {
                inter[a as usize] += 1;
            }
            sizes[a as usize] += 1;
            sizes[b as usize] += 1;
        }
    }
    (0..k)
        .map(|c| if sizes[c] == 0 { 1.0 } else { 2.0 * inter[c] as f64 / sizes[c] as f64 })
        .sum::<f64>()
        / k as f64
}

pub fn validation_dice(weights: &WeightStore, val: &[(BScan, LabelMap)]) -> Result<f64> {
    let images: Vec<&BScan> = val.iter().map(|v| &v.0).collect();
    let preds: Vec<LabelMap> = predict_all(weights, &images, 8)?.iter().map(|p| p.argmax()).collect();
    let truth: Vec<LabelMap> = val.iter().map(|v| v.1.clone()).collect();
    Ok(macro_dice(&preds, &truth, weights.config.num_classes))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(store: &WeightStore) -> Self {
        let zeros = || store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Adam { m: zeros(), v: zeros() }
    }

    fn step(&mut self, store: &mut WeightStore, g: &Gradients<f32>, lr: f64, cfg: &TrainConfig) {
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, tensor) in store.tensors.iter_mut().enumerate() {
            if !tensor.kind.trainable() {
                continue;
            }
            for (j, w) in tensor.data.iter_mut().enumerate() {
                let gj = g.grads[i][j] as f64;
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gj;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gj * gj;
                *w -= (lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon)) as f32;
            }
        }
        for (bn, stats) in &g.bn_stats {
            let mom = cfg.bn_momentum;
            for (idx, src) in [(bn.mean, &stats.mean), (bn.var, &stats.var_unbiased)] {
                debug_assert!(matches!(
                    store.tensors[idx].kind,
                    ParamKind::RunningMean | ParamKind::RunningVar
                ));
                for (r, &s) in store.tensors[idx].data.iter_mut().zip(src.iter()) {
                    *r = ((1.0 - mom) * *r as f64 + mom * s) as f32;
                }
            }
        }
    }
}

/// Trains from Kaiming initialisation. `progress` is called after every
/// epoch.
pub fn train(
    train_set: &[(BScan, LabelMap)],
    val_set: &[(BScan, LabelMap)],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    net.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config("training and validation sets must be nonempty"));
    }
    let mut weights = init_weights(net, derive_seed(cfg.seed, 0))?;
    let mut best = weights.clone();
    let mut best_epoch = 0;
    let mut best_dice = f64::NEG_INFINITY;
    let mut log = TrainingLog::default();
    let mut adam = Adam::new(&weights);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng_for(cfg.seed, &[1, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut diverged = false;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<(BScan, LabelMap)> = idx
                .iter()
                .map(|&i| {
                    let mut rng = rng_for(cfg.seed, &[2, epoch as u64, i as u64]);
                    augment(&train_set[i].0, &train_set[i].1, &cfg.augmentation, &mut rng)
                })
                .collect();
            let batch: Vec<(&BScan, &LabelMap)> = samples.iter().map(|(x, y)| (x, y)).collect();
            let mut rngs: Vec<Rng> = (0..idx.len())
                .map(|n| rng_for(cfg.seed, &[3, epoch as u64, b as u64, n as u64]))
                .collect();
            let g = match loss_and_gradients(&weights, &batch, Some(&mut rngs)) {
                Ok(g) => g,
                Err(Error::NonFinite(what)) => {
                    log::warn!("epoch {}: non-finite value at {what}", epoch + 1);
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            adam.step(&mut weights, &g, lr, cfg);
            if !weights.all_finite() {
                log::warn!("epoch {}: weights became non-finite", epoch + 1);
                diverged = true;
                break;
            }
            loss_sum += g.loss;
            batches += 1;
        }
        if diverged {
            return Ok(TrainOutcome {
                weights: best,
                log,
                best_epoch,
                diverged: true,
            });
        }
        let val_dice = match validation_dice(&weights, val_set) {
            Ok(d) => d,
            Err(Error::NonFinite(what)) => {
                log::warn!("epoch {}: non-finite validation output at {what}", epoch + 1);
                return Ok(TrainOutcome {
                    weights: best,
                    log,
                    best_epoch,
                    diverged: true,
                });
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / batches as f64,
            lr,
            val_dice,
        };
        progress(&record);
        log.epochs.push(record);
        if val_dice > best_dice {
            best_dice = val_dice;
            best = weights.clone();
            best_epoch = epoch + 1;
        }
    }
    Ok(TrainOutcome {
        weights: best,
        log,
        best_epoch,
        diverged: false,
    })
}
