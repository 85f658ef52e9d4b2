//! Epistemic uncertainty from a stack of MC-dropout predictions, and the
//! single-pass entropy baseline.
//!
//! For each class `k` the per-pixel population variance across the `n`
//! samples is `σ_k² = (1/n) Σ_i (y_k^(i) − μ_k)²`; the uncertainty is the mean
//! of the `K` class variances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::segnet::{ClassProbabilityMap, PredictionStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    McVariance,
    Entropy,
}

/// How a sample's class value `y_k^(i)` is read from its probability map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleReading {
    /// The softmax probability.
    #[default]
    Soft,
    /// One-hot of the argmax class.
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub values: Grid<f64>,
    pub samples: usize,
    pub dropout: f64,
    pub kind: UncertaintyKind,
}

impl UncertaintyMap {
    pub fn sum(&self) -> f64 {
        self.values.as_slice().iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.as_slice().iter().copied().fold(0.0, f64::max)
    }
}

fn hard_planes(stack: &PredictionStack) -> Vec<ClassProbabilityMap> {
    stack
        .maps
        .iter()
        .map(|m| {
            let arg = m.argmax();
            let mut data = vec![0f32; m.data.len()];
            let p = m.rows * m.cols;
            for (j, &k) in arg.as_slice().iter().enumerate() {
                data[k as usize * p + j] = 1.0;
            }
            ClassProbabilityMap { data, ..m.clone() }
        })
        .collect()
}

/// Welford accumulation of class `k` across the maps.
fn variance_of(maps: &[ClassProbabilityMap], k: usize) -> Grid<f64> {
    let (rows, cols) = (maps[0].rows, maps[0].cols);
    let p = rows * cols;
    let mut mean = vec![0f64; p];
    let mut m2 = vec![0f64; p];
    for (i, m) in maps.iter().enumerate() {
        let n = (i + 1) as f64;
        for (j, &y) in m.plane(k).iter().enumerate() {
            let y = y as f64;
            let d = y - mean[j];
            mean[j] += d / n;
            m2[j] += d * (y - mean[j]);
        }
    }
    let n = maps.len() as f64;
    Grid::from_vec(rows, cols, m2.into_iter().map(|v| (v / n).max(0.0)).collect()).expect("plane size")
}

/// Population variance of class `k` across the stack.
pub fn class_variance(stack: &PredictionStack, k: usize) -> Result<Grid<f64>> {
    stack.validate()?;
    let classes = stack.maps[0].classes;
    if k >= classes {
        return Err(Error::config(format!("class {k} outside 0..{classes}")));
    }
    Ok(variance_of(&stack.maps, k))
}

/// Mean of the `K` class variances, using soft probabilities.
pub fn uncertainty_map(stack: &PredictionStack) -> Result<UncertaintyMap> {
    uncertainty_map_with(stack, SampleReading::Soft)
}

pub fn uncertainty_map_with(stack: &PredictionStack, reading: SampleReading) -> Result<UncertaintyMap> {
    stack.validate()?;
    let hard;
    let maps = match reading {
        SampleReading::Soft => &stack.maps,
        SampleReading::Hard => {
            hard = hard_planes(stack);
            &hard
        }
    };
    let classes = maps[0].classes;
    let (rows, cols) = (maps[0].rows, maps[0].cols);
    let mut acc = vec![0f64; rows * cols];
    for k in 0..classes {
        for (a, v) in acc.iter_mut().zip(variance_of(maps, k).as_slice()) {
            *a += v;
        }
    }
    let values = acc.into_iter().map(|v| v / classes as f64).collect();
    Ok(UncertaintyMap {
        values: Grid::from_vec(rows, cols, values)?,
        samples: stack.len(),
        dropout: stack.dropout,
        kind: UncertaintyKind::McVariance,
    })
}

/// `−Σ_k q_k ln q_k` per pixel with `0 ln 0 = 0`.
pub fn entropy_map(probs: &ClassProbabilityMap) -> UncertaintyMap {
    let p = probs.rows * probs.cols;
    let values = (0..p)
        .map(|j| {
            let h: f64 = (0..probs.classes)
                .map(|k| probs.data[k * p + j] as f64)
                .filter(|&q| q > 0.0)
                .map(|q| -q * q.ln())
                .sum();
            h.max(0.0)
        })
        .collect();
    UncertaintyMap {
        values: Grid::from_vec(probs.rows, probs.cols, values).expect("plane size"),
        samples: 1,
        dropout: 0.0,
        kind: UncertaintyKind::Entropy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn map_from(classes: usize, rows: usize, cols: usize, data: Vec<f32>) -> ClassProbabilityMap {
        ClassProbabilityMap { classes, rows, cols, data }
    }

    fn random_stack(classes: usize, n: usize, rows: usize, cols: usize, seed: u64) -> PredictionStack {
        let mut rng = rng_from(seed);
        let maps = (0..n)
            .map(|_| {
                let p = rows * cols;
                let mut data = vec![0f32; classes * p];
                for j in 0..p {
                    let raw: Vec<f32> = (0..classes).map(|_| rng.gen::<f32>() + 1e-3).collect();
                    let s: f32 = raw.iter().sum();
                    for k in 0..classes {
                        data[k * p + j] = raw[k] / s;
                    }
                }
                map_from(classes, rows, cols, data)
            })
            .collect();
        PredictionStack { maps, seeds: (0..n as u64).collect(), dropout: 0.4 }
    }

    /// Per pixel, per class: mean first, then squared deviations.
    fn two_pass_oracle(stack: &PredictionStack) -> Vec<f64> {
        let m0 = &stack.maps[0];
        let (k, p) = (m0.classes, m0.rows * m0.cols);
        let n = stack.maps.len() as f64;
        (0..p)
            .map(|j| {
                let mut total = 0.0;
                for c in 0..k {
                    let ys: Vec<f64> = stack.maps.iter().map(|m| m.data[c * p + j] as f64).collect();
                    let mu = ys.iter().sum::<f64>() / n;
                    total += ys.iter().map(|y| (y - mu) * (y - mu)).sum::<f64>() / n;
                }
                total / k as f64
            })
            .collect()
    }

    #[test]
    fn identical_samples_give_zero() {
        let s = random_stack(3, 1, 4, 4, 1);
        let stack = PredictionStack { maps: vec![s.maps[0].clone(); 5], seeds: vec![0; 5], dropout: 0.4 };
        assert!(uncertainty_map(&stack).unwrap().values.as_slice().iter().all(|&v| v == 0.0));
        assert!(class_variance(&stack, 2).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_one_pair_gives_quarter() {
        let a = map_from(2, 2, 2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let b = map_from(2, 2, 2, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let stack = PredictionStack { maps: vec![a, b], seeds: vec![0, 1], dropout: 0.4 };
        let v = class_variance(&stack, 0).unwrap();
        assert!(v.as_slice().iter().all(|&x| x == 0.25));
        assert!(uncertainty_map(&stack).unwrap().values.as_slice().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn mean_of_class_variances() {
        // Class 0 flips between 0 and 1 (variance 0.25); class 1 between
        // a and a + 2 sqrt(0.05) (variance 0.05).
        let d = (0.05f64).sqrt() as f32;
        let a = map_from(2, 1, 3, vec![0.0, 0.0, 0.0, 0.1, 0.1, 0.1]);
        let b = map_from(2, 1, 3, vec![1.0, 1.0, 1.0, 0.1 + 2.0 * d, 0.1 + 2.0 * d, 0.1 + 2.0 * d]);
        let stack = PredictionStack { maps: vec![a, b], seeds: vec![0, 1], dropout: 0.4 };
        let u = uncertainty_map(&stack).unwrap();
        for &v in u.values.as_slice() {
            assert!((v - 0.15).abs() < 1e-7, "{v}");
        }
    }

    #[test]
    fn too_few_samples() {
        let s = random_stack(3, 1, 4, 4, 1);
        assert!(matches!(uncertainty_map(&s), Err(Error::TooFewSamples { needed: 2, got: 1 })));
        assert!(class_variance(&random_stack(3, 2, 2, 2, 1), 3).is_err());
    }

    #[test]
    fn matches_two_pass_oracle() {
        for seed in 0..30 {
            let mut rng = rng_from(seed);
            let stack = random_stack(rng.gen_range(2..=5), rng.gen_range(2..=8), 32, 32, seed);
            let u = uncertainty_map(&stack).unwrap();
            for (a, b) in u.values.as_slice().iter().zip(two_pass_oracle(&stack)) {
                assert!((a - b).abs() <= 1e-9);
            }
            assert!(u.max() <= 0.25);
            assert_eq!(u.samples, stack.len());
        }
    }

    #[test]
    fn constant_class_contributes_nothing() {
        let mut stack = random_stack(3, 6, 5, 5, 2);
        let full = uncertainty_map(&stack).unwrap();
        for m in &mut stack.maps {
            let p = 25;
            m.data[p..2 * p].fill(0.3);
        }
        let var1 = class_variance(&stack, 1).unwrap();
        assert!(var1.as_slice().iter().all(|&v| v == 0.0));
        let u = uncertainty_map(&stack).unwrap();
        let v0 = class_variance(&stack, 0).unwrap();
        let v2 = class_variance(&stack, 2).unwrap();
        for j in 0..25 {
            let expect = (v0.as_slice()[j] + v2.as_slice()[j]) / 3.0;
            assert!((u.values.as_slice()[j] - expect).abs() < 1e-15);
        }
        assert_ne!(u, full);
    }

    #[test]
    fn hard_reading_is_bernoulli_variance() {
        let a = map_from(2, 1, 1, vec![0.6, 0.4]);
        let b = map_from(2, 1, 1, vec![0.4, 0.6]);
        let stack = PredictionStack { maps: vec![a.clone(), b, a.clone(), a], seeds: vec![0; 4], dropout: 0.4 };
        let u = uncertainty_map_with(&stack, SampleReading::Hard).unwrap();
        // Class 0 is argmax in 3 of 4 samples: variance 3/4 * 1/4.
        assert!((u.values.as_slice()[0] - 0.1875).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let one_hot = map_from(3, 1, 1, vec![0.0, 1.0, 0.0]);
        assert_eq!(entropy_map(&one_hot).values.as_slice()[0], 0.0);
        let uniform = map_from(4, 1, 1, vec![0.25; 4]);
        assert!((entropy_map(&uniform).values.as_slice()[0] - 4f64.ln()).abs() < 1e-7);
        let e = 0.01f32;
        let skew = map_from(2, 1, 1, vec![0.5 + e, 0.5 - e]);
        let h = entropy_map(&skew);
        assert!(h.values.as_slice()[0] < 2f64.ln());
        assert_eq!(h.kind, UncertaintyKind::Entropy);
    }

    proptest! {
        #[test]
        fn sample_order_does_not_matter(seed in any::<u64>(), rot in 1usize..7) {
            let stack = random_stack(4, 7, 6, 6, seed);
            let mut permuted = stack.clone();
            permuted.maps.rotate_left(rot);
            permuted.maps.swap(0, 3);
            let a = uncertainty_map(&stack).unwrap();
            let b = uncertainty_map(&permuted).unwrap();
            for (x, y) in a.values.as_slice().iter().zip(b.values.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn class_order_does_not_matter(seed in any::<u64>()) {
            let stack = random_stack(3, 5, 4, 4, seed);
            let mut swapped = stack.clone();
            for m in &mut swapped.maps {
                let p = 16;
                let (a, b) = m.data.split_at_mut(2 * p);
                a[..p].swap_with_slice(&mut b[..p]);
            }
            let a = uncertainty_map(&stack).unwrap();
            let b = uncertainty_map(&swapped).unwrap();
            for (x, y) in a.values.as_slice().iter().zip(b.values.as_slice()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
