//! Pixel, lesion and volume level evaluation, and the threshold and dropout
//! sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::phantom::Condition;
use crate::postproc::{label_components, pipeline_values, PostprocParams};

/// Pixel counts and scores of one volume (all of its B-scans pooled).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
}

impl PixelMetrics {
    /// A ratio with an empty denominator is 1 when the opposite error count is
    /// also zero (nothing to find and nothing found), else 0.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64, other: u64| {
            if den == 0 {
                if other == 0 { 1.0 } else { 0.0 }
            } else {
                num as f64 / den as f64
            }
        };
        PixelMetrics {
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp, fn_),
            recall: ratio(tp, tp + fn_, fp),
            dice: ratio(2 * tp, 2 * tp + fp + fn_, 0),
        }
    }

    /// Both prediction and ground truth empty.
    pub fn is_empty_pair(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

fn check_stacks(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} masks", gt.len()), pred.len()));
    }
    pred.iter().zip(gt).try_for_each(|(p, g)| p.check_shape(g))
}

/// Pooled metrics of one volume's B-scans.
pub fn pixel_metrics(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<PixelMetrics> {
    check_stacks(pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gt) {
        for (&a, &b) in p.as_slice().iter().zip(g.as_slice()) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(PixelMetrics::from_counts(tp, fp, fn_))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (divisor n - 1); 0 for a single value.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanSd { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelSummary {
    pub volumes: usize,
    /// Volumes scored 1 because prediction and ground truth were both empty.
    pub empty_pairs: usize,
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub dice: MeanSd,
}

pub fn summarize(per_volume: &[PixelMetrics]) -> PixelSummary {
    let col = |f: fn(&PixelMetrics) -> f64| MeanSd::of(&per_volume.iter().map(f).collect::<Vec<_>>());
    PixelSummary {
        volumes: per_volume.len(),
        empty_pairs: per_volume.iter().filter(|m| m.is_empty_pair()).count(),
        precision: col(|m| m.precision),
        recall: col(|m| m.recall),
        dice: col(|m| m.dice),
    }
}

/// Dice of every lesion (8-connected component) of `a` against the union of
/// the components of `b` that touch it.
fn lesion_dices(a: &BinaryMask, b: &BinaryMask) -> Vec<f64> {
    let (la, sa) = label_components(a, 8);
    let (lb, sb) = label_components(b, 8);
    let mut inter = vec![0usize; sa.len()];
    let mut touching: Vec<Vec<u32>> = vec![Vec::new(); sa.len()];
    for (&x, &y) in la.as_slice().iter().zip(lb.as_slice()) {
        if x != 0 && y != 0 {
            inter[x as usize] += 1;
            let t = &mut touching[x as usize];
            if !t.contains(&y) {
                t.push(y);
            }
        }
    }
    (1..sa.len())
        .map(|i| {
            let union_size: usize = touching[i].iter().map(|&j| sb[j as usize]).sum();
            2.0 * inter[i] as f64 / (sa[i] + union_size) as f64
        })
        .collect()
}

/// Lesion-detection recall and precision over a grid of Dice cut-offs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionCurve {
    pub d: Vec<f64>,
    /// Ground-truth lesions with Dice > d.
    pub tp_recall: Vec<usize>,
    pub fn_: Vec<usize>,
    /// Predicted lesions with Dice > d.
    pub tp_precision: Vec<usize>,
    pub fp: Vec<usize>,
    /// `None` when there are no lesions on that side.
    pub ld_re: Vec<Option<f64>>,
    pub ld_pr: Vec<Option<f64>>,
    /// B-scans where both masks were empty; excluded from pooling.
    pub skipped_scans: usize,
}

impl LesionCurve {
    /// Accumulates per-lesion Dice values from many B-scans.
    pub fn from_dices(gt_side: &[f64], pred_side: &[f64], d_grid: &[f64], skipped_scans: usize) -> Self {
        let above = |ds: &[f64], d: f64| ds.iter().filter(|&&x| x > d).count();
        let mut c = LesionCurve {
            d: d_grid.to_vec(),
            tp_recall: Vec::new(),
            fn_: Vec::new(),
            tp_precision: Vec::new(),
            fp: Vec::new(),
            ld_re: Vec::new(),
            ld_pr: Vec::new(),
            skipped_scans,
        };
        for &d in d_grid {
            let tr = above(gt_side, d);
            let tpp = above(pred_side, d);
            c.tp_recall.push(tr);
            c.fn_.push(gt_side.len() - tr);
            c.tp_precision.push(tpp);
            c.fp.push(pred_side.len() - tpp);
            c.ld_re.push((!gt_side.is_empty()).then(|| tr as f64 / gt_side.len() as f64));
            c.ld_pr.push((!pred_side.is_empty()).then(|| tpp as f64 / pred_side.len() as f64));
        }
        c
    }
}

/// Per-lesion Dice values of a B-scan stack: (ground-truth side, predicted
/// side, number of B-scans with both masks empty).
pub fn lesion_dice_values(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    check_stacks(pred, gt)?;
    let (mut g, mut p, mut skipped) = (Vec::new(), Vec::new(), 0);
    for (pm, gm) in pred.iter().zip(gt) {
        if pm.count() == 0 && gm.count() == 0 {
            skipped += 1;
            continue;
        }
        g.extend(lesion_dices(gm, pm));
        p.extend(lesion_dices(pm, gm));
    }
    Ok((g, p, skipped))
}

pub fn lesion_curves(pred: &[BinaryMask], gt: &[BinaryMask], d_grid: &[f64]) -> Result<LesionCurve> {
    if d_grid.iter().any(|d| !(0.0..=1.0).contains(d)) {
        return Err(Error::config("lesion Dice cut-offs must lie in [0, 1]"));
    }
    let (g, p, skipped) = lesion_dice_values(pred, gt)?;
    Ok(LesionCurve::from_dices(&g, &p, d_grid, skipped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub volume_id: String,
    pub condition: Condition,
    /// Mean number of anomalous pixels per B-scan.
    pub mean_area: f64,
    pub uncertainty_sum: f64,
}

pub fn volume_score(
    volume_id: &str,
    condition: Condition,
    masks: &[BinaryMask],
    uncertainty: &[Grid<f64>],
) -> VolumeScore {
    let area: usize = masks.iter().map(|m| m.count()).sum();
    VolumeScore {
        volume_id: volume_id.to_string(),
        condition,
        mean_area: if masks.is_empty() { 0.0 } else { area as f64 / masks.len() as f64 },
        uncertainty_sum: uncertainty.iter().map(|u| u.as_slice().iter().sum::<f64>()).sum(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub healthy: Vec<usize>,
    pub diseased: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// Probability that a diseased score exceeds a healthy one, ties counted
    /// half.
    pub auc: f64,
    /// Healthy scores at or above the smallest diseased score.
    pub overlap: usize,
    pub histogram: Histogram,
}

/// Mann-Whitney AUC via midranks.
fn rank_auc(healthy: &[f64], diseased: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = healthy
        .iter()
        .map(|&v| (v, false))
        .chain(diseased.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (n, m) = (diseased.len() as f64, healthy.len() as f64);
    (rank_sum - n * (n + 1.0) / 2.0) / (n * m)
}

pub fn separation_report(healthy: &[f64], diseased: &[f64], bins: usize) -> Result<SeparationReport> {
    if healthy.is_empty() || diseased.is_empty() {
        return Err(Error::TooFewSamples {
            needed: 1,
            got: healthy.len().min(diseased.len()),
        });
    }
    if healthy.iter().chain(diseased).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("volume scores".into()));
    }
    let min_d = diseased.iter().copied().fold(f64::INFINITY, f64::min);
    let overlap = healthy.iter().filter(|&&h| h >= min_d).count();
    let bins = bins.max(1);
    let lo = healthy.iter().chain(diseased).copied().fold(f64::INFINITY, f64::min);
    let hi = healthy.iter().chain(diseased).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let count = |vals: &[f64]| {
        let mut c = vec![0; bins];
        for &v in vals {
            c[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
        c
    };
    Ok(SeparationReport {
        auc: rank_auc(healthy, diseased),
        overlap,
        histogram: Histogram {
            edges,
            healthy: count(healthy),
            diseased: count(diseased),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub n: usize,
    pub rho: f64,
    /// Least-squares fit `y = slope * x + intercept`.
    pub slope: f64,
    pub intercept: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::shape(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    let slope = sxy / sxx;
    Ok(Correlation {
        n: x.len(),
        rho: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        slope,
        intercept: my - slope * mx,
    })
}

/// `0.01, 0.02, ..., 0.20`.
pub fn default_t_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 100.0).collect()
}

pub fn default_p_grid() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5]
}

pub fn default_d_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Uncertainty maps, reference masks and bottom boundaries of one volume.
#[derive(Clone, Debug)]
pub struct EvalVolume {
    pub id: String,
    pub uncertainty: Vec<Grid<f64>>,
    pub gt: Vec<BinaryMask>,
    pub bottom: Vec<Vec<usize>>,
}

impl EvalVolume {
    pub fn predict(&self, params: &PostprocParams) -> Result<Vec<BinaryMask>> {
        self.uncertainty
            .iter()
            .enumerate()
            .map(|(i, u)| pipeline_values(u, params, self.bottom.get(i).map(|b| b.as_slice())))
            .collect()
    }

    pub fn metrics(&self, params: &PostprocParams) -> Result<PixelMetrics> {
        pixel_metrics(&self.predict(params)?, &self.gt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub dice: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub best: f64,
}

/// Highest mean Dice; ties go to the smaller value.
fn pick_best(rows: &[SweepRow]) -> f64 {
    rows.iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if b.dice.mean > r.dice.mean || (b.dice.mean == r.dice.mean && b.value <= r.value) => Some(b),
            _ => Some(r),
        })
        .map(|r| r.value)
        .expect("nonempty sweep")
}

/// Runs the post-processing pipeline for every `t` and picks the one with the
/// best mean per-volume Dice.
pub fn sweep_threshold(volumes: &[EvalVolume], t_grid: &[f64], params: &PostprocParams) -> Result<Sweep> {
    if t_grid.is_empty() {
        return Err(Error::config("empty threshold grid"));
    }
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let p = PostprocParams { threshold: t, ..params.clone() };
        let dices = volumes
            .iter()
            .map(|v| v.metrics(&p).map(|m| m.dice))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SweepRow { value: t, dice: MeanSd::of(&dices) });
    }
    let best = pick_best(&rows);
    Ok(Sweep { rows, best })
}

/// Calls `evaluate(p)` (a full train, infer and score cycle returning the
/// per-volume validation Dice values) for every dropout rate.
pub fn sweep_dropout(p_grid: &[f64], mut evaluate: impl FnMut(f64) -> Result<Vec<f64>>) -> Result<Sweep> {
    if p_grid.is_empty() {
        return Err(Error::config("empty dropout grid"));
    }
    let mut rows = Vec::with_capacity(p_grid.len());
    for &p in p_grid {
        rows.push(SweepRow { value: p, dice: MeanSd::of(&evaluate(p)?) });
    }
    let best = pick_best(&rows);
    Ok(Sweep { rows, best })
}
