//! The pipeline stages. Each command reads its inputs from the dataset root
//! and the output directory, writes its artifacts atomically and records a
//! `run.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use episeg::eval::{
    lesion_curves, pearson, pixel_metrics, separation_report, summarize, sweep_dropout, sweep_threshold, volume_score,
    Correlation, EvalVolume, LesionCurve, PixelMetrics, PixelSummary, SeparationReport, Sweep,
};
use episeg::io::{self, write_atomic};
use episeg::phantom::{generate_dataset, read_manifest, read_volume, DatasetManifest, ManifestEntry, Split};
use episeg::rng::derive_path;
use episeg::segnet::{self, forward, mc_sample, TrainOutcome};
use episeg::uncertainty::{entropy_map, uncertainty_map_with, UncertaintyKind};
use episeg::{BScan, BinaryMask, Condition, ForwardMode, Grid, LabelMap, Variant, VolumeRecord, WeightStore};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::{CmdResult, Failure};
use crate::provenance::write_run_record;

pub const TRAIN_DIR: &str = "train";
pub const INFER_DIR: &str = "infer";
pub const MASK_DIR: &str = "masks";
pub const EVAL_DIR: &str = "eval";
pub const SWEEP_DIR: &str = "sweep";
pub const REPORT_DIR: &str = "report";

pub fn infer_dir(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.paths.output_dir.join(INFER_DIR).join(split.as_str())
}

pub fn mask_dir(cfg: &RunConfig, split: Split, variant: Variant) -> PathBuf {
    cfg.paths.output_dir.join(MASK_DIR).join(split.as_str()).join(variant.as_str())
}

pub fn eval_dir(cfg: &RunConfig, split: Split, variant: Variant) -> PathBuf {
    cfg.paths.output_dir.join(EVAL_DIR).join(split.as_str()).join(variant.as_str())
}

pub fn sweep_dir(cfg: &RunConfig, kind: &str) -> PathBuf {
    cfg.paths.output_dir.join(SWEEP_DIR).join(kind)
}

fn map_stem(kind: UncertaintyKind, index: usize) -> String {
    match kind {
        UncertaintyKind::McVariance => format!("u_{index}"),
        UncertaintyKind::Entropy => format!("h_{index}"),
    }
}

fn args(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn load_manifest(cfg: &RunConfig) -> CmdResult<DatasetManifest> {
    let root = &cfg.paths.data_root;
    if !root.join(episeg::phantom::MANIFEST_FILE).is_file() {
        return Err(Failure::missing(anyhow!(
            "no dataset at {}; run `episeg gen-data` first",
            root.display()
        )));
    }
    let manifest = read_manifest(root)?;
    if manifest.config != cfg.phantom || manifest.counts != cfg.dataset {
        log::warn!("dataset at {} was generated with a different phantom config", root.display());
    }
    Ok(manifest)
}

fn load_volume(cfg: &RunConfig, manifest: &DatasetManifest, entry: &ManifestEntry) -> CmdResult<VolumeRecord> {
    read_volume(&cfg.paths.data_root, entry, manifest.config.bscans_per_volume).map_err(|e| {
        let f = Failure::from(e);
        match f {
            Failure::MissingInput(e) => Failure::MissingInput(e.context(format!(
                "dataset at {} is incomplete; rerun `episeg gen-data`",
                cfg.paths.data_root.display()
            ))),
            other => other,
        }
    })
}

fn load_weights(cfg: &RunConfig, path: &Path) -> CmdResult<WeightStore> {
    if !path.is_file() {
        return Err(Failure::missing(anyhow!(
            "no weights at {}; run `episeg train` first",
            path.display()
        )));
    }
    Ok(segnet::load_weights(path, &cfg.network)?)
}

fn entries(manifest: &DatasetManifest, split: Split) -> Vec<(usize, ManifestEntry)> {
    manifest
        .volumes
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == split)
        .map(|(i, e)| (i, e.clone()))
        .collect()
}

/// Writes the phantom dataset under `paths.data_root`.
pub fn gen_data(cfg: &RunConfig) -> CmdResult<DatasetManifest> {
    info!("generating dataset at {}", cfg.paths.data_root.display());
    let manifest = generate_dataset(&cfg.phantom, cfg.dataset, cfg.phantom.seed, &cfg.paths.data_root)?;
    write_run_record(
        cfg,
        "gen-data",
        &cfg.paths.output_dir.join("gen-data"),
        args(&[("volumes", manifest.volumes.len().to_string())]),
    )?;
    Ok(manifest)
}

fn labelled_pairs(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    split: Split,
) -> CmdResult<Vec<(BScan, LabelMap)>> {
    let mut pairs = Vec::new();
    for e in manifest.entries(split, Some(Condition::Healthy)) {
        let v = load_volume(cfg, manifest, e)?;
        pairs.extend(v.bscans.into_iter().zip(v.labels));
    }
    Ok(pairs)
}

fn train_model(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    network: &episeg::NetworkConfig,
) -> CmdResult<TrainOutcome> {
    let train_set = labelled_pairs(cfg, manifest, Split::Train)?;
    let val_set = labelled_pairs(cfg, manifest, Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Failure::missing(anyhow!(
            "training needs healthy volumes in both the train and val splits"
        )));
    }
    info!("training on {} B-scans, validating on {}", train_set.len(), val_set.len());
    let outcome = segnet::train(&train_set, &val_set, network, &cfg.training, |r| {
        info!("epoch {} loss {:.4} lr {:.2e} val dice {:.4}", r.epoch, r.loss, r.lr, r.val_dice);
    })?;
    if outcome.diverged {
        log::warn!("training diverged; keeping the checkpoint of epoch {}", outcome.best_epoch);
    }
    Ok(outcome)
}

/// Trains on the healthy train split, selects on the healthy val split and
/// writes the weights plus `train/training_log.csv`.
pub fn train(cfg: &RunConfig) -> CmdResult<TrainOutcome> {
    let manifest = load_manifest(cfg)?;
    let outcome = train_model(cfg, &manifest, &cfg.network)?;
    segnet::save_weights(&cfg.paths.model_path, &outcome.weights)?;
    let dir = cfg.paths.output_dir.join(TRAIN_DIR);
    write_atomic(&dir.join("training_log.csv"), outcome.log.to_csv().as_bytes())?;
    write_run_record(
        cfg,
        "train",
        &dir,
        args(&[
            ("best_epoch", outcome.best_epoch.to_string()),
            ("diverged", outcome.diverged.to_string()),
        ]),
    )?;
    Ok(outcome)
}

/// MC-dropout and entropy maps of one volume.
pub struct VolumeMaps {
    pub mc: Vec<episeg::UncertaintyMap>,
    pub entropy: Vec<episeg::UncertaintyMap>,
    pub segmentation: Vec<LabelMap>,
    pub mean_max_prob: Vec<f64>,
}

/// B-scan `i` of the volume at manifest position `position` uses the sample
/// seed `derive_path(inference.seed, [position, i])`.
pub fn volume_maps(
    cfg: &RunConfig,
    weights: &WeightStore,
    volume: &VolumeRecord,
    position: usize,
) -> CmdResult<VolumeMaps> {
    let mut out = VolumeMaps {
        mc: Vec::new(),
        entropy: Vec::new(),
        segmentation: Vec::new(),
        mean_max_prob: Vec::new(),
    };
    for (i, scan) in volume.bscans.iter().enumerate() {
        let seed = derive_path(cfg.inference.seed, &[position as u64, i as u64]);
        let stack = mc_sample(weights, scan, cfg.inference.n_samples, seed)?;
        out.mc.push(uncertainty_map_with(&stack, cfg.inference.reading)?);
        let probs = forward(weights, scan, ForwardMode::Deterministic, None)?;
        out.entropy.push(entropy_map(&probs));
        let p = probs.rows * probs.cols;
        let max_sum: f64 = (0..p)
            .map(|j| (0..probs.classes).map(|k| probs.data[k * p + j]).fold(0f32, f32::max) as f64)
            .sum();
        out.mean_max_prob.push(max_sum / p as f64);
        out.segmentation.push(probs.argmax());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub split: Split,
    pub volumes: usize,
    pub bscans: usize,
}

/// Writes `u_i` (MC variance) and `h_i` (entropy) maps, the deterministic
/// segmentation `seg_i.pgm` and a per-B-scan `summary.csv`.
pub fn infer(cfg: &RunConfig, split: Split) -> CmdResult<InferSummary> {
    let manifest = load_manifest(cfg)?;
    let weights = load_weights(cfg, &cfg.paths.model_path)?;
    let dir = infer_dir(cfg, split);
    let mut csv = String::from("volume_id,bscan,u_sum,u_max,h_sum,mean_max_prob\n");
    let mut bscans = 0;
    let list = entries(&manifest, split);
    for (position, entry) in &list {
        let volume = load_volume(cfg, &manifest, entry)?;
        info!("inferring {} ({} B-scans)", entry.id, volume.len());
        let maps = volume_maps(cfg, &weights, &volume, *position)?;
        let vdir = dir.join(&entry.id);
        for i in 0..volume.len() {
            io::write_uncertainty(&vdir, &map_stem(UncertaintyKind::McVariance, i), &maps.mc[i])?;
            io::write_uncertainty(&vdir, &map_stem(UncertaintyKind::Entropy, i), &maps.entropy[i])?;
            io::write_pgm(&vdir.join(format!("seg_{i}.pgm")), &maps.segmentation[i])?;
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                entry.id,
                i,
                maps.mc[i].sum(),
                maps.mc[i].max(),
                maps.entropy[i].sum(),
                maps.mean_max_prob[i]
            )
            .unwrap();
        }
        bscans += volume.len();
    }
    write_atomic(&dir.join("summary.csv"), csv.as_bytes())?;
    write_run_record(
        cfg,
        "infer",
        &dir,
        args(&[("split", split.as_str().into()), ("volumes", list.len().to_string())]),
    )?;
    Ok(InferSummary {
        split,
        volumes: list.len(),
        bscans,
    })
}

fn read_maps(cfg: &RunConfig, split: Split, id: &str, n: usize) -> CmdResult<Vec<Grid<f64>>> {
    let dir = infer_dir(cfg, split).join(id);
    (0..n)
        .map(|i| {
            let stem = map_stem(cfg.eval.source, i);
            if !dir.join(format!("{stem}.f32")).is_file() {
                return Err(Failure::missing(anyhow!(
                    "uncertainty map {}/{stem}.f32 not found; run `episeg infer --split {}` first",
                    dir.display(),
                    split.as_str()
                )));
            }
            Ok(io::read_uncertainty(&dir, &stem)?.values)
        })
        .collect()
}

fn gt_masks(volume: &VolumeRecord) -> Vec<BinaryMask> {
    match volume.condition {
        Condition::Diseased => volume.anomaly_masks.clone(),
        Condition::Healthy => volume
            .bscans
            .iter()
            .map(|b| Grid::filled(b.rows(), b.cols(), false))
            .collect(),
    }
}

/// Volumes of `split` with their stored maps, optionally restricted to one
/// condition.
pub fn eval_volumes(cfg: &RunConfig, split: Split, condition: Option<Condition>) -> CmdResult<Vec<EvalVolume>> {
    let manifest = load_manifest(cfg)?;
    let mut out = Vec::new();
    for entry in manifest.entries(split, condition) {
        let volume = load_volume(cfg, &manifest, entry)?;
        out.push(EvalVolume {
            id: entry.id.clone(),
            uncertainty: read_maps(cfg, split, &entry.id, volume.len())?,
            gt: gt_masks(&volume),
            bottom: volume.bottom_boundary.clone(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChosenValue {
    pub kind: String,
    pub best: f64,
}

/// The threshold used by `postprocess`: the swept one when enabled and
/// present, else `postproc.threshold`.
pub fn effective_threshold(cfg: &RunConfig) -> CmdResult<(f64, &'static str)> {
    let path = sweep_dir(cfg, "threshold").join("best.json");
    if cfg.eval.use_swept_threshold && path.is_file() {
        let chosen: ChosenValue = serde_json::from_slice(&io::read_bytes(&path)?).map_err(episeg::Error::from)?;
        return Ok((chosen.best, "sweep"));
    }
    Ok((cfg.postproc.threshold, "config"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessSummary {
    pub threshold: f64,
    pub volumes: usize,
    pub anomalous_pixels: usize,
}

/// Writes `mask_i.pgm` for every B-scan of the split.
pub fn postprocess(cfg: &RunConfig, split: Split, variant: Variant) -> CmdResult<PostprocessSummary> {
    let (threshold, source) = effective_threshold(cfg)?;
    let params = episeg::PostprocParams {
        threshold,
        variant,
        ..cfg.postproc.clone()
    };
    let volumes = eval_volumes(cfg, split, None)?;
    let dir = mask_dir(cfg, split, variant);
    let mut total = 0;
    for v in &volumes {
        for (i, mask) in v.predict(&params)?.iter().enumerate() {
            total += mask.count();
            io::write_pgm(&dir.join(&v.id).join(format!("mask_{i}.pgm")), &io::mask_to_bytes(mask))?;
        }
    }
    write_run_record(
        cfg,
        "postprocess",
        &dir,
        args(&[
            ("split", split.as_str().into()),
            ("variant", variant.as_str().into()),
            ("threshold", threshold.to_string()),
            ("threshold_source", source.into()),
        ]),
    )?;
    Ok(PostprocessSummary {
        threshold,
        volumes: volumes.len(),
        anomalous_pixels: total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub volume_id: String,
    pub condition: Condition,
    pub metrics: PixelMetrics,
    pub mean_area: f64,
    pub uncertainty_sum: f64,
    pub gt_area: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: Split,
    pub variant: Variant,
    /// Over the diseased volumes.
    pub pixel: Option<PixelSummary>,
    pub lesion: Option<LesionCurve>,
    /// Healthy vs diseased on the mean predicted area per B-scan.
    pub separation: Option<SeparationReport>,
    /// Uncertainty sum against reference anomaly area, diseased volumes.
    pub correlation: Option<Correlation>,
    pub correlation_error: Option<String>,
    pub volumes: Vec<VolumeRow>,
}

fn read_masks(cfg: &RunConfig, split: Split, variant: Variant, id: &str, n: usize) -> CmdResult<Vec<BinaryMask>> {
    let dir = mask_dir(cfg, split, variant).join(id);
    (0..n)
        .map(|i| {
            let path = dir.join(format!("mask_{i}.pgm"));
            if !path.is_file() {
                return Err(Failure::missing(anyhow!(
                    "mask {} not found; run `episeg postprocess --split {} --variant {}` first",
                    path.display(),
                    split.as_str(),
                    variant.as_str()
                )));
            }
            Ok(io::bytes_to_mask(&io::read_pgm(&path)?))
        })
        .collect()
}

/// Pixel, lesion and volume metrics of the stored masks of one variant.
pub fn evaluate(cfg: &RunConfig, split: Split, variant: Variant) -> CmdResult<EvalSummary> {
    let manifest = load_manifest(cfg)?;
    let mut rows = Vec::new();
    let (mut all_pred, mut all_gt) = (Vec::new(), Vec::new());
    for entry in manifest.entries(split, None) {
        let volume = load_volume(cfg, &manifest, entry)?;
        let pred = read_masks(cfg, split, variant, &entry.id, volume.len())?;
        let gt = gt_masks(&volume);
        let u = read_maps(cfg, split, &entry.id, volume.len())?;
        let score = volume_score(&entry.id, entry.condition, &pred, &u);
        rows.push(VolumeRow {
            volume_id: entry.id.clone(),
            condition: entry.condition,
            metrics: pixel_metrics(&pred, &gt)?,
            mean_area: score.mean_area,
            uncertainty_sum: score.uncertainty_sum,
            gt_area: gt.iter().map(|m| m.count() as u64).sum(),
        });
        if entry.condition == Condition::Diseased {
            all_pred.extend(pred);
            all_gt.extend(gt);
        }
    }
    let diseased: Vec<&VolumeRow> = rows.iter().filter(|r| r.condition == Condition::Diseased).collect();
    let healthy: Vec<&VolumeRow> = rows.iter().filter(|r| r.condition == Condition::Healthy).collect();
    let pixel = (!diseased.is_empty()).then(|| summarize(&diseased.iter().map(|r| r.metrics).collect::<Vec<_>>()));
    let lesion = if diseased.is_empty() {
        None
    } else {
        Some(lesion_curves(&all_pred, &all_gt, &cfg.eval.d_grid)?)
    };
    let separation = if diseased.is_empty() || healthy.is_empty() {
        None
    } else {
        let h: Vec<f64> = healthy.iter().map(|r| r.mean_area).collect();
        let d: Vec<f64> = diseased.iter().map(|r| r.mean_area).collect();
        Some(separation_report(&h, &d, cfg.eval.histogram_bins)?)
    };
    let (correlation, correlation_error) = match pearson(
        &diseased.iter().map(|r| r.uncertainty_sum).collect::<Vec<_>>(),
        &diseased.iter().map(|r| r.gt_area as f64).collect::<Vec<_>>(),
    ) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let summary = EvalSummary {
        split,
        variant,
        pixel,
        lesion,
        separation,
        correlation,
        correlation_error,
        volumes: rows,
    };
    let dir = eval_dir(cfg, split, variant);
    write_atomic(&dir.join("volumes.csv"), volumes_csv(&summary.volumes).as_bytes())?;
    if let Some(l) = &summary.lesion {
        write_atomic(&dir.join("lesion_curve.csv"), lesion_csv(l).as_bytes())?;
    }
    write_atomic(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(episeg::Error::from)?.as_bytes(),
    )?;
    write_run_record(
        cfg,
        "evaluate",
        &dir,
        args(&[("split", split.as_str().into()), ("variant", variant.as_str().into())]),
    )?;
    Ok(summary)
}

fn condition_str(c: Condition) -> &'static str {
    match c {
        Condition::Healthy => "healthy",
        Condition::Diseased => "diseased",
    }
}

pub fn volumes_csv(rows: &[VolumeRow]) -> String {
    let mut s = String::from("volume_id,condition,tp,fp,fn,precision,recall,dice,mean_area,uncertainty_sum,gt_area\n");
    for r in rows {
        let m = &r.metrics;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.volume_id,
            condition_str(r.condition),
            m.tp,
            m.fp,
            m.fn_,
            m.precision,
            m.recall,
            m.dice,
            r.mean_area,
            r.uncertainty_sum,
            r.gt_area
        )
        .unwrap();
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn lesion_csv(l: &LesionCurve) -> String {
    let mut s = String::from("d,tp_recall,fn,ld_re,tp_precision,fp,ld_pr\n");
    for i in 0..l.d.len() {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            l.d[i],
            l.tp_recall[i],
            l.fn_[i],
            opt(l.ld_re[i]),
            l.tp_precision[i],
            l.fp[i],
            opt(l.ld_pr[i])
        )
        .unwrap();
    }
    s
}

fn sweep_csv(header: &str, sweep: &Sweep, extra: Option<&[f64]>) -> String {
    let mut s = format!("{header}\n");
    for (i, r) in sweep.rows.iter().enumerate() {
        write!(s, "{},{},{}", r.value, r.dice.mean, r.dice.sd).unwrap();
        if let Some(e) = extra {
            write!(s, ",{}", e[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

fn write_chosen(dir: &Path, kind: &str, best: f64) -> CmdResult<()> {
    let chosen = ChosenValue {
        kind: kind.into(),
        best,
    };
    write_atomic(
        &dir.join("best.json"),
        serde_json::to_string_pretty(&chosen).map_err(episeg::Error::from)?.as_bytes(),
    )?;
    Ok(())
}

/// Picks `t` on the diseased validation volumes. Needs `infer --split val`.
pub fn sweep_threshold_cmd(cfg: &RunConfig) -> CmdResult<Sweep> {
    let volumes = eval_volumes(cfg, Split::Val, Some(Condition::Diseased))?;
    if volumes.is_empty() {
        return Err(Failure::missing(anyhow!("the val split has no diseased volumes")));
    }
    let sweep = sweep_threshold(&volumes, &cfg.eval.t_grid, &cfg.postproc)?;
    let dir = sweep_dir(cfg, "threshold");
    write_atomic(&dir.join("table.csv"), sweep_csv("t,mean_dice,sd_dice", &sweep, None).as_bytes())?;
    write_chosen(&dir, "threshold", sweep.best)?;
    write_run_record(cfg, "sweep threshold", &dir, args(&[("best", sweep.best.to_string())]))?;
    info!("best threshold {}", sweep.best);
    Ok(sweep)
}

/// Trains one model per dropout rate and scores each by the validation Dice
/// at its own best threshold.
pub fn sweep_dropout_cmd(cfg: &RunConfig) -> CmdResult<Sweep> {
    let manifest = load_manifest(cfg)?;
    let dir = sweep_dir(cfg, "dropout");
    let val: Vec<(usize, ManifestEntry)> = entries(&manifest, Split::Val)
        .into_iter()
        .filter(|(_, e)| e.condition == Condition::Diseased)
        .collect();
    if val.is_empty() {
        return Err(Failure::missing(anyhow!("the val split has no diseased volumes")));
    }
    let mut thresholds = Vec::new();
    let mut failure = None;
    let sweep = sweep_dropout(&cfg.eval.p_grid, |p| {
        let mut run = || -> CmdResult<Vec<f64>> {
            info!("dropout {p}: training");
            let network = episeg::NetworkConfig {
                dropout_rate: p,
                ..cfg.network.clone()
            };
            let outcome = train_model(cfg, &manifest, &network)?;
            segnet::save_weights(&dir.join(format!("p_{p}")).join("model.bunw"), &outcome.weights)?;
            let mut volumes = Vec::new();
            for (position, entry) in &val {
                let volume = load_volume(cfg, &manifest, entry)?;
                let maps = volume_maps(cfg, &outcome.weights, &volume, *position)?;
                let chosen = match cfg.eval.source {
                    UncertaintyKind::McVariance => maps.mc,
                    UncertaintyKind::Entropy => maps.entropy,
                };
                volumes.push(EvalVolume {
                    id: entry.id.clone(),
                    uncertainty: chosen.into_iter().map(|m| m.values).collect(),
                    gt: gt_masks(&volume),
                    bottom: volume.bottom_boundary.clone(),
                });
            }
            let ts = sweep_threshold(&volumes, &cfg.eval.t_grid, &cfg.postproc)?;
            let params = episeg::PostprocParams {
                threshold: ts.best,
                ..cfg.postproc.clone()
            };
            thresholds.push(ts.best);
            Ok(volumes
                .iter()
                .map(|v| v.metrics(&params).map(|m| m.dice))
                .collect::<episeg::Result<Vec<_>>>()?)
        };
        run().map_err(|f| {
            let msg = f.to_string();
            failure = Some(f);
            episeg::Error::Undefined(msg)
        })
    });
    let sweep = match (sweep, failure) {
        (_, Some(f)) => return Err(f),
        (s, None) => s?,
    };
    write_atomic(
        &dir.join("table.csv"),
        sweep_csv("p,mean_dice,sd_dice,best_t", &sweep, Some(&thresholds)).as_bytes(),
    )?;
    write_chosen(&dir, "dropout", sweep.best)?;
    write_run_record(cfg, "sweep dropout", &dir, args(&[("best", sweep.best.to_string())]))?;
    Ok(sweep)
}

/// Summary of every evaluated variant of `split`, in [`Variant::ALL`] order.
pub fn load_summaries(cfg: &RunConfig, split: Split) -> CmdResult<Vec<EvalSummary>> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        let path = eval_dir(cfg, split, v).join("summary.json");
        if path.is_file() {
            out.push(serde_json::from_slice(&io::read_bytes(&path)?).map_err(episeg::Error::from)?);
        }
    }
    if out.is_empty() {
        return Err(Failure::missing(anyhow!(
            "no evaluation results under {}; run `episeg evaluate --split {}` first",
            cfg.paths.output_dir.join(EVAL_DIR).join(split.as_str()).display(),
            split.as_str()
        )));
    }
    Ok(out)
}

/// Writes the SVG figures and the summary table under `report/`.
pub fn report(cfg: &RunConfig, split: Split) -> CmdResult<Vec<PathBuf>> {
    let summaries = load_summaries(cfg, split)?;
    let dir = cfg.paths.output_dir.join(REPORT_DIR);
    let files = crate::report::write_report(&dir, &summaries)?;
    write_run_record(cfg, "report", &dir, args(&[("split", split.as_str().into())]))?;
    Ok(files)
}
