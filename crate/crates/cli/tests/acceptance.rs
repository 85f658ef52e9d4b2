//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use episeg::eval::{lesion_curves, default_d_grid};
use episeg::phantom::{DatasetCounts, Split};
use episeg::postproc::{cast_votes, majority_ray_cast, threshold};
use episeg::rng::rng_from;
use episeg::segnet::weights::ParamKind;
use episeg::segnet::{init_weights, loss_and_gradients};
use episeg::uncertainty::uncertainty_map;
use episeg::{
    BScan, BinaryMask, ClassProbabilityMap, Condition, Grid, LabelMap, NetworkConfig, PredictionStack, Variant,
    VoteMap, WeightStore,
};
use episeg_cli::commands::{self, EvalSummary};
use episeg_cli::RunConfig;
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(start: Instant, limit: Duration, detail: String) -> Outcome {
    let t = start.elapsed();
    check(t < limit, format!("{detail}; {:.1}s (limit {}s)", t.as_secs_f64(), limit.as_secs()))
}

// Oracles ------------------------------------------------------------------

/// Per pixel and class: mean first, then squared deviations.
fn two_pass_uncertainty(maps: &[ClassProbabilityMap]) -> Vec<f64> {
    let (k, p) = (maps[0].classes, maps[0].rows * maps[0].cols);
    let n = maps.len() as f64;
    (0..p)
        .map(|j| {
            let mut total = 0.0;
            for c in 0..k {
                let ys: Vec<f64> = maps.iter().map(|m| m.data[c * p + j] as f64).collect();
                let mean = ys.iter().sum::<f64>() / n;
                total += ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
            }
            total / k as f64
        })
        .collect()
}

fn walk_votes(mask: &BinaryMask) -> VoteMap {
    let (rows, cols) = mask.shape();
    Grid::from_fn(rows, cols, |r, c| {
        if *mask.get(r, c) {
            return 4;
        }
        let mut v = 0u8;
        for (dr, dc) in [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)] {
            let (mut y, mut x) = (r as i64 + dr, c as i64 + dc);
            while y >= 0 && x >= 0 && y < rows as i64 && x < cols as i64 {
                if *mask.get(y as usize, x as usize) {
                    v += 1;
                    break;
                }
                y += dr;
                x += dc;
            }
        }
        v
    })
}

fn walk_ray_cast(mask: &BinaryMask, thresholds: &[u8]) -> BinaryMask {
    let mut b = mask.clone();
    for &v in thresholds {
        let votes = walk_votes(&b);
        b = Grid::from_fn(b.rows(), b.cols(), |r, c| *b.get(r, c) || *votes.get(r, c) >= v);
    }
    b
}

fn random_mask(rows: usize, cols: usize, density: f64, seed: u64) -> BinaryMask {
    let mut rng = rng_from(seed);
    Grid::from_fn(rows, cols, |_, _| rng.gen_bool(density))
}

fn subset(a: &BinaryMask, b: &BinaryMask) -> bool {
    a.as_slice().iter().zip(b.as_slice()).all(|(&x, &y)| !x || y)
}

// Criteria -----------------------------------------------------------------

fn c1_uncertainty_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0f64;
    for case in 0..100u64 {
        let mut rng = rng_from(1000 + case);
        let classes = rng.gen_range(2..=5);
        let n = rng.gen_range(2..=8);
        let (rows, cols) = (32, 32);
        let maps: Vec<ClassProbabilityMap> = (0..n)
            .map(|_| {
                let p = rows * cols;
                let mut data = vec![0f32; classes * p];
                for j in 0..p {
                    let raw: Vec<f32> = (0..classes).map(|_| rng.gen_range(0.0..1.0f32).powi(3)).collect();
                    let s: f32 = raw.iter().sum::<f32>().max(1e-12);
                    for c in 0..classes {
                        data[c * p + j] = raw[c] / s;
                    }
                }
                ClassProbabilityMap { classes, rows, cols, data }
            })
            .collect();
        let stack = PredictionStack {
            seeds: (0..n as u64).collect(),
            maps,
            dropout: 0.4,
        };
        let got = uncertainty_map(&stack).map_err(|e| e.to_string())?;
        let want = two_pass_uncertainty(&stack.maps);
        for (a, b) in got.values.as_slice().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-9 {
        return Err(format!("max abs deviation {worst:.3e} > 1e-9"));
    }
    within(start, Duration::from_secs(10), format!("100 stacks, max abs deviation {worst:.2e}"))
}

fn c2_ray_casting_oracle() -> Outcome {
    let start = Instant::now();
    let row = Grid::from_vec(1, 3, vec![true, false, true]).unwrap();
    let votes = cast_votes(&row);
    if *votes.get(0, 1) != 2 {
        return Err(format!("[1,0,1] middle vote {} != 2", votes.get(0, 1)));
    }
    let ring = Grid::from_fn(9, 11, |r, c| {
        (2..=6).contains(&r) && (2..=8).contains(&c) && (r == 2 || r == 6 || c == 2 || c == 8)
    });
    let filled = majority_ray_cast(&ring, &[4]);
    for r in 0..9 {
        for c in 0..11 {
            let want = (2..=6).contains(&r) && (2..=8).contains(&c);
            if *filled.get(r, c) != want {
                return Err(format!("hollow rectangle wrong at ({r},{c})"));
            }
        }
    }
    for case in 0..1000u64 {
        let mut rng = rng_from(50_000 + case);
        let (rows, cols) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let density = rng.gen_range(0.0..0.4);
        let mask = random_mask(rows, cols, density, case);
        if cast_votes(&mask) != walk_votes(&mask) {
            return Err(format!("vote map differs on case {case} ({rows}x{cols})"));
        }
        let random_v: Vec<u8> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(1..=4)).collect();
        for v in [vec![3, 4], random_v] {
            if majority_ray_cast(&mask, &v) != walk_ray_cast(&mask, &v) {
                return Err(format!("ray cast differs on case {case} with v = {v:?}"));
            }
        }
    }
    within(start, Duration::from_secs(30), "1000 masks + 2 fixtures exact".into())
}

fn c3_gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = NetworkConfig::micro();
    let mut w: WeightStore<f64> = init_weights(&cfg, 3).map_err(|e| e.to_string())?.cast();
    let mut rng = rng_from(17);
    for t in w.tensors.iter_mut().filter(|t| t.kind.trainable()) {
        for v in &mut t.data {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let (rows, cols) = (cfg.input_rows, cfg.input_cols);
    let images: Vec<BScan> = (0..2).map(|_| Grid::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0f32))).collect();
    let labels: Vec<LabelMap> = (0..2)
        .map(|_| Grid::from_fn(rows, cols, |_, _| rng.gen_range(0..cfg.num_classes as u8)))
        .collect();
    let batch: Vec<(&BScan, &LabelMap)> = images.iter().zip(&labels).collect();
    let rngs = vec![rng_from(200), rng_from(201)];
    let loss = |w: &WeightStore<f64>| -> f64 {
        let mut r = rngs.clone();
        loss_and_gradients(w, &batch, Some(&mut r)).expect("loss").loss
    };
    let analytic = loss_and_gradients(&w, &batch, Some(&mut rngs.clone())).map_err(|e| e.to_string())?;
    let h = 1e-4;
    let (mut worst, mut checked, mut tensors) = (0f64, 0usize, 0usize);
    for ti in 0..w.tensors.len() {
        if !w.tensors[ti].kind.trainable() {
            continue;
        }
        tensors += 1;
        for j in 0..w.tensors[ti].data.len() {
            let orig = w.tensors[ti].data[j];
            w.tensors[ti].data[j] = orig + h;
            let up = loss(&w);
            w.tensors[ti].data[j] = orig - h;
            let down = loss(&w);
            w.tensors[ti].data[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.grads[ti][j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if rel >= 1e-3 {
                return Err(format!("{}[{j}]: analytic {an:.6e} vs finite difference {fd:.6e}", w.tensors[ti].name));
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let frozen_zero = w
        .tensors
        .iter()
        .zip(&analytic.grads)
        .filter(|(t, _)| matches!(t.kind, ParamKind::RunningMean | ParamKind::RunningVar))
        .all(|(_, g)| g.iter().all(|&v| v == 0.0));
    if !frozen_zero {
        return Err("running statistics received a gradient".into());
    }
    within(
        start,
        Duration::from_secs(60),
        format!("{checked} parameters in {tensors} tensors, max rel error {worst:.2e}"),
    )
}

/// One default-scale pipeline run shared by criteria 4 to 8.
struct Pipeline {
    train_time: Duration,
    best_val_dice: f64,
    threshold: f64,
    summaries: HashMap<Variant, EvalSummary>,
}

fn run_default_pipeline(root: &Path) -> Result<Pipeline, String> {
    let mut cfg = RunConfig::default();
    cfg.paths.data_root = root.join("data");
    cfg.paths.output_dir = root.join("runs");
    cfg.paths.model_path = root.join("runs/model.bunw");
    let e = |f: episeg_cli::Failure| f.to_string();
    commands::gen_data(&cfg).map_err(e)?;
    let start = Instant::now();
    let outcome = commands::train(&cfg).map_err(e)?;
    let train_time = start.elapsed();
    let best_val_dice = outcome.log.best().map_or(f64::NAN, |r| r.val_dice);
    commands::infer(&cfg, Split::Val).map_err(e)?;
    commands::infer(&cfg, Split::Test).map_err(e)?;
    let sweep = commands::sweep_threshold_cmd(&cfg).map_err(e)?;
    let mut summaries = HashMap::new();
    for v in Variant::ALL {
        commands::postprocess(&cfg, Split::Test, v).map_err(e)?;
        summaries.insert(v, commands::evaluate(&cfg, Split::Test, v).map_err(e)?);
    }
    commands::report(&cfg, Split::Test).map_err(e)?;
    Ok(Pipeline {
        train_time,
        best_val_dice,
        threshold: sweep.best,
        summaries,
    })
}

fn dice_of(p: &Pipeline, v: Variant) -> f64 {
    p.summaries[&v].pixel.as_ref().map_or(f64::NAN, |s| s.dice.mean)
}

fn c4_layer_dice(p: &Pipeline) -> Outcome {
    let mins = p.train_time.as_secs_f64() / 60.0;
    check(
        p.best_val_dice >= 0.90 && mins <= 20.0,
        format!(
            "held-out macro layer Dice {:.4} (>= 0.90), training {mins:.1} min (<= 20)",
            p.best_val_dice
        ),
    )
}

fn c5_anomaly_dice(p: &Pipeline) -> Outcome {
    let full = dice_of(p, Variant::Full);
    let thr = dice_of(p, Variant::ThresholdingOnly);
    let n = p.summaries[&Variant::Full].pixel.as_ref().map_or(0, |s| s.volumes);
    check(
        full >= 0.55 && thr < full && n >= 20,
        format!(
            "t = {}; full Dice {full:.4} (>= 0.55) on {n} volumes; thresholding_only {thr:.4} (< full)",
            p.threshold
        ),
    )
}

fn c6_ablation(p: &Pipeline) -> Outcome {
    let full = dice_of(p, Variant::Full);
    let others: Vec<String> = [Variant::ThresholdingOnly, Variant::ConvexHull, Variant::NoMorphology]
        .iter()
        .map(|&v| format!("{v} {:.4}", dice_of(p, v)))
        .collect();
    let ok = [Variant::ThresholdingOnly, Variant::ConvexHull, Variant::NoMorphology]
        .iter()
        .all(|&v| full >= dice_of(p, v) - 0.02);
    check(ok, format!("full {full:.4} vs {}", others.join(", ")))
}

fn c7_separation(p: &Pipeline) -> Outcome {
    let s = &p.summaries[&Variant::Full];
    let healthy = s.volumes.iter().filter(|r| r.condition == Condition::Healthy).count();
    let diseased = s.volumes.len() - healthy;
    match &s.separation {
        Some(r) => check(
            r.auc >= 0.95 && healthy >= 15 && diseased >= 20,
            format!("AUC {:.4} (>= 0.95), overlap {}, {healthy} healthy / {diseased} diseased", r.auc, r.overlap),
        ),
        None => Err("no separation report".into()),
    }
}

fn c8_correlation(p: &Pipeline) -> Outcome {
    let s = &p.summaries[&Variant::Full];
    match (&s.correlation, &s.correlation_error) {
        (Some(c), _) => check(c.rho >= 0.6, format!("rho {:.4} (>= 0.6) over {} volumes", c.rho, c.n)),
        (None, e) => Err(format!("correlation undefined: {e:?}")),
    }
}

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    (1usize..=24, 1usize..=24, 0.0f64..0.5, any::<u64>()).prop_map(|(r, c, d, s)| random_mask(r, c, d, s))
}

fn c9_properties() -> Outcome {
    const CASES: u32 = 256;
    let mut runner = TestRunner::new(PtConfig {
        cases: CASES,
        failure_persistence: None,
        ..PtConfig::default()
    });
    fn err<T: std::fmt::Debug>(name: &str, e: proptest::test_runner::TestError<T>) -> String {
        format!("{name}: {e}")
    }

    let grid = (1usize..=20, 1usize..=20, any::<u64>()).prop_map(|(r, c, s)| {
        let mut rng = rng_from(s);
        Grid::from_fn(r, c, |_, _| rng.gen_range(0.0..0.25f64))
    });
    runner
        .run(&(grid, 0.001f64..0.25, 0.001f64..0.25), |(u, a, b)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(subset(&threshold(&u, hi), &threshold(&u, lo)));
            Ok(())
        })
        .map_err(|e| err("threshold antitone", e))?;

    let votes = proptest::collection::vec(1u8..=4, 1..=4);
    runner
        .run(&(mask_strategy(), votes.clone()), |(m, v)| {
            prop_assert!(subset(&m, &majority_ray_cast(&m, &v)));
            Ok(())
        })
        .map_err(|e| err("ray cast growth", e))?;

    runner
        .run(&(mask_strategy(), votes, 0.0f64..0.5, any::<u64>()), |(a, v, d, s)| {
            let extra = random_mask(a.rows(), a.cols(), d, s);
            let b = a.union(&extra);
            prop_assert!(subset(&majority_ray_cast(&a, &v), &majority_ray_cast(&b, &v)));
            Ok(())
        })
        .map_err(|e| err("ray cast monotone", e))?;

    let stacks = (1usize..=4, 4usize..=20, 4usize..=20, 0.0f64..0.4, any::<u64>()).prop_map(|(n, r, c, d, s)| {
        let pred: Vec<BinaryMask> = (0..n as u64).map(|i| random_mask(r, c, d, s ^ (2 * i + 1))).collect();
        let gt: Vec<BinaryMask> = (0..n as u64).map(|i| random_mask(r, c, d, s ^ (2 * i + 2))).collect();
        (pred, gt)
    });
    let d_grid = default_d_grid();
    runner
        .run(&stacks, |(pred, gt)| {
            let l = lesion_curves(&pred, &gt, &d_grid).expect("curves");
            for w in 0..l.d.len().saturating_sub(1) {
                prop_assert!(l.tp_recall[w + 1] <= l.tp_recall[w]);
                prop_assert!(l.tp_precision[w + 1] <= l.tp_precision[w]);
                for series in [&l.ld_re, &l.ld_pr] {
                    if let (Some(a), Some(b)) = (series[w], series[w + 1]) {
                        prop_assert!(b <= a);
                    }
                }
            }
            Ok(())
        })
        .map_err(|e| err("LD curves nonincreasing", e))?;

    Ok(format!("4 property suites x {CASES} cases"))
}

fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.phantom.bscans_per_volume = 2;
    cfg.dataset = DatasetCounts {
        train_healthy: 2,
        val_healthy: 1,
        val_diseased: 1,
        test_diseased: 2,
        test_healthy: 1,
    };
    cfg.network.depth = 2;
    cfg.network.channels = vec![4, 4];
    cfg.training.epochs = 2;
    cfg.inference.n_samples = 4;
    cfg.eval.t_grid = vec![0.005, 0.01, 0.02];
    cfg.set_seed(123);
    cfg.paths.data_root = root.join("data");
    cfg.paths.output_dir = root.join("runs");
    cfg.paths.model_path = root.join("runs/model.bunw");
    cfg
}

fn run_tiny(root: &Path) -> Result<(), String> {
    let cfg = tiny_config(root);
    let e = |f: episeg_cli::Failure| f.to_string();
    commands::gen_data(&cfg).map_err(e)?;
    commands::train(&cfg).map_err(e)?;
    commands::infer(&cfg, Split::Val).map_err(e)?;
    commands::infer(&cfg, Split::Test).map_err(e)?;
    commands::sweep_threshold_cmd(&cfg).map_err(e)?;
    for v in Variant::ALL {
        commands::postprocess(&cfg, Split::Test, v).map_err(e)?;
        commands::evaluate(&cfg, Split::Test, v).map_err(e)?;
    }
    commands::report(&cfg, Split::Test).map_err(e)?;
    Ok(())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c10_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_tiny(a.path())?;
    run_tiny(b.path())?;
    let fa = files_under(a.path());
    if fa != files_under(b.path()) {
        return Err("the two runs produced different file sets".into());
    }
    let (mut masks, mut csvs, mut compared) = (0, 0, 0);
    for rel in &fa {
        let name = rel.file_name().unwrap().to_string_lossy();
        if name == "run.json" {
            continue;
        }
        let (x, y) = (std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        if x != y {
            return Err(format!("{} differs between runs", rel.display()));
        }
        masks += name.starts_with("mask_") as usize;
        csvs += name.ends_with(".csv") as usize;
        compared += 1;
    }
    check(
        masks > 0 && csvs > 0,
        format!("{compared} files byte-identical ({masks} masks, {csvs} CSVs)"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        print_line(n, name, &r);
        results.push((n, name, r));
    };
    run(1, "uncertainty oracle equivalence", &c1_uncertainty_oracle);
    run(2, "ray-casting oracle equivalence", &c2_ray_casting_oracle);
    run(3, "gradient check", &c3_gradient_check);

    let dir = tempfile::tempdir().expect("tempdir");
    let pipeline = catch_unwind(AssertUnwindSafe(|| run_default_pipeline(dir.path())))
        .unwrap_or_else(|_| Err("pipeline panicked".into()));
    let staged: [(usize, &str, fn(&Pipeline) -> Outcome); 5] = [
        (4, "layer-segmentation quality", c4_layer_dice),
        (5, "end-to-end anomaly Dice", c5_anomaly_dice),
        (6, "ablation direction", c6_ablation),
        (7, "volume separation", c7_separation),
        (8, "correlation direction", c8_correlation),
    ];
    for (n, name, f) in staged {
        match &pipeline {
            Ok(p) => run(n, name, &|| f(p)),
            Err(e) => run(n, name, &|| Err(format!("pipeline failed: {e}"))),
        }
    }
    drop(dir);

    run(9, "monotonicity properties", &c9_properties);
    run(10, "determinism", &c10_determinism);

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn print_line(n: usize, name: &str, r: &Outcome) {
    match r {
        Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
        Err(d) => println!("criterion {n:>2} FAIL  {name}: {d}"),
    }
}
