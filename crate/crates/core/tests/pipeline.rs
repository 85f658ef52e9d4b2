use episeg::eval::{pixel_metrics, EvalVolume};
use episeg::phantom::{generate_dataset, generate_entry, read_manifest, read_volume, DatasetCounts, Split};
use episeg::postproc::pipeline;
use episeg::segnet::{init_weights, load_weights, mc_sample, save_weights, train, TrainConfig};
use episeg::uncertainty::uncertainty_map;
use episeg::{Condition, Grid, NetworkConfig, PhantomConfig, PostprocParams};

fn small_phantom() -> PhantomConfig {
    PhantomConfig { bscans_per_volume: 2, ..PhantomConfig::default() }
}

fn small_net() -> NetworkConfig {
    NetworkConfig { depth: 2, channels: vec![4, 8], ..NetworkConfig::default() }
}

fn counts() -> DatasetCounts {
    DatasetCounts { train_healthy: 2, val_healthy: 1, val_diseased: 1, test_diseased: 2, test_healthy: 1 }
}

#[test]
fn dataset_on_disk_matches_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let written = generate_dataset(&small_phantom(), counts(), 11, &root).unwrap();
    let manifest = read_manifest(&root).unwrap();
    assert_eq!(manifest, written);
    assert_eq!(manifest.volumes.len(), 7);
    for entry in &manifest.volumes {
        let fresh = generate_entry(&manifest, entry).unwrap();
        let disk = read_volume(&root, entry, manifest.config.bscans_per_volume).unwrap();
        assert_eq!(disk.labels, fresh.labels, "{}", entry.id);
        assert_eq!(disk.anomaly_masks, fresh.anomaly_masks, "{}", entry.id);
        assert_eq!(disk.bottom_boundary, fresh.bottom_boundary, "{}", entry.id);
        for (a, b) in disk.bscans.iter().zip(&fresh.bscans) {
            let worst = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
            assert!(worst <= 1.0 / 255.0, "{}: {worst}", entry.id);
        }
        let anomalous: usize = fresh.anomaly_masks.iter().map(|m| m.count()).sum();
        match entry.condition {
            Condition::Healthy => assert_eq!(anomalous, 0),
            Condition::Diseased => assert!(anomalous > 0),
        }
    }
    assert_eq!(manifest.entries(Split::Test, Some(Condition::Diseased)).count(), 2);
}

#[test]
fn short_training_feeds_the_anomaly_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let counts = DatasetCounts { train_healthy: 8, ..counts() };
    let manifest = generate_dataset(&small_phantom(), counts, 5, &root).unwrap();
    let pairs = |split| {
        manifest
            .entries(split, Some(Condition::Healthy))
            .flat_map(|e| {
                let v = generate_entry(&manifest, e).unwrap();
                v.bscans.into_iter().zip(v.labels)
            })
            .collect::<Vec<_>>()
    };
    let (tr, va) = (pairs(Split::Train), pairs(Split::Val));
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let outcome = train(&tr, &va, &small_net(), &cfg, |_| {}).unwrap();
    assert!(!outcome.diverged);
    assert_eq!(outcome.log.epochs.len(), 5);
    assert!(outcome.log.epochs.last().unwrap().loss < outcome.log.epochs[0].loss);

    let path = dir.path().join("model.bunw");
    save_weights(&path, &outcome.weights).unwrap();
    let weights = load_weights(&path, &small_net()).unwrap();

    let entry = manifest.entries(Split::Test, Some(Condition::Diseased)).next().unwrap();
    let volume = generate_entry(&manifest, entry).unwrap();
    let params = PostprocParams { threshold: 0.01, ..PostprocParams::default() };
    let mut maps = Vec::new();
    for (i, b) in volume.bscans.iter().enumerate() {
        let stack = mc_sample(&weights, b, 6, i as u64).unwrap();
        let again = mc_sample(&weights, b, 6, i as u64).unwrap();
        let u = uncertainty_map(&stack).unwrap();
        assert_eq!(u.values, uncertainty_map(&again).unwrap().values);
        assert!(u.values.as_slice().iter().all(|v| v.is_finite() && *v >= 0.0));
        let mask = pipeline(&u, &params, Some(&volume.bottom_boundary[i])).unwrap();
        assert_eq!(mask.shape(), b.shape());
        maps.push(u.values);
    }
    let ev = EvalVolume {
        id: volume.volume_id.clone(),
        uncertainty: maps,
        gt: volume.anomaly_masks.clone(),
        bottom: volume.bottom_boundary.clone(),
    };
    let m = ev.metrics(&params).unwrap();
    assert!((0.0..=1.0).contains(&m.dice));
}

#[test]
fn pipeline_recovers_a_clean_blob() {
    let (rows, cols) = (64, 128);
    let inside = |r: usize, c: usize| {
        let (dr, dc) = (r as f64 - 30.0, (c as f64 - 60.0) / 2.0);
        dr * dr + dc * dc <= 100.0
    };
    let u = Grid::from_fn(rows, cols, |r, c| if inside(r, c) { 0.1 } else { 0.001 });
    let gt = Grid::from_fn(rows, cols, inside);
    let mask = episeg::postproc::pipeline_values(&u, &PostprocParams { threshold: 0.05, ..PostprocParams::default() }, None)
        .unwrap();
    let m = pixel_metrics(&[mask], &[gt]).unwrap();
    assert!(m.dice > 0.95, "{m:?}");
}

#[test]
fn untrained_weights_still_sample() {
    let net = small_net();
    let w = init_weights(&net, 0).unwrap();
    let image = Grid::filled(net.input_rows, net.input_cols, 0.5f32);
    let stack = mc_sample(&w, &image, 3, 1).unwrap();
    assert_eq!(stack.len(), 3);
}
