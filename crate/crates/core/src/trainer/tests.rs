use super::*;
use crate::datapipe::{generate_mso, inject_point, DatasetMeta, MsoConfig};
use crate::numcore::AdamWConfig;

fn small_dataset(seed: u64) -> SpatioTemporalDataset {
    let ds = generate_mso(&MsoConfig {
        steps: 120,
        oscillators: 2,
        seed,
        graph: crate::datapipe::GraphSpec {
            kind: crate::datapipe::GraphKind::RandomGeometric,
            nodes: 6,
            seed,
            mean_degree: 3.0,
        },
        ..Default::default()
    })
    .unwrap();
    inject_point(&ds, 0.1, seed).unwrap()
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig {
        window: 6,
        horizon: 3,
        stride: 2,
        ..Default::default()
    };
    cfg.tgmm.d_node = 8;
    cfg.tgmm.d_patch = 8;
    cfg.tgmm.node_mixer_layers = 1;
    cfg.tgmm.patch_mixer_layers = 1;
    cfg.tgmm.patches = 2;
    cfg.fclstm.hidden = 8;
    cfg.fclstm.layers = 2;
    cfg.train.max_epochs = 3;
    cfg.train.batch_size = 4;
    cfg
}

#[test]
fn scripted_early_stop() {
    let mut es = EarlyStopping::new(5, 1e-4);
    let vals = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95, 0.5];
    let mut stopped_at = None;
    for (e, &v) in vals.iter().enumerate() {
        if es.update(e, v).stop {
            stopped_at = Some(e);
            break;
        }
    }
    assert_eq!(stopped_at, Some(6));
    assert_eq!(es.best_epoch, Some(1));
    assert_eq!(es.best, 0.9);
}

#[test]
fn early_stop_counts_exactly_patience_epochs() {
    for patience in 1..8 {
        let mut es = EarlyStopping::new(patience, 1e-4);
        assert!(!es.update(0, 1.0).stop);
        // improvements smaller than min_delta do not count
        for k in 1..patience {
            assert!(!es.update(k, 1.0 - 0.5e-4).stop);
        }
        assert!(es.update(patience, 1.0).stop);
    }
}

fn build(cfg: &RunConfig, ds: &SpatioTemporalDataset) -> (RunConfig, Model) {
    let mut cfg = cfg.clone();
    cfg.resolve(ds.num_nodes, ds.num_channels);
    let part = ensure_partition(&ds.graph, None, cfg.tgmm.patches, &cfg.partition).unwrap();
    let m = Model::build(&cfg, Some(&part)).unwrap();
    (cfg, m)
}

#[test]
fn accumulation_matches_large_batch() {
    let ds = small_dataset(1);
    let prep = Prepared::new(&ds).unwrap();
    let (cfg, model) = build(&small_config(), &ds);
    let w = split_windows(&prep, Split::Train, cfg.window, cfg.horizon, 1).unwrap();
    let batch: Vec<&WindowSample> = w.iter().take(8).collect();
    let run = |batch_size| {
        let mut m = model.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), m.params().tensors().iter());
        optimizer_step(&mut m, &mut opt, &batch, batch_size, Some(9)).unwrap();
        m.params().tensors()
    };
    let (a, b) = (run(2), run(8));
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(&b) {
        worst = worst.max(x.max_abs_diff(y));
    }
    assert!(worst <= 1e-10, "{worst}");
    assert_ne!(a, model.params().tensors());
}

#[test]
fn loss_ignores_unobserved_targets() {
    let ds = small_dataset(2);
    let prep = Prepared::new(&ds).unwrap();
    let (cfg, model) = build(&small_config(), &ds);
    let w = split_windows(&prep, Split::Train, cfg.window, cfg.horizon, 1).unwrap();
    let mut r = rng::stream(0, "perturb", 0);
    for chunk in w.chunks(4).take(10) {
        let batch: Vec<&WindowSample> = chunk.iter().collect();
        let denom: f64 = chunk.iter().map(train_mask_count).sum();
        let (base, gb) = batch_loss(&model, &batch, denom, Some(1)).unwrap();
        let perturbed: Vec<WindowSample> = chunk
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for (y, &m) in s.target.data_mut().iter_mut().zip(s.train_mask.data()) {
                    if m == 0.0 {
                        *y += if rand::Rng::random::<bool>(&mut r) { 1e3 } else { -1e3 };
                    }
                }
                s
            })
            .collect();
        let pb: Vec<&WindowSample> = perturbed.iter().collect();
        let (moved, gm) = batch_loss(&model, &pb, denom, Some(1)).unwrap();
        assert_eq!(base.to_bits(), moved.to_bits());
        assert_eq!(gb, gm);
    }
}

#[test]
fn one_epoch_run_writes_artifacts() {
    let ds = small_dataset(3);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.max_epochs = 1;
    let out = train(&ds, None, cfg, dir.path()).unwrap();
    assert_eq!(out.history.len(), 1);
    let hist = fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(hist.lines().count(), 2);
    assert!(hist.starts_with("epoch,train_loss,val_loss,lr,seconds\n"));
    for f in [CONFIG_FILE, METRICS_FILE, PARTITION_FILE, "best/manifest.json", "best/params.bin"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let m = &out.metrics;
    assert_eq!((m.epochs_run, m.best_epoch), (1, 0));
    assert!(m.test_mae.is_some() && m.persistence_test_mae.is_some());
}

#[test]
fn schedule_checkpoint_and_reproducibility() {
    let ds = small_dataset(4);
    let mut cfg = small_config();
    cfg.train.max_epochs = 6;
    cfg.train.optimizer.lr = 3e-5;
    cfg.train.schedule.min_lr = 1e-5;
    cfg.train.schedule.patience = 1;
    cfg.train.threads = 1;
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = train(&ds, None, cfg.clone(), d1.path()).unwrap();
    train(&ds, None, cfg, d2.path()).unwrap();
    for f in [HISTORY_FILE, METRICS_FILE, "best/params.bin"] {
        assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
    for pair in a.history.windows(2) {
        assert!(pair[1].lr <= pair[0].lr);
    }
    assert!(a.history.iter().all(|r| r.lr >= 1e-5));
    // recompute the best validation loss from the checkpoint
    let (cfg, model) = load_run(d1.path(), &ds).unwrap();
    let prep = Prepared::new(&ds).unwrap();
    let val = split_windows(&prep, Split::Val, cfg.window, cfg.horizon, cfg.stride).unwrap();
    let recomputed = masked_loss(&model, &val, 1).unwrap();
    let recorded = a.history[a.metrics.best_epoch].val_loss;
    assert!((recomputed - recorded).abs() <= 1e-10, "{recomputed} vs {recorded}");
}

#[test]
fn divergence_aborts_with_history() {
    let ds = small_dataset(5);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.optimizer.lr = 1e300;
    cfg.train.optimizer.weight_decay = 0.0;
    let err = train(&ds, None, cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert!(dir.path().join(HISTORY_FILE).exists());
}

#[test]
fn fclstm_runs_through_the_same_loop() {
    let ds = small_dataset(6);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.model = ModelKind::Fclstm;
    cfg.train.max_epochs = 2;
    let out = train(&ds, None, cfg, dir.path()).unwrap();
    assert!(!dir.path().join(PARTITION_FILE).exists());
    let m = evaluate_run(dir.path(), &ds, Split::Test, EvalPolicy::EvalMask, 1).unwrap();
    assert_eq!(Some(m.mae), out.metrics.test_mae);
}

#[test]
fn policies_coincide_without_synthetic_masking() {
    let ds = generate_mso(&MsoConfig {
        steps: 100,
        ..Default::default()
    })
    .unwrap();
    let prep = Prepared::new(&ds).unwrap();
    let w = split_windows(&prep, Split::Test, 8, 4, 1).unwrap();
    let a = evaluate(Predictor::Persistence, &ds, &prep, &w, EvalPolicy::TrainMask, 1).unwrap();
    let b = evaluate(Predictor::Persistence, &ds, &prep, &w, EvalPolicy::EvalMask, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_predictor_on_sine_matches_closed_form() {
    // one full period of 20 samples lands in the test split of T = 100
    let period = 20usize;
    let amp = 1.7;
    let (n, t_len) = (3, 100);
    let mut values = Vec::new();
    for node in 0..n {
        for t in 0..t_len {
            let phase = 2.0 * std::f64::consts::PI * (t + 5 * node) as f64 / period as f64;
            values.push(amp * phase.sin());
        }
    }
    let meta = DatasetMeta {
        name: "sine".into(),
        sample_period_seconds: 1.0,
        channel_names: vec!["v".into()],
    };
    let ds = SpatioTemporalDataset::fully_observed(values, [n, t_len, 1], SensorGraph::path(n), meta).unwrap();
    let prep = Prepared::new(&ds).unwrap();
    let w = split_windows(&prep, Split::Test, 5, 1, 1).unwrap();
    assert_eq!(w.len(), period);
    let m = evaluate(Predictor::Zero, &ds, &prep, &w, EvalPolicy::EvalMask, 1).unwrap();
    // mean over a period of |sin(2 pi k / P)| is 2 cot(pi / P) / P
    let p = period as f64;
    let want = amp * 2.0 / (std::f64::consts::PI / p).tan() / p;
    assert!((m.mae - want).abs() < 1e-12, "{} vs {want}", m.mae);
}

#[test]
fn persistence_matches_direct_rule() {
    let ds = small_dataset(7);
    let prep = Prepared::new(&ds).unwrap();
    let w = split_windows(&prep, Split::Test, 6, 3, 1).unwrap();
    for s in w.iter().step_by(5) {
        let pred = Predictor::Persistence.predict(&prep, s).unwrap();
        for node in 0..ds.num_nodes {
            let last = (0..s.start + 6)
                .rev()
                .map(|t| ds.index(node, t, 0))
                .find(|&i| ds.mask[i])
                .map(|i| ds.values[i])
                .unwrap();
            for k in 0..3 {
                assert!((pred[node * 3 + k] - last).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn parallel_evaluation_is_thread_independent() {
    let ds = small_dataset(8);
    let prep = Prepared::new(&ds).unwrap();
    let (cfg, model) = build(&small_config(), &ds);
    let w = split_windows(&prep, Split::Test, cfg.window, cfg.horizon, 1).unwrap();
    let a = evaluate(Predictor::Model(&model), &ds, &prep, &w, EvalPolicy::EvalMask, 1).unwrap();
    let b = evaluate(Predictor::Model(&model), &ds, &prep, &w, EvalPolicy::EvalMask, 3).unwrap();
    assert_eq!(a.mae.to_bits(), b.mae.to_bits());
    assert_eq!(a.mse.to_bits(), b.mse.to_bits());
}

#[test]
fn prediction_export_rows() {
    let ds = small_dataset(9);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.max_epochs = 1;
    train(&ds, None, cfg.clone(), dir.path()).unwrap();
    let out = dir.path().join("pred.csv");
    let rows = predict_run(dir.path(), &ds, Split::Test, &out, 1).unwrap();
    let prep = Prepared::new(&ds).unwrap();
    let nw = split_windows(&prep, Split::Test, cfg.window, cfg.horizon, cfg.stride).unwrap().len();
    assert_eq!(rows, ds.num_nodes * nw * cfg.horizon);
    let text = fs::read_to_string(&out).unwrap();
    let mut hidden_seen = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (node, t): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        let i = ds.index(node, t, 0);
        assert_eq!(f[6] == "1", ds.mask[i]);
        if !ds.mask[i] {
            hidden_seen += 1;
            let v: f64 = f[4].parse().unwrap();
            assert!((v - ds.eval_truth[i].unwrap()).abs() <= 1e-9 * v.abs().max(1.0));
        }
    }
    assert!(hidden_seen > 0);
    assert_eq!(text.lines().count(), rows + 1);
}

#[test]
fn incompatible_dataset_is_rejected() {
    let ds = small_dataset(10);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.max_epochs = 1;
    train(&ds, None, cfg, dir.path()).unwrap();
    let other = generate_mso(&MsoConfig::default()).unwrap();
    assert!(matches!(load_run(dir.path(), &other), Err(Error::Data(_))));
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    let cfg = small_config();
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
    assert!(serde_json::from_str::<RunConfig>(r#"{"windw": 3}"#).is_err());
    let mut bad = small_config();
    bad.train.patience = 0;
    assert!(bad.validate().is_err());
}
