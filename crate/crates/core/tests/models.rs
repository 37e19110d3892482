//! Training-dynamics sanity checks on a noiseless MSO overfit task.

use tgmm_core::datapipe::{generate_mso, split_windows, MsoConfig, Prepared, Split, SpatioTemporalDataset};
use tgmm_core::trainer::{masked_loss, train, ModelKind, RunConfig, TrainOutcome};

fn noiseless(nodes: usize, steps: usize, oscillators: usize, seed: u64) -> SpatioTemporalDataset {
    let mut cfg = MsoConfig {
        steps,
        oscillators,
        noise_sigma: 0.0,
        seed,
        ..Default::default()
    };
    cfg.graph.nodes = nodes;
    cfg.graph.seed = seed;
    generate_mso(&cfg).unwrap()
}

/// Reduced FC-LSTM: 2 layers of width 64 without dropout.
fn lstm_config(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelKind::Fclstm,
        ..Default::default()
    };
    cfg.fclstm.hidden = 64;
    cfg.fclstm.layers = 2;
    cfg.fclstm.dropout = vec![0.0; 2];
    cfg.train.max_epochs = epochs;
    cfg.train.batch_size = 16;
    cfg.train.optimizer.lr = 2e-3;
    cfg.train.patience = epochs;
    cfg
}

fn train_mae(ds: &SpatioTemporalDataset, out: &TrainOutcome) -> f64 {
    let prep = Prepared::new(ds).unwrap();
    let c = &out.config;
    let windows = split_windows(&prep, Split::Train, c.window, c.horizon, c.stride).unwrap();
    masked_loss(&out.model, &windows, 1).unwrap()
}

#[test]
fn fclstm_training_dynamics_and_overfit() {
    let ds = noiseless(8, 400, 2, 1);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&ds, None, lstm_config(300), dir.path()).unwrap();
    assert_eq!(out.history.len(), 300);
    let first = out.history[0].train_loss;
    let best50 = out.history[..50].iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min);
    println!("fclstm train loss {first:.4} -> {best50:.4} within 50 epochs");
    assert!(best50 <= 0.5 * first, "{first} -> {best50}");
    let mae = train_mae(&ds, &out);
    println!("fclstm train masked MAE after 300 epochs: {mae:.4}");
    assert!(mae < 0.1, "{mae}");
}
