//! Training loop with gradient accumulation, plateau scheduling and early
//! stopping; run directories; evaluation in original units.

mod config;
mod eval;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{EvalPolicy, ModelKind, PartitionConfig, RunConfig, TrainConfig};
pub use eval::{evaluate, evaluate_sums, truth_at, write_predictions, Predictor};

use crate::datapipe::{split_windows, Prepared, SpatioTemporalDataset, Split, WindowSample};
use crate::error::{ensure, Error, Result};
use crate::fclstm::FcLstm;
use crate::graphpart::{expand_one_hop, load_partition, partition, save_partition, PatchPartition, SensorGraph};
use crate::numcore::nn::Mode;
use crate::numcore::{checkpoint, rng, AdamW, Bound, ParamStore, PlateauScheduler, Tape, Tensor, Var};
use crate::tgmm::{Metrics, Tgmm};

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const BEST_DIR: &str = "best";

#[derive(Clone, Debug)]
pub enum Model {
    Tgmm(Tgmm),
    Fclstm(FcLstm),
}

impl Model {
    /// `cfg` must already be resolved against the dataset.
    pub fn build(cfg: &RunConfig, partition: Option<&PatchPartition>) -> Result<Self> {
        let seed = cfg.train.seed;
        match cfg.model {
            ModelKind::Tgmm => {
                let part = partition.ok_or_else(|| Error::Contract("the T-GMM needs a partition".into()))?;
                Ok(Model::Tgmm(Tgmm::new(cfg.tgmm.clone(), part, seed)?))
            }
            ModelKind::Fclstm => Ok(Model::Fclstm(FcLstm::new(cfg.fclstm.clone(), seed)?)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Tgmm(_) => ModelKind::Tgmm,
            Model::Fclstm(_) => ModelKind::Fclstm,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Tgmm(m) => &m.params,
            Model::Fclstm(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Tgmm(m) => &mut m.params,
            Model::Fclstm(m) => &mut m.params,
        }
    }

    /// Normalized `[N, H, C_out]` forecast.
    pub fn forward(&self, t: &mut Tape, p: &Bound, s: &WindowSample, mode: &mut Mode) -> Result<Var> {
        match self {
            Model::Tgmm(m) => m.forward(t, p, s, mode),
            Model::Fclstm(m) => m.forward(t, p, s, mode),
        }
    }
}

/// Stops after `patience` consecutive epochs without a `min_delta` improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val: f64) -> StopDecision {
        let improved = val < self.best - self.min_delta;
        if improved {
            self.best = val;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision {
            improved,
            stop: self.bad_epochs >= self.patience,
        }
    }
}

pub fn train_mask_count(s: &WindowSample) -> f64 {
    s.train_mask.data().iter().sum()
}

/// Σ masked |error| over `batch` divided by `denom`, with its gradient.
///
/// Training mode when `dropout_seed` is given; each window then draws its
/// dropout masks from a stream keyed by its start index.
pub fn batch_loss(
    model: &Model,
    batch: &[&WindowSample],
    denom: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Tensor>)> {
    ensure!(denom > 0.0, "loss denominator must be positive");
    let mut t = Tape::new();
    let p = model.params().bind(&mut t);
    let mut total: Option<Var> = None;
    for s in batch {
        let y = match dropout_seed {
            Some(seed) => {
                let mut r = rng::stream(seed, "dropout", s.start as u64);
                model.forward(&mut t, &p, s, &mut Mode::Train(&mut r))?
            }
            None => model.forward(&mut t, &p, s, &mut Mode::Eval)?,
        };
        let l = t.masked_abs_sum(y, &s.target, &s.train_mask);
        total = Some(match total {
            Some(acc) => t.add(acc, l),
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let loss = t.scale(total, 1.0 / denom);
    let value = t.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss is {value}")));
    }
    let grads = p.grads(&t.backward(loss)?);
    Ok((value, grads))
}

/// One optimizer step over `windows` split into micro-batches of
/// `batch_size`; the loss is the mean over all their observed targets.
/// Returns (Σ |error|, Σ mask), or `None` if nothing was observed.
pub fn optimizer_step(
    model: &mut Model,
    opt: &mut AdamW,
    windows: &[&WindowSample],
    batch_size: usize,
    dropout_seed: Option<u64>,
) -> Result<Option<(f64, f64)>> {
    let denom: f64 = windows.iter().map(|s| train_mask_count(s)).sum();
    if denom == 0.0 {
        return Ok(None);
    }
    let mut grads: Option<Vec<Tensor>> = None;
    let mut loss = 0.0;
    for micro in windows.chunks(batch_size) {
        let (l, g) = batch_loss(model, micro, denom, dropout_seed)?;
        loss += l;
        grads = Some(match grads {
            None => g,
            Some(mut acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                acc
            }
        });
    }
    opt.step(model.params_mut().tensors_mut(), &grads.unwrap())?;
    Ok(Some((loss * denom, denom)))
}

/// Normalized masked MAE on observed targets (the validation loss).
pub fn masked_loss(model: &Model, windows: &[WindowSample], threads: usize) -> Result<f64> {
    let parts = eval::in_pool(threads, || {
        windows
            .par_iter()
            .map(|s| {
                let mut t = Tape::new();
                let p = model.params().bind(&mut t);
                let y = model.forward(&mut t, &p, s, &mut Mode::Eval)?;
                let l = t.masked_abs_sum(y, &s.target, &s.train_mask);
                Ok((t.value(l).item(), train_mask_count(s)))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in parts {
        num += a;
        den += b;
    }
    ensure!(den > 0.0, "no observed targets to score");
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss,lr,seconds\n");
    for r in history {
        s.push_str(&format!(
            "{},{:.12e},{:.12e},{:.6e},{:.3}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Per predictor, per policy; `None` where nothing was eligible.
pub type SplitMetrics = BTreeMap<String, BTreeMap<String, Option<Metrics>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub model: ModelKind,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub headline_policy: EvalPolicy,
    /// Test MAE of the model under the headline policy.
    pub test_mae: Option<f64>,
    pub persistence_test_mae: Option<f64>,
    pub splits: BTreeMap<String, SplitMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub history: Vec<EpochRecord>,
    pub metrics: RunMetrics,
    pub model: Model,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Halo partition for `graph`, reusing `given` when supplied.
pub fn ensure_partition(
    graph: &SensorGraph,
    given: Option<&PatchPartition>,
    patches: usize,
    cfg: &PartitionConfig,
) -> Result<PatchPartition> {
    let part = match given {
        Some(p) if p.has_halos() => p.clone(),
        Some(p) => expand_one_hop(p, graph),
        None => expand_one_hop(&partition(graph, patches, cfg.imbalance, cfg.seed)?, graph),
    };
    part.validate(graph)?;
    ensure!(
        part.num_patches == patches,
        "partition has {} patches, config expects {patches}",
        part.num_patches
    );
    Ok(part)
}

fn windows_for(prep: &Prepared, cfg: &RunConfig, split: Split) -> Result<Vec<WindowSample>> {
    split_windows(prep, split, cfg.window, cfg.horizon, cfg.stride)
}

/// Scores `predictors` on every split under both policies.
pub fn split_report(
    predictors: &[Predictor],
    ds: &SpatioTemporalDataset,
    prep: &Prepared,
    cfg: &RunConfig,
) -> Result<BTreeMap<String, SplitMetrics>> {
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let windows = windows_for(prep, cfg, split)?;
        let mut per = SplitMetrics::new();
        for pred in predictors {
            let sums = evaluate_sums(*pred, ds, prep, &windows, cfg.train.threads)?;
            let mut by_policy = BTreeMap::new();
            for (slot, policy) in [EvalPolicy::TrainMask, EvalPolicy::EvalMask].into_iter().enumerate() {
                by_policy.insert(policy.name().to_string(), sums[slot].finish().ok());
            }
            per.insert(pred.name().to_string(), by_policy);
        }
        out.insert(split.name().to_string(), per);
    }
    Ok(out)
}

/// Trains on `ds` and fills `out_dir` with the run artifacts.
pub fn train(
    ds: &SpatioTemporalDataset,
    partition: Option<&PatchPartition>,
    mut cfg: RunConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if let (0, Some(p)) = (cfg.tgmm.patches, partition) {
        cfg.tgmm.patches = p.num_patches;
    }
    cfg.resolve(ds.num_nodes, ds.num_channels);
    cfg.validate()?;
    let prep = Prepared::new(ds)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join(CONFIG_FILE), &cfg)?;

    let part = match cfg.model {
        ModelKind::Tgmm => {
            let p = ensure_partition(&ds.graph, partition, cfg.tgmm.patches, &cfg.partition)?;
            save_partition(&out_dir.join(PARTITION_FILE), &p)?;
            Some(p)
        }
        ModelKind::Fclstm => None,
    };
    let mut model = Model::build(&cfg, part.as_ref())?;

    let train_w = windows_for(&prep, &cfg, Split::Train)?;
    let val_w = windows_for(&prep, &cfg, Split::Val)?;
    ensure!(!train_w.is_empty(), "training split too short for window {} + horizon {}", cfg.window, cfg.horizon);
    ensure!(!val_w.is_empty(), "validation split too short for window {} + horizon {}", cfg.window, cfg.horizon);

    let tc = cfg.train.clone();
    let mut opt = AdamW::new(tc.optimizer, model.params().tensors().iter());
    let mut sched = PlateauScheduler::new(tc.schedule, tc.optimizer.lr);
    let mut stopper = EarlyStopping::new(tc.patience, tc.min_delta);
    let mut history = Vec::new();
    let history_path = out_dir.join(HISTORY_FILE);
    let best_dir = out_dir.join(BEST_DIR);
    let step_windows = tc.batch_size * tc.accum_steps;
    let mut stopped_early = false;

    for epoch in 0..tc.max_epochs {
        let clock = Instant::now();
        let epoch_seed = rng::derive_seed(tc.seed, "epoch", epoch as u64);
        let mut order: Vec<usize> = (0..train_w.len()).collect();
        order.shuffle(&mut rng::stream(epoch_seed, "shuffle", 0));
        let (mut abs_sum, mut count) = (0.0, 0.0);
        for chunk in order.chunks(step_windows) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &train_w[i]).collect();
            match optimizer_step(&mut model, &mut opt, &batch, tc.batch_size, Some(epoch_seed)) {
                Ok(Some((a, c))) => {
                    abs_sum += a;
                    count += c;
                }
                Ok(None) => {}
                Err(e) => {
                    write_history(&history_path, &history)?;
                    return Err(e);
                }
            }
        }
        let train_loss = if count > 0.0 { abs_sum / count } else { f64::NAN };
        let val_loss = masked_loss(&model, &val_w, tc.threads)?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            write_history(&history_path, &history)?;
            return Err(Error::Numeric(format!(
                "epoch {epoch}: train loss {train_loss}, validation loss {val_loss}"
            )));
        }
        let lr = opt.lr;
        let decision = stopper.update(epoch, val_loss);
        if decision.improved {
            checkpoint::save(&best_dir, model.params())?;
        }
        opt.lr = sched.update(val_loss);
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            seconds: if tc.record_wall_time { clock.elapsed().as_secs_f64() } else { 0.0 },
        });
        write_history(&history_path, &history)?;
        if decision.stop {
            stopped_early = true;
            break;
        }
    }

    checkpoint::load_into(&best_dir, model.params_mut())?;
    let splits = split_report(&[Predictor::Model(&model), Predictor::Persistence], ds, &prep, &cfg)?;
    let pick = |who: &str| {
        splits["test"][who][tc.eval_policy.name()].map(|m| m.mae)
    };
    let metrics = RunMetrics {
        model: cfg.model,
        epochs_run: history.len(),
        best_epoch: stopper.best_epoch.unwrap_or(0),
        best_val_loss: stopper.best,
        stopped_early,
        headline_policy: tc.eval_policy,
        test_mae: pick(cfg.model.name()),
        persistence_test_mae: pick("persistence"),
        splits,
    };
    write_json(&out_dir.join(METRICS_FILE), &metrics)?;
    Ok(TrainOutcome {
        config: cfg,
        history,
        metrics,
        model,
    })
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Restores the best checkpoint of a run directory for `ds`.
pub fn load_run(dir: &Path, ds: &SpatioTemporalDataset) -> Result<(RunConfig, Model)> {
    let cfg = read_config(&dir.join(CONFIG_FILE))?;
    let mut resolved = cfg.clone();
    resolved.resolve(ds.num_nodes, ds.num_channels);
    if resolved != cfg {
        return Err(Error::Data(format!(
            "run {} was trained on different dimensions than the dataset ({} nodes, {} channels)",
            dir.display(),
            ds.num_nodes,
            ds.num_channels
        )));
    }
    let part = match cfg.model {
        ModelKind::Tgmm => Some(load_partition(&dir.join(PARTITION_FILE), &ds.graph)?),
        ModelKind::Fclstm => None,
    };
    let mut model = Model::build(&cfg, part.as_ref())?;
    checkpoint::load_into(&dir.join(BEST_DIR), model.params_mut())?;
    Ok((cfg, model))
}

/// Metrics of a saved run on one split.
pub fn evaluate_run(
    dir: &Path,
    ds: &SpatioTemporalDataset,
    split: Split,
    policy: EvalPolicy,
    threads: usize,
) -> Result<Metrics> {
    let (cfg, model) = load_run(dir, ds)?;
    let prep = Prepared::new(ds)?;
    let windows = windows_for(&prep, &cfg, split)?;
    evaluate(Predictor::Model(&model), ds, &prep, &windows, policy, threads)
}

/// Writes the prediction CSV of a saved run on one split.
pub fn predict_run(dir: &Path, ds: &SpatioTemporalDataset, split: Split, out: &Path, threads: usize) -> Result<usize> {
    let (cfg, model) = load_run(dir, ds)?;
    let prep = Prepared::new(ds)?;
    let windows = windows_for(&prep, &cfg, split)?;
    write_predictions(out, Predictor::Model(&model), ds, &prep, &windows, threads)
}

#[cfg(test)]
mod tests;
