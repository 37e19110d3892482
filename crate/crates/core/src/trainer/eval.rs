//! Scoring in original units and prediction export.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::{EvalPolicy, Model};
use crate::datapipe::{Prepared, SpatioTemporalDataset, WindowSample};
use crate::error::{Error, Result};
use crate::numcore::nn::Mode;
use crate::numcore::Tape;
use crate::tgmm::{MetricSums, Metrics};

/// Anything producing `[N, H, C]` forecasts in original units.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Model),
    /// Last observed input value, carried forward.
    Persistence,
    Zero,
}

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Model(m) => m.kind().name(),
            Predictor::Persistence => "persistence",
            Predictor::Zero => "zero",
        }
    }

    pub fn predict(&self, prep: &Prepared, s: &WindowSample) -> Result<Vec<f64>> {
        let (n, c_len) = (prep.num_nodes, prep.num_channels);
        let (w, h) = (s.window_len(), s.horizon());
        match self {
            Predictor::Model(m) => {
                let mut t = Tape::new();
                let p = m.params().bind(&mut t);
                let y = m.forward(&mut t, &p, s, &mut Mode::Eval)?;
                t.check_finite()?;
                let mut out = t.value(y).data().to_vec();
                for node in 0..n {
                    for k in 0..h {
                        for c in 0..c_len {
                            let i = (node * h + k) * c_len + c;
                            out[i] = prep.normalizer.invert(node, c, out[i]);
                        }
                    }
                }
                Ok(out)
            }
            Predictor::Persistence => {
                let mut out = Vec::with_capacity(n * h * c_len);
                for node in 0..n {
                    for _ in 0..h {
                        for c in 0..c_len {
                            let last = prep.inputs[(node * prep.num_timesteps + s.start + w - 1) * c_len + c];
                            out.push(prep.normalizer.invert(node, c, last));
                        }
                    }
                }
                Ok(out)
            }
            Predictor::Zero => Ok(vec![0.0; n * h * c_len]),
        }
    }
}

/// Ground truth at a target position under `policy`, if eligible.
pub fn truth_at(ds: &SpatioTemporalDataset, node: usize, t: usize, c: usize, policy: EvalPolicy) -> Option<f64> {
    let i = ds.index(node, t, c);
    if ds.mask[i] {
        Some(ds.values[i])
    } else if policy == EvalPolicy::EvalMask {
        ds.eval_truth[i]
    } else {
        None
    }
}

/// Sums for the train-mask and eval-mask policies, in that order.
fn score_window(
    ds: &SpatioTemporalDataset,
    s: &WindowSample,
    pred: &[f64],
) -> [MetricSums; 2] {
    let (w, h, c_len) = (s.window_len(), s.horizon(), ds.num_channels);
    let mut sums = [MetricSums::default(); 2];
    for node in 0..ds.num_nodes {
        for k in 0..h {
            let t = s.start + w + k;
            for c in 0..c_len {
                let y = pred[(node * h + k) * c_len + c];
                for (slot, policy) in [EvalPolicy::TrainMask, EvalPolicy::EvalMask].into_iter().enumerate() {
                    if let Some(v) = truth_at(ds, node, t, c, policy) {
                        sums[slot].push(y, v, 1.0);
                    }
                }
            }
        }
    }
    sums
}

pub(crate) fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Contract(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Totals under both policies; windows are reduced in order, so the result
/// does not depend on `threads`.
pub fn evaluate_sums(
    predictor: Predictor,
    ds: &SpatioTemporalDataset,
    prep: &Prepared,
    windows: &[WindowSample],
    threads: usize,
) -> Result<[MetricSums; 2]> {
    let per_window = in_pool(threads, || {
        windows
            .par_iter()
            .map(|s| Ok(score_window(ds, s, &predictor.predict(prep, s)?)))
            .collect::<Result<Vec<_>>>()
    })??;
    let mut total = [MetricSums::default(); 2];
    for sums in &per_window {
        total[0].merge(&sums[0]);
        total[1].merge(&sums[1]);
    }
    Ok(total)
}

pub fn evaluate(
    predictor: Predictor,
    ds: &SpatioTemporalDataset,
    prep: &Prepared,
    windows: &[WindowSample],
    policy: EvalPolicy,
    threads: usize,
) -> Result<Metrics> {
    let sums = evaluate_sums(predictor, ds, prep, windows, threads)?;
    match policy {
        EvalPolicy::TrainMask => sums[0].finish(),
        EvalPolicy::EvalMask => sums[1].finish(),
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.10e}")
}

/// CSV `node,timestep,horizon_step,channel,y_true,y_pred,observed`; `y_true`
/// is blank where no truth exists.
pub fn write_predictions(
    out: &Path,
    predictor: Predictor,
    ds: &SpatioTemporalDataset,
    prep: &Prepared,
    windows: &[WindowSample],
    threads: usize,
) -> Result<usize> {
    let preds = in_pool(threads, || {
        windows
            .par_iter()
            .map(|s| predictor.predict(prep, s))
            .collect::<Result<Vec<_>>>()
    })??;
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut f = std::io::BufWriter::new(file);
    let mut rows = 0;
    let io = |e| Error::io(out, e);
    writeln!(f, "node,timestep,horizon_step,channel,y_true,y_pred,observed").map_err(io)?;
    for (s, pred) in windows.iter().zip(&preds) {
        let (w, h, c_len) = (s.window_len(), s.horizon(), ds.num_channels);
        for node in 0..ds.num_nodes {
            for k in 0..h {
                let t = s.start + w + k;
                for c in 0..c_len {
                    let truth = truth_at(ds, node, t, c, EvalPolicy::EvalMask).map(fmt).unwrap_or_default();
                    let observed = u8::from(ds.mask[ds.index(node, t, c)]);
                    let y = pred[(node * h + k) * c_len + c];
                    writeln!(f, "{node},{t},{k},{c},{truth},{},{observed}", fmt(y)).map_err(io)?;
                    rows += 1;
                }
            }
        }
    }
    f.flush().map_err(io)?;
    Ok(rows)
}
