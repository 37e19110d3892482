use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::SpatioTemporalDataset;
use crate::error::{ensure, Result};
use crate::numcore::Tensor;

pub const STD_FLOOR: f64 = 1e-8;

/// Chronological 70/10/20 split of `[0, T)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

pub fn chronological_split(num_timesteps: usize) -> Result<SplitRanges> {
    ensure!(num_timesteps >= 10, "need at least 10 time steps to split, got {num_timesteps}");
    let a = num_timesteps * 7 / 10;
    let b = num_timesteps * 8 / 10;
    Ok(SplitRanges {
        train: 0..a,
        val: a..b,
        test: b..num_timesteps,
    })
}

/// Carries the last observation forward; leading gaps become 0.
pub fn impute_series(values: &[f64], observed: &[bool]) -> Vec<f64> {
    let mut last = 0.0;
    values
        .iter()
        .zip(observed)
        .map(|(&v, &o)| {
            if o {
                last = v;
            }
            last
        })
        .collect()
}

/// Last-observation imputation of every node/channel series, `[N, T, C]`.
pub fn impute_last(ds: &SpatioTemporalDataset) -> Vec<f64> {
    impute_array(&ds.values, &ds.mask, ds.num_nodes, ds.num_timesteps, ds.num_channels)
}

fn impute_array(values: &[f64], mask: &[bool], n: usize, t_len: usize, c_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for node in 0..n {
        for c in 0..c_len {
            let mut last = 0.0;
            for t in 0..t_len {
                let i = (node * t_len + t) * c_len + c;
                if mask[i] {
                    last = values[i];
                }
                out[i] = last;
            }
        }
    }
    out
}

/// Per node/channel standardization fitted on observed training entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub num_channels: usize,
    /// `[N, C]`
    pub mean: Vec<f64>,
    /// `[N, C]`, floored at [`STD_FLOOR`].
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &SpatioTemporalDataset, range: Range<usize>) -> Self {
        let (n, c_len) = (ds.num_nodes, ds.num_channels);
        let mut mean = vec![0.0; n * c_len];
        let mut std = vec![1.0; n * c_len];
        for node in 0..n {
            for c in 0..c_len {
                let obs: Vec<f64> = range
                    .clone()
                    .map(|t| ds.index(node, t, c))
                    .filter(|&i| ds.mask[i])
                    .map(|i| ds.values[i])
                    .collect();
                if obs.is_empty() {
                    continue;
                }
                let m = obs.iter().sum::<f64>() / obs.len() as f64;
                let var = obs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / obs.len() as f64;
                mean[node * c_len + c] = m;
                std[node * c_len + c] = var.sqrt().max(STD_FLOOR);
            }
        }
        Normalizer {
            num_channels: c_len,
            mean,
            std,
        }
    }

    #[inline]
    pub fn apply(&self, node: usize, c: usize, x: f64) -> f64 {
        let k = node * self.num_channels + c;
        (x - self.mean[k]) / self.std[k]
    }

    #[inline]
    pub fn invert(&self, node: usize, c: usize, z: f64) -> f64 {
        let k = node * self.num_channels + c;
        z * self.std[k] + self.mean[k]
    }
}

/// Normalized, imputed arrays ready for windowing.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub num_nodes: usize,
    pub num_timesteps: usize,
    pub num_channels: usize,
    pub splits: SplitRanges,
    pub normalizer: Normalizer,
    /// Imputed normalized values `[N, T, C]`.
    pub inputs: Vec<f64>,
    pub observed: Vec<bool>,
    /// Normalized observation or withheld truth; 0 where neither exists.
    pub targets: Vec<f64>,
    /// Observed or withheld-with-truth.
    pub evaluable: Vec<bool>,
}

impl Prepared {
    pub fn new(ds: &SpatioTemporalDataset) -> Result<Self> {
        ds.validate()?;
        let splits = chronological_split(ds.num_timesteps)?;
        let normalizer = Normalizer::fit(ds, splits.train.clone());
        let (n, t_len, c_len) = (ds.num_nodes, ds.num_timesteps, ds.num_channels);
        let mut norm = vec![0.0; ds.len()];
        let mut targets = vec![0.0; ds.len()];
        let mut evaluable = vec![false; ds.len()];
        for node in 0..n {
            for t in 0..t_len {
                for c in 0..c_len {
                    let i = ds.index(node, t, c);
                    if ds.mask[i] {
                        norm[i] = normalizer.apply(node, c, ds.values[i]);
                        targets[i] = norm[i];
                        evaluable[i] = true;
                    } else if let Some(v) = ds.eval_truth[i] {
                        targets[i] = normalizer.apply(node, c, v);
                        evaluable[i] = true;
                    }
                }
            }
        }
        let inputs = impute_array(&norm, &ds.mask, n, t_len, c_len);
        Ok(Prepared {
            num_nodes: n,
            num_timesteps: t_len,
            num_channels: c_len,
            splits,
            normalizer,
            inputs,
            observed: ds.mask.clone(),
            targets,
            evaluable,
        })
    }

    fn slab<T: Copy>(&self, src: &[T], start: usize, len: usize) -> Vec<T> {
        let c = self.num_channels;
        let mut out = Vec::with_capacity(self.num_nodes * len * c);
        for node in 0..self.num_nodes {
            let base = (node * self.num_timesteps + start) * c;
            out.extend_from_slice(&src[base..base + len * c]);
        }
        out
    }

    /// One window starting at `start`.
    pub fn window(&self, start: usize, w: usize, h: usize) -> WindowSample {
        let (n, c) = (self.num_nodes, self.num_channels);
        let to_f = |m: Vec<bool>| m.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        WindowSample {
            start,
            input: Tensor::from_vec(&[n, w, c], self.slab(&self.inputs, start, w)),
            input_mask: Tensor::from_vec(&[n, w, c], to_f(self.slab(&self.observed, start, w))),
            target: Tensor::from_vec(&[n, h, c], self.slab(&self.targets, start + w, h)),
            train_mask: Tensor::from_vec(&[n, h, c], to_f(self.slab(&self.observed, start + w, h))),
            eval_mask: Tensor::from_vec(&[n, h, c], to_f(self.slab(&self.evaluable, start + w, h))),
        }
    }
}

/// One training instance. Values are normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub start: usize,
    /// `[N, W, C]`, imputed.
    pub input: Tensor,
    /// `[N, W, C]`, 1 = genuine observation.
    pub input_mask: Tensor,
    /// `[N, H, C]`
    pub target: Tensor,
    /// Observed targets.
    pub train_mask: Tensor,
    /// Observed targets plus withheld ones with known truth.
    pub eval_mask: Tensor,
}

impl WindowSample {
    pub fn window_len(&self) -> usize {
        self.input.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.target.shape()[1]
    }
}

/// Sliding windows fully inside `range`.
pub fn make_windows(prep: &Prepared, range: Range<usize>, w: usize, h: usize, stride: usize) -> Result<Vec<WindowSample>> {
    ensure!(w >= 1 && h >= 1 && stride >= 1, "window {w}, horizon {h} and stride {stride} must be positive");
    ensure!(range.end <= prep.num_timesteps, "range {range:?} exceeds {} steps", prep.num_timesteps);
    let mut out = Vec::new();
    let mut start = range.start;
    while start + w + h <= range.end {
        out.push(prep.window(start, w, h));
        start += stride;
    }
    Ok(out)
}

/// Windows whose horizon lies inside `split`; the input may reach back
/// into the preceding split.
pub fn split_windows(prep: &Prepared, split: Split, w: usize, h: usize, stride: usize) -> Result<Vec<WindowSample>> {
    let r = prep.splits.get(split);
    make_windows(prep, r.start.saturating_sub(w)..r.end, w, h, stride)
}
