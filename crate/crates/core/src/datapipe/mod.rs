//! Dataset model and the preprocessing pipeline: synthetic generation,
//! missing-pattern injection, imputation, normalization, splitting and
//! sliding windows.

mod io;
mod missing;
mod mso;
mod prep;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, save_dataset};
pub use missing::{inject_block_st, inject_block_t, inject_point, MissingPattern};
pub use mso::{generate_mso, smooth_over_graph, GraphKind, GraphSpec, MsoComponents, MsoConfig};
pub use prep::{
    chronological_split, impute_last, impute_series, make_windows, Normalizer, Prepared, Split, SplitRanges, WindowSample,
    split_windows,
};

use crate::error::{Error, Result};
use crate::graphpart::SensorGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub sample_period_seconds: f64,
    pub channel_names: Vec<String>,
}

/// Node values `[N, T, C]` with an observation mask and, for synthetically
/// hidden entries, the withheld ground truth.
///
/// Values under `mask == false` are NaN; the mask is authoritative.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatioTemporalDataset {
    pub num_nodes: usize,
    pub num_timesteps: usize,
    pub num_channels: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub eval_truth: Vec<Option<f64>>,
    pub graph: SensorGraph,
    pub meta: DatasetMeta,
}

impl SpatioTemporalDataset {
    /// Fully observed dataset from `[N, T, C]` values.
    pub fn fully_observed(values: Vec<f64>, shape: [usize; 3], graph: SensorGraph, meta: DatasetMeta) -> Result<Self> {
        let [n, t, c] = shape;
        let ds = SpatioTemporalDataset {
            num_nodes: n,
            num_timesteps: t,
            num_channels: c,
            mask: vec![true; values.len()],
            eval_truth: vec![None; values.len()],
            values,
            graph,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    #[inline]
    pub fn index(&self, node: usize, t: usize, c: usize) -> usize {
        (node * self.num_timesteps + t) * self.num_channels + c
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn truth_count(&self) -> usize {
        self.eval_truth.iter().filter(|t| t.is_some()).count()
    }

    /// Hides one observed entry, moving its value into `eval_truth`.
    /// Already-missing entries are left alone.
    pub fn hide(&mut self, node: usize, t: usize, c: usize) {
        let i = self.index(node, t, c);
        if self.mask[i] {
            self.eval_truth[i] = Some(self.values[i]);
            self.values[i] = f64::NAN;
            self.mask[i] = false;
        }
    }

    /// Hides every channel of `node` on `[start, start + len)`, clipped to T.
    pub fn hide_block(&mut self, node: usize, start: usize, len: usize) {
        let end = (start + len).min(self.num_timesteps);
        for t in start..end {
            for c in 0..self.num_channels {
                self.hide(node, t, c);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes * self.num_timesteps * self.num_channels;
        if self.values.len() != n || self.mask.len() != n || self.eval_truth.len() != n {
            return Err(Error::Data(format!(
                "arrays do not match [{}, {}, {}]",
                self.num_nodes, self.num_timesteps, self.num_channels
            )));
        }
        if self.graph.num_nodes() != self.num_nodes {
            return Err(Error::Data(format!(
                "graph has {} nodes, values have {}",
                self.graph.num_nodes(),
                self.num_nodes
            )));
        }
        if self.meta.channel_names.len() != self.num_channels {
            return Err(Error::Data(format!(
                "{} channel names for {} channels",
                self.meta.channel_names.len(),
                self.num_channels
            )));
        }
        for i in 0..n {
            if self.mask[i] && !self.values[i].is_finite() {
                return Err(Error::Data(format!("observed entry {i} is not finite")));
            }
            if self.mask[i] && self.eval_truth[i].is_some() {
                return Err(Error::Data(format!("entry {i} is observed but carries a withheld truth")));
            }
            if let Some(v) = self.eval_truth[i] {
                if !v.is_finite() {
                    return Err(Error::Data(format!("withheld truth at entry {i} is not finite")));
                }
            }
        }
        Ok(())
    }
}
