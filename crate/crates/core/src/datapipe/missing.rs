//! Synthetic missing-data patterns. Injectors only ever hide observed
//! entries; every hidden value is kept in `eval_truth`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SpatioTemporalDataset;
use crate::error::{ensure, Result};
use crate::numcore::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "kebab-case")]
pub enum MissingPattern {
    /// Independent entries with probability `p`.
    Point { p: f64 },
    /// Per-node outages starting at `rate` failures per 1000 steps.
    BlockT { rate: f64, min_len: usize, max_len: usize },
    /// Outages over BFS balls of `radius` hops.
    BlockSt {
        events: usize,
        radius: usize,
        min_len: usize,
        max_len: usize,
    },
}

impl MissingPattern {
    pub fn apply(&self, ds: &SpatioTemporalDataset, seed: u64) -> Result<SpatioTemporalDataset> {
        match *self {
            MissingPattern::Point { p } => inject_point(ds, p, seed),
            MissingPattern::BlockT { rate, min_len, max_len } => inject_block_t(ds, rate, (min_len, max_len), seed),
            MissingPattern::BlockSt {
                events,
                radius,
                min_len,
                max_len,
            } => inject_block_st(ds, events, radius, (min_len, max_len), seed),
        }
    }

    /// Default parameterization for a dataset with `num_nodes` nodes:
    /// BlockT 2 failures / 1000 steps, BlockST N/10 events per split with
    /// radius 2, durations 10..=40.
    pub fn default_block_st(num_nodes: usize) -> Self {
        MissingPattern::BlockSt {
            events: 3 * (num_nodes / 10).max(1),
            radius: 2,
            min_len: 10,
            max_len: 40,
        }
    }

    pub fn default_block_t() -> Self {
        MissingPattern::BlockT {
            rate: 2.0,
            min_len: 10,
            max_len: 40,
        }
    }
}

pub fn inject_point(ds: &SpatioTemporalDataset, p: f64, seed: u64) -> Result<SpatioTemporalDataset> {
    ensure!((0.0..=1.0).contains(&p), "point probability {p} outside [0, 1]");
    let mut out = ds.clone();
    for node in 0..ds.num_nodes {
        let mut r = rng::stream(seed, "point", node as u64);
        for t in 0..ds.num_timesteps {
            for c in 0..ds.num_channels {
                // one draw per entry regardless of its state keeps streams aligned
                let u: f64 = r.random();
                if u < p {
                    out.hide(node, t, c);
                }
            }
        }
    }
    Ok(out)
}

fn check_durations(ds: &SpatioTemporalDataset, (min_len, max_len): (usize, usize)) -> Result<()> {
    ensure!(
        1 <= min_len && min_len <= max_len && max_len <= ds.num_timesteps,
        "durations [{min_len}, {max_len}] must satisfy 1 <= min <= max <= T = {}",
        ds.num_timesteps
    );
    Ok(())
}

pub fn inject_block_t(
    ds: &SpatioTemporalDataset,
    rate_per_1000: f64,
    durations: (usize, usize),
    seed: u64,
) -> Result<SpatioTemporalDataset> {
    check_durations(ds, durations)?;
    ensure!(
        (0.0..=1000.0).contains(&rate_per_1000),
        "failure rate {rate_per_1000} per 1000 steps out of range"
    );
    let prob = rate_per_1000 / 1000.0;
    let mut out = ds.clone();
    for node in 0..ds.num_nodes {
        let mut r = rng::stream(seed, "block_t", node as u64);
        for t in 0..ds.num_timesteps {
            if r.random::<f64>() < prob {
                let len = r.random_range(durations.0..=durations.1);
                out.hide_block(node, t, len);
            }
        }
    }
    Ok(out)
}

pub fn inject_block_st(
    ds: &SpatioTemporalDataset,
    events: usize,
    radius: usize,
    durations: (usize, usize),
    seed: u64,
) -> Result<SpatioTemporalDataset> {
    check_durations(ds, durations)?;
    let mut out = ds.clone();
    let mut r = rng::stream(seed, "block_st", 0);
    for _ in 0..events {
        let center = r.random_range(0..ds.num_nodes);
        let start = r.random_range(0..ds.num_timesteps);
        let len = r.random_range(durations.0..=durations.1);
        for node in ds.graph.ball(center, radius) {
            out.hide_block(node, start, len);
        }
    }
    Ok(out)
}
