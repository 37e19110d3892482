//! Multiple superimposed oscillators on a sensor graph.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetMeta, SpatioTemporalDataset};
use crate::error::{ensure, Result};
use crate::graphpart::SensorGraph;
use crate::numcore::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GraphKind {
    Grid,
    RandomGeometric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub kind: GraphKind,
    pub nodes: usize,
    pub seed: u64,
    /// Only used by the random geometric kind.
    pub mean_degree: f64,
}

impl GraphSpec {
    pub fn build(&self) -> SensorGraph {
        match self.kind {
            GraphKind::Grid => {
                let n = self.nodes;
                let rows = ((n as f64).sqrt().floor() as usize).max(1);
                let cols = n.div_ceil(rows);
                // first n nodes of a row-major lattice
                let full = SensorGraph::grid(rows, cols);
                SensorGraph::unweighted(n, full.edges().iter().copied().filter(|&(a, b)| a < n && b < n)).unwrap()
            }
            GraphKind::RandomGeometric => SensorGraph::random_geometric(self.nodes, self.mean_degree, self.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsoConfig {
    pub graph: GraphSpec,
    pub oscillators: usize,
    pub steps: usize,
    pub noise_sigma: f64,
    pub smoothing_rounds: usize,
    /// Frequency range in cycles per step; draws are log-uniform.
    pub min_frequency: f64,
    pub max_frequency: f64,
    pub seed: u64,
}

impl Default for MsoConfig {
    fn default() -> Self {
        MsoConfig {
            graph: GraphSpec {
                kind: GraphKind::RandomGeometric,
                nodes: 8,
                seed: 0,
                mean_degree: 4.0,
            },
            oscillators: 5,
            steps: 1000,
            noise_sigma: 0.05,
            smoothing_rounds: 3,
            min_frequency: 1.0 / 200.0,
            max_frequency: 1.0 / 10.0,
            seed: 0,
        }
    }
}

/// Per-node amplitudes and phases `[N, K]` plus shared frequencies `[K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MsoComponents {
    pub num_nodes: usize,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub frequencies: Vec<f64>,
}

impl MsoComponents {
    /// Noise-free signal of `node` at step `t`.
    pub fn value(&self, node: usize, t: usize) -> f64 {
        let k = self.frequencies.len();
        (0..k)
            .map(|j| {
                let a = self.amplitudes[node * k + j];
                let phi = self.phases[node * k + j];
                a * (2.0 * std::f64::consts::PI * self.frequencies[j] * t as f64 + phi).sin()
            })
            .sum()
    }

    /// Draws raw components, then smooths amplitudes over `graph`.
    pub fn sample(graph: &SensorGraph, config: &MsoConfig) -> Self {
        let mut raw = Self::sample_raw(graph.num_nodes(), config);
        raw.amplitudes = smooth_over_graph(graph, &raw.amplitudes, config.oscillators, config.smoothing_rounds);
        raw
    }

    pub(crate) fn sample_raw(num_nodes: usize, config: &MsoConfig) -> Self {
        let k = config.oscillators;
        let mut r = rng::stream(config.seed, "mso_frequencies", 0);
        let (lo, hi) = (config.min_frequency.ln(), config.max_frequency.ln());
        let frequencies = (0..k).map(|_| (lo + (hi - lo) * r.random::<f64>()).exp()).collect();
        let mut amplitudes = Vec::with_capacity(num_nodes * k);
        let mut phases = Vec::with_capacity(num_nodes * k);
        for node in 0..num_nodes {
            let mut r = rng::stream(config.seed, "mso_node", node as u64);
            for _ in 0..k {
                amplitudes.push(r.random_range(0.0..2.0));
                phases.push(r.random_range(0.0..2.0 * std::f64::consts::PI));
            }
        }
        MsoComponents {
            num_nodes,
            amplitudes,
            phases,
            frequencies,
        }
    }
}

/// `rounds` passes of averaging each node's `[k]` row with its neighbors'.
pub fn smooth_over_graph(graph: &SensorGraph, field: &[f64], k: usize, rounds: usize) -> Vec<f64> {
    let mut cur = field.to_vec();
    for _ in 0..rounds {
        let mut next = vec![0.0; cur.len()];
        for i in 0..graph.num_nodes() {
            let nbrs = graph.neighbors(i);
            let denom = (nbrs.len() + 1) as f64;
            for j in 0..k {
                let s = cur[i * k + j] + nbrs.iter().map(|&(v, _)| cur[v * k + j]).sum::<f64>();
                next[i * k + j] = s / denom;
            }
        }
        cur = next;
    }
    cur
}

pub fn generate_mso(config: &MsoConfig) -> Result<SpatioTemporalDataset> {
    ensure!(config.oscillators >= 1, "need at least one oscillator");
    ensure!(config.steps >= 1, "need at least one time step");
    ensure!(config.graph.nodes >= 1, "need at least one node");
    ensure!(
        config.noise_sigma >= 0.0 && config.min_frequency > 0.0 && config.min_frequency <= config.max_frequency,
        "invalid noise or frequency range"
    );
    let graph = config.graph.build();
    let comps = MsoComponents::sample(&graph, config);
    let (n, t_len) = (graph.num_nodes(), config.steps);
    let noise = Normal::new(0.0, config.noise_sigma).unwrap();
    let mut values = Vec::with_capacity(n * t_len);
    for node in 0..n {
        let mut r = rng::stream(config.seed, "mso_noise", node as u64);
        for t in 0..t_len {
            let eta = if config.noise_sigma > 0.0 { noise.sample(&mut r) } else { 0.0 };
            values.push(comps.value(node, t) + eta);
        }
    }
    let meta = DatasetMeta {
        name: format!("mso-n{n}-k{}-s{}", config.oscillators, config.seed),
        sample_period_seconds: 1.0,
        channel_names: vec!["value".to_string()],
    };
    SpatioTemporalDataset::fully_observed(values, [n, t_len, 1], graph, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_period_of_unit_sine() {
        let c = MsoComponents {
            num_nodes: 1,
            amplitudes: vec![1.0],
            phases: vec![0.0],
            frequencies: vec![1.0 / 24.0],
        };
        assert!((c.value(0, 6) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn noiseless_signal_is_periodic() {
        let cfg = MsoConfig {
            oscillators: 1,
            noise_sigma: 0.0,
            min_frequency: 1.0 / 25.0,
            max_frequency: 1.0 / 25.0,
            steps: 200,
            ..Default::default()
        };
        let ds = generate_mso(&cfg).unwrap();
        for node in 0..ds.num_nodes {
            for t in 0..150 {
                let a = ds.values[ds.index(node, t, 0)];
                let b = ds.values[ds.index(node, t + 25, 0)];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frequencies_within_band() {
        let cfg = MsoConfig {
            oscillators: 50,
            ..Default::default()
        };
        let c = MsoComponents::sample(&cfg.graph.build(), &cfg);
        assert!(c.frequencies.iter().all(|&f| (1.0 / 200.0..=1.0 / 10.0).contains(&f)));
    }

    #[test]
    fn grid_spec_truncates_to_node_count() {
        let g = GraphSpec {
            kind: GraphKind::Grid,
            nodes: 10,
            seed: 0,
            mean_degree: 0.0,
        }
        .build();
        assert_eq!(g.num_nodes(), 10);
        // 3 x 4 lattice cut after node 9
        assert!(g.edges().contains(&(8, 9)));
        assert!(g.edges().contains(&(5, 9)));
    }

    #[test]
    fn fully_observed_output() {
        let ds = generate_mso(&MsoConfig::default()).unwrap();
        assert_eq!(ds.observed_count(), ds.len());
        assert_eq!(ds.truth_count(), 0);
        assert_eq!(ds, generate_mso(&MsoConfig::default()).unwrap());
    }
}
