use std::collections::VecDeque;

use rand::Rng;

use crate::error::{contract, Result};
use crate::numcore::rng;

/// Static undirected sensor graph with non-negative edge weights.
///
/// Edges are stored once with `src < dst`, sorted, without duplicates or
/// self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    weights: Vec<f64>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl SensorGraph {
    /// Builds a graph from `(a, b, weight)` triples. Endpoint order is
    /// normalized; self-loops, duplicates and negative weights are rejected.
    pub fn new(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut list: Vec<(usize, usize, f64)> = Vec::new();
        for (a, b, w) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(contract!("edge ({a}, {b}) out of range for {num_nodes} nodes"));
            }
            if a == b {
                return Err(contract!("self-loop on node {a}"));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(contract!("edge ({a}, {b}) has invalid weight {w}"));
            }
            list.push((a.min(b), a.max(b), w));
        }
        list.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        if let Some(w) = list.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(contract!("duplicate edge ({}, {})", w[0].0, w[0].1));
        }
        let mut adj = vec![Vec::new(); num_nodes];
        for &(a, b, w) in &list {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        for nbrs in &mut adj {
            nbrs.sort_by_key(|&(j, _)| j);
        }
        Ok(SensorGraph {
            num_nodes,
            edges: list.iter().map(|&(a, b, _)| (a, b)).collect(),
            weights: list.iter().map(|&(_, _, w)| w).collect(),
            adj,
        })
    }

    /// Unit-weight graph.
    pub fn unweighted(num_nodes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Self::new(num_nodes, pairs.into_iter().map(|(a, b)| (a, b, 1.0)))
    }

    pub fn path(n: usize) -> Self {
        Self::unweighted(n, (1..n).map(|i| (i - 1, i))).unwrap()
    }

    /// Star centered on node 0 with `leaves` leaves.
    pub fn star(leaves: usize) -> Self {
        Self::unweighted(leaves + 1, (1..=leaves).map(|i| (0, i))).unwrap()
    }

    /// 4-neighbor lattice, row-major node ids.
    pub fn grid(rows: usize, cols: usize) -> Self {
        let mut e = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    e.push((i, i + 1));
                }
                if r + 1 < rows {
                    e.push((i, i + cols));
                }
            }
        }
        Self::unweighted(rows * cols, e).unwrap()
    }

    /// Random geometric graph on the unit square: connects the
    /// `round(mean_degree * n / 2)` closest pairs, so the radius is tuned to
    /// hit the requested mean degree. Weights are `exp(-(d / r)^2)`.
    pub fn random_geometric(n: usize, mean_degree: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, "random_geometric", 0);
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (r.random::<f64>(), r.random::<f64>())).collect();
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                pairs.push((d, i, j));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let m = ((mean_degree * n as f64 / 2.0).round() as usize).min(pairs.len());
        let radius = pairs[..m].last().map_or(1.0, |p| p.0).max(1e-12);
        let edges = pairs[..m]
            .iter()
            .map(|&(d, i, j)| (i, j, (-(d / radius).powi(2)).exp()));
        Self::new(n, edges).unwrap()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted `(src, dst)` pairs with `src < dst`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(neighbor, weight)` pairs sorted by neighbor id.
    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adj[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adj[node].len()
    }

    pub fn mean_degree(&self) -> f64 {
        if self.num_nodes == 0 {
            0.0
        } else {
            2.0 * self.edges.len() as f64 / self.num_nodes as f64
        }
    }

    /// Nodes within `radius` hops of `center`, sorted.
    pub fn ball(&self, center: usize, radius: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.num_nodes];
        let mut queue = VecDeque::from([center]);
        dist[center] = 0;
        while let Some(u) = queue.pop_front() {
            if dist[u] == radius {
                continue;
            }
            for &(v, _) in &self.adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        (0..self.num_nodes).filter(|&i| dist[i] != usize::MAX).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_and_rejects_bad_edges() {
        let g = SensorGraph::unweighted(3, [(2, 0), (1, 0)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2)]);
        assert!(SensorGraph::unweighted(3, [(1, 1)]).is_err());
        assert!(SensorGraph::unweighted(3, [(0, 1), (1, 0)]).is_err());
        assert!(SensorGraph::unweighted(3, [(0, 3)]).is_err());
        assert!(SensorGraph::new(3, [(0, 1, -1.0)]).is_err());
    }

    #[test]
    fn random_geometric_hits_mean_degree() {
        let g = SensorGraph::random_geometric(200, 6.0, 3);
        assert!((g.mean_degree() - 6.0).abs() < 0.01);
        assert!(g.weights().iter().all(|&w| w > 0.0 && w <= 1.0));
        assert_eq!(g, SensorGraph::random_geometric(200, 6.0, 3));
    }

    #[test]
    fn ball_on_path() {
        let g = SensorGraph::path(6);
        assert_eq!(g.ball(2, 1), vec![1, 2, 3]);
        assert_eq!(g.ball(2, 0), vec![2]);
        assert_eq!(g.ball(0, 10), (0..6).collect::<Vec<_>>());
    }
}
