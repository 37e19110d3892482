//! Multilevel k-way partitioning: heavy-edge-matching coarsening, balanced
//! region growing on the coarsest graph, and boundary move/swap refinement
//! while projecting back to the input graph.

use std::collections::VecDeque;

use rand::seq::SliceRandom;

use super::graph::SensorGraph;
use super::PatchPartition;
use crate::error::{ensure, Result};
use crate::numcore::rng;

const INITIAL_TRIALS: u64 = 4;
const REFINE_PASSES: usize = 10;
const GAIN_EPS: f64 = 1e-12;

/// Largest core size allowed: `ceil((1 + imbalance) * n / p)`.
pub fn max_core_size(n: usize, p: usize, imbalance: f64) -> usize {
    let exact = (1.0 + imbalance) * n as f64 / p as f64;
    // absorb rounding in the product so e.g. 1.1 * 60 / 6 gives 11
    ((exact - 1e-9).ceil() as usize).max(n.div_ceil(p))
}

#[derive(Clone, Debug)]
struct Level {
    vwgt: Vec<usize>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl Level {
    fn from_graph(g: &SensorGraph) -> Self {
        Level {
            vwgt: vec![1; g.num_nodes()],
            adj: (0..g.num_nodes()).map(|i| g.neighbors(i).to_vec()).collect(),
        }
    }

    fn n(&self) -> usize {
        self.vwgt.len()
    }

    fn total_weight(&self) -> usize {
        self.vwgt.iter().sum()
    }

    fn cut(&self, part: &[usize]) -> f64 {
        let mut c = 0.0;
        for u in 0..self.n() {
            for &(v, w) in &self.adj[u] {
                if u < v && part[u] != part[v] {
                    c += w;
                }
            }
        }
        c
    }

    /// Connectivity of `u` to each part it touches, sorted by part id.
    fn connectivity(&self, u: usize, part: &[usize]) -> Vec<(usize, f64)> {
        let mut conn: Vec<(usize, f64)> = Vec::with_capacity(self.adj[u].len());
        for &(v, w) in &self.adj[u] {
            let q = part[v];
            match conn.iter_mut().find(|(p, _)| *p == q) {
                Some(e) => e.1 += w,
                None => conn.push((q, w)),
            }
        }
        conn.sort_by_key(|e| e.0);
        conn
    }
}

fn conn_to(conn: &[(usize, f64)], q: usize) -> f64 {
    conn.iter().find(|e| e.0 == q).map_or(0.0, |e| e.1)
}

/// Returns the fine-to-coarse map and the coarse vertex count.
fn heavy_edge_matching(level: &Level, order: &[usize], max_vwgt: usize) -> (Vec<usize>, usize) {
    let n = level.n();
    let mut mate = vec![usize::MAX; n];
    for &u in order {
        if mate[u] != usize::MAX {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        // adjacency is sorted by id, so strict `>` keeps the lowest id on ties
        for &(v, w) in &level.adj[u] {
            if mate[v] == usize::MAX && level.vwgt[u] + level.vwgt[v] <= max_vwgt && best.map_or(true, |(_, bw)| w > bw) {
                best = Some((v, w));
            }
        }
        match best {
            Some((v, _)) => {
                mate[u] = v;
                mate[v] = u;
            }
            None => mate[u] = u,
        }
    }
    let mut cmap = vec![usize::MAX; n];
    let mut nc = 0;
    for u in 0..n {
        if cmap[u] == usize::MAX {
            cmap[u] = nc;
            cmap[mate[u]] = nc;
            nc += 1;
        }
    }
    (cmap, nc)
}

fn contract(level: &Level, cmap: &[usize], nc: usize) -> Level {
    let mut vwgt = vec![0; nc];
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nc];
    for u in 0..level.n() {
        let cu = cmap[u];
        vwgt[cu] += level.vwgt[u];
        for &(v, w) in &level.adj[u] {
            let cv = cmap[v];
            if cv != cu {
                adj[cu].push((cv, w));
            }
        }
    }
    for list in &mut adj {
        list.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(list.len());
        for &(v, w) in list.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += w,
                _ => merged.push((v, w)),
            }
        }
        *list = merged;
    }
    Level { vwgt, adj }
}

/// Multi-source BFS hop distances (`usize::MAX` when unreachable).
fn hop_distances(level: &Level, sources: &[usize]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; level.n()];
    let mut queue = VecDeque::new();
    for &s in sources {
        dist[s] = 0;
        queue.push_back(s);
    }
    while let Some(u) = queue.pop_front() {
        for &(v, _) in &level.adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Seeded greedy region growing. Parts are grown lightest-first, each taking
/// the unassigned neighbor it is most strongly connected to.
fn grow_regions(level: &Level, p: usize, cap: usize, first_seed: usize) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let n = level.n();
    let mut seeds = vec![first_seed];
    while seeds.len() < p.min(n) {
        let dist = hop_distances(level, &seeds);
        // farthest vertex, unreachable first, lowest id on ties
        let next = (0..n)
            .filter(|u| !seeds.contains(u))
            .max_by(|&a, &b| dist[a].cmp(&dist[b]).then(b.cmp(&a)))
            .unwrap();
        seeds.push(next);
    }
    let mut part = vec![NONE; n];
    let mut weight = vec![0usize; p];
    for (k, &s) in seeds.iter().enumerate() {
        part[s] = k;
        weight[k] += level.vwgt[s];
    }
    let mut remaining = n - seeds.len();
    while remaining > 0 {
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by_key(|&k| (weight[k], k));
        let mut placed = false;
        for &k in &order {
            let mut best: Option<(usize, f64)> = None;
            for u in 0..n {
                if part[u] != NONE || weight[k] + level.vwgt[u] > cap {
                    continue;
                }
                let c: f64 = level.adj[u].iter().filter(|e| part[e.0] == k).map(|e| e.1).sum();
                let touches = level.adj[u].iter().any(|e| part[e.0] == k);
                if touches && best.map_or(true, |(_, bc)| c > bc) {
                    best = Some((u, c));
                }
            }
            if let Some((u, _)) = best {
                part[u] = k;
                weight[k] += level.vwgt[u];
                placed = true;
                break;
            }
        }
        if !placed {
            // every frontier is exhausted or full: open a new region
            let u = (0..n).find(|&u| part[u] == NONE).unwrap();
            let k = order[0];
            part[u] = k;
            weight[k] += level.vwgt[u];
        }
        remaining -= 1;
    }
    part
}

fn part_weights(level: &Level, part: &[usize], p: usize) -> Vec<usize> {
    let mut w = vec![0; p];
    for u in 0..level.n() {
        w[part[u]] += level.vwgt[u];
    }
    w
}

/// Greedy boundary moves plus adjacent-pair swaps, never exceeding `cap`
/// and never emptying a part.
fn refine(level: &Level, part: &mut [usize], p: usize, cap: usize) {
    let n = level.n();
    let mut weight = part_weights(level, part, p);
    for _ in 0..REFINE_PASSES {
        let mut changed = false;
        for u in 0..n {
            let a = part[u];
            let vw = level.vwgt[u];
            if weight[a] <= vw {
                continue;
            }
            let conn = level.connectivity(u, part);
            let internal = conn_to(&conn, a);
            let mut best: Option<(usize, f64)> = None;
            for &(q, c) in &conn {
                if q == a || weight[q] + vw > cap {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bq, bc)) => c > bc + GAIN_EPS || ((c - bc).abs() <= GAIN_EPS && weight[q] < weight[bq]),
                };
                if better {
                    best = Some((q, c));
                }
            }
            let Some((q, c)) = best else { continue };
            let gain = c - internal;
            let balances = weight[q] + vw < weight[a];
            if gain > GAIN_EPS || (gain.abs() <= GAIN_EPS && balances) {
                part[u] = q;
                weight[a] -= vw;
                weight[q] += vw;
                changed = true;
            }
        }
        for u in 0..n {
            for i in 0..level.adj[u].len() {
                let (v, w) = level.adj[u][i];
                let (a, b) = (part[u], part[v]);
                if u > v || a == b || level.vwgt[u] != level.vwgt[v] {
                    continue;
                }
                let cu = level.connectivity(u, part);
                let cv = level.connectivity(v, part);
                let gain = conn_to(&cu, b) - conn_to(&cu, a) + conn_to(&cv, a) - conn_to(&cv, b) - 2.0 * w;
                if gain > GAIN_EPS {
                    part[u] = b;
                    part[v] = a;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Forces every part to be non-empty and at most `cap`, moving the vertices
/// whose relocation costs the least cut.
fn enforce_balance(level: &Level, part: &mut [usize], p: usize, cap: usize) {
    let n = level.n();
    let mut weight = part_weights(level, part, p);
    loop {
        let h = (0..p).max_by(|&a, &b| weight[a].cmp(&weight[b]).then(b.cmp(&a))).unwrap();
        if weight[h] <= cap {
            break;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for u in (0..n).filter(|&u| part[u] == h) {
            let conn = level.connectivity(u, part);
            let internal = conn_to(&conn, h);
            for q in (0..p).filter(|&q| q != h && weight[q] + level.vwgt[u] <= cap) {
                let gain = conn_to(&conn, q) - internal;
                if best.map_or(true, |(bg, _, _)| gain > bg + GAIN_EPS) {
                    best = Some((gain, u, q));
                }
            }
        }
        let Some((_, u, q)) = best else { break };
        part[u] = q;
        weight[h] -= level.vwgt[u];
        weight[q] += level.vwgt[u];
    }
    for e in 0..p {
        if weight[e] > 0 {
            continue;
        }
        let donor = (0..p).max_by(|&a, &b| weight[a].cmp(&weight[b]).then(b.cmp(&a))).unwrap();
        let u = (0..n)
            .filter(|&u| part[u] == donor)
            .max_by(|&a, &b| {
                let la = conn_to(&level.connectivity(a, part), donor);
                let lb = conn_to(&level.connectivity(b, part), donor);
                lb.total_cmp(&la).then(b.cmp(&a))
            })
            .unwrap();
        part[u] = e;
        weight[donor] -= level.vwgt[u];
        weight[e] += level.vwgt[u];
    }
}

/// Renumbers parts in order of their smallest member.
fn canonical_labels(part: &[usize], p: usize) -> Vec<usize> {
    let mut relabel = vec![usize::MAX; p];
    let mut next = 0;
    for &q in part {
        if relabel[q] == usize::MAX {
            relabel[q] = next;
            next += 1;
        }
    }
    part.iter().map(|&q| relabel[q]).collect()
}

/// Splits `graph` into `p` balanced, disjoint core patches.
///
/// The result has no halos yet; see [`super::expand_one_hop`].
pub fn partition(graph: &SensorGraph, p: usize, imbalance: f64, seed: u64) -> Result<PatchPartition> {
    let n = graph.num_nodes();
    ensure!(p >= 1 && p <= n, "patch count {p} must lie in [1, {n}]");
    ensure!(imbalance >= 0.0 && imbalance.is_finite(), "imbalance {imbalance} must be a non-negative number");
    if p == 1 {
        return Ok(PatchPartition::from_cores(1, vec![0; n]));
    }
    let cap = max_core_size(n, p, imbalance);

    let coarsen_to = (4 * p).max(16);
    let mut levels = vec![Level::from_graph(graph)];
    let mut maps: Vec<Vec<usize>> = Vec::new();
    let mut rng = rng::stream(seed, "partition", 0);
    while levels.last().unwrap().n() > coarsen_to {
        let cur = levels.last().unwrap();
        let max_vwgt = ((1.5 * cur.total_weight() as f64 / coarsen_to as f64).ceil() as usize).max(2);
        let mut order: Vec<usize> = (0..cur.n()).collect();
        order.shuffle(&mut rng);
        let (cmap, nc) = heavy_edge_matching(cur, &order, max_vwgt);
        if nc as f64 > 0.95 * cur.n() as f64 {
            break;
        }
        let coarse = contract(cur, &cmap, nc);
        maps.push(cmap);
        levels.push(coarse);
    }

    let coarsest = levels.last().unwrap();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for trial in 0..INITIAL_TRIALS {
        let first = (rng::derive_seed(seed, "initial", trial) % coarsest.n() as u64) as usize;
        let mut part = grow_regions(coarsest, p, cap, first);
        refine(coarsest, &mut part, p, cap);
        let over: usize = part_weights(coarsest, &part, p).iter().map(|&w| w.saturating_sub(cap)).sum();
        let cut = coarsest.cut(&part);
        let better = best
            .as_ref()
            .map_or(true, |(bo, bc, _)| over < *bo || (over == *bo && cut < *bc - GAIN_EPS));
        if better {
            best = Some((over, cut, part));
        }
    }
    let mut part = best.unwrap().2;

    for li in (0..maps.len()).rev() {
        let fine = &levels[li];
        part = maps[li].iter().map(|&c| part[c]).collect();
        refine(fine, &mut part, p, cap);
    }
    let finest = &levels[0];
    enforce_balance(finest, &mut part, p, cap);
    refine(finest, &mut part, p, cap);
    Ok(PatchPartition::from_cores(p, canonical_labels(&part, p)))
}
