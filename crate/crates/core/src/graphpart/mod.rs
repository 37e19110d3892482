//! Sensor graph, balanced patch partitioning, one-hop halo expansion and
//! per-patch induced subgraphs.

mod graph;
mod partition;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use graph::SensorGraph;
pub use partition::{max_core_size, partition};

use crate::error::{contract, Error, Result};

/// Induced subgraph of one halo patch, in local indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSubgraph {
    /// Local index -> global node id, sorted ascending.
    pub nodes: Vec<usize>,
    /// Local `(src, dst)` pairs with `src < dst`.
    pub edges: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
}

impl PatchSubgraph {
    pub fn local_index(&self, global: usize) -> Option<usize> {
        self.nodes.binary_search(&global).ok()
    }

    /// Edges mapped back to global node ids.
    pub fn global_edges(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|&(a, b)| (self.nodes[a], self.nodes[b])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPartition {
    pub num_patches: usize,
    /// Patch id of every node.
    pub core_assignment: Vec<usize>,
    /// Per patch, sorted node ids after one-hop expansion (empty before).
    pub halo_patches: Vec<Vec<usize>>,
    /// Per node, sorted ids of the halo patches containing it.
    pub membership: Vec<Vec<usize>>,
    pub subgraphs: Vec<PatchSubgraph>,
}

impl PatchPartition {
    pub(crate) fn from_cores(num_patches: usize, core_assignment: Vec<usize>) -> Self {
        PatchPartition {
            num_patches,
            core_assignment,
            halo_patches: Vec::new(),
            membership: Vec::new(),
            subgraphs: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.core_assignment.len()
    }

    pub fn has_halos(&self) -> bool {
        self.halo_patches.len() == self.num_patches && !self.halo_patches.is_empty()
    }

    /// Sorted members of each core patch.
    pub fn cores(&self) -> Vec<Vec<usize>> {
        let mut cores = vec![Vec::new(); self.num_patches];
        for (node, &p) in self.core_assignment.iter().enumerate() {
            cores[p].push(node);
        }
        cores
    }

    /// Edges whose endpoints sit in different core patches.
    pub fn edge_cut(&self, graph: &SensorGraph) -> usize {
        graph
            .edges()
            .iter()
            .filter(|&&(a, b)| self.core_assignment[a] != self.core_assignment[b])
            .count()
    }

    pub fn to_file(&self) -> PartitionFile {
        PartitionFile {
            num_patches: self.num_patches,
            core_assignment: self.core_assignment.clone(),
            halo_patches: self.halo_patches.clone(),
        }
    }

    /// Checks every structural invariant against `graph`.
    pub fn validate(&self, graph: &SensorGraph) -> Result<()> {
        let n = graph.num_nodes();
        if self.core_assignment.len() != n {
            return Err(contract!("core assignment covers {} nodes, graph has {n}", self.core_assignment.len()));
        }
        let cores = self.cores_checked()?;
        if let Some(p) = cores.iter().position(Vec::is_empty) {
            return Err(contract!("core patch {p} is empty"));
        }
        if !self.has_halos() {
            return Ok(());
        }
        if self.membership.len() != n {
            return Err(contract!("membership covers {} nodes, graph has {n}", self.membership.len()));
        }
        for (p, (halo, core)) in self.halo_patches.iter().zip(&cores).enumerate() {
            if halo.windows(2).any(|w| w[0] >= w[1]) || halo.last().map_or(false, |&m| m >= n) {
                return Err(contract!("halo patch {p} is not a sorted set of node ids"));
            }
            if core.iter().any(|v| halo.binary_search(v).is_err()) {
                return Err(contract!("halo patch {p} does not contain its core"));
            }
        }
        for &(a, b) in graph.edges() {
            let covered = self.membership[a].iter().any(|p| self.halo_patches[*p].binary_search(&b).is_ok());
            if !covered {
                return Err(contract!("edge ({a}, {b}) is not inside any halo patch"));
            }
        }
        for (v, ps) in self.membership.iter().enumerate() {
            if ps.is_empty() {
                return Err(contract!("node {v} belongs to no patch"));
            }
            if ps.iter().any(|&p| self.halo_patches[p].binary_search(&v).is_err()) {
                return Err(contract!("membership of node {v} disagrees with the halo patches"));
            }
        }
        let total: usize = self.membership.iter().map(Vec::len).sum();
        let halo_total: usize = self.halo_patches.iter().map(Vec::len).sum();
        if total != halo_total {
            return Err(contract!("membership lists and halo patches disagree in size"));
        }
        Ok(())
    }

    fn cores_checked(&self) -> Result<Vec<Vec<usize>>> {
        if let Some(&p) = self.core_assignment.iter().find(|&&p| p >= self.num_patches) {
            return Err(contract!("patch id {p} out of range for {} patches", self.num_patches));
        }
        Ok(self.cores())
    }
}

/// Fills halo patches, membership and induced subgraphs from the cores.
pub fn expand_one_hop(partition: &PatchPartition, graph: &SensorGraph) -> PatchPartition {
    let mut halos: Vec<Vec<usize>> = partition.cores();
    for halo in &mut halos {
        let mut extra: Vec<usize> = halo
            .iter()
            .flat_map(|&v| graph.neighbors(v).iter().map(|e| e.0))
            .collect();
        halo.append(&mut extra);
        halo.sort_unstable();
        halo.dedup();
    }
    with_halos(partition.num_patches, partition.core_assignment.clone(), halos, graph)
}

fn with_halos(num_patches: usize, core_assignment: Vec<usize>, halos: Vec<Vec<usize>>, graph: &SensorGraph) -> PatchPartition {
    let mut membership = vec![Vec::new(); graph.num_nodes()];
    for (p, halo) in halos.iter().enumerate() {
        for &v in halo {
            membership[v].push(p);
        }
    }
    let subgraphs = halos
        .iter()
        .map(|halo| {
            let mut edges = Vec::new();
            let mut weights = Vec::new();
            for (la, &a) in halo.iter().enumerate() {
                for &(b, w) in graph.neighbors(a) {
                    if b > a {
                        if let Ok(lb) = halo.binary_search(&b) {
                            edges.push((la, lb));
                            weights.push(w);
                        }
                    }
                }
            }
            PatchSubgraph {
                nodes: halo.clone(),
                edges,
                weights,
            }
        })
        .collect();
    PatchPartition {
        num_patches,
        core_assignment,
        halo_patches: halos,
        membership,
        subgraphs,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub num_patches: usize,
    pub edge_cut: usize,
    pub core_sizes: Vec<usize>,
    pub halo_sizes: Vec<usize>,
    /// Number of patches containing a node -> how many nodes.
    pub membership_histogram: BTreeMap<usize, usize>,
    pub mean_membership: f64,
}

pub fn partition_stats(partition: &PatchPartition, graph: &SensorGraph) -> PartitionStats {
    let mut hist = BTreeMap::new();
    for m in &partition.membership {
        *hist.entry(m.len()).or_insert(0) += 1;
    }
    let halo_sizes: Vec<usize> = partition.halo_patches.iter().map(Vec::len).collect();
    let n = partition.num_nodes().max(1);
    PartitionStats {
        num_patches: partition.num_patches,
        edge_cut: partition.edge_cut(graph),
        core_sizes: partition.cores().iter().map(Vec::len).collect(),
        mean_membership: halo_sizes.iter().sum::<usize>() as f64 / n as f64,
        halo_sizes,
        membership_histogram: hist,
    }
}

/// `partition.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub num_patches: usize,
    pub core_assignment: Vec<usize>,
    pub halo_patches: Vec<Vec<usize>>,
}

impl PartitionFile {
    /// Rebuilds the full partition (membership, subgraphs) and validates it.
    pub fn into_partition(self, graph: &SensorGraph) -> Result<PatchPartition> {
        let mut halos = self.halo_patches;
        for h in &mut halos {
            h.sort_unstable();
            h.dedup();
        }
        if halos.len() != self.num_patches {
            return Err(contract!("{} halo patches listed for {} patches", halos.len(), self.num_patches));
        }
        if let Some(&v) = halos.iter().flatten().find(|&&v| v >= graph.num_nodes()) {
            return Err(contract!("halo node {v} out of range for {} nodes", graph.num_nodes()));
        }
        let p = with_halos(self.num_patches, self.core_assignment, halos, graph);
        p.validate(graph)?;
        Ok(p)
    }
}

pub fn save_partition(path: &Path, partition: &PatchPartition) -> Result<()> {
    let json = serde_json::to_string(&partition.to_file()).map_err(|e| Error::json(path, e))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_partition(path: &Path, graph: &SensorGraph) -> Result<PatchPartition> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PartitionFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    file.into_partition(graph)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
