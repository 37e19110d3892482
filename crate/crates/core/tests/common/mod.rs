//! Helpers shared by integration test targets.

use std::collections::BTreeSet;

use tgmm_core::graphpart::{PatchPartition, SensorGraph};

/// ceil(1.1 * n / p) in integer arithmetic.
pub fn balance_cap(n: usize, p: usize) -> usize {
    (11 * n).div_ceil(10 * p)
}

/// Checks every structural property from first principles, without
/// `PatchPartition::validate`.
pub fn check_invariants(g: &SensorGraph, part: &PatchPartition, p: usize) -> Result<(), String> {
    let n = g.num_nodes();
    if part.num_patches != p || part.core_assignment.len() != n {
        return Err("wrong dimensions".into());
    }
    let mut cores = vec![BTreeSet::new(); p];
    for (v, &c) in part.core_assignment.iter().enumerate() {
        if c >= p {
            return Err(format!("node {v} has patch {c}"));
        }
        cores[c].insert(v);
    }
    let cap = balance_cap(n, p);
    for (i, core) in cores.iter().enumerate() {
        if core.is_empty() || core.len() > cap {
            return Err(format!("core {i} has {} nodes, cap {cap}", core.len()));
        }
    }
    for (i, core) in cores.iter().enumerate() {
        let mut halo = core.clone();
        for &v in core {
            halo.extend(g.neighbors(v).iter().map(|&(u, _)| u));
        }
        let got: BTreeSet<usize> = part.halo_patches[i].iter().copied().collect();
        if got != halo {
            return Err(format!("halo {i} is not core plus one hop"));
        }
        let sub = &part.subgraphs[i];
        if sub.nodes != part.halo_patches[i] {
            return Err(format!("subgraph {i} nodes differ from halo"));
        }
        let induced = g.edges().iter().filter(|(a, b)| halo.contains(a) && halo.contains(b)).count();
        if sub.edges.len() != induced {
            return Err(format!("subgraph {i} has {} edges, induced {induced}", sub.edges.len()));
        }
    }
    for &(a, b) in g.edges() {
        let covered = part.halo_patches.iter().any(|h| h.contains(&a) && h.contains(&b));
        if !covered {
            return Err(format!("edge ({a}, {b}) not halo-covered"));
        }
    }
    for v in 0..n {
        let want: Vec<usize> = (0..p).filter(|&i| part.halo_patches[i].contains(&v)).collect();
        if part.membership[v] != want {
            return Err(format!("membership of {v} is {:?}, want {want:?}", part.membership[v]));
        }
    }
    Ok(())
}
