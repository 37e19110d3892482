//! Model components, each usable on its own parameter store.

use std::rc::Rc;

use rand::Rng;

use crate::error::{ensure, Result};
use crate::graphpart::PatchPartition;
use crate::numcore::nn::{Dense, LayerNorm, Mlp, Mode};
use crate::numcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Layer norm over the last axis, an expansion MLP over `perm`'s last axis,
/// dropout and a residual add.
#[derive(Clone, Copy, Debug)]
pub struct MixSub {
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

impl MixSub {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        features: usize,
        tokens: usize,
        expansion: usize,
    ) -> Self {
        MixSub {
            ln: LayerNorm::new(store, &format!("{name}.ln"), features),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), tokens, expansion * tokens, tokens),
        }
    }

    /// `perm` must be an involution moving the mixed axis last.
    pub fn apply(&self, t: &mut Tape, p: &Bound, x: Var, perm: Option<&[usize]>, rate: f64, mode: &mut Mode) -> Var {
        let mut y = self.ln.apply(t, p, x);
        if let Some(perm) = perm {
            y = t.permute(y, perm);
        }
        y = self.mlp.apply(t, p, y);
        if let Some(perm) = perm {
            y = t.permute(y, perm);
        }
        let y = mode.dropout(t, y, rate);
        t.add(x, y)
    }
}

const SWAP_LAST_TWO: [usize; 3] = [0, 2, 1];
const SWAP_FIRST_LAST: [usize; 3] = [2, 1, 0];

/// Per-node token mixing over time, then channel mixing over features.
#[derive(Clone, Copy, Debug)]
pub struct NodeMixerBlock {
    pub token: MixSub,
    pub channel: MixSub,
}

impl NodeMixerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        window: usize,
        d: usize,
        expansion: usize,
    ) -> Self {
        NodeMixerBlock {
            token: MixSub::new(store, rng, &format!("{name}.token"), d, window, expansion),
            channel: MixSub::new(store, rng, &format!("{name}.channel"), d, d, expansion),
        }
    }

    /// `z`: `[N, W, d]`.
    pub fn apply(&self, t: &mut Tape, p: &Bound, z: Var, rate: f64, mode: &mut Mode) -> Var {
        let z = self.token.apply(t, p, z, Some(&SWAP_LAST_TWO), rate, mode);
        self.channel.apply(t, p, z, None, rate, mode)
    }

    pub fn zero_mixing(&self, store: &mut ParamStore) {
        self.token.mlp.zero(store);
        self.channel.mlp.zero(store);
    }
}

/// Temporal, then spatial, then feature mixing of patch tokens.
#[derive(Clone, Copy, Debug)]
pub struct PatchMixerBlock {
    pub temporal: MixSub,
    pub spatial: MixSub,
    pub feature: MixSub,
}

impl PatchMixerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        patches: usize,
        window: usize,
        d_p: usize,
        expansion: usize,
    ) -> Self {
        PatchMixerBlock {
            temporal: MixSub::new(store, rng, &format!("{name}.temporal"), d_p, window, expansion),
            spatial: MixSub::new(store, rng, &format!("{name}.spatial"), d_p, patches, expansion),
            feature: MixSub::new(store, rng, &format!("{name}.feature"), d_p, d_p, expansion),
        }
    }

    /// `x`: `[P, W, d_p]`.
    pub fn apply(&self, t: &mut Tape, p: &Bound, x: Var, rate: f64, mode: &mut Mode) -> Var {
        let x = self.temporal.apply(t, p, x, Some(&SWAP_LAST_TWO), rate, mode);
        let x = self.spatial.apply(t, p, x, Some(&SWAP_FIRST_LAST), rate, mode);
        self.feature.apply(t, p, x, None, rate, mode)
    }

    pub fn zero_mixing(&self, store: &mut ParamStore) {
        self.temporal.mlp.zero(store);
        self.spatial.mlp.zero(store);
        self.feature.mlp.zero(store);
    }
}

/// Directed edge list over the rows of a node-feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEdges {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub weight: Vec<f64>,
}

impl LocalEdges {
    /// Both directions of every undirected `(a, b, w)`.
    pub fn undirected(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut out = LocalEdges {
            num_nodes,
            src: Vec::new(),
            dst: Vec::new(),
            weight: Vec::new(),
        };
        for (a, b, w) in edges {
            assert!(a < num_nodes && b < num_nodes, "edge ({a}, {b}) outside {num_nodes} local nodes");
            out.src.extend([a, b]);
            out.dst.extend([b, a]);
            out.weight.extend([w, w]);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// `h'_i = MLP((1 + eps) h_i + sum_j ReLU(h_j + proj(e_ij)))`.
#[derive(Clone, Copy, Debug)]
pub struct GineLayer {
    pub eps: ParamId,
    pub edge: Dense,
    pub mlp: Mlp,
}

impl GineLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        GineLayer {
            eps: store.add(format!("{name}.eps"), Tensor::zeros(&[1])),
            edge: Dense::new(store, rng, &format!("{name}.edge"), 1, d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, 2 * d, d),
        }
    }

    /// `h`: `[n, ..., d]`; the middle axes are independent copies of the graph.
    pub fn apply(&self, t: &mut Tape, p: &Bound, h: Var, edges: &LocalEdges) -> Var {
        let sh = t.shape(h).to_vec();
        assert_eq!(sh[0], edges.num_nodes, "GINE input has {} rows for {} nodes", sh[0], edges.num_nodes);
        let d = sh[sh.len() - 1];
        let scaled = t.mul(h, p[self.eps]);
        let mut agg = t.add(h, scaled);
        if !edges.is_empty() {
            let e = edges.len();
            let hj = t.index_select(h, Rc::from(&edges.src[..]));
            let w = t.constant(Tensor::from_vec(&[e, 1], edges.weight.clone()));
            let proj = self.edge.apply(t, p, w);
            let mut pshape = vec![1; sh.len()];
            pshape[0] = e;
            pshape[sh.len() - 1] = d;
            let proj = t.reshape(proj, &pshape);
            let m = t.add(hj, proj);
            let m = t.relu(m);
            let s = t.scatter_add(m, Rc::from(&edges.dst[..]), edges.num_nodes);
            agg = t.add(agg, s);
        }
        self.mlp.apply(t, p, agg)
    }
}

/// Index bookkeeping turning a partition into gather/scatter plans.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPlan {
    pub num_nodes: usize,
    pub num_patches: usize,
    /// Global node of each stacked halo row, patch by patch.
    pub rows: Vec<usize>,
    pub row_patch: Vec<usize>,
    /// `[P, 1, 1]`, reciprocal halo sizes.
    pub inv_halo_size: Tensor,
    /// Disjoint union of the induced halo subgraphs over stacked rows.
    pub edges: LocalEdges,
    /// One entry per (node, containing patch) pair.
    pub member_node: Vec<usize>,
    pub member_patch: Vec<usize>,
    /// `[Q, 1, 1]`, reciprocal membership count of each pair's node.
    pub member_weight: Tensor,
}

impl PatchPlan {
    pub fn new(partition: &PatchPartition) -> Result<Self> {
        let (n, pc) = (partition.num_nodes(), partition.num_patches);
        ensure!(partition.has_halos(), "partition has no halos; expand it first");
        let mut rows = Vec::new();
        let mut row_patch = Vec::new();
        let mut edge_list = Vec::new();
        let mut inv = Vec::with_capacity(pc);
        for (pid, sub) in partition.subgraphs.iter().enumerate() {
            ensure!(!sub.nodes.is_empty(), "patch {pid} has an empty halo");
            let off = rows.len();
            rows.extend_from_slice(&sub.nodes);
            row_patch.extend(std::iter::repeat(pid).take(sub.nodes.len()));
            inv.push(1.0 / sub.nodes.len() as f64);
            for (&(a, b), &w) in sub.edges.iter().zip(&sub.weights) {
                edge_list.push((a + off, b + off, w));
            }
        }
        let mut member_node = Vec::new();
        let mut member_patch = Vec::new();
        let mut member_weight = Vec::new();
        for (node, pats) in partition.membership.iter().enumerate() {
            ensure!(!pats.is_empty(), "node {node} belongs to no patch");
            for &pid in pats {
                member_node.push(node);
                member_patch.push(pid);
                member_weight.push(1.0 / pats.len() as f64);
            }
        }
        let q = member_node.len();
        Ok(PatchPlan {
            num_nodes: n,
            num_patches: pc,
            edges: LocalEdges::undirected(rows.len(), edge_list),
            rows,
            row_patch,
            inv_halo_size: Tensor::from_vec(&[pc, 1, 1], inv),
            member_node,
            member_patch,
            member_weight: Tensor::from_vec(&[q, 1, 1], member_weight),
        })
    }

    /// Mean of stacked rows `[M, W, d]` per patch → `[P, W, d]`.
    pub fn pool(&self, t: &mut Tape, h: Var) -> Var {
        let s = t.scatter_add(h, Rc::from(&self.row_patch[..]), self.num_patches);
        let inv = t.constant(self.inv_halo_size.clone());
        t.mul(s, inv)
    }

    /// Per node, the mean of its patches' rows: `[P, W, k]` → `[N, W, k]`.
    pub fn average_memberships(&self, t: &mut Tape, tp: Var) -> Var {
        let g = t.index_select(tp, Rc::from(&self.member_patch[..]));
        let w = t.constant(self.member_weight.clone());
        let g = t.mul(g, w);
        t.scatter_add(g, Rc::from(&self.member_node[..]), self.num_nodes)
    }
}
