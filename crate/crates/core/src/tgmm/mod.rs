//! Temporal Graph MLP-Mixer: mask-aware node encoder, node-level mixer,
//! GINE patch encoder with mean pooling, 3-axis patch mixer and a readout
//! that averages patch tokens per node before a temporal projection.

pub mod blocks;
pub mod metrics;

use serde::{Deserialize, Serialize};

pub use blocks::{GineLayer, LocalEdges, MixSub, NodeMixerBlock, PatchMixerBlock, PatchPlan};
pub use metrics::{masked_mae, masked_mape, masked_mse, MetricSums, Metrics, MAPE_GUARD};

use crate::datapipe::WindowSample;
use crate::error::{ensure, Result};
use crate::graphpart::PatchPartition;
use crate::numcore::nn::{Dense, Mlp, Mode};
use crate::numcore::{rng, Bound, ParamStore, Tape, Var};

/// Patch encoder kind. Only the message-passing encoder exists.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Gine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutRates {
    pub gnn: f64,
    pub mixer: f64,
    pub readout: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates {
            gnn: 0.1,
            mixer: 0.3,
            readout: 0.1,
        }
    }
}

impl DropoutRates {
    pub fn none() -> Self {
        DropoutRates {
            gnn: 0.0,
            mixer: 0.0,
            readout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TgmmConfig {
    pub window: usize,
    pub horizon: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub d_node: usize,
    pub d_patch: usize,
    pub gnn_layers: usize,
    pub node_mixer_layers: usize,
    pub patch_mixer_layers: usize,
    pub expansion: usize,
    pub dropout: DropoutRates,
    pub patches: usize,
    pub encoder: EncoderKind,
}

impl Default for TgmmConfig {
    fn default() -> Self {
        TgmmConfig {
            window: 12,
            horizon: 12,
            in_channels: 1,
            out_channels: 1,
            d_node: 64,
            d_patch: 128,
            gnn_layers: 2,
            node_mixer_layers: 3,
            patch_mixer_layers: 2,
            expansion: 2,
            dropout: DropoutRates::default(),
            patches: 2,
            encoder: EncoderKind::Gine,
        }
    }
}

impl TgmmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("window", self.window),
            ("horizon", self.horizon),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("d_node", self.d_node),
            ("d_patch", self.d_patch),
            ("gnn_layers", self.gnn_layers),
            ("node_mixer_layers", self.node_mixer_layers),
            ("patch_mixer_layers", self.patch_mixer_layers),
            ("expansion", self.expansion),
            ("patches", self.patches),
        ] {
            ensure!(v >= 1, "{name} must be at least 1");
        }
        let DropoutRates { gnn, mixer, readout } = self.dropout;
        for (name, r) in [("gnn", gnn), ("mixer", mixer), ("readout", readout)] {
            ensure!((0.0..1.0).contains(&r), "{name} dropout {r} outside [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub encoder: Mlp,
    pub node_mixers: Vec<NodeMixerBlock>,
    pub gine: Vec<GineLayer>,
    pub patch_proj: Dense,
    pub patch_mixers: Vec<PatchMixerBlock>,
    pub readout: Dense,
    pub temporal: Dense,
    pub head: Dense,
}

/// Intermediate tensors of one forward pass.
pub struct Trace {
    pub latents: Var,
    pub node_out: Var,
    pub patch_tokens: Var,
    pub patch_out: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct Tgmm {
    pub config: TgmmConfig,
    pub params: ParamStore,
    pub layout: Layout,
    pub plan: PatchPlan,
}

impl Tgmm {
    /// Fresh Glorot-initialized model for a partition with halos.
    pub fn new(config: TgmmConfig, partition: &PatchPartition, seed: u64) -> Result<Self> {
        config.validate()?;
        ensure!(
            partition.num_patches == config.patches,
            "config expects {} patches, partition has {}",
            config.patches,
            partition.num_patches
        );
        let plan = PatchPlan::new(partition)?;
        let c = &config;
        let (w, d, dp, e) = (c.window, c.d_node, c.d_patch, c.expansion);
        let mut r = rng::stream(seed, "tgmm_init", 0);
        let mut s = ParamStore::new();
        let encoder = Mlp::new(&mut s, &mut r, "encoder", 2 * c.in_channels, 2 * d, d);
        let node_mixers = (0..c.node_mixer_layers)
            .map(|l| NodeMixerBlock::new(&mut s, &mut r, &format!("node_mixer.{l}"), w, d, e))
            .collect();
        let gine = (0..c.gnn_layers)
            .map(|l| GineLayer::new(&mut s, &mut r, &format!("gine.{l}"), d))
            .collect();
        let patch_proj = Dense::new(&mut s, &mut r, "patch_proj", d, dp);
        let patch_mixers = (0..c.patch_mixer_layers)
            .map(|l| PatchMixerBlock::new(&mut s, &mut r, &format!("patch_mixer.{l}"), c.patches, w, dp, e))
            .collect();
        let readout = Dense::new(&mut s, &mut r, "readout", d + dp, d);
        let temporal = Dense::new(&mut s, &mut r, "temporal", w, c.horizon);
        let head = Dense::new(&mut s, &mut r, "head", d, c.out_channels);
        Ok(Tgmm {
            layout: Layout {
                encoder,
                node_mixers,
                gine,
                patch_proj,
                patch_mixers,
                readout,
                temporal,
                head,
            },
            config,
            params: s,
            plan,
        })
    }

    pub fn check_sample(&self, s: &WindowSample) -> Result<()> {
        let c = &self.config;
        let want_in = [self.plan.num_nodes, c.window, c.in_channels];
        let want_out = [self.plan.num_nodes, c.horizon, c.out_channels];
        ensure!(
            s.input.shape() == want_in && s.input_mask.shape() == want_in,
            "input shape {:?} does not match model {want_in:?}",
            s.input.shape()
        );
        ensure!(
            s.target.shape() == want_out,
            "target shape {:?} does not match model {want_out:?}",
            s.target.shape()
        );
        Ok(())
    }

    /// `[N, W, C_in]` values and mask → `[N, W, d]`.
    pub fn node_encode(&self, t: &mut Tape, p: &Bound, values: Var, mask: Var) -> Var {
        let x = t.concat(&[values, mask], 2);
        self.layout.encoder.apply(t, p, x)
    }

    pub fn node_mixer(&self, t: &mut Tape, p: &Bound, z: Var, mode: &mut Mode) -> Var {
        self.layout
            .node_mixers
            .iter()
            .fold(z, |z, b| b.apply(t, p, z, self.config.dropout.mixer, mode))
    }

    /// `[N, W, d]` → `[P, W, d_p]`.
    pub fn patch_encode(&self, t: &mut Tape, p: &Bound, z: Var, mode: &mut Mode) -> Var {
        let mut h = t.index_select(z, self.plan.rows.as_slice().into());
        for layer in &self.layout.gine {
            h = layer.apply(t, p, h, &self.plan.edges);
            h = mode.dropout(t, h, self.config.dropout.gnn);
        }
        let pooled = self.plan.pool(t, h);
        self.layout.patch_proj.apply(t, p, pooled)
    }

    pub fn patch_mixer(&self, t: &mut Tape, p: &Bound, x: Var, mode: &mut Mode) -> Var {
        self.layout
            .patch_mixers
            .iter()
            .fold(x, |x, b| b.apply(t, p, x, self.config.dropout.mixer, mode))
    }

    /// `[N, W, d]` and `[P, W, d_p]` → `[N, H, C_out]`.
    pub fn readout(&self, t: &mut Tape, p: &Bound, z: Var, tp: Var, mode: &mut Mode) -> Var {
        let ctx = self.plan.average_memberships(t, tp);
        let u = t.concat(&[z, ctx], 2);
        let f = self.layout.readout.apply(t, p, u);
        let f = t.gelu(f);
        let f = mode.dropout(t, f, self.config.dropout.readout);
        let f = t.transpose(f, 1, 2);
        let f = self.layout.temporal.apply(t, p, f);
        let f = t.transpose(f, 1, 2);
        self.layout.head.apply(t, p, f)
    }

    pub fn forward_trace(&self, t: &mut Tape, p: &Bound, s: &WindowSample, mode: &mut Mode) -> Result<Trace> {
        self.check_sample(s)?;
        let values = t.constant(s.input.clone());
        let mask = t.constant(s.input_mask.clone());
        let latents = self.node_encode(t, p, values, mask);
        let node_out = self.node_mixer(t, p, latents, mode);
        let patch_tokens = self.patch_encode(t, p, latents, mode);
        let patch_out = self.patch_mixer(t, p, patch_tokens, mode);
        let output = self.readout(t, p, node_out, patch_out, mode);
        Ok(Trace {
            latents,
            node_out,
            patch_tokens,
            patch_out,
            output,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, s: &WindowSample, mode: &mut Mode) -> Result<Var> {
        Ok(self.forward_trace(t, p, s, mode)?.output)
    }
}
