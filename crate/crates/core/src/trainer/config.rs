use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::fclstm::LstmConfig;
use crate::numcore::{AdamWConfig, PlateauConfig};
use crate::tgmm::TgmmConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Tgmm,
    Fclstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Tgmm => "tgmm",
            ModelKind::Fclstm => "fclstm",
        }
    }
}

/// Which target entries are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPolicy {
    /// Genuinely observed targets only.
    #[default]
    TrainMask,
    /// Observed targets plus synthetically hidden ones with recorded truth.
    EvalMask,
}

impl EvalPolicy {
    pub fn name(self) -> &'static str {
        match self {
            EvalPolicy::TrainMask => "train-mask",
            EvalPolicy::EvalMask => "eval-mask",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub optimizer: AdamWConfig,
    pub schedule: PlateauConfig,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    /// Policy for the test-split score reported as the headline metric.
    pub eval_policy: EvalPolicy,
    /// Worker threads for evaluation; results do not depend on it.
    pub threads: usize,
    /// Fill the `seconds` column of the history with wall time (breaks
    /// byte-for-byte reproducibility of history.csv).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 4,
            accum_steps: 1,
            optimizer: AdamWConfig::default(),
            schedule: PlateauConfig::default(),
            patience: 5,
            min_delta: 1e-4,
            seed: 0,
            eval_policy: EvalPolicy::EvalMask,
            threads: 1,
            record_wall_time: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub imbalance: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            imbalance: 0.1,
            seed: 0,
        }
    }
}

/// Everything a run needs besides the data; stored as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub window: usize,
    pub horizon: usize,
    /// Step between consecutive window starts.
    pub stride: usize,
    pub tgmm: TgmmConfig,
    pub fclstm: LstmConfig,
    pub partition: PartitionConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Tgmm,
            window: 12,
            horizon: 12,
            stride: 1,
            tgmm: TgmmConfig {
                patches: 0,
                ..Default::default()
            },
            fclstm: LstmConfig::default(),
            partition: PartitionConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Patch count giving cores of about 16 nodes.
pub fn auto_patches(num_nodes: usize) -> usize {
    ((num_nodes as f64 / 16.0).round() as usize).clamp(1, num_nodes.max(1))
}

impl RunConfig {
    /// Copies window, horizon and dataset dimensions into the model configs;
    /// a patch count of 0 becomes `round(N / 16)`.
    pub fn resolve(&mut self, num_nodes: usize, num_channels: usize) {
        if self.tgmm.patches == 0 {
            self.tgmm.patches = auto_patches(num_nodes);
        }
        let (w, h) = (self.window, self.horizon);
        self.tgmm.window = w;
        self.tgmm.horizon = h;
        self.tgmm.in_channels = num_channels;
        self.tgmm.out_channels = num_channels;
        self.fclstm.window = w;
        self.fclstm.horizon = h;
        self.fclstm.in_channels = num_channels;
        self.fclstm.out_channels = num_channels;
        self.fclstm.num_nodes = num_nodes;
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        ensure!(self.window >= 1 && self.horizon >= 1, "window and horizon must be at least 1");
        ensure!(self.stride >= 1, "stride must be at least 1");
        ensure!(t.batch_size >= 1, "batch size must be at least 1");
        ensure!(t.accum_steps >= 1, "accumulation steps must be at least 1");
        ensure!(t.patience >= 1, "patience must be at least 1");
        ensure!(t.max_epochs >= 1, "max epochs must be at least 1");
        ensure!(t.threads >= 1, "threads must be at least 1");
        ensure!(t.min_delta >= 0.0, "min_delta must be non-negative");
        ensure!(t.optimizer.lr > 0.0, "learning rate must be positive");
        ensure!(self.partition.imbalance >= 0.0, "imbalance must be non-negative");
        match self.model {
            ModelKind::Tgmm => self.tgmm.validate(),
            ModelKind::Fclstm => self.fclstm.validate(),
        }
    }
}
