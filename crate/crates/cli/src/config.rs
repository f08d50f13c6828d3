//! Flat experiment configuration.
//!
//! One TOML table holds every knob of an experiment; unknown keys are
//! rejected, missing keys take the defaults that reproduce the reference
//! experiment. Resolution order: config file, then repeatable `--set
//! key=value` pairs, then dedicated flags (a flag wins over `--set`, which
//! wins over the file). The resolved config is written into every output
//! directory so a run can be reproduced from its artifacts alone.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use cyclematch::assoc::{LossConfig, LossKind, TemperatureConfig};
use cyclematch::eval::SweepAxis;
use cyclematch::sim::{make_world, IdentityWorld, SymmetrySchedule};
use cyclematch::train::{OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Version of the tool that resolved this config (recorded, not read).
    pub version: String,

    // World.
    pub n_identities: usize,
    pub d_obs: usize,
    pub n_cameras: usize,
    pub sigma_intra: f64,
    pub world_seed: u64,

    // Embedder.
    pub embed_dim: usize,
    /// Hidden width of the two-layer embedder; 0 means a single affine layer.
    pub hidden_dim: usize,

    // Training.
    pub pairs_per_batch: usize,
    pub instances_per_frame: usize,
    pub frame_gap: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub inter_only_stage2: bool,
    /// Master seed for model init, batch sampling, and evaluation streams.
    pub seed: u64,

    // Loss.
    pub loss: LossKind,
    pub margin: f64,
    pub epsilon: f64,
    pub delta: f64,

    // Pair-symmetry schedule.
    pub tau_alpha: f64,
    pub tau_beta: f64,

    // Sweep (used by the sweep subcommand only).
    pub sweep_axis: SweepAxis,
    pub sweep_grid: Vec<f64>,
    pub sweep_fixed: f64,
    pub sweep_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            n_identities: 32,
            d_obs: 16,
            n_cameras: 2,
            sigma_intra: 0.04,
            world_seed: 7,
            embed_dim: t.embed_dim,
            hidden_dim: 0,
            pairs_per_batch: t.pairs_per_batch,
            instances_per_frame: t.instances_per_frame,
            frame_gap: t.frame_gap,
            stage1_iters: t.stage1_iters,
            stage2_iters: t.stage2_iters,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            inter_only_stage2: t.inter_only_stage2,
            seed: t.seed,
            loss: t.loss.kind,
            margin: t.loss.margin,
            epsilon: t.loss.temperature.epsilon,
            delta: t.loss.temperature.delta,
            tau_alpha: t.schedule.tau_alpha_mean,
            tau_beta: t.schedule.tau_beta_mean,
            sweep_axis: SweepAxis::Alpha,
            sweep_grid: vec![0.3, 1.0],
            sweep_fixed: 0.6,
            sweep_seeds: 5,
        }
    }
}

impl ExperimentConfig {
    /// Validates and assembles the training-side configuration.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let temperature = TemperatureConfig::new(self.epsilon, self.delta)?;
        let loss = LossConfig::new(self.loss, self.margin, temperature)?;
        let schedule = SymmetrySchedule::new(self.tau_alpha, self.tau_beta)?;
        let cfg = TrainConfig {
            pairs_per_batch: self.pairs_per_batch,
            instances_per_frame: self.instances_per_frame,
            frame_gap: self.frame_gap,
            stage1_iters: self.stage1_iters,
            stage2_iters: self.stage2_iters,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            loss,
            schedule,
            inter_only_stage2: self.inter_only_stage2,
            embed_dim: self.embed_dim,
            hidden_dim: (self.hidden_dim > 0).then_some(self.hidden_dim),
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build_world(&self) -> Result<IdentityWorld> {
        Ok(make_world(
            self.n_identities,
            self.d_obs,
            self.n_cameras,
            self.sigma_intra,
            self.world_seed,
        )?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Dedicated override flags, one per config key. A flag set here beats both
/// the config file and `--set`.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Master seed for model init, batch sampling, and evaluation.
    #[arg(long, overrides_with = "seed")]
    pub seed: Option<u64>,
    #[arg(long, overrides_with = "n_identities")]
    pub n_identities: Option<usize>,
    #[arg(long, overrides_with = "d_obs")]
    pub d_obs: Option<usize>,
    #[arg(long, overrides_with = "n_cameras")]
    pub n_cameras: Option<usize>,
    #[arg(long, overrides_with = "sigma_intra")]
    pub sigma_intra: Option<f64>,
    #[arg(long, overrides_with = "world_seed")]
    pub world_seed: Option<u64>,
    #[arg(long, overrides_with = "embed_dim")]
    pub embed_dim: Option<usize>,
    /// Hidden width of the embedder; 0 means a single affine layer.
    #[arg(long, overrides_with = "hidden_dim")]
    pub hidden_dim: Option<usize>,
    #[arg(long, overrides_with = "pairs_per_batch")]
    pub pairs_per_batch: Option<usize>,
    #[arg(long, overrides_with = "instances_per_frame")]
    pub instances_per_frame: Option<usize>,
    #[arg(long, overrides_with = "frame_gap")]
    pub frame_gap: Option<usize>,
    #[arg(long, overrides_with = "stage1_iters")]
    pub stage1_iters: Option<usize>,
    #[arg(long, overrides_with = "stage2_iters")]
    pub stage2_iters: Option<usize>,
    #[arg(long, overrides_with = "learning_rate")]
    pub learning_rate: Option<f64>,
    /// sgd or adam.
    #[arg(long, value_parser = parse_optimizer, overrides_with = "optimizer")]
    pub optimizer: Option<OptimizerKind>,
    /// true drops the same-camera half of mixed-stage batches (ablation).
    #[arg(long, overrides_with = "inter_only_stage2")]
    pub inter_only_stage2: Option<bool>,
    /// symmetric or asymmetric.
    #[arg(long, value_parser = parse_loss_kind, overrides_with = "loss")]
    pub loss: Option<LossKind>,
    #[arg(long, overrides_with = "margin")]
    pub margin: Option<f64>,
    #[arg(long, overrides_with = "epsilon")]
    pub epsilon: Option<f64>,
    #[arg(long, overrides_with = "delta")]
    pub delta: Option<f64>,
    #[arg(long, overrides_with = "tau_alpha")]
    pub tau_alpha: Option<f64>,
    #[arg(long, overrides_with = "tau_beta")]
    pub tau_beta: Option<f64>,
    /// alpha or beta.
    #[arg(long, value_parser = parse_sweep_axis, overrides_with = "sweep_axis")]
    pub sweep_axis: Option<SweepAxis>,
    /// Comma-separated grid of symmetry means, e.g. 0.2,0.6,1.0
    #[arg(long, value_delimiter = ',', overrides_with = "sweep_grid")]
    pub sweep_grid: Option<Vec<f64>>,
    #[arg(long, overrides_with = "sweep_fixed")]
    pub sweep_fixed: Option<f64>,
    #[arg(long, overrides_with = "sweep_seeds")]
    pub sweep_seeds: Option<usize>,
}

fn parse_loss_kind(s: &str) -> std::result::Result<LossKind, String> {
    match s {
        "symmetric" => Ok(LossKind::Symmetric),
        "asymmetric" => Ok(LossKind::Asymmetric),
        other => Err(format!("expected symmetric or asymmetric, got '{other}'")),
    }
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(format!("expected sgd or adam, got '{other}'")),
    }
}

fn parse_sweep_axis(s: &str) -> std::result::Result<SweepAxis, String> {
    match s {
        "alpha" => Ok(SweepAxis::Alpha),
        "beta" => Ok(SweepAxis::Beta),
        other => Err(format!("expected alpha or beta, got '{other}'")),
    }
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! apply {
            ($($field:ident),+ $(,)?) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                })+
            };
        }
        apply!(
            seed,
            n_identities,
            d_obs,
            n_cameras,
            sigma_intra,
            world_seed,
            embed_dim,
            hidden_dim,
            pairs_per_batch,
            instances_per_frame,
            frame_gap,
            stage1_iters,
            stage2_iters,
            learning_rate,
            optimizer,
            inter_only_stage2,
            loss,
            margin,
            epsilon,
            delta,
            tau_alpha,
            tau_beta,
            sweep_axis,
            sweep_grid,
            sweep_fixed,
            sweep_seeds,
        );
    }
}

/// Loads, overrides, and validates the experiment config.
pub fn resolve(
    config_path: Option<&Path>,
    sets: &[String],
    overrides: &Overrides,
) -> Result<ExperimentConfig> {
    let mut table: toml::Table = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            text.parse().with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for spec in sets {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got '{spec}'"))?;
        table.insert(key.trim().to_string(), parse_set_value(raw.trim()));
    }
    let mut cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| anyhow!("invalid config: {e}"))?;
    overrides.apply(&mut cfg);
    cfg.version = env!("CARGO_PKG_VERSION").to_string();
    Ok(cfg)
}

/// A `--set` value is read as a TOML literal when it parses as one (numbers,
/// booleans, arrays, quoted strings) and as a bare string otherwise, so both
/// `--set margin=0.5` and `--set loss=asymmetric` do what they look like.
fn parse_set_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
