//! One JSON file drives the whole pipeline. Every block rejects unknown
//! keys, and `validate` reports problems by dotted field path so the CLI
//! can surface them verbatim.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cfm::{FlowSchedule, OdeMethod, TrainConfig};
use crate::diffcore::Precision;
use crate::distill::{DatasetConfig, DistillConfig};
use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::nets::NetDims;
use crate::simloop::{HoldMode, LatencyModel, RolloutConfig};
use crate::tasks::TaskSpec;

/// Demo corpus and evaluation split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    /// Expert demos rendered for teacher training.
    pub n_demos: usize,
    /// Held-out scenes used for sampling, eval and distillation.
    pub n_holdout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkBlock {
    pub dims: NetDims,
    pub encoder: EncoderDims,
    pub precision: Precision,
}

/// Teacher training plus its sampling regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfmBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub schedule: FlowSchedule,
    pub mask: bool,
    pub aug_noise: f64,
    pub aug_prob: f64,
    pub early_stop_patience: usize,
    pub early_stop_rel: f64,
    /// Targets are divided by this before entering the flow.
    pub action_scale: f64,
    /// ODE grid size at sampling time.
    pub n_steps: usize,
    pub method: OdeMethod,
    /// Teacher samples per observation (distill corpus and eval sets).
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillBlock {
    /// Student samples per observation at eval time.
    pub k: usize,
    pub epochs: usize,
    pub obs_per_step: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub early_stop_patience: usize,
    pub early_stop_rel: f64,
}

/// Where the plan/hold latency comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyMode {
    /// `ms_per_nfe`/`overhead_ms` below, taken at face value.
    Synthetic,
    /// Wall-clock medians measured per policy before the rollout;
    /// the fields below are ignored.
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyBlock {
    pub mode: LatencyMode,
    #[serde(default = "default_ms_per_nfe")]
    pub ms_per_nfe: f64,
    #[serde(default)]
    pub overhead_ms: f64,
}

fn default_ms_per_nfe() -> f64 {
    2.0
}

impl LatencyBlock {
    /// The synthetic model; measured mode builds its own from timings.
    pub fn model(&self) -> LatencyModel {
        LatencyModel { ms_per_nfe: self.ms_per_nfe, overhead_ms: self.overhead_ms }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimloopBlock {
    /// Plan rows executed per replan.
    pub execute_steps: usize,
    pub max_steps: usize,
    /// Episodes per policy, and per (policy, speed) cell in sweeps.
    pub episodes: usize,
    pub hold: HoldMode,
    pub latency: LatencyBlock,
    /// Orbit speeds swept on dynamic-target tasks; ignored otherwise.
    pub speeds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Artifact directory; `--out` overrides it.
    pub output: PathBuf,
    pub task: TaskSpec,
    pub data: DataBlock,
    pub network: NetworkBlock,
    pub cfm: CfmBlock,
    pub distill: DistillBlock,
    pub simloop: SimloopBlock,
}

impl CfmBlock {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_min: self.lr_min,
            schedule: self.schedule,
            mask: self.mask,
            aug_noise: self.aug_noise,
            aug_prob: self.aug_prob,
            early_stop_patience: self.early_stop_patience,
            early_stop_rel: self.early_stop_rel,
            action_scale: self.action_scale,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            k: self.k,
            n_steps: self.n_steps,
            method: self.method,
            action_scale: self.action_scale,
        }
    }
}

impl DistillBlock {
    /// `action_scale` comes from the cfm block: the student reuses the
    /// teacher's target scaling.
    pub fn distill_config(&self, action_scale: f64) -> DistillConfig {
        DistillConfig {
            epochs: self.epochs,
            obs_per_step: self.obs_per_step,
            lr: self.lr,
            lr_min: self.lr_min,
            early_stop_patience: self.early_stop_patience,
            early_stop_rel: self.early_stop_rel,
            action_scale,
        }
    }
}

impl SimloopBlock {
    pub fn rollout_config(&self, latency: LatencyModel) -> RolloutConfig {
        RolloutConfig {
            execute_steps: self.execute_steps,
            max_steps: self.max_steps,
            latency,
            hold: self.hold,
        }
    }
}

fn bad(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.to_string(), reason: reason.into() }
}

/// Prefixes the dotted path of a nested `Config` error with its block name.
fn nest(block: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => {
            Error::Config { field: format!("{block}.{field}"), reason }
        }
        other => other,
    }
}

fn check_rates(block: &str, lr: f64, lr_min: f64, rel: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(bad(&format!("{block}.lr"), "must be positive"));
    }
    if !(lr_min > 0.0 && lr_min <= lr) {
        return Err(bad(&format!("{block}.lr_min"), "must be in (0, lr]"));
    }
    if !(rel >= 0.0) {
        return Err(bad(&format!("{block}.early_stop_rel"), "must be ≥ 0"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.network.dims.validate().map_err(|e| nest("network", e))?;
        self.network.encoder.validate().map_err(|e| nest("network", e))?;

        let nd = &self.network.dims;
        let ed = &self.network.encoder;
        if nd.horizon != self.task.horizon {
            return Err(bad(
                "network.dims.horizon",
                format!("must equal task.horizon ({})", self.task.horizon),
            ));
        }
        if nd.action_dim != 2 {
            return Err(bad("network.dims.action_dim", "environment actions are 2-D"));
        }
        if nd.obs_dim != ed.obs_dim() {
            return Err(bad(
                "network.dims.obs_dim",
                format!("must equal the encoder output dim ({})", ed.obs_dim()),
            ));
        }
        if ed.state_dim != 4 {
            return Err(bad("network.encoder.state_dim", "rendered state vectors are 4-D"));
        }

        if self.data.n_demos == 0 {
            return Err(bad("data.n_demos", "must be positive"));
        }
        if self.data.n_holdout == 0 {
            return Err(bad("data.n_holdout", "must be positive"));
        }

        let c = &self.cfm;
        if c.epochs == 0 || c.batch_size == 0 {
            return Err(bad("cfm.epochs", "epochs and batch_size must be positive"));
        }
        check_rates("cfm", c.lr, c.lr_min, c.early_stop_rel)?;
        if !(c.schedule.sigma > 0.0) {
            return Err(bad("cfm.schedule.sigma", "must be positive"));
        }
        if !(c.aug_noise >= 0.0) || !(0.0..=1.0).contains(&c.aug_prob) {
            return Err(bad("cfm.aug_prob", "aug_noise ≥ 0 and aug_prob in [0, 1] required"));
        }
        if !(c.action_scale > 0.0) {
            return Err(bad("cfm.action_scale", "must be positive"));
        }
        if c.n_steps == 0 {
            return Err(bad("cfm.n_steps", "must be positive"));
        }
        if c.k == 0 {
            return Err(bad("cfm.k", "must be positive"));
        }

        let d = &self.distill;
        if d.k == 0 {
            return Err(bad("distill.k", "must be positive"));
        }
        if d.epochs == 0 || d.obs_per_step == 0 {
            return Err(bad("distill.epochs", "epochs and obs_per_step must be positive"));
        }
        check_rates("distill", d.lr, d.lr_min, d.early_stop_rel)?;

        let s = &self.simloop;
        if s.execute_steps == 0 || s.execute_steps > self.task.horizon {
            return Err(bad(
                "simloop.execute_steps",
                format!("must be in 1..={}", self.task.horizon),
            ));
        }
        if s.max_steps == 0 {
            return Err(bad("simloop.max_steps", "must be positive"));
        }
        if s.episodes == 0 {
            return Err(bad("simloop.episodes", "must be positive"));
        }
        if !(s.latency.ms_per_nfe >= 0.0 && s.latency.overhead_ms >= 0.0) {
            return Err(bad("simloop.latency.ms_per_nfe", "latencies must be ≥ 0"));
        }
        if self.task.kind == crate::tasks::TaskKind::DynamicTarget {
            if s.speeds.is_empty() {
                return Err(bad("simloop.speeds", "dynamic-target sweeps need ≥ 1 speed"));
            }
            if s.speeds.iter().any(|v| !(*v >= 0.0)) {
                return Err(bad("simloop.speeds", "speeds must be ≥ 0"));
            }
        }
        Ok(())
    }

    /// Reads, parses and validates. Parse failures come back as `Config`
    /// errors so the CLI maps them to the config exit code.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            bad("config", format!("cannot read {}: {e}", path.display()))
        })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| bad("config", format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Formatting-independent serialization; hash this, not the file bytes.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn sha256(&self) -> String {
        crate::io::sha256_hex(self.canonical_json().as_bytes())
    }

    /// Fork-around-an-obstacle task, sized to train on one core in minutes.
    pub fn fork2d() -> Self {
        let encoder = EncoderDims::default();
        Self {
            seed: 7,
            output: PathBuf::from("runs/fork2d"),
            task: TaskSpec::fork2d(),
            data: DataBlock { n_demos: 2000, n_holdout: 200 },
            network: NetworkBlock {
                dims: NetDims {
                    horizon: 32,
                    action_dim: 2,
                    c1: 32,
                    c2: 64,
                    obs_dim: encoder.obs_dim(),
                    time_dim: 16,
                },
                encoder,
                precision: Precision::Standard32,
            },
            cfm: CfmBlock {
                epochs: 60,
                batch_size: 16,
                lr: 2e-3,
                lr_min: 2e-4,
                schedule: FlowSchedule::default(),
                mask: true,
                aug_noise: 0.05,
                aug_prob: 0.3,
                early_stop_patience: 10,
                early_stop_rel: 1e-3,
                action_scale: 0.05,
                n_steps: 50,
                method: OdeMethod::Euler,
                k: 16,
            },
            distill: DistillBlock {
                k: 16,
                epochs: 150,
                obs_per_step: 8,
                lr: 1e-3,
                lr_min: 1e-4,
                early_stop_patience: 25,
                early_stop_rel: 1e-3,
            },
            simloop: SimloopBlock {
                execute_steps: 8,
                max_steps: 400,
                episodes: 100,
                hold: HoldMode::ZeroOrder,
                latency: LatencyBlock {
                    mode: LatencyMode::Synthetic,
                    ms_per_nfe: 2.0,
                    overhead_ms: 0.0,
                },
                speeds: Vec::new(),
            },
        }
    }

    /// Orbiting-target task; same networks, sweep speeds up to the analytic
    /// teacher-breaking point.
    pub fn dynamic() -> Self {
        let mut cfg = Self::fork2d();
        cfg.output = PathBuf::from("runs/dynamic");
        cfg.task = TaskSpec::dynamic_target(0.5);
        cfg.simloop.speeds = vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25];
        cfg
    }
}
