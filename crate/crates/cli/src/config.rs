//! Experiment configuration: a TOML document with `model`, `hardware`,
//! `plan` and `run` sections. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use neoxsim::cluster::ClusterSpec;
use neoxsim::halfnum::{Precision, ReductionStrategy};
use neoxsim::neox::{GeluVariant, ModelConfig};
use neoxsim::perfmodel::{shipped_calibration, HardwareModel, DEFAULT_SWEEP};
use neoxsim::plan::{FusionPlan, KernelClass, Operator, PlanPreset};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub hardware: HardwareSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub run: RunSection,
}

/// A preset name plus optional per-field overrides.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub hidden: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_head: Option<usize>,
    pub n_layers: Option<usize>,
    pub d_mlp: Option<usize>,
    pub rotary_pct: Option<f64>,
    pub ln_eps: Option<f64>,
    pub vocab: Option<usize>,
    pub parallel_residual: Option<bool>,
    pub rope_theta: Option<f64>,
    pub gelu: Option<GeluVariant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Fitted at startup from the bundled measurement table.
    Shipped,
    /// Unit efficiencies and zero overheads.
    Ideal,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSection {
    pub calibration: Option<Baseline>,
    pub bandwidth: Option<f64>,
    pub launch_overhead: Option<f64>,
    pub descriptor_cost: Option<f64>,
    pub graph_replay_overhead: Option<f64>,
    #[serde(default)]
    pub efficiency: BTreeMap<KernelClass, f64>,
    /// Parameters left free by `calibrate`; defaults to every identifiable one.
    pub free: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionName {
    Ring,
    Tree,
    PermutedAtomic,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub preset: Option<PlanPreset>,
    /// Explicit operator groups; overrides `preset`.
    pub kernels: Option<Vec<Vec<Operator>>>,
    pub graph_mode: Option<bool>,
    pub n_blocks: Option<usize>,
    pub reduction: Option<ReductionName>,
    pub precision: Option<Precision>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seq_lens: Option<Vec<usize>>,
    pub seed: Option<u64>,
    /// Number of atomic seeds in a fidelity sweep.
    pub seeds: Option<u64>,
    pub steps: Option<usize>,
    pub prompt_len: Option<usize>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub measurements: Option<PathBuf>,
    pub suites: Option<Vec<String>>,
    pub adversarial: Option<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.message().to_string())?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), String> {
        if matches!(&self.run.seq_lens, Some(v) if v.is_empty()) {
            return Err("run.seq_lens must not be empty".into());
        }
        if self.run.seeds == Some(0) {
            return Err("run.seeds must be positive".into());
        }
        if self.run.steps == Some(0) {
            return Err("run.steps must be positive".into());
        }
        Ok(())
    }

    /// Model for this run, starting from `preset` or the command's default.
    pub fn model(&self, default_preset: &str) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        let name = m.preset.as_deref().unwrap_or(default_preset);
        let mut cfg = ModelConfig::preset(name).map_err(|e| CliError::Usage(e.to_string()))?;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = m.$f { cfg.$f = v; })* };
        }
        set!(
            hidden,
            n_heads,
            d_head,
            n_layers,
            d_mlp,
            rotary_pct,
            ln_eps,
            vocab,
            parallel_residual,
            rope_theta,
            gelu
        );
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Hardware for this run; `default` applies when `hardware.calibration` is unset.
    pub fn hardware(&self, default: Baseline) -> Result<HardwareModel, CliError> {
        let h = &self.hardware;
        let mut hw = match h.calibration.unwrap_or(default) {
            Baseline::Shipped => shipped_calibration()?.hw,
            Baseline::Ideal => HardwareModel::default(),
        };
        if let Some(v) = h.bandwidth {
            hw.bandwidth = v;
        }
        if let Some(v) = h.launch_overhead {
            hw.launch_overhead = v;
        }
        if let Some(v) = h.descriptor_cost {
            hw.descriptor_cost = v;
        }
        if let Some(v) = h.graph_replay_overhead {
            hw.graph_replay_overhead = v;
        }
        hw.efficiency.extend(h.efficiency.iter().map(|(k, v)| (*k, *v)));
        hw.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(hw)
    }

    pub fn plan(&self) -> Result<FusionPlan, CliError> {
        let p = &self.plan;
        let graph = p.graph_mode.unwrap_or(false);
        let plan = match &p.kernels {
            Some(groups) => FusionPlan::from_groups(groups.clone(), graph),
            None => {
                let plan = p.preset.unwrap_or(PlanPreset::Fused).plan(graph);
                plan.validate().map(|_| plan)
            }
        };
        plan.map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Cluster settings; `precision` is the command's default when unset.
    pub fn cluster(&self, precision: Precision) -> Result<ClusterSpec, CliError> {
        let p = &self.plan;
        let seed = self.run.seed.unwrap_or(0);
        let reduction = match p.reduction.unwrap_or(ReductionName::Tree) {
            ReductionName::Ring => ReductionStrategy::Ring,
            ReductionName::Tree => ReductionStrategy::Tree,
            ReductionName::PermutedAtomic => ReductionStrategy::PermutedAtomic { seed },
        };
        let spec = ClusterSpec::new(p.n_blocks.unwrap_or(4))
            .with_reduction(reduction)
            .with_precision(p.precision.unwrap_or(precision))
            .with_seed(seed);
        spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(spec)
    }

    pub fn seq_lens(&self) -> Vec<usize> {
        self.run.seq_lens.clone().unwrap_or_else(|| DEFAULT_SWEEP.to_vec())
    }
}
