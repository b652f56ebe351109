//! Analytical decode cost model.
//!
//! A decode step is priced as bytes moved per kernel over an effective
//! bandwidth, plus fixed per-launch, per-descriptor and per-graph-replay
//! overheads. The free parameters are fitted to measured TPOT tables.

mod ablate;
mod calibrate;
mod flops;
mod measure;
mod nnls;
mod tables;

pub use ablate::{ablate, AblationReport, AblationRow, UNIT_NOTE};
pub use calibrate::{calibrate, design_row, shipped_calibration, Calibration, FitRow, Param};
pub use flops::{calibrate_prompt_len, flops, per_token_flops, FlopCount, DEFAULT_PROMPT_LEN};
pub use measure::{parse_measurements, Measurement, Variant, SHIPPED_MEASUREMENTS};
pub use nnls::nnls;
pub use tables::{
    ablation_table, calibration_table, component_table, flops_table, throughput_table, tpot_table, DEFAULT_SWEEP,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::ELEM_BYTES;
use crate::neox::ModelConfig;
use crate::plan::{FusionPlan, Kernel, KernelClass, Operator};
use crate::{Error, Result};

/// Device parameters. Times are seconds, bandwidth bytes per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareModel {
    pub bandwidth: f64,
    #[serde(default)]
    pub launch_overhead: f64,
    /// Per layer, per descriptor-using kernel, per step outside graph mode.
    #[serde(default)]
    pub descriptor_cost: f64,
    #[serde(default)]
    pub graph_replay_overhead: f64,
    /// Achieved fraction of `bandwidth`; missing classes count as 1.
    #[serde(default)]
    pub efficiency: BTreeMap<KernelClass, f64>,
}

impl Default for HardwareModel {
    fn default() -> Self {
        HardwareModel::ideal(1.8e12)
    }
}

impl HardwareModel {
    /// Full efficiency, no fixed overheads.
    pub fn ideal(bandwidth: f64) -> Self {
        HardwareModel {
            bandwidth,
            launch_overhead: 0.0,
            descriptor_cost: 0.0,
            graph_replay_overhead: 0.0,
            efficiency: KernelClass::ALL.iter().map(|&c| (c, 1.0)).collect(),
        }
    }

    pub fn efficiency(&self, class: KernelClass) -> f64 {
        self.efficiency.get(&class).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        for (name, v) in [
            ("launch_overhead", self.launch_overhead),
            ("descriptor_cost", self.descriptor_cost),
            ("graph_replay_overhead", self.graph_replay_overhead),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (c, &e) in &self.efficiency {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::Config(format!("efficiency[{}] = {e} outside (0, 1]", c.name())));
            }
        }
        Ok(())
    }
}

/// Per-step off-chip bytes of one kernel, summed over layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTraffic {
    pub name: String,
    pub class: KernelClass,
    pub bytes: f64,
    pub onchip_bytes: f64,
}

fn kernel_traffic(k: &Kernel, cfg: &ModelConfig, kv_len: f64) -> KernelTraffic {
    let e = k.traffic(cfg, kv_len);
    let scale = (cfg.n_layers * ELEM_BYTES) as f64;
    KernelTraffic {
        name: k.name(),
        class: k.class,
        bytes: e.offchip() * scale,
        onchip_bytes: e.onchip as f64 * scale,
    }
}

/// Per-kernel bytes of one decode step over a KV cache of `seq_len` positions.
pub fn traffic(plan: &FusionPlan, cfg: &ModelConfig, seq_len: usize) -> Result<Vec<KernelTraffic>> {
    traffic_at(plan, cfg, seq_len as f64)
}

/// [`traffic`] at a fractional (averaged) KV length.
pub fn traffic_at(plan: &FusionPlan, cfg: &ModelConfig, kv_len: f64) -> Result<Vec<KernelTraffic>> {
    plan.validate()?;
    Ok(plan.kernels.iter().map(|k| kernel_traffic(k, cfg, kv_len)).collect())
}

/// Bytes that fusing `op` into its successor keeps on chip, over all layers.
pub fn boundary_bytes(cfg: &ModelConfig, op: Operator) -> f64 {
    (2 * op.output_elems(cfg) * cfg.n_layers * ELEM_BYTES) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCost {
    pub name: String,
    pub class: KernelClass,
    pub bytes: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub kernels: Vec<KernelCost>,
    pub compute_s: f64,
    pub launch_s: f64,
    pub descriptor_s: f64,
    pub graph_s: f64,
    pub tpot_s: f64,
    /// Tokens per second at batch 1.
    pub throughput: f64,
    /// Decode FLOPs of this step.
    pub flops: f64,
}

impl CostReport {
    pub fn overhead_s(&self) -> f64 {
        self.launch_s + self.descriptor_s + self.graph_s
    }

    pub fn bytes(&self) -> f64 {
        self.kernels.iter().map(|k| k.bytes).sum()
    }
}

/// Predicted time of one decode step at KV length `seq_len`.
pub fn step_time(plan: &FusionPlan, cfg: &ModelConfig, hw: &HardwareModel, seq_len: usize) -> Result<CostReport> {
    step_time_at(plan, cfg, hw, seq_len as f64)
}

pub fn step_time_at(plan: &FusionPlan, cfg: &ModelConfig, hw: &HardwareModel, kv_len: f64) -> Result<CostReport> {
    hw.validate()?;
    let kernels: Vec<KernelCost> = traffic_at(plan, cfg, kv_len)?
        .into_iter()
        .map(|t| KernelCost {
            seconds: t.bytes / (hw.bandwidth * hw.efficiency(t.class)),
            name: t.name,
            class: t.class,
            bytes: t.bytes,
        })
        .collect();
    let layers = cfg.n_layers as f64;
    let compute_s = kernels.iter().map(|k| k.seconds).sum();
    let launch_s = (plan.kernel_count() as f64) * layers * hw.launch_overhead;
    let (descriptor_s, graph_s) = if plan.graph_mode {
        (0.0, hw.graph_replay_overhead)
    } else {
        let custom = plan.kernels.iter().filter(|k| k.class.uses_descriptors()).count();
        (custom as f64 * layers * hw.descriptor_cost, 0.0)
    };
    let tpot_s = compute_s + launch_s + descriptor_s + graph_s;
    Ok(CostReport {
        kernels,
        compute_s,
        launch_s,
        descriptor_s,
        graph_s,
        tpot_s,
        throughput: 1.0 / tpot_s,
        flops: per_token_flops(cfg, kv_len),
    })
}

/// Mean KV length over a run of `decode_tokens` steps after a prompt.
pub fn mean_kv_len(prompt_len: usize, decode_tokens: usize) -> f64 {
    prompt_len as f64 + (decode_tokens.max(1) - 1) as f64 / 2.0
}

/// Average TPOT over a run. Step time is affine in the KV length, so this is
/// the step time at the mean length.
pub fn run_tpot(plan: &FusionPlan, cfg: &ModelConfig, hw: &HardwareModel, decode_tokens: usize) -> Result<f64> {
    Ok(step_time_at(plan, cfg, hw, mean_kv_len(DEFAULT_PROMPT_LEN, decode_tokens))?.tpot_s)
}
