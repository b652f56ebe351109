//! Assignment of the block's operators to kernels.
//!
//! A plan cuts the seven-operator pipeline into contiguous kernels. Each cut
//! forces the tensor crossing it through off-chip memory; everything inside a
//! kernel stays on chip. The accounting rules here are shared by the
//! simulator (which tallies the tensors it actually moves) and the analytic
//! cost model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::neox::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    PreLn,
    QkvRope,
    Attend,
    OutProj,
    PostLn,
    MlpUpGelu,
    MlpDown,
}

impl Operator {
    pub const PIPELINE: [Operator; 7] = [
        Operator::PreLn,
        Operator::QkvRope,
        Operator::Attend,
        Operator::OutProj,
        Operator::PostLn,
        Operator::MlpUpGelu,
        Operator::MlpDown,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::PreLn => "pre_ln",
            Operator::QkvRope => "qkv_rope",
            Operator::Attend => "attend",
            Operator::OutProj => "out_proj",
            Operator::PostLn => "post_ln",
            Operator::MlpUpGelu => "mlp_up_gelu",
            Operator::MlpDown => "mlp_down",
        }
    }

    /// Elements of the activation this operator hands to the next one.
    pub fn output_elems(self, cfg: &ModelConfig) -> usize {
        match self {
            Operator::QkvRope => 3 * cfg.hidden,
            Operator::MlpUpGelu => cfg.d_mlp,
            _ => cfg.hidden,
        }
    }

    /// Elements of the activation this operator receives. The first
    /// operator reads the block input.
    pub fn input_elems(self, cfg: &ModelConfig) -> usize {
        match self.index() {
            0 => cfg.hidden,
            i => Operator::PIPELINE[i - 1].output_elems(cfg),
        }
    }

    /// Parameter count (weights and biases).
    pub fn weight_elems(self, cfg: &ModelConfig) -> usize {
        let (h, m) = (cfg.hidden, cfg.d_mlp);
        match self {
            Operator::PreLn | Operator::PostLn => 2 * h,
            Operator::QkvRope => 3 * h * h + 3 * h,
            Operator::Attend => 0,
            Operator::OutProj => h * h + h,
            Operator::MlpUpGelu => m * h + m,
            Operator::MlpDown => h * m + h,
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Execution class of a kernel; selects its bandwidth efficiency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelClass {
    /// Vendor-library GEMM / elementwise kernels.
    LibraryGemm,
    /// Framework attention over the KV cache.
    LibraryAttention,
    /// Cluster-cooperative fused kernel.
    FusedCluster,
    /// Hand-written MLP down-projection running on its own.
    MlpDownStandalone,
}

impl KernelClass {
    pub const ALL: [KernelClass; 4] = [
        KernelClass::LibraryGemm,
        KernelClass::LibraryAttention,
        KernelClass::FusedCluster,
        KernelClass::MlpDownStandalone,
    ];

    /// Custom kernels build TMA descriptors each step unless replayed from a graph.
    pub fn uses_descriptors(self) -> bool {
        matches!(self, KernelClass::FusedCluster | KernelClass::MlpDownStandalone)
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelClass::LibraryGemm => "library_gemm",
            KernelClass::LibraryAttention => "library_attention",
            KernelClass::FusedCluster => "fused_cluster",
            KernelClass::MlpDownStandalone => "mlp_down_standalone",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kernel {
    pub ops: Vec<Operator>,
    pub class: KernelClass,
}

impl Kernel {
    pub fn new(ops: Vec<Operator>, class: KernelClass) -> Self {
        Kernel { ops, class }
    }

    /// Library kernels for singletons, the fused class otherwise.
    pub fn auto(ops: Vec<Operator>) -> Self {
        let class = match ops.as_slice() {
            [Operator::Attend] => KernelClass::LibraryAttention,
            [_] => KernelClass::LibraryGemm,
            _ => KernelClass::FusedCluster,
        };
        Kernel { ops, class }
    }

    pub fn name(&self) -> String {
        if self.ops.len() == Operator::PIPELINE.len() {
            return "fused_block".into();
        }
        self.ops.iter().map(|o| o.name()).collect::<Vec<_>>().join("+")
    }

    pub fn first(&self) -> Operator {
        self.ops[0]
    }

    pub fn last(&self) -> Operator {
        self.ops[self.ops.len() - 1]
    }

    pub fn contains(&self, op: Operator) -> bool {
        self.ops.contains(&op)
    }

    /// Per-layer traffic of this kernel under the boundary rules, in elements.
    pub fn traffic(&self, cfg: &ModelConfig, seq_len: f64) -> KernelElems {
        let activation = self.first().input_elems(cfg) + self.last().output_elems(cfg);
        let weights = self.ops.iter().map(|o| o.weight_elems(cfg)).sum();
        let mut kv = 0.0;
        if self.contains(Operator::QkvRope) {
            kv += (2 * cfg.hidden) as f64;
        }
        if self.contains(Operator::Attend) {
            kv += 2.0 * seq_len * cfg.hidden as f64;
        }
        let onchip = self.ops[..self.ops.len() - 1]
            .iter()
            .map(|o| 2 * o.output_elems(cfg))
            .sum();
        KernelElems {
            activation,
            weights,
            kv,
            onchip,
        }
    }
}

/// Per-layer element counts for one kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelElems {
    /// Boundary activations: the kernel's input read plus its output written.
    pub activation: usize,
    pub weights: usize,
    /// KV-cache append plus KV-cache read.
    pub kv: f64,
    /// Interior intermediates, written and read on chip.
    pub onchip: usize,
}

impl KernelElems {
    pub fn offchip(&self) -> f64 {
        (self.activation + self.weights) as f64 + self.kv
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub kernels: Vec<Kernel>,
    #[serde(default)]
    pub graph_mode: bool,
}

/// The four configurations of the decode ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanPreset {
    /// Every operator its own library kernel.
    Baseline,
    /// One fused kernel through the MLP up-projection, library MLP down.
    AttentionOnly,
    /// Library kernels with a standalone custom MLP down-projection.
    MlpDownOnly,
    /// The whole block in one kernel.
    Fused,
}

impl PlanPreset {
    pub const ALL: [PlanPreset; 4] = [
        PlanPreset::Baseline,
        PlanPreset::AttentionOnly,
        PlanPreset::MlpDownOnly,
        PlanPreset::Fused,
    ];

    pub fn plan(self, graph_mode: bool) -> FusionPlan {
        let p = &Operator::PIPELINE;
        let kernels = match self {
            PlanPreset::Baseline => p.iter().map(|&o| Kernel::auto(vec![o])).collect(),
            PlanPreset::AttentionOnly => vec![
                Kernel::new(p[..6].to_vec(), KernelClass::FusedCluster),
                Kernel::new(vec![Operator::MlpDown], KernelClass::LibraryGemm),
            ],
            PlanPreset::MlpDownOnly => p[..6]
                .iter()
                .map(|&o| Kernel::auto(vec![o]))
                .chain([Kernel::new(vec![Operator::MlpDown], KernelClass::MlpDownStandalone)])
                .collect(),
            PlanPreset::Fused => vec![Kernel::new(p.to_vec(), KernelClass::FusedCluster)],
        };
        FusionPlan { kernels, graph_mode }
    }

    pub fn name(self) -> &'static str {
        match self {
            PlanPreset::Baseline => "baseline",
            PlanPreset::AttentionOnly => "attention_only",
            PlanPreset::MlpDownOnly => "mlp_down_only",
            PlanPreset::Fused => "fused",
        }
    }
}

impl FromStr for PlanPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlanPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Plan(format!("unknown plan {s:?}")))
    }
}

impl FusionPlan {
    pub fn fused(graph_mode: bool) -> Self {
        PlanPreset::Fused.plan(graph_mode)
    }

    /// Seven single-operator library kernels.
    pub fn singletons() -> Self {
        PlanPreset::Baseline.plan(false)
    }

    /// Builds a plan from operator groups with [`Kernel::auto`] classes.
    pub fn from_groups(groups: Vec<Vec<Operator>>, graph_mode: bool) -> Result<Self> {
        let plan = FusionPlan {
            kernels: groups.into_iter().map(Kernel::auto).collect(),
            graph_mode,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Every operator in exactly one kernel, kernels contiguous and in
    /// pipeline order.
    pub fn validate(&self) -> Result<()> {
        let mut seen = [0usize; 7];
        for k in &self.kernels {
            if k.ops.is_empty() {
                return Err(Error::Plan("empty kernel".into()));
            }
            for op in &k.ops {
                seen[op.index()] += 1;
            }
        }
        if let Some((i, _)) = seen.iter().enumerate().find(|(_, &c)| c != 1) {
            return Err(Error::Plan(format!(
                "operator unassigned/duplicated: {}",
                Operator::PIPELINE[i]
            )));
        }
        let order: Vec<Operator> = self.kernels.iter().flat_map(|k| k.ops.iter().copied()).collect();
        if order != Operator::PIPELINE {
            return Err(Error::Plan(format!(
                "kernels must cover the pipeline in order, got {}",
                order.iter().map(|o| o.name()).collect::<Vec<_>>().join(",")
            )));
        }
        Ok(())
    }

    pub fn kernel_count(&self) -> usize {
        self.kernels.len()
    }

    /// Kernel `i` and `i + 1` fused into one cluster kernel.
    pub fn merge_adjacent(&self, i: usize) -> Result<Self> {
        if i + 1 >= self.kernels.len() {
            return Err(Error::Plan(format!("no kernel after index {i}")));
        }
        let mut kernels = self.kernels.clone();
        let next = kernels.remove(i + 1);
        kernels[i].ops.extend(next.ops);
        kernels[i].class = KernelClass::FusedCluster;
        Ok(FusionPlan {
            kernels,
            graph_mode: self.graph_mode,
        })
    }

    /// Kernel index owning each operator.
    pub fn owner(&self, op: Operator) -> usize {
        self.kernels
            .iter()
            .position(|k| k.contains(op))
            .expect("validated plan covers every operator")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for p in PlanPreset::ALL {
            p.plan(false).validate().unwrap();
            assert_eq!(p.name().parse::<PlanPreset>().unwrap(), p);
        }
        assert_eq!(FusionPlan::fused(true).kernel_count(), 1);
        assert_eq!(FusionPlan::singletons().kernel_count(), 7);
    }

    #[test]
    fn rejects_missing_and_duplicate_ops() {
        use Operator::*;
        let missing = FusionPlan::from_groups(vec![vec![PreLn, QkvRope, Attend]], false);
        assert!(missing
            .unwrap_err()
            .to_string()
            .contains("operator unassigned/duplicated"));
        let mut groups: Vec<Vec<Operator>> = Operator::PIPELINE.iter().map(|&o| vec![o]).collect();
        groups.push(vec![Attend]);
        assert!(FusionPlan::from_groups(groups, false).is_err());
        let out_of_order = vec![
            vec![PreLn, Attend],
            vec![QkvRope],
            vec![OutProj, PostLn, MlpUpGelu, MlpDown],
        ];
        assert!(FusionPlan::from_groups(out_of_order, false).is_err());
    }

    #[test]
    fn merge_adjacent_all_the_way() {
        let mut plan = FusionPlan::singletons();
        while plan.kernel_count() > 1 {
            plan = plan.merge_adjacent(0).unwrap();
            plan.validate().unwrap();
        }
        assert_eq!(plan.kernels[0].ops, Operator::PIPELINE);
        assert!(plan.merge_adjacent(0).is_err());
    }

    #[test]
    fn fused_kernel_accounting() {
        let cfg = ModelConfig::tiny();
        let t = FusionPlan::fused(false).kernels[0].traffic(&cfg, 5.0);
        // Reads x, writes the block output.
        assert_eq!(t.activation, 2 * cfg.hidden);
        assert_eq!(t.kv, (2 * cfg.hidden + 2 * 5 * cfg.hidden) as f64);
        let h = cfg.hidden;
        assert_eq!(t.onchip, 2 * (h + 3 * h + h + h + h + cfg.d_mlp));
    }
}
