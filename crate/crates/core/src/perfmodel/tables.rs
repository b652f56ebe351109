//! Model predictions laid out like the measured appendix tables.

use super::{flops, run_tpot, AblationReport, Calibration, HardwareModel};
use crate::neox::ModelConfig;
use crate::plan::PlanPreset;
use crate::table::{Table, Value};
use crate::Result;

pub const DEFAULT_SWEEP: [usize; 8] = [16, 32, 64, 128, 256, 512, 1024, 2048];

struct Trio {
    hf: f64,
    cf: f64,
    graph: f64,
}

fn trio(cfg: &ModelConfig, hw: &HardwareModel, n: usize) -> Result<Trio> {
    Ok(Trio {
        hf: run_tpot(&PlanPreset::Baseline.plan(false), cfg, hw, n)?,
        cf: run_tpot(&PlanPreset::Fused.plan(false), cfg, hw, n)?,
        graph: run_tpot(&PlanPreset::Fused.plan(true), cfg, hw, n)?,
    })
}

/// decode_tokens, hf_ms, cf_ms, cf_graph_ms, cf_speedup, graph_speedup
pub fn tpot_table(cfg: &ModelConfig, hw: &HardwareModel, sweep: &[usize]) -> Result<Table> {
    let mut t = Table::new(&[
        "decode_tokens",
        "hf_ms",
        "cf_ms",
        "cf_graph_ms",
        "cf_speedup",
        "graph_speedup",
    ]);
    for &n in sweep {
        let r = trio(cfg, hw, n)?;
        t.push(vec![
            n.into(),
            Value::num(r.hf * 1e3, 3),
            Value::num(r.cf * 1e3, 3),
            Value::num(r.graph * 1e3, 3),
            Value::num(r.hf / r.cf, 3),
            Value::num(r.hf / r.graph, 3),
        ]);
    }
    Ok(t)
}

/// decode_tokens, hf, cf, cf_graph (tokens/s), cf_speedup, graph_speedup
pub fn throughput_table(cfg: &ModelConfig, hw: &HardwareModel, sweep: &[usize]) -> Result<Table> {
    let mut t = Table::new(&["decode_tokens", "hf", "cf", "cf_graph", "cf_speedup", "graph_speedup"]);
    for &n in sweep {
        let r = trio(cfg, hw, n)?;
        t.push(vec![
            n.into(),
            Value::num(1.0 / r.hf, 2),
            Value::num(1.0 / r.cf, 2),
            Value::num(1.0 / r.graph, 2),
            Value::num(r.hf / r.cf, 3),
            Value::num(r.hf / r.graph, 3),
        ]);
    }
    Ok(t)
}

/// decode_tokens, prefill_gflops, decode_gflops, total_gflops, tflops_per_s.
/// The rate divides total work by the predicted graph-mode decode time.
pub fn flops_table(cfg: &ModelConfig, hw: &HardwareModel, prompt_len: usize, sweep: &[usize]) -> Result<Table> {
    let mut t = Table::new(&[
        "decode_tokens",
        "prefill_gflops",
        "decode_gflops",
        "total_gflops",
        "tflops_per_s",
    ]);
    for &n in sweep {
        let f = flops(cfg, prompt_len, n);
        let seconds = n as f64 * run_tpot(&PlanPreset::Fused.plan(true), cfg, hw, n)?;
        t.push(vec![
            n.into(),
            Value::num(f.prefill / 1e9, 2),
            Value::num(f.decode / 1e9, 2),
            Value::num(f.total() / 1e9, 2),
            Value::num(f.total() / seconds / 1e12, 2),
        ]);
    }
    Ok(t)
}

/// tokens, cf_s, pytorch_s, speedup, tpot_cf_ms, tpot_pt_ms for one partial plan.
pub fn component_table(cfg: &ModelConfig, hw: &HardwareModel, plan: PlanPreset, sweep: &[usize]) -> Result<Table> {
    let mut t = Table::new(&["tokens", "cf_s", "pytorch_s", "speedup", "tpot_cf_ms", "tpot_pt_ms"]);
    for &n in sweep {
        let cf = run_tpot(&plan.plan(false), cfg, hw, n)?;
        let pt = run_tpot(&PlanPreset::Baseline.plan(false), cfg, hw, n)?;
        t.push(vec![
            n.into(),
            Value::num(cf * n as f64, 3),
            Value::num(pt * n as f64, 3),
            Value::num(pt / cf, 3),
            Value::num(cf * 1e3, 3),
            Value::num(pt * 1e3, 3),
        ]);
    }
    Ok(t)
}

/// configuration, avg_tpot_ms, vs_baseline
pub fn ablation_table(report: &AblationReport) -> Table {
    let mut t = Table::new(&["configuration", "avg_tpot_ms", "vs_baseline"]);
    for r in &report.rows {
        t.push(vec![
            r.plan.name().into(),
            Value::num(r.tpot_ms, 3),
            Value::num(r.speedup, 3),
        ]);
    }
    t
}

/// variant, decode_tokens, measured_ms, predicted_ms, rel_error
pub fn calibration_table(cal: &Calibration) -> Table {
    let mut t = Table::new(&["variant", "decode_tokens", "measured_ms", "predicted_ms", "rel_error"]);
    for r in &cal.rows {
        t.push(vec![
            r.variant.name().into(),
            r.seq_len.into(),
            Value::num(r.measured_ms, 3),
            Value::num(r.predicted_ms, 3),
            Value::num(r.rel_error, 4),
        ]);
    }
    t
}
