use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::measure::{parse_measurements, Measurement, Variant, SHIPPED_MEASUREMENTS};
use super::nnls::nnls;
use super::{mean_kv_len, traffic_at, HardwareModel, DEFAULT_PROMPT_LEN};
use crate::neox::ModelConfig;
use crate::plan::{FusionPlan, KernelClass};
use crate::{Error, Result};

/// A fittable hardware parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    Efficiency(KernelClass),
    LaunchOverhead,
    DescriptorCost,
    GraphReplayOverhead,
}

const N_PARAMS: usize = 7;

impl Param {
    pub const ALL: [Param; N_PARAMS] = [
        Param::Efficiency(KernelClass::LibraryGemm),
        Param::Efficiency(KernelClass::LibraryAttention),
        Param::Efficiency(KernelClass::FusedCluster),
        Param::Efficiency(KernelClass::MlpDownStandalone),
        Param::LaunchOverhead,
        Param::DescriptorCost,
        Param::GraphReplayOverhead,
    ];

    fn index(self) -> usize {
        Param::ALL.iter().position(|&p| p == self).expect("listed")
    }

    pub fn name(self) -> String {
        match self {
            Param::Efficiency(c) => format!("efficiency.{}", c.name()),
            Param::LaunchOverhead => "launch_overhead".into(),
            Param::DescriptorCost => "descriptor_cost".into(),
            Param::GraphReplayOverhead => "graph_replay_overhead".into(),
        }
    }

    /// A largest set of parameters the given rows pin down jointly. When the
    /// rows cannot separate every parameter, library GEMM efficiency is the
    /// first to be held at its base value, then the rest in reverse of
    /// [`Param::ALL`] order.
    pub fn identifiable(cfg: &ModelConfig, bandwidth: f64, rows: &[Measurement]) -> Vec<Param> {
        let design: Vec<[f64; N_PARAMS]> = rows
            .iter()
            .map(|m| {
                design_row(
                    &m.variant.plan(),
                    cfg,
                    bandwidth,
                    mean_kv_len(DEFAULT_PROMPT_LEN, m.seq_len),
                )
            })
            .collect();
        let mut priority = Param::ALL.to_vec();
        priority.rotate_left(1);
        let mut chosen: Vec<Param> = Vec::new();
        for p in priority {
            let mut trial = chosen.clone();
            trial.push(p);
            if full_column_rank(&design, &trial) {
                chosen = trial;
            }
        }
        chosen.sort();
        chosen
    }

    // Fitted in the reciprocal for efficiencies, which keeps TPOT linear.
    fn lower_bound(self) -> f64 {
        match self {
            Param::Efficiency(_) => 1.0,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Param {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Param::ALL
            .into_iter()
            .find(|p| p.name() == s || matches!(p, Param::Efficiency(c) if c.name() == s))
            .ok_or_else(|| Error::Config(format!("unknown hardware parameter {s:?}")))
    }
}

/// TPOT coefficients of one plan at one KV length: per-class seconds at full
/// efficiency, launch count, descriptor count, replay count.
pub fn design_row(plan: &FusionPlan, cfg: &ModelConfig, bandwidth: f64, kv_len: f64) -> [f64; N_PARAMS] {
    let mut row = [0.0; N_PARAMS];
    for t in traffic_at(plan, cfg, kv_len).expect("preset plans are valid") {
        row[Param::Efficiency(t.class).index()] += t.bytes / bandwidth;
    }
    let layers = cfg.n_layers as f64;
    row[Param::LaunchOverhead.index()] = plan.kernel_count() as f64 * layers;
    if plan.graph_mode {
        row[Param::GraphReplayOverhead.index()] = 1.0;
    } else {
        let custom = plan.kernels.iter().filter(|k| k.class.uses_descriptors()).count();
        row[Param::DescriptorCost.index()] = custom as f64 * layers;
    }
    row
}

/// Rank test on the columns of `params`, each scaled to unit norm.
fn full_column_rank(design: &[[f64; N_PARAMS]], params: &[Param]) -> bool {
    let mut a = DMatrix::from_fn(design.len(), params.len(), |i, j| design[i][params[j].index()]);
    for mut col in a.column_iter_mut() {
        let norm = col.norm();
        if norm == 0.0 {
            return false;
        }
        col /= norm;
    }
    if a.nrows() < a.ncols() {
        return false;
    }
    let sv = a.svd(false, false).singular_values;
    sv.iter().filter(|&&s| s > RANK_TOL * sv.max()).count() == params.len()
}

const RANK_TOL: f64 = 1e-9;

fn theta(hw: &HardwareModel) -> [f64; N_PARAMS] {
    let mut t = [0.0; N_PARAMS];
    for p in Param::ALL {
        t[p.index()] = match p {
            Param::Efficiency(c) => 1.0 / hw.efficiency(c),
            Param::LaunchOverhead => hw.launch_overhead,
            Param::DescriptorCost => hw.descriptor_cost,
            Param::GraphReplayOverhead => hw.graph_replay_overhead,
        };
    }
    t
}

fn with_theta(base: &HardwareModel, t: &[f64; N_PARAMS]) -> HardwareModel {
    let mut hw = base.clone();
    for p in Param::ALL {
        let v = t[p.index()];
        match p {
            Param::Efficiency(c) => {
                hw.efficiency.insert(c, 1.0 / v);
            }
            Param::LaunchOverhead => hw.launch_overhead = v,
            Param::DescriptorCost => hw.descriptor_cost = v,
            Param::GraphReplayOverhead => hw.graph_replay_overhead = v,
        }
    }
    hw
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub variant: Variant,
    pub seq_len: usize,
    pub measured_ms: f64,
    pub predicted_ms: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub hw: HardwareModel,
    pub free: Vec<Param>,
    pub rows: Vec<FitRow>,
}

impl Calibration {
    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_error.abs()).fold(0.0, f64::max)
    }

    pub fn max_rel_error_for(&self, variant: Variant) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.rel_error.abs())
            .reduce(f64::max)
    }
}

/// Fits the `free` parameters of `base` to measured run-average TPOTs by
/// relative least squares, with efficiencies held in (0, 1] and overheads
/// non-negative. Parameters not listed keep their `base` values.
pub fn calibrate(
    cfg: &ModelConfig,
    base: &HardwareModel,
    free: &[Param],
    measured: &[Measurement],
) -> Result<Calibration> {
    base.validate()?;
    let mut free = free.to_vec();
    free.sort();
    free.dedup();
    let names = || free.iter().map(|p| p.name()).collect::<Vec<_>>().join(", ");
    if measured.len() < 2 || free.len() > measured.len() {
        return Err(Error::Underdetermined {
            free: free.len(),
            rows: measured.len(),
            names: names(),
        });
    }

    let t0 = theta(base);
    let n = measured.len();
    let mut a = DMatrix::zeros(n, free.len());
    let mut rhs = DVector::zeros(n);
    for (i, m) in measured.iter().enumerate() {
        let y = m.tpot_ms * 1e-3;
        let row = design_row(
            &m.variant.plan(),
            cfg,
            base.bandwidth,
            mean_kv_len(DEFAULT_PROMPT_LEN, m.seq_len),
        );
        // Minimise sum((row . theta - y) / y)^2 over theta = lb + phi, phi >= 0.
        let mut known = 0.0;
        for p in Param::ALL {
            let k = p.index();
            match free.iter().position(|&f| f == p) {
                Some(j) => {
                    a[(i, j)] = row[k] / y;
                    known += row[k] * p.lower_bound();
                }
                None => known += row[k] * t0[k],
            }
        }
        rhs[i] = 1.0 - known / y;
    }

    let scales: Vec<f64> = (0..free.len()).map(|j| a.column(j).norm()).collect();
    for (j, &s) in scales.iter().enumerate() {
        if s == 0.0 {
            return Err(Error::Underdetermined {
                free: free.len(),
                rows: n,
                names: format!("{}; no row depends on {}", names(), free[j]),
            });
        }
        a.column_mut(j).scale_mut(1.0 / s);
    }
    let sv = a.clone().svd(false, false).singular_values;
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * sv.max()).count();
    if rank < free.len() {
        return Err(Error::Underdetermined {
            free: free.len(),
            rows: rank,
            names: names(),
        });
    }

    let psi = nnls(&a, &rhs);
    let mut t = t0;
    for (j, p) in free.iter().enumerate() {
        t[p.index()] = p.lower_bound() + psi[j] / scales[j];
    }
    let hw = with_theta(base, &t);

    let rows = measured
        .iter()
        .map(|m| {
            let row = design_row(
                &m.variant.plan(),
                cfg,
                base.bandwidth,
                mean_kv_len(DEFAULT_PROMPT_LEN, m.seq_len),
            );
            let predicted_ms = row.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() * 1e3;
            FitRow {
                variant: m.variant,
                seq_len: m.seq_len,
                measured_ms: m.tpot_ms,
                predicted_ms,
                rel_error: predicted_ms / m.tpot_ms - 1.0,
            }
        })
        .collect();
    Ok(Calibration { hw, free, rows })
}

/// The fit of the pythia-2.8b preset to the bundled measurement table, over
/// every parameter the table identifies.
pub fn shipped_calibration() -> Result<Calibration> {
    let cfg = ModelConfig::pythia_2_8b();
    let rows = parse_measurements(SHIPPED_MEASUREMENTS)?;
    let base = HardwareModel::default();
    let free = Param::identifiable(&cfg, base.bandwidth, &rows);
    calibrate(&cfg, &base, &free, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::run_tpot;

    #[test]
    fn round_trip_synthetic() {
        let cfg = ModelConfig::pythia_2_8b();
        let mut truth = HardwareModel {
            launch_overhead: 9e-6,
            descriptor_cost: 2.5e-5,
            graph_replay_overhead: 3e-4,
            ..HardwareModel::default()
        };
        for (c, e) in KernelClass::ALL.into_iter().zip([0.9, 0.4, 0.7, 0.3]) {
            truth.efficiency.insert(c, e);
        }
        let rows: Vec<Measurement> = Variant::ALL
            .into_iter()
            .flat_map(|v| [16, 128, 1024, 2048].map(move |s| (v, s)))
            .map(|(variant, seq_len)| Measurement {
                seq_len,
                variant,
                tpot_ms: run_tpot(&variant.plan(), &cfg, &truth, seq_len).unwrap() * 1e3,
            })
            .collect();
        let fit = calibrate(&cfg, &HardwareModel::default(), &Param::ALL, &rows).unwrap();
        for p in Param::ALL {
            let (got, want) = (theta(&fit.hw)[p.index()], theta(&truth)[p.index()]);
            assert!((got / want - 1.0).abs() < 1e-6, "{p}: {got} vs {want}");
        }
        assert!(fit.max_rel_error() < 1e-9);
    }

    #[test]
    fn single_row_is_underdetermined() {
        let cfg = ModelConfig::pythia_2_8b();
        let rows = [Measurement {
            seq_len: 16,
            tpot_ms: 5.0,
            variant: Variant::Hf,
        }];
        let err = calibrate(
            &cfg,
            &HardwareModel::default(),
            &[Param::LaunchOverhead, Param::Efficiency(KernelClass::LibraryGemm)],
            &rows,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("2 free parameters") && msg.contains("launch_overhead"),
            "{msg}"
        );
    }

    #[test]
    fn unobserved_parameter_is_rejected() {
        let cfg = ModelConfig::pythia_2_8b();
        let rows: Vec<Measurement> = [16, 32, 64]
            .map(|s| Measurement {
                seq_len: s,
                tpot_ms: 5.0 + s as f64 * 1e-3,
                variant: Variant::Hf,
            })
            .to_vec();
        assert!(calibrate(&cfg, &HardwareModel::default(), &[Param::GraphReplayOverhead], &rows).is_err());
        let ok = Param::identifiable(&cfg, 1.8e12, &rows);
        assert!(!ok.contains(&Param::GraphReplayOverhead));
    }

    #[test]
    fn param_names_parse() {
        for p in Param::ALL {
            assert_eq!(p.name().parse::<Param>().unwrap(), p);
        }
        assert_eq!(
            "fused_cluster".parse::<Param>().unwrap(),
            Param::Efficiency(KernelClass::FusedCluster)
        );
    }
}
