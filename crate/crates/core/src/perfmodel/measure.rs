use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::plan::{FusionPlan, PlanPreset};
use crate::{Error, Result};

/// Measured decode TPOT for pythia-2.8b on the reference GPU.
pub const SHIPPED_MEASUREMENTS: &str = include_str!("../../data/pythia_2_8b_tpot.csv");

/// A measured configuration and the plan that models it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Hf,
    Cf,
    CfGraph,
    AttentionOnly,
    MlpDownOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Hf,
        Variant::Cf,
        Variant::CfGraph,
        Variant::AttentionOnly,
        Variant::MlpDownOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hf => "hf",
            Variant::Cf => "cf",
            Variant::CfGraph => "cf_graph",
            Variant::AttentionOnly => "attention_only",
            Variant::MlpDownOnly => "mlp_down_only",
        }
    }

    pub fn preset(self) -> PlanPreset {
        match self {
            Variant::Hf => PlanPreset::Baseline,
            Variant::Cf | Variant::CfGraph => PlanPreset::Fused,
            Variant::AttentionOnly => PlanPreset::AttentionOnly,
            Variant::MlpDownOnly => PlanPreset::MlpDownOnly,
        }
    }

    pub fn plan(self) -> FusionPlan {
        self.preset().plan(self == Variant::CfGraph)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            format!("unknown variant {s:?} (expected one of {})", names.join(", "))
        })
    }
}

/// One row: average TPOT over a run of `seq_len` decode tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub seq_len: usize,
    pub tpot_ms: f64,
    pub variant: Variant,
}

const COLUMNS: [&str; 3] = ["seq_len", "tpot_ms", "variant"];

/// Parses a `seq_len,tpot_ms,variant` CSV. Errors name the data row (1-based)
/// and the offending column.
pub fn parse_measurements(text: &str) -> Result<Vec<Measurement>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Measurement {
            row: 0,
            msg: e.to_string(),
        })?
        .clone();
    let mut index = [0; 3];
    for (slot, col) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::Measurement {
                row: 0,
                msg: format!(
                    "missing column {col:?} in header {:?}",
                    headers.iter().collect::<Vec<_>>()
                ),
            })?;
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Measurement {
            row,
            msg: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str> {
            rec.get(index[c]).ok_or_else(|| Error::Measurement {
                row,
                msg: format!("missing column {:?}", COLUMNS[c]),
            })
        };
        let bad = |c: usize, v: &str, why: String| Error::Measurement {
            row,
            msg: format!("column {:?}: {v:?}: {why}", COLUMNS[c]),
        };
        let s = field(0)?;
        let seq_len: usize = s
            .parse()
            .map_err(|e: std::num::ParseIntError| bad(0, s, e.to_string()))?;
        let s = field(1)?;
        let tpot_ms: f64 = s
            .parse()
            .map_err(|e: std::num::ParseFloatError| bad(1, s, e.to_string()))?;
        if !(tpot_ms > 0.0 && tpot_ms.is_finite()) {
            return Err(bad(1, s, "must be positive".into()));
        }
        let s = field(2)?;
        let variant: Variant = s.parse().map_err(|e| bad(2, s, e))?;
        out.push(Measurement {
            seq_len,
            tpot_ms,
            variant,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_table_parses() {
        let rows = parse_measurements(SHIPPED_MEASUREMENTS).unwrap();
        assert_eq!(rows.len(), 40);
        for v in Variant::ALL {
            assert_eq!(rows.iter().filter(|r| r.variant == v).count(), 8);
        }
    }

    #[test]
    fn diagnostics_name_row_and_column() {
        let err = parse_measurements("seq_len,tpot_ms,variant\n16,5.0,hf\n32,abc,hf\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("tpot_ms"), "{msg}");

        let err = parse_measurements("seq_len,variant\n16,hf\n").unwrap_err();
        assert!(err.to_string().contains("missing column \"tpot_ms\""));

        let err = parse_measurements("seq_len,tpot_ms,variant\n16,5.0,vllm\n").unwrap_err();
        assert!(err.to_string().contains("variant"));
    }
}
