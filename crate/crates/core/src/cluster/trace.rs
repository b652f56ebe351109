use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Data movement of one simulated kernel launch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub name: String,
    pub bytes_offchip: u64,
    pub bytes_onchip: u64,
    pub sync_steps: u64,
    #[serde(default)]
    pub dsmem_exchanges: u64,
}

/// Totals over the kernels of one decode step, plus the per-kernel records.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecTrace {
    pub sync_steps: u64,
    pub dsmem_exchanges: u64,
    pub bytes_offchip: u64,
    pub bytes_onchip: u64,
    pub kernel_count: usize,
    pub kernels: Vec<KernelRecord>,
}

impl ExecTrace {
    pub fn from_records(kernels: Vec<KernelRecord>) -> Self {
        ExecTrace {
            sync_steps: kernels.iter().map(|k| k.sync_steps).sum(),
            dsmem_exchanges: kernels.iter().map(|k| k.dsmem_exchanges).sum(),
            bytes_offchip: kernels.iter().map(|k| k.bytes_offchip).sum(),
            bytes_onchip: kernels.iter().map(|k| k.bytes_onchip).sum(),
            kernel_count: kernels.len(),
            kernels,
        }
    }

    /// Appends another step's kernels.
    pub fn extend(&mut self, other: ExecTrace) {
        let mut all = std::mem::take(&mut self.kernels);
        all.extend(other.kernels);
        *self = ExecTrace::from_records(all);
    }

    /// One JSON object per kernel, newline separated.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for k in &self.kernels {
            serde_json::to_writer(&mut out, k)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut kernels = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<trace>", e))?;
            if !line.trim().is_empty() {
                kernels.push(serde_json::from_str(&line)?);
            }
        }
        Ok(ExecTrace::from_records(kernels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let t = ExecTrace::from_records(vec![
            KernelRecord {
                name: "fused_block".into(),
                bytes_offchip: 10,
                bytes_onchip: 4,
                sync_steps: 2,
                dsmem_exchanges: 3,
            },
            KernelRecord {
                name: "mlp_down".into(),
                bytes_offchip: 7,
                bytes_onchip: 0,
                sync_steps: 0,
                dsmem_exchanges: 0,
            },
        ]);
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(ExecTrace::read_jsonl(text.as_bytes()).unwrap(), t);
        assert_eq!(t.bytes_offchip, 17);
        assert_eq!(t.kernel_count, 2);
    }
}
