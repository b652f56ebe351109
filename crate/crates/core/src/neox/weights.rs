use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::matrix::Matrix;
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Parameters of one decoder block.
///
/// `qkv_weight` uses the per-head interleaved layout: rows
/// `[h*3*d_head, (h+1)*3*d_head)` hold head `h`'s Q rows, then its K rows,
/// then its V rows. `qkv_bias` follows the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub qkv_weight: Matrix,
    pub qkv_bias: Vec<f64>,
    pub out_weight: Matrix,
    pub out_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub up_weight: Matrix,
    pub up_bias: Vec<f64>,
    pub down_weight: Matrix,
    pub down_bias: Vec<f64>,
}

/// Tensor names in manifest and synthesis order.
pub const TENSOR_NAMES: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.up.weight",
    "mlp.up.bias",
    "mlp.down.weight",
    "mlp.down.bias",
];

/// Expected shape of each tensor in [`TENSOR_NAMES`] order.
pub fn tensor_shapes(cfg: &ModelConfig) -> [Vec<usize>; 12] {
    let (h, m) = (cfg.hidden, cfg.d_mlp);
    [
        vec![h],
        vec![h],
        vec![3 * h, h],
        vec![3 * h],
        vec![h, h],
        vec![h],
        vec![h],
        vec![h],
        vec![m, h],
        vec![m],
        vec![h, m],
        vec![h],
    ]
}

impl BlockWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (h, m) = (cfg.hidden, cfg.d_mlp);
        BlockWeights {
            ln1_gain: vec![1.0; h],
            ln1_bias: vec![0.0; h],
            qkv_weight: Matrix::zeros(3 * h, h),
            qkv_bias: vec![0.0; 3 * h],
            out_weight: Matrix::zeros(h, h),
            out_bias: vec![0.0; h],
            ln2_gain: vec![1.0; h],
            ln2_bias: vec![0.0; h],
            up_weight: Matrix::zeros(m, h),
            up_bias: vec![0.0; m],
            down_weight: Matrix::zeros(h, m),
            down_bias: vec![0.0; h],
        }
    }

    /// Seeded synthetic weights.
    ///
    /// Tensor `i` of [`TENSOR_NAMES`] draws from `Stream(substream(seed, i))`
    /// in row-major order: matrices are `U(-1,1) / sqrt(cols)`, LayerNorm
    /// gains `1 + 0.1 U`, all biases `0.02 U`.
    pub fn synthetic(cfg: &ModelConfig, seed: u64) -> Self {
        let shapes = tensor_shapes(cfg);
        let mut tensors: Vec<Vec<f64>> = TENSOR_NAMES
            .iter()
            .zip(&shapes)
            .enumerate()
            .map(|(i, (name, shape))| {
                let mut s = Stream::new(rng::substream(seed, i as u64));
                let len: usize = shape.iter().product();
                if shape.len() == 2 {
                    s.signed_vec(len, 1.0 / (shape[1] as f64).sqrt())
                } else if name.ends_with("gain") {
                    (0..len).map(|_| 1.0 + 0.1 * s.next_signed()).collect()
                } else {
                    s.signed_vec(len, 0.02)
                }
            })
            .collect();
        Self::from_tensors(cfg, &mut tensors).expect("synthetic shapes are consistent")
    }

    fn from_tensors(cfg: &ModelConfig, t: &mut [Vec<f64>]) -> Result<Self> {
        let (h, m) = (cfg.hidden, cfg.d_mlp);
        let mut take = |i: usize| std::mem::take(&mut t[i]);
        let w = BlockWeights {
            ln1_gain: take(0),
            ln1_bias: take(1),
            qkv_weight: Matrix::from_vec(3 * h, h, take(2))?,
            qkv_bias: take(3),
            out_weight: Matrix::from_vec(h, h, take(4))?,
            out_bias: take(5),
            ln2_gain: take(6),
            ln2_bias: take(7),
            up_weight: Matrix::from_vec(m, h, take(8))?,
            up_bias: take(9),
            down_weight: Matrix::from_vec(h, m, take(10))?,
            down_bias: take(11),
        };
        w.validate(cfg)?;
        Ok(w)
    }

    fn tensors(&self) -> [&[f64]; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.qkv_weight.data,
            &self.qkv_bias,
            &self.out_weight.data,
            &self.out_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.up_weight.data,
            &self.up_bias,
            &self.down_weight.data,
            &self.down_bias,
        ]
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let mats = [
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.out.weight", &self.out_weight),
            ("mlp.up.weight", &self.up_weight),
            ("mlp.down.weight", &self.down_weight),
        ];
        for (name, m) in mats {
            if m.data.len() != m.rows * m.cols {
                return Err(Error::shape(format!("{name}: storage does not match shape")));
            }
        }
        for ((name, shape), data) in TENSOR_NAMES.iter().zip(tensor_shapes(cfg)).zip(self.tensors()) {
            let want: usize = shape.iter().product();
            if data.len() != want {
                return Err(Error::shape(format!(
                    "{name}: {} values, expected shape {shape:?}",
                    data.len()
                )));
            }
        }
        let shaped = [
            (&self.qkv_weight, 3 * cfg.hidden, cfg.hidden),
            (&self.out_weight, cfg.hidden, cfg.hidden),
            (&self.up_weight, cfg.d_mlp, cfg.hidden),
            (&self.down_weight, cfg.hidden, cfg.d_mlp),
        ];
        for ((name, _), (m, r, c)) in mats.iter().zip(shaped) {
            if (m.rows, m.cols) != (r, c) {
                return Err(Error::shape(format!("{name}: {}x{}, expected {r}x{c}", m.rows, m.cols)));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Writes `manifest_path` plus a little-endian f32 blob next to it.
    pub fn save_manifest(&self, cfg: &ModelConfig, manifest_path: &Path, blob_name: &str) -> Result<()> {
        let mut blob = Vec::with_capacity(self.param_count() * 4);
        let mut entries = Vec::new();
        for ((name, shape), data) in TENSOR_NAMES.iter().zip(tensor_shapes(cfg)).zip(self.tensors()) {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset: blob.len() as u64,
            });
            for v in data {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            dtype: "f32le".into(),
            blob: blob_name.into(),
            tensors: entries,
        };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let blob_path = dir.join(blob_name);
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
    }

    /// Loads a block from a manifest and its f32 blob.
    pub fn load_manifest(cfg: &ModelConfig, manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let bad = |msg: String| Error::Manifest {
            path: manifest_path.to_path_buf(),
            msg,
        };
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(format!("malformed manifest: {e}")))?;
        if manifest.dtype != "f32le" {
            return Err(bad(format!("unsupported dtype {:?}", manifest.dtype)));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let blob_path = dir.join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

        let mut tensors = Vec::with_capacity(TENSOR_NAMES.len());
        for (name, shape) in TENSOR_NAMES.iter().zip(tensor_shapes(cfg)) {
            let entry = manifest
                .tensors
                .iter()
                .find(|t| t.name == *name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if entry.shape != shape {
                return Err(bad(format!("{name} has shape {:?}, expected {shape:?}", entry.shape)));
            }
            let len: usize = shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * len;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| bad(format!("{name} runs past the end of the blob")))?;
            tensors.push(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect(),
            );
        }
        Self::from_tensors(cfg, &mut tensors).map_err(|e| bad(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}
