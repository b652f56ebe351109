//! Python bindings: model presets, the golden and cluster-simulated block,
//! numeric primitives, and the cost model.

use std::collections::HashMap;

use neoxsim::cluster::{attend_split as split, fused_block_step, ClusterSpec};
use neoxsim::fidelity::{seed_sweep, Instance, ADVERSARIAL_SEED, DEFAULT_KS};
use neoxsim::halfnum::{self, Precision, ReductionStrategy};
use neoxsim::neox::{self, BlockWeights, KvCache, KvHead, Matrix};
use neoxsim::perfmodel::{self, Param};
use neoxsim::plan::{FusionPlan, KernelClass, PlanPreset};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: neoxsim::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> PyResult<T> {
    s.parse()
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {s:?}")))
}

fn precision(s: &str) -> PyResult<Precision> {
    match s {
        "exact" => Ok(Precision::Exact),
        "fp16" => Ok(Precision::Fp16),
        _ => Err(PyValueError::new_err(format!("unknown precision {s:?} (exact, fp16)"))),
    }
}

fn reduction(s: &str, seed: u64) -> PyResult<ReductionStrategy> {
    match s {
        "ring" => Ok(ReductionStrategy::Ring),
        "tree" => Ok(ReductionStrategy::Tree),
        "permuted_atomic" => Ok(ReductionStrategy::PermutedAtomic { seed }),
        _ => Err(PyValueError::new_err(format!(
            "unknown reduction {s:?} (ring, tree, permuted_atomic)"
        ))),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: neox::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// A named preset: pythia-2.8b, pythia-6.9b or tiny.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(PyModelConfig {
            inner: neox::ModelConfig::preset(name).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: neox::ModelConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("model config: {e}")))?;
        inner.validate().map_err(err)?;
        Ok(PyModelConfig { inner })
    }

    fn to_json(&self) -> String {
        serde_to_json(&self.inner)
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.hidden
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads
    }

    #[getter]
    fn d_head(&self) -> usize {
        self.inner.d_head
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers
    }

    #[getter]
    fn d_mlp(&self) -> usize {
        self.inner.d_mlp
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.vocab
    }

    #[getter]
    fn parallel_residual(&self) -> bool {
        self.inner.parallel_residual
    }

    #[setter]
    fn set_parallel_residual(&mut self, v: bool) {
        self.inner.parallel_residual = v;
    }

    fn rotary_dims(&self) -> usize {
        self.inner.rotary_dims()
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(hidden={}, n_heads={}, n_layers={}, d_mlp={})",
            self.inner.hidden, self.inner.n_heads, self.inner.n_layers, self.inner.d_mlp
        )
    }
}

fn serde_to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

#[pyclass(name = "HardwareModel", from_py_object)]
#[derive(Clone)]
struct PyHardwareModel {
    inner: perfmodel::HardwareModel,
}

#[pymethods]
impl PyHardwareModel {
    /// Unit efficiencies and no overheads.
    #[staticmethod]
    #[pyo3(signature = (bandwidth = 1.8e12))]
    fn ideal(bandwidth: f64) -> Self {
        PyHardwareModel {
            inner: perfmodel::HardwareModel::ideal(bandwidth),
        }
    }

    /// The fit to the bundled measurement table.
    #[staticmethod]
    fn shipped() -> PyResult<Self> {
        Ok(PyHardwareModel {
            inner: perfmodel::shipped_calibration().map_err(err)?.hw,
        })
    }

    #[getter]
    fn bandwidth(&self) -> f64 {
        self.inner.bandwidth
    }

    #[getter]
    fn launch_overhead(&self) -> f64 {
        self.inner.launch_overhead
    }

    #[getter]
    fn descriptor_cost(&self) -> f64 {
        self.inner.descriptor_cost
    }

    #[getter]
    fn graph_replay_overhead(&self) -> f64 {
        self.inner.graph_replay_overhead
    }

    /// Efficiency of a kernel class (library_gemm, library_attention, fused_cluster, mlp_down_standalone).
    fn efficiency(&self, class: &str) -> PyResult<f64> {
        let c = KernelClass::ALL
            .into_iter()
            .find(|c| c.name() == class)
            .ok_or_else(|| PyValueError::new_err(format!("unknown kernel class {class:?}")))?;
        Ok(self.inner.efficiency(c))
    }

    fn to_json(&self) -> String {
        serde_to_json(&self.inner)
    }
}

/// The reference block with synthetic weights and its own cache.
#[pyclass(name = "GoldenBlock")]
struct PyGoldenBlock {
    cfg: neox::ModelConfig,
    weights: BlockWeights,
    cache: KvCache,
}

#[pymethods]
impl PyGoldenBlock {
    #[new]
    #[pyo3(signature = (cfg, seed = 0))]
    fn new(cfg: &PyModelConfig, seed: u64) -> Self {
        let cfg = cfg.inner.clone();
        PyGoldenBlock {
            weights: BlockWeights::synthetic(&cfg, seed),
            cache: KvCache::new(cfg.n_heads, cfg.d_head),
            cfg,
        }
    }

    /// Decodes one position and returns the block output.
    fn step(&mut self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let pos = self.cache.len();
        neox::decoder_block_golden(&x, &self.weights, &mut self.cache, pos, &self.cfg).map_err(err)
    }

    #[getter]
    fn pos(&self) -> usize {
        self.cache.len()
    }
}

/// The cluster-simulated block, optionally split into fewer fused kernels.
#[pyclass(name = "ClusterBlock")]
struct PyClusterBlock {
    cfg: neox::ModelConfig,
    weights: BlockWeights,
    cache: KvCache,
    spec: ClusterSpec,
    plan: FusionPlan,
}

#[pymethods]
impl PyClusterBlock {
    #[new]
    #[pyo3(signature = (cfg, seed = 0, n_blocks = 4, precision = "exact", reduction = "tree", atomic_seed = 0, plan = "fused"))]
    fn new(
        cfg: &PyModelConfig,
        seed: u64,
        n_blocks: usize,
        precision: &str,
        reduction: &str,
        atomic_seed: u64,
        plan: &str,
    ) -> PyResult<Self> {
        let cfg = cfg.inner.clone();
        let spec = ClusterSpec::new(n_blocks)
            .with_precision(self::precision(precision)?)
            .with_reduction(self::reduction(reduction, atomic_seed)?)
            .with_seed(atomic_seed);
        spec.validate().map_err(err)?;
        Ok(PyClusterBlock {
            weights: BlockWeights::synthetic(&cfg, seed),
            cache: KvCache::new(cfg.n_heads, cfg.d_head),
            plan: parse::<PlanPreset>(plan, "plan")?.plan(false),
            spec,
            cfg,
        })
    }

    /// Decodes one position; returns the output and the step's traffic totals.
    fn step(&mut self, x: Vec<f64>) -> PyResult<(Vec<f64>, HashMap<String, u64>)> {
        let pos = self.cache.len();
        let (y, t) = fused_block_step(
            &x,
            &self.weights,
            &mut self.cache,
            pos,
            &self.cfg,
            &self.spec,
            &self.plan,
        )
        .map_err(err)?;
        let trace = HashMap::from([
            ("bytes_offchip".to_string(), t.bytes_offchip),
            ("bytes_onchip".to_string(), t.bytes_onchip),
            ("sync_steps".to_string(), t.sync_steps),
            ("dsmem_exchanges".to_string(), t.dsmem_exchanges),
            ("kernel_count".to_string(), t.kernel_count as u64),
        ]);
        Ok((y, trace))
    }
}

/// Round to the nearest binary16 value, ties to even.
#[pyfunction]
fn round16(x: f64) -> f64 {
    halfnum::round16(x)
}

#[pyfunction]
fn ulp16(x: f64) -> f64 {
    halfnum::ulp16(x)
}

#[pyfunction]
#[pyo3(signature = (x, gain, bias, eps = 1e-5, single_pass = false))]
fn layernorm(x: Vec<f64>, gain: Vec<f64>, bias: Vec<f64>, eps: f64, single_pass: bool) -> PyResult<Vec<f64>> {
    if single_pass {
        neox::layernorm_single_pass(&x, &gain, &bias, eps).map_err(err)
    } else {
        neox::layernorm_two_pass(&x, &gain, &bias, eps).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (v, pos, rotary_dims, theta = 10_000.0))]
fn rope(v: Vec<f64>, pos: usize, rotary_dims: usize, theta: f64) -> PyResult<Vec<f64>> {
    neox::rope_partial(&v, pos, rotary_dims, theta).map_err(err)
}

#[pyfunction]
fn attend_naive(q: Vec<f64>, keys: Vec<Vec<f64>>, values: Vec<Vec<f64>>, scale: f64) -> PyResult<Vec<f64>> {
    neox::attend_naive(
        &q,
        KvHead {
            keys: &keys,
            values: &values,
        },
        scale,
    )
    .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (q, keys, values, scale, n_blocks = 4, precision = "exact", reduction = "tree", seed = 0))]
#[allow(clippy::too_many_arguments)]
fn attend_split(
    q: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    scale: f64,
    n_blocks: usize,
    precision: &str,
    reduction: &str,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let spec = ClusterSpec::new(n_blocks)
        .with_precision(self::precision(precision)?)
        .with_reduction(self::reduction(reduction, seed)?)
        .with_seed(seed);
    Ok(split(
        &q,
        KvHead {
            keys: &keys,
            values: &values,
        },
        scale,
        &spec,
    )
    .map_err(err)?
    .0)
}

/// Causal tiled attention over a whole prompt; rows are positions.
#[pyfunction]
#[pyo3(signature = (q, k, v, tile, causal = true))]
fn prefill_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    tile: usize,
    causal: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let out = neox::prefill_attention_tiled(&matrix(q)?, &matrix(k)?, &matrix(v)?, tile, causal).map_err(err)?;
    Ok(rows(&out))
}

/// (prefill, decode) FLOPs for a prompt and a number of decoded tokens.
#[pyfunction]
#[pyo3(signature = (cfg, decode_tokens, prompt_len = perfmodel::DEFAULT_PROMPT_LEN))]
fn flops(cfg: &PyModelConfig, decode_tokens: usize, prompt_len: usize) -> (f64, f64) {
    let f = perfmodel::flops(&cfg.inner, prompt_len, decode_tokens);
    (f.prefill, f.decode)
}

/// Run-average time per output token, in seconds.
#[pyfunction]
#[pyo3(signature = (plan, cfg, hw, decode_tokens, graph_mode = false))]
fn run_tpot(
    plan: &str,
    cfg: &PyModelConfig,
    hw: &PyHardwareModel,
    decode_tokens: usize,
    graph_mode: bool,
) -> PyResult<f64> {
    let plan = parse::<PlanPreset>(plan, "plan")?.plan(graph_mode);
    perfmodel::run_tpot(&plan, &cfg.inner, &hw.inner, decode_tokens).map_err(err)
}

/// The four-plan ablation as a list of dicts, plus the boundary-traffic note.
#[pyfunction]
#[pyo3(signature = (cfg, hw, decode_tokens = 2048))]
fn ablate(
    cfg: &PyModelConfig,
    hw: &PyHardwareModel,
    decode_tokens: usize,
) -> PyResult<(Vec<HashMap<String, f64>>, String)> {
    let r = perfmodel::ablate(&cfg.inner, &hw.inner, decode_tokens).map_err(err)?;
    let rows = r
        .rows
        .iter()
        .map(|row| {
            HashMap::from([
                (format!("{}.tpot_ms", row.plan.name()), row.tpot_ms),
                (format!("{}.speedup", row.plan.name()), row.speedup),
            ])
        })
        .collect();
    Ok((rows, r.unit_note))
}

/// Fits hardware parameters to a measurement CSV (seq_len,tpot_ms,variant).
/// Returns the fitted model and the largest relative error.
#[pyfunction]
#[pyo3(signature = (csv_text, free = None, preset = "pythia-2.8b"))]
fn calibrate(csv_text: &str, free: Option<Vec<String>>, preset: &str) -> PyResult<(PyHardwareModel, f64)> {
    let cfg = neox::ModelConfig::preset(preset).map_err(err)?;
    let rows = perfmodel::parse_measurements(csv_text).map_err(err)?;
    let base = perfmodel::HardwareModel::default();
    let free: Vec<Param> = match free {
        Some(names) => names.iter().map(|n| n.parse().map_err(err)).collect::<PyResult<_>>()?,
        None => Param::identifiable(&cfg, base.bandwidth, &rows),
    };
    let cal = perfmodel::calibrate(&cfg, &base, &free, &rows).map_err(err)?;
    let worst = cal.max_rel_error();
    Ok((PyHardwareModel { inner: cal.hw }, worst))
}

/// Seed sweep of the simulated block against the golden one. Returns
/// metric -> (min, mean, max) and the number of distinct outputs.
/// Per-metric (mean, min, max) keyed by metric name.
type SweepStats = HashMap<String, (f64, f64, f64)>;

#[pyfunction]
#[pyo3(signature = (n_seeds = 100, n_blocks = 4, precision = "fp16", adversarial = false, seed = 0, steps = 16))]
fn fidelity_sweep(
    n_seeds: u64,
    n_blocks: usize,
    precision: &str,
    adversarial: bool,
    seed: u64,
    steps: usize,
) -> PyResult<(SweepStats, usize)> {
    let inst = if adversarial {
        Instance::adversarial(ADVERSARIAL_SEED)
    } else {
        Instance::random(&neox::ModelConfig::tiny(), seed, steps)
    };
    let spec = ClusterSpec::new(n_blocks).with_precision(self::precision(precision)?);
    let s = seed_sweep(&inst, &spec, 0..n_seeds, &DEFAULT_KS).map_err(err)?;
    let mut out = HashMap::from([
        (
            "token_match_rate".to_string(),
            (s.token_match_rate.min, s.token_match_rate.mean, s.token_match_rate.max),
        ),
        (
            "logits_mae".to_string(),
            (s.logits_mae.min, s.logits_mae.mean, s.logits_mae.max),
        ),
    ]);
    for (k, st) in &s.topk_agreement {
        out.insert(format!("top{k}_agreement"), (st.min, st.mean, st.max));
    }
    Ok((out, s.distinct_outputs))
}

/// TPOT sweep table (hf / cf / cf+graph) as CSV.
#[pyfunction]
#[pyo3(signature = (cfg, hw, sweep = perfmodel::DEFAULT_SWEEP.to_vec()))]
fn tpot_table(cfg: &PyModelConfig, hw: &PyHardwareModel, sweep: Vec<usize>) -> PyResult<String> {
    Ok(perfmodel::tpot_table(&cfg.inner, &hw.inner, &sweep)
        .map_err(err)?
        .to_csv())
}

#[pymodule]
pub fn neoxsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyHardwareModel>()?;
    m.add_class::<PyGoldenBlock>()?;
    m.add_class::<PyClusterBlock>()?;
    m.add_function(wrap_pyfunction!(round16, m)?)?;
    m.add_function(wrap_pyfunction!(ulp16, m)?)?;
    m.add_function(wrap_pyfunction!(layernorm, m)?)?;
    m.add_function(wrap_pyfunction!(rope, m)?)?;
    m.add_function(wrap_pyfunction!(attend_naive, m)?)?;
    m.add_function(wrap_pyfunction!(attend_split, m)?)?;
    m.add_function(wrap_pyfunction!(prefill_attention, m)?)?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(run_tpot, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(fidelity_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(tpot_table, m)?)?;
    Ok(())
}
