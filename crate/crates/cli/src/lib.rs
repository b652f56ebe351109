//! The `neoxsim` experiment runner: argument parsing and the subcommands.

pub mod config;
pub mod verify;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use neoxsim::cluster::{fused_block_step, KernelRecord};
use neoxsim::fidelity::{seed_sweep, Instance, ADVERSARIAL_SEED, DEFAULT_KS};
use neoxsim::halfnum::Precision;
use neoxsim::neox::{decoder_block_golden, BlockWeights, KvCache, ModelConfig};
use neoxsim::perfmodel::{
    ablate, ablation_table, calibrate, calibration_table, component_table, flops_table, mean_kv_len,
    parse_measurements, run_tpot, step_time_at, throughput_table, tpot_table, HardwareModel, Param, DEFAULT_PROMPT_LEN,
    SHIPPED_MEASUREMENTS,
};
use neoxsim::plan::{KernelClass, PlanPreset};
use neoxsim::rng::{substream, Stream};
use neoxsim::table::{Table, Value};
use serde::{Deserialize, Serialize};

use config::{Baseline, Format, RunConfig};
use verify::{run_suite, summary_table, Suite};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, config or input files.
    #[error("{0}")]
    Usage(String),
    /// A verification suite failed.
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] neoxsim::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) | CliError::Core(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "neoxsim", version, about = "Decoder-block fusion simulator and cost model")]
pub struct Cli {
    /// TOML config with model.*, hardware.*, plan.* and run.* keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Model preset (pythia-2.8b, pythia-6.9b, tiny).
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,
    /// Output file. Without it the table is printed.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Comma-separated decode lengths.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    pub seq_lens: Option<Vec<usize>>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum CostTable {
    /// hf / cf / cf+graph TPOT.
    Tpot,
    /// hf / cf / cf+graph tokens per second.
    Throughput,
    /// Attention-only kernel against the library path.
    AttentionOnly,
    /// Standalone MLP down-projection against the library path.
    MlpDownOnly,
    /// Breakdown of the configured plan.
    Plan,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record golden block outputs for a seeded decode run.
    Golden {
        /// Weight manifest; synthetic weights are used when it is missing.
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the oracle-equivalence suites.
    Verify {
        /// Comma-separated suites to run (default: all).
        #[arg(long, value_delimiter = ',')]
        suites: Option<Vec<String>>,
        /// Perturb one result in the named suite; the run must then fail.
        #[arg(long, value_name = "SUITE")]
        inject_fault: Option<String>,
    },
    /// Predicted TPOT and throughput over the sweep.
    Cost {
        #[arg(long, value_enum, default_value = "tpot")]
        table: CostTable,
    },
    /// Four-way fusion ablation at one decode length.
    Ablate {
        #[arg(long, default_value_t = 2048)]
        decode_tokens: usize,
        /// Also write the full report, including the MLP boundary arithmetic, as JSON.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Prefill and decode FLOPs over the sweep.
    Flops {
        #[arg(long)]
        prompt_len: Option<usize>,
    },
    /// Fit hardware parameters to measured TPOT ("shipped" selects the bundled table).
    Calibrate {
        #[arg(long, value_name = "PATH")]
        measurements: Option<PathBuf>,
        /// Comma-separated parameters to fit (default: every identifiable one).
        #[arg(long, value_delimiter = ',')]
        free: Option<Vec<String>>,
    },
    /// Token-level agreement between simulated and golden runs over atomic seeds.
    Fidelity {
        /// Number of atomic seeds.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Use the near-tie instance built to expose accumulation order.
        #[arg(long)]
        adversarial: bool,
    },
    /// Per-kernel traffic records of a simulated decode run, as JSON lines.
    Trace {
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Everything a command needs, after merging flags over the config file.
struct Ctx {
    cfg: RunConfig,
    out: Option<PathBuf>,
    format: Option<Format>,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &cli.preset {
            cfg.model.preset = Some(p.clone());
        }
        if let Some(s) = cli.seed {
            cfg.run.seed = Some(s);
        }
        if let Some(v) = &cli.seq_lens {
            if v.is_empty() {
                return Err(CliError::Usage("--seq-lens must not be empty".into()));
            }
            cfg.run.seq_lens = Some(v.clone());
        }
        Ok(Ctx {
            out: cli.out.clone().or_else(|| cfg.run.out.clone()),
            format: cli.format.or(cfg.run.format),
            cfg,
        })
    }

    fn seed(&self) -> u64 {
        self.cfg.run.seed.unwrap_or(0)
    }

    /// Writes `table` to the output file, or prints it: serialized when a
    /// format was asked for, rendered otherwise.
    fn emit(&self, table: &Table, stdout: &mut dyn Write) -> Result<(), CliError> {
        let serialized = |f: Format| match f {
            Format::Csv => table.to_csv(),
            Format::Json => table.to_json() + "\n",
        };
        match (&self.out, self.format) {
            (Some(path), f) => {
                write_file(path, &serialized(f.unwrap_or_default()))?;
                write!(stdout, "{}", table.render()).map_err(stdout_err)
            }
            (None, Some(f)) => write!(stdout, "{}", serialized(f)).map_err(stdout_err),
            (None, None) => write!(stdout, "{}", table.render()).map_err(stdout_err),
        }
    }
}

fn stdout_err(e: std::io::Error) -> CliError {
    CliError::Usage(format!("stdout: {e}"))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match run(&cli, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Golden { weights, steps } => cmd_golden(&ctx, weights.as_deref(), *steps, stdout, stderr),
        Command::Verify { suites, inject_fault } => {
            cmd_verify(&ctx, suites.as_deref(), inject_fault.as_deref(), stdout)
        }
        Command::Cost { table } => cmd_cost(&ctx, *table, stdout),
        Command::Ablate { decode_tokens, report } => {
            cmd_ablate(&ctx, *decode_tokens, report.as_deref(), stdout, stderr)
        }
        Command::Flops { prompt_len } => cmd_flops(&ctx, *prompt_len, stdout),
        Command::Calibrate { measurements, free } => {
            cmd_calibrate(&ctx, measurements.as_deref(), free.as_deref(), stdout, stderr)
        }
        Command::Fidelity {
            seeds,
            steps,
            adversarial,
        } => cmd_fidelity(&ctx, *seeds, *steps, *adversarial, stdout),
        Command::Trace { steps } => cmd_trace(&ctx, *steps, stdout),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenStep {
    pub pos: usize,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    /// Cache length after this step.
    pub cache_len: usize,
}

/// Inputs, final cache and outputs of a golden decode run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFixture {
    pub model: ModelConfig,
    pub seed: u64,
    /// Weight manifest path, or "synthetic".
    pub weights: String,
    pub steps: Vec<GoldenStep>,
    pub cache: KvCache,
}

/// Seeded block inputs for `steps` decode steps.
pub fn golden_inputs(cfg: &ModelConfig, seed: u64, steps: usize) -> Vec<Vec<f64>> {
    let mut s = Stream::new(substream(seed, 1));
    (0..steps).map(|_| s.signed_vec(cfg.hidden, 1.0)).collect()
}

pub fn record_golden(
    cfg: &ModelConfig,
    w: &BlockWeights,
    seed: u64,
    steps: usize,
    weights: String,
) -> Result<GoldenFixture, CliError> {
    let mut cache = KvCache::new(cfg.n_heads, cfg.d_head);
    let mut out = Vec::with_capacity(steps);
    for (pos, x) in golden_inputs(cfg, seed, steps).into_iter().enumerate() {
        let y = decoder_block_golden(&x, w, &mut cache, pos, cfg)?;
        out.push(GoldenStep {
            pos,
            input: x,
            output: y,
            cache_len: cache.len(),
        });
    }
    Ok(GoldenFixture {
        model: cfg.clone(),
        seed,
        weights,
        steps: out,
        cache,
    })
}

fn cmd_golden(
    ctx: &Ctx,
    weights: Option<&Path>,
    steps: Option<usize>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    if ctx.format == Some(Format::Csv) {
        return Err(CliError::Usage("golden fixtures are written as JSON".into()));
    }
    let cfg = ctx.cfg.model("tiny")?;
    let seed = ctx.seed();
    let steps = steps.or(ctx.cfg.run.steps).unwrap_or(8);
    let path = weights.map(Path::to_path_buf).or_else(|| ctx.cfg.run.weights.clone());
    let (w, source) = match path {
        Some(p) if p.exists() => (BlockWeights::load_manifest(&cfg, &p)?, p.display().to_string()),
        Some(p) => {
            let _ = writeln!(
                stderr,
                "notice: weight manifest {} not found; using synthetic weights from seed {seed}",
                p.display()
            );
            (BlockWeights::synthetic(&cfg, seed), "synthetic".to_string())
        }
        None => (BlockWeights::synthetic(&cfg, seed), "synthetic".to_string()),
    };
    let fixture = record_golden(&cfg, &w, seed, steps, source)?;
    let json = serde_json::to_string_pretty(&fixture).map_err(neoxsim::Error::from)? + "\n";
    match &ctx.out {
        Some(p) => {
            write_file(p, &json)?;
            writeln!(stdout, "wrote {} golden steps to {}", steps, p.display()).map_err(stdout_err)
        }
        None => write!(stdout, "{json}").map_err(stdout_err),
    }
}

fn cmd_verify(
    ctx: &Ctx,
    suites: Option<&[String]>,
    fault: Option<&str>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let names: Vec<String> = match suites.map(<[String]>::to_vec).or_else(|| ctx.cfg.run.suites.clone()) {
        Some(v) => v
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        None => Suite::ALL.iter().map(|s| s.name().to_string()).collect(),
    };
    if names.is_empty() {
        return Err(CliError::Usage("no suites selected".into()));
    }
    let mut selected: Vec<Suite> = names
        .iter()
        .map(|n| n.parse())
        .collect::<Result<_, String>>()
        .map_err(CliError::Usage)?;
    selected.sort();
    selected.dedup();
    let fault: Option<Suite> = fault.map(str::parse).transpose().map_err(CliError::Usage)?;

    let results: Vec<_> = selected
        .iter()
        .map(|&s| run_suite(s, ctx.seed(), fault == Some(s)))
        .collect();
    for r in &results {
        let line = match &r.failure {
            None => format!("PASS {} ({} checks, max error {:.2e})", r.suite, r.checks, r.max_error),
            Some(f) => format!("FAIL {}: {f}", r.suite),
        };
        writeln!(stdout, "{line}").map_err(stdout_err)?;
    }
    let table = summary_table(&results);
    if let Some(p) = &ctx.out {
        let text = match ctx.format.unwrap_or_default() {
            Format::Csv => table.to_csv(),
            Format::Json => table.to_json() + "\n",
        };
        write_file(p, &text)?;
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.suite.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed suites: {}", failed.join(", "))))
    }
}

fn cmd_cost(ctx: &Ctx, which: CostTable, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = ctx.cfg.model("pythia-2.8b")?;
    let hw = ctx.cfg.hardware(Baseline::Shipped)?;
    let sweep = ctx.cfg.seq_lens();
    let table = match which {
        CostTable::Tpot => tpot_table(&cfg, &hw, &sweep)?,
        CostTable::Throughput => throughput_table(&cfg, &hw, &sweep)?,
        CostTable::AttentionOnly => component_table(&cfg, &hw, PlanPreset::AttentionOnly, &sweep)?,
        CostTable::MlpDownOnly => component_table(&cfg, &hw, PlanPreset::MlpDownOnly, &sweep)?,
        CostTable::Plan => plan_table(&cfg, &hw, &ctx.cfg.plan()?, &sweep)?,
    };
    ctx.emit(&table, stdout)
}

/// decode_tokens, kernels, bytes_per_step, memory_ms, overhead_ms, tpot_ms,
/// all at the run's mean cache length.
pub fn plan_table(
    cfg: &ModelConfig,
    hw: &HardwareModel,
    plan: &neoxsim::plan::FusionPlan,
    sweep: &[usize],
) -> Result<Table, CliError> {
    let mut t = Table::new(&[
        "decode_tokens",
        "kernels",
        "bytes_per_step",
        "memory_ms",
        "overhead_ms",
        "tpot_ms",
    ]);
    for &n in sweep {
        let r = step_time_at(plan, cfg, hw, mean_kv_len(DEFAULT_PROMPT_LEN, n))?;
        debug_assert_eq!(r.tpot_s, run_tpot(plan, cfg, hw, n)?);
        t.push(vec![
            n.into(),
            plan.kernel_count().into(),
            Value::Num(r.bytes()),
            Value::Num(r.compute_s * 1e3),
            Value::Num(r.overhead_s() * 1e3),
            Value::Num(r.tpot_s * 1e3),
        ]);
    }
    Ok(t)
}

fn cmd_ablate(
    ctx: &Ctx,
    decode_tokens: usize,
    report_path: Option<&Path>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = ctx.cfg.model("pythia-2.8b")?;
    let hw = ctx.cfg.hardware(Baseline::Shipped)?;
    let report = ablate(&cfg, &hw, decode_tokens)?;
    if let Some(p) = report_path {
        write_file(
            p,
            &(serde_json::to_string_pretty(&report).map_err(neoxsim::Error::from)? + "\n"),
        )?;
    }
    ctx.emit(&ablation_table(&report), stdout)?;
    let _ = writeln!(
        stderr,
        "mlp boundary: {} bytes per step, {:.3e} s at {:.3e} B/s\nnote: {}",
        report.mlp_boundary_bytes, report.mlp_boundary_seconds, hw.bandwidth, report.unit_note
    );
    Ok(())
}

fn cmd_flops(ctx: &Ctx, prompt_len: Option<usize>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = ctx.cfg.model("pythia-2.8b")?;
    let hw = ctx.cfg.hardware(Baseline::Shipped)?;
    let prompt = prompt_len.or(ctx.cfg.run.prompt_len).unwrap_or(DEFAULT_PROMPT_LEN);
    ctx.emit(&flops_table(&cfg, &hw, prompt, &ctx.cfg.seq_lens())?, stdout)
}

fn cmd_calibrate(
    ctx: &Ctx,
    measurements: Option<&Path>,
    free: Option<&[String]>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let path = measurements
        .map(Path::to_path_buf)
        .or_else(|| ctx.cfg.run.measurements.clone())
        .ok_or_else(|| {
            CliError::Usage("calibrate needs a measurements CSV (--measurements PATH, or \"shipped\")".into())
        })?;
    let text = if path.as_os_str() == "shipped" {
        SHIPPED_MEASUREMENTS.to_string()
    } else {
        fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
    };
    let rows = parse_measurements(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let cfg = ctx.cfg.model("pythia-2.8b")?;
    let base = ctx.cfg.hardware(Baseline::Ideal)?;
    let free: Vec<Param> = match free.map(<[String]>::to_vec).or_else(|| ctx.cfg.hardware.free.clone()) {
        Some(names) => names
            .iter()
            .map(|n| n.parse().map_err(|e: neoxsim::Error| CliError::Usage(e.to_string())))
            .collect::<Result<_, _>>()?,
        None => Param::identifiable(&cfg, base.bandwidth, &rows),
    };
    let cal = calibrate(&cfg, &base, &free, &rows).map_err(|e| CliError::Usage(e.to_string()))?;
    ctx.emit(&calibration_table(&cal), stdout)?;
    let _ = write!(stderr, "{}", hardware_toml(&cal.hw));
    let _ = writeln!(stderr, "# max relative error {:.4}", cal.max_rel_error());
    Ok(())
}

/// A `[hardware]` section reproducing `hw`, for pasting into a config.
pub fn hardware_toml(hw: &HardwareModel) -> String {
    let mut s = String::from("[hardware]\ncalibration = \"ideal\"\n");
    s += &format!("bandwidth = {:?}\n", hw.bandwidth);
    s += &format!("launch_overhead = {:?}\n", hw.launch_overhead);
    s += &format!("descriptor_cost = {:?}\n", hw.descriptor_cost);
    s += &format!("graph_replay_overhead = {:?}\n", hw.graph_replay_overhead);
    for class in KernelClass::ALL {
        s += &format!("efficiency.{} = {:?}\n", class.name(), hw.efficiency(class));
    }
    s
}

fn cmd_fidelity(
    ctx: &Ctx,
    seeds: Option<u64>,
    steps: Option<usize>,
    adversarial: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let n_seeds = seeds.or(ctx.cfg.run.seeds).unwrap_or(100);
    if n_seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    let spec = ctx.cfg.cluster(Precision::Fp16)?;
    let inst = if adversarial || ctx.cfg.run.adversarial == Some(true) {
        Instance::adversarial(ADVERSARIAL_SEED)
    } else {
        let cfg = ctx.cfg.model("tiny")?;
        Instance::random(&cfg, ctx.seed(), steps.or(ctx.cfg.run.steps).unwrap_or(16))
    };
    let summary = seed_sweep(&inst, &spec, 0..n_seeds, &DEFAULT_KS)?;
    ctx.emit(&summary.table(), stdout)
}

/// One kernel record tagged with its decode step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub kernel: KernelRecord,
}

fn cmd_trace(ctx: &Ctx, steps: Option<usize>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = ctx.cfg.model("tiny")?;
    let plan = ctx.cfg.plan()?;
    let spec = ctx.cfg.cluster(Precision::Exact)?;
    let steps = steps.or(ctx.cfg.run.steps).unwrap_or(4);
    let w = BlockWeights::synthetic(&cfg, ctx.seed());
    let mut cache = KvCache::new(cfg.n_heads, cfg.d_head);
    let mut lines = String::new();
    for (pos, x) in golden_inputs(&cfg, ctx.seed(), steps).iter().enumerate() {
        let (_, trace) = fused_block_step(x, &w, &mut cache, pos, &cfg, &spec, &plan)?;
        for kernel in trace.kernels {
            let rec = StepRecord { step: pos, kernel };
            lines += &serde_json::to_string(&rec).map_err(neoxsim::Error::from)?;
            lines.push('\n');
        }
    }
    match &ctx.out {
        Some(p) => write_file(p, &lines),
        None => write!(stdout, "{lines}").map_err(stdout_err),
    }
}
