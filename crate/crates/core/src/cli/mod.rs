//! Command-line front end: planning, simulation, batch search, codec
//! benchmarking and policy evolution.
//!
//! Exit codes: 0 on success, 1 for input errors (unreadable or invalid
//! files, bad flags), 2 when no plan fits the memory budget.

mod size;
mod svg;

pub use size::parse_size;

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::codec::{self, ActivationMatrix, CodecScheme, GroupLayout};
use crate::evolution::{default_tracked_kinds, run_evolution, EvolutionError, TrackingSchedule, DEFAULT_MAX_INTERVAL};
use crate::planner::{bandwidths, solve, Plan, PlanError, PolicyChoice};
use crate::profile::{load_profile, LayerKind, ModelProfile};
use crate::simulator::{
    generate_drift, max_feasible_batch, sweep, sweep_choices, write_sweep_csv, DriftRegime, DriftTrace, SimConfig,
    SimError, Strategy,
};
use svg::{Chart, Series};

#[derive(Debug, Parser)]
#[command(
    name = "actplan",
    version,
    about = "Choose recompute, compress or retain for every activation of a transformer block"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for the cheapest policy under the memory budget.
    Plan(PlanArgs),
    /// Sweep batch sizes, and optionally replay iterations under outlier drift.
    Simulate(SimulateArgs),
    /// Largest batch each strategy fits in the budget.
    MaxBatch(MaxBatchArgs),
    /// Compress a tensor and report ratio and timing.
    CodecBench(CodecBenchArgs),
    /// Compare an evolving plan with a fixed one under outlier drift.
    Evolve(EvolveArgs),
}

#[derive(Debug, Args)]
struct ProfileArgs {
    /// Profile JSON file.
    #[arg(long)]
    profile: PathBuf,
    /// Memory budget overriding the profile's, e.g. 40MiB or 32GiB.
    #[arg(long, value_parser = parse_size)]
    budget: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[command(flatten)]
    common: ProfileArgs,
}

#[derive(Debug, Args)]
struct DriftArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Longest interval between tracking iterations (a power of two).
    #[arg(long, default_value_t = DEFAULT_MAX_INTERVAL)]
    max_interval: u64,
    /// Only track at iteration 1.
    #[arg(long)]
    no_tracking: bool,
    /// Layer kinds to re-evaluate, comma separated [default: linear,layer_norm,gelu].
    #[arg(long, value_delimiter = ',')]
    track: Vec<LayerKind>,
    /// Drift CSV (iteration,operator_id,outlier_count,crate) instead of a generated trace.
    #[arg(long)]
    drift: Option<PathBuf>,
    /// Channels of each tracked activation for generated drift.
    #[arg(long, default_value_t = 1024)]
    cols: usize,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: ProfileArgs,
    /// Simulate this plan instead of the four strategies.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Batch range `LO..HI` (inclusive) or a single batch.
    #[arg(long, default_value = "1..16", value_parser = parse_batches)]
    batches: (u32, u32),
    /// Iterations to replay under drift at the reference batch (0 skips the replay).
    #[arg(long, default_value_t = 0)]
    iterations: u64,
    /// Small-batch efficiency knee k in b / (b + k); 0 makes step time linear in batch.
    #[arg(long, default_value_t = 2.0)]
    efficiency_k: f64,
    /// Also write SVG charts (needs --out).
    #[arg(long)]
    charts: bool,
    #[command(flatten)]
    drift: DriftArgs,
}

#[derive(Debug, Args)]
struct MaxBatchArgs {
    #[command(flatten)]
    common: ProfileArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemeArg {
    Symmetric,
    PerChannel,
    Asymmetric,
    Outlier,
    Bitmask,
}

#[derive(Debug, Args)]
struct CodecBenchArgs {
    /// Raw little-endian f16 tensor, row-major; synthetic Gaussian data when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    rows: usize,
    #[arg(long, default_value_t = 1024)]
    cols: usize,
    #[arg(long, value_enum, default_value = "symmetric")]
    scheme: SchemeArg,
    /// Use the default scheme of this layer kind instead of --scheme.
    #[arg(long)]
    kind: Option<LayerKind>,
    #[arg(long, default_value_t = codec::DEFAULT_GROUP_SIZE)]
    group_size: u32,
    #[arg(long, default_value_t = codec::DEFAULT_Z_THRESHOLD)]
    z_threshold: f64,
    /// Channels of synthetic data scaled up into outliers.
    #[arg(long, default_value_t = 0)]
    outlier_channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvolveArgs {
    #[command(flatten)]
    common: ProfileArgs,
    #[arg(long, default_value_t = 1000)]
    iterations: u64,
    #[arg(long, default_value_t = 2.0)]
    efficiency_k: f64,
    /// Also write SVG charts (needs --out).
    #[arg(long)]
    charts: bool,
    #[command(flatten)]
    drift: DriftArgs,
}

fn parse_batches(text: &str) -> Result<(u32, u32), String> {
    let parse = |s: &str| s.trim().parse::<u32>().map_err(|_| format!("invalid batch `{s}`"));
    let (lo, hi) = match text.split_once("..") {
        Some((lo, hi)) => (parse(lo)?, parse(hi.trim_start_matches('='))?),
        None => {
            let b = parse(text)?;
            (b, b)
        }
    };
    if lo == 0 {
        return Err("batches start at 1".into());
    }
    if lo > hi {
        return Err(format!("empty batch range {lo}..{hi}"));
    }
    Ok((lo, hi))
}

/// Failure of a subcommand, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Infeasible(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Infeasible(_) => 2,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.into())
    }
}

fn plan_failure(e: PlanError) -> Failure {
    match e {
        PlanError::Infeasible { min_total_bytes, budget_bytes } => Failure::Infeasible(format!(
            "budget of {budget_bytes} bytes is below the minimum achievable {min_total_bytes} bytes"
        )),
        other => Failure::Input(other.into()),
    }
}

fn evolution_failure(e: EvolutionError) -> Failure {
    match e {
        EvolutionError::Plan(p) => plan_failure(p),
        EvolutionError::Sim(SimError::Plan(p)) => plan_failure(p),
        other => Failure::Input(other.into()),
    }
}

/// Parses `args` (program name first) and runs the subcommand, writing the
/// human-readable report to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Failure::Input(anyhow!(e.to_string())))?;
    match cli.command {
        Command::Plan(a) => cmd_plan(a, stdout),
        Command::Simulate(a) => cmd_simulate(a, stdout),
        Command::MaxBatch(a) => cmd_max_batch(a, stdout),
        Command::CodecBench(a) => cmd_codec_bench(a, stdout),
        Command::Evolve(a) => cmd_evolve(a, stdout),
    }
}

/// Process entry point.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if let Err(e) = Cli::try_parse_from(&args) {
        // help and version go to stdout with success
        let _ = e.print();
        return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
    }
    let stdout = std::io::stdout();
    match run(args, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Input(e) => eprintln!("error: {e:#}"),
                Failure::Infeasible(msg) => eprintln!("infeasible: {msg}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn load(args: &ProfileArgs) -> Result<ModelProfile, Failure> {
    let mut profile = load_profile(&args.profile).map_err(|e| Failure::Input(anyhow!("{e}")))?;
    if let Some(budget) = args.budget {
        profile.mem_budget_bytes = budget;
    }
    Ok(profile)
}

fn out_dir(out: &Option<PathBuf>) -> Result<Option<&Path>, Failure> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(out.as_deref())
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Milliseconds rounded to nanoseconds for display.
fn ms(v: f64) -> String {
    let s = format!("{v:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn mib(bytes: f64) -> f64 {
    bytes / (1u64 << 20) as f64
}

fn cmd_plan(args: PlanArgs, w: &mut dyn Write) -> Result<(), Failure> {
    let profile = load(&args.common)?;
    let plan = solve(&profile).map_err(plan_failure)?;
    let bands = bandwidths(&profile);

    writeln!(
        w,
        "{:>3}  {:<20} {:<12} {:<10} {:>14} {:>12} {:>12}",
        "op", "name", "kind", "choice", "resident_B", "recomp_MiB/ms", "comp_MiB/ms"
    )?;
    for ((op, &choice), band) in profile.operators.iter().zip(&plan.choices).zip(&bands) {
        let resident = match choice {
            PolicyChoice::Recompute => 0,
            PolicyChoice::Compress => op.compressed_bytes(),
            PolicyChoice::Retain => op.mem_bytes,
        };
        let fmt_band = |b: Option<f64>| b.map_or("-".to_string(), |v| format!("{:.2}", mib(v)));
        writeln!(
            w,
            "{:>3}  {:<20} {:<12} {:<10} {:>14} {:>12} {:>12}",
            op.id,
            op.name,
            op.kind.as_str(),
            choice.as_str(),
            resident,
            fmt_band(band.recompute),
            fmt_band(band.compress)
        )?;
    }
    if plan.choices.iter().all(|&c| c == PolicyChoice::Retain) {
        writeln!(w, "all retain, zero overhead")?;
    }
    writeln!(
        w,
        "overhead: {} ms per block, {} ms per step over {} layers",
        ms(plan.objective_ms),
        ms(plan.objective_ms * profile.n_layers as f64),
        profile.n_layers
    )?;
    writeln!(
        w,
        "memory: {} of {} bytes ({} static, {} activations)",
        plan.total_bytes, profile.mem_budget_bytes, profile.static_mem_bytes, plan.activation_bytes
    )?;
    writeln!(w, "solver: {} nodes, {:.3} ms", plan.solver.nodes, plan.solver.wall_ms)?;

    if let Some(dir) = out_dir(&args.common.out)? {
        write_file(dir, "plan.json", plan.to_json().as_bytes())?;
    }
    Ok(())
}

fn tracked_kinds(args: &DriftArgs) -> BTreeSet<LayerKind> {
    if args.track.is_empty() {
        default_tracked_kinds()
    } else {
        args.track.iter().copied().collect()
    }
}

fn schedule(args: &DriftArgs) -> Result<TrackingSchedule, Failure> {
    if args.no_tracking {
        return Ok(TrackingSchedule::disabled());
    }
    TrackingSchedule::new(args.max_interval).map_err(|e| Failure::Input(e.into()))
}

/// Drift for every tracked operator, either read from file or generated with
/// each operator's row count implied by its size and `cols`.
fn load_drift(profile: &ModelProfile, args: &DriftArgs, iterations: u64) -> Result<DriftTrace, Failure> {
    if let Some(path) = &args.drift {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        return DriftTrace::read_csv(file)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::Input);
    }
    if args.cols == 0 {
        return Err(Failure::Input(anyhow!("--cols must be positive")));
    }
    let kinds = tracked_kinds(args);
    let mut samples = Vec::new();
    for op in profile.operators.iter().filter(|op| kinds.contains(&op.kind)) {
        let rows = (op.mem_bytes as usize / (codec::ACTIVATION_ELEMENT_BYTES * args.cols)).max(1);
        let regime = DriftRegime { rows, ..DriftRegime::default() };
        let trace = generate_drift(args.seed, iterations, args.cols, &regime, &[op.id]).context("generating drift")?;
        samples.extend(trace.samples());
    }
    DriftTrace::from_samples(samples).map_err(|e| Failure::Input(e.into()))
}

fn drift_chart(drift: &DriftTrace) -> Chart {
    Chart {
        title: "Outlier channels per tracked operator".into(),
        x_label: "iteration".into(),
        y_label: "outlier channels".into(),
        series: drift
            .operator_ids()
            .map(|id| Series {
                name: format!("op {id}"),
                points: drift.series(id).iter().map(|s| (s.iteration as f64, s.outlier_count as f64)).collect(),
            })
            .collect(),
    }
}

fn check_charts(charts: bool, out: &Option<PathBuf>) -> Result<(), Failure> {
    if charts && out.is_none() {
        return Err(Failure::Input(anyhow!("--charts needs --out")));
    }
    Ok(())
}

fn sim_config(k: f64) -> Result<SimConfig, Failure> {
    if !(k >= 0.0 && k.is_finite()) {
        return Err(Failure::Input(anyhow!("--efficiency-k must be a non-negative number")));
    }
    Ok(SimConfig { efficiency_k: k })
}

fn cmd_simulate(args: SimulateArgs, w: &mut dyn Write) -> Result<(), Failure> {
    check_charts(args.charts, &args.common.out)?;
    let profile = load(&args.common)?;
    let config = sim_config(args.efficiency_k)?;
    let (lo, hi) = args.batches;

    let rows = match &args.plan {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let plan = Plan::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
            sweep_choices(&profile, "plan", &plan.choices, lo..=hi, &config).map_err(|e| Failure::Input(e.into()))?
        }
        None => sweep(&profile, lo..=hi, &Strategy::ALL, &config),
    };
    if rows.is_empty() {
        return Err(Failure::Infeasible(format!("nothing fits the budget at any batch in {lo}..{hi}")));
    }

    let replay = if args.iterations > 0 {
        let drift = load_drift(&profile, &args.drift, args.iterations)?;
        let report = run_evolution(
            &profile,
            &drift,
            args.iterations,
            schedule(&args.drift)?,
            tracked_kinds(&args.drift),
            &config,
        )
        .map_err(evolution_failure)?;
        Some((drift, report))
    } else {
        None
    };

    let mut steps = Vec::new();
    write_sweep_csv(&rows, &mut steps).context("writing steps")?;
    match out_dir(&args.common.out)? {
        None => w.write_all(&steps)?,
        Some(dir) => {
            write_file(dir, "steps.csv", &steps)?;
            let best = rows.iter().max_by(|a, b| a.throughput.total_cmp(&b.throughput)).expect("rows not empty");
            writeln!(
                w,
                "{} rows written; peak throughput {:.3} samples/s at batch {} ({})",
                rows.len(),
                best.throughput,
                best.batch,
                best.strategy
            )?;
            if let Some((drift, report)) = &replay {
                let mut buf = Vec::new();
                drift.write_csv(&mut buf).context("writing drift")?;
                write_file(dir, "drift.csv", &buf)?;
                let mut buf = Vec::new();
                report.write_csv(&mut buf).context("writing evolution log")?;
                write_file(dir, "evolution.csv", &buf)?;
                writeln!(w, "{} iterations replayed, {} plan changes", report.log.len(), report.plan_changes())?;
            }
            if args.charts {
                let mut by_label: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
                for r in &rows {
                    by_label.entry(r.strategy.as_str()).or_default().push((r.batch as f64, r.throughput));
                }
                let chart = Chart {
                    title: "Throughput versus batch size".into(),
                    x_label: "batch".into(),
                    y_label: "samples/s".into(),
                    series: by_label.into_iter().map(|(name, points)| Series { name: name.into(), points }).collect(),
                };
                write_file(dir, "throughput_vs_batch.svg", chart.render().as_bytes())?;
                if let Some((drift, _)) = &replay {
                    write_file(dir, "outlier_drift.svg", drift_chart(drift).render().as_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn cmd_max_batch(args: MaxBatchArgs, w: &mut dyn Write) -> Result<(), Failure> {
    let profile = load(&args.common)?;
    let mut csv_out = String::from("strategy,max_batch\n");
    writeln!(w, "{:<16} {:>10}", "strategy", "max_batch")?;
    for s in Strategy::ALL {
        let b = max_feasible_batch(&profile, s);
        writeln!(w, "{:<16} {:>10}", s.as_str(), b)?;
        csv_out.push_str(&format!("{},{}\n", s.as_str(), b));
    }
    if let Some(dir) = out_dir(&args.common.out)? {
        write_file(dir, "max_batch.csv", csv_out.as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CodecReport {
    scheme: String,
    rows: usize,
    cols: usize,
    original_bytes: usize,
    payload_bytes: usize,
    encoded_bytes: usize,
    ratio: f64,
    compression_rate: f64,
    outlier_channels: usize,
    compress_ms: f64,
    decompress_ms: f64,
}

fn synthetic_tensor(args: &CodecBenchArgs, mask: bool) -> anyhow::Result<ActivationMatrix> {
    let (rows, cols) = (args.rows, args.cols);
    if rows == 0 || cols == 0 {
        bail!("--rows and --cols must be positive");
    }
    if args.outlier_channels > cols {
        bail!("--outlier-channels exceeds --cols");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    if mask {
        let values = (0..rows * cols).map(|_| if rng.random_bool(0.9) { 1.0 } else { 0.0 }).collect();
        return Ok(ActivationMatrix::new(rows, cols, values)?);
    }
    let mut values: Vec<f32> =
        (0..rows * cols).map(|_| f16::from_f32(StandardNormal.sample(&mut rng)).to_f32()).collect();
    for k in 0..args.outlier_channels {
        let c = k * cols / args.outlier_channels.max(1);
        for r in 0..rows {
            let v = &mut values[r * cols + c];
            *v = f16::from_f32(*v * 80.0 + 3.0).to_f32();
        }
    }
    Ok(ActivationMatrix::new(rows, cols, values)?)
}

fn read_tensor(path: &Path, rows: usize, cols: usize) -> anyhow::Result<ActivationMatrix> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let expected =
        rows.checked_mul(cols).and_then(|n| n.checked_mul(2)).ok_or_else(|| anyhow!("tensor shape overflows"))?;
    if bytes.len() != expected {
        bail!("{} holds {} bytes, a {rows}x{cols} f16 tensor needs {expected}", path.display(), bytes.len());
    }
    let values: Vec<f16> = bytes.chunks_exact(2).map(|b| f16::from_le_bytes([b[0], b[1]])).collect();
    Ok(ActivationMatrix::from_f16(rows, cols, &values)?)
}

fn cmd_codec_bench(args: CodecBenchArgs, w: &mut dyn Write) -> Result<(), Failure> {
    if args.group_size == 0 {
        return Err(Failure::Input(anyhow!("--group-size must be positive")));
    }
    let scheme = match args.kind {
        Some(kind) => codec::scheme_for(kind),
        None => match args.scheme {
            SchemeArg::Symmetric => CodecScheme::Symmetric { layout: GroupLayout::Flat(args.group_size) },
            SchemeArg::PerChannel => CodecScheme::Symmetric { layout: GroupLayout::PerChannel },
            SchemeArg::Asymmetric => CodecScheme::Asymmetric { group_size: args.group_size },
            SchemeArg::Outlier => {
                CodecScheme::OutlierSeparated { z_threshold: args.z_threshold, group_size: args.group_size }
            }
            SchemeArg::Bitmask => CodecScheme::BitMask,
        },
    };
    let is_mask = matches!(scheme, CodecScheme::BitMask);
    let x = match &args.input {
        Some(path) => read_tensor(path, args.rows, args.cols)?,
        None => synthetic_tensor(&args, is_mask)?,
    };
    let m = codec::measure_codec(&x, &scheme).map_err(|e| Failure::Input(e.into()))?;
    let encoded = codec::compress(&x, &scheme).map_err(|e| Failure::Input(e.into()))?.to_bytes();
    let report = CodecReport {
        scheme: format!("{:?}", scheme.scheme()),
        rows: x.rows(),
        cols: x.cols(),
        original_bytes: m.original_bytes,
        payload_bytes: m.payload_bytes,
        encoded_bytes: encoded.len(),
        ratio: m.ratio,
        compression_rate: m.compression_rate(),
        outlier_channels: m.outlier_channels,
        compress_ms: m.compress_ms,
        decompress_ms: m.decompress_ms,
    };
    writeln!(w, "scheme:           {}", report.scheme)?;
    writeln!(w, "shape:            {}x{}", report.rows, report.cols)?;
    writeln!(w, "original bytes:   {}", report.original_bytes)?;
    writeln!(w, "payload bytes:    {}", report.payload_bytes)?;
    writeln!(w, "ratio:            {:.4}", report.ratio)?;
    writeln!(w, "compression rate: {:.6}", report.compression_rate)?;
    writeln!(w, "outlier channels: {}", report.outlier_channels)?;
    writeln!(w, "compress:         {:.3} ms", report.compress_ms)?;
    writeln!(w, "decompress:       {:.3} ms", report.decompress_ms)?;
    if let Some(dir) = out_dir(&args.out)? {
        let json = serde_json::to_string_pretty(&report).context("serializing report")?;
        write_file(dir, "codec_bench.json", json.as_bytes())?;
        write_file(dir, "tensor.adc", &encoded)?;
    }
    Ok(())
}

fn cmd_evolve(args: EvolveArgs, w: &mut dyn Write) -> Result<(), Failure> {
    check_charts(args.charts, &args.common.out)?;
    if args.iterations == 0 {
        return Err(Failure::Input(anyhow!("--iterations must be positive")));
    }
    let profile = load(&args.common)?;
    let config = sim_config(args.efficiency_k)?;
    let drift = load_drift(&profile, &args.drift, args.iterations)?;
    let report =
        run_evolution(&profile, &drift, args.iterations, schedule(&args.drift)?, tracked_kinds(&args.drift), &config)
            .map_err(evolution_failure)?;

    let choices = |plan: &Plan| plan.choices.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(",");
    writeln!(w, "iterations:          {}", report.log.len())?;
    writeln!(w, "tracking iterations: {}", report.resolves())?;
    writeln!(w, "plan changes:        {}", report.plan_changes())?;
    writeln!(
        w,
        "initial plan:        {} ({} ms)",
        choices(&report.initial_plan),
        ms(report.initial_plan.objective_ms)
    )?;
    writeln!(w, "final plan:          {} ({} ms)", choices(&report.final_plan), ms(report.final_plan.objective_ms))?;
    writeln!(
        w,
        "mean throughput:     adaptive {:.4}, static {:.4} samples/s, ratio {:.4}",
        report.adaptive_mean_throughput,
        report.static_mean_throughput,
        report.throughput_ratio()
    )?;
    writeln!(
        w,
        "with re-solve time:  adaptive {:.4} samples/s ({:.3} ms solving)",
        report.adaptive_charged_mean_throughput, report.resolve_wall_ms
    )?;
    writeln!(
        w,
        "out-of-memory:       adaptive {}, static {} iterations",
        report.adaptive_oom_iterations, report.static_oom_iterations
    )?;

    if let Some(dir) = out_dir(&args.common.out)? {
        let mut buf = Vec::new();
        drift.write_csv(&mut buf).context("writing drift")?;
        write_file(dir, "drift.csv", &buf)?;
        let mut buf = Vec::new();
        report.write_csv(&mut buf).context("writing evolution log")?;
        write_file(dir, "evolution.csv", &buf)?;
        if args.charts {
            write_file(dir, "outlier_drift.svg", drift_chart(&drift).render().as_bytes())?;
        }
    }
    Ok(())
}
