use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use offload_core::analysis::Buckets;
use offload_core::bandwidth::DEFAULT_SSD_RATE;
use offload_core::planner::{read_plan, write_plan};
use offload_core::roofline::write_curve_csv;
use offload_core::{
    characterize, cost_efficiency, default_cost_config, gen_random_trace, gen_transformer_trace,
    ideal_report, parse_trace, plan_migrations, roofline_curve, saturation_bandwidth, simulate,
    simulate_layer_granularity, simulate_on_demand, write_trace, ByteSize, ChannelConfig,
    ChannelSpec, HardwareCostConfig, LayerMap, Policy, ScenarioConfig, SimReport, Trace,
    TransformerGenConfig,
};

#[derive(Parser)]
#[command(
    name = "offloader",
    version,
    about = "Plan and simulate tensor offloading for GPU training traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic trace.
    GenTrace(GenTraceArgs),
    /// Per-kernel memory use and inactive-period histogram.
    Analyze(AnalyzeArgs),
    /// Compute a migration plan.
    Plan(PlanArgs),
    /// Run one policy and report timing.
    Simulate(SimulateArgs),
    /// Throughput against migration bandwidth.
    Roofline(RooflineArgs),
    /// Run every policy on one scenario.
    Compare(CompareArgs),
    /// Hardware cost of each setup.
    Cost(CostArgs),
}

/// Where the trace, capacity and links come from. Flags override a scenario.
#[derive(Args, Clone, Default)]
struct Setup {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// GPU memory in bytes.
    #[arg(long)]
    capacity: Option<u64>,
    /// SSD offload rate in bytes per microsecond; also the prefetch rate unless
    /// --ssd-prefetch-rate is given.
    #[arg(long)]
    ssd_rate: Option<f64>,
    #[arg(long)]
    ssd_prefetch_rate: Option<f64>,
    /// Host memory link rate in bytes per microsecond, both directions.
    #[arg(long)]
    host_rate: Option<f64>,
    /// Bytes of host memory the planner may use.
    #[arg(long)]
    host_cap: Option<u64>,
}

#[derive(Args)]
struct GenTraceArgs {
    /// Transformer generator config as JSON; the standard model otherwise.
    #[arg(long, conflicts_with = "random")]
    config: Option<PathBuf>,
    /// Random trace of KERNELS,TENSORS instead of a transformer.
    #[arg(long, value_parser = parse_pair)]
    random: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    capacity: u64,
    /// Directory for kernels.csv, histogram.csv and summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    setup: Setup,
    /// Plan file; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    setup: Setup,
    #[arg(long)]
    policy: Option<Policy>,
    /// Plan file for the lifetime-aware policy; planned on the fly otherwise.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Directory for report.json, timeline.csv and utilization.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Utilization window in microseconds; the whole run by default.
    #[arg(long)]
    window: Option<u64>,
}

#[derive(Args)]
struct RooflineArgs {
    #[arg(long)]
    trace: PathBuf,
    /// GPU memory in bytes.
    #[arg(long, default_value_t = 94_000_000_000)]
    capacity: u64,
    /// Comma-separated bandwidths in GB/s.
    #[arg(long, value_delimiter = ',', required = true)]
    bandwidths: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    setup: Setup,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// Cost config JSON; the built-in price list otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Measured throughput of one setup, as SETUP=VALUE. Repeatable.
    #[arg(long, value_parser = parse_throughput)]
    throughput: Vec<(String, f64)>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected KERNELS,TENSORS")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn parse_throughput(s: &str) -> Result<(String, f64), String> {
    let (name, v) = s.split_once('=').ok_or("expected SETUP=VALUE")?;
    let v: f64 = v.parse().map_err(|e| format!("{e}"))?;
    if !(v.is_finite() && v >= 0.0) {
        return Err("throughput must be a non-negative number".into());
    }
    Ok((name.to_string(), v))
}

enum Failure {
    Usage(String),
    Pipeline(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Pipeline(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// A file, or stdout for `None`.
fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f))
        .with_context(|| format!("reading {}", path.display()))
}

fn load_trace(path: &Path) -> anyhow::Result<Trace> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_trace(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

struct Resolved {
    trace: Trace,
    capacity: u64,
    channels: ChannelConfig,
    host_cap: Option<u64>,
    scenario: Option<ScenarioConfig>,
}

impl Setup {
    fn resolve(&self) -> Result<Resolved, Failure> {
        let scenario: Option<ScenarioConfig> =
            self.scenario.as_deref().map(read_json).transpose()?;
        let trace = match (&self.trace, &scenario) {
            (Some(p), _) => load_trace(p)?,
            (None, Some(s)) => {
                s.validate().map_err(|e| anyhow!("scenario: {e}"))?;
                match (&s.trace, &s.generator) {
                    (Some(p), _) => {
                        let base = self
                            .scenario
                            .as_deref()
                            .and_then(Path::parent)
                            .unwrap_or(Path::new("."));
                        load_trace(&base.join(p))?
                    }
                    (None, Some(g)) => {
                        gen_transformer_trace(g).map_err(|e| anyhow!("generator: {e}"))?
                    }
                    (None, None) => unreachable!("validated"),
                }
            }
            (None, None) => return Err(usage("a trace is required: pass --trace or --scenario")),
        };
        let capacity = self
            .capacity
            .or(scenario.as_ref().map(|s| s.capacity_bytes))
            .ok_or_else(|| usage("--capacity is required"))?;
        if capacity == 0 {
            return Err(usage("--capacity must be positive"));
        }
        let mut channels = match &scenario {
            Some(s) => {
                ChannelConfig::from_specs(&s.channels).map_err(|e| anyhow!("scenario: {e}"))?
            }
            None => ChannelConfig::default(),
        };
        if self.ssd_rate.is_some() || self.ssd_prefetch_rate.is_some() {
            let old = channels.ssd.take();
            let off = self
                .ssd_rate
                .or(old.as_ref().map(|s| s.offload_rate_bytes_per_us))
                .unwrap_or(DEFAULT_SSD_RATE);
            let pre = self.ssd_prefetch_rate.or(self.ssd_rate).unwrap_or(off);
            channels.ssd = Some(ChannelSpec {
                name: "ssd".into(),
                offload_rate_bytes_per_us: off,
                prefetch_rate_bytes_per_us: pre,
            });
        }
        if let Some(rate) = self.host_rate {
            channels.host = Some(ChannelSpec::symmetric("host", rate));
        }
        if channels.ssd.is_none() && channels.host.is_none() {
            channels = ChannelConfig::ssd_only(DEFAULT_SSD_RATE);
        }
        channels.validate().map_err(|e| usage(e.to_string()))?;
        let host_cap = self
            .host_cap
            .or(scenario.as_ref().and_then(|s| s.host_cap_bytes));
        Ok(Resolved {
            trace,
            capacity,
            channels,
            host_cap,
            scenario,
        })
    }
}

fn gen_trace(args: GenTraceArgs) -> Outcome {
    let trace = match (args.random, &args.config) {
        (Some((n, m)), _) => {
            if n == 0 && m > 0 {
                return Err(usage("tensors need at least one kernel"));
            }
            gen_random_trace(args.seed, n, m, 1..=1 << 30, 1..=10_000)
        }
        (None, config) => {
            let mut cfg = match config {
                Some(p) => read_json::<TransformerGenConfig>(p)?,
                None => TransformerGenConfig::standard(),
            };
            cfg.seed = args.seed;
            gen_transformer_trace(&cfg).map_err(|e| anyhow!("generator: {e}"))?
        }
    };
    info!(
        "{} kernels, {} tensors",
        trace.num_kernels(),
        trace.tensors.len()
    );
    let mut w = output(args.out.as_deref())?;
    write_trace(&trace, &mut w).context("writing trace")?;
    w.flush().context("writing trace")?;
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    capacity: u64,
    kernels: usize,
    tensors: usize,
    peak_required_bytes: u64,
    mean_active_fraction: f64,
    max_active_fraction: f64,
    inactive_periods: u64,
}

fn analyze(args: AnalyzeArgs) -> Outcome {
    let trace = load_trace(&args.trace)?;
    let report = characterize(
        &trace,
        ByteSize(args.capacity),
        &Buckets::default_sizes(),
        &Buckets::default_durations(),
    )
    .map_err(|_| usage("--capacity must be positive"))?;
    let summary = Summary {
        capacity: args.capacity,
        kernels: trace.num_kernels(),
        tensors: trace.tensors.len(),
        peak_required_bytes: report.required_bytes.iter().copied().max().unwrap_or(0),
        mean_active_fraction: report.mean_active_fraction,
        max_active_fraction: report.max_active_fraction,
        inactive_periods: report.total_periods,
    };
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            report
                .write_kernels_csv(output(Some(&dir.join("kernels.csv")))?)
                .context("writing kernels.csv")?;
            report
                .write_histogram_csv(output(Some(&dir.join("histogram.csv")))?)
                .context("writing histogram.csv")?;
            let mut w = output(Some(&dir.join("summary.json")))?;
            serde_json::to_writer_pretty(&mut w, &summary).context("writing summary.json")?;
            w.flush().context("writing summary.json")?;
        }
        None => {
            let mut w = output(None)?;
            serde_json::to_writer_pretty(&mut w, &summary).context("writing summary")?;
            writeln!(w).context("writing summary")?;
            w.flush().context("writing summary")?;
        }
    }
    Ok(())
}

fn plan(args: PlanArgs) -> Outcome {
    let r = args.setup.resolve()?;
    let plan = plan_migrations(&r.trace, r.capacity, &r.channels, r.host_cap)
        .map_err(anyhow::Error::from)?;
    if plan.has_warning() {
        warn!(
            "memory still exceeds capacity at kernels {:?}",
            plan.over_capacity_kernels
        );
    }
    info!(
        "{} migrations, residual peak {} bytes",
        plan.committed.len(),
        plan.residual_peak()
    );
    let path = args.out.or(r.scenario.and_then(|s| s.outputs.plan));
    let mut w = output(path.as_deref())?;
    write_plan(&plan, &mut w).context("writing plan")?;
    w.flush().context("writing plan")?;
    Ok(())
}

fn run_policy(r: &Resolved, policy: Policy, plan_file: Option<&Path>) -> anyhow::Result<SimReport> {
    Ok(match policy {
        Policy::Ideal => ideal_report(&r.trace),
        Policy::OnDemand => simulate_on_demand(&r.trace, r.capacity, &r.channels)?,
        Policy::LayerGranularity => {
            let layers = LayerMap::from_trace(&r.trace)?;
            simulate_layer_granularity(&r.trace, r.capacity, &r.channels, &layers)?
        }
        Policy::LifetimeAware => {
            let entries = match plan_file {
                Some(p) => {
                    let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                    read_plan(BufReader::new(f))
                        .with_context(|| format!("reading {}", p.display()))?
                        .entries
                }
                None => plan_migrations(&r.trace, r.capacity, &r.channels, r.host_cap)?.entries,
            };
            simulate(&r.trace, &entries, r.capacity, &r.channels)?
        }
    })
}

fn simulate_cmd(args: SimulateArgs) -> Outcome {
    let r = args.setup.resolve()?;
    let policy = args
        .policy
        .or(r.scenario.as_ref().and_then(|s| s.policy))
        .unwrap_or(Policy::LifetimeAware);
    if args.plan.is_some() && policy != Policy::LifetimeAware {
        return Err(usage("--plan only applies to the lifetime-aware policy"));
    }
    let report = run_policy(&r, policy, args.plan.as_deref())?;
    info!(
        "{policy}: {} us, {} us stalled, {} emergency offloads",
        report.total_time.0, report.stall_time_total.0, report.emergency_offloads
    );
    let window = args.window.unwrap_or(report.total_time.0);
    let outputs = r.scenario.map(|s| s.outputs).unwrap_or_default();
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let mut w = output(Some(&dir.join("report.json")))?;
            report.write_json(&mut w).context("writing report.json")?;
            w.flush().context("writing report.json")?;
            report
                .write_timeline_csv(output(Some(&dir.join("timeline.csv")))?)
                .context("writing timeline.csv")?;
            report
                .write_utilization_csv(output(Some(&dir.join("utilization.csv")))?, window)
                .context("writing utilization.csv")?;
        }
        None => {
            let mut w = output(outputs.report.as_deref())?;
            report.write_json(&mut w).context("writing report")?;
            writeln!(w).context("writing report")?;
            w.flush().context("writing report")?;
            if let Some(p) = &outputs.timeline {
                report
                    .write_timeline_csv(output(Some(p))?)
                    .context("writing timeline")?;
            }
        }
    }
    Ok(())
}

fn roofline(args: RooflineArgs) -> Outcome {
    if args.capacity == 0 {
        return Err(usage("--capacity must be positive"));
    }
    if let Some(b) = args
        .bandwidths
        .iter()
        .find(|b| !(b.is_finite() && **b > 0.0))
    {
        return Err(usage(format!("bandwidth {b} must be positive")));
    }
    let trace = load_trace(&args.trace)?;
    let rates: Vec<f64> = args.bandwidths.iter().map(|gbps| gbps * 1_000.0).collect();
    let curve = roofline_curve(&trace, args.capacity, &rates).map_err(anyhow::Error::from)?;
    match saturation_bandwidth(&trace, args.capacity) {
        Some(b) => info!("saturates at {} GB/s", b as f64 / 1_000.0),
        None => info!("never saturates"),
    }
    write_curve_csv(&curve, output(args.out.as_deref())?).context("writing curve")?;
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    policy: Policy,
    total_us: u64,
    stall_us: u64,
    emergency_offloads: u64,
    peak_resident_bytes: u64,
    normalized_throughput: String,
}

fn compare(args: CompareArgs) -> Outcome {
    let r = args.setup.resolve()?;
    let ideal = r.trace.iteration_time();
    let mut out = csv::Writer::from_writer(output(args.out.as_deref())?);
    for policy in Policy::ALL {
        let report = match run_policy(&r, policy, None) {
            Ok(rep) => rep,
            Err(e) if policy == Policy::LayerGranularity => {
                warn!("skipping {policy}: {e}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let normalized = if report.total_time.0 == 0 {
            1.0
        } else {
            ideal as f64 / report.total_time.0 as f64
        };
        out.serialize(CompareRow {
            policy,
            total_us: report.total_time.0,
            stall_us: report.stall_time_total.0,
            emergency_offloads: report.emergency_offloads,
            peak_resident_bytes: report.peak_resident_bytes,
            normalized_throughput: format!("{normalized:.6}"),
        })
        .context("writing comparison")?;
    }
    out.flush().context("writing comparison")?;
    Ok(())
}

#[derive(Serialize)]
struct CostLine {
    setup: String,
    total_dollars: String,
    savings_vs_reference: String,
    throughput: Option<f64>,
    throughput_per_million_dollars: Option<String>,
}

fn cost(args: CostArgs) -> Outcome {
    let mut config: HardwareCostConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => default_cost_config(),
    };
    for (name, value) in &args.throughput {
        let setup = config
            .setups
            .iter_mut()
            .find(|s| &s.name == name)
            .ok_or_else(|| usage(format!("no setup named {name}")))?;
        setup.throughput = Some(*value);
    }
    let report = cost_efficiency(&config).map_err(|e| anyhow!(e))?;
    let mut out = csv::Writer::from_writer(output(args.out.as_deref())?);
    for row in &report.rows {
        out.serialize(CostLine {
            setup: row.setup.clone(),
            total_dollars: format!("{:.2}", row.total_dollars),
            savings_vs_reference: format!("{:.2}", row.savings_vs_reference),
            throughput: row.throughput,
            throughput_per_million_dollars: row.throughput_per_million.map(|t| format!("{t:.4}")),
        })
        .context("writing cost report")?;
    }
    out.flush().context("writing cost report")?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OFFLOADER_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Analyze(a) => analyze(a),
        Command::Plan(a) => plan(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Roofline(a) => roofline(a),
        Command::Compare(a) => compare(a),
        Command::Cost(a) => cost(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
