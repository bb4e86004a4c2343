use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fssdp::experiment::{compare_csv, summary_table, ExperimentConfig, ExperimentError, ExperimentOutput, OutputFormat, TraceSource};
use fssdp::{gen_synthetic_trace, save_trace, spag_traffic, sprs_traffic, ChunkPlacement, Collective, Sparsity, TraceMeta};

/// Plan, cost and simulate fully sharded sparse data parallel MoE training.
#[derive(Debug, Parser)]
#[command(name = "fssdp", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Both,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => OutputFormat::Json,
            Format::Csv => OutputFormat::Csv,
            Format::Both => OutputFormat::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CollectiveArg {
    Spag,
    Sprs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every configured policy and print a summary table.
    Simulate(RunArgs),
    /// Run a policy sweep and write one combined CSV row per policy.
    Compare(RunArgs),
    /// Emit shard and materialization plans for a set of expert loads.
    Plan(PlanArgs),
    /// Check a placement pair against the sparse all-gather or
    /// reduce-scatter rules. Exits 0 when valid and 3 when not.
    Validate(ValidateArgs),
    /// Write a synthetic expert-load trace as JSON lines.
    GenTrace(GenTraceArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Trace file to use instead of the config's trace source.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// JSON array with one array of expert loads per layer. Estimated from
    /// the trace when omitted.
    #[arg(long)]
    loads: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Iterations averaged when estimating loads from the trace.
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Overlap degree; derived from attention time when omitted.
    #[arg(long)]
    t: Option<usize>,
    /// Memory capacity in experts; derived from device memory when omitted.
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long, value_enum)]
    collective: CollectiveArg,
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    post: PathBuf,
    #[arg(long, default_value_t = 1)]
    chunk_bytes: u64,
}

#[derive(Debug, Args)]
struct GenTraceArgs {
    #[arg(long)]
    iterations: usize,
    #[arg(long)]
    tokens_per_device: u64,
    /// Defaults to the config model when omitted.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long, default_value_t = fssdp::trace::DEFAULT_SKEW)]
    skew: f64,
    #[arg(long, default_value_t = fssdp::trace::DEFAULT_DRIFT)]
    drift: f64,
    /// Output file; defaults to `trace.jsonl` in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn io(path: &Path, err: std::io::Error) -> Self {
        Self::data(format!("{}: {err}", path.display()))
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Simulate(args) => cmd_run(cli, args, false),
        Command::Compare(args) => cmd_run(cli, args, true),
        Command::Plan(args) => cmd_plan(cli, args),
        Command::Validate(args) => cmd_validate(args),
        Command::GenTrace(args) => cmd_gen_trace(cli, args),
    }
}

/// Loads the config and applies command-line overrides.
fn load_config(cli: &Cli, trace: Option<&PathBuf>) -> CliResult<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::config("--config is required"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(format) = cli.format {
        cfg.format = format.into();
    }
    if let Some(trace) = trace {
        cfg.trace = TraceSource::Path(trace.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::io(&path, e))?;
    Ok(path)
}

fn cmd_run(cli: &Cli, args: &RunArgs, compare: bool) -> CliResult {
    let cfg = load_config(cli, args.trace.as_ref())?;
    let trace = cfg.resolve_trace()?;
    let reports = cfg.run_policies(&trace)?;
    print!("{}", summary_table(&reports));

    let dir = out_dir(cli, Some(&cfg));
    let stem = if compare { "compare" } else { "report" };
    let output = ExperimentOutput::new(cfg.clone(), reports);
    let mut written = Vec::new();
    if cfg.format.json() {
        written.push(write_file(&dir, &format!("{stem}.json"), &output.to_json())?);
    }
    if cfg.format.csv() {
        let csv = if compare {
            compare_csv(&output.reports)
        } else {
            output.timeline_csv()
        };
        let name = if compare { "compare.csv" } else { "timeline.csv" };
        written.push(write_file(&dir, name, &csv)?);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_plan(cli: &Cli, args: &PlanArgs) -> CliResult {
    let cfg = load_config(cli, args.trace.as_ref())?;
    let loads = match &args.loads {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
            serde_json::from_str::<Vec<Vec<f64>>>(&text)
                .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?
        }
        None => {
            if args.window == 0 {
                return Err(Failure::config("--window must be at least 1"));
            }
            let trace = cfg.resolve_trace()?;
            cfg.estimated_loads(&trace, args.window)?
        }
    };
    let plan = cfg.plan(loads, args.t, args.m)?;
    let json = serde_json::to_string_pretty(&plan).expect("plan serializes");
    let path = write_file(&out_dir(cli, Some(&cfg)), "plan.json", &json)?;
    let added: usize = plan.materializations.iter().map(|m| m.target.len() - m.source.len()).sum();
    println!(
        "t = {}, m = {}, {} replicas added over {} layers",
        plan.overlap_degree,
        plan.memory_capacity,
        added,
        plan.materializations.len()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn read_placement(path: &Path) -> CliResult<ChunkPlacement> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn cmd_validate(args: &ValidateArgs) -> CliResult {
    let pre = read_placement(&args.pre)?;
    let post = read_placement(&args.post)?;
    let (collective, name) = match args.collective {
        CollectiveArg::Spag => (Collective::Spag, "spag"),
        CollectiveArg::Sprs => (Collective::Sprs, "sprs"),
    };
    let result: Result<(_, Sparsity), _> = match collective {
        Collective::Spag => spag_traffic(&pre, &post, args.chunk_bytes),
        Collective::Sprs => sprs_traffic(&pre, &post, args.chunk_bytes),
    };
    match result {
        Ok((_, report)) => {
            println!(
                "valid {name}: lambda = {:.4}, {} chunks involved, {} bytes total, bottleneck device {} at {} bytes",
                report.lambda,
                report.involved_chunks,
                report.total_interdevice_bytes,
                report.bottleneck_device.index(),
                report.bottleneck_bytes
            );
            Ok(())
        }
        Err(e) => Err(Failure {
            code: 3,
            message: format!("invalid {name} pair: {e}"),
        }),
    }
}

fn cmd_gen_trace(cli: &Cli, args: &GenTraceArgs) -> CliResult {
    let cfg = match &cli.config {
        Some(_) => Some(load_config(cli, None)?),
        None => None,
    };
    let pick = |flag: Option<usize>, from_cfg: fn(&ExperimentConfig) -> usize, name: &str| {
        flag.or_else(|| cfg.as_ref().map(from_cfg))
            .ok_or_else(|| Failure::config(format!("--{name} is required without --config")))
    };
    let meta = TraceMeta {
        iterations: args.iterations,
        layers: pick(args.layers, |c| c.model.layers, "layers")?,
        experts: pick(args.experts, |c| c.model.experts_per_layer, "experts")?,
        devices: pick(args.devices, |c| c.topology.num_devices(), "devices")?,
        tokens_per_device: args.tokens_per_device,
    };
    if meta.iterations == 0 || meta.layers == 0 || meta.experts == 0 || meta.devices == 0 {
        return Err(Failure::config("trace dimensions must be positive"));
    }
    if !(args.skew > 0.0) || !(args.drift >= 0.0) {
        return Err(Failure::config("--skew must be positive and --drift non-negative"));
    }
    let seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let trace = gen_synthetic_trace(meta, args.skew, args.drift, seed);
    let path = match &args.output {
        Some(p) => p.clone(),
        None => {
            let dir = out_dir(cli, cfg.as_ref());
            fs::create_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
            dir.join("trace.jsonl")
        }
    };
    save_trace(&trace, &path).map_err(|e| Failure::data(e.to_string()))?;
    println!(
        "wrote {} ({} iterations, max/mean expert load {:.2})",
        path.display(),
        trace.meta.iterations,
        trace.max_over_mean()
    );
    Ok(())
}
