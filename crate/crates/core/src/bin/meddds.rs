use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use meddds::evaluation::{self, DatasetManifest, SplitSpec};
use meddds::inference::{Classifier, ExternalAdapter, QuadrantLinearModel};
use meddds::nodes::{self, BenchParams, DoctorNode, InferenceService, NodeConfig, NodeError, SimPipeline};
use meddds::pubsub::Reliability;
use meddds::samples::{self, Label};
use meddds::telemetry;
use meddds::transport::{FaultProfile, Locator, DEFAULT_DISCOVERY_GROUP};

const EXIT_USAGE: u8 = 1;
const EXIT_TIMEOUT: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "meddds", version, about = "Remote X-ray classification over a minimal pub/sub middleware")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the inference node until interrupted.
    Infer(InferArgs),
    /// Publish one PGM image and print the classification.
    Send(SendArgs),
    /// Publish synthetic images and write latency/throughput CSVs.
    Bench(BenchArgs),
    /// Stratified train/val/test split of a manifest.
    Split(SplitArgs),
    /// Accuracy and macro precision/recall of predictions against truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ReliabilityArg {
    Reliable,
    BestEffort,
}

#[derive(Args)]
struct NetArgs {
    /// Discovery multicast group.
    #[arg(long, env = "MEDDDS_GROUP", default_value_t = DEFAULT_DISCOVERY_GROUP)]
    group: Locator,
    /// Unicast port; chosen by the OS when omitted.
    #[arg(long)]
    port: Option<u16>,
    /// Interface for multicast traffic.
    #[arg(long, env = "MEDDDS_INTERFACE", default_value_t = Ipv4Addr::UNSPECIFIED)]
    interface: Ipv4Addr,
    #[arg(long, value_enum, default_value = "reliable")]
    reliability: ReliabilityArg,
    #[arg(long, default_value_t = meddds::wire::DEFAULT_FRAG_SIZE)]
    frag_size: usize,
}

#[derive(Args)]
struct SimArgs {
    /// Run both nodes in this process over a simulated network with this
    /// loss probability.
    #[arg(long)]
    sim_loss: Option<f64>,
    #[arg(long, default_value_t = 0)]
    sim_seed: u64,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Use the built-in quadrant classifier (the default).
    #[arg(long, conflicts_with = "adapter")]
    builtin: bool,
    /// External classifier command; the PGM path is appended.
    #[arg(long)]
    adapter: Option<String>,
    #[arg(long, default_value_t = 30_000)]
    adapter_timeout_ms: u64,
}

#[derive(Args)]
struct SendArgs {
    /// PGM (P5) image to classify.
    image: PathBuf,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 5_000)]
    timeout_ms: u64,
    /// Also write the latency record to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Images per second; 0 sends back to back.
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    /// Side length of the square synthetic images.
    #[arg(long, default_value_t = 128)]
    size: u32,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Wait for discovery, and for results after the last publish.
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to the manifest's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Also write the confusion matrix to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Failure { code: EXIT_USAGE, message: message.to_string() }
    }
}

impl From<NodeError> for Failure {
    fn from(e: NodeError) -> Self {
        let code = if matches!(e, NodeError::Timeout) { EXIT_TIMEOUT } else { EXIT_USAGE };
        Failure { code, message: e.to_string() }
    }
}

impl From<evaluation::EvalError> for Failure {
    fn from(e: evaluation::EvalError) -> Self {
        Failure::usage(e)
    }
}

fn node_config(net: &NetArgs, sim: Option<&SimArgs>) -> Result<NodeConfig, Failure> {
    let simulated = sim.and_then(|s| s.sim_loss.map(|loss| FaultProfile::lossy(loss, s.sim_seed)));
    let config = NodeConfig {
        discovery_group: net.group,
        unicast_port: net.port,
        interface: net.interface,
        reliability: match net.reliability {
            ReliabilityArg::Reliable => Reliability::Reliable,
            ReliabilityArg::BestEffort => Reliability::BestEffort,
        },
        frag_size: net.frag_size,
        simulated,
        ..NodeConfig::default()
    };
    config.validate().map_err(Failure::usage)?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = if matches!(cli.command, Cmd::Infer(_)) { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match cli.command {
        Cmd::Infer(a) => infer(a),
        Cmd::Send(a) => send(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Split(a) => split(a),
        Cmd::Eval(a) => eval(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("meddds: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn infer(args: InferArgs) -> Result<(), Failure> {
    let config = node_config(&args.net, None)?;
    let classifier: Box<dyn Classifier> = match &args.adapter {
        Some(cmd) => {
            let adapter = ExternalAdapter::new(cmd)
                .map_err(Failure::usage)?
                .with_timeout(Duration::from_millis(args.adapter_timeout_ms));
            if adapter.resolve_program().is_none() {
                return Err(Failure::usage(format!("adapter program not found: {cmd}")));
            }
            Box::new(adapter)
        }
        None => Box::new(QuadrantLinearModel::new()),
    };
    let name = classifier.name().to_string();
    let transport = config.udp_transport()?;
    let _service = InferenceService::start(transport, &config, classifier)?;
    log::info!("inference node up on group {} with classifier {name}", config.discovery_group);
    loop {
        thread::park();
    }
}

fn send(args: SendArgs) -> Result<(), Failure> {
    let config = node_config(&args.net, Some(&args.sim))?;
    let image = samples::load_pgm(&args.image).map_err(|e| Failure::usage(format!("{}: {e}", args.image.display())))?;
    let timeout = Duration::from_millis(args.timeout_ms);
    let (result, record) = match config.simulated {
        Some(profile) => SimPipeline::start(&config, profile)?.doctor.send(image, timeout)?,
        None => DoctorNode::start(config.udp_transport()?, &config)?.send(image, timeout)?,
    };
    println!(
        "label={} confidence={:.4} rtt_ms={:.3}",
        result.label,
        result.confidence(),
        record.rtt_us() as f64 / 1_000.0
    );
    if let Some(path) = &args.out {
        telemetry::write_latency_csv(&[record], path).map_err(Failure::usage)?;
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), Failure> {
    let config = node_config(&args.net, Some(&args.sim))?;
    if args.size == 0 || !(args.rate >= 0.0 && args.rate.is_finite()) {
        return Err(Failure::usage("size must be positive and rate non-negative"));
    }
    let params = BenchParams {
        count: args.count,
        rate_per_sec: args.rate,
        size: args.size,
        seed: args.seed,
        timeout: Duration::from_millis(args.timeout_ms),
        ..BenchParams::default()
    };
    let report = match config.simulated {
        Some(profile) => nodes::run_bench(&SimPipeline::start(&config, profile)?.doctor, &params)?,
        None => nodes::run_bench(&DoctorNode::start(config.udp_transport()?, &config)?, &params)?,
    };
    report.write_csvs(&args.out)?;
    println!("{}", report.summary_line());
    println!("{}", report.detail_line());
    if report.is_complete() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_PARTIAL,
            message: format!(
                "partial completion: {} of {} results, {} timeouts, {} orphans",
                report.records.len(),
                report.count,
                report.timeouts,
                report.orphans
            ),
        })
    }
}

fn split(args: SplitArgs) -> Result<(), Failure> {
    let manifest = DatasetManifest::read_csv(&args.manifest)?;
    let split = evaluation::stratified_split(&manifest, &SplitSpec::with_seed(args.seed))?;
    let dir = args.out.unwrap_or_else(|| args.manifest.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    std::fs::create_dir_all(&dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        part.write_csv(dir.join(format!("{name}.csv")))?;
    }
    let counts = [split.train.class_counts(), split.val.class_counts(), split.test.class_counts()];
    for label in Label::ALL {
        let k = label.index();
        println!("{label} train={} val={} test={}", counts[0][k], counts[1][k], counts[2][k]);
    }
    for label in &split.empty_classes {
        eprintln!("warning: class {label} is empty");
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let (cm, m) = evaluation::evaluate_files(&args.truth, &args.pred)?;
    println!("{m}");
    if let Some(path) = &args.out {
        evaluation::write_confusion_csv(&cm, path)?;
    }
    Ok(())
}
