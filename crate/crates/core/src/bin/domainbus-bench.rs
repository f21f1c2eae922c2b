use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use domainbus::bench::{self, BenchConfig, TransportKind};
use domainbus::buffers::RegionConfig;
use domainbus::daemon::{DaemonConfig, ForceMode};
use domainbus::runtime::TimeBoundPolicy;
use domainbus::transport::NetConfig;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TransportArg {
    Sim,
    Udp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Record,
    Fail,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Auto,
    Poll,
    Event,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReliabilityArg {
    Reliable,
    BestEffort,
}

/// Round-trip latency benchmark: driver, relay and listener over a
/// simulated or loopback UDP network.
#[derive(Debug, Parser)]
#[command(name = "domainbus-bench", version)]
struct Args {
    /// Sample size in bytes (at least 8).
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Send rate in Hz.
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Fraction of worst latencies left out of the trimmed mean.
    #[arg(long, default_value_t = 0.10)]
    trim: f64,
    #[arg(long, value_enum, default_value = "on")]
    eager_notify: Switch,
    #[arg(long, value_enum, default_value = "reliable")]
    reliability: ReliabilityArg,
    #[arg(long, value_enum, default_value = "sim")]
    transport: TransportArg,
    /// Simulated loss probability.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    /// Simulated one-way delay in nanoseconds.
    #[arg(long, default_value_t = 0)]
    delay_ns: u64,
    /// Simulated busy time after each blocking network wake, in nanoseconds.
    #[arg(long, default_value_t = 5_000)]
    wake_cost_ns: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write results as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Per-call library time bound in nanoseconds.
    #[arg(long, default_value_t = 1_000_000)]
    time_bound_ns: u64,
    #[arg(long, value_enum, default_value = "record")]
    bound_policy: PolicyArg,
    #[arg(long, default_value_t = 1024)]
    heap_slots_per_kind: usize,
    #[arg(long, default_value_t = 16 * 1024 * 1024)]
    region_size: u64,
    #[arg(long, default_value_t = 64 * 1024 * 1024)]
    region_limit: u64,
    #[arg(long, default_value_t = 4096)]
    granule_size: u64,
    #[arg(long, default_value_t = 1000)]
    heartbeat_period_ms: u64,
    #[arg(long, default_value_t = 10_000.0)]
    mode_up_hz: f64,
    #[arg(long, default_value_t = 5_000.0)]
    mode_down_hz: f64,
    #[arg(long, value_enum, default_value = "auto")]
    force_mode: ModeArg,
    /// Run this many eager on/off pairs instead of a single configuration.
    #[arg(long)]
    ab_pairs: Option<usize>,
}

impl Args {
    fn config(&self) -> BenchConfig {
        let bound = Duration::from_nanos(self.time_bound_ns);
        BenchConfig {
            sample_len: self.size,
            rate_hz: self.rate,
            count: self.count,
            trim: self.trim,
            eager_notify: matches!(self.eager_notify, Switch::On),
            reliable: matches!(self.reliability, ReliabilityArg::Reliable),
            transport: match self.transport {
                TransportArg::Sim => TransportKind::Sim,
                TransportArg::Udp => TransportKind::Udp,
            },
            net: NetConfig {
                loss_prob: self.loss,
                delay: Duration::from_nanos(self.delay_ns),
                seed: self.seed,
                wake_cost: Duration::from_nanos(self.wake_cost_ns),
                ..NetConfig::default()
            },
            policy: match self.bound_policy {
                PolicyArg::Record => TimeBoundPolicy::record(bound),
                PolicyArg::Fail => TimeBoundPolicy::fail(bound),
            },
            heap_slots_per_kind: self.heap_slots_per_kind,
            regions: RegionConfig {
                region_size: self.region_size,
                region_limit: self.region_limit,
                granule_size: self.granule_size,
            },
            daemon: DaemonConfig {
                heartbeat_period: Duration::from_millis(self.heartbeat_period_ms),
                mode_up_hz: self.mode_up_hz,
                mode_down_hz: self.mode_down_hz,
                force_mode: match self.force_mode {
                    ModeArg::Auto => ForceMode::Auto,
                    ModeArg::Poll => ForceMode::Poll,
                    ModeArg::Event => ForceMode::Event,
                },
                ..DaemonConfig::default()
            },
            ..BenchConfig::default()
        }
    }
}

fn run(args: &Args) -> domainbus::Result<()> {
    let config = args.config();
    if let Some(pairs) = args.ab_pairs {
        let results = bench::run_eager_ab(&config, pairs)?;
        println!("pair,eager_on_trimmed_ns,eager_off_trimmed_ns,reduction");
        for (i, (on, off)) in results.iter().enumerate() {
            println!("{i},{on:.0},{off:.0},{:.4}", (off - on) / off);
        }
        let (on, off): (f64, f64) = results
            .iter()
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        println!("# mean reduction {:.2}%", 100.0 * (off - on) / off);
        return Ok(());
    }
    let r = bench::run_benchmark(&config)?;
    println!(
        "sent {} relayed {} received {} duplicates {} corrupted {}",
        r.sent, r.relayed, r.received, r.duplicates, r.corrupted
    );
    if let Some(interval) = r.send_log.mean_interval() {
        println!("mean send interval {interval:?}");
    }
    println!(
        "copies/sample {:.3}, mode switches {}, time-bound violations {}",
        r.copies_per_sample,
        r.mode_switches(),
        r.time_bound_violations
    );
    let Some(row) = r.csv_row() else {
        println!("no samples received");
        return Ok(());
    };
    println!(
        "latency ns: mean {:.0} trimmed {:.0} p50 {} p99 {} min {} max {}",
        row.mean_ns, row.trimmed_mean_ns, row.p50_ns, row.p99_ns, row.min_ns, row.max_ns
    );
    if let Some(path) = &args.csv {
        bench::emit_csv(&[row], path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("domainbus-bench: {e}");
            ExitCode::FAILURE
        }
    }
}
