//! Driver / relay / listener latency benchmark.
//!
//! The driver paces samples onto a `ping` topic, a relay on a second domain
//! republishes each payload on `pong`, and a listener next to the driver
//! measures the round trip from the timestamp embedded in the payload.

pub mod stats;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::buffers::RegionConfig;
use crate::daemon::{DaemonConfig, DaemonHandle, DaemonReport};
use crate::dds::{Domain, DomainConfig, Process, QosProfile};
use crate::error::{Error, Result};
use crate::runtime::TimeBoundPolicy;
use crate::transport::{Endpoint, NetConfig, SimNetwork, Transport, UdpTransport};

pub use stats::{compute_stats, nearest_rank, trimmed_count, LatencyStats};

pub const PING_TOPIC: &str = "bench/ping";
pub const PONG_TOPIC: &str = "bench/pong";
pub const TIMESTAMP_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Sim,
    Udp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub sample_len: usize,
    pub rate_hz: f64,
    pub count: usize,
    pub trim: f64,
    pub eager_notify: bool,
    pub reliable: bool,
    pub transport: TransportKind,
    pub net: NetConfig,
    pub policy: TimeBoundPolicy,
    pub heap_slots_per_kind: usize,
    pub regions: RegionConfig,
    pub daemon: DaemonConfig,
    /// How long the listener keeps waiting after the last send.
    pub drain_timeout: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sample_len: 64,
            rate_hz: 100.0,
            count: 1000,
            trim: 0.10,
            eager_notify: true,
            reliable: true,
            transport: TransportKind::Sim,
            net: NetConfig::default(),
            policy: TimeBoundPolicy::record(Duration::from_millis(1)),
            heap_slots_per_kind: 1024,
            regions: RegionConfig::default(),
            daemon: DaemonConfig::default(),
            drain_timeout: Duration::from_secs(5),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "rate {} must be positive",
                self.rate_hz
            )));
        }
        if !(0.0..1.0).contains(&self.trim) {
            return Err(Error::InvalidConfig(format!(
                "trim fraction {} not in [0, 1)",
                self.trim
            )));
        }
        if self.sample_len < TIMESTAMP_LEN {
            return Err(Error::InvalidConfig(format!(
                "samples must hold an {TIMESTAMP_LEN}-byte timestamp"
            )));
        }
        self.net.validate()?;
        self.daemon.validate()?;
        self.domain_config().validate()
    }

    pub fn qos(&self) -> QosProfile {
        if self.reliable {
            QosProfile::RELIABLE
        } else {
            QosProfile::BEST_EFFORT
        }
    }

    pub fn domain_config(&self) -> DomainConfig {
        DomainConfig {
            policy: self.policy,
            heap_slots_per_kind: self.heap_slots_per_kind,
            regions: self.regions,
            eager_notify: self.eager_notify,
            ..DomainConfig::default()
        }
    }
}

/// Timestamp in the first eight bytes, zeros after.
pub fn make_payload(timestamp_ns: u64, len: usize) -> Vec<u8> {
    let mut p = vec![0u8; len.max(TIMESTAMP_LEN)];
    p[..TIMESTAMP_LEN].copy_from_slice(&timestamp_ns.to_le_bytes());
    p
}

pub fn payload_timestamp(payload: &[u8]) -> Option<u64> {
    payload
        .get(..TIMESTAMP_LEN)
        .map(|b| u64::from_le_bytes(b.try_into().expect("eight bytes")))
}

/// When each send was due and when it actually happened.
#[derive(Debug, Clone, Default)]
pub struct SendLog {
    pub start: Option<Instant>,
    pub deadlines: Vec<Instant>,
    pub sent_at: Vec<Instant>,
}

impl SendLog {
    /// Mean gap between consecutive sends.
    pub fn mean_interval(&self) -> Option<Duration> {
        let (first, last) = (self.sent_at.first()?, self.sent_at.last()?);
        let gaps = self.sent_at.len().checked_sub(1).filter(|&g| g > 0)?;
        Some((*last - *first) / gaps as u32)
    }
}

/// Calls `send(k)` for `k` in `0..count` on a fixed schedule: send `k` is
/// due at `t0 + k / rate`. Early sends sleep until due; late ones go at
/// once, and a stall never shifts later deadlines.
pub fn run_driver(
    count: usize,
    rate_hz: f64,
    mut send: impl FnMut(usize) -> Result<()>,
) -> Result<SendLog> {
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "rate {rate_hz} must be positive"
        )));
    }
    let period = Duration::from_secs_f64(1.0 / rate_hz);
    let mut log = SendLog::default();
    if count == 0 {
        return Ok(log);
    }
    let t0 = Instant::now();
    log.start = Some(t0);
    let mut deadline = t0;
    for k in 0..count {
        sleep_until(deadline);
        log.deadlines.push(deadline);
        log.sent_at.push(Instant::now());
        send(k)?;
        deadline += period;
    }
    Ok(log)
}

fn sleep_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_micros(200);
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN {
            thread::sleep(left - SPIN);
        } else {
            thread::yield_now();
        }
    }
}

/// One CSV row per configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub size_bytes: usize,
    pub rate_hz: f64,
    pub n: usize,
    pub mean_ns: f64,
    pub trimmed_mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
    pub mode_switches: u64,
    pub copies_per_sample: f64,
}

impl CsvRow {
    pub fn new(
        size_bytes: usize,
        rate_hz: f64,
        stats: &LatencyStats,
        mode_switches: u64,
        copies_per_sample: f64,
    ) -> Self {
        Self {
            size_bytes,
            rate_hz,
            n: stats.n,
            mean_ns: stats.mean_ns,
            trimmed_mean_ns: stats.trimmed_mean_ns,
            p50_ns: stats.p50_ns,
            p99_ns: stats.p99_ns,
            min_ns: stats.min_ns,
            max_ns: stats.max_ns,
            mode_switches,
            copies_per_sample,
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::IoFailure(std::io::Error::other(e))
}

pub fn emit_csv(rows: &[CsvRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub sent: usize,
    pub relayed: usize,
    pub received: usize,
    pub latencies_ns: Vec<u64>,
    pub duplicates: usize,
    pub corrupted: usize,
    pub stats: Option<LatencyStats>,
    pub send_log: SendLog,
    pub copies_per_sample: f64,
    pub daemons: [DaemonReport; 2],
    pub time_bound_violations: u64,
}

impl BenchResult {
    pub fn mode_switches(&self) -> u64 {
        self.daemons.iter().map(|d| d.mode_switches).sum()
    }

    pub fn csv_row(&self) -> Option<CsvRow> {
        self.stats.as_ref().map(|s| {
            CsvRow::new(
                self.config.sample_len,
                self.config.rate_hz,
                s,
                self.mode_switches(),
                self.copies_per_sample,
            )
        })
    }
}

fn attach(config: &BenchConfig) -> Result<(Arc<dyn Transport>, Arc<dyn Transport>)> {
    match config.transport {
        TransportKind::Sim => {
            let net = SimNetwork::new(config.net)?;
            Ok((net.attach(), net.attach()))
        }
        TransportKind::Udp => {
            let any: SocketAddr = "127.0.0.1:0".parse().expect("literal address");
            let mtu = config.net.mtu_datagram;
            Ok((
                Arc::new(UdpTransport::bind(any, mtu)?),
                Arc::new(UdpTransport::bind(any, mtu)?),
            ))
        }
    }
}

struct Relay {
    proc: Process,
    reader: crate::heap::Descriptor,
    writer: crate::heap::Descriptor,
    waitset: crate::heap::Descriptor,
}

fn relay_loop(mut r: Relay, stop: &AtomicBool) -> Result<usize> {
    let mut relayed = 0;
    while !stop.load(Ordering::Acquire) {
        if r.proc
            .wait(r.waitset, Duration::from_millis(20))?
            .is_empty()
        {
            continue;
        }
        loop {
            let got = r.proc.take(r.reader, 16)?;
            if got.is_empty() {
                break;
            }
            for s in got {
                match r.proc.publish(r.writer, &s.payload) {
                    Ok(_) => relayed += 1,
                    Err(Error::BackpressureFull) => {
                        log::warn!("relay dropped a sample: window full")
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(relayed)
}

struct Listened {
    latencies_ns: Vec<u64>,
    duplicates: usize,
    corrupted: usize,
}

/// Runs one benchmark configuration end to end.
pub fn run_benchmark(config: &BenchConfig) -> Result<BenchResult> {
    config.validate()?;
    let (ta, tb) = attach(config)?;
    let (ea, eb): (Endpoint, Endpoint) = (ta.local_endpoint(), tb.local_endpoint());
    let dcfg = config.domain_config();
    let a = Domain::with_network(dcfg, ta, vec![eb])?;
    let b = Domain::with_network(dcfg, tb, vec![ea])?;
    let qos = config.qos();
    let max_len = config.sample_len as u64;

    let mut driver = Process::open(&a)?;
    let ping_a = driver.topic(PING_TOPIC, max_len, qos)?;
    let pong_a = driver.topic(PONG_TOPIC, max_len, qos)?;
    let ping_w = driver.writer(ping_a, qos)?;

    let mut listener = Process::open(&a)?;
    let pong_r = listener.reader(pong_a, qos)?;
    let listen_ws = listener.waitset(&[pong_r.desc])?;

    let mut relay = Process::open(&b)?;
    let ping_b = relay.topic(PING_TOPIC, max_len, qos)?;
    let pong_b = relay.topic(PONG_TOPIC, max_len, qos)?;
    let relay_r = relay.reader(ping_b, qos)?;
    let relay_w = relay.writer(pong_b, qos)?;
    let relay_ws = relay.waitset(&[relay_r.desc])?;

    let da = DaemonHandle::spawn(&a, config.daemon)?;
    let db = DaemonHandle::spawn(&b, config.daemon)?;

    let stop_relay = Arc::new(AtomicBool::new(false));
    let sending_done = Arc::new(AtomicBool::new(false));
    let relay_thread = {
        let stop = Arc::clone(&stop_relay);
        let r = Relay {
            proc: relay,
            reader: relay_r.desc,
            writer: relay_w,
            waitset: relay_ws,
        };
        thread::Builder::new()
            .name("bench-relay".into())
            .spawn(move || relay_loop(r, &stop))?
    };
    let listener_thread = {
        let done = Arc::clone(&sending_done);
        let count = config.count;
        let sample_len = config.sample_len;
        let drain = config.drain_timeout;
        let clock = a.clone();
        thread::Builder::new().name("bench-listener".into()).spawn(
            move || -> Result<Listened> {
                let mut out = Listened {
                    latencies_ns: Vec::with_capacity(count),
                    duplicates: 0,
                    corrupted: 0,
                };
                let mut seen = std::collections::HashSet::new();
                let mut last_progress = Instant::now();
                while out.latencies_ns.len() < count {
                    if done.load(Ordering::Acquire) && last_progress.elapsed() > drain {
                        break;
                    }
                    if listener
                        .wait(listen_ws, Duration::from_millis(20))?
                        .is_empty()
                    {
                        continue;
                    }
                    for s in listener.take(pong_r.desc, 64)? {
                        let now = clock.runtime().now_ns();
                        last_progress = Instant::now();
                        let Some(ts) = payload_timestamp(&s.payload) else {
                            out.corrupted += 1;
                            continue;
                        };
                        if s.payload.len() != sample_len
                            || s.payload[TIMESTAMP_LEN..].iter().any(|&b| b != 0)
                        {
                            out.corrupted += 1;
                        }
                        if !seen.insert(ts) {
                            out.duplicates += 1;
                            continue;
                        }
                        out.latencies_ns.push(now.saturating_sub(ts));
                    }
                }
                Ok(out)
            },
        )?
    };

    let send_log = run_driver(config.count, config.rate_hz, |_| {
        let payload = make_payload(a.runtime().now_ns(), config.sample_len);
        match driver.publish(ping_w, &payload) {
            Ok(_) => Ok(()),
            Err(Error::BackpressureFull) => {
                log::warn!("driver dropped a sample: window full");
                Ok(())
            }
            Err(e) => Err(e),
        }
    });
    sending_done.store(true, Ordering::Release);
    let listened = listener_thread
        .join()
        .map_err(|_| Error::InvalidConfig("listener thread panicked".into()))?;
    stop_relay.store(true, Ordering::Release);
    let relayed = relay_thread
        .join()
        .map_err(|_| Error::InvalidConfig("relay thread panicked".into()))?;
    let reports = [da.stop()?, db.stop()?];
    let send_log = send_log?;
    let listened = listened?;
    let relayed = relayed?;

    let takes = relayed + listened.latencies_ns.len() + listened.duplicates;
    let copies = a.instrumentation().payload_copies() + b.instrumentation().payload_copies();
    let copies_per_sample = if takes == 0 {
        0.0
    } else {
        copies as f64 / takes as f64
    };
    let stats = if listened.latencies_ns.is_empty() {
        None
    } else {
        Some(compute_stats(&listened.latencies_ns, config.trim)?)
    };
    let violations =
        a.runtime().stats().time_bound_violations + b.runtime().stats().time_bound_violations;
    drop(driver);
    Ok(BenchResult {
        config: *config,
        sent: send_log.sent_at.len(),
        relayed,
        received: listened.latencies_ns.len(),
        latencies_ns: listened.latencies_ns,
        duplicates: listened.duplicates,
        corrupted: listened.corrupted,
        stats,
        send_log,
        copies_per_sample,
        daemons: reports,
        time_bound_violations: violations,
    })
}

/// Paired runs alternating eager notification on and off. Returns the
/// trimmed means as `(on, off)` pairs.
pub fn run_eager_ab(config: &BenchConfig, pairs: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let mut on = *config;
        on.eager_notify = true;
        on.net.seed = config.net.seed.wrapping_add(i as u64);
        let mut off = on;
        off.eager_notify = false;
        let (first, second) = if i % 2 == 0 { (on, off) } else { (off, on) };
        let r1 = run_benchmark(&first)?;
        let r2 = run_benchmark(&second)?;
        let tm = |r: &BenchResult| r.stats.map(|s| s.trimmed_mean_ns).ok_or(Error::EmptyInput);
        let (m1, m2) = (tm(&r1)?, tm(&r2)?);
        out.push(if i % 2 == 0 { (m1, m2) } else { (m2, m1) });
    }
    Ok(out)
}
