//! The trusted daemon: RX processing with interrupt/polling mode switching,
//! periodic heartbeats and reclamation of dead processes.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::dds::Domain;
use crate::error::{Error, Result};
use crate::runtime::DomainContext;

pub const DEFAULT_MODE_UP_HZ: f64 = 10_000.0;
pub const DEFAULT_MODE_DOWN_HZ: f64 = 5_000.0;
pub const EWMA_ALPHA: f64 = 1.0 / 64.0;
pub const GAP_WINDOW: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RxMode {
    EventDriven,
    Polling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForceMode {
    #[default]
    Auto,
    Poll,
    Event,
}

impl std::str::FromStr for ForceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ForceMode::Auto),
            "poll" => Ok(ForceMode::Poll),
            "event" => Ok(ForceMode::Event),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// Packet-rate tracker deciding between sleeping and polling.
///
/// The rate estimate is the reciprocal of an EWMA of inter-arrival gaps.
/// Polling starts once it rises above `up_hz` and stops once it falls
/// below `down_hz`; anything in between leaves the mode alone.
#[derive(Debug, Clone)]
pub struct ModeState {
    mode: RxMode,
    ewma_gap_ns: Option<f64>,
    last_arrival: Option<u64>,
    gaps: VecDeque<u64>,
    up_hz: f64,
    down_hz: f64,
    switches: u64,
}

impl ModeState {
    pub fn new(up_hz: f64, down_hz: f64) -> Result<Self> {
        if !(down_hz > 0.0 && up_hz > down_hz) {
            return Err(Error::InvalidConfig(format!(
                "mode thresholds need 0 < down ({down_hz}) < up ({up_hz})"
            )));
        }
        Ok(Self {
            mode: RxMode::EventDriven,
            ewma_gap_ns: None,
            last_arrival: None,
            gaps: VecDeque::with_capacity(GAP_WINDOW),
            up_hz,
            down_hz,
            switches: 0,
        })
    }

    pub fn mode(&self) -> RxMode {
        self.mode
    }

    pub fn switches(&self) -> u64 {
        self.switches
    }

    pub fn ewma_gap_ns(&self) -> Option<f64> {
        self.ewma_gap_ns
    }

    /// Current rate estimate in Hz; 0 before two arrivals.
    pub fn rate_hz(&self) -> f64 {
        match self.ewma_gap_ns {
            Some(g) if g > 0.0 => 1e9 / g,
            Some(_) => f64::INFINITY,
            None => 0.0,
        }
    }

    /// Mean rate over the last [`GAP_WINDOW`] gaps.
    pub fn window_rate_hz(&self) -> f64 {
        if self.gaps.is_empty() {
            return 0.0;
        }
        let total: u64 = self.gaps.iter().sum();
        if total == 0 {
            return f64::INFINITY;
        }
        self.gaps.len() as f64 * 1e9 / total as f64
    }

    /// Feeds one arrival. Timestamps must not go backwards.
    pub fn update(&mut self, arrival_ns: u64) -> RxMode {
        if let Some(last) = self.last_arrival {
            let gap = arrival_ns.saturating_sub(last);
            if self.gaps.len() == GAP_WINDOW {
                self.gaps.pop_front();
            }
            self.gaps.push_back(gap);
            let g = gap as f64;
            self.ewma_gap_ns = Some(match self.ewma_gap_ns {
                None => g,
                Some(e) => e + EWMA_ALPHA * (g - e),
            });
            self.apply(self.rate_hz());
        }
        self.last_arrival = Some(arrival_ns);
        self.mode
    }

    /// Feeds `n` arrivals observed together at `now_ns`, spread evenly
    /// since the previous arrival.
    pub fn update_batch(&mut self, n: usize, now_ns: u64) -> RxMode {
        if n == 0 {
            return self.mode;
        }
        let Some(last) = self.last_arrival else {
            self.last_arrival = Some(now_ns);
            return self.update_batch(n - 1, now_ns);
        };
        let step = now_ns.saturating_sub(last) / n as u64;
        for i in 1..=n as u64 {
            let t = if i == n as u64 {
                now_ns
            } else {
                last + step * i
            };
            self.update(t);
        }
        self.mode
    }

    /// Called when nothing arrived: the silence since the last arrival is
    /// itself evidence that the rate dropped.
    pub fn idle(&mut self, now_ns: u64) -> RxMode {
        if self.mode == RxMode::Polling {
            if let Some(last) = self.last_arrival {
                let silent = now_ns.saturating_sub(last) as f64;
                if silent > 0.0 && 1e9 / silent < self.down_hz {
                    let g = self.ewma_gap_ns.map_or(silent, |e| e.max(silent));
                    self.ewma_gap_ns = Some(g);
                    self.apply(1e9 / g);
                }
            }
        }
        self.mode
    }

    fn apply(&mut self, rate: f64) {
        let next = match self.mode {
            RxMode::EventDriven if rate > self.up_hz => RxMode::Polling,
            RxMode::Polling if rate < self.down_hz => RxMode::EventDriven,
            m => m,
        };
        if next != self.mode {
            self.mode = next;
            self.switches += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaemonConfig {
    pub heartbeat_period: Duration,
    pub reclaim_period: Duration,
    pub mode_up_hz: f64,
    pub mode_down_hz: f64,
    pub force_mode: ForceMode,
    pub rx_batch: usize,
    /// Longest single sleep, so shutdown is noticed promptly.
    pub max_sleep: Duration,
}

impl Default for DaemonConfig {
    fn default() -> Self {
        Self {
            heartbeat_period: Duration::from_secs(1),
            reclaim_period: Duration::from_millis(100),
            mode_up_hz: DEFAULT_MODE_UP_HZ,
            mode_down_hz: DEFAULT_MODE_DOWN_HZ,
            force_mode: ForceMode::Auto,
            rx_batch: 64,
            max_sleep: Duration::from_millis(20),
        }
    }
}

impl DaemonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heartbeat_period.is_zero()
            || self.reclaim_period.is_zero()
            || self.max_sleep.is_zero()
        {
            return Err(Error::InvalidConfig(
                "daemon periods must be positive".into(),
            ));
        }
        if self.rx_batch == 0 {
            return Err(Error::InvalidConfig("rx batch must be positive".into()));
        }
        ModeState::new(self.mode_up_hz, self.mode_down_hz).map(|_| ())
    }
}

/// Live counters shared between the daemon thread and its handle.
#[derive(Debug, Default)]
pub struct DaemonStats {
    iterations: AtomicU64,
    datagrams: AtomicU64,
    heartbeats: AtomicU64,
    reclaimed: AtomicU64,
    errors: AtomicU64,
    mode_switches: AtomicU64,
    polling: AtomicU8,
    busy_ns: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaemonReport {
    pub iterations: u64,
    pub datagrams: u64,
    pub heartbeats: u64,
    pub reclaimed: u64,
    pub errors: u64,
    pub mode_switches: u64,
    pub mode: RxMode,
    pub busy: Duration,
    pub elapsed: Duration,
}

impl DaemonReport {
    /// Fraction of wall time the daemon thread was not blocked.
    pub fn busy_fraction(&self) -> f64 {
        if self.elapsed.is_zero() {
            return 0.0;
        }
        self.busy.as_secs_f64() / self.elapsed.as_secs_f64()
    }
}

impl DaemonStats {
    fn report(&self, elapsed: Duration) -> DaemonReport {
        DaemonReport {
            iterations: self.iterations.load(Ordering::Relaxed),
            datagrams: self.datagrams.load(Ordering::Relaxed),
            heartbeats: self.heartbeats.load(Ordering::Relaxed),
            reclaimed: self.reclaimed.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
            mode_switches: self.mode_switches.load(Ordering::Relaxed),
            mode: if self.polling.load(Ordering::Relaxed) == 1 {
                RxMode::Polling
            } else {
                RxMode::EventDriven
            },
            busy: Duration::from_nanos(self.busy_ns.load(Ordering::Relaxed)),
            elapsed,
        }
    }
}

fn log_err<T>(stats: &DaemonStats, what: &str, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            stats.errors.fetch_add(1, Ordering::Relaxed);
            log::warn!("daemon {what} failed: {e}");
            None
        }
    }
}

/// Runs the daemon loop on the calling thread until `shutdown` is set.
pub fn run_loop(
    domain: &Domain,
    config: DaemonConfig,
    shutdown: &AtomicBool,
    stats: &DaemonStats,
) -> Result<()> {
    config.validate()?;
    if domain.transport().is_some() {
        domain.set_heartbeat_period(config.heartbeat_period)?;
    }
    let mut ctx = domain.runtime().daemon_context();
    let mut mode = ModeState::new(config.mode_up_hz, config.mode_down_hz)?;
    let clock = Instant::now();
    let mut next_reclaim = clock + config.reclaim_period;
    while !shutdown.load(Ordering::Acquire) {
        stats.iterations.fetch_add(1, Ordering::Relaxed);
        let now = Instant::now();

        if domain.next_heartbeat_due().is_some_and(|d| d <= now) {
            if let Some(n) = log_err(
                stats,
                "heartbeat",
                ctx.call(|c| domain.send_heartbeats(c, now)),
            ) {
                stats.heartbeats.fetch_add(n as u64, Ordering::Relaxed);
            }
        }
        if now >= next_reclaim {
            next_reclaim = now + config.reclaim_period;
            if let Some(n) = log_err(stats, "reclaim", ctx.call(|c| domain.reclaim_dead(c))) {
                stats.reclaimed.fetch_add(n as u64, Ordering::Relaxed);
            }
        }

        let got = match domain.transport() {
            Some(t) => {
                let batch = t.poll_rx(config.rx_batch);
                let n = batch.len();
                if n > 0 {
                    stats.datagrams.fetch_add(n as u64, Ordering::Relaxed);
                    log_err(stats, "rx", ctx.call(|c| domain.process_rx_batch(c, batch)));
                }
                if domain.tx_pending() > 0 {
                    let budget = domain.config().tx_budget;
                    log_err(stats, "tx", ctx.call(|c| domain.pump_tx(c, budget)));
                }
                n
            }
            None => 0,
        };

        let t_ns = clock.elapsed().as_nanos() as u64;
        let current = match config.force_mode {
            ForceMode::Poll => RxMode::Polling,
            ForceMode::Event => RxMode::EventDriven,
            ForceMode::Auto if got > 0 => mode.update_batch(got, t_ns),
            ForceMode::Auto => mode.idle(t_ns),
        };
        stats
            .mode_switches
            .store(mode.switches(), Ordering::Relaxed);
        stats
            .polling
            .store(u8::from(current == RxMode::Polling), Ordering::Relaxed);

        if got > 0 || domain.tx_pending() > 0 {
            continue;
        }
        match current {
            RxMode::Polling => {
                std::hint::spin_loop();
                thread::yield_now();
            }
            RxMode::EventDriven => {
                let mut until = next_reclaim.min(now + config.max_sleep);
                if let Some(hb) = domain.next_heartbeat_due() {
                    until = until.min(hb);
                }
                let timeout = until.saturating_duration_since(Instant::now());
                if timeout.is_zero() {
                    continue;
                }
                sleep_for_input(domain, &ctx, timeout, stats);
            }
        }
    }
    let blocked = ctx.blocked_time();
    let total = clock.elapsed();
    stats.busy_ns.store(
        total.saturating_sub(blocked).as_nanos() as u64,
        Ordering::Relaxed,
    );
    Ok(())
}

fn sleep_for_input(domain: &Domain, ctx: &DomainContext, timeout: Duration, stats: &DaemonStats) {
    match domain.transport() {
        Some(t) => {
            log_err(stats, "wait", t.wait_rx(ctx, timeout));
        }
        None => {
            let start = Instant::now();
            thread::sleep(timeout);
            ctx.add_blocked(start.elapsed());
        }
    }
}

/// A daemon running on its own thread. Stopped on drop.
#[derive(Debug)]
pub struct DaemonHandle {
    shutdown: Arc<AtomicBool>,
    stats: Arc<DaemonStats>,
    started: Instant,
    thread: Option<JoinHandle<Result<()>>>,
}

impl DaemonHandle {
    pub fn spawn(domain: &Domain, config: DaemonConfig) -> Result<DaemonHandle> {
        config.validate()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(DaemonStats::default());
        let thread = {
            let domain = domain.clone();
            let shutdown = Arc::clone(&shutdown);
            let stats = Arc::clone(&stats);
            thread::Builder::new()
                .name("domain-daemon".into())
                .spawn(move || run_loop(&domain, config, &shutdown, &stats))?
        };
        Ok(DaemonHandle {
            shutdown,
            stats,
            started: Instant::now(),
            thread: Some(thread),
        })
    }

    /// Snapshot of the counters while running. `busy` is only filled in
    /// once the daemon stops.
    pub fn report(&self) -> DaemonReport {
        self.stats.report(self.started.elapsed())
    }

    pub fn mode(&self) -> RxMode {
        self.report().mode
    }

    pub fn stop(mut self) -> Result<DaemonReport> {
        self.shutdown_and_join()
    }

    fn shutdown_and_join(&mut self) -> Result<DaemonReport> {
        self.shutdown.store(true, Ordering::Release);
        let elapsed = self.started.elapsed();
        if let Some(t) = self.thread.take() {
            match t.join() {
                Ok(r) => r?,
                Err(_) => return Err(Error::InvalidConfig("daemon thread panicked".into())),
            }
        }
        Ok(self.stats.report(elapsed))
    }
}

impl Drop for DaemonHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            let _ = self.shutdown_and_join();
        }
    }
}
