#![allow(dead_code)]

pub mod alloc_model;
pub mod interleave;
pub mod wire_gen;

use std::sync::Arc;
use std::time::{Duration, Instant};

use domainbus::buffers::RegionConfig;
use domainbus::daemon::RxMode;
use domainbus::dds::{Domain, DomainConfig};
use domainbus::runtime::TimeBoundPolicy;
use domainbus::transport::{NetConfig, SimNetwork, Transport};

/// Time bound used by integration tests. Tests run in parallel on shared
/// cores, so the default is looser than the 1 ms used by the sequential
/// acceptance run. `DOMAINBUS_TEST_BOUND_US` overrides it.
pub fn test_bound() -> Duration {
    std::env::var("DOMAINBUS_TEST_BOUND_US")
        .ok()
        .and_then(|v| v.parse().ok())
        .map_or(Duration::from_millis(50), Duration::from_micros)
}

pub fn small_regions() -> RegionConfig {
    RegionConfig {
        region_size: 4 << 20,
        region_limit: 16 << 20,
        granule_size: 4096,
    }
}

pub fn test_config() -> DomainConfig {
    DomainConfig {
        policy: TimeBoundPolicy::fail(test_bound()),
        regions: small_regions(),
        ..DomainConfig::default()
    }
}

pub fn local_domain() -> Domain {
    Domain::new(test_config()).expect("domain")
}

/// Two domains joined by one simulated network.
pub struct NetPair {
    pub net: SimNetwork,
    pub a: Domain,
    pub b: Domain,
}

pub fn net_pair(config: DomainConfig, net: NetConfig) -> NetPair {
    let sim = SimNetwork::new(net).expect("sim");
    let na = sim.attach();
    let nb = sim.attach();
    let (ea, eb) = (na.local_endpoint(), nb.local_endpoint());
    let a = Domain::with_network(config, na as Arc<dyn Transport>, vec![eb]).expect("domain a");
    let b = Domain::with_network(config, nb as Arc<dyn Transport>, vec![ea]).expect("domain b");
    NetPair { net: sim, a, b }
}

/// Runs network processing for each domain from its daemon context until
/// `done` holds or `timeout` elapses. Heartbeats fire as they fall due.
pub fn drive(domains: &[&Domain], timeout: Duration, mut done: impl FnMut() -> bool) -> bool {
    let mut ctxs: Vec<_> = domains
        .iter()
        .map(|d| d.runtime().daemon_context())
        .collect();
    let deadline = Instant::now() + timeout;
    loop {
        if done() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        let mut moved = 0;
        for (d, ctx) in domains.iter().zip(ctxs.iter_mut()) {
            moved += ctx
                .call(|c| {
                    let now = Instant::now();
                    let mut n = d.send_heartbeats(c, now)?;
                    n += d.poll_network(c, 256)?;
                    n += d.pump_tx(c, 256)?;
                    Ok(n)
                })
                .expect("network step");
        }
        if moved == 0 {
            std::thread::yield_now();
        }
    }
}

pub fn fnv64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic payload whose bytes encode `seed` and position.
pub fn pattern(seed: u64, len: usize) -> Vec<u8> {
    (0..len)
        .map(|i| (seed.wrapping_mul(31).wrapping_add(i as u64 * 7) % 251) as u8)
        .collect()
}

/// Nearest-rank percentile by counting: the smallest value `v` such that
/// at least `p` percent of the data is `<= v`.
pub fn reference_percentile(data: &[u64], p: f64) -> u64 {
    let mut v = data.to_vec();
    v.sort();
    let n = v.len() as f64;
    for (i, x) in v.iter().enumerate() {
        if (i + 1) as f64 * 100.0 >= p * n - 1e-6 {
            return *x;
        }
    }
    *v.last().unwrap()
}

/// Straight-line model of the daemon's rate detector, fed one arrival at
/// a time: a 1/64 exponential average of inter-arrival gaps with a
/// two-threshold dead band.
pub struct ReferenceDetector {
    pub polling: bool,
    pub transitions: u32,
    avg_gap: Option<f64>,
    last: Option<u64>,
    up: f64,
    down: f64,
}

impl ReferenceDetector {
    pub fn new(up: f64, down: f64) -> Self {
        Self {
            polling: false,
            transitions: 0,
            avg_gap: None,
            last: None,
            up,
            down,
        }
    }

    pub fn arrive(&mut self, t: u64) {
        if let Some(last) = self.last {
            let g = (t - last) as f64;
            let avg = match self.avg_gap {
                None => g,
                Some(a) => a * 63.0 / 64.0 + g / 64.0,
            };
            self.avg_gap = Some(avg);
            let hz = 1e9 / avg;
            let flip = if self.polling {
                hz < self.down
            } else {
                hz > self.up
            };
            if flip {
                self.polling = !self.polling;
                self.transitions += 1;
            }
        }
        self.last = Some(t);
    }

    pub fn mode(&self) -> RxMode {
        if self.polling {
            RxMode::Polling
        } else {
            RxMode::EventDriven
        }
    }
}

/// Arrival times for `n` events at `hz`, starting after `t0`.
pub fn arrivals(hz: f64, n: usize, t0: u64) -> Vec<u64> {
    let gap = 1e9 / hz;
    (1..=n)
        .map(|i| t0 + (i as f64 * gap).round() as u64)
        .collect()
}

/// Final mode after `n` arrivals at each rate (fresh detector per rate),
/// plus the number of transitions when the rates run back to back.
pub fn mode_ramp(rates: &[f64], n: usize) -> (Vec<RxMode>, u64) {
    use domainbus::daemon::ModeState;
    let modes = rates
        .iter()
        .map(|&hz| {
            let mut m = ModeState::new(10_000.0, 5_000.0).unwrap();
            for t in arrivals(hz, n, 0) {
                m.update(t);
            }
            m.mode()
        })
        .collect();
    let mut ramp = ModeState::new(10_000.0, 5_000.0).unwrap();
    let mut t = 0;
    for &hz in rates {
        for a in arrivals(hz, n, t) {
            ramp.update(a);
            t = a;
        }
    }
    (modes, ramp.switches())
}

/// Heartbeats sent by a domain with two idle reliable writers and one
/// remote peer, with daemons running on both sides for `run`.
pub fn idle_heartbeats(period: Duration, run: Duration) -> u64 {
    use domainbus::daemon::{DaemonConfig, DaemonHandle};
    use domainbus::dds::{Process, QosProfile};
    let pair = net_pair(test_config(), NetConfig::default());
    let qos = QosProfile::RELIABLE;
    let mut p = Process::open(&pair.a).unwrap();
    for name in ["hb/one", "hb/two"] {
        let t = p.create_topic(name, 64, qos).unwrap();
        p.writer(t, qos).unwrap();
    }
    let config = DaemonConfig {
        heartbeat_period: period,
        ..DaemonConfig::default()
    };
    let before = pair.a.net_stats().heartbeats_sent;
    let da = DaemonHandle::spawn(&pair.a, config).unwrap();
    let db = DaemonHandle::spawn(&pair.b, config).unwrap();
    std::thread::sleep(run);
    da.stop().unwrap();
    db.stop().unwrap();
    pair.a.net_stats().heartbeats_sent - before
}
