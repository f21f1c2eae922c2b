//! Simulated protected-library execution environment.
//!
//! A [`Runtime`] plays the role of the kernel plus the library loader: it
//! hands out process identities, tracks which are alive, and measures every
//! crossing into the library against a published time bound. Each thread of
//! a simulated process drives its own [`DomainContext`], which flips between
//! [`Mode::Application`] and [`Mode::Library`] through the trampoline pair
//! [`DomainContext::enter_library`] / [`DomainContext::exit_library`].

use std::cell::Cell;
use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// A process identifier. Issued from a 64-bit monotonic counter, so it is
/// never reused within one runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pid(pub u64);

impl Pid {
    /// Identity used for state owned by the library itself (network-sourced
    /// samples, daemon work). Never issued by [`Runtime::register_process`]
    /// and never dies.
    pub const SYSTEM: Pid = Pid(0);
}

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pid {}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessIdentity {
    pub pid: Pid,
    pub alive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Application,
    Library,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationAction {
    /// Count the violation and carry on.
    Record,
    /// Count the violation and fail the call with [`Error::TimeBoundExceeded`].
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeBoundPolicy {
    pub max_call: Duration,
    pub action: ViolationAction,
}

impl Default for TimeBoundPolicy {
    fn default() -> Self {
        Self {
            max_call: Duration::from_millis(1),
            action: ViolationAction::Record,
        }
    }
}

impl TimeBoundPolicy {
    pub fn fail(max_call: Duration) -> Self {
        Self {
            max_call,
            action: ViolationAction::Fail,
        }
    }

    pub fn record(max_call: Duration) -> Self {
        Self {
            max_call,
            action: ViolationAction::Record,
        }
    }
}

/// Counters accumulated over every context of a runtime.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RuntimeStats {
    pub library_calls: u64,
    pub time_bound_violations: u64,
    pub context_violations: u64,
    pub max_call_ns: u64,
    pub library_ns: u64,
}

#[derive(Debug)]
struct RuntimeInner {
    next_pid: AtomicU64,
    alive: RwLock<HashSet<Pid>>,
    terminations: Mutex<VecDeque<Pid>>,
    policy: TimeBoundPolicy,
    library_calls: AtomicU64,
    violations: AtomicU64,
    context_violations: AtomicU64,
    max_call_ns: AtomicU64,
    library_ns: AtomicU64,
    epoch: Instant,
}

/// Shared runtime instance. Cheap to clone.
#[derive(Debug, Clone)]
pub struct Runtime {
    inner: Arc<RuntimeInner>,
}

impl Runtime {
    pub fn new(policy: TimeBoundPolicy) -> Self {
        Self {
            inner: Arc::new(RuntimeInner {
                next_pid: AtomicU64::new(1),
                alive: RwLock::new(HashSet::new()),
                terminations: Mutex::new(VecDeque::new()),
                policy,
                library_calls: AtomicU64::new(0),
                violations: AtomicU64::new(0),
                context_violations: AtomicU64::new(0),
                max_call_ns: AtomicU64::new(0),
                library_ns: AtomicU64::new(0),
                epoch: Instant::now(),
            }),
        }
    }

    pub fn policy(&self) -> TimeBoundPolicy {
        self.inner.policy
    }

    /// Issues a fresh pid, strictly greater than every pid issued before.
    pub fn register_process(&self) -> ProcessIdentity {
        let pid = Pid(self.inner.next_pid.fetch_add(1, Ordering::Relaxed));
        self.inner.alive.write().unwrap().insert(pid);
        ProcessIdentity { pid, alive: true }
    }

    /// Marks `pid` dead and queues a termination notice for the reclaimer.
    pub fn deregister_process(&self, pid: Pid) -> Result<()> {
        if !self.inner.alive.write().unwrap().remove(&pid) {
            return Err(Error::UnknownPid(pid));
        }
        self.inner.terminations.lock().unwrap().push_back(pid);
        Ok(())
    }

    pub fn is_alive(&self, pid: Pid) -> bool {
        pid == Pid::SYSTEM || self.inner.alive.read().unwrap().contains(&pid)
    }

    pub fn identity(&self, pid: Pid) -> ProcessIdentity {
        ProcessIdentity {
            pid,
            alive: self.is_alive(pid),
        }
    }

    /// Drains the termination queue filled by [`Runtime::deregister_process`].
    pub fn take_terminations(&self) -> Vec<Pid> {
        self.inner.terminations.lock().unwrap().drain(..).collect()
    }

    pub fn pending_terminations(&self) -> usize {
        self.inner.terminations.lock().unwrap().len()
    }

    /// Creates a context for a thread of a live process.
    pub fn context(&self, pid: Pid) -> Result<DomainContext> {
        if pid == Pid::SYSTEM || !self.is_alive(pid) {
            return Err(Error::UnknownPid(pid));
        }
        Ok(DomainContext::new(self.clone(), pid, false))
    }

    /// Creates the trusted daemon context. It skips crossing accounting but
    /// every call is still measured against the time bound.
    pub fn daemon_context(&self) -> DomainContext {
        DomainContext::new(self.clone(), Pid::SYSTEM, true)
    }

    pub fn stats(&self) -> RuntimeStats {
        let i = &self.inner;
        RuntimeStats {
            library_calls: i.library_calls.load(Ordering::Relaxed),
            time_bound_violations: i.violations.load(Ordering::Relaxed),
            context_violations: i.context_violations.load(Ordering::Relaxed),
            max_call_ns: i.max_call_ns.load(Ordering::Relaxed),
            library_ns: i.library_ns.load(Ordering::Relaxed),
        }
    }

    /// Nanoseconds since the runtime was created.
    pub fn now_ns(&self) -> u64 {
        self.inner.epoch.elapsed().as_nanos() as u64
    }

    pub fn same_instance(&self, other: &Runtime) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn context_violation(&self, what: &'static str) -> Error {
        self.inner
            .context_violations
            .fetch_add(1, Ordering::Relaxed);
        Error::ContextViolation(what)
    }

    fn record_call(&self, elapsed: Duration) -> bool {
        let ns = elapsed.as_nanos() as u64;
        let i = &self.inner;
        i.library_calls.fetch_add(1, Ordering::Relaxed);
        i.library_ns.fetch_add(ns, Ordering::Relaxed);
        i.max_call_ns.fetch_max(ns, Ordering::Relaxed);
        let violated = elapsed > i.policy.max_call;
        if violated {
            i.violations.fetch_add(1, Ordering::Relaxed);
        }
        violated
    }
}

/// Proof of a pending library entry; consumed by [`DomainContext::exit_library`].
#[derive(Debug)]
#[must_use = "a library entry must be closed with exit_library"]
pub struct CallToken {
    id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallReport {
    pub duration: Duration,
    pub violated: bool,
}

/// Per-thread execution context.
///
/// Owned by exactly one thread; `Send` but not `Sync`.
#[derive(Debug)]
pub struct DomainContext {
    runtime: Runtime,
    pid: Pid,
    mode: Mode,
    trusted: bool,
    call_start: Option<Instant>,
    pending: Option<u64>,
    next_token: u64,
    crossings: u64,
    library_ns: u64,
    blocked_ns: Cell<u64>,
}

impl DomainContext {
    fn new(runtime: Runtime, pid: Pid, trusted: bool) -> Self {
        Self {
            runtime,
            pid,
            mode: Mode::Application,
            trusted,
            call_start: None,
            pending: None,
            next_token: 1,
            crossings: 0,
            library_ns: 0,
            blocked_ns: Cell::new(0),
        }
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    pub fn pid(&self) -> Pid {
        self.pid
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_trusted(&self) -> bool {
        self.trusted
    }

    /// Number of untrusted trampoline crossings made by this context.
    pub fn crossings(&self) -> u64 {
        self.crossings
    }

    /// Total time this context spent inside library calls.
    pub fn library_time(&self) -> Duration {
        Duration::from_nanos(self.library_ns)
    }

    /// Total time this context spent suspended outside the library.
    pub fn blocked_time(&self) -> Duration {
        Duration::from_nanos(self.blocked_ns.get())
    }

    pub(crate) fn add_blocked(&self, d: Duration) {
        self.blocked_ns
            .set(self.blocked_ns.get() + d.as_nanos() as u64);
    }

    /// Identity bound to this context. Constant time, never blocks.
    pub fn current_process(&self) -> ProcessIdentity {
        ProcessIdentity {
            pid: self.pid,
            alive: self.runtime.is_alive(self.pid),
        }
    }

    pub fn enter_library(&mut self) -> Result<CallToken> {
        if self.mode == Mode::Library {
            return Err(self
                .runtime
                .context_violation("reentrant crossing into the library"));
        }
        let id = self.next_token;
        self.next_token += 1;
        self.mode = Mode::Library;
        self.pending = Some(id);
        self.call_start = Some(Instant::now());
        if !self.trusted {
            self.crossings += 1;
        }
        Ok(CallToken { id })
    }

    pub fn exit_library(&mut self, token: CallToken) -> Result<CallReport> {
        if self.mode != Mode::Library || self.pending != Some(token.id) {
            return Err(self
                .runtime
                .context_violation("exit without a matching library entry"));
        }
        let duration = self
            .call_start
            .take()
            .map(|s| s.elapsed())
            .unwrap_or_default();
        self.mode = Mode::Application;
        self.pending = None;
        self.library_ns += duration.as_nanos() as u64;
        let violated = self.runtime.record_call(duration);
        let policy = self.runtime.policy();
        if violated && policy.action == ViolationAction::Fail {
            return Err(Error::TimeBoundExceeded {
                elapsed: duration,
                bound: policy.max_call,
            });
        }
        Ok(CallReport { duration, violated })
    }

    /// Runs `body` as one library call: enter, body, exit.
    ///
    /// A time-bound failure on exit takes precedence over the body's result.
    pub fn call<T>(&mut self, body: impl FnOnce(&DomainContext) -> Result<T>) -> Result<T> {
        let token = self.enter_library()?;
        let out = body(self);
        self.exit_library(token)?;
        out
    }

    pub(crate) fn require_library(&self) -> Result<()> {
        if self.mode != Mode::Library {
            return Err(self
                .runtime
                .context_violation("operation requires library mode"));
        }
        Ok(())
    }

    pub(crate) fn require_application(&self) -> Result<()> {
        if self.mode != Mode::Application {
            return Err(self
                .runtime
                .context_violation("blocking wait attempted inside the library"));
        }
        Ok(())
    }

    pub(crate) fn require_runtime(&self, runtime: &Runtime) -> Result<()> {
        if !self.runtime.same_instance(runtime) {
            return Err(self
                .runtime
                .context_violation("context belongs to another runtime instance"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn pids_are_monotonic_from_one() {
        let rt = Runtime::new(TimeBoundPolicy::default());
        assert_eq!(rt.register_process().pid, Pid(1));
        assert_eq!(rt.register_process().pid, Pid(2));
        for _ in 0..998 {
            rt.register_process();
        }
        assert_eq!(rt.register_process().pid, Pid(1001));
    }

    #[test]
    fn pids_never_reused_after_deregister() {
        let rt = Runtime::new(TimeBoundPolicy::default());
        let mut issued = Vec::new();
        for _ in 0..50 {
            let p = rt.register_process().pid;
            issued.push(p);
            rt.deregister_process(p).unwrap();
        }
        let unique: HashSet<_> = issued.iter().collect();
        assert_eq!(unique.len(), issued.len());
    }

    #[test]
    fn deregister_twice_is_unknown() {
        let rt = Runtime::new(TimeBoundPolicy::default());
        let p = rt.register_process().pid;
        rt.deregister_process(p).unwrap();
        assert!(!rt.identity(p).alive);
        assert!(matches!(
            rt.deregister_process(p),
            Err(Error::UnknownPid(_))
        ));
        assert_eq!(rt.take_terminations(), vec![p]);
    }

    #[test]
    fn enter_exit_alternation() {
        let rt = Runtime::new(TimeBoundPolicy::fail(Duration::from_millis(1)));
        let pid = rt.register_process().pid;
        let mut ctx = rt.context(pid).unwrap();
        let t = ctx.enter_library().unwrap();
        assert_eq!(ctx.mode(), Mode::Library);
        assert_eq!(ctx.crossings(), 1);
        assert!(matches!(
            ctx.enter_library(),
            Err(Error::ContextViolation(_))
        ));
        ctx.exit_library(t).unwrap();
        assert_eq!(ctx.mode(), Mode::Application);
    }

    #[test]
    fn ten_thousand_crossings() {
        let rt = Runtime::new(TimeBoundPolicy::fail(Duration::from_millis(1)));
        let pid = rt.register_process().pid;
        let mut ctx = rt.context(pid).unwrap();
        for _ in 0..10_000 {
            let t = ctx.enter_library().unwrap();
            ctx.exit_library(t).unwrap();
        }
        assert_eq!(ctx.crossings(), 10_000);
        assert_eq!(rt.stats().time_bound_violations, 0);
        assert_eq!(rt.stats().context_violations, 0);
    }

    #[test]
    fn mismatched_token_is_rejected() {
        let rt = Runtime::new(TimeBoundPolicy::default());
        let pid = rt.register_process().pid;
        let mut a = rt.context(pid).unwrap();
        let mut b = rt.context(pid).unwrap();
        let ta = a.enter_library().unwrap();
        let tb = b.enter_library().unwrap();
        // Token ids are per-context, so both are 1; cross them via a stale one.
        b.exit_library(tb).unwrap();
        let stale = b.enter_library().unwrap();
        b.exit_library(stale).unwrap();
        let tb2 = b.enter_library().unwrap();
        assert!(matches!(
            a.exit_library(tb2),
            Err(Error::ContextViolation(_))
        ));
        a.exit_library(ta).unwrap();
    }

    fn busy(d: Duration) {
        let start = Instant::now();
        while start.elapsed() < d {
            std::hint::spin_loop();
        }
    }

    #[test]
    fn record_policy_counts_overrun() {
        let rt = Runtime::new(TimeBoundPolicy::record(Duration::from_millis(1)));
        let pid = rt.register_process().pid;
        let mut ctx = rt.context(pid).unwrap();
        let t = ctx.enter_library().unwrap();
        busy(Duration::from_millis(5));
        let report = ctx.exit_library(t).unwrap();
        assert!(report.violated);
        assert!(report.duration >= Duration::from_millis(5));
        assert_eq!(rt.stats().time_bound_violations, 1);
    }

    #[test]
    fn fail_policy_raises_overrun() {
        let rt = Runtime::new(TimeBoundPolicy::fail(Duration::from_millis(1)));
        let pid = rt.register_process().pid;
        let mut ctx = rt.context(pid).unwrap();
        let r = ctx.call(|_| {
            busy(Duration::from_millis(5));
            Ok(())
        });
        assert!(matches!(r, Err(Error::TimeBoundExceeded { .. })));
        // The context is usable again.
        assert_eq!(ctx.mode(), Mode::Application);
    }

    #[test]
    fn current_process_is_mode_independent() {
        let rt = Runtime::new(TimeBoundPolicy::default());
        let _ = rt.register_process();
        let pid = rt.register_process().pid;
        let mut ctx = rt.context(pid).unwrap();
        let outside = ctx.current_process();
        let inside = ctx.call(|c| Ok(c.current_process())).unwrap();
        assert_eq!(outside, inside);
        assert_eq!(outside.pid, pid);
    }

    #[test]
    fn dead_process_cannot_get_a_context() {
        let rt = Runtime::new(TimeBoundPolicy::default());
        let pid = rt.register_process().pid;
        rt.deregister_process(pid).unwrap();
        assert!(rt.context(pid).is_err());
        assert!(rt.context(Pid::SYSTEM).is_err());
    }
}
