//! Exhaustive two-thread schedule explorer for the wait/notify handshake.
//!
//! One waiter and one notifier run as small step programs over a real
//! `WaitWord`. Every interleaving is replayed from scratch; a schedule that
//! ends with the waiter parked, the condition true and nobody left to wake
//! it is a lost wakeup.

use std::sync::Arc;

use domainbus::runtime::{DomainContext, Runtime, TimeBoundPolicy};
use domainbus::wait::{self, NotifyCount, Ticket, WaitWord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Append, then notify; waiter snapshots, then checks.
    Deferred,
    /// Notify before append, with the in-flight counter the waiter spins on.
    Eager,
    /// Notify before append but the waiter ignores the in-flight counter.
    EagerWithoutSpin,
    /// Waiter checks the condition before taking its snapshot.
    CheckThenSnapshot,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Exploration {
    pub schedules: usize,
    pub lost_wakeups: usize,
}

struct State {
    word: Arc<WaitWord>,
    lib: DomainContext,
    cond: bool,
    in_flight: u32,
    waiter_pc: u8,
    waiter_done: bool,
    snapshot: u32,
    ticket: Option<Arc<Ticket>>,
    notifier_pc: u8,
}

impl State {
    fn new(rt: &Runtime) -> State {
        let mut lib = rt.daemon_context();
        let _ = lib.enter_library().expect("enter");
        State {
            word: WaitWord::new(),
            lib,
            cond: false,
            in_flight: 0,
            waiter_pc: 0,
            waiter_done: false,
            snapshot: 0,
            ticket: None,
            notifier_pc: 0,
        }
    }

    fn notifier_steps(p: Protocol) -> u8 {
        match p {
            Protocol::Eager | Protocol::EagerWithoutSpin => 4,
            _ => 2,
        }
    }

    fn notifier_enabled(&self, p: Protocol) -> bool {
        self.notifier_pc < Self::notifier_steps(p)
    }

    fn notify(&self) {
        wait::notify(&self.lib, &self.word, NotifyCount::All).expect("library mode");
    }

    fn step_notifier(&mut self, p: Protocol) {
        let eager = matches!(p, Protocol::Eager | Protocol::EagerWithoutSpin);
        match (eager, self.notifier_pc) {
            (false, 0) => self.cond = true,
            (false, 1) => self.notify(),
            (true, 0) => self.in_flight += 1,
            (true, 1) => self.notify(),
            (true, 2) => self.cond = true,
            (true, 3) => self.in_flight -= 1,
            _ => unreachable!(),
        }
        self.notifier_pc += 1;
    }

    fn waiter_enabled(&self, p: Protocol) -> bool {
        if self.waiter_done {
            return false;
        }
        match (p, self.waiter_pc) {
            (Protocol::Eager, 1) => self.cond || self.in_flight == 0,
            (_, 3) => self.ticket.as_ref().is_some_and(|t| t.is_woken()),
            _ => true,
        }
    }

    fn step_waiter(&mut self, p: Protocol) {
        let check_first = p == Protocol::CheckThenSnapshot;
        match self.waiter_pc {
            0 if check_first => {
                if self.cond {
                    self.waiter_done = true;
                } else {
                    self.waiter_pc = 1;
                }
            }
            1 if check_first => {
                self.snapshot = self.word.value();
                self.waiter_pc = 2;
            }
            0 => {
                self.snapshot = self.word.value();
                self.waiter_pc = 1;
            }
            1 => {
                if self.cond {
                    self.waiter_done = true;
                } else {
                    self.waiter_pc = 2;
                }
            }
            2 => match self.word.try_block(self.snapshot) {
                None => self.waiter_pc = 0,
                Some(t) => {
                    self.ticket = Some(t);
                    self.waiter_pc = 3;
                }
            },
            3 => {
                self.ticket = None;
                self.waiter_pc = 0;
            }
            _ => unreachable!(),
        }
    }
}

fn replay(rt: &Runtime, p: Protocol, schedule: &[u8]) -> State {
    let mut s = State::new(rt);
    for &t in schedule {
        if t == 0 {
            s.step_waiter(p);
        } else {
            s.step_notifier(p);
        }
    }
    s
}

fn explore_from(rt: &Runtime, p: Protocol, schedule: &mut Vec<u8>, out: &mut Exploration) {
    let s = replay(rt, p, schedule);
    let enabled: Vec<u8> = [(0u8, s.waiter_enabled(p)), (1u8, s.notifier_enabled(p))]
        .into_iter()
        .filter(|(_, e)| *e)
        .map(|(t, _)| t)
        .collect();
    if enabled.is_empty() {
        out.schedules += 1;
        if !s.waiter_done {
            out.lost_wakeups += 1;
        }
        return;
    }
    for t in enabled {
        schedule.push(t);
        explore_from(rt, p, schedule, out);
        schedule.pop();
    }
}

/// Runs every interleaving of one waiter and one notifier under `p`.
pub fn explore(p: Protocol) -> Exploration {
    let rt = Runtime::new(TimeBoundPolicy::record(std::time::Duration::from_secs(60)));
    let mut out = Exploration::default();
    explore_from(&rt, p, &mut Vec::new(), &mut out);
    out
}
