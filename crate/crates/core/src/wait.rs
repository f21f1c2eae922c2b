//! Futex-style wait words.
//!
//! A [`WaitWord`] is a 32-bit counter that lives in protected memory. Code
//! inside the library snapshots it with [`prepare_wait`], hands the
//! resulting [`WaitDirective`] back across the trampoline, and the wrapper
//! blocks on it with [`wait_outside`]. Making a condition true is always
//! followed by [`notify`], which bumps the counter and wakes sleepers.
//!
//! The compare-and-block step ([`WaitWord::try_block`]) and the
//! increment-and-wake step run under the same internal lock, so a notify
//! that happens after the snapshot is never lost: either the waiter sees the
//! changed value and returns at once, or it is already queued and gets
//! woken. Spurious wakeups are allowed; callers loop on their real
//! condition.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::runtime::DomainContext;

#[derive(Debug, Default)]
pub struct WaitWord {
    value: AtomicU32,
    queue: Mutex<VecDeque<Arc<Ticket>>>,
    cv: Condvar,
    next_ticket: AtomicU64,
}

/// A queued waiter.
#[derive(Debug)]
pub struct Ticket {
    id: u64,
    woken: AtomicBool,
}

impl Ticket {
    pub fn is_woken(&self) -> bool {
        self.woken.load(Ordering::Acquire)
    }
}

/// Snapshot returned from inside the library: "sleep on `word` while it
/// still reads `expected`".
#[derive(Debug)]
#[must_use]
pub struct WaitDirective {
    word: Arc<WaitWord>,
    expected: u32,
}

impl WaitDirective {
    pub fn expected(&self) -> u32 {
        self.expected
    }

    pub fn word(&self) -> &Arc<WaitWord> {
        &self.word
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitOutcome {
    /// Released by a notify while queued.
    Woken,
    /// The word no longer held the expected value; did not block.
    ValueChanged,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotifyCount {
    One,
    All,
}

impl WaitWord {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn value(&self) -> u32 {
        self.value.load(Ordering::Acquire)
    }

    pub fn waiters(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    /// Atomic compare-and-enqueue. `None` means the value already moved on.
    pub fn try_block(&self, expected: u32) -> Option<Arc<Ticket>> {
        let mut q = self.queue.lock().unwrap();
        if self.value.load(Ordering::Acquire) != expected {
            return None;
        }
        let t = Arc::new(Ticket {
            id: self.next_ticket.fetch_add(1, Ordering::Relaxed),
            woken: AtomicBool::new(false),
        });
        q.push_back(Arc::clone(&t));
        Some(t)
    }

    /// Blocks until `ticket` is woken or `deadline` passes.
    pub fn park(&self, ticket: &Ticket, deadline: Instant) -> WaitOutcome {
        let mut q = self.queue.lock().unwrap();
        loop {
            if ticket.is_woken() {
                return WaitOutcome::Woken;
            }
            let now = Instant::now();
            if now >= deadline {
                q.retain(|t| t.id != ticket.id);
                return WaitOutcome::TimedOut;
            }
            q = self.cv.wait_timeout(q, deadline - now).unwrap().0;
        }
    }

    /// Increments the counter and releases up to `count` queued waiters.
    fn bump_and_wake(&self, count: NotifyCount) -> usize {
        let mut q = self.queue.lock().unwrap();
        self.value.fetch_add(1, Ordering::AcqRel);
        let n = match count {
            NotifyCount::One => q.len().min(1),
            NotifyCount::All => q.len(),
        };
        for t in q.drain(..n) {
            t.woken.store(true, Ordering::Release);
        }
        drop(q);
        if n > 0 {
            self.cv.notify_all();
        }
        n
    }
}

/// Snapshots `word` for a later [`wait_outside`]. Library mode only.
pub fn prepare_wait(ctx: &DomainContext, word: &Arc<WaitWord>) -> Result<WaitDirective> {
    ctx.require_library()?;
    Ok(WaitDirective {
        word: Arc::clone(word),
        expected: word.value(),
    })
}

/// Suspends the calling thread outside the library.
///
/// Refuses to run in library mode: blocking there would break the time bound.
pub fn wait_outside(
    ctx: &DomainContext,
    directive: WaitDirective,
    timeout: Duration,
) -> Result<WaitOutcome> {
    ctx.require_application()?;
    let Some(ticket) = directive.word.try_block(directive.expected) else {
        return Ok(WaitOutcome::ValueChanged);
    };
    let start = Instant::now();
    let out = directive.word.park(&ticket, start + timeout);
    ctx.add_blocked(start.elapsed());
    Ok(out)
}

/// Bumps `word` and wakes waiters; returns how many were released.
pub fn notify(ctx: &DomainContext, word: &WaitWord, count: NotifyCount) -> Result<usize> {
    ctx.require_library()?;
    Ok(word.bump_and_wake(count))
}

/// Notify from library internals that have already checked the mode.
pub(crate) fn notify_unchecked(word: &WaitWord, count: NotifyCount) -> usize {
    word.bump_and_wake(count)
}
