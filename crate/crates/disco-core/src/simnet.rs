//! Deterministic discrete-event kernel and link model.
//!
//! The kernel is strictly single-threaded: actions fire in `(fire_at, seq)`
//! order off a single queue, with `seq` assigned in scheduling order, so two
//! runs with the same seed and configuration replay the exact same action
//! trace. Node logic runs as callbacks taking `&mut World`; node code must
//! not retain references across callbacks except through node-owned state.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::overlay::NodeId;
use crate::rng::SplitMix64;

/// Virtual time: microseconds since the simulation epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

/// A span of virtual time, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimDuration(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        Self(us)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(other.0))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn from_micros(us: u64) -> Self {
        Self(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        Self(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        Self(s * 1_000_000)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }
}

impl core::ops::Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl core::ops::Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl core::ops::Mul<u64> for SimDuration {
    type Output = SimDuration;
    fn mul(self, rhs: u64) -> SimDuration {
        SimDuration(self.0 * rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Handle for a scheduled action; cancelling before it fires prevents
/// execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TimerHandle {
    fire_at: SimTime,
    seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulePast {
    pub at: SimTime,
    pub now: SimTime,
}

type Action<W> = Box<dyn FnOnce(&mut W)>;

/// The event queue plus virtual clock.
pub struct Kernel<W> {
    now: SimTime,
    next_seq: u64,
    queue: BTreeMap<(SimTime, u64), Action<W>>,
}

impl<W> Default for Kernel<W> {
    fn default() -> Self {
        Self::new()
    }
}

impl<W> Kernel<W> {
    pub fn new() -> Self {
        Self { now: SimTime::ZERO, next_seq: 0, queue: BTreeMap::new() }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(
        &mut self,
        at: SimTime,
        action: impl FnOnce(&mut W) + 'static,
    ) -> Result<TimerHandle, SchedulePast> {
        if at < self.now {
            return Err(SchedulePast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), Box::new(action));
        Ok(TimerHandle { fire_at: at, seq })
    }

    pub fn schedule_in(
        &mut self,
        delay: SimDuration,
        action: impl FnOnce(&mut W) + 'static,
    ) -> TimerHandle {
        let at = self.now + delay;
        self.schedule(at, action).expect("now + delay is never in the past")
    }

    /// Returns true when the handle was still pending.
    pub fn cancel(&mut self, handle: TimerHandle) -> bool {
        self.queue.remove(&(handle.fire_at, handle.seq)).is_some()
    }

    fn pop_due(&mut self, until: SimTime) -> Option<Action<W>> {
        let (&(at, seq), _) = self.queue.iter().next()?;
        if at > until {
            return None;
        }
        // schedule() rejects past times, so the queue never holds anything
        // earlier than an already-executed action.
        debug_assert!(at >= self.now);
        self.now = at;
        self.queue.remove(&(at, seq))
    }
}

/// Worlds driven by a kernel implement this so [`run_until`] can pump the
/// queue while actions hold `&mut World`.
pub trait HasKernel: Sized {
    fn kernel_mut(&mut self) -> &mut Kernel<Self>;
}

/// Fires every action due at or before `until`, advancing the clock to
/// `until` (or leaving it at the last fired action when the queue drains
/// first).
pub fn run_until<W: HasKernel>(world: &mut W, until: SimTime) {
    loop {
        let Some(action) = world.kernel_mut().pop_due(until) else { break };
        action(world);
    }
    let kernel = world.kernel_mut();
    if kernel.queue.is_empty() {
        // Clock rests at the last executed action.
    } else {
        kernel.now = until;
    }
}

/// Runs until the queue is completely drained.
pub fn run_to_quiescence<W: HasKernel>(world: &mut W) {
    loop {
        let Some(action) = world.kernel_mut().pop_due(SimTime::from_micros(u64::MAX)) else {
            break;
        };
        action(world);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnknownNode(pub NodeId);

/// Link latency model and per-link byte accounting.
///
/// Every ordered node pair is a link; latency is the per-hop default unless
/// a pair override exists, plus seeded jitter when enabled.
pub struct LinkNet {
    nodes: BTreeSet<NodeId>,
    default_latency: SimDuration,
    overrides: BTreeMap<(NodeId, NodeId), SimDuration>,
    jitter_max: SimDuration,
    jitter_rng: SplitMix64,
    bytes: BTreeMap<(NodeId, NodeId), u64>,
    total_bytes: u64,
}

impl LinkNet {
    pub fn new(default_latency: SimDuration, jitter_max: SimDuration, seed: &SplitMix64) -> Self {
        Self {
            nodes: BTreeSet::new(),
            default_latency,
            overrides: BTreeMap::new(),
            jitter_max,
            jitter_rng: seed.fork("link-jitter"),
            bytes: BTreeMap::new(),
            total_bytes: 0,
        }
    }

    pub fn add_node(&mut self, node: NodeId) {
        self.nodes.insert(node);
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.contains(&node)
    }

    pub fn set_latency(&mut self, src: NodeId, dst: NodeId, latency: SimDuration) {
        self.overrides.insert((src, dst), latency);
    }

    /// Latency for one transmission; draws jitter when enabled.
    pub fn latency(&mut self, src: NodeId, dst: NodeId) -> Result<SimDuration, UnknownNode> {
        if !self.contains(src) {
            return Err(UnknownNode(src));
        }
        if !self.contains(dst) {
            return Err(UnknownNode(dst));
        }
        let base = self.overrides.get(&(src, dst)).copied().unwrap_or(self.default_latency);
        let jitter = if self.jitter_max == SimDuration::ZERO {
            SimDuration::ZERO
        } else {
            SimDuration::from_micros(self.jitter_rng.next_below(self.jitter_max.as_micros() + 1))
        };
        Ok(base + jitter)
    }

    pub fn account(&mut self, src: NodeId, dst: NodeId, bytes: u64) {
        *self.bytes.entry((src, dst)).or_insert(0) += bytes;
        self.total_bytes += bytes;
    }

    pub fn bytes_per_link(&self) -> &BTreeMap<(NodeId, NodeId), u64> {
        &self.bytes
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn bytes_into(&self, dst: NodeId) -> u64 {
        self.bytes.iter().filter(|((_, d), _)| *d == dst).map(|(_, b)| *b).sum()
    }
}

/// Optional action trace: one line per recorded action,
/// `time<TAB>node<TAB>kind<TAB>detail`.
#[derive(Debug, Default)]
pub struct TraceLog {
    enabled: bool,
    lines: Vec<String>,
}

impl TraceLog {
    pub fn new(enabled: bool) -> Self {
        Self { enabled, lines: Vec::new() }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, time: SimTime, node: &str, kind: &str, detail: &str) {
        if self.enabled {
            self.lines.push(alloc::format!("{time}\t{node}\t{kind}\t{detail}"));
        }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}
