//! Discrete-event engine: simulated clock, event queue, entity registry and run loop.
//!
//! Events are totally ordered by `(fire_at, seq)`. The sequence number is handed
//! out at scheduling time, so two events that fire at the same instant are
//! processed in the order they were scheduled.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Events allowed at a single instant before the run loop gives up.
pub const DEFAULT_INSTANT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("event scheduled at {fire_at} which is before the current clock {now}")]
    PastEvent { fire_at: SimTime, now: SimTime },
    #[error("invalid simulated time {0}: must be finite and non-negative")]
    InvalidTime(f64),
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("more than {budget} events dispatched at t={at}; zero-delay event cycle suspected")]
    InstantBudgetExceeded { at: SimTime, budget: u64 },
}

/// Simulated time in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn new(seconds: f64) -> Result<Self, KernelError> {
        if seconds.is_finite() && seconds >= 0.0 {
            // normalise -0.0
            Ok(SimTime(seconds + 0.0))
        } else {
            Err(KernelError::InvalidTime(seconds))
        }
    }

    /// Panics on a non-finite or negative value. For literals and values already known valid.
    pub fn secs(seconds: f64) -> Self {
        Self::new(seconds).expect("valid simulated time")
    }

    pub fn as_secs(self) -> f64 {
        self.0
    }
}

impl Eq for SimTime {}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Add<f64> for SimTime {
    type Output = SimTime;

    fn add(self, delay: f64) -> SimTime {
        SimTime::secs(self.0 + delay)
    }
}

impl Sub for SimTime {
    type Output = f64;

    fn sub(self, rhs: SimTime) -> f64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Datacenter,
    Coordinator,
    Broker,
    Exchange,
    Provisioner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId {
    pub kind: EntityKind,
    pub index: usize,
}

impl EntityId {
    pub fn new(kind: EntityKind, index: usize) -> Self {
        EntityId { kind, index }
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            EntityKind::Datacenter => "datacenter",
            EntityKind::Coordinator => "coordinator",
            EntityKind::Broker => "broker",
            EntityKind::Exchange => "exchange",
            EntityKind::Provisioner => "provisioner",
        };
        write!(f, "{kind}#{}", self.index)
    }
}

/// Hands out entity ids, one dense index range per kind.
#[derive(Debug, Clone, Default)]
pub struct EntityRegistry {
    counts: BTreeMap<EntityKind, usize>,
}

impl EntityRegistry {
    pub fn register(&mut self, kind: EntityKind) -> EntityId {
        let next = self.counts.entry(kind).or_insert(0);
        let id = EntityId::new(kind, *next);
        *next += 1;
        id
    }

    pub fn contains(&self, id: EntityId) -> bool {
        self.counts.get(&id.kind).is_some_and(|&n| id.index < n)
    }

    pub fn len(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: EntityId,
    pub payload: P,
}

impl<P> SimEvent<P> {
    pub fn id(&self) -> EventId {
        EventId(self.seq)
    }
}

struct Queued<P>(SimEvent<P>);

impl<P> Queued<P> {
    fn key(&self) -> (SimTime, u64) {
        (self.0.fire_at, self.0.seq)
    }
}

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// Bookkeeping for the `scheduled = processed + pending + cancelled` identity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventCounts {
    pub scheduled: u64,
    pub processed: u64,
    pub pending: u64,
    pub cancelled: u64,
}

/// Single-threaded event engine. Payload type `P` is whatever the owning world dispatches on.
pub struct Engine<P> {
    clock: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued<P>>>,
    // cancelled but still physically in the heap
    tombstones: HashSet<u64>,
    registry: EntityRegistry,
    processed: u64,
    cancelled: u64,
    instant_budget: u64,
    instant: SimTime,
    dispatched_at_instant: u64,
}

impl<P> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Engine<P> {
    pub fn new() -> Self {
        Engine {
            clock: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            tombstones: HashSet::new(),
            registry: EntityRegistry::default(),
            processed: 0,
            cancelled: 0,
            instant_budget: DEFAULT_INSTANT_BUDGET,
            instant: SimTime::ZERO,
            dispatched_at_instant: 0,
        }
    }

    pub fn with_instant_budget(mut self, budget: u64) -> Self {
        self.instant_budget = budget.max(1);
        self
    }

    pub fn register(&mut self, kind: EntityKind) -> EntityId {
        self.registry.register(kind)
    }

    pub fn registry(&self) -> &EntityRegistry {
        &self.registry
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn schedule(&mut self, fire_at: SimTime, target: EntityId, payload: P) -> Result<EventId, KernelError> {
        if fire_at < self.clock {
            return Err(KernelError::PastEvent { fire_at, now: self.clock });
        }
        if !self.registry.contains(target) {
            return Err(KernelError::UnknownEntity(target));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued(SimEvent { fire_at, seq, target, payload })));
        Ok(EventId(seq))
    }

    pub fn schedule_in(&mut self, delay: f64, target: EntityId, payload: P) -> Result<EventId, KernelError> {
        let at = SimTime::new(self.clock.as_secs() + delay)?;
        self.schedule(at, target, payload)
    }

    /// Cancels a pending event. Returns false if it already fired or was cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if id.0 >= self.next_seq || self.tombstones.contains(&id.0) {
            return false;
        }
        let pending = self.queue.iter().any(|Reverse(q)| q.0.seq == id.0);
        if pending {
            self.tombstones.insert(id.0);
            self.cancelled += 1;
        }
        pending
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.tombstones.len()
    }

    pub fn counts(&self) -> EventCounts {
        EventCounts { scheduled: self.next_seq, processed: self.processed, pending: self.pending() as u64, cancelled: self.cancelled }
    }

    fn drop_tombstones(&mut self) {
        while let Some(Reverse(top)) = self.queue.peek() {
            if !self.tombstones.remove(&top.0.seq) {
                break;
            }
            self.queue.pop();
        }
    }

    fn peek_time(&mut self) -> Option<SimTime> {
        self.drop_tombstones();
        self.queue.peek().map(|Reverse(q)| q.0.fire_at)
    }

    /// Pops the next event if it fires at or before `limit`, advancing the clock to it.
    pub fn step(&mut self, limit: SimTime) -> Result<Option<SimEvent<P>>, KernelError> {
        match self.peek_time() {
            Some(t) if t <= limit => {}
            _ => return Ok(None),
        }
        let Reverse(Queued(event)) = self.queue.pop().expect("peeked");
        if event.fire_at == self.instant {
            self.dispatched_at_instant += 1;
        } else {
            self.instant = event.fire_at;
            self.dispatched_at_instant = 1;
        }
        if self.dispatched_at_instant > self.instant_budget {
            return Err(KernelError::InstantBudgetExceeded { at: event.fire_at, budget: self.instant_budget });
        }
        self.clock = event.fire_at;
        self.processed += 1;
        Ok(Some(event))
    }

    /// Processes every event with `fire_at <= limit`.
    ///
    /// The clock ends at `limit` if events remain beyond it, otherwise at the last
    /// processed event. An empty queue leaves the clock untouched.
    pub fn run_until<F, E>(&mut self, limit: SimTime, mut handler: F) -> Result<SimTime, E>
    where
        F: FnMut(&mut Engine<P>, SimEvent<P>) -> Result<(), E>,
        E: From<KernelError>,
    {
        while let Some(event) = self.step(limit)? {
            handler(self, event)?;
        }
        if self.peek_time().is_some() && limit > self.clock {
            self.clock = limit;
        }
        Ok(self.clock)
    }
}
