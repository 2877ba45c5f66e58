//! Deterministic discrete-event engine: virtual clock, event queue, and
//! cancellable scheduling. Everything else in the simulator runs on top of
//! this; the clock only ever advances by dispatching events.

use std::collections::BTreeMap;

use thiserror::Error;

/// Virtual time in integer milliseconds since scenario start.
pub type VirtualMs = u64;

pub const MS_PER_SEC: u64 = 1_000;
pub const MS_PER_HOUR: u64 = 3_600_000;
pub const MS_PER_DAY: u64 = 86_400_000;

/// Monotonically non-decreasing virtual clock.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimClock {
    now: VirtualMs,
}

impl SimClock {
    pub fn now(&self) -> VirtualMs {
        self.now
    }

    fn advance_to(&mut self, t: VirtualMs) {
        debug_assert!(t >= self.now, "clock regression: {} -> {}", self.now, t);
        self.now = t;
    }
}

/// A dequeued event, ready for dispatch.
#[derive(Debug, Clone)]
pub struct Event<P> {
    pub fire_at: VirtualMs,
    pub seq: u64,
    pub payload: P,
}

/// Handle returned by [`Sim::schedule`]; permits cancellation before firing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("event scheduled in the past: fire_at {fire_at} ms < now {now} ms")]
    FireAtInPast { fire_at: VirtualMs, now: VirtualMs },
}

/// Event queue plus clock. Dispatch order is total: ascending
/// `(fire_at, seq)` where `seq` is the global insertion counter, so ties at
/// the same virtual time fire in insertion order regardless of how the
/// underlying container happens to iterate.
pub struct Sim<P> {
    clock: SimClock,
    queue: BTreeMap<(VirtualMs, u64), P>,
    // seq -> fire_at, so a handle can find its queue entry for cancellation
    pending: BTreeMap<u64, VirtualMs>,
    next_seq: u64,
    dispatched: u64,
}

impl<P> Default for Sim<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Sim<P> {
    pub fn new() -> Self {
        Sim {
            clock: SimClock::default(),
            queue: BTreeMap::new(),
            pending: BTreeMap::new(),
            next_seq: 0,
            dispatched: 0,
        }
    }

    pub fn now(&self) -> VirtualMs {
        self.clock.now()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Enqueue a payload to fire at `fire_at`. Scheduling in the past is a
    /// logic bug in the caller and is rejected so the run can abort.
    pub fn schedule(
        &mut self,
        fire_at: VirtualMs,
        payload: P,
    ) -> Result<EventHandle, ScheduleError> {
        if fire_at < self.clock.now() {
            return Err(ScheduleError::FireAtInPast {
                fire_at,
                now: self.clock.now(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((fire_at, seq), payload);
        self.pending.insert(seq, fire_at);
        Ok(EventHandle(seq))
    }

    /// Remove a not-yet-fired event. Returns false if it already fired or
    /// was cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        match self.pending.remove(&handle.0) {
            Some(fire_at) => self.queue.remove(&(fire_at, handle.0)).is_some(),
            None => false,
        }
    }

    fn pop_due(&mut self, t_end: VirtualMs) -> Option<Event<P>> {
        let (&(fire_at, seq), _) = self.queue.iter().next()?;
        if fire_at > t_end {
            return None;
        }
        let payload = self.queue.remove(&(fire_at, seq)).expect("entry just seen");
        self.pending.remove(&seq);
        Some(Event {
            fire_at,
            seq,
            payload,
        })
    }

    /// Dispatch every event with `fire_at <= t_end` in `(fire_at, seq)`
    /// order, handing each to `handler` together with `&mut self` so the
    /// handler can schedule follow-up events. Afterwards the clock sits at
    /// exactly `t_end`. Returns the number of events dispatched.
    pub fn run_until<F>(&mut self, t_end: VirtualMs, mut handler: F) -> u64
    where
        F: FnMut(&mut Sim<P>, Event<P>),
    {
        assert!(
            t_end >= self.clock.now(),
            "run_until({}) with clock already at {}",
            t_end,
            self.clock.now()
        );
        let mut count = 0;
        while let Some(event) = self.pop_due(t_end) {
            self.clock.advance_to(event.fire_at);
            self.dispatched += 1;
            count += 1;
            handler(self, event);
        }
        self.clock.advance_to(t_end);
        count
    }
}
