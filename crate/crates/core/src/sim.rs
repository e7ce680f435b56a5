// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event kernel.
//!
//! Virtual time is an integer count of milliseconds. Events are dispatched in
//! `(fire_at, seq)` order where `seq` is a per-kernel insertion counter, so two
//! events scheduled for the same instant fire in the order they were scheduled.
//! Every dispatched event is folded into a SHA-256 digest of the dispatch log;
//! the textual log itself is only retained when requested.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Virtual time in milliseconds.
pub type Millis = u64;

/// Default upper bound on dispatched events per run.
pub const DEFAULT_EVENT_CAP: u64 = 100_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled in the past: fire_at={fire_at} < now={now}")]
    ScheduleInPast { fire_at: Millis, now: Millis },
    #[error("event cap of {cap} dispatched events exceeded at t={now} ms (scheduling livelock?)")]
    EventCapExceeded { cap: u64, now: Millis },
    #[error("invariant violated at t={now} ms: {what}")]
    Invariant { now: Millis, what: String },
}

/// Payloads dispatched by the kernel describe themselves for the dispatch log.
pub trait EventPayload {
    fn kind(&self) -> &'static str;
    fn detail(&self) -> String;
}

/// Handle returned by [`Kernel::schedule`]; permits cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle {
    fire_at: Millis,
    seq: u64,
}

impl EventHandle {
    pub fn fire_at(&self) -> Millis {
        self.fire_at
    }
}

/// Monotone virtual clock. Starts at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: Millis,
}

impl SimClock {
    pub fn now(&self) -> Millis {
        self.now
    }

    fn advance_to(&mut self, t: Millis) {
        debug_assert!(t >= self.now);
        self.now = t;
    }
}

pub struct Kernel<E> {
    clock: SimClock,
    queue: BTreeMap<(Millis, u64), E>,
    next_seq: u64,
    dispatched: u64,
    event_cap: u64,
    hasher: Sha256,
    log: Option<Vec<String>>,
}

impl<E: EventPayload> Default for Kernel<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: EventPayload> Kernel<E> {
    pub fn new() -> Self {
        Self {
            clock: SimClock::default(),
            queue: BTreeMap::new(),
            next_seq: 0,
            dispatched: 0,
            event_cap: DEFAULT_EVENT_CAP,
            hasher: Sha256::new(),
            log: None,
        }
    }

    pub fn with_event_cap(mut self, cap: u64) -> Self {
        self.event_cap = cap;
        self
    }

    /// Retain the textual dispatch log (`t_ms,kind,detail` per line).
    pub fn with_dispatch_log(mut self, enabled: bool) -> Self {
        self.log = enabled.then(Vec::new);
        self
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn schedule(&mut self, fire_at: Millis, payload: E) -> Result<EventHandle, SimError> {
        let now = self.clock.now();
        if fire_at < now {
            return Err(SimError::ScheduleInPast { fire_at, now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((fire_at, seq), payload);
        Ok(EventHandle { fire_at, seq })
    }

    pub fn schedule_in(&mut self, delay: Millis, payload: E) -> EventHandle {
        let fire_at = self.clock.now().saturating_add(delay);
        // fire_at >= now by construction
        self.schedule(fire_at, payload).expect("non-negative delay")
    }

    /// Returns the payload if the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> Option<E> {
        self.queue.remove(&(handle.fire_at, handle.seq))
    }

    /// Pops events in `(fire_at, seq)` order until the queue drains.
    pub fn run<F>(&mut self, mut handler: F) -> Result<Millis, SimError>
    where
        F: FnMut(&mut Self, E) -> Result<(), SimError>,
    {
        while let Some(((fire_at, _seq), payload)) = self.queue.pop_first() {
            if self.dispatched >= self.event_cap {
                return Err(SimError::EventCapExceeded {
                    cap: self.event_cap,
                    now: self.clock.now(),
                });
            }
            self.clock.advance_to(fire_at);
            self.dispatched += 1;
            let line = format!("{},{},{}", fire_at, payload.kind(), payload.detail());
            self.hasher.update(line.as_bytes());
            self.hasher.update(b"\n");
            if let Some(log) = self.log.as_mut() {
                log.push(line);
            }
            handler(self, payload)?;
        }
        Ok(self.clock.now())
    }

    /// Hex SHA-256 over every dispatched log line so far.
    pub fn dispatch_digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    pub fn take_dispatch_log(&mut self) -> Vec<String> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// A named, seeded random stream. Each consumer owns its own stream so that
/// changing how one component draws does not perturb the others.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(label.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        Self {
            seed,
            label: label.to_owned(),
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[derive(Debug, Clone, PartialEq)]
    struct Ev(u32);

    impl EventPayload for Ev {
        fn kind(&self) -> &'static str {
            "ev"
        }
        fn detail(&self) -> String {
            self.0.to_string()
        }
    }

    #[test]
    fn schedule_base_case() {
        let mut k = Kernel::new();
        let h = k.schedule(5, Ev(1)).unwrap();
        assert_eq!(k.pending(), 1);
        assert_eq!(h.fire_at(), 5);
    }

    #[test]
    fn same_instant_fires_in_insertion_order() {
        let mut k = Kernel::new();
        for i in 0..5 {
            k.schedule(3, Ev(i)).unwrap();
        }
        let mut seen = Vec::new();
        k.run(|_, e| {
            seen.push(e.0);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn cancelled_event_never_dispatched() {
        let mut k = Kernel::new();
        let h = k.schedule(4, Ev(9)).unwrap();
        k.schedule(6, Ev(1)).unwrap();
        assert_eq!(k.cancel(h), Some(Ev(9)));
        assert_eq!(k.cancel(h), None);
        let mut seen = Vec::new();
        let end = k
            .run(|_, e| {
                seen.push(e.0);
                Ok(())
            })
            .unwrap();
        assert_eq!(seen, vec![1]);
        assert_eq!(end, 6);
    }

    #[test]
    fn single_event_final_clock() {
        let mut k = Kernel::new();
        k.schedule(7, Ev(0)).unwrap();
        assert_eq!(k.run(|_, _| Ok(())).unwrap(), 7);
        // empty follow-up run leaves the clock where it was
        assert_eq!(k.run(|_, _| Ok(())).unwrap(), 7);
    }

    #[test]
    fn past_schedule_rejected() {
        let mut k = Kernel::new();
        k.schedule(10, Ev(0)).unwrap();
        let err = k.run(|k, _| k.schedule(3, Ev(1)).map(|_| ())).unwrap_err();
        assert_eq!(err, SimError::ScheduleInPast { fire_at: 3, now: 10 });
    }

    #[test]
    fn event_cap_aborts_livelock() {
        let mut k = Kernel::new().with_event_cap(100);
        k.schedule(0, Ev(0)).unwrap();
        let err = k.run(|k, e| k.schedule(k.now() + 1, e).map(|_| ())).unwrap_err();
        assert!(matches!(err, SimError::EventCapExceeded { cap: 100, .. }));
    }

    #[test]
    fn dispatch_log_lines() {
        let mut k = Kernel::new().with_dispatch_log(true);
        k.schedule(2, Ev(5)).unwrap();
        k.run(|_, _| Ok(())).unwrap();
        assert_eq!(k.take_dispatch_log(), vec!["2,ev,5".to_string()]);
    }

    #[test]
    fn rng_streams_are_independent_by_label() {
        let mut a = RngStream::new(1, "trace");
        let mut b = RngStream::new(1, "trace");
        let mut c = RngStream::new(1, "load-gen");
        let xa: u64 = a.rng().random();
        let xb: u64 = b.rng().random();
        let xc: u64 = c.rng().random();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    proptest! {
        #[test]
        fn clock_is_monotone_under_random_interleavings(
            initial in proptest::collection::vec(0u64..1000, 1..40),
            follow in proptest::collection::vec((0u64..50, any::<bool>()), 0..80),
        ) {
            let mut k: Kernel<Ev> = Kernel::new();
            let mut handles = Vec::new();
            for (i, t) in initial.iter().enumerate() {
                handles.push(k.schedule(*t, Ev(i as u32)).unwrap());
            }
            let mut cancelled = std::collections::HashSet::new();
            for (i, h) in handles.iter().enumerate() {
                if i % 3 == 0 && k.cancel(*h).is_some() {
                    cancelled.insert(i as u32);
                }
            }
            let mut last = 0;
            let mut step = 0usize;
            let mut ok = true;
            k.run(|k, e| {
                if k.now() < last || cancelled.contains(&e.0) {
                    ok = false;
                }
                last = k.now();
                if let Some((d, resched)) = follow.get(step) {
                    step += 1;
                    if *resched {
                        k.schedule_in(*d, Ev(10_000 + step as u32));
                    }
                }
                Ok(())
            }).unwrap();
            prop_assert!(ok);
        }
    }
}
