//! Single-threaded discrete-event kernel.
//!
//! Events execute in `(at, seq)` order where `seq` is a global insertion
//! counter, so ties at the same virtual millisecond run in the order they
//! were scheduled. Randomness comes from per-node SplitMix64 streams.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Virtual milliseconds since the start of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn ms(self) -> u64 {
        self.0
    }

    pub fn after(self, delay_ms: u64) -> SimTime {
        SimTime(self.0.saturating_add(delay_ms))
    }

    pub fn since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("cannot schedule at {at} while the clock reads {now}")]
    ScheduleInPast { at: SimTime, now: SimTime },
}

/// SplitMix64 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimRng {
    state: u64,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream for node `index` under `root_seed`.
    pub fn for_node(root_seed: u64, index: u64) -> Self {
        Self::new(root_seed ^ index)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in `[lo, hi]` by modulo reduction.
    pub fn next_in_range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo;
        if span == u64::MAX {
            return self.next_u64();
        }
        lo + self.next_u64() % (span + 1)
    }
}

/// One-way network delay, uniform in `[base_ms, base_ms + jitter_ms]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub base_ms: u64,
    pub jitter_ms: u64,
}

impl LatencyModel {
    pub const ZERO: LatencyModel = LatencyModel {
        base_ms: 0,
        jitter_ms: 0,
    };

    pub fn fixed(base_ms: u64) -> Self {
        Self {
            base_ms,
            jitter_ms: 0,
        }
    }
}

/// Always consumes exactly one draw, even for zero jitter, so streams stay
/// aligned when only the jitter changes.
pub fn sample_latency(model: &LatencyModel, rng: &mut SimRng) -> u64 {
    model.base_ms + rng.next_u64() % (model.jitter_ms.saturating_add(1)).max(1)
}

/// Payloads that can be rendered into trace lines.
pub trait TracePayload {
    fn kind(&self) -> &'static str;
    fn summary(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct Event<N, P> {
    pub at: SimTime,
    pub seq: u64,
    pub target: N,
    pub payload: P,
}

impl<N: fmt::Display, P: TracePayload> Event<N, P> {
    /// `at_ms \t seq \t target \t kind \t summary`
    pub fn trace_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.at.0,
            self.seq,
            self.target,
            self.payload.kind(),
            self.payload.summary()
        )
    }
}

struct Queued<N, P>(Event<N, P>);

impl<N, P> PartialEq for Queued<N, P> {
    fn eq(&self, other: &Self) -> bool {
        (self.0.at, self.0.seq) == (other.0.at, other.0.seq)
    }
}

impl<N, P> Eq for Queued<N, P> {}

impl<N, P> PartialOrd for Queued<N, P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<N, P> Ord for Queued<N, P> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.0.at, self.0.seq).cmp(&(other.0.at, other.0.seq))
    }
}

/// Clock plus pending-event queue.
pub struct Scheduler<N, P> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued<N, P>>>,
    trace: Option<Vec<String>>,
    executed: u64,
}

/// Error raised by a handler, tagged with the event that raised it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Halted<E> {
    pub at: SimTime,
    pub seq: u64,
    pub error: E,
}

pub trait Handler<N, P> {
    type Error;

    fn handle(&mut self, sched: &mut Scheduler<N, P>, event: Event<N, P>) -> Result<(), Self::Error>;
}

impl<N, P> Default for Scheduler<N, P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<N, P> Scheduler<N, P> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            trace: None,
            executed: 0,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    /// Enqueues `payload` for `target` at `at`; returns the insertion seq.
    pub fn schedule(&mut self, at: SimTime, target: N, payload: P) -> Result<u64, KernelError> {
        if at < self.now {
            return Err(KernelError::ScheduleInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued(Event {
            at,
            seq,
            target,
            payload,
        })));
        Ok(seq)
    }

    /// Schedules relative to the current clock; never fails.
    pub fn schedule_in(&mut self, delay_ms: u64, target: N, payload: P) -> u64 {
        let at = self.now.after(delay_ms);
        self.schedule(at, target, payload)
            .expect("relative schedules are never in the past")
    }

    pub fn take_trace(&mut self) -> Option<Vec<String>> {
        self.trace.take()
    }
}

impl<N: fmt::Display, P: TracePayload> Scheduler<N, P> {
    /// Executes every event with `at <= t_end`, then sets the clock to `t_end`.
    pub fn run_until<H>(&mut self, t_end: SimTime, handler: &mut H) -> Result<(), Halted<H::Error>>
    where
        H: Handler<N, P>,
    {
        while let Some(Reverse(top)) = self.queue.peek() {
            if top.0.at > t_end {
                break;
            }
            let Reverse(Queued(event)) = self.queue.pop().expect("peeked");
            debug_assert!(event.at >= self.now, "clock moved backwards");
            self.now = event.at;
            self.executed += 1;
            if let Some(trace) = self.trace.as_mut() {
                trace.push(event.trace_line());
            }
            let (at, seq) = (event.at, event.seq);
            handler
                .handle(self, event)
                .map_err(|error| Halted { at, seq, error })?;
        }
        if t_end > self.now {
            self.now = t_end;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    enum Msg {
        Ping(u32),
        Spawn { delay: u64 },
    }

    impl TracePayload for Msg {
        fn kind(&self) -> &'static str {
            match self {
                Msg::Ping(_) => "Ping",
                Msg::Spawn { .. } => "Spawn",
            }
        }

        fn summary(&self) -> String {
            match self {
                Msg::Ping(n) => n.to_string(),
                Msg::Spawn { delay } => format!("+{delay}"),
            }
        }
    }

    #[derive(Default)]
    struct Log(Vec<(u64, u64, Msg)>);

    impl Handler<&'static str, Msg> for Log {
        type Error = ();

        fn handle(&mut self, sched: &mut Scheduler<&'static str, Msg>, ev: Event<&'static str, Msg>) -> Result<(), ()> {
            if let Msg::Spawn { delay } = ev.payload {
                sched.schedule_in(delay, "n", Msg::Ping(delay as u32));
            }
            self.0.push((ev.at.0, ev.seq, ev.payload));
            Ok(())
        }
    }

    #[test]
    fn ties_run_in_insertion_order() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(0), "n", Msg::Ping(1)).unwrap();
        s.schedule(SimTime(0), "n", Msg::Ping(2)).unwrap();
        let mut log = Log::default();
        s.run_until(SimTime(0), &mut log).unwrap();
        assert_eq!(
            log.0.iter().map(|e| e.2.clone()).collect::<Vec<_>>(),
            vec![Msg::Ping(1), Msg::Ping(2)]
        );
    }

    #[test]
    fn rejects_past_schedules() {
        let mut s: Scheduler<&str, Msg> = Scheduler::new();
        s.run_until(SimTime(100), &mut Log::default()).unwrap();
        assert_eq!(
            s.schedule(SimTime(50), "n", Msg::Ping(0)),
            Err(KernelError::ScheduleInPast {
                at: SimTime(50),
                now: SimTime(100)
            })
        );
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut s: Scheduler<&str, Msg> = Scheduler::new();
        s.run_until(SimTime(1000), &mut Log::default()).unwrap();
        assert_eq!(s.now(), SimTime(1000));
    }

    #[test]
    fn cascading_events_and_boundary() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(500), "n", Msg::Spawn { delay: 200 }).unwrap();
        s.schedule(SimTime(1001), "n", Msg::Ping(9)).unwrap();
        let mut log = Log::default();
        s.run_until(SimTime(1000), &mut log).unwrap();
        let times: Vec<u64> = log.0.iter().map(|e| e.0).collect();
        assert_eq!(times, vec![500, 700]);
        assert_eq!(s.pending(), 1);
        assert_eq!(s.now(), SimTime(1000));
    }

    #[test]
    fn trace_lines_are_tab_separated() {
        let mut s = Scheduler::new().with_trace();
        s.schedule(SimTime(3), "n", Msg::Ping(7)).unwrap();
        s.run_until(SimTime(10), &mut Log::default()).unwrap();
        assert_eq!(s.take_trace().unwrap(), vec!["3\t0\tn\tPing\t7".to_string()]);
    }

    #[test]
    fn handler_errors_carry_event_position() {
        struct Fail;
        impl Handler<&'static str, Msg> for Fail {
            type Error = &'static str;
            fn handle(&mut self, _: &mut Scheduler<&'static str, Msg>, _: Event<&'static str, Msg>) -> Result<(), &'static str> {
                Err("boom")
            }
        }
        let mut s = Scheduler::new();
        s.schedule(SimTime(4), "n", Msg::Ping(0)).unwrap();
        s.schedule(SimTime(4), "n", Msg::Ping(1)).unwrap();
        let err = s.run_until(SimTime(10), &mut Fail).unwrap_err();
        assert_eq!(err, Halted { at: SimTime(4), seq: 0, error: "boom" });
    }

    #[test]
    fn splitmix_reference_outputs() {
        let mut r = SimRng::new(0);
        assert_eq!(r.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(r.next_u64(), 0x6e78_9e6a_a1b9_65f4);
        let mut r = SimRng::new(42);
        assert_eq!(r.next_u64(), 0xbdd7_3226_2feb_6e95);
    }

    #[test]
    fn per_node_streams() {
        assert_eq!(SimRng::for_node(42, 0), SimRng::new(42));
        let mut a = SimRng::for_node(42, 1);
        let mut b = SimRng::for_node(42, 2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn latency_sampling() {
        let mut rng = SimRng::new(7);
        for _ in 0..100 {
            assert_eq!(sample_latency(&LatencyModel::fixed(10), &mut rng), 10);
        }
        let m = LatencyModel {
            base_ms: 10,
            jitter_ms: 5,
        };
        let draws: Vec<u64> = (0..500).map(|_| sample_latency(&m, &mut rng)).collect();
        assert!(draws.iter().all(|d| (10..=15).contains(d)));
        assert!(draws.contains(&10) && draws.contains(&15));

        let mut a = SimRng::new(99);
        let mut b = SimRng::new(99);
        let xs: Vec<u64> = (0..20).map(|_| sample_latency(&m, &mut a)).collect();
        let ys: Vec<u64> = (0..20).map(|_| sample_latency(&m, &mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn identical_inputs_replay_identically() {
        fn run() -> Vec<String> {
            let mut s = Scheduler::new().with_trace();
            let mut rng = SimRng::new(5);
            for i in 0..50 {
                let at = SimTime(rng.next_in_range(0, 100));
                s.schedule(at, "n", Msg::Ping(i)).unwrap();
            }
            s.run_until(SimTime(100), &mut Log::default()).unwrap();
            s.take_trace().unwrap()
        }
        assert_eq!(run(), run());
    }
}
