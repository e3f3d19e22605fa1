//! Deterministic discrete-event core: the event queue, the run loop, and
//! latency-preserving FIFO links.

use alloc::collections::BinaryHeap;
use core::cmp::Ordering;
use core::time::Duration;

use rand::Rng;

use crate::time::{duration_nanos, SimTime, NANOS_PER_SEC};

/// Index of a simulated node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    PacketArrival,
    Timer,
    BehaviorTrigger,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event<P> {
    pub fire_time: SimTime,
    pub target: NodeId,
    pub kind: EventKind,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    InPast { now: SimTime, at: SimTime },
}

struct Queued<P> {
    time: SimTime,
    seq: u64,
    event: Event<P>,
}

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Pending events ordered by `(fire_time, insertion sequence)`.
pub struct EventQueue<P> {
    heap: BinaryHeap<Queued<P>>,
    now: SimTime,
    next_seq: u64,
    processed: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            processed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Total events handed out by [`EventQueue::pop_until`] so far.
    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn schedule(&mut self, event: Event<P>) -> Result<(), ScheduleError> {
        if event.fire_time < self.now {
            return Err(ScheduleError::InPast {
                now: self.now,
                at: event.fire_time,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued {
            time: event.fire_time,
            seq,
            event,
        });
        Ok(())
    }

    /// Schedules an event; scheduling into the past is a logic bug and panics.
    pub fn push(&mut self, fire_time: SimTime, target: NodeId, kind: EventKind, payload: P) {
        if let Err(e) = self.schedule(Event {
            fire_time,
            target,
            kind,
            payload,
        }) {
            panic!("{e}");
        }
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|q| q.time)
    }

    /// Removes the next event if it fires at or before `until`, advancing the clock.
    pub fn pop_until(&mut self, until: SimTime) -> Option<Event<P>> {
        if self.heap.peek()?.time > until {
            return None;
        }
        let q = self.heap.pop()?;
        debug_assert!(q.time >= self.now);
        self.now = q.time;
        self.processed += 1;
        Some(q.event)
    }

    /// Moves the clock forward without processing anything. Never moves it back.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Drains the remaining events without processing them.
    pub fn drain(&mut self) -> impl Iterator<Item = Event<P>> + '_ {
        self.heap.drain().map(|q| q.event)
    }
}

/// What an event handler may do with the queue: read the clock and schedule.
pub trait Scheduler<P> {
    fn now(&self) -> SimTime;
    /// Schedules an event; scheduling into the past panics.
    fn push(&mut self, fire_time: SimTime, target: NodeId, kind: EventKind, payload: P);
}

impl<P> Scheduler<P> for EventQueue<P> {
    fn now(&self) -> SimTime {
        self.now
    }

    fn push(&mut self, fire_time: SimTime, target: NodeId, kind: EventKind, payload: P) {
        EventQueue::push(self, fire_time, target, kind, payload)
    }
}

pub trait Handler<P> {
    fn handle<Q: Scheduler<P>>(&mut self, queue: &mut Q, event: Event<P>);
}

/// Processes every event with `fire_time <= until`, then sets the clock to
/// `until` (if it is not already past it). Returns the number of events handled.
pub fn run<P, H: Handler<P>>(queue: &mut EventQueue<P>, handler: &mut H, until: SimTime) -> u64 {
    let mut count = 0;
    while let Some(ev) = queue.pop_until(until) {
        handler.handle(queue, ev);
        count += 1;
    }
    queue.advance_to(until);
    count
}

/// Per-packet latency noise added on top of a link's base latency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Jitter {
    None,
    /// Uniform on `[0, max]`.
    Uniform { max: Duration },
}

impl Jitter {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Duration {
        match *self {
            Jitter::None => Duration::ZERO,
            Jitter::Uniform { max } => {
                let max = duration_nanos(max);
                if max == 0 {
                    Duration::ZERO
                } else {
                    Duration::from_nanos(rng.random_range(0..=max))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkSpec {
    pub base_latency: Duration,
    pub jitter: Jitter,
    /// Serialization cap in packets per second, per direction.
    pub pps: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum LinkError {
    #[error("link base latency must be positive")]
    ZeroLatency,
    #[error("link bandwidth cap must be positive")]
    ZeroBandwidth,
    #[error("link endpoints must differ")]
    SelfLoop,
    #[error("node is not an endpoint of this link")]
    NotEndpoint,
}

#[derive(Clone, Copy, Debug, Default)]
struct DirState {
    last_arrival: Option<SimTime>,
    next_free: SimTime,
}

/// A bidirectional link with FIFO delivery in each direction.
#[derive(Clone, Debug)]
pub struct Link {
    endpoints: (NodeId, NodeId),
    spec: LinkSpec,
    dirs: [DirState; 2],
}

impl Link {
    pub fn new(a: NodeId, b: NodeId, spec: LinkSpec) -> Result<Self, LinkError> {
        if a == b {
            return Err(LinkError::SelfLoop);
        }
        if spec.base_latency.is_zero() {
            return Err(LinkError::ZeroLatency);
        }
        if spec.pps == Some(0) {
            return Err(LinkError::ZeroBandwidth);
        }
        Ok(Link {
            endpoints: (a, b),
            spec,
            dirs: [DirState::default(); 2],
        })
    }

    pub fn endpoints(&self) -> (NodeId, NodeId) {
        self.endpoints
    }

    pub fn spec(&self) -> &LinkSpec {
        &self.spec
    }

    /// Sends a packet from `from` at `send_time`, sampling jitter from `rng`.
    pub fn deliver<R: Rng + ?Sized>(
        &mut self,
        from: NodeId,
        send_time: SimTime,
        rng: &mut R,
    ) -> Result<SimTime, LinkError> {
        let jitter = self.spec.jitter.sample(rng);
        self.deliver_with_jitter(from, send_time, jitter)
    }

    /// Arrival time for a packet given an explicit jitter sample.
    ///
    /// With a bandwidth cap the packet waits until the direction is free. The
    /// arrival is clamped to be no earlier than the previous arrival in the same
    /// direction, so jitter never reorders packets.
    pub fn deliver_with_jitter(
        &mut self,
        from: NodeId,
        send_time: SimTime,
        jitter: Duration,
    ) -> Result<SimTime, LinkError> {
        let dir = if from == self.endpoints.0 {
            0
        } else if from == self.endpoints.1 {
            1
        } else {
            return Err(LinkError::NotEndpoint);
        };
        let state = &mut self.dirs[dir];
        let departure = send_time.max(state.next_free);
        if let Some(pps) = self.spec.pps {
            state.next_free = departure + Duration::from_nanos(NANOS_PER_SEC / pps as u64);
        }
        let mut arrival = departure + self.spec.base_latency + jitter;
        if let Some(prev) = state.last_arrival {
            arrival = arrival.max(prev);
        }
        state.last_arrival = Some(arrival);
        Ok(arrival)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Recorder {
        seen: Vec<(SimTime, u32)>,
        spawn_zero_delay: bool,
    }

    impl Handler<u32> for Recorder {
        fn handle<Q: Scheduler<u32>>(&mut self, q: &mut Q, ev: Event<u32>) {
            self.seen.push((ev.fire_time, ev.payload));
            if self.spawn_zero_delay && ev.payload == 1 {
                q.push(q.now(), ev.target, EventKind::Timer, 99);
            }
        }
    }

    fn ev(t: u64, p: u32) -> Event<u32> {
        Event {
            fire_time: SimTime::from_nanos(t),
            target: NodeId(0),
            kind: EventKind::Timer,
            payload: p,
        }
    }

    #[test]
    fn zero_delay_event_fires_right_after_current() {
        let mut q = EventQueue::new();
        q.schedule(ev(10, 1)).unwrap();
        q.schedule(ev(10, 2)).unwrap();
        q.schedule(ev(20, 3)).unwrap();
        let mut h = Recorder {
            seen: Vec::new(),
            spawn_zero_delay: true,
        };
        run(&mut q, &mut h, SimTime::from_nanos(100));
        let order: Vec<u32> = h.seen.iter().map(|s| s.1).collect();
        // 99 is scheduled at t=10 after 2 was already queued at t=10.
        assert_eq!(order, [1, 2, 99, 3]);
    }

    #[test]
    fn equal_times_fire_in_insertion_order() {
        let mut q = EventQueue::new();
        for p in [5, 3, 9, 1] {
            q.schedule(ev(7, p)).unwrap();
        }
        let mut h = Recorder {
            seen: Vec::new(),
            spawn_zero_delay: false,
        };
        run(&mut q, &mut h, SimTime::from_nanos(7));
        let order: Vec<u32> = h.seen.iter().map(|s| s.1).collect();
        assert_eq!(order, [5, 3, 9, 1]);
    }

    #[test]
    fn scheduling_in_the_past_is_an_error() {
        let mut q = EventQueue::new();
        q.schedule(ev(10, 1)).unwrap();
        let mut h = Recorder {
            seen: Vec::new(),
            spawn_zero_delay: false,
        };
        run(&mut q, &mut h, SimTime::from_nanos(10));
        assert_eq!(
            q.schedule(ev(9, 2)),
            Err(ScheduleError::InPast {
                now: SimTime::from_nanos(10),
                at: SimTime::from_nanos(9)
            })
        );
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut q: EventQueue<u32> = EventQueue::new();
        let mut h = Recorder {
            seen: Vec::new(),
            spawn_zero_delay: false,
        };
        let hour = SimTime::from_secs(3600);
        assert_eq!(run(&mut q, &mut h, hour), 0);
        assert_eq!(q.now(), hour);
    }

    #[test]
    fn events_after_until_stay_queued() {
        let mut q = EventQueue::new();
        q.schedule(ev(5, 1)).unwrap();
        q.schedule(ev(50, 2)).unwrap();
        let mut h = Recorder {
            seen: Vec::new(),
            spawn_zero_delay: false,
        };
        assert_eq!(run(&mut q, &mut h, SimTime::from_nanos(20)), 1);
        assert_eq!(q.len(), 1);
        assert_eq!(q.now(), SimTime::from_nanos(20));
    }

    fn spec(ms: u64) -> LinkSpec {
        LinkSpec {
            base_latency: Duration::from_millis(ms),
            jitter: Jitter::None,
            pps: None,
        }
    }

    #[test]
    fn degenerate_jitter_delivers_at_base_latency() {
        let mut link = Link::new(NodeId(0), NodeId(1), spec(10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let at = link.deliver(NodeId(0), SimTime::ZERO, &mut rng).unwrap();
        assert_eq!(at, SimTime::from_millis(10));
    }

    #[test]
    fn jitter_never_reorders() {
        let mut link = Link::new(NodeId(0), NodeId(1), spec(10)).unwrap();
        let first = link
            .deliver_with_jitter(NodeId(0), SimTime::ZERO, Duration::from_millis(5))
            .unwrap();
        let second = link
            .deliver_with_jitter(NodeId(0), SimTime::from_millis(1), Duration::ZERO)
            .unwrap();
        assert_eq!(first, SimTime::from_millis(15));
        assert_eq!(second, first);
        // The other direction is independent.
        let back = link
            .deliver_with_jitter(NodeId(1), SimTime::from_millis(1), Duration::ZERO)
            .unwrap();
        assert_eq!(back, SimTime::from_millis(11));
    }

    #[test]
    fn bandwidth_cap_queues_packets() {
        let mut link = Link::new(
            NodeId(0),
            NodeId(1),
            LinkSpec {
                pps: Some(100),
                ..spec(10)
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arrivals: Vec<SimTime> = (0..1000)
            .map(|_| link.deliver(NodeId(0), SimTime::ZERO, &mut rng).unwrap())
            .collect();
        // Scalar reference: packet i departs at i * (1s / pps).
        let spacing = NANOS_PER_SEC / 100;
        for (i, at) in arrivals.iter().enumerate() {
            assert_eq!(at.as_nanos(), i as u64 * spacing + 10_000_000);
        }
        let span = arrivals[999] - arrivals[0];
        assert_eq!(span, Duration::from_millis(9_990));
    }

    #[test]
    fn invalid_links() {
        assert_eq!(Link::new(NodeId(0), NodeId(0), spec(1)).unwrap_err(), LinkError::SelfLoop);
        assert_eq!(Link::new(NodeId(0), NodeId(1), spec(0)).unwrap_err(), LinkError::ZeroLatency);
        let mut l = Link::new(NodeId(0), NodeId(1), spec(1)).unwrap();
        assert_eq!(
            l.deliver_with_jitter(NodeId(7), SimTime::ZERO, Duration::ZERO),
            Err(LinkError::NotEndpoint)
        );
    }
}
