//! Packet capture: the per-packet `(time, src, dst)` log, record sinks, and
//! the attacker's filtered view of it.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::time::Duration;

use crate::addr::Addr;
use crate::time::{duration_nanos, SimTime};

/// One observed packet. Field order gives the canonical `(time, src, dst)` sort.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PacketRecord {
    pub time: SimTime,
    pub src: Addr,
    pub dst: Addr,
}

impl PacketRecord {
    pub fn new(time: SimTime, src: Addr, dst: Addr) -> Self {
        PacketRecord { time, src, dst }
    }

    pub fn touches(&self, addr: Addr) -> bool {
        self.src == addr || self.dst == addr
    }
}

/// Destination for captured records. Records arrive in non-decreasing time order.
pub trait RecordSink {
    fn record(&mut self, rec: PacketRecord);

    /// Called once after the last record.
    fn finish(&mut self) {}
}

impl RecordSink for Vec<PacketRecord> {
    fn record(&mut self, rec: PacketRecord) {
        self.push(rec);
    }
}

impl<S: RecordSink + ?Sized> RecordSink for &mut S {
    fn record(&mut self, rec: PacketRecord) {
        (**self).record(rec)
    }

    fn finish(&mut self) {
        (**self).finish()
    }
}

/// Counts records and discards them.
#[derive(Default, Debug, Clone, Copy)]
pub struct CountingSink {
    pub count: u64,
}

impl RecordSink for CountingSink {
    fn record(&mut self, _: PacketRecord) {
        self.count += 1;
    }
}

/// Reorders records sharing a timestamp into `(src, dst)` order before
/// passing them on, so output is fully sorted.
pub struct TieSorter<S> {
    inner: S,
    pending: Vec<PacketRecord>,
}

impl<S: RecordSink> TieSorter<S> {
    pub fn new(inner: S) -> Self {
        TieSorter {
            inner,
            pending: Vec::new(),
        }
    }

    pub fn into_inner(mut self) -> S {
        self.flush();
        self.inner
    }

    fn flush(&mut self) {
        self.pending.sort_unstable();
        for r in self.pending.drain(..) {
            self.inner.record(r);
        }
    }
}

impl<S: RecordSink> RecordSink for TieSorter<S> {
    fn record(&mut self, rec: PacketRecord) {
        if let Some(first) = self.pending.first() {
            debug_assert!(rec.time >= first.time, "records out of time order");
            if rec.time != first.time {
                self.flush();
            }
        }
        self.pending.push(rec);
    }

    fn finish(&mut self) {
        self.flush();
        self.inner.finish();
    }
}

/// Drops everything before `cutoff`.
pub struct WarmupFilter<S> {
    pub cutoff: SimTime,
    pub inner: S,
}

impl<S: RecordSink> RecordSink for WarmupFilter<S> {
    fn record(&mut self, rec: PacketRecord) {
        if rec.time >= self.cutoff {
            self.inner.record(rec);
        }
    }

    fn finish(&mut self) {
        self.inner.finish();
    }
}

/// Sends every record to both sinks.
pub struct Tee<A, B>(pub A, pub B);

impl<A: RecordSink, B: RecordSink> RecordSink for Tee<A, B> {
    fn record(&mut self, rec: PacketRecord) {
        self.0.record(rec);
        self.1.record(rec);
    }

    fn finish(&mut self) {
        self.0.finish();
        self.1.finish();
    }
}

/// Keeps only records touching one of the vantage addresses.
pub struct VantageFilter<S> {
    vantage: BTreeSet<Addr>,
    inner: S,
}

impl<S: RecordSink> VantageFilter<S> {
    pub fn new(visible_clients: &BTreeSet<Addr>, boxes: &BTreeSet<Addr>, inner: S) -> Self {
        VantageFilter {
            vantage: visible_clients.union(boxes).copied().collect(),
            inner,
        }
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: RecordSink> RecordSink for VantageFilter<S> {
    fn record(&mut self, rec: PacketRecord) {
        if self.vantage.contains(&rec.src) || self.vantage.contains(&rec.dst) {
            self.inner.record(rec);
        }
    }

    fn finish(&mut self) {
        self.inner.finish();
    }
}

/// What an observer on the first-hop links of `visible_clients` and on the
/// ballot-box links sees.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AttackerView {
    pub visible_clients: BTreeSet<Addr>,
    pub ballot_boxes: BTreeSet<Addr>,
    /// Sorted by `(time, src, dst)`; every record touches a visible client or a box.
    pub records: Vec<PacketRecord>,
}

impl AttackerView {
    /// Builds a view from records that already satisfy the vantage
    /// invariant; they are sorted here.
    pub fn from_records(
        visible_clients: BTreeSet<Addr>,
        ballot_boxes: BTreeSet<Addr>,
        mut records: Vec<PacketRecord>,
    ) -> Self {
        records.sort_unstable();
        AttackerView {
            visible_clients,
            ballot_boxes,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_vantage(&self, addr: Addr) -> bool {
        self.visible_clients.contains(&addr) || self.ballot_boxes.contains(&addr)
    }

    /// Records touching a ballot box.
    pub fn box_streams(&self) -> AttackerView {
        AttackerView {
            visible_clients: BTreeSet::new(),
            ballot_boxes: self.ballot_boxes.clone(),
            records: self
                .records
                .iter()
                .filter(|r| self.ballot_boxes.contains(&r.src) || self.ballot_boxes.contains(&r.dst))
                .copied()
                .collect(),
        }
    }

    /// Shifts every record by `offset` nanoseconds (saturating at zero).
    pub fn shifted(&self, offset: i64) -> AttackerView {
        let mut v = self.clone();
        for r in &mut v.records {
            r.time = shift(r.time, offset);
        }
        v
    }
}

fn shift(t: SimTime, offset: i64) -> SimTime {
    SimTime::from_nanos(t.as_nanos().saturating_add_signed(offset))
}

/// Keeps exactly the records touching a visible client or a ballot box.
pub fn filter_visible(
    full_log: &[PacketRecord],
    visible_clients: &BTreeSet<Addr>,
    ballot_boxes: &BTreeSet<Addr>,
) -> AttackerView {
    let records = full_log
        .iter()
        .filter(|r| {
            visible_clients.contains(&r.src)
                || visible_clients.contains(&r.dst)
                || ballot_boxes.contains(&r.src)
                || ballot_boxes.contains(&r.dst)
        })
        .copied()
        .collect();
    AttackerView::from_records(visible_clients.clone(), ballot_boxes.clone(), records)
}

/// How external traffic is merged with simulated ballot-box streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpliceOptions {
    /// The captured node; inferred as the busiest address when absent.
    pub node: Option<Addr>,
    /// Added to the external trace after both inputs are aligned to zero.
    pub external_offset: Duration,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Spliced {
    /// Candidates are the view's visible clients.
    pub view: AttackerView,
    pub node: Option<Addr>,
    /// External addresses that collided with simulated ones and their replacements.
    pub remapped: BTreeMap<Addr, Addr>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpliceError {
    #[error("no free address left for remapping")]
    AddressSpaceExhausted,
    #[error("designated node {0} does not appear in the trace")]
    UnknownNode(Addr),
}

/// Base of the prefix colliding external addresses are moved into (198.18.0.0/15).
pub const REMAP_PREFIX: Addr = Addr::new(198, 18, 0, 0);
const REMAP_SIZE: u32 = 1 << 17;

/// Merges an external capture of one node with simulated ballot-box streams.
///
/// Every address that talks to the captured node becomes a candidate voter.
/// Both inputs are shifted so their first record is at zero; external
/// addresses that collide with simulated ones are remapped into
/// [`REMAP_PREFIX`].
pub fn splice(
    external: &[PacketRecord],
    box_streams: &AttackerView,
    opts: SpliceOptions,
) -> Result<Spliced, SpliceError> {
    let node = match opts.node {
        Some(n) => {
            if !external.iter().any(|r| r.touches(n)) {
                return Err(SpliceError::UnknownNode(n));
            }
            Some(n)
        }
        None => busiest_address(external),
    };

    let mut candidates = BTreeSet::new();
    if let Some(n) = node {
        for r in external {
            if r.src == n && r.dst != n {
                candidates.insert(r.dst);
            } else if r.dst == n && r.src != n {
                candidates.insert(r.src);
            }
        }
    }

    let mut sim_addrs: BTreeSet<Addr> = box_streams.ballot_boxes.clone();
    for r in &box_streams.records {
        sim_addrs.insert(r.src);
        sim_addrs.insert(r.dst);
    }
    let mut ext_addrs: BTreeSet<Addr> = BTreeSet::new();
    for r in external {
        ext_addrs.insert(r.src);
        ext_addrs.insert(r.dst);
    }

    let mut remapped = BTreeMap::new();
    let mut next = 0u32;
    for &a in ext_addrs.iter().filter(|a| sim_addrs.contains(a)) {
        let fresh = loop {
            if next >= REMAP_SIZE {
                return Err(SpliceError::AddressSpaceExhausted);
            }
            let cand = Addr(REMAP_PREFIX.0 + next);
            next += 1;
            if !sim_addrs.contains(&cand) && !ext_addrs.contains(&cand) {
                break cand;
            }
        };
        remapped.insert(a, fresh);
    }
    let map = |a: Addr| remapped.get(&a).copied().unwrap_or(a);

    let ext_zero = external.iter().map(|r| r.time).min().unwrap_or(SimTime::ZERO);
    let box_zero = box_streams
        .records
        .iter()
        .map(|r| r.time)
        .min()
        .unwrap_or(SimTime::ZERO);
    let offset = duration_nanos(opts.external_offset);

    let mut records: Vec<PacketRecord> = Vec::with_capacity(external.len() + box_streams.records.len());
    records.extend(
        external
            .iter()
            .filter(|r| candidates.contains(&r.src) || candidates.contains(&r.dst))
            .map(|r| PacketRecord {
                time: SimTime::from_nanos((r.time.as_nanos() - ext_zero.as_nanos()).saturating_add(offset)),
                src: map(r.src),
                dst: map(r.dst),
            }),
    );
    records.extend(box_streams.records.iter().map(|r| PacketRecord {
        time: SimTime::from_nanos(r.time.as_nanos() - box_zero.as_nanos()),
        ..*r
    }));

    let visible = candidates.into_iter().map(map).collect();
    Ok(Spliced {
        view: AttackerView::from_records(visible, box_streams.ballot_boxes.clone(), records),
        node: node.map(map),
        remapped,
    })
}

/// The address appearing in the most records; ties go to the lowest address.
pub fn busiest_address(records: &[PacketRecord]) -> Option<Addr> {
    let mut counts: BTreeMap<Addr, u64> = BTreeMap::new();
    for r in records {
        *counts.entry(r.src).or_default() += 1;
        if r.dst != r.src {
            *counts.entry(r.dst).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(a, _)| a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn a(n: u8) -> Addr {
        Addr::new(10, 0, 0, n)
    }

    fn rec(t: u64, s: u8, d: u8) -> PacketRecord {
        PacketRecord::new(SimTime::from_nanos(t), a(s), a(d))
    }

    fn set(xs: &[u8]) -> BTreeSet<Addr> {
        xs.iter().map(|&x| a(x)).collect()
    }

    #[test]
    fn record_sink_appends() {
        let mut log: Vec<PacketRecord> = Vec::new();
        log.record(rec(5, 1, 2));
        assert_eq!(log, [rec(5, 1, 2)]);
    }

    #[test]
    fn tie_sorter_orders_equal_times() {
        let mut s = TieSorter::new(Vec::new());
        for r in [rec(1, 9, 1), rec(1, 2, 3), rec(1, 2, 1), rec(2, 0, 1), rec(3, 5, 5)] {
            s.record(r);
        }
        s.finish();
        assert_eq!(
            s.into_inner(),
            [rec(1, 2, 1), rec(1, 2, 3), rec(1, 9, 1), rec(2, 0, 1), rec(3, 5, 5)]
        );
    }

    #[test]
    fn warmup_filter_discards_early_records() {
        let mut s = WarmupFilter {
            cutoff: SimTime::from_nanos(10),
            inner: Vec::new(),
        };
        for t in [0, 9, 10, 11] {
            s.record(rec(t, 1, 2));
        }
        assert!(s.inner.iter().all(|r| r.time >= SimTime::from_nanos(10)));
        assert_eq!(s.inner.len(), 2);
    }

    #[test]
    fn relay_only_traffic_is_invisible() {
        let log = vec![rec(1, 50, 51), rec(2, 51, 52)];
        let v = filter_visible(&log, &set(&[1, 2]), &set(&[100]));
        assert!(v.is_empty());
    }

    #[test]
    fn all_clients_visible_keeps_every_edge_record() {
        // 1,2 clients; 50..52 relays; 100 box
        let log = vec![
            rec(1, 1, 50),
            rec(2, 50, 51),
            rec(3, 51, 52),
            rec(4, 52, 100),
            rec(5, 100, 52),
            rec(6, 50, 2),
        ];
        let v = filter_visible(&log, &set(&[1, 2]), &set(&[100]));
        assert_eq!(v.records, [rec(1, 1, 50), rec(4, 52, 100), rec(5, 100, 52), rec(6, 50, 2)]);
    }

    #[test]
    fn filtering_a_view_again_is_identity() {
        let log = vec![rec(1, 1, 50), rec(2, 3, 50), rec(4, 52, 100), rec(4, 2, 50)];
        let v = filter_visible(&log, &set(&[1, 2]), &set(&[100]));
        let again = filter_visible(&v.records, &v.visible_clients, &v.ballot_boxes);
        assert_eq!(v, again);
    }

    #[test]
    fn splice_of_empty_trace_is_box_streams() {
        let boxes = AttackerView::from_records(BTreeSet::new(), set(&[100]), vec![rec(7, 52, 100), rec(9, 100, 52)]);
        let s = splice(&[], &boxes, SpliceOptions::default()).unwrap();
        assert!(s.view.visible_clients.is_empty());
        assert_eq!(s.view.records, [rec(0, 52, 100), rec(2, 100, 52)]);
        assert_eq!(s.node, None);
    }

    #[test]
    fn splice_candidates_are_peers_of_the_node() {
        let node = 200;
        let trace = vec![rec(100, 1, node), rec(101, node, 2), rec(102, 3, node), rec(103, 4, 5)];
        let boxes = AttackerView::from_records(BTreeSet::new(), set(&[100]), vec![rec(0, 52, 100)]);
        let s = splice(&trace, &boxes, SpliceOptions::default()).unwrap();
        assert_eq!(s.node, Some(a(node)));
        assert_eq!(s.view.visible_clients, set(&[1, 2, 3]));
        // the 4->5 record touches no candidate
        assert_eq!(s.view.len(), 3 + 1);
        // Equal times order by source address.
        assert_eq!(s.view.records[0], rec(0, 1, node));
        assert_eq!(s.view.records[1], rec(0, 52, 100));
    }

    #[test]
    fn splice_remaps_colliding_addresses() {
        // external client 52 collides with the simulated exit 52
        let trace = vec![rec(0, 52, 200), rec(1, 200, 52), rec(2, 7, 200)];
        let boxes = AttackerView::from_records(BTreeSet::new(), set(&[100]), vec![rec(0, 52, 100), rec(1, 100, 52)]);
        let s = splice(&trace, &boxes, SpliceOptions::default()).unwrap();
        let fresh = s.remapped[&a(52)];
        assert_eq!(fresh, REMAP_PREFIX);
        assert!(s.view.visible_clients.contains(&fresh));
        assert!(!s.view.visible_clients.contains(&a(52)));
        let ext_side: BTreeSet<Addr> = s
            .view
            .records
            .iter()
            .filter(|r| !s.view.ballot_boxes.contains(&r.src) && !s.view.ballot_boxes.contains(&r.dst))
            .flat_map(|r| [r.src, r.dst])
            .collect();
        assert!(ext_side.contains(&fresh));
        assert_eq!(s.view.records.iter().filter(|r| r.touches(a(52))).count(), 2);
    }

    #[test]
    fn splice_rejects_unknown_node() {
        let trace = vec![rec(0, 1, 2)];
        let err = splice(
            &trace,
            &AttackerView::default(),
            SpliceOptions {
                node: Some(a(9)),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert_eq!(err, SpliceError::UnknownNode(a(9)));
    }

    #[test]
    fn shifting_saturates() {
        let v = AttackerView::from_records(BTreeSet::new(), BTreeSet::new(), vec![rec(5, 1, 2)]);
        assert_eq!(v.shifted(-10).records[0].time, SimTime::ZERO);
        assert_eq!(v.shifted(17).records[0].time, SimTime::from_nanos(22));
    }
}
