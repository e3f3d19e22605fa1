//! The correlation attack: pattern extraction from a reference trace, noise
//! reduction by block size, and gap-constrained pattern matching.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use core::time::Duration;

use crate::addr::Addr;
use crate::capture::{AttackerView, PacketRecord};
use crate::time::{duration_nanos, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Client,
    Server,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Out,
    In,
}

/// One packet event of a pattern: which stream it appears in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Step {
    pub role: Role,
    pub dir: Direction,
}

impl Step {
    pub const CLIENT_OUT: Step = Step::new(Role::Client, Direction::Out);
    pub const CLIENT_IN: Step = Step::new(Role::Client, Direction::In);
    pub const SERVER_OUT: Step = Step::new(Role::Server, Direction::Out);
    pub const SERVER_IN: Step = Step::new(Role::Server, Direction::In);

    pub const fn new(role: Role, dir: Direction) -> Self {
        Step { role, dir }
    }

    fn bit(self) -> u8 {
        match (self.role, self.dir) {
            (Role::Client, Direction::Out) => CO,
            (Role::Client, Direction::In) => CI,
            (Role::Server, Direction::In) => SI,
            (Role::Server, Direction::Out) => SO,
        }
    }
}

const CO: u8 = 1;
const CI: u8 = 2;
const SI: u8 = 4;
const SO: u8 = 8;

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let role = match self.role {
            Role::Client => "client",
            Role::Server => "server",
        };
        let dir = match self.dir {
            Direction::Out => "out",
            Direction::In => "in",
        };
        write!(f, "{role} {dir}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PatternError {
    #[error("pattern is empty")]
    Empty,
    #[error("pattern must start with a client output step")]
    BadFirstStep,
    #[error("malformed pattern step; expected `client|server out|in`")]
    BadStep,
    #[error("reference view must contain exactly one client and one ballot box (found {clients} and {boxes})")]
    NotAToyView { clients: usize, boxes: usize },
    #[error("reference view has no record inbound to the server")]
    NoServerInbound,
    #[error("no client output precedes the server's first inbound record")]
    NoClientTrigger,
}

impl FromStr for Step {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut it = s.split_whitespace();
        let role = match it.next() {
            Some("client") => Role::Client,
            Some("server") => Role::Server,
            _ => return Err(PatternError::BadStep),
        };
        let dir = match it.next() {
            Some("out") => Direction::Out,
            Some("in") => Direction::In,
            _ => return Err(PatternError::BadStep),
        };
        if it.next().is_some() {
            return Err(PatternError::BadStep);
        }
        Ok(Step { role, dir })
    }
}

/// An ordered, non-empty sequence of steps that begins with the client sending.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pattern {
    steps: Vec<Step>,
}

impl Pattern {
    pub fn new(steps: Vec<Step>) -> Result<Self, PatternError> {
        match steps.first() {
            None => Err(PatternError::Empty),
            Some(&s) if s != Step::CLIENT_OUT => Err(PatternError::BadFirstStep),
            Some(_) => Ok(Pattern { steps }),
        }
    }

    /// The request/echo pattern of a ping.
    pub fn ping() -> Self {
        Pattern {
            steps: vec![Step::CLIENT_OUT, Step::SERVER_IN, Step::SERVER_OUT, Step::CLIENT_IN],
        }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for Pattern {
    /// One step per line, newline terminated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for Pattern {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let steps = s
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(Step::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Pattern::new(steps)
    }
}

fn step_mask(r: &PacketRecord, client: Addr, server: Addr) -> u8 {
    let mut m = 0;
    if r.src == client {
        m |= CO;
    }
    if r.dst == client {
        m |= CI;
    }
    if r.dst == server {
        m |= SI;
    }
    if r.src == server {
        m |= SO;
    }
    m
}

fn mask_step(m: u8) -> Step {
    // A record seen from both sides is attributed to the client's stream.
    if m & CO != 0 {
        Step::CLIENT_OUT
    } else if m & CI != 0 {
        Step::CLIENT_IN
    } else if m & SI != 0 {
        Step::SERVER_IN
    } else {
        Step::SERVER_OUT
    }
}

/// Derives the vote pattern from the view of a toy run with one client and one
/// ballot box.
///
/// The server's first and last inbound records delimit the exchange. Each is
/// traced back to the client output that triggered it: the window opens at
/// the last client output before the first inbound record and extends to the
/// client output that caused the last one, or to the client's receipt of the
/// server's final reply if that comes later. Everything outside the window
/// (circuit construction, idle traffic, the server seeing the close) is
/// trimmed.
pub fn extract_pattern(reference: &AttackerView) -> Result<Pattern, PatternError> {
    if reference.visible_clients.len() != 1 || reference.ballot_boxes.len() != 1 {
        return Err(PatternError::NotAToyView {
            clients: reference.visible_clients.len(),
            boxes: reference.ballot_boxes.len(),
        });
    }
    let client = *reference.visible_clients.first().unwrap();
    let server = *reference.ballot_boxes.first().unwrap();
    let tagged: Vec<u8> = reference
        .records
        .iter()
        .map(|r| step_mask(r, client, server))
        .collect();
    let is = |i: usize, bit: u8| tagged[i] & bit != 0;

    let first_in = (0..tagged.len())
        .find(|&i| is(i, SI))
        .ok_or(PatternError::NoServerInbound)?;
    let last_in = (0..tagged.len()).rev().find(|&i| is(i, SI)).unwrap();
    let start = (0..first_in)
        .rev()
        .find(|&i| is(i, CO))
        .ok_or(PatternError::NoClientTrigger)?;
    let mut end = (0..last_in).rev().find(|&i| is(i, CO)).unwrap_or(start);
    if let Some(last_out) = (0..tagged.len()).rev().find(|&i| is(i, SO)) {
        let receipt = (last_out + 1..tagged.len()).find(|&i| is(i, CI)).unwrap_or(last_out);
        end = end.max(receipt);
    }
    end = end.max(start);

    let steps = (start..=end)
        .filter(|&i| tagged[i] != 0)
        .map(|i| mask_step(tagged[i]))
        .collect();
    Pattern::new(steps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    /// Fixed windows `[k*t, (k+1)*t)`.
    Tumbling,
    /// A record is dropped if any window of length `t` containing it is over the limit.
    Sliding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowScope {
    /// Each endpoint's sent and received packets are counted separately.
    PerDirection,
    /// Sent and received packets of an endpoint share one count.
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ParamError {
    #[error("window length must be positive")]
    ZeroWindow,
    #[error("maximum gap must be positive")]
    ZeroGap,
}

/// Block-size noise filter: windows holding more than `max_block` packets are cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseParams {
    pub max_block: u32,
    pub window: Duration,
    pub mode: WindowMode,
    pub scope: WindowScope,
}

impl NoiseParams {
    pub const UNBOUNDED: u32 = u32::MAX;

    pub fn new(max_block: u32, window: Duration) -> Result<Self, ParamError> {
        if window.is_zero() {
            return Err(ParamError::ZeroWindow);
        }
        Ok(NoiseParams {
            max_block,
            window,
            mode: WindowMode::Sliding,
            scope: WindowScope::PerDirection,
        })
    }

    /// One-second sliding windows with block size `x`.
    pub fn per_second(x: u32) -> Self {
        Self::new(x, Duration::from_secs(1)).unwrap()
    }

    pub fn unbounded() -> Self {
        Self::per_second(Self::UNBOUNDED)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchParams {
    /// Largest allowed time between consecutive matched packets.
    pub max_gap: Duration,
}

impl MatchParams {
    pub fn new(max_gap: Duration) -> Result<Self, ParamError> {
        if max_gap.is_zero() {
            return Err(ParamError::ZeroGap);
        }
        Ok(MatchParams { max_gap })
    }
}

/// A claim that `client` voted at `ballot_box` around `vote_time`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub client: Addr,
    /// Time of the first matched client-output record.
    pub vote_time: SimTime,
    pub ballot_box: Addr,
    /// Indices into the analysed view's records, one per pattern step.
    pub matched_records: Vec<usize>,
}

/// Record indices per vantage address.
struct StreamIndex {
    by_addr: BTreeMap<Addr, Vec<usize>>,
}

impl StreamIndex {
    fn build(view: &AttackerView) -> Self {
        let mut by_addr: BTreeMap<Addr, Vec<usize>> = BTreeMap::new();
        for a in view.visible_clients.iter().chain(view.ballot_boxes.iter()) {
            by_addr.entry(*a).or_default();
        }
        for (i, r) in view.records.iter().enumerate() {
            if let Some(v) = by_addr.get_mut(&r.src) {
                v.push(i);
            }
            if r.dst != r.src {
                if let Some(v) = by_addr.get_mut(&r.dst) {
                    v.push(i);
                }
            }
        }
        StreamIndex { by_addr }
    }

    fn get(&self, a: Addr) -> &[usize] {
        self.by_addr.get(&a).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Removes every record that falls into an over-full block of one of its
/// endpoint streams. Records not touching any vantage address are kept.
pub fn noise_reduce(view: &AttackerView, params: NoiseParams) -> AttackerView {
    let n = view.records.len();
    let mut keep = vec![true; n];
    let t = duration_nanos(params.window).max(1);
    let x = params.max_block as usize;

    let mut streams: BTreeMap<(Addr, u8), Vec<usize>> = BTreeMap::new();
    for (i, r) in view.records.iter().enumerate() {
        let (out_key, in_key) = match params.scope {
            WindowScope::PerDirection => (0, 1),
            WindowScope::Combined => (0, 0),
        };
        if view.is_vantage(r.src) {
            streams.entry((r.src, out_key)).or_default().push(i);
        }
        if view.is_vantage(r.dst) && !(r.dst == r.src && out_key == in_key) {
            streams.entry((r.dst, in_key)).or_default().push(i);
        }
    }

    let time = |i: usize| view.records[i].time.as_nanos();
    for idx in streams.values() {
        match params.mode {
            WindowMode::Tumbling => {
                let mut s = 0;
                while s < idx.len() {
                    let w = time(idx[s]) / t;
                    let mut e = s;
                    while e < idx.len() && time(idx[e]) / t == w {
                        e += 1;
                    }
                    if e - s > x {
                        for &i in &idx[s..e] {
                            keep[i] = false;
                        }
                    }
                    s = e;
                }
            }
            WindowMode::Sliding => {
                // x+1 records spanning less than t fit in one window.
                for s in 0..idx.len() {
                    let Some(e) = s.checked_add(x) else { break };
                    if e >= idx.len() {
                        break;
                    }
                    if time(idx[e]) - time(idx[s]) < t {
                        for &i in &idx[s..=e] {
                            keep[i] = false;
                        }
                    }
                }
            }
        }
    }

    AttackerView {
        visible_clients: view.visible_clients.clone(),
        ballot_boxes: view.ballot_boxes.clone(),
        records: view
            .records
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(r, _)| *r)
            .collect(),
    }
}

const NONE: u32 = u32::MAX;

/// Reusable buffers for [`match_pair`].
#[derive(Default)]
struct Scratch {
    merged: Vec<usize>,
    masks: Vec<u8>,
    times: Vec<u64>,
    upper: Vec<u32>,
    next_ok: Vec<u32>,
}

/// Finds the earliest complete binding of `steps` in the merged streams of
/// one client and one box.
///
/// `next_ok[k][p]` is the first position `>= p` that can bind step `k` and
/// still complete the remaining steps. Filling it backwards step by step
/// makes the search exact in `O(steps * records)`: a forward pass then binds,
/// for each step, the earliest record that keeps the match completable.
fn match_pair(
    records: &[PacketRecord],
    client_idx: &[usize],
    box_idx: &[usize],
    client: Addr,
    server: Addr,
    steps: &[Step],
    max_gap: u64,
    s: &mut Scratch,
) -> Option<Vec<usize>> {
    s.merged.clear();
    let (mut i, mut j) = (0, 0);
    while i < client_idx.len() || j < box_idx.len() {
        let next = match (client_idx.get(i), box_idx.get(j)) {
            (Some(&a), Some(&b)) if a == b => {
                i += 1;
                j += 1;
                a
            }
            (Some(&a), Some(&b)) if a < b => {
                i += 1;
                a
            }
            (Some(_), Some(&b)) => {
                j += 1;
                b
            }
            (Some(&a), None) => {
                i += 1;
                a
            }
            (None, Some(&b)) => {
                j += 1;
                b
            }
            (None, None) => unreachable!(),
        };
        s.merged.push(next);
    }
    let n = s.merged.len();
    let m = steps.len();
    if n < m {
        return None;
    }
    s.masks.clear();
    s.times.clear();
    for &ri in &s.merged {
        let r = &records[ri];
        s.masks.push(step_mask(r, client, server));
        s.times.push(r.time.as_nanos());
    }
    s.upper.clear();
    s.upper.resize(n, n as u32);
    for p in (0..n.saturating_sub(1)).rev() {
        s.upper[p] = if s.times[p + 1] > s.times[p] {
            p as u32 + 1
        } else {
            s.upper[p + 1]
        };
    }

    let row = n + 1;
    s.next_ok.clear();
    s.next_ok.resize(m * row, NONE);
    for k in (0..m).rev() {
        let bit = steps[k].bit();
        let mut nxt = NONE;
        for p in (0..n).rev() {
            let mut ok = s.masks[p] & bit != 0;
            if ok && k + 1 < m {
                let q = s.next_ok[(k + 1) * row + s.upper[p] as usize];
                ok = q != NONE && s.times[q as usize] - s.times[p] <= max_gap;
            }
            if ok {
                nxt = p as u32;
            }
            s.next_ok[k * row + p] = nxt;
        }
    }

    let start = s.next_ok[0];
    if start == NONE {
        return None;
    }
    let mut bound = Vec::with_capacity(m);
    let mut cur = start as usize;
    bound.push(s.merged[cur]);
    for k in 1..m {
        let q = s.next_ok[k * row + s.upper[cur] as usize];
        debug_assert!(q != NONE);
        cur = q as usize;
        bound.push(s.merged[cur]);
    }
    Some(bound)
}

/// Searches every (visible client, ballot box) pair for the pattern.
///
/// Matched records must be strictly increasing in time, follow the pattern's
/// roles and directions exactly, and be at most `max_gap` apart. Each pair
/// yields at most one result: the match with the earliest first record, bound
/// to the earliest records that still complete it. Results are ordered by
/// `(client, box)`.
pub fn match_view(view: &AttackerView, pattern: &Pattern, params: MatchParams) -> Vec<MatchResult> {
    let index = StreamIndex::build(view);
    let gap = duration_nanos(params.max_gap);
    let mut scratch = Scratch::default();
    let mut out = Vec::new();
    for &c in &view.visible_clients {
        let ci = index.get(c);
        if ci.is_empty() {
            continue;
        }
        for &b in &view.ballot_boxes {
            if b == c {
                continue;
            }
            let bi = index.get(b);
            if let Some(bound) = match_pair(&view.records, ci, bi, c, b, pattern.steps(), gap, &mut scratch) {
                out.push(MatchResult {
                    client: c,
                    vote_time: view.records[bound[0]].time,
                    ballot_box: b,
                    matched_records: bound,
                });
            }
        }
    }
    out
}

/// Noise reduction followed by matching. Record indices in the results refer
/// to the reduced view.
pub fn analyze(
    view: &AttackerView,
    pattern: &Pattern,
    noise: NoiseParams,
    matching: MatchParams,
) -> Vec<MatchResult> {
    match_view(&noise_reduce(view, noise), pattern, matching)
}
