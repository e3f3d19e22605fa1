//! Scoring analyzer output against ground truth and sweeping the analysis
//! parameters.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

use crate::addr::Addr;
use crate::capture::AttackerView;
use crate::config::BehaviorKind;
use crate::pattern::{match_view, noise_reduce, MatchParams, MatchResult, NoiseParams, Pattern, WindowMode, WindowScope};
use crate::time::SimTime;

/// One cast vote: who, when the ballot left the client, and where it went.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VoteRecord {
    pub client: Addr,
    pub time: SimTime,
    pub ballot_box: Addr,
}

/// What a perfect analyzer would output.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub entries: Vec<VoteRecord>,
    pub visible_clients: BTreeSet<Addr>,
}

impl GroundTruth {
    pub fn new(entries: Vec<VoteRecord>, visible_clients: BTreeSet<Addr>) -> Self {
        GroundTruth {
            entries,
            visible_clients,
        }
    }

    /// Votes cast by visible clients.
    pub fn visible_entries(&self) -> impl Iterator<Item = &VoteRecord> {
        self.entries.iter().filter(|e| self.visible_clients.contains(&e.client))
    }

    pub fn visible_voters(&self) -> usize {
        self.visible_entries().map(|e| e.client).collect::<BTreeSet<_>>().len()
    }

    pub fn visible_non_voters(&self) -> usize {
        self.visible_clients.len() - self.visible_voters()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub hits: usize,
    pub false_positives: usize,
    pub visible_voters: usize,
    /// Analyzer output entries scored.
    pub outputs: usize,
    /// Hits over visible voters (zero when nobody visible voted).
    pub hit_rate: f64,
    /// Hits over outputs (one when there is no output).
    pub precision: f64,
}

/// Default scoring tolerance: the longest a match of `steps` steps can span.
pub fn default_tolerance(steps: usize, max_gap: Duration) -> Duration {
    max_gap * steps.saturating_sub(1) as u32
}

/// Classifies each output entry as a hit or a false positive.
///
/// A hit names a visible voter's client and ballot box and lies within
/// `tolerance` of the vote. Each vote can be claimed once; entries are
/// considered in `(client, box, time)` order so the outcome does not depend on
/// the order of `results`.
pub fn score(results: &[MatchResult], truth: &GroundTruth, tolerance: Duration) -> Metrics {
    let mut votes: BTreeMap<(Addr, Addr), Vec<(SimTime, bool)>> = BTreeMap::new();
    for e in truth.visible_entries() {
        votes.entry((e.client, e.ballot_box)).or_default().push((e.time, false));
    }
    let mut order: Vec<(Addr, Addr, SimTime)> = results
        .iter()
        .map(|r| (r.client, r.ballot_box, r.vote_time))
        .collect();
    order.sort_unstable();

    let mut hits = 0;
    for (client, ballot_box, time) in &order {
        let Some(cands) = votes.get_mut(&(*client, *ballot_box)) else { continue };
        let best = cands
            .iter_mut()
            .filter(|(t, used)| !*used && t.abs_diff(*time) <= tolerance)
            .min_by_key(|(t, _)| t.abs_diff(*time));
        if let Some(slot) = best {
            slot.1 = true;
            hits += 1;
        }
    }
    let visible_voters = truth.visible_voters();
    let outputs = results.len();
    Metrics {
        hits,
        false_positives: outputs - hits,
        visible_voters,
        outputs,
        hit_rate: if visible_voters == 0 {
            0.0
        } else {
            hits as f64 / visible_voters as f64
        },
        precision: if outputs == 0 { 1.0 } else { hits as f64 / outputs as f64 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SweepError {
    #[error("sweep needs at least one block size and one maximum gap")]
    EmptyValues,
    #[error("window length and maximum gaps must be positive")]
    ZeroDuration,
    #[error("comparison needs at least two scenarios")]
    TooFewScenarios,
}

/// A grid of analysis parameters over one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub scenario: String,
    pub seed: u64,
    pub x_values: Vec<u32>,
    pub d_values: Vec<Duration>,
    pub window: Duration,
    pub mode: WindowMode,
    pub scope: WindowScope,
    /// Scoring tolerance; derived from the pattern and `d` when absent.
    pub tolerance: Option<Duration>,
}

impl SweepSpec {
    pub fn new(scenario: impl Into<String>, seed: u64, x_values: Vec<u32>, d_values: Vec<Duration>) -> Self {
        SweepSpec {
            scenario: scenario.into(),
            seed,
            x_values,
            d_values,
            window: Duration::from_secs(1),
            mode: WindowMode::Sliding,
            scope: WindowScope::PerDirection,
            tolerance: None,
        }
    }

    fn noise(&self, x: u32) -> NoiseParams {
        NoiseParams {
            max_block: x,
            window: self.window,
            mode: self.mode,
            scope: self.scope,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub scenario: String,
    pub seed: u64,
    pub x: u32,
    pub window: Duration,
    pub d: Duration,
    pub metrics: Metrics,
}

/// Analyzes and scores one parameter point.
pub fn evaluate_point(
    view: &AttackerView,
    pattern: &Pattern,
    truth: &GroundTruth,
    spec: &SweepSpec,
    x: u32,
    d: Duration,
) -> Result<SweepRow, SweepError> {
    let reduced = noise_reduce(view, spec.noise(x));
    row_for(&reduced, pattern, truth, spec, x, d)
}

fn row_for(
    reduced: &AttackerView,
    pattern: &Pattern,
    truth: &GroundTruth,
    spec: &SweepSpec,
    x: u32,
    d: Duration,
) -> Result<SweepRow, SweepError> {
    let params = MatchParams::new(d).map_err(|_| SweepError::ZeroDuration)?;
    let results = match_view(reduced, pattern, params);
    let tol = spec.tolerance.unwrap_or_else(|| default_tolerance(pattern.len(), d));
    Ok(SweepRow {
        scenario: spec.scenario.clone(),
        seed: spec.seed,
        x,
        window: spec.window,
        d,
        metrics: score(&results, truth, tol),
    })
}

/// Every `(x, d)` combination, ordered by `x` then `d` as listed in the spec.
pub fn sweep(
    view: &AttackerView,
    pattern: &Pattern,
    truth: &GroundTruth,
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>, SweepError> {
    if spec.x_values.is_empty() || spec.d_values.is_empty() {
        return Err(SweepError::EmptyValues);
    }
    if spec.window.is_zero() {
        return Err(SweepError::ZeroDuration);
    }
    let mut rows = Vec::with_capacity(spec.x_values.len() * spec.d_values.len());
    for &x in &spec.x_values {
        let reduced = noise_reduce(view, spec.noise(x));
        for &d in &spec.d_values {
            rows.push(row_for(&reduced, pattern, truth, spec, x, d)?);
        }
    }
    Ok(rows)
}

/// The row with the largest `hits - false_positives`; ties go to more hits,
/// then fewer false positives, then the smaller `x`, then the smaller `d`.
pub fn best_point(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().min_by(|a, b| {
        let key = |r: &SweepRow| {
            let m = &r.metrics;
            (
                -(m.hits as i64 - m.false_positives as i64),
                -(m.hits as i64),
                m.false_positives,
                r.x,
                r.d,
            )
        };
        key(a).cmp(&key(b))
    })
}

/// Swept results of one scenario for [`compare_scenarios`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRun {
    pub name: String,
    pub kind: Option<BehaviorKind>,
    pub rows: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSummary {
    pub name: String,
    pub kind: Option<BehaviorKind>,
    pub best: Option<SweepRow>,
}

/// Whether the scenario expected to be easier to attack scored at least as well.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderingCheck {
    pub higher: String,
    pub lower: String,
    pub higher_rate: f64,
    pub lower_rate: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub summaries: Vec<ScenarioSummary>,
    pub checks: Vec<OrderingCheck>,
}

/// How much lower the browser model's best hit rate may be than the
/// file-transfer model's and still count as "at least as good".
pub const BROWSER_TIE_TOLERANCE: f64 = 0.02;

fn expected_rank(kind: BehaviorKind) -> Option<u8> {
    match kind {
        BehaviorKind::VoteOnly => Some(0),
        BehaviorKind::Browser => Some(1),
        BehaviorKind::FileTransfer => Some(2),
        BehaviorKind::Bulk => None,
    }
}

/// Side-by-side best points, with the expected ordering vote-only >= browser
/// >= file-transfer checked for every pair present.
pub fn compare_scenarios(runs: &[ScenarioRun]) -> Result<Comparison, SweepError> {
    if runs.len() < 2 {
        return Err(SweepError::TooFewScenarios);
    }
    let summaries: Vec<ScenarioSummary> = runs
        .iter()
        .map(|r| ScenarioSummary {
            name: r.name.clone(),
            kind: r.kind,
            best: best_point(&r.rows).cloned(),
        })
        .collect();
    let rate = |s: &ScenarioSummary| s.best.as_ref().map_or(0.0, |b| b.metrics.hit_rate);
    let mut checks = Vec::new();
    for a in &summaries {
        for b in &summaries {
            let (Some(ka), Some(kb)) = (a.kind.and_then(expected_rank), b.kind.and_then(expected_rank)) else {
                continue;
            };
            if ka >= kb {
                continue;
            }
            let slack = if a.kind == Some(BehaviorKind::Browser) && b.kind == Some(BehaviorKind::FileTransfer) {
                BROWSER_TIE_TOLERANCE
            } else {
                0.0
            };
            let (hr, lr) = (rate(a), rate(b));
            checks.push(OrderingCheck {
                higher: a.name.clone(),
                lower: b.name.clone(),
                higher_rate: hr,
                lower_rate: lr,
                holds: hr + slack >= lr,
            });
        }
    }
    Ok(Comparison { summaries, checks })
}
