use std::collections::BTreeSet;
use std::time::Duration;

use proptest::prelude::*;
use votetrace_core::capture::filter_visible;
use votetrace_core::config::{BehaviorKind, ScenarioConfig};
use votetrace_core::eval::{evaluate_point, score, sweep, SweepSpec};
use votetrace_core::pattern::extract_pattern;
use votetrace_core::world::{simulate, toy_scenario};
use votetrace_core::{Addr, GroundTruth, MatchResult, SimTime, VoteRecord};

fn client(i: u8) -> Addr {
    Addr::new(10, 10, 0, i)
}

fn ballot_box(i: u8) -> Addr {
    Addr::new(10, 30, 0, i)
}

fn claim(c: u8, secs: u64, b: u8) -> MatchResult {
    MatchResult {
        client: client(c),
        vote_time: SimTime::from_secs(secs),
        ballot_box: ballot_box(b),
        matched_records: Vec::new(),
    }
}

#[test]
fn hand_classified_outputs() {
    // Five visible voters, one invisible voter, two visible non-voters.
    let votes = [(1, 100, 1), (2, 200, 2), (3, 300, 1), (4, 400, 2), (5, 500, 1), (6, 600, 2)];
    let truth = GroundTruth::new(
        votes
            .iter()
            .map(|&(c, t, b)| VoteRecord { client: client(c), time: SimTime::from_secs(t), ballot_box: ballot_box(b) })
            .collect(),
        [1, 2, 3, 4, 5, 7, 8].into_iter().map(client).collect(),
    );
    assert_eq!(truth.visible_voters(), 5);
    assert_eq!(truth.visible_non_voters(), 2);
    let out = [
        claim(1, 101, 1), // hit
        claim(2, 199, 2), // hit
        claim(3, 300, 2), // wrong box
        claim(4, 410, 2), // too late
        claim(6, 600, 2), // invisible voter
        claim(7, 300, 1), // non-voter
        claim(1, 102, 1), // vote already claimed
    ];
    let m = score(&out, &truth, Duration::from_secs(5));
    assert_eq!(m.hits, 2);
    assert_eq!(m.false_positives, 5);
    assert_eq!(m.hit_rate, 0.4);
    assert_eq!(m.precision, 2.0 / 7.0);
}

fn arb_truth() -> impl Strategy<Value = GroundTruth> {
    (
        proptest::collection::btree_map(0u8..20, (0u64..100, 0u8..3), 0..15),
        proptest::collection::btree_set(0u8..20, 0..20),
    )
        .prop_map(|(votes, vis)| {
            GroundTruth::new(
                votes
                    .into_iter()
                    .map(|(c, (t, b))| VoteRecord { client: client(c), time: SimTime::from_secs(t), ballot_box: ballot_box(b) })
                    .collect(),
                vis.into_iter().map(client).collect::<BTreeSet<_>>(),
            )
        })
}

fn arb_output() -> impl Strategy<Value = Vec<MatchResult>> {
    proptest::collection::vec((0u8..20, 0u64..100, 0u8..3), 0..30)
        .prop_map(|v| v.into_iter().map(|(c, t, b)| claim(c, t, b)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_output_is_hit_or_false_positive(out in arb_output(), truth in arb_truth(), tol in 0u64..20) {
        let m = score(&out, &truth, Duration::from_secs(tol));
        prop_assert_eq!(m.hits + m.false_positives, out.len());
        prop_assert!(m.hits <= m.visible_voters);
        prop_assert!((0.0..=1.0).contains(&m.hit_rate));
    }

    #[test]
    fn output_order_is_irrelevant(out in arb_output(), truth in arb_truth(), tol in 0u64..20, rot in 0usize..30) {
        let mut other = out.clone();
        other.reverse();
        if !other.is_empty() {
            let k = rot % other.len();
            other.rotate_left(k);
        }
        let tol = Duration::from_secs(tol);
        prop_assert_eq!(score(&out, &truth, tol), score(&other, &truth, tol));
    }

    #[test]
    fn wider_tolerance_never_loses_hits(out in arb_output(), truth in arb_truth(), tol in 0u64..20) {
        let narrow = score(&out, &truth, Duration::from_secs(tol));
        let wide = score(&out, &truth, Duration::from_secs(tol + 1));
        prop_assert!(wide.hit_rate >= narrow.hit_rate);
    }
}

#[test]
fn single_point_sweep_is_one_evaluation() {
    let mut cfg = ScenarioConfig::desk_scale(BehaviorKind::Browser);
    cfg.run.duration = Duration::from_secs(240);
    cfg.run.warmup = Duration::from_secs(60);
    cfg.behavior.vote_margin = Duration::from_secs(20);
    let (out, log) = simulate(&cfg).unwrap();
    let t = &out.topology;
    let view = filter_visible(&log, &t.visible_clients, &t.ballot_boxes);
    let truth = GroundTruth::new(out.truth.clone(), t.visible_clients.clone());

    let (toy, toy_log) = simulate(&toy_scenario(&cfg)).unwrap();
    let reference = filter_visible(&toy_log, &toy.topology.visible_clients, &toy.topology.ballot_boxes);
    let pattern = extract_pattern(&reference).unwrap();

    let d = Duration::from_secs(1);
    let spec = SweepSpec::new("browser", cfg.run.seed, vec![7], vec![d]);
    let rows = sweep(&view, &pattern, &truth, &spec).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0], evaluate_point(&view, &pattern, &truth, &spec, 7, d).unwrap());
    assert!(rows[0].metrics.hits > 0);
}
