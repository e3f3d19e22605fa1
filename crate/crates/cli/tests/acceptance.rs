//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::collections::BTreeSet;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use votetrace::commands::{self, pool_rows, CsvRow};
use votetrace::config::{ScenarioFile, SweepFile};
use votetrace::formats::{read_pcap, write_pcap};
use votetrace_core::capture::{filter_visible, SpliceOptions};
use votetrace_core::config::{BehaviorKind, ScenarioConfig, VoteProtocolSpec};
use votetrace_core::engine::{Jitter, Link, LinkSpec};
use votetrace_core::eval::{best_point, score, SweepRow};
use votetrace_core::pattern::{analyze, match_view, Direction, Role};
use votetrace_core::stats::{gaps, pearson};
use votetrace_core::world::{node_addr, simulate, toy_scenario, NodeKind};
use votetrace_core::{
    Addr, AttackerView, GroundTruth, MatchParams, NoiseParams, NodeId, PacketRecord, Pattern, SimTime, Step,
};

const SEEDS: std::ops::RangeInclusive<u64> = 1..=10;
const D_GRID_MS: [u64; 11] = [20, 50, 100, 250, 500, 1000, 1500, 2000, 3000, 5000, 10000];
const ONE_SECOND: u64 = 1_000_000_000;

fn ms(v: u64) -> u64 {
    v * 1_000_000
}

// ---------------------------------------------------------------- criterion 1

fn determinism() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("desk.toml");
    std::fs::write(&config, "model = \"file-transfer\"\nseed = 7\n[capture]\nfull_log = true\n")?;
    let exe = env!("CARGO_BIN_EXE_votetrace");
    let mut elapsed = Vec::new();
    for run in ["a", "b"] {
        let started = Instant::now();
        let status = Command::new(exe)
            .args(["simulate", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(run))
            .output()?;
        ensure!(status.status.success(), "simulate failed: {}", String::from_utf8_lossy(&status.stderr));
        elapsed.push(started.elapsed());
    }
    let read = |run: &str, f: &str| std::fs::read(dir.path().join(run).join(f));
    let (log_a, log_b) = (read("a", commands::LOG_FILE)?, read("b", commands::LOG_FILE)?);
    let (truth_a, truth_b) = (read("a", commands::TRUTH_FILE)?, read("b", commands::TRUTH_FILE)?);
    ensure!(log_a == log_b, "packet logs differ");
    ensure!(truth_a == truth_b, "ground truth differs");
    ensure!(!truth_a.is_empty() && log_a.len() > 1_000_000, "runs are suspiciously small");
    let slowest = elapsed.iter().max().copied().unwrap_or_default();
    ensure!(slowest < Duration::from_secs(120), "desk run took {slowest:?}");
    Ok(format!(
        "two desk runs byte-identical ({} log bytes, {} truth lines); slowest run {:.1} s",
        log_a.len(),
        truth_a.iter().filter(|&&b| b == b'\n').count(),
        slowest.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- criterion 2

const CLIENTS: [Addr; 3] = [Addr::new(10, 10, 0, 1), Addr::new(10, 10, 0, 2), Addr::new(10, 10, 0, 3)];
const BOXES: [Addr; 2] = [Addr::new(10, 30, 0, 1), Addr::new(10, 30, 0, 2)];
const RELAYS: [Addr; 2] = [Addr::new(10, 1, 0, 1), Addr::new(10, 1, 0, 2)];

fn fits(r: &PacketRecord, step: Step, client: Addr, server: Addr) -> bool {
    let me = if step.role == Role::Client { client } else { server };
    match step.dir {
        Direction::Out => r.src == me,
        Direction::In => r.dst == me,
    }
}

/// Exhaustive subsequence search; the earliest start time with a complete binding.
fn oracle(records: &[PacketRecord], steps: &[Step], c: Addr, s: Addr, gap: u64) -> Option<SimTime> {
    fn rest(recs: &[PacketRecord], steps: &[Step], c: Addr, s: Addr, gap: u64, prev: u64) -> bool {
        let Some((&step, tail)) = steps.split_first() else { return true };
        recs.iter().any(|r| {
            let t = r.time.as_nanos();
            t > prev && t - prev <= gap && fits(r, step, c, s) && rest(recs, tail, c, s, gap, t)
        })
    }
    records
        .iter()
        .filter(|r| fits(r, steps[0], c, s))
        .find(|r| rest(records, &steps[1..], c, s, gap, r.time.as_nanos()))
        .map(|r| r.time)
}

fn random_view(rng: &mut ChaCha8Rng, max: usize) -> AttackerView {
    let n = rng.random_range(0..=max);
    let recs = (0..n)
        .map(|_| {
            let who = rng.random_range(0..CLIENTS.len() + BOXES.len());
            let me = if who < CLIENTS.len() { CLIENTS[who] } else { BOXES[who - CLIENTS.len()] };
            let peer = RELAYS[rng.random_range(0..RELAYS.len())];
            let t = SimTime::from_millis(rng.random_range(0..3_000));
            if rng.random_bool(0.5) {
                PacketRecord::new(t, me, peer)
            } else {
                PacketRecord::new(t, peer, me)
            }
        })
        .collect();
    AttackerView::from_records(CLIENTS.into(), BOXES.into(), recs)
}

fn random_pattern(rng: &mut ChaCha8Rng) -> Pattern {
    let mut steps = vec![Step::CLIENT_OUT];
    for _ in 0..rng.random_range(0..6) {
        let role = if rng.random_bool(0.5) { Role::Client } else { Role::Server };
        let dir = if rng.random_bool(0.5) { Direction::Out } else { Direction::In };
        steps.push(Step::new(role, dir));
    }
    Pattern::new(steps).unwrap()
}

fn matcher_oracle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut discrepancies = 0;
    let mut matches = 0;
    for _ in 0..100 {
        let view = random_view(&mut rng, 200);
        let pattern = random_pattern(&mut rng);
        let gap = ms(rng.random_range(1..400));
        let found: Vec<_> = match_view(&view, &pattern, MatchParams::new(Duration::from_nanos(gap))?)
            .into_iter()
            .map(|m| (m.client, m.ballot_box, m.vote_time))
            .collect();
        let mut expected = Vec::new();
        for c in CLIENTS {
            for b in BOXES {
                let recs: Vec<PacketRecord> =
                    view.records.iter().filter(|r| r.touches(c) || r.touches(b)).copied().collect();
                if let Some(t) = oracle(&recs, pattern.steps(), c, b, gap) {
                    expected.push((c, b, t));
                }
            }
        }
        matches += expected.len();
        if found != expected {
            discrepancies += 1;
        }
    }
    ensure!(discrepancies == 0, "{discrepancies} of 100 views disagree with the oracle");
    ensure!(matches > 0, "no view produced a match; the comparison is vacuous");
    Ok(format!("100 random views of <= 200 records, {matches} matches, 0 discrepancies"))
}

// ---------------------------------------------------------------- criterion 3

fn noiseless_recovery() -> Result<String> {
    let cfg = ScenarioConfig::desk_scale(BehaviorKind::VoteOnly);
    let pattern = commands::extract_pattern(&cfg)?;
    let (out, view) = commands::simulate_view(&cfg)?;
    let x = pattern.len() as u32 + 2;
    let d = Duration::from_secs(1);
    let results = analyze(&view, &pattern, NoiseParams::per_second(x), MatchParams::new(d)?);
    let truth = GroundTruth::new(out.truth, out.topology.visible_clients.clone());
    let m = score(&results, &truth, votetrace_core::eval::default_tolerance(pattern.len(), d));
    ensure!(m.visible_voters > 0, "no visible voter");
    ensure!(
        m.hit_rate >= 0.9 && m.false_positives == 0,
        "hit rate {:.3} with {} false positives",
        m.hit_rate,
        m.false_positives
    );
    Ok(format!(
        "vote-only seed 1 at x={x}, d=1 s: {}/{} visible voters, 0 false positives",
        m.hits, m.visible_voters
    ))
}

// ------------------------------------------------------------- criteria 4 to 6

struct Swept {
    kind: BehaviorKind,
    pooled: Vec<CsvRow>,
    visible_clients: usize,
    pattern_len: usize,
}

fn run_sweep(kind: BehaviorKind) -> Result<Swept> {
    let spec = SweepFile {
        name: None,
        seeds: SEEDS.collect(),
        x: (3..=15).collect(),
        d_ns: D_GRID_MS.iter().map(|&v| ms(v)).collect(),
        t_ns: ONE_SECOND,
        tolerance_ns: None,
        windows: None,
        scenario: ScenarioFile::preset(Default::default(), kind),
    };
    let cfg = spec.scenario.build()?;
    let rows = commands::sweep(&spec, None)?;
    Ok(Swept {
        kind,
        pooled: pool_rows(&rows),
        visible_clients: cfg.topology.visible_clients as usize * spec.seeds.len(),
        pattern_len: commands::extract_pattern(&cfg)?.len(),
    })
}

impl Swept {
    fn at(&self, x: u32, d_ns: u64) -> &CsvRow {
        self.pooled.iter().find(|r| r.x == x && r.d_ns == d_ns).expect("grid point")
    }

    fn best(&self) -> SweepRow {
        let rows: Vec<SweepRow> = self.pooled.iter().map(CsvRow::to_sweep).collect();
        best_point(&rows).cloned().expect("non-empty grid")
    }

    fn voters(&self) -> usize {
        self.pooled[0].visible_voters
    }
}

fn block_size_curve(ft: &Swept) -> Result<(String, u32)> {
    let len = ft.pattern_len as u32;
    let curve: Vec<(u32, usize, usize)> = (3..=15)
        .map(|x| {
            let r = ft.at(x, ONE_SECOND);
            (x, r.hits, r.false_positives)
        })
        .collect();
    let shape = curve.iter().map(|(x, h, f)| format!("{x}:{h}/{f}")).collect::<Vec<_>>().join(" ");
    let voters = ft.voters();
    for &(x, h, _) in curve.iter().filter(|c| c.0 < len) {
        ensure!(
            h as f64 <= 0.05 * voters as f64,
            "x={x} below the pattern length already yields {h} hits of {voters} [{shape}]"
        );
    }
    let peak = curve.iter().map(|c| c.1).max().unwrap();
    let at_peak: Vec<u32> = curve.iter().filter(|c| c.1 == peak).map(|c| c.0).collect();
    ensure!(at_peak.len() == 1, "maximum of {peak} hits is shared by x={at_peak:?} [{shape}]");
    let x_star = at_peak[0];
    ensure!((len..=len + 4).contains(&x_star), "peak at x={x_star} outside [{len}, {}] [{shape}]", len + 4);
    let after: Vec<usize> = curve.iter().filter(|c| c.0 > x_star).map(|c| c.2).collect();
    ensure!(
        after.windows(2).all(|w| w[0] <= w[1]),
        "false positives fall somewhere after x*={x_star} [{shape}]"
    );
    Ok((
        format!("file-transfer, 10 pooled desk runs, d=1 s, x:hits/fp = {shape}; {voters} visible voters, peak x*={x_star}"),
        x_star,
    ))
}

fn delay_curve(ft: &Swept, x_star: u32) -> Result<String> {
    let curve: Vec<(u64, usize, usize)> = D_GRID_MS
        .iter()
        .map(|&d| {
            let r = ft.at(x_star, ms(d));
            (d, r.hits, r.false_positives)
        })
        .collect();
    let shape = curve.iter().map(|(d, h, f)| format!("{d}ms:{h}/{f}")).collect::<Vec<_>>().join(" ");
    let top = curve.iter().map(|c| c.1).max().unwrap();
    let sat = curve.iter().position(|c| c.1 == top).unwrap();
    ensure!(
        curve[..=sat].windows(2).all(|w| w[0].1 <= w[1].1),
        "hits fall before saturation [{shape}]"
    );
    ensure!(
        curve[sat..].windows(2).all(|w| w[0].2 <= w[1].2),
        "false positives fall after the saturation delay [{shape}]"
    );
    let best = ft.best();
    let m = &best.metrics;
    let non_voters = ft.visible_clients - ft.voters();
    ensure!(m.hit_rate >= 0.5, "best hit rate {:.3} below 0.5", m.hit_rate);
    ensure!(
        m.false_positives as f64 <= 0.05 * non_voters as f64,
        "best point has {} false positives for {non_voters} visible non-voters",
        m.false_positives
    );
    Ok(format!(
        "x*={x_star}, d:hits/fp = {shape}; best point x={} d={} ms: {}/{} = {:.3}, {} false positives of {non_voters} non-voters",
        best.x,
        best.d.as_millis(),
        m.hits,
        m.visible_voters,
        m.hit_rate,
        m.false_positives
    ))
}

fn model_ordering(sweeps: &[Swept]) -> Result<String> {
    let rate = |k: BehaviorKind| sweeps.iter().find(|s| s.kind == k).unwrap().best().metrics.hit_rate;
    let (vote, web, file) = (rate(BehaviorKind::VoteOnly), rate(BehaviorKind::Browser), rate(BehaviorKind::FileTransfer));
    let detail = format!("best hit rates: vote-only {vote:.3}, browser {web:.3}, file-transfer {file:.3}");
    ensure!(vote >= web, "vote-only below browser; {detail}");
    ensure!(web + votetrace_core::eval::BROWSER_TIE_TOLERANCE >= file, "browser below file-transfer; {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 7

fn real_noise() -> Result<String> {
    let background = ScenarioFile::parse(
        "model = \"browser\"\nseed = 101\n\
         [topology]\nrelays = 1\ndirectories = 0\nclients = 520\nvisible_clients = 0\nvoters = 0\nbulk_clients = 0\nweb_servers = 10\n\
         [circuit]\nhops = 1\n",
    )?
    .build()?;
    let relay = node_addr(NodeKind::Relay, 0);
    let (_, mut trace) = simulate(&background)?;
    trace.retain(|r| r.touches(relay));
    trace.sort();

    let dir = tempfile::tempdir()?;
    let pcap = dir.path().join("relay.pcap");
    write_pcap(&pcap, &trace)?;
    let imported = read_pcap(&pcap)?;
    ensure!(imported == trace, "pcap round trip changed the trace");
    drop(trace);

    let votes = ScenarioConfig::desk_scale(BehaviorKind::VoteOnly);
    let pattern = commands::extract_pattern(&votes)?;
    let (_, sim_view) = commands::simulate_view(&votes)?;
    let opts = SpliceOptions {
        node: Some(relay),
        external_offset: Duration::ZERO,
    };
    let (_, view) = commands::splice(&imported, &sim_view, opts, &dir.path().join("spliced"))?;
    let candidates = view.visible_clients.len();
    ensure!(candidates >= 500, "only {candidates} candidates");
    let x = pattern.len() as u32 + 2;
    let results = analyze(&view, &pattern, NoiseParams::per_second(x), MatchParams::new(Duration::from_secs(1))?);
    let rate = results.len() as f64 / candidates as f64;
    ensure!(rate <= 0.01, "{} false positives among {candidates} candidates", results.len());
    Ok(format!(
        "{} background packets through one relay, {candidates} candidates, {} false positives ({:.2}%) at x={x}, d=1 s",
        imported.len(),
        results.len(),
        100.0 * rate
    ))
}

// ---------------------------------------------------------------- criterion 8

fn protocol_arithmetic() -> Result<String> {
    let box_packets = |spec: VoteProtocolSpec| -> Result<(usize, usize)> {
        let mut base = ScenarioConfig::desk_scale(BehaviorKind::VoteOnly);
        base.protocol = spec;
        let (out, log) = simulate(&toy_scenario(&base))?;
        let bx = *out.topology.ballot_boxes.first().context("no box")?;
        Ok((log.iter().filter(|r| r.touches(bx)).count(), commands::extract_pattern(&base)?.len()))
    };
    let (default, default_steps) = box_packets(VoteProtocolSpec::DEFAULT)?;
    let (civitas, civitas_steps) = box_packets(VoteProtocolSpec::CIVITAS)?;
    ensure!(civitas == default + 4, "box link carries {default} vs {civitas} packets");
    ensure!(civitas_steps == default_steps + 4, "patterns of {default_steps} vs {civitas_steps} steps");
    Ok(format!(
        "ballot-box link: default {default} packets, civitas {civitas}; patterns {default_steps} and {civitas_steps} steps"
    ))
}

// ---------------------------------------------------------------- criterion 9

fn latency_preservation() -> Result<String> {
    let mut base = ScenarioConfig::desk_scale(BehaviorKind::VoteOnly);
    base.network.jitter = Jitter::None;
    let (out, log) = simulate(&toy_scenario(&base))?;
    let client = node_addr(NodeKind::Client, 0);
    let bx = *out.topology.ballot_boxes.first().context("no box")?;
    let vote = out.truth[0].time;
    let sent: Vec<u64> = log.iter().filter(|r| r.src == client && r.time > vote).map(|r| r.time.as_nanos()).collect();
    let recv: Vec<u64> = log.iter().filter(|r| r.dst == bx).map(|r| r.time.as_nanos()).collect();
    ensure!(sent.len() >= 2 && sent.len() == recv.len(), "unexpected packet counts {} / {}", sent.len(), recv.len());
    ensure!(gaps(&sent) == gaps(&recv), "zero-jitter gaps differ");

    let jitter = ScenarioConfig::desk_scale(BehaviorKind::FileTransfer).network.jitter;
    let spec = LinkSpec {
        base_latency: Duration::from_millis(23),
        jitter,
        pps: None,
    };
    let mut link = Link::new(NodeId(0), NodeId(1), spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut t, mut src, mut dst) = (0u64, Vec::new(), Vec::new());
    for _ in 0..5_000 {
        t += rng.random_range(ms(1)..ms(60));
        src.push(t);
        dst.push(link.deliver(NodeId(0), SimTime::from_nanos(t), &mut rng)?.as_nanos());
    }
    let r = pearson(&gaps(&src), &gaps(&dst)).context("degenerate gaps")?;
    ensure!(r >= 0.9, "gap correlation {r:.4} under default jitter");
    Ok(format!(
        "zero jitter: {} client gaps reproduced exactly at the box; default jitter: gap correlation {r:.4} over 5000 packets",
        sent.len() - 1
    ))
}

// --------------------------------------------------------------- criterion 10

fn capture_soundness() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let addr = |i: u8| Addr::new(10, 0, 0, i);
    let mut discrepancies = 0;
    let mut kept = 0;
    for _ in 0..100 {
        let n = rng.random_range(0..150);
        let log: Vec<PacketRecord> = (0..n)
            .map(|_| {
                let s = rng.random_range(0..12u8);
                let d = (s + rng.random_range(1..12u8)) % 12;
                PacketRecord::new(SimTime::from_millis(rng.random_range(0..5_000)), addr(s), addr(d))
            })
            .collect();
        let pick = |rng: &mut ChaCha8Rng| -> BTreeSet<Addr> { (0..12u8).filter(|_| rng.random_bool(0.2)).map(addr).collect() };
        let (vis, boxes) = (pick(&mut rng), pick(&mut rng));
        let view = filter_visible(&log, &vis, &boxes);
        let mut expected: Vec<PacketRecord> = Vec::new();
        for r in &log {
            let mut touches = false;
            for a in vis.iter().chain(&boxes) {
                if r.src == *a || r.dst == *a {
                    touches = true;
                }
            }
            if touches {
                expected.push(*r);
            }
        }
        expected.sort();
        kept += expected.len();
        if view.records != expected {
            discrepancies += 1;
        }
    }
    ensure!(discrepancies == 0, "{discrepancies} of 100 logs disagree");
    Ok(format!("100 random logs, {kept} records kept, 0 discrepancies"))
}

// ------------------------------------------------------------------- driver

fn line(n: u32, name: &str, started: Instant, result: &Result<String>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("PASS criterion {n} ({name}): {detail} [{secs:.1} s]");
            true
        }
        Err(e) => {
            println!("FAIL criterion {n} ({name}): {e:#} [{secs:.1} s]");
            false
        }
    }
}

fn main() {
    // Keep the harness quiet under `cargo test -- --list` and similar.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;

    let mut run = |n: u32, name: &str, f: &dyn Fn() -> Result<String>| {
        let t = Instant::now();
        ok &= line(n, name, t, &f());
    };
    run(1, "determinism", &determinism);
    run(2, "matcher oracle equivalence", &matcher_oracle);
    run(3, "noiseless recovery", &noiseless_recovery);

    let t = Instant::now();
    let sweeps: Result<Vec<Swept>> = [BehaviorKind::FileTransfer, BehaviorKind::Browser, BehaviorKind::VoteOnly]
        .into_iter()
        .map(run_sweep)
        .collect();
    match sweeps {
        Ok(sweeps) => {
            let ft = &sweeps[0];
            let curve = block_size_curve(ft);
            let x_star = curve.as_ref().map(|c| c.1).ok();
            ok &= line(4, "block-size curve", t, &curve.map(|c| c.0));
            let t5 = Instant::now();
            let delay = match x_star {
                Some(x) => delay_curve(ft, x),
                None => Err(anyhow::anyhow!("no unique block-size peak to sweep d at")),
            };
            ok &= line(5, "delay curve", t5, &delay);
            ok &= line(6, "model ordering", Instant::now(), &model_ordering(&sweeps));
        }
        Err(e) => {
            let msg = format!("{e:#}");
            for (n, name) in [(4, "block-size curve"), (5, "delay curve"), (6, "model ordering")] {
                ok &= line(n, name, t, &Err(anyhow::anyhow!("sweep failed: {msg}")));
            }
        }
    }

    let mut run = |n: u32, name: &str, f: &dyn Fn() -> Result<String>| {
        let t = Instant::now();
        ok &= line(n, name, t, &f());
    };
    run(7, "real-noise false-positive rate", &real_noise);
    run(8, "protocol arithmetic", &protocol_arithmetic);
    run(9, "latency preservation", &latency_preservation);
    run(10, "capture soundness", &capture_soundness);

    if !ok {
        std::process::exit(1);
    }
}
