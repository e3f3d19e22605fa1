//! The pipeline stages behind each subcommand.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use votetrace_core::capture::{filter_visible, splice as splice_views, RecordSink, SpliceOptions, TieSorter, VantageFilter};
use votetrace_core::config::{BehaviorKind, ScenarioConfig};
use votetrace_core::eval::{compare_scenarios, default_tolerance, score, sweep as sweep_grid, ScenarioRun, SweepRow, SweepSpec};
use votetrace_core::pattern::{analyze as run_analysis, extract_pattern as extract, WindowMode};
use votetrace_core::world::{toy_scenario, SimOutput};
use votetrace_core::{Addr, AttackerView, GroundTruth, MatchParams, MatchResult, Metrics, NoiseParams, PacketRecord, Pattern, SimTime, Simulation};

use crate::config::{CaptureFile, SweepFile};
use crate::formats::{read_log, read_votes, results_as_votes, write_log, write_votes, LogWriter, Manifest};

pub const LOG_FILE: &str = "packets.log";
pub const TRUTH_FILE: &str = "truth.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.tsv";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn tool_version() -> String {
    format!("votetrace {}", env!("CARGO_PKG_VERSION"))
}

/// Hash of the effective configuration, seed and tool version.
pub fn config_hash(cfg: &ScenarioConfig) -> String {
    let mut h = Sha256::new();
    h.update(tool_version().as_bytes());
    h.update(format!("\nseed={}\n{cfg:?}", cfg.run.seed).as_bytes());
    hex::encode(h.finalize())
}

/// Applies the capture settings in front of a tie-sorting sink.
struct CaptureSink<S> {
    vantage: Option<BTreeSet<Addr>>,
    cutoff: SimTime,
    out: TieSorter<S>,
}

impl<S: RecordSink> RecordSink for CaptureSink<S> {
    fn record(&mut self, rec: PacketRecord) {
        if rec.time < self.cutoff {
            return;
        }
        if let Some(v) = &self.vantage {
            if !v.contains(&rec.src) && !v.contains(&rec.dst) {
                return;
            }
        }
        self.out.record(rec);
    }

    fn finish(&mut self) {
        self.out.finish();
    }
}

fn capture_sink<S: RecordSink>(sim: &Simulation, cfg: &ScenarioConfig, capture: &CaptureFile, inner: S) -> CaptureSink<S> {
    let t = sim.topology();
    CaptureSink {
        vantage: (!capture.full_log).then(|| t.visible_clients.union(&t.ballot_boxes).copied().collect()),
        cutoff: if capture.discard_warmup { cfg.warmup_end() } else { SimTime::ZERO },
        out: TieSorter::new(inner),
    }
}

/// Runs a scenario, streaming the captured log to `out_dir` and writing the
/// ground truth and manifest beside it.
pub fn simulate(cfg: &ScenarioConfig, capture: &CaptureFile, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let sim = Simulation::new(cfg).context("invalid scenario")?;
    let log_path = out_dir.join(LOG_FILE);
    let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut sink = capture_sink(&sim, cfg, capture, LogWriter::new(BufWriter::new(file)));
    let out = sim.run(&mut sink);
    let (records, log_sha256) = sink
        .out
        .into_inner()
        .close()
        .with_context(|| format!("writing {}", log_path.display()))?;
    let truth_sha256 = write_votes(&out_dir.join(TRUTH_FILE), &out.truth)?;
    let manifest = Manifest {
        tool_version: tool_version(),
        scenario: cfg.behavior.client_model.kind.name().to_string(),
        seed: cfg.run.seed,
        config_sha256: config_hash(cfg),
        log: LOG_FILE.to_string(),
        log_sha256,
        records,
        full_log: capture.full_log,
        truth: Some(TRUTH_FILE.to_string()),
        truth_sha256: Some(truth_sha256),
        visible_clients: out.topology.visible_clients.clone(),
        ballot_boxes: out.topology.ballot_boxes.clone(),
        stats: Some(out.stats.into()),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Runs a scenario in memory and returns the attacker's view.
pub fn simulate_view(cfg: &ScenarioConfig) -> Result<(SimOutput, AttackerView)> {
    let sim = Simulation::new(cfg).context("invalid scenario")?;
    let (clients, boxes) = (sim.topology().visible_clients.clone(), sim.topology().ballot_boxes.clone());
    let mut sink = VantageFilter::new(&clients, &boxes, Vec::new());
    let out = sim.run(&mut sink);
    let view = AttackerView::from_records(clients, boxes, sink.into_inner());
    Ok((out, view))
}

/// The pattern of one vote, taken from the toy variant of `cfg`.
pub fn extract_pattern(cfg: &ScenarioConfig) -> Result<Pattern> {
    let (_, view) = simulate_view(&toy_scenario(cfg))?;
    Ok(extract(&view)?)
}

/// Loads a log with the vantage sets from its manifest.
pub fn load_view(log: &Path, manifest: &Path) -> Result<(Manifest, AttackerView)> {
    let m = Manifest::read(manifest)?;
    let records = read_log(log)?;
    let view = filter_visible(&records, &m.visible_clients, &m.ballot_boxes);
    Ok((m, view))
}

/// The manifest beside a log file.
pub fn manifest_for(log: &Path) -> PathBuf {
    log.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE)
}

pub fn parse_windows(name: Option<&str>) -> Result<WindowMode> {
    match name {
        None | Some("sliding") => Ok(WindowMode::Sliding),
        Some("tumbling") => Ok(WindowMode::Tumbling),
        Some(other) => bail!("unknown window mode `{other}` (expected sliding or tumbling)"),
    }
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scenario: String,
    pub seed: u64,
    pub x: u32,
    pub t_ns: u64,
    pub d_ns: u64,
    pub visible_voters: usize,
    pub hits: usize,
    pub false_positives: usize,
    pub hit_rate: f64,
    pub precision: f64,
}

impl CsvRow {
    pub fn from_sweep(r: &SweepRow) -> Self {
        CsvRow {
            scenario: r.scenario.clone(),
            seed: r.seed,
            x: r.x,
            t_ns: r.window.as_nanos() as u64,
            d_ns: r.d.as_nanos() as u64,
            visible_voters: r.metrics.visible_voters,
            hits: r.metrics.hits,
            false_positives: r.metrics.false_positives,
            hit_rate: r.metrics.hit_rate,
            precision: r.metrics.precision,
        }
    }

    pub fn to_sweep(&self) -> SweepRow {
        let outputs = self.hits + self.false_positives;
        SweepRow {
            scenario: self.scenario.clone(),
            seed: self.seed,
            x: self.x,
            window: Duration::from_nanos(self.t_ns),
            d: Duration::from_nanos(self.d_ns),
            metrics: Metrics {
                hits: self.hits,
                false_positives: self.false_positives,
                visible_voters: self.visible_voters,
                outputs,
                hit_rate: self.hit_rate,
                precision: self.precision,
            },
        }
    }
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<CsvRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

pub struct AnalyzeArgs<'a> {
    pub pattern: &'a Pattern,
    pub x: u32,
    pub t: Duration,
    pub d: Duration,
    pub windows: WindowMode,
    pub tolerance: Option<Duration>,
}

/// Analyzes a view; with ground truth, also scores the result.
pub fn analyze(view: &AttackerView, args: &AnalyzeArgs, truth: Option<&[votetrace_core::VoteRecord]>) -> Result<(Vec<MatchResult>, Option<Metrics>)> {
    let mut noise = NoiseParams::new(args.x, args.t)?;
    noise.mode = args.windows;
    let results = run_analysis(view, args.pattern, noise, MatchParams::new(args.d)?);
    let metrics = truth.map(|entries| {
        let gt = GroundTruth::new(entries.to_vec(), view.visible_clients.clone());
        let tol = args.tolerance.unwrap_or_else(|| default_tolerance(args.pattern.len(), args.d));
        score(&results, &gt, tol)
    });
    Ok((results, metrics))
}

/// Writes `results.tsv` and, when scored, `metrics.csv` into `out_dir`.
pub fn write_analysis(
    out_dir: &Path,
    results: &[MatchResult],
    metrics: Option<(&Metrics, &str, u64, &AnalyzeArgs)>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_votes(&out_dir.join(RESULTS_FILE), &results_as_votes(results))?;
    if let Some((m, scenario, seed, a)) = metrics {
        let row = CsvRow {
            scenario: scenario.to_string(),
            seed,
            x: a.x,
            t_ns: a.t.as_nanos() as u64,
            d_ns: a.d.as_nanos() as u64,
            visible_voters: m.visible_voters,
            hits: m.hits,
            false_positives: m.false_positives,
            hit_rate: m.hit_rate,
            precision: m.precision,
        };
        write_csv(&out_dir.join(METRICS_FILE), &[row])?;
    }
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<votetrace_core::VoteRecord>> {
    read_votes(path)
}

/// Runs every seed of a sweep and scores the whole grid. Rows are ordered by
/// seed (as listed), then `x`, then `d`.
pub fn sweep(spec: &SweepFile, jobs: Option<usize>) -> Result<Vec<CsvRow>> {
    let base = spec.scenario.build()?;
    let windows = parse_windows(spec.windows.as_deref())?;
    let pattern = extract_pattern(&base)?;
    let label = spec.label();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build()?;
    let per_seed: Vec<Result<Vec<SweepRow>>> = pool.install(|| {
        spec.seeds
            .par_iter()
            .map(|&seed| {
                let mut cfg = base.clone();
                cfg.run.seed = seed;
                let (out, view) = simulate_view(&cfg)?;
                let truth = GroundTruth::new(out.truth, out.topology.visible_clients.clone());
                let rows: Vec<Vec<SweepRow>> = spec
                    .x
                    .par_iter()
                    .map(|&x| {
                        let mut s = SweepSpec::new(
                            label.clone(),
                            seed,
                            vec![x],
                            spec.d_ns.iter().map(|&d| Duration::from_nanos(d)).collect(),
                        );
                        s.window = Duration::from_nanos(spec.t_ns);
                        s.mode = windows;
                        s.tolerance = spec.tolerance_ns.map(Duration::from_nanos);
                        sweep_grid(&view, &pattern, &truth, &s)
                    })
                    .collect::<Result<_, _>>()?;
                Ok(rows.into_iter().flatten().collect())
            })
            .collect()
    });
    let mut out = Vec::new();
    for rows in per_seed {
        out.extend(rows?.iter().map(CsvRow::from_sweep));
    }
    Ok(out)
}

/// Sums hits, false positives and visible voters over seeds for every
/// `(scenario, x, t, d)` point. The seed column of a pooled row is the number
/// of runs pooled.
pub fn pool_rows(rows: &[CsvRow]) -> Vec<CsvRow> {
    let mut acc: BTreeMap<(String, u32, u64, u64), CsvRow> = BTreeMap::new();
    for r in rows {
        let e = acc
            .entry((r.scenario.clone(), r.x, r.t_ns, r.d_ns))
            .or_insert_with(|| CsvRow {
                seed: 0,
                visible_voters: 0,
                hits: 0,
                false_positives: 0,
                ..r.clone()
            });
        e.seed += 1;
        e.visible_voters += r.visible_voters;
        e.hits += r.hits;
        e.false_positives += r.false_positives;
    }
    acc.into_values()
        .map(|mut r| {
            r.hit_rate = if r.visible_voters == 0 { 0.0 } else { r.hits as f64 / r.visible_voters as f64 };
            let outputs = r.hits + r.false_positives;
            r.precision = if outputs == 0 { 1.0 } else { r.hits as f64 / outputs as f64 };
            r
        })
        .collect()
}

/// Text summary of pooled sweep results: the best point of each scenario and
/// the expected ordering between behavior models.
pub fn report(rows: &[CsvRow]) -> Result<String> {
    let pooled = pool_rows(rows);
    let mut by_scenario: BTreeMap<String, Vec<SweepRow>> = BTreeMap::new();
    for r in &pooled {
        by_scenario.entry(r.scenario.clone()).or_default().push(r.to_sweep());
    }
    if by_scenario.is_empty() {
        bail!("no sweep rows to report");
    }
    let runs: Vec<ScenarioRun> = by_scenario
        .into_iter()
        .map(|(name, rows)| ScenarioRun {
            kind: BehaviorKind::from_name(&name),
            name,
            rows,
        })
        .collect();
    let mut s = String::new();
    writeln!(s, "scenario\truns\tbest_x\tbest_d_ns\tvisible_voters\thits\tfalse_positives\thit_rate")?;
    for run in &runs {
        let Some(best) = votetrace_core::eval::best_point(&run.rows) else { continue };
        let m = &best.metrics;
        let runs_pooled = pooled.iter().find(|r| r.scenario == run.name).map_or(0, |r| r.seed);
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}",
            run.name,
            runs_pooled,
            best.x,
            best.d.as_nanos(),
            m.visible_voters,
            m.hits,
            m.false_positives,
            m.hit_rate
        )?;
    }
    if runs.len() >= 2 {
        for c in compare_scenarios(&runs)?.checks {
            writeln!(
                s,
                "ordering {} ({:.4}) >= {} ({:.4}): {}",
                c.higher,
                c.higher_rate,
                c.lower,
                c.lower_rate,
                if c.holds { "holds" } else { "violated" }
            )?;
        }
    }
    Ok(s)
}

/// Merges an external trace with the ballot-box streams of a simulated log
/// and writes the result as a log plus manifest whose visible clients are
/// the candidate voters.
pub fn splice(
    external: &[PacketRecord],
    sim_view: &AttackerView,
    opts: SpliceOptions,
    out_dir: &Path,
) -> Result<(Manifest, AttackerView)> {
    let spliced = splice_views(external, &sim_view.box_streams(), opts)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let log_path = out_dir.join(LOG_FILE);
    write_log(&log_path, &spliced.view.records)?;
    let manifest = Manifest {
        tool_version: tool_version(),
        scenario: "spliced".to_string(),
        log: LOG_FILE.to_string(),
        log_sha256: crate::formats::sha256_file(&log_path)?,
        records: spliced.view.records.len() as u64,
        visible_clients: spliced.view.visible_clients.clone(),
        ballot_boxes: spliced.view.ballot_boxes.clone(),
        ..Default::default()
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok((manifest, spliced.view))
}
