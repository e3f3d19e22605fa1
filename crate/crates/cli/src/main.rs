use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use votetrace::commands::{self, AnalyzeArgs};
use votetrace::config::{parse_protocol, ScenarioFile, SweepFile};
use votetrace::formats::{import_trace, read_pattern, write_log, write_pattern, write_pcap};
use votetrace_core::capture::SpliceOptions;
use votetrace_core::Addr;

#[derive(Parser)]
#[command(name = "votetrace", version, about = "Simulate onion-routed voting and correlate vote traffic")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write packets.log, truth.tsv and manifest.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive the vote pattern from a one-client, one-box run of a scenario.
    ExtractPattern {
        /// Scenario file; the default desk scenario when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `default` or `civitas`; overrides the scenario's protocol.
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Noise-reduce a captured log and search it for the pattern.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        /// Defaults to manifest.json beside the log.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        pattern: PathBuf,
        /// Block size: windows with more packets are cut.
        #[arg(long)]
        x: u32,
        /// Window length.
        #[arg(long, default_value_t = 1_000_000_000)]
        t_ns: u64,
        /// Largest gap between consecutive matched packets.
        #[arg(long)]
        d_ns: u64,
        /// Ground truth to score against.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        tolerance_ns: Option<u64>,
        /// `sliding` or `tumbling`.
        #[arg(long)]
        windows: Option<String>,
        /// Seed column of the metrics row; taken from the manifest when absent.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for results.tsv and metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate every seed of a sweep file and score the (x, d) grid as CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; all cores when absent.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Pool sweep CSVs over seeds and print best points and model ordering.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge an external trace with the ballot-box streams of a simulated log.
    Splice {
        /// Native log or classic pcap.
        #[arg(long)]
        trace: PathBuf,
        /// Simulated log whose ballot-box streams are added.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// The captured node; the busiest address when absent.
        #[arg(long)]
        node: Option<Addr>,
        #[arg(long, default_value_t = 0)]
        offset_ns: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert between native logs and pcap, optionally keeping one node's traffic.
    Convert {
        #[arg(long)]
        input: PathBuf,
        /// Written as pcap when the name ends in .pcap, else as a native log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        node: Option<Addr>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Simulate { config, seed, out } => {
            let file = ScenarioFile::load(&config)?;
            let mut cfg = file.build()?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let m = commands::simulate(&cfg, &file.capture, &out)?;
            println!("{} records, {} votes, config {}", m.records, cfg.topology.voters, m.config_sha256);
        }
        Cmd::ExtractPattern {
            config,
            protocol,
            seed,
            out,
        } => {
            let file = match config {
                Some(p) => ScenarioFile::load(&p)?,
                None => ScenarioFile::parse("model = \"vote-only\"")?,
            };
            let mut cfg = file.build()?;
            if let Some(p) = protocol {
                cfg.protocol = parse_protocol(&p)?;
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let pattern = commands::extract_pattern(&cfg)?;
            write_pattern(&out, &pattern)?;
            println!("{} steps", pattern.len());
        }
        Cmd::Analyze {
            log,
            manifest,
            pattern,
            x,
            t_ns,
            d_ns,
            truth,
            tolerance_ns,
            windows,
            seed,
            out,
        } => {
            if t_ns == 0 || d_ns == 0 {
                bail!("--t-ns and --d-ns must be positive");
            }
            let manifest = manifest.unwrap_or_else(|| commands::manifest_for(&log));
            let (m, view) = commands::load_view(&log, &manifest)?;
            let pattern = read_pattern(&pattern)?;
            let args = AnalyzeArgs {
                pattern: &pattern,
                x,
                t: Duration::from_nanos(t_ns),
                d: Duration::from_nanos(d_ns),
                windows: commands::parse_windows(windows.as_deref())?,
                tolerance: tolerance_ns.map(Duration::from_nanos),
            };
            let truth = truth.map(|p| commands::read_truth(&p)).transpose()?;
            let (results, metrics) = commands::analyze(&view, &args, truth.as_deref())?;
            let seed = seed.unwrap_or(m.seed);
            commands::write_analysis(&out, &results, metrics.as_ref().map(|mt| (mt, m.scenario.as_str(), seed, &args)))?;
            println!("{} candidates, {} matches", view.visible_clients.len(), results.len());
            if let Some(mt) = metrics {
                println!(
                    "visible voters {}, hits {}, false positives {}, hit rate {:.4}",
                    mt.visible_voters, mt.hits, mt.false_positives, mt.hit_rate
                );
            }
        }
        Cmd::Sweep { config, out, jobs } => {
            let spec = SweepFile::load(&config)?;
            let rows = commands::sweep(&spec, jobs)?;
            commands::write_csv(&out, &rows)?;
            println!("{} rows", rows.len());
        }
        Cmd::Report { csv, out } => {
            let mut rows = Vec::new();
            for p in &csv {
                rows.extend(commands::read_csv(p)?);
            }
            let text = commands::report(&rows)?;
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Cmd::Splice {
            trace,
            log,
            manifest,
            node,
            offset_ns,
            out,
        } => {
            let external = import_trace(&trace)?;
            let manifest = manifest.unwrap_or_else(|| commands::manifest_for(&log));
            let (_, sim_view) = commands::load_view(&log, &manifest)?;
            let opts = SpliceOptions {
                node,
                external_offset: Duration::from_nanos(offset_ns),
            };
            let (m, _) = commands::splice(&external, &sim_view, opts, &out)?;
            println!("{} candidates, {} records", m.visible_clients.len(), m.records);
        }
        Cmd::Convert { input, out, node } => {
            let mut records = import_trace(&input)?;
            if let Some(n) = node {
                records.retain(|r| r.touches(n));
            }
            if out.extension().is_some_and(|e| e == "pcap") {
                write_pcap(&out, &records)?;
            } else {
                write_log(&out, &records)?;
            }
            println!("{} records", records.len());
        }
    }
    Ok(())
}
