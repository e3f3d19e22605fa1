//! TOML scenario and sweep files.
//!
//! A scenario file names a preset (`scale`, `model`) and overrides any of
//! its fields. Unknown keys are rejected.

use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use votetrace_core::config::{BehaviorKind, ScenarioConfig, VoteCircuit, VoteProtocolSpec};
use votetrace_core::dist::Dist;
use votetrace_core::engine::Jitter;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub scale: Scale,
    /// `file-transfer`, `browser`, `bulk` or `vote-only`.
    pub model: String,
    pub seed: Option<u64>,
    /// `default` or `civitas`; the `[vote]` table overrides single fields.
    pub protocol: Option<String>,
    #[serde(default)]
    pub topology: TopologyFile,
    #[serde(default)]
    pub run: RunFile,
    #[serde(default)]
    pub clients: ClientsFile,
    #[serde(default)]
    pub vote: VoteFile,
    #[serde(default)]
    pub circuit: CircuitFile,
    #[serde(default)]
    pub network: NetworkFile,
    #[serde(default)]
    pub capture: CaptureFile,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    pub relays: Option<u32>,
    pub directories: Option<u32>,
    pub clients: Option<u32>,
    pub visible_clients: Option<u32>,
    pub voters: Option<u32>,
    pub bulk_clients: Option<u32>,
    pub file_servers: Option<u32>,
    pub web_servers: Option<u32>,
    pub ballot_boxes: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub duration_s: Option<f64>,
    pub warmup_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsFile {
    /// Mean of the exponential pause between downloads.
    pub think_mean_s: Option<f64>,
    pub object_min_bytes: Option<f64>,
    pub object_max_bytes: Option<f64>,
    pub start_spread_s: Option<f64>,
    pub vote_margin_s: Option<f64>,
    pub response_rate_min: Option<f64>,
    pub response_rate_max: Option<f64>,
    /// Zero disables the timeout.
    pub download_timeout_s: Option<f64>,
    pub ack_interval: Option<u32>,
    /// `on-demand`, `prebuilt` or `shared`.
    pub vote_circuit: Option<String>,
    pub browser_parallelism: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteFile {
    pub handshake_packets: Option<u32>,
    pub payload_packets: Option<u32>,
    pub confirmation_packets: Option<u32>,
    pub ack_per_payload: Option<bool>,
    pub teardown_packets: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitFile {
    pub hops: Option<u32>,
    pub setup_round_trips: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub access_latency_min_ms: Option<f64>,
    pub access_latency_max_ms: Option<f64>,
    /// Zero disables jitter.
    pub jitter_max_ms: Option<f64>,
    pub relay_delay_ms: Option<f64>,
    pub server_delay_ms: Option<f64>,
    pub setup_delay_ms: Option<f64>,
    /// Zero removes the cap.
    pub link_pps: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureFile {
    /// Log every delivered packet instead of the attacker's vantage links.
    #[serde(default)]
    pub full_log: bool,
    /// Drop records from the warm-up period.
    #[serde(default)]
    pub discard_warmup: bool,
}

fn secs(v: f64, what: &str) -> Result<Duration> {
    Duration::try_from_secs_f64(v).map_err(|_| anyhow!("{what} must be a non-negative number of seconds"))
}

fn millis(v: f64, what: &str) -> Result<Duration> {
    secs(v / 1000.0, what)
}

pub fn parse_kind(name: &str) -> Result<BehaviorKind> {
    BehaviorKind::from_name(name)
        .ok_or_else(|| anyhow!("unknown client model `{name}` (expected file-transfer, browser, bulk or vote-only)"))
}

pub fn parse_protocol(name: &str) -> Result<VoteProtocolSpec> {
    match name {
        "default" => Ok(VoteProtocolSpec::DEFAULT),
        "civitas" => Ok(VoteProtocolSpec::CIVITAS),
        _ => bail!("unknown vote protocol `{name}` (expected default or civitas)"),
    }
}

impl ScenarioFile {
    pub fn preset(scale: Scale, kind: BehaviorKind) -> Self {
        ScenarioFile {
            scale,
            model: kind.name().to_string(),
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// The preset with every override applied, validated.
    pub fn build(&self) -> Result<ScenarioConfig> {
        let kind = parse_kind(&self.model)?;
        let mut cfg = match self.scale {
            Scale::Desk => ScenarioConfig::desk_scale(kind),
            Scale::Paper => ScenarioConfig::paper_scale(kind),
        };
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(p) = &self.protocol {
            cfg.protocol = parse_protocol(p)?;
        }

        let t = &self.topology;
        let topo = &mut cfg.topology;
        for (slot, v) in [
            (&mut topo.relays, t.relays),
            (&mut topo.directories, t.directories),
            (&mut topo.clients, t.clients),
            (&mut topo.visible_clients, t.visible_clients),
            (&mut topo.voters, t.voters),
            (&mut topo.bulk_clients, t.bulk_clients),
            (&mut topo.file_servers, t.file_servers),
            (&mut topo.web_servers, t.web_servers),
            (&mut topo.ballot_boxes, t.ballot_boxes),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }

        if let Some(v) = self.run.duration_s {
            cfg.run.duration = secs(v, "run.duration_s")?;
        }
        if let Some(v) = self.run.warmup_s {
            cfg.run.warmup = secs(v, "run.warmup_s")?;
        }

        let c = &self.clients;
        let b = &mut cfg.behavior;
        if let Some(m) = c.think_mean_s {
            b.client_model.think = if m == 0.0 { Dist::Constant(0.0) } else { Dist::Exponential { mean: m } };
        }
        if c.object_min_bytes.is_some() || c.object_max_bytes.is_some() {
            let (lo, hi) = match b.client_model.object_bytes {
                Dist::Uniform { lo, hi } => (lo, hi),
                _ => (0.0, 0.0),
            };
            b.client_model.object_bytes = Dist::Uniform {
                lo: c.object_min_bytes.unwrap_or(lo),
                hi: c.object_max_bytes.unwrap_or(hi),
            };
        }
        if let Some(v) = c.start_spread_s {
            b.start_spread = secs(v, "clients.start_spread_s")?;
        }
        if let Some(v) = c.vote_margin_s {
            b.vote_margin = secs(v, "clients.vote_margin_s")?;
        }
        if c.response_rate_min.is_some() || c.response_rate_max.is_some() {
            let (lo, hi) = match b.response_rate {
                Dist::LogUniform { lo, hi } | Dist::Uniform { lo, hi } => (lo, hi),
                other => (other.mean(), other.mean()),
            };
            b.response_rate = Dist::LogUniform {
                lo: c.response_rate_min.unwrap_or(lo),
                hi: c.response_rate_max.unwrap_or(hi),
            };
        }
        if let Some(v) = c.download_timeout_s {
            b.download_timeout = if v == 0.0 { None } else { Some(secs(v, "clients.download_timeout_s")?) };
        }
        if let Some(v) = c.ack_interval {
            b.ack_interval = v;
        }
        if let Some(v) = &c.vote_circuit {
            b.vote_circuit = match v.as_str() {
                "on-demand" => VoteCircuit::OnDemand,
                "prebuilt" => VoteCircuit::Prebuilt,
                "shared" => VoteCircuit::Shared,
                _ => bail!("unknown vote circuit `{v}` (expected on-demand, prebuilt or shared)"),
            };
        }
        if let Some(v) = c.browser_parallelism {
            b.browser_parallelism = v;
        }

        let v = &self.vote;
        let p = &mut cfg.protocol;
        for (slot, val) in [
            (&mut p.handshake_packets, v.handshake_packets),
            (&mut p.payload_packets, v.payload_packets),
            (&mut p.confirmation_packets, v.confirmation_packets),
            (&mut p.teardown_packets, v.teardown_packets),
        ] {
            if let Some(val) = val {
                *slot = val;
            }
        }
        if let Some(a) = v.ack_per_payload {
            p.ack_per_payload = a;
        }

        if let Some(h) = self.circuit.hops {
            cfg.circuit.hops = h;
        }
        if let Some(r) = self.circuit.setup_round_trips {
            cfg.circuit.setup_round_trips = r;
        }

        let n = &self.network;
        let net = &mut cfg.network;
        if let Some(v) = n.access_latency_min_ms {
            net.access_latency_min = millis(v, "network.access_latency_min_ms")?;
        }
        if let Some(v) = n.access_latency_max_ms {
            net.access_latency_max = millis(v, "network.access_latency_max_ms")?;
        }
        if let Some(v) = n.jitter_max_ms {
            net.jitter = if v == 0.0 {
                Jitter::None
            } else {
                Jitter::Uniform { max: millis(v, "network.jitter_max_ms")? }
            };
        }
        if let Some(v) = n.relay_delay_ms {
            net.relay_delay = millis(v, "network.relay_delay_ms")?;
        }
        if let Some(v) = n.server_delay_ms {
            net.server_delay = millis(v, "network.server_delay_ms")?;
        }
        if let Some(v) = n.setup_delay_ms {
            net.setup_delay = millis(v, "network.setup_delay_ms")?;
        }
        if let Some(v) = n.link_pps {
            net.link_pps = (v != 0).then_some(v);
        }

        cfg.validate().context("invalid scenario")?;
        Ok(cfg)
    }
}

/// A parameter grid over one scenario and a list of seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    /// Label used in the CSV; defaults to the scenario's model name.
    pub name: Option<String>,
    pub seeds: Vec<u64>,
    pub x: Vec<u32>,
    pub d_ns: Vec<u64>,
    #[serde(default = "one_second_ns")]
    pub t_ns: u64,
    /// Scoring tolerance; `(steps - 1) * d` when absent.
    pub tolerance_ns: Option<u64>,
    /// `sliding` (default) or `tumbling`.
    pub windows: Option<String>,
    pub scenario: ScenarioFile,
}

fn one_second_ns() -> u64 {
    1_000_000_000
}

impl SweepFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let s: SweepFile = toml::from_str(text)?;
        if s.seeds.is_empty() || s.x.is_empty() || s.d_ns.is_empty() {
            bail!("sweep needs at least one seed, one x and one d_ns value");
        }
        if s.t_ns == 0 || s.d_ns.contains(&0) {
            bail!("t_ns and every d_ns must be positive");
        }
        Ok(s)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.scenario.model.clone())
    }
}
