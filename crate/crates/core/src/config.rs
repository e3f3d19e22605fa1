//! Scenario configuration: topology counts, behavior mix, vote protocol,
//! network characteristics and run bounds.

use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

use crate::dist::Dist;
use crate::engine::Jitter;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopologyConfig {
    pub relays: u32,
    pub directories: u32,
    /// Ordinary clients; voters and visible clients are drawn from these.
    pub clients: u32,
    pub visible_clients: u32,
    pub voters: u32,
    pub bulk_clients: u32,
    pub file_servers: u32,
    pub web_servers: u32,
    pub ballot_boxes: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BehaviorKind {
    FileTransfer,
    Browser,
    Bulk,
    VoteOnly,
}

impl BehaviorKind {
    pub fn name(self) -> &'static str {
        match self {
            BehaviorKind::FileTransfer => "file-transfer",
            BehaviorKind::Browser => "browser",
            BehaviorKind::Bulk => "bulk",
            BehaviorKind::VoteOnly => "vote-only",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "file-transfer" => BehaviorKind::FileTransfer,
            "browser" => BehaviorKind::Browser,
            "bulk" => BehaviorKind::Bulk,
            "vote-only" => BehaviorKind::VoteOnly,
            _ => return None,
        })
    }
}

/// Traffic shape of one client population.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorModel {
    pub kind: BehaviorKind,
    /// Idle time between consecutive requests (file downloads or page loads), seconds.
    pub think: Dist,
    /// Size of one downloaded object in bytes. Browser clients take object
    /// sizes from the web server's page profile instead.
    pub object_bytes: Dist,
}

impl BehaviorModel {
    pub fn file_transfer() -> Self {
        BehaviorModel {
            kind: BehaviorKind::FileTransfer,
            think: Dist::Exponential { mean: 60.0 },
            object_bytes: Dist::Uniform {
                lo: 1_000_000.0,
                hi: 5_000_000.0,
            },
        }
    }

    pub fn browser() -> Self {
        BehaviorModel {
            kind: BehaviorKind::Browser,
            think: Dist::Exponential { mean: 60.0 },
            object_bytes: Dist::Constant(0.0),
        }
    }

    pub fn bulk() -> Self {
        BehaviorModel {
            kind: BehaviorKind::Bulk,
            think: Dist::Constant(0.0),
            ..Self::file_transfer()
        }
    }

    pub fn vote_only() -> Self {
        BehaviorModel {
            kind: BehaviorKind::VoteOnly,
            think: Dist::Constant(0.0),
            object_bytes: Dist::Constant(0.0),
        }
    }

    pub fn for_kind(kind: BehaviorKind) -> Self {
        match kind {
            BehaviorKind::FileTransfer => Self::file_transfer(),
            BehaviorKind::Browser => Self::browser(),
            BehaviorKind::Bulk => Self::bulk(),
            BehaviorKind::VoteOnly => Self::vote_only(),
        }
    }

    /// Mean bytes moved per request for this model, given the web profiles.
    pub fn mean_transfer_bytes(&self, profiles: &[WebProfile]) -> f64 {
        match self.kind {
            BehaviorKind::Browser => {
                if profiles.is_empty() {
                    0.0
                } else {
                    profiles.iter().map(|p| p.page_bytes as f64).sum::<f64>() / profiles.len() as f64
                }
            }
            BehaviorKind::VoteOnly => 0.0,
            _ => self.object_bytes.mean(),
        }
    }
}

/// Shape of one simulated website: total page weight split over sequentially
/// fetched objects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WebProfile {
    pub name: String,
    pub page_bytes: u64,
    pub objects: u32,
}

/// The ten website profiles used by the browser model.
pub fn default_web_profiles() -> Vec<WebProfile> {
    [
        ("google.com", 150_000, 8),
        ("facebook.com", 900_000, 40),
        ("youtube.com", 1_500_000, 50),
        ("yahoo.com", 1_800_000, 60),
        ("baidu.com", 120_000, 6),
        ("wikipedia.org", 250_000, 15),
        ("twitter.com", 700_000, 30),
        ("qq.com", 2_000_000, 80),
        ("taobao.com", 1_600_000, 70),
        ("amazon.com", 1_200_000, 55),
    ]
    .into_iter()
    .map(|(name, page_bytes, objects)| WebProfile {
        name: name.into(),
        page_bytes,
        objects,
    })
    .collect()
}

/// When the dedicated vote circuit is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoteCircuit {
    /// Built right before the vote is cast.
    OnDemand,
    /// Built when the client starts and left idle until the vote.
    Prebuilt,
    /// The vote goes over the client's long-lived circuit (falls back to a
    /// fresh one for clients without one).
    Shared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorConfig {
    pub client_model: BehaviorModel,
    pub bulk_model: BehaviorModel,
    pub web_profiles: Vec<WebProfile>,
    /// Clients start their behavior uniformly within this span after warm-up.
    pub start_spread: Duration,
    /// Payload bytes per onion cell.
    pub cell_payload_bytes: u32,
    /// Packets per second a server emits on one connection, drawn per connection.
    pub response_rate: Dist,
    /// Clients abandon downloads still running after this long.
    pub download_timeout: Option<Duration>,
    /// Clients acknowledge every this many received data cells (0 disables).
    pub ack_interval: u32,
    pub vote_circuit: VoteCircuit,
    /// How long before the vote a prebuilt vote circuit starts building.
    pub vote_circuit_lead: Duration,
    /// Objects a browser fetches concurrently while loading a page.
    pub browser_parallelism: u32,
    /// Votes are placed uniformly in `[warm-up end, end - vote_margin]`.
    pub vote_margin: Duration,
}

/// Packets exchanged on the ballot-box side of one vote.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VoteProtocolSpec {
    /// Connection setup packets per direction between exit and ballot box.
    /// With zero the connection opens with the first payload packet.
    pub handshake_packets: u32,
    pub payload_packets: u32,
    pub confirmation_packets: u32,
    /// Acknowledge every payload packet except the last, which the
    /// confirmation acknowledges.
    pub ack_per_payload: bool,
    /// Termination packets the ballot box receives after the voter closes.
    pub teardown_packets: u32,
}

impl VoteProtocolSpec {
    /// One vote packet, one confirmation.
    pub const DEFAULT: VoteProtocolSpec = VoteProtocolSpec {
        handshake_packets: 0,
        payload_packets: 1,
        confirmation_packets: 1,
        ack_per_payload: false,
        teardown_packets: 1,
    };

    /// Three payload packets, the first two acknowledged separately.
    pub const CIVITAS: VoteProtocolSpec = VoteProtocolSpec {
        payload_packets: 3,
        ack_per_payload: true,
        ..VoteProtocolSpec::DEFAULT
    };

    pub fn acks(&self) -> u32 {
        if self.ack_per_payload {
            self.payload_packets.saturating_sub(1)
        } else {
            0
        }
    }

    /// Packets crossing the exit/ballot-box link for one vote.
    pub fn box_link_packets(&self) -> u32 {
        2 * self.handshake_packets
            + self.payload_packets
            + self.acks()
            + self.confirmation_packets
            + self.teardown_packets
    }

    /// Cells on the voter's access link for one vote connection, excluding
    /// circuit construction: optional begin/connected, the vote cell, the
    /// confirmation cells and the closing cell.
    pub fn access_link_cells(&self) -> u32 {
        let open = if self.handshake_packets > 0 { 2 } else { 0 };
        open + 1 + self.confirmation_packets + 1
    }
}

impl Default for VoteProtocolSpec {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CircuitConfig {
    pub hops: u32,
    /// Round trips between the client and each hop while extending.
    pub setup_round_trips: u32,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        CircuitConfig {
            hops: 3,
            setup_round_trips: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// One-way latency of each node's access link is drawn uniformly from
    /// this range; a path between two nodes costs the sum of both.
    pub access_latency_min: Duration,
    pub access_latency_max: Duration,
    pub jitter: Jitter,
    /// Forwarding delay inside a relay.
    pub relay_delay: Duration,
    /// Processing delay of servers and ballot boxes before replying.
    pub server_delay: Duration,
    /// Extra time a relay spends answering a circuit setup cell.
    pub setup_delay: Duration,
    /// Per-direction serialization cap on every link.
    pub link_pps: Option<u32>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            access_latency_min: Duration::from_millis(5),
            access_latency_max: Duration::from_millis(15),
            jitter: Jitter::Uniform {
                max: Duration::from_millis(2),
            },
            relay_delay: Duration::from_micros(200),
            server_delay: Duration::from_millis(1),
            setup_delay: Duration::from_millis(100),
            link_pps: Some(20_000),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunConfig {
    pub seed: u64,
    pub duration: Duration,
    /// Clients stay idle until this much simulated time has passed.
    pub warmup: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub topology: TopologyConfig,
    pub behavior: BehaviorConfig,
    pub protocol: VoteProtocolSpec,
    pub circuit: CircuitConfig,
    pub network: NetworkConfig,
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("voters ({voters}) exceed clients ({clients})")]
    TooManyVoters { voters: u32, clients: u32 },
    #[error("visible clients ({visible}) exceed clients ({clients})")]
    TooManyVisible { visible: u32, clients: u32 },
    #[error("at least one ballot box is required")]
    NoBallotBox,
    #[error("circuits need {hops} distinct relays but only {relays} exist")]
    InsufficientRelays { hops: u32, relays: u32 },
    #[error("circuit hop count must be at least 1")]
    ZeroHops,
    #[error("{0} clients need at least one file server")]
    NoFileServer(&'static str),
    #[error("browser clients need at least one web server and one web profile")]
    NoWebServer,
    #[error("the vote protocol needs at least one payload packet")]
    NoPayload,
    #[error("warm-up must be shorter than the run")]
    WarmupTooLong,
    #[error("vote window is empty: warm-up plus vote margin must be shorter than the run")]
    EmptyVoteWindow,
    #[error("invalid parameter: {0}")]
    Invalid(&'static str),
    #[error("too many nodes of one kind (limit 65535)")]
    TooManyNodes,
}

impl ScenarioConfig {
    /// Counts and timing of the reference experiment: 195 relays, 3
    /// directories, 540 clients (200 voting, 200 visible), 210 bulk clients,
    /// 100 file servers, 10 ballot boxes, one hour with 30 idle minutes.
    pub fn paper_scale(kind: BehaviorKind) -> Self {
        let mut cfg = ScenarioConfig {
            topology: TopologyConfig {
                relays: 195,
                directories: 3,
                clients: 540,
                visible_clients: 200,
                voters: 200,
                bulk_clients: 210,
                file_servers: 100,
                web_servers: 0,
                ballot_boxes: 10,
            },
            behavior: BehaviorConfig {
                client_model: BehaviorModel::for_kind(kind),
                bulk_model: BehaviorModel::bulk(),
                web_profiles: default_web_profiles(),
                start_spread: Duration::from_secs(60),
                cell_payload_bytes: 498,
                response_rate: Dist::LogUniform { lo: 7.0, hi: 150.0 },
                download_timeout: Some(Duration::from_secs(40)),
                ack_interval: 2,
                vote_circuit: VoteCircuit::OnDemand,
                vote_circuit_lead: Duration::from_secs(10),
                browser_parallelism: 6,
                vote_margin: Duration::from_secs(60),
            },
            protocol: VoteProtocolSpec::DEFAULT,
            circuit: CircuitConfig::default(),
            network: NetworkConfig::default(),
            run: RunConfig {
                seed: 1,
                duration: Duration::from_secs(3600),
                warmup: Duration::from_secs(1800),
            },
        };
        if kind == BehaviorKind::Browser {
            cfg.topology.web_servers = 100;
        }
        cfg
    }

    /// Linear 1/10 scale of [`ScenarioConfig::paper_scale`] over ten minutes.
    pub fn desk_scale(kind: BehaviorKind) -> Self {
        let mut cfg = Self::paper_scale(kind);
        cfg.topology = TopologyConfig {
            relays: 20,
            directories: 1,
            clients: 54,
            visible_clients: 20,
            voters: 20,
            bulk_clients: 21,
            file_servers: 10,
            web_servers: if kind == BehaviorKind::Browser { 10 } else { 0 },
            ballot_boxes: 3,
        };
        cfg.run.duration = Duration::from_secs(600);
        cfg.run.warmup = Duration::from_secs(120);
        cfg.behavior.start_spread = Duration::from_secs(30);
        cfg
    }

    pub fn warmup_end(&self) -> crate::time::SimTime {
        crate::time::SimTime::ZERO + self.run.warmup
    }

    pub fn end(&self) -> crate::time::SimTime {
        crate::time::SimTime::ZERO + self.run.duration
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.topology;
        if t.voters > t.clients {
            return Err(ConfigError::TooManyVoters {
                voters: t.voters,
                clients: t.clients,
            });
        }
        if t.visible_clients > t.clients {
            return Err(ConfigError::TooManyVisible {
                visible: t.visible_clients,
                clients: t.clients,
            });
        }
        if t.ballot_boxes == 0 {
            return Err(ConfigError::NoBallotBox);
        }
        let max = u16::MAX as u32;
        if [
            t.relays,
            t.directories,
            t.clients,
            t.bulk_clients,
            t.file_servers,
            t.web_servers,
            t.ballot_boxes,
        ]
        .iter()
        .any(|&n| n > max)
        {
            return Err(ConfigError::TooManyNodes);
        }
        if self.circuit.hops == 0 {
            return Err(ConfigError::ZeroHops);
        }
        if self.circuit.hops > t.relays {
            return Err(ConfigError::InsufficientRelays {
                hops: self.circuit.hops,
                relays: t.relays,
            });
        }
        if self.circuit.hops > 16 {
            return Err(ConfigError::Invalid("circuit hops must be at most 16"));
        }
        let b = &self.behavior;
        let needs_files = |m: &BehaviorModel| matches!(m.kind, BehaviorKind::FileTransfer | BehaviorKind::Bulk);
        if t.clients > 0 && needs_files(&b.client_model) && t.file_servers == 0 {
            return Err(ConfigError::NoFileServer(b.client_model.kind.name()));
        }
        if t.bulk_clients > 0 && needs_files(&b.bulk_model) && t.file_servers == 0 {
            return Err(ConfigError::NoFileServer("bulk"));
        }
        let needs_web = (t.clients > 0 && b.client_model.kind == BehaviorKind::Browser)
            || (t.bulk_clients > 0 && b.bulk_model.kind == BehaviorKind::Browser);
        if needs_web && (t.web_servers == 0 || b.web_profiles.is_empty()) {
            return Err(ConfigError::NoWebServer);
        }
        for m in [&b.client_model, &b.bulk_model] {
            if !m.think.is_valid() || !m.object_bytes.is_valid() {
                return Err(ConfigError::Invalid("behavior distribution parameters"));
            }
        }
        if b.web_profiles.iter().any(|p| p.objects == 0) {
            return Err(ConfigError::Invalid("web profile with zero objects"));
        }
        if b.cell_payload_bytes == 0 {
            return Err(ConfigError::Invalid("cell payload bytes must be positive"));
        }
        if b.browser_parallelism == 0 {
            return Err(ConfigError::Invalid("browser parallelism must be positive"));
        }
        if !b.response_rate.is_valid() || b.response_rate.lower_bound() <= 0.0 {
            return Err(ConfigError::Invalid("server rate must be positive"));
        }
        if self.protocol.payload_packets == 0 {
            return Err(ConfigError::NoPayload);
        }
        let n = &self.network;
        if n.access_latency_min.is_zero() || n.access_latency_max < n.access_latency_min {
            return Err(ConfigError::Invalid("access latency range"));
        }
        if n.link_pps == Some(0) {
            return Err(ConfigError::Invalid("link bandwidth must be positive"));
        }
        if self.run.duration.is_zero() {
            return Err(ConfigError::Invalid("duration must be positive"));
        }
        if self.run.warmup >= self.run.duration {
            return Err(ConfigError::WarmupTooLong);
        }
        if t.voters > 0 && self.run.warmup + b.vote_margin >= self.run.duration {
            return Err(ConfigError::EmptyVoteWindow);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_counts() {
        let c = ScenarioConfig::paper_scale(BehaviorKind::FileTransfer);
        let t = &c.topology;
        assert_eq!(
            (t.relays, t.directories, t.clients, t.voters, t.visible_clients),
            (195, 3, 540, 200, 200)
        );
        assert_eq!((t.bulk_clients, t.file_servers, t.ballot_boxes), (210, 100, 10));
        assert_eq!(c.run.duration, Duration::from_secs(3600));
        assert_eq!(c.run.warmup, Duration::from_secs(1800));
        assert_eq!(ScenarioConfig::paper_scale(BehaviorKind::Browser).topology.web_servers, 100);
        c.validate().unwrap();
    }

    #[test]
    fn desk_scale_is_valid() {
        for k in [BehaviorKind::FileTransfer, BehaviorKind::Browser, BehaviorKind::VoteOnly] {
            ScenarioConfig::desk_scale(k).validate().unwrap();
        }
    }

    #[test]
    fn inconsistent_counts_are_rejected() {
        let mut c = ScenarioConfig::desk_scale(BehaviorKind::FileTransfer);
        c.topology.voters = 55;
        assert!(matches!(c.validate(), Err(ConfigError::TooManyVoters { .. })));
        let mut c = ScenarioConfig::desk_scale(BehaviorKind::FileTransfer);
        c.topology.ballot_boxes = 0;
        assert_eq!(c.validate(), Err(ConfigError::NoBallotBox));
        let mut c = ScenarioConfig::desk_scale(BehaviorKind::FileTransfer);
        c.topology.relays = 2;
        assert!(matches!(c.validate(), Err(ConfigError::InsufficientRelays { .. })));
        let mut c = ScenarioConfig::desk_scale(BehaviorKind::Browser);
        c.topology.web_servers = 0;
        assert_eq!(c.validate(), Err(ConfigError::NoWebServer));
    }

    #[test]
    fn civitas_adds_four_box_packets() {
        assert_eq!(
            VoteProtocolSpec::CIVITAS.box_link_packets(),
            VoteProtocolSpec::DEFAULT.box_link_packets() + 4
        );
    }

    #[test]
    fn browser_pages_are_lighter_than_files() {
        let profiles = default_web_profiles();
        assert_eq!(profiles.len(), 10);
        let web = BehaviorModel::browser().mean_transfer_bytes(&profiles);
        let file = BehaviorModel::file_transfer().mean_transfer_bytes(&profiles);
        assert!(web < file, "{web} vs {file}");
    }
}
