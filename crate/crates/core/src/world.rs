//! The simulated population: relays and directories, clients running a
//! behavior model, bulk clients, file and web servers, and ballot boxes.
//!
//! Clients reach servers through onion circuits. Between a client and its
//! exit every packet is an opaque cell; between the exit and a server the
//! exit speaks plain segments. Every delivered packet is handed to a
//! [`RecordSink`] at its arrival time.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::time::Duration;

use hashbrown::HashMap;
use rand::seq::index;
use rand::Rng;

use crate::addr::Addr;
use crate::capture::{PacketRecord, RecordSink};
use crate::config::{BehaviorKind, BehaviorModel, ConfigError, ScenarioConfig, VoteCircuit};
use crate::engine::{Event, EventKind, EventQueue, Link, LinkSpec, NodeId, Scheduler};
use crate::eval::VoteRecord;
use crate::rng::{RngSeed, SimRng};
use crate::time::{duration_nanos, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    Relay,
    Directory,
    Client,
    BulkClient,
    FileServer,
    WebServer,
    BallotBox,
}

impl NodeKind {
    fn class_octet(self) -> u8 {
        match self {
            NodeKind::Relay => 1,
            NodeKind::Directory => 2,
            NodeKind::Client => 10,
            NodeKind::BulkClient => 11,
            NodeKind::FileServer => 20,
            NodeKind::WebServer => 21,
            NodeKind::BallotBox => 30,
        }
    }
}

/// Address of the `index`-th node of a kind: `10.<class>.<hi>.<lo>` with a
/// one-based host number.
pub fn node_addr(kind: NodeKind, index: u32) -> Addr {
    let h = index + 1;
    Addr::new(10, kind.class_octet(), (h >> 8) as u8, h as u8)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeInfo {
    pub kind: NodeKind,
    pub addr: Addr,
    /// One-way latency of the node's access link.
    pub access_latency: Duration,
}

/// The instantiated population and the attacker-relevant address sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub nodes: Vec<NodeInfo>,
    pub visible_clients: BTreeSet<Addr>,
    pub voters: BTreeSet<Addr>,
    pub ballot_boxes: BTreeSet<Addr>,
}

impl Topology {
    pub fn addr(&self, id: NodeId) -> Addr {
        self.nodes[id.index()].addr
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn ids(&self, kind: NodeKind) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.kind == kind)
            .map(|(i, _)| NodeId(i as u32))
    }
}

/// Cells exchanged inside a circuit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    /// One setup round trip with hop `hop`.
    Setup { hop: u8 },
    Begin { conn: u32 },
    Connected { conn: u32 },
    Data { conn: u32 },
    End { conn: u32 },
    Ack { conn: u32 },
}

/// Packets between an exit relay and a server.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Syn,
    SynAck,
    Request,
    Response,
    Payload { idx: u32 },
    Ack { idx: u32 },
    Confirm,
    Fin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Body {
    /// `pos` is the receiving hop's index; ignored when the receiver is the
    /// circuit owner.
    Cell { circ: u32, pos: u8, fwd: bool, cell: Cell },
    Segment { conn: u32, seg: Segment },
    Directory { request: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Timer {
    Start,
    Think,
    BuildVoteCircuit,
    CastVote,
    ServerSend { conn: u32 },
    DirectorySync,
    DownloadTimeout { conn: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Msg {
    Packet { from: NodeId, body: Body },
    Timer(Timer),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    pub events: u64,
    /// Packets handed to a link.
    pub injected: u64,
    /// Packets that reached their destination (and were recorded).
    pub delivered: u64,
    /// Packets still on a link when the run ended.
    pub dropped_in_flight: u64,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub topology: Topology,
    /// One entry per vote, sorted by time.
    pub truth: Vec<VoteRecord>,
    pub stats: RunStats,
}

struct Circuit {
    owner: NodeId,
    hops: Vec<NodeId>,
    built: u8,
    round: u32,
    ready: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ConnKind {
    Download,
    Vote,
}

struct Conn {
    client: NodeId,
    server: NodeId,
    circ: u32,
    kind: ConnKind,
    /// Response cells the server sends.
    cells: u32,
    sent: u32,
    received: u32,
    /// Handshake rounds completed (votes).
    stage: u32,
    /// Spacing of server responses.
    gap: Duration,
    /// Abandoned by the client before completion.
    closed: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Purpose {
    Main,
    Vote,
}

struct VotePlan {
    ballot_box: NodeId,
    circ: Option<u32>,
    requested: bool,
    cast: bool,
}

struct PageLoad {
    server: NodeId,
    object_cells: u32,
    pending: u32,
    in_flight: u32,
}

struct ClientState {
    bulk: bool,
    main: Option<u32>,
    vote: Option<VotePlan>,
    page: Option<PageLoad>,
}

/// A configured scenario ready to run.
pub struct Simulation {
    cfg: ScenarioConfig,
    topology: Topology,
    rngs: Vec<SimRng>,
    links: HashMap<u64, Link>,
    circuits: Vec<Circuit>,
    conns: Vec<Conn>,
    clients: HashMap<u32, ClientState>,
    relays: Vec<NodeId>,
    directories: Vec<NodeId>,
    file_servers: Vec<NodeId>,
    web_servers: Vec<NodeId>,
    truth: Vec<VoteRecord>,
    stats: RunStats,
    initial: Vec<Event<Msg>>,
}

fn uniform_time<R: Rng + ?Sized>(rng: &mut R, lo: SimTime, hi: SimTime) -> SimTime {
    if hi <= lo {
        lo
    } else {
        SimTime::from_nanos(rng.random_range(lo.as_nanos()..=hi.as_nanos()))
    }
}

fn uniform_duration<R: Rng + ?Sized>(rng: &mut R, lo: Duration, hi: Duration) -> Duration {
    let (lo, hi) = (duration_nanos(lo), duration_nanos(hi));
    if hi <= lo {
        Duration::from_nanos(lo)
    } else {
        Duration::from_nanos(rng.random_range(lo..=hi))
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, from: &[NodeId]) -> NodeId {
    from[rng.random_range(0..from.len())]
}

fn cells_for(bytes: f64, cell_payload: u32) -> u32 {
    let cells = libm::ceil(bytes / cell_payload as f64);
    if cells < 1.0 {
        1
    } else if cells > u32::MAX as f64 {
        u32::MAX
    } else {
        cells as u32
    }
}

fn event(fire_time: SimTime, target: NodeId, kind: EventKind, payload: Msg) -> Event<Msg> {
    Event {
        fire_time,
        target,
        kind,
        payload,
    }
}

impl Simulation {
    /// Validates the configuration, instantiates every node, draws voters,
    /// visible clients, vote times and start times, and queues the initial
    /// timers.
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let seed = RngSeed(cfg.run.seed);
        let mut trng = seed.topology();
        let t = &cfg.topology;
        let net = &cfg.network;

        let groups = [
            (NodeKind::Relay, t.relays),
            (NodeKind::Directory, t.directories),
            (NodeKind::Client, t.clients),
            (NodeKind::BulkClient, t.bulk_clients),
            (NodeKind::FileServer, t.file_servers),
            (NodeKind::WebServer, t.web_servers),
            (NodeKind::BallotBox, t.ballot_boxes),
        ];
        let mut nodes = Vec::new();
        for (kind, n) in groups {
            for i in 0..n {
                nodes.push(NodeInfo {
                    kind,
                    addr: node_addr(kind, i),
                    access_latency: uniform_duration(&mut trng, net.access_latency_min, net.access_latency_max),
                });
            }
        }
        let ids = |kind: NodeKind| -> Vec<NodeId> {
            nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| n.kind == kind)
                .map(|(i, _)| NodeId(i as u32))
                .collect()
        };
        let relays = ids(NodeKind::Relay);
        let directories = ids(NodeKind::Directory);
        let client_ids = ids(NodeKind::Client);
        let bulk_ids = ids(NodeKind::BulkClient);
        let file_servers = ids(NodeKind::FileServer);
        let web_servers = ids(NodeKind::WebServer);
        let boxes = ids(NodeKind::BallotBox);

        let mut voter_idx = index::sample(&mut trng, client_ids.len(), t.voters as usize).into_vec();
        voter_idx.sort_unstable();
        let mut visible_idx = index::sample(&mut trng, client_ids.len(), t.visible_clients as usize).into_vec();
        visible_idx.sort_unstable();

        let warm_end = cfg.warmup_end();
        let end = cfg.end();
        let b = &cfg.behavior;
        let vote_hi = end.checked_sub(b.vote_margin).unwrap_or(warm_end);
        let mut initial = Vec::new();
        let mut clients = HashMap::new();

        for &id in client_ids.iter().chain(&bulk_ids) {
            let bulk = nodes[id.index()].kind == NodeKind::BulkClient;
            let model = if bulk { &b.bulk_model } else { &b.client_model };
            let start = warm_end + uniform_duration(&mut trng, Duration::ZERO, b.start_spread);
            if model.kind != BehaviorKind::VoteOnly {
                initial.push(event(start, id, EventKind::BehaviorTrigger, Msg::Timer(Timer::Start)));
            }
            clients.insert(
                id.0,
                ClientState {
                    bulk,
                    main: None,
                    vote: None,
                    page: None,
                },
            );
        }
        for &vi in &voter_idx {
            let id = client_ids[vi];
            let ballot_box = pick(&mut trng, &boxes);
            let at = uniform_time(&mut trng, warm_end, vote_hi);
            if b.vote_circuit == VoteCircuit::Prebuilt {
                let build = at.checked_sub(b.vote_circuit_lead).unwrap_or(SimTime::ZERO);
                initial.push(event(build, id, EventKind::Timer, Msg::Timer(Timer::BuildVoteCircuit)));
            }
            initial.push(event(at, id, EventKind::BehaviorTrigger, Msg::Timer(Timer::CastVote)));
            clients.get_mut(&id.0).unwrap().vote = Some(VotePlan {
                ballot_box,
                circ: None,
                requested: false,
                cast: false,
            });
        }
        if !directories.is_empty() {
            let sync_hi = SimTime::ZERO + cfg.run.warmup.min(Duration::from_secs(60));
            for &r in &relays {
                let at = uniform_time(&mut trng, SimTime::ZERO, sync_hi);
                initial.push(event(at, r, EventKind::Timer, Msg::Timer(Timer::DirectorySync)));
            }
        }
        initial.sort_by_key(|e| e.fire_time);

        let topology = Topology {
            visible_clients: visible_idx.iter().map(|&i| nodes[client_ids[i].index()].addr).collect(),
            voters: voter_idx.iter().map(|&i| nodes[client_ids[i].index()].addr).collect(),
            ballot_boxes: boxes.iter().map(|id| nodes[id.index()].addr).collect(),
            nodes,
        };
        let rngs = (0..topology.nodes.len() as u32).map(|i| seed.node(NodeId(i))).collect();

        Ok(Simulation {
            cfg: cfg.clone(),
            topology,
            rngs,
            links: HashMap::new(),
            circuits: Vec::new(),
            conns: Vec::new(),
            clients,
            relays,
            directories,
            file_servers,
            web_servers,
            truth: Vec::new(),
            stats: RunStats::default(),
            initial,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    /// Events to seed the queue with, in scheduling order. Taking them leaves
    /// the list empty.
    pub fn take_initial_events(&mut self) -> Vec<Event<Msg>> {
        core::mem::take(&mut self.initial)
    }

    /// Runs to the configured end, feeding every delivered packet to `sink`.
    pub fn run<S: RecordSink>(mut self, sink: &mut S) -> SimOutput {
        let mut queue = EventQueue::new();
        for e in self.take_initial_events() {
            queue.schedule(e).expect("initial events are not in the past");
        }
        let end = self.cfg.end();
        let mut driver = Driver { sim: &mut self, sink };
        let events = crate::engine::run(&mut queue, &mut driver, end);
        let in_flight = queue
            .drain()
            .filter(|e| e.kind == EventKind::PacketArrival)
            .count() as u64;
        sink.finish();
        self.finish(events, in_flight)
    }

    /// Closes the run: records event and in-flight counts and sorts the ground truth.
    pub fn finish(mut self, events: u64, in_flight: u64) -> SimOutput {
        self.stats.events = events;
        self.stats.dropped_in_flight = in_flight;
        self.truth.sort_by(|a, b| (a.time, a.client).cmp(&(b.time, b.client)));
        SimOutput {
            topology: self.topology,
            truth: self.truth,
            stats: self.stats,
        }
    }

    /// Processes one event.
    pub fn handle<Q: Scheduler<Msg>, S: RecordSink>(&mut self, q: &mut Q, ev: Event<Msg>, sink: &mut S) {
        let node = ev.target;
        match ev.payload {
            Msg::Packet { from, body } => {
                self.stats.delivered += 1;
                sink.record(PacketRecord::new(ev.fire_time, self.topology.addr(from), self.topology.addr(node)));
                self.on_packet(q, node, from, body);
            }
            Msg::Timer(t) => self.on_timer(q, node, t),
        }
    }

    fn kind(&self, id: NodeId) -> NodeKind {
        self.topology.nodes[id.index()].kind
    }

    fn send<Q: Scheduler<Msg>>(&mut self, q: &mut Q, from: NodeId, to: NodeId, at: SimTime, body: Body) {
        let (lo, hi) = if from < to { (from, to) } else { (to, from) };
        let key = ((lo.0 as u64) << 32) | hi.0 as u64;
        let link = match self.links.get_mut(&key) {
            Some(l) => l,
            None => {
                let nodes = &self.topology.nodes;
                let spec = LinkSpec {
                    base_latency: nodes[lo.index()].access_latency + nodes[hi.index()].access_latency,
                    jitter: self.cfg.network.jitter,
                    pps: self.cfg.network.link_pps,
                };
                self.links
                    .entry(key)
                    .or_insert(Link::new(lo, hi, spec).expect("valid link"))
            }
        };
        let arrival = link
            .deliver(from, at, &mut self.rngs[from.index()])
            .expect("sender is a link endpoint");
        self.stats.injected += 1;
        q.push(arrival, to, EventKind::PacketArrival, Msg::Packet { from, body });
    }

    fn relay_time<Q: Scheduler<Msg>>(&self, q: &Q) -> SimTime {
        q.now() + self.cfg.network.relay_delay
    }

    fn server_time<Q: Scheduler<Msg>>(&self, q: &Q) -> SimTime {
        q.now() + self.cfg.network.server_delay
    }

    fn model(&self, client: NodeId) -> &BehaviorModel {
        if self.clients[&client.0].bulk {
            &self.cfg.behavior.bulk_model
        } else {
            &self.cfg.behavior.client_model
        }
    }

    // ---- timers ----

    fn on_timer<Q: Scheduler<Msg>>(&mut self, q: &mut Q, node: NodeId, t: Timer) {
        match t {
            Timer::Start => self.build_circuit(q, node, Purpose::Main),
            Timer::DownloadTimeout { conn } => {
                let c = &mut self.conns[conn as usize];
                if !c.closed && c.received < c.cells {
                    c.closed = true;
                    let circ = c.circ;
                    self.client_cell(q, circ, Cell::End { conn });
                    self.download_done(q, node);
                }
            }
            Timer::Think => self.next_request(q, node),
            Timer::BuildVoteCircuit => self.build_circuit(q, node, Purpose::Vote),
            Timer::CastVote => self.request_vote(q, node),
            Timer::ServerSend { conn } => self.server_send(q, node, conn),
            Timer::DirectorySync => {
                let dir = pick(&mut self.rngs[node.index()], &self.directories);
                let at = q.now();
                self.send(q, node, dir, at, Body::Directory { request: true });
            }
        }
    }

    // ---- circuits ----


    /// Starts building a circuit and registers it with the owner before any
    /// setup cell leaves.
    fn build_circuit<Q: Scheduler<Msg>>(&mut self, q: &mut Q, owner: NodeId, purpose: Purpose) {
        let hops = self.cfg.circuit.hops as usize;
        let rng = &mut self.rngs[owner.index()];
        let hops: Vec<NodeId> = index::sample(rng, self.relays.len(), hops)
            .into_iter()
            .map(|i| self.relays[i])
            .collect();
        let id = self.circuits.len() as u32;
        let entry = hops[0];
        self.circuits.push(Circuit {
            owner,
            hops,
            built: 0,
            round: 0,
            ready: false,
        });
        let st = self.clients.get_mut(&owner.0).unwrap();
        match purpose {
            Purpose::Main => st.main = Some(id),
            Purpose::Vote => {
                if let Some(v) = st.vote.as_mut() {
                    v.circ = Some(id);
                }
            }
        }
        if self.cfg.circuit.setup_round_trips == 0 {
            self.circuits[id as usize].ready = true;
            self.on_circuit_ready(q, owner, id);
        } else {
            let at = q.now();
            self.send_cell(q, owner, entry, at, id, 0, true, Cell::Setup { hop: 0 });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn send_cell<Q: Scheduler<Msg>>(
        &mut self,
        q: &mut Q,
        from: NodeId,
        to: NodeId,
        at: SimTime,
        circ: u32,
        pos: u8,
        fwd: bool,
        cell: Cell,
    ) {
        self.send(q, from, to, at, Body::Cell { circ, pos, fwd, cell });
    }

    /// Sends a cell from the owner into its circuit.
    fn client_cell<Q: Scheduler<Msg>>(&mut self, q: &mut Q, circ: u32, cell: Cell) {
        let c = &self.circuits[circ as usize];
        let (owner, entry) = (c.owner, c.hops[0]);
        let at = q.now();
        self.send_cell(q, owner, entry, at, circ, 0, true, cell);
    }

    /// Sends a cell from the exit back towards the owner.
    fn exit_cell<Q: Scheduler<Msg>>(&mut self, q: &mut Q, circ: u32, at: SimTime, cell: Cell) {
        let c = &self.circuits[circ as usize];
        let last = c.hops.len() - 1;
        self.backward(q, circ, last as u8, at, cell);
    }

    fn backward<Q: Scheduler<Msg>>(&mut self, q: &mut Q, circ: u32, pos: u8, at: SimTime, cell: Cell) {
        let c = &self.circuits[circ as usize];
        let me = c.hops[pos as usize];
        let (to, next_pos) = if pos == 0 {
            (c.owner, 0)
        } else {
            (c.hops[pos as usize - 1], pos - 1)
        };
        self.send_cell(q, me, to, at, circ, next_pos, false, cell);
    }

    fn on_circuit_ready<Q: Scheduler<Msg>>(&mut self, q: &mut Q, owner: NodeId, circ: u32) {
        let st = &self.clients[&owner.0];
        if st.main == Some(circ) {
            self.next_request(q, owner);
        }
        let st = &self.clients[&owner.0];
        let vote_waiting = st
            .vote
            .as_ref()
            .is_some_and(|v| v.circ == Some(circ) && v.requested && !v.cast);
        if vote_waiting {
            self.send_vote(q, owner, circ);
        }
    }

    // ---- client behavior ----

    fn next_request<Q: Scheduler<Msg>>(&mut self, q: &mut Q, client: NodeId) {
        let Some(circ) = self.clients[&client.0].main else { return };
        let model = self.model(client).clone();
        match model.kind {
            BehaviorKind::VoteOnly => {}
            BehaviorKind::FileTransfer | BehaviorKind::Bulk => {
                let rng = &mut self.rngs[client.index()];
                let server = pick(rng, &self.file_servers);
                let bytes = model.object_bytes.sample(rng);
                let cells = cells_for(bytes, self.cfg.behavior.cell_payload_bytes);
                self.open_download(q, client, server, circ, cells);
            }
            BehaviorKind::Browser => {
                let rng = &mut self.rngs[client.index()];
                let profiles = &self.cfg.behavior.web_profiles;
                let profile = &profiles[rng.random_range(0..profiles.len())];
                let server = pick(rng, &self.web_servers);
                let per_object = profile.page_bytes as f64 / profile.objects as f64;
                let object_cells = cells_for(per_object, self.cfg.behavior.cell_payload_bytes);
                self.clients.get_mut(&client.0).unwrap().page = Some(PageLoad {
                    server,
                    object_cells,
                    pending: profile.objects - 1,
                    in_flight: 1,
                });
                // The document first, then its embedded objects.
                self.open_download(q, client, server, circ, object_cells);
            }
        }
    }

    fn open_download<Q: Scheduler<Msg>>(&mut self, q: &mut Q, client: NodeId, server: NodeId, circ: u32, cells: u32) {
        let conn = self.conns.len() as u32;
        let rate = self.cfg.behavior.response_rate.sample(&mut self.rngs[client.index()]);
        self.conns.push(Conn {
            client,
            server,
            circ,
            kind: ConnKind::Download,
            cells,
            sent: 0,
            received: 0,
            stage: 0,
            gap: Duration::from_secs_f64(1.0 / rate),
            closed: false,
        });
        if let Some(limit) = self.cfg.behavior.download_timeout {
            let at = q.now() + limit;
            q.push(at, client, EventKind::Timer, Msg::Timer(Timer::DownloadTimeout { conn }));
        }
        self.client_cell(q, circ, Cell::Begin { conn });
    }

    fn download_done<Q: Scheduler<Msg>>(&mut self, q: &mut Q, client: NodeId) {
        let parallel = self.cfg.behavior.browser_parallelism;
        let st = self.clients.get_mut(&client.0).unwrap();
        if let Some(page) = st.page.as_mut() {
            page.in_flight -= 1;
            let mut opens = Vec::new();
            while page.pending > 0 && page.in_flight < parallel {
                page.pending -= 1;
                page.in_flight += 1;
                opens.push((page.server, page.object_cells));
            }
            let finished = page.in_flight == 0;
            if finished {
                st.page = None;
            }
            let circ = st.main.unwrap();
            for (server, cells) in opens {
                self.open_download(q, client, server, circ, cells);
            }
            if !finished {
                return;
            }
        }
        let think = self.model(client).think;
        let wait = think.sample_secs(&mut self.rngs[client.index()]);
        let at = q.now() + wait;
        q.push(at, client, EventKind::BehaviorTrigger, Msg::Timer(Timer::Think));
    }

    // ---- voting ----

    fn request_vote<Q: Scheduler<Msg>>(&mut self, q: &mut Q, client: NodeId) {
        let mode = self.cfg.behavior.vote_circuit;
        let st = self.clients.get_mut(&client.0).unwrap();
        let main = st.main;
        let Some(plan) = st.vote.as_mut() else { return };
        plan.requested = true;
        let shared = match (mode, main) {
            (VoteCircuit::Shared, Some(m)) if self.circuits[m as usize].ready => Some(m),
            _ => None,
        };
        if let Some(m) = shared {
            plan.circ = Some(m);
            self.send_vote(q, client, m);
            return;
        }
        match plan.circ {
            Some(c) if self.circuits[c as usize].ready => self.send_vote(q, client, c),
            Some(_) => {}
            None => self.build_circuit(q, client, Purpose::Vote),
        }
    }

    fn send_vote<Q: Scheduler<Msg>>(&mut self, q: &mut Q, client: NodeId, circ: u32) {
        let plan = self.clients.get_mut(&client.0).unwrap().vote.as_mut().unwrap();
        if plan.cast {
            return;
        }
        plan.cast = true;
        plan.circ = Some(circ);
        let server = plan.ballot_box;
        let conn = self.conns.len() as u32;
        self.conns.push(Conn {
            client,
            server,
            circ,
            kind: ConnKind::Vote,
            cells: 0,
            sent: 0,
            received: 0,
            stage: 0,
            gap: Duration::ZERO,
            closed: false,
        });
        if self.cfg.protocol.handshake_packets > 0 {
            self.client_cell(q, circ, Cell::Begin { conn });
        } else {
            self.send_ballot(q, conn);
        }
    }

    fn send_ballot<Q: Scheduler<Msg>>(&mut self, q: &mut Q, conn: u32) {
        let (client, server, circ) = {
            let c = &self.conns[conn as usize];
            (c.client, c.server, c.circ)
        };
        self.truth.push(VoteRecord {
            client: self.topology.addr(client),
            time: q.now(),
            ballot_box: self.topology.addr(server),
        });
        self.client_cell(q, circ, Cell::Data { conn });
        if self.cfg.protocol.confirmation_packets == 0 {
            self.client_cell(q, circ, Cell::End { conn });
        }
    }

    // ---- packets ----

    fn on_packet<Q: Scheduler<Msg>>(&mut self, q: &mut Q, node: NodeId, from: NodeId, body: Body) {
        match (self.kind(node), body) {
            (NodeKind::Relay, Body::Cell { circ, pos, fwd, cell }) => self.relay_cell(q, circ, pos, fwd, cell),
            (NodeKind::Relay, Body::Segment { conn, seg }) => self.exit_segment(q, conn, seg),
            (NodeKind::Relay, Body::Directory { .. }) => {}
            (NodeKind::Directory, Body::Directory { request: true }) => {
                let at = self.server_time(q);
                self.send(q, node, from, at, Body::Directory { request: false });
            }
            (NodeKind::Client | NodeKind::BulkClient, Body::Cell { circ, cell, .. }) => self.client_receive(q, node, circ, cell),
            (NodeKind::FileServer | NodeKind::WebServer, Body::Segment { conn, seg }) => {
                match seg {
                    Segment::Request => {
                        let at = self.server_time(q);
                        q.push(at, node, EventKind::Timer, Msg::Timer(Timer::ServerSend { conn }));
                    }
                    Segment::Fin => self.conns[conn as usize].closed = true,
                    _ => {}
                }
            }
            (NodeKind::BallotBox, Body::Segment { conn, seg }) => self.box_segment(q, node, from, conn, seg),
            _ => {}
        }
    }

    fn relay_cell<Q: Scheduler<Msg>>(&mut self, q: &mut Q, circ: u32, pos: u8, fwd: bool, cell: Cell) {
        let at = self.relay_time(q);
        if !fwd {
            self.backward(q, circ, pos, at, cell);
            return;
        }
        let c = &self.circuits[circ as usize];
        let last = (c.hops.len() - 1) as u8;
        match cell {
            Cell::Setup { hop } if hop == pos => {
                let at = at + self.cfg.network.setup_delay;
                self.backward(q, circ, pos, at, cell);
            }
            _ if pos < last => {
                let (me, next) = (c.hops[pos as usize], c.hops[pos as usize + 1]);
                self.send_cell(q, me, next, at, circ, pos + 1, true, cell);
            }
            _ => self.exit_cell_from_client(q, circ, at, cell),
        }
    }

    fn exit_of(&self, conn: u32) -> NodeId {
        let c = &self.conns[conn as usize];
        *self.circuits[c.circ as usize].hops.last().unwrap()
    }

    fn to_server<Q: Scheduler<Msg>>(&mut self, q: &mut Q, conn: u32, at: SimTime, seg: Segment) {
        let exit = self.exit_of(conn);
        let server = self.conns[conn as usize].server;
        self.send(q, exit, server, at, Body::Segment { conn, seg });
    }

    fn exit_cell_from_client<Q: Scheduler<Msg>>(&mut self, q: &mut Q, _circ: u32, at: SimTime, cell: Cell) {
        let p = self.cfg.protocol;
        match cell {
            Cell::Begin { conn } => match self.conns[conn as usize].kind {
                ConnKind::Download => self.to_server(q, conn, at, Segment::Request),
                ConnKind::Vote => self.to_server(q, conn, at, Segment::Syn),
            },
            Cell::Data { conn } if self.conns[conn as usize].kind == ConnKind::Vote => {
                if p.ack_per_payload {
                    self.to_server(q, conn, at, Segment::Payload { idx: 0 });
                } else {
                    for idx in 0..p.payload_packets {
                        self.to_server(q, conn, at, Segment::Payload { idx });
                    }
                }
            }
            Cell::End { conn } => {
                let n = match self.conns[conn as usize].kind {
                    ConnKind::Download => 1,
                    ConnKind::Vote => p.teardown_packets,
                };
                for _ in 0..n {
                    self.to_server(q, conn, at, Segment::Fin);
                }
            }
            _ => {}
        }
    }

    fn exit_segment<Q: Scheduler<Msg>>(&mut self, q: &mut Q, conn: u32, seg: Segment) {
        let at = self.relay_time(q);
        let circ = self.conns[conn as usize].circ;
        match seg {
            Segment::Response | Segment::Confirm => self.exit_cell(q, circ, at, Cell::Data { conn }),
            Segment::SynAck => {
                let c = &mut self.conns[conn as usize];
                c.stage += 1;
                if c.stage < self.cfg.protocol.handshake_packets {
                    self.to_server(q, conn, at, Segment::Syn);
                } else {
                    self.exit_cell(q, circ, at, Cell::Connected { conn });
                }
            }
            Segment::Ack { idx } => {
                if idx + 1 < self.cfg.protocol.payload_packets {
                    self.to_server(q, conn, at, Segment::Payload { idx: idx + 1 });
                }
            }
            _ => {}
        }
    }

    fn server_send<Q: Scheduler<Msg>>(&mut self, q: &mut Q, server: NodeId, conn: u32) {
        if self.conns[conn as usize].closed {
            return;
        }
        let exit = self.exit_of(conn);
        let now = q.now();
        self.send(q, server, exit, now, Body::Segment { conn, seg: Segment::Response });
        let c = &mut self.conns[conn as usize];
        c.sent += 1;
        if c.sent < c.cells {
            q.push(now + c.gap, server, EventKind::Timer, Msg::Timer(Timer::ServerSend { conn }));
        }
    }

    fn box_segment<Q: Scheduler<Msg>>(&mut self, q: &mut Q, node: NodeId, from: NodeId, conn: u32, seg: Segment) {
        let p = self.cfg.protocol;
        let at = self.server_time(q);
        match seg {
            Segment::Syn => self.send(q, node, from, at, Body::Segment { conn, seg: Segment::SynAck }),
            Segment::Payload { idx } if idx + 1 < p.payload_packets => {
                if p.ack_per_payload {
                    self.send(q, node, from, at, Body::Segment { conn, seg: Segment::Ack { idx } });
                }
            }
            Segment::Payload { .. } => {
                for _ in 0..p.confirmation_packets {
                    self.send(q, node, from, at, Body::Segment { conn, seg: Segment::Confirm });
                }
            }
            _ => {}
        }
    }

    fn client_receive<Q: Scheduler<Msg>>(&mut self, q: &mut Q, client: NodeId, circ: u32, cell: Cell) {
        match cell {
            Cell::Setup { .. } => {
                let rts = self.cfg.circuit.setup_round_trips;
                let c = &mut self.circuits[circ as usize];
                c.round += 1;
                if c.round >= rts {
                    c.round = 0;
                    c.built += 1;
                }
                if (c.built as usize) < c.hops.len() {
                    let hop = c.built;
                    self.client_cell(q, circ, Cell::Setup { hop });
                } else {
                    c.ready = true;
                    self.on_circuit_ready(q, client, circ);
                }
            }
            Cell::Connected { conn } => self.send_ballot(q, conn),
            Cell::Data { conn } => {
                let interval = self.cfg.behavior.ack_interval;
                let c = &mut self.conns[conn as usize];
                if c.closed {
                    return;
                }
                c.received += 1;
                let (received, cells) = (c.received, c.cells);
                match c.kind {
                    ConnKind::Download => {
                        if interval > 0 && received % interval == 0 {
                            self.client_cell(q, circ, Cell::Ack { conn });
                        }
                        if received == cells {
                            self.client_cell(q, circ, Cell::End { conn });
                            self.download_done(q, client);
                        }
                    }
                    ConnKind::Vote => {
                        if received == self.cfg.protocol.confirmation_packets {
                            self.client_cell(q, circ, Cell::End { conn });
                        }
                    }
                }
            }
            _ => {}
        }
    }
}

struct Driver<'a, S> {
    sim: &'a mut Simulation,
    sink: &'a mut S,
}

impl<S: RecordSink> crate::engine::Handler<Msg> for Driver<'_, S> {
    fn handle<Q: Scheduler<Msg>>(&mut self, queue: &mut Q, event: Event<Msg>) {
        self.sim.handle(queue, event, self.sink);
    }
}

/// Runs a scenario and collects every delivered packet.
pub fn simulate(cfg: &ScenarioConfig) -> Result<(SimOutput, Vec<PacketRecord>), ConfigError> {
    let sim = Simulation::new(cfg)?;
    let mut log = Vec::new();
    let out = sim.run(&mut log);
    Ok((out, log))
}

/// The smallest scenario that exercises one vote: one client that votes and
/// is visible, one ballot box, just enough relays, nothing else.
pub fn toy_scenario(base: &ScenarioConfig) -> ScenarioConfig {
    let mut cfg = base.clone();
    let hops = cfg.circuit.hops.max(1);
    cfg.topology = crate::config::TopologyConfig {
        relays: hops,
        directories: 0,
        clients: 1,
        visible_clients: 1,
        voters: 1,
        bulk_clients: 0,
        file_servers: 0,
        web_servers: 0,
        ballot_boxes: 1,
    };
    cfg.behavior.client_model = BehaviorModel::vote_only();
    cfg.run.warmup = Duration::from_secs(1);
    cfg.behavior.vote_margin = Duration::from_secs(30);
    cfg.run.duration = Duration::from_secs(40);
    cfg
}
