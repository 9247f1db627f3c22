//! Deterministic discrete-event network simulator.
//!
//! A [`World`] is built from a scenario and runs a single event queue keyed
//! by `(at, seq)`: events at the same timestamp execute in insertion order,
//! so a run is a pure function of the scenario and the seed. All randomness
//! (link loss, grey-hole drops, handshake entropy, payload bytes) comes from
//! ChaCha8 streams split per node, per link, and per adversary, keyed by
//! hashing the seed with a stable label.
//!
//! Consensus traffic and ledger pulls route over shortest paths in the
//! current topology (explicit links, vehicle attachments, and the implicit
//! validator mesh). Application traffic (handshakes, sealed records) routes
//! through the sender's name-resolution cache, so stale or missing records
//! are visible as routing failures.
//!
//! Delivery to a final destination lands in a bounded per-node inbox drained
//! at a fixed per-tick budget; flooding a node evicts the oldest entries,
//! which is how denial-of-service pressure manifests.

pub mod trace;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bisa::{
    self, EndpointIdentity, HandshakeError, HandshakeMessage, HandshakeStep, PendingHandshake,
    SessionContext, SessionError, WireRecord,
};
use crate::crypto::{CryptoProvider, Digest32, Provider};
use crate::dbnr::{DbnrError, DbnrRecord, Layer, Locator, ResolverCache, RouteEndpoint, Topology};
use crate::ledger::{
    Block, BlockchainAddress, LedgerState, LedgerTransaction, Role, TxPayload,
};
use crate::pbft::{
    ConsensusMessage, Output, ReplicaState, ReplyCollector, RequestMsg, ValidatorSetConfig,
};
use crate::scenario::{
    Action, AdversaryKind, AdversarySpec, NodeKindSpec, Scenario, SimOptions, TamperStrategy,
};
use crate::sim::trace::{NodeInfo, TraceLine, TRACE_SCHEMA_VERSION};
use crate::vehicle::{
    decision_filter, encode_bus_payload, CandidateInput, ComponentDescriptor, IngressError,
    Sensitivity, VehicleBus,
};

// ---------------------------------------------------------------------------
// messages and envelopes
// ---------------------------------------------------------------------------

/// Everything that can cross a link.
#[derive(Debug, Clone)]
pub enum NetMsg {
    Consensus(Box<ConsensusMessage>),
    Handshake(Box<HandshakeMessage>),
    Sealed(WireRecord),
    /// Ask a validator for its ledger state.
    LedgerPull,
    LedgerSnapshot(Box<LedgerState>),
    /// Unauthenticated plaintext (outside any session).
    Plain(Vec<u8>),
    /// Denial-of-service filler.
    Junk,
}

impl NetMsg {
    fn kind(&self) -> String {
        match self {
            NetMsg::Consensus(m) => format!("consensus/{}", m.kind_name()),
            NetMsg::Handshake(m) => match m.step {
                HandshakeStep::Hello => "handshake/hello".into(),
                HandshakeStep::Response => "handshake/response".into(),
                HandshakeStep::Confirm => "handshake/confirm".into(),
            },
            NetMsg::Sealed(_) => "sealed".into(),
            NetMsg::LedgerPull => "ledger_pull".into(),
            NetMsg::LedgerSnapshot(_) => "ledger_snapshot".into(),
            NetMsg::Plain(_) => "plain".into(),
            NetMsg::Junk => "junk".into(),
        }
    }
}

/// One message in flight along a precomputed node path. `path[0]` is the
/// origin; `hop` indexes the node currently holding the envelope.
#[derive(Debug, Clone)]
pub struct Envelope {
    pub id: u64,
    pub origin: String,
    pub sent_at: u64,
    pub path: Vec<String>,
    pub hop: usize,
    pub msg: NetMsg,
}

#[derive(Debug)]
enum EventKind {
    Deliver(Envelope),
    /// Drain one processing-budget slice of a node's inbox.
    Tick(String),
    Timer { node: String, timer_id: u64 },
    Register(String),
    RefreshPull(String),
    Waypoint { node: String, attach: String },
    Crash(String),
    Workload(Action),
    /// One tick of DoS/DDoS junk injection for adversary `idx`.
    AdvInject(usize),
    /// Start-of-window actions for sybil/impersonation adversary `idx`.
    AdvLaunch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("event scheduled in the past")]
    PastEvent,
}

// ---------------------------------------------------------------------------
// nodes and metrics
// ---------------------------------------------------------------------------

struct Node {
    id: String,
    kind: NodeKindSpec,
    identity: EndpointIdentity,
    replica: Option<ReplicaState>,
    bus: Option<VehicleBus>,
    exported_components: Vec<String>,
    ledger_view: LedgerState,
    resolver: ResolverCache,
    sessions: BTreeMap<BlockchainAddress, SessionContext>,
    pending_hs: BTreeMap<BlockchainAddress, PendingHandshake>,
    collectors: BTreeMap<Digest32, ReplyCollector>,
    accepted_requests: BTreeSet<Digest32>,
    inputs: Vec<CandidateInput>,
    attachment: Option<String>,
    inbox: VecDeque<Envelope>,
    tick_scheduled: bool,
    crashed: bool,
    adversary: bool,
    next_request_id: u64,
    /// next version for this node's own primary-layer record
    next_record_version: u64,
    /// processing budget already spent in the current time unit
    budget_at: u64,
    budget_used: usize,
    rng: ChaCha8Rng,
}

impl Node {
    fn draw32(&mut self) -> [u8; 32] {
        let mut buf = [0u8; 32];
        self.rng.fill_bytes(&mut buf);
        buf
    }

    fn own_locator(&self) -> Locator {
        Locator {
            layer: Layer::Primary,
            attachment: self.attachment.clone().unwrap_or_else(|| self.id.clone()),
        }
    }
}

/// Counters and derived ratios accumulated over a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub counters: BTreeMap<String, u64>,
    pub ratios: BTreeMap<String, f64>,
}

impl Metrics {
    pub fn bump(&mut self, key: &str) {
        self.add(key, 1);
    }

    pub fn add(&mut self, key: &str, n: u64) {
        *self.counters.entry(key.to_string()).or_insert(0) += n;
    }

    pub fn get(&self, key: &str) -> u64 {
        self.counters.get(key).copied().unwrap_or(0)
    }

    pub fn set_max(&mut self, key: &str, v: u64) {
        let entry = self.counters.entry(key.to_string()).or_insert(0);
        if v > *entry {
            *entry = v;
        }
    }
}

struct AdversaryRt {
    spec: AdversarySpec,
    label: String,
    rng: ChaCha8Rng,
}

impl AdversaryRt {
    fn active(&self, now: u64) -> bool {
        now >= self.spec.start && now < self.spec.end
    }
}

/// Everything a finished run hands back to the scenario runner.
pub struct RunOutcome {
    pub trace: Vec<TraceLine>,
    pub metrics: Metrics,
    pub genesis_json: String,
    /// per-validator JSONL decision logs
    pub decision_logs: BTreeMap<String, String>,
}

// ---------------------------------------------------------------------------
// the world
// ---------------------------------------------------------------------------

pub struct World {
    now: u64,
    next_seq: u64,
    next_msg_id: u64,
    t_end: u64,
    queue: BTreeMap<(u64, u64), EventKind>,
    nodes: BTreeMap<String, Node>,
    node_ids: BTreeSet<String>,
    links: BTreeMap<(String, String), (u64, f64)>,
    link_rngs: BTreeMap<(String, String), ChaCha8Rng>,
    attachments: BTreeMap<String, String>,
    validators: Vec<String>,
    cfg: ValidatorSetConfig,
    addr_to_node: BTreeMap<BlockchainAddress, String>,
    adversaries: Vec<AdversaryRt>,
    adversary_nodes: BTreeSet<String>,
    fake_addrs: BTreeSet<BlockchainAddress>,
    forged_txs: BTreeSet<Digest32>,
    options: SimOptions,
    trace: Vec<TraceLine>,
    metrics: Metrics,
    latencies: Vec<u64>,
    genesis_json: String,
}

fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let key = Provider::kdf("sim-stream", &[&seed.to_le_bytes(), label.as_bytes()]);
    ChaCha8Rng::from_seed(key)
}

fn node_key_label(id: &str) -> String {
    format!("node/{id}")
}

fn role_for(kind: NodeKindSpec) -> Role {
    match kind {
        NodeKindSpec::Rsu => Role::Rsu,
        NodeKindSpec::EdgeServer => Role::EdgeServer,
        NodeKindSpec::CloudServer => Role::CloudServer,
        NodeKindSpec::Vehicle | NodeKindSpec::Pedestrian => Role::Vehicle,
    }
}

fn link_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

fn handshake_cause(e: &HandshakeError) -> &'static str {
    match e {
        HandshakeError::UnknownIdentity => "unknown_identity",
        HandshakeError::RevokedLocal => "revoked_local",
        HandshakeError::AddrMismatch => "addr_mismatch",
        HandshakeError::NonceMismatch => "nonce_mismatch",
        HandshakeError::BadTranscriptSig => "bad_transcript_sig",
        HandshakeError::MalformedMessage => "malformed",
    }
}

fn session_cause(e: &SessionError) -> &'static str {
    match e {
        SessionError::AuthFail => "auth",
        SessionError::ReplayDetected => "replay",
        SessionError::NotEstablished => "not_established",
    }
}

impl Topology for World {
    fn has_node(&self, id: &str) -> bool {
        self.node_ids.contains(id)
    }

    fn attachment_rsu_of(&self, vehicle: &str) -> Option<String> {
        self.attachments.get(vehicle).cloned()
    }
}

impl World {
    pub fn new(scenario: &Scenario, seed: u64) -> World {
        let options = scenario.options.clone();

        // identity keys are a pure function of the node id, so the same
        // scenario keeps the same addresses across seeds
        let mut keys = BTreeMap::new();
        for spec in &scenario.nodes {
            keys.insert(
                spec.id.clone(),
                Provider::signing_key_from_seed(node_key_label(&spec.id).as_bytes()),
            );
        }

        // genesis: validator identities plus their primary-layer records
        let mut genesis_txs = Vec::new();
        let mut validator_addrs = Vec::new();
        let mut genesis_validators = Vec::new();
        for vid in &scenario.validator_set {
            let key = &keys[vid];
            let addr = crate::ledger::derive_address(key.verify_key()).unwrap();
            validator_addrs.push(addr);
            let kind = scenario.nodes.iter().find(|n| &n.id == vid).unwrap().kind;
            genesis_txs.push(LedgerTransaction::signed(
                TxPayload::RegisterIdentity {
                    verify_key: key.verify_key().to_vec(),
                    role: role_for(kind),
                },
                addr,
                key,
            ));
            let record = DbnrRecord::signed(
                addr,
                vid.clone(),
                Locator {
                    layer: Layer::Primary,
                    attachment: vid.clone(),
                },
                1,
                u64::MAX,
                key,
            );
            genesis_txs.push(LedgerTransaction::signed(
                TxPayload::UpsertDbnrRecord(record),
                addr,
                key,
            ));
            genesis_validators.push(serde_json::json!({
                "node": vid,
                "address": hex::encode(addr.as_bytes()),
                "verify_key": hex::encode(key.verify_key()),
            }));
        }
        let genesis = Block::genesis(genesis_txs, 0);
        let genesis_state = LedgerState::from_genesis(&genesis).expect("genesis applies");
        let genesis_json = serde_json::to_string_pretty(&serde_json::json!({
            "validators": genesis_validators,
            "genesis_hash": hex::encode(genesis.hash()),
        }))
        .unwrap();

        let mut cfg = ValidatorSetConfig::new(validator_addrs);
        cfg.view_timeout = options.view_timeout;
        cfg.checkpoint_interval = options.checkpoint_interval;

        let mut world = World {
            now: 0,
            next_seq: 0,
            next_msg_id: 0,
            t_end: scenario.t_end,
            queue: BTreeMap::new(),
            nodes: BTreeMap::new(),
            node_ids: BTreeSet::new(),
            links: BTreeMap::new(),
            link_rngs: BTreeMap::new(),
            attachments: BTreeMap::new(),
            validators: scenario.validator_set.clone(),
            cfg,
            addr_to_node: BTreeMap::new(),
            adversaries: Vec::new(),
            adversary_nodes: BTreeSet::new(),
            fake_addrs: BTreeSet::new(),
            forged_txs: BTreeSet::new(),
            options,
            trace: Vec::new(),
            metrics: Metrics::default(),
            latencies: Vec::new(),
            genesis_json,
        };

        for link in &scenario.links {
            let key = link_key(&link.a, &link.b);
            world
                .link_rngs
                .insert(key.clone(), stream_rng(seed, &format!("link/{}/{}", key.0, key.1)));
            world.links.insert(key, (link.latency, link.loss_prob));
        }

        let mut node_infos = Vec::new();
        for spec in &scenario.nodes {
            let key = keys[&spec.id].clone();
            let address = crate::ledger::derive_address(key.verify_key()).unwrap();
            let is_validator = scenario.validator_set.contains(&spec.id);
            let replica = is_validator.then(|| {
                ReplicaState::new(address, key.clone(), world.cfg.clone(), genesis_state.clone())
            });
            let bus = (spec.kind == NodeKindSpec::Vehicle).then(|| {
                VehicleBus::new(
                    spec.id.clone(),
                    spec.components
                        .iter()
                        .map(|c| ComponentDescriptor {
                            component_id: c.component_id.clone(),
                            kind: c.kind,
                            sensitivity: c.sensitivity,
                            address: None,
                        })
                        .collect(),
                )
                .expect("validated at load")
            });
            let mut resolver = ResolverCache::default();
            resolver.refresh(&genesis_state);
            let node = Node {
                id: spec.id.clone(),
                kind: spec.kind,
                identity: EndpointIdentity { address, key },
                replica,
                bus,
                exported_components: spec
                    .components
                    .iter()
                    .filter(|c| c.export)
                    .map(|c| c.component_id.clone())
                    .collect(),
                ledger_view: genesis_state.clone(),
                resolver,
                sessions: BTreeMap::new(),
                pending_hs: BTreeMap::new(),
                collectors: BTreeMap::new(),
                accepted_requests: BTreeSet::new(),
                inputs: Vec::new(),
                attachment: spec.attachment.clone(),
                inbox: VecDeque::new(),
                tick_scheduled: false,
                crashed: false,
                adversary: false,
                next_request_id: 0,
                next_record_version: if is_validator { 2 } else { 1 },
                budget_at: u64::MAX,
                budget_used: 0,
                rng: stream_rng(seed, &format!("node/{}", spec.id)),
            };
            world.addr_to_node.insert(address, spec.id.clone());
            if let Some(att) = &spec.attachment {
                world.attachments.insert(spec.id.clone(), att.clone());
            }
            node_infos.push(NodeInfo {
                id: spec.id.clone(),
                kind: spec.kind.name().to_string(),
                address: hex::encode(address.as_bytes()),
            });
            world.node_ids.insert(spec.id.clone());
            world.nodes.insert(spec.id.clone(), node);
        }

        // adversary-controlled nodes join the topology so their traffic has
        // links to ride; they never get honest ledger-backed identities
        let mut adversary_labels = Vec::new();
        for (idx, spec) in scenario.adversaries.iter().enumerate() {
            let label = match &spec.kind {
                AdversaryKind::Sybil { .. } => format!("sybil-{idx}"),
                AdversaryKind::Dos { .. } => format!("dos-{idx}"),
                AdversaryKind::Ddos { .. } => format!("ddos-{idx}"),
                AdversaryKind::BlackHole { .. } => format!("blackhole-{idx}"),
                AdversaryKind::GreyHole { .. } => format!("greyhole-{idx}"),
                AdversaryKind::Impersonation { .. } => format!("imposter-{idx}"),
                AdversaryKind::Mitm { .. } => format!("mitm-{idx}"),
                AdversaryKind::Tamper { .. } => format!("tamper-{idx}"),
            };
            adversary_labels.push(label.clone());
            match &spec.kind {
                AdversaryKind::Sybil { count, attach } => {
                    let key = Provider::signing_key_from_seed(
                        format!("adv-key/{label}").as_bytes(),
                    );
                    for i in 0..*count {
                        let id = format!("{label}-{i}");
                        // fabricated address: not derived from any key
                        let digest = Provider::hash(format!("fake-addr/{label}/{i}").as_bytes());
                        let fake = BlockchainAddress(digest[..20].try_into().unwrap());
                        world.fake_addrs.insert(fake);
                        world.add_adversary_node(
                            &id,
                            EndpointIdentity {
                                address: fake,
                                key: key.clone(),
                            },
                            attach,
                            &genesis_state,
                            seed,
                        );
                        world.addr_to_node.insert(fake, id.clone());
                        node_infos.push(NodeInfo {
                            id,
                            kind: "sybil".into(),
                            address: hex::encode(fake.as_bytes()),
                        });
                    }
                }
                AdversaryKind::Impersonation { victim, attach } => {
                    let key = Provider::signing_key_from_seed(
                        format!("adv-key/{label}").as_bytes(),
                    );
                    let victim_key = &keys[victim];
                    let victim_addr =
                        crate::ledger::derive_address(victim_key.verify_key()).unwrap();
                    world.add_adversary_node(
                        &label,
                        EndpointIdentity {
                            address: victim_addr,
                            key,
                        },
                        attach,
                        &genesis_state,
                        seed,
                    );
                    node_infos.push(NodeInfo {
                        id: label.clone(),
                        kind: "imposter".into(),
                        address: hex::encode(victim_addr.as_bytes()),
                    });
                }
                _ => {}
            }
            world.adversaries.push(AdversaryRt {
                spec: spec.clone(),
                label: label.clone(),
                rng: stream_rng(seed, &format!("adv/{label}")),
            });
        }

        world.trace.push(TraceLine::Header {
            schema_version: TRACE_SCHEMA_VERSION,
            scenario: scenario.name.clone(),
            seed,
            t_end: scenario.t_end,
            nodes: node_infos,
            validators: scenario.validator_set.clone(),
            adversaries: adversary_labels,
        });

        // startup and recurring events
        for spec in &scenario.nodes {
            if !scenario.validator_set.contains(&spec.id) {
                world.push_event(1, EventKind::Register(spec.id.clone()));
            }
            for wp in &spec.waypoints {
                world.push_event(
                    wp.at,
                    EventKind::Waypoint {
                        node: spec.id.clone(),
                        attach: wp.attach.clone(),
                    },
                );
            }
            if let Some(at) = spec.crash_at {
                world.push_event(at, EventKind::Crash(spec.id.clone()));
            }
            if !scenario.validator_set.contains(&spec.id) {
                let mut t = world.options.refresh_interval;
                while t <= scenario.t_end {
                    world.push_event(t, EventKind::RefreshPull(spec.id.clone()));
                    t += world.options.refresh_interval;
                }
            }
        }
        for (idx, spec) in scenario.adversaries.iter().enumerate() {
            match &spec.kind {
                AdversaryKind::Dos { .. } | AdversaryKind::Ddos { .. } => {
                    world.push_event(spec.start.max(1), EventKind::AdvInject(idx));
                }
                AdversaryKind::Sybil { .. } => {
                    world.push_event(spec.start.max(1), EventKind::AdvLaunch(idx));
                }
                AdversaryKind::Impersonation { .. } => {
                    // the imposter needs a ledger view naming the victim
                    let label = format!("imposter-{idx}");
                    let mut t = world.options.refresh_interval;
                    while t <= scenario.t_end {
                        world.push_event(t, EventKind::RefreshPull(label.clone()));
                        t += world.options.refresh_interval;
                    }
                    world.push_event(spec.start.max(1), EventKind::AdvLaunch(idx));
                }
                _ => {}
            }
        }
        for item in &scenario.workload {
            world.push_event(item.at, EventKind::Workload(item.action.clone()));
        }

        world
    }

    fn add_adversary_node(
        &mut self,
        id: &str,
        identity: EndpointIdentity,
        attach: &str,
        genesis_state: &LedgerState,
        seed: u64,
    ) {
        let mut resolver = ResolverCache::default();
        resolver.refresh(genesis_state);
        let node = Node {
            id: id.to_string(),
            kind: NodeKindSpec::Vehicle,
            identity,
            replica: None,
            bus: None,
            exported_components: Vec::new(),
            ledger_view: genesis_state.clone(),
            resolver,
            sessions: BTreeMap::new(),
            pending_hs: BTreeMap::new(),
            collectors: BTreeMap::new(),
            accepted_requests: BTreeSet::new(),
            inputs: Vec::new(),
            attachment: Some(attach.to_string()),
            inbox: VecDeque::new(),
            tick_scheduled: false,
            crashed: false,
            adversary: true,
            next_request_id: 0,
            next_record_version: 1,
            budget_at: u64::MAX,
            budget_used: 0,
            rng: stream_rng(seed, &format!("node/{id}")),
        };
        self.attachments.insert(id.to_string(), attach.to_string());
        self.adversary_nodes.insert(id.to_string());
        self.node_ids.insert(id.to_string());
        self.nodes.insert(id.to_string(), node);
    }

    // -- event queue ---------------------------------------------------------

    /// Schedule an event; events strictly in the past are rejected.
    fn schedule(&mut self, at: u64, kind: EventKind) -> Result<(), ScheduleError> {
        if at < self.now {
            return Err(ScheduleError::PastEvent);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), kind);
        Ok(())
    }

    fn push_event(&mut self, at: u64, kind: EventKind) {
        self.schedule(at, kind).expect("future event");
    }

    fn next_trace_seq(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        seq
    }

    /// Run the event loop until the queue drains or simulated time passes
    /// `t_end`.
    pub fn run(&mut self) {
        while let Some((&(at, _), _)) = self.queue.first_key_value() {
            if at > self.t_end {
                break;
            }
            let ((at, _), kind) = self.queue.pop_first().unwrap();
            self.now = at;
            self.handle_event(kind);
        }
    }

    fn handle_event(&mut self, kind: EventKind) {
        match kind {
            EventKind::Deliver(env) => self.on_deliver(env),
            EventKind::Tick(node) => self.on_tick(&node),
            EventKind::Timer { node, timer_id } => self.on_timer(&node, timer_id),
            EventKind::Register(node) => self.on_register(&node),
            EventKind::RefreshPull(node) => self.on_refresh_pull(&node),
            EventKind::Waypoint { node, attach } => self.on_waypoint(&node, &attach),
            EventKind::Crash(node) => {
                if let Some(n) = self.nodes.get_mut(&node) {
                    n.crashed = true;
                    self.metrics.bump("crashes");
                }
            }
            EventKind::Workload(action) => self.on_workload(action),
            EventKind::AdvInject(idx) => self.on_adv_inject(idx),
            EventKind::AdvLaunch(idx) => self.on_adv_launch(idx),
        }
    }

    // -- routing ---------------------------------------------------------------

    fn adjacent(&self, a: &str, b: &str) -> Option<(u64, f64)> {
        if let Some(&(lat, loss)) = self.links.get(&link_key(a, b)) {
            return Some((lat, loss));
        }
        let attached = self.attachments.get(a).map(String::as_str) == Some(b)
            || self.attachments.get(b).map(String::as_str) == Some(a);
        if attached {
            return Some((self.options.backbone_latency, 0.0));
        }
        if self.validators.iter().any(|v| v == a) && self.validators.iter().any(|v| v == b) {
            return Some((self.options.backbone_latency, 0.0));
        }
        None
    }

    fn neighbors(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for (a, b) in self.links.keys() {
            if a == id {
                out.insert(b.clone());
            } else if b == id {
                out.insert(a.clone());
            }
        }
        if let Some(att) = self.attachments.get(id) {
            out.insert(att.clone());
        }
        for (n, att) in &self.attachments {
            if att == id {
                out.insert(n.clone());
            }
        }
        if self.validators.iter().any(|v| v == id) {
            for v in &self.validators {
                if v != id {
                    out.insert(v.clone());
                }
            }
        }
        out
    }

    /// Shortest path over the current adjacency, ties broken by node id.
    fn bfs(&self, from: &str, to: &str) -> Option<Vec<String>> {
        if from == to {
            return Some(vec![from.to_string()]);
        }
        let mut prev: BTreeMap<String, String> = BTreeMap::new();
        let mut frontier = VecDeque::from([from.to_string()]);
        let mut seen = BTreeSet::from([from.to_string()]);
        while let Some(cur) = frontier.pop_front() {
            for next in self.neighbors(&cur) {
                if seen.insert(next.clone()) {
                    prev.insert(next.clone(), cur.clone());
                    if next == to {
                        let mut path = vec![to.to_string()];
                        let mut at = to.to_string();
                        while let Some(p) = prev.get(&at) {
                            path.push(p.clone());
                            at = p.clone();
                        }
                        path.reverse();
                        return Some(path);
                    }
                    frontier.push_back(next);
                }
            }
        }
        None
    }

    /// Route an application message by name resolution: look the destination
    /// address up in the sender's cache, derive the logical layer path, then
    /// expand it over the actual adjacency.
    fn app_route(&self, src: &Node, dst_addr: &BlockchainAddress) -> Result<Vec<String>, DbnrError> {
        let record = src.resolver.resolve(dst_addr, self.now)?.clone();
        let endpoint = RouteEndpoint {
            node: src.id.clone(),
            locator: src.own_locator(),
        };
        let mut logical = crate::dbnr::resolve_route(self, &endpoint, &record)?;
        if let Some(last) = logical.last() {
            // sub-layer interfaces are not network nodes; the owning vehicle
            // gateway is the final hop
            if !self.node_ids.contains(last) {
                logical.pop();
            }
        }
        let mut path = vec![logical[0].clone()];
        for pair in logical.windows(2) {
            if self.adjacent(&pair[0], &pair[1]).is_some() {
                path.push(pair[1].clone());
            } else {
                let sub = self.bfs(&pair[0], &pair[1]).ok_or(DbnrError::NoRoute)?;
                path.extend(sub.into_iter().skip(1));
            }
        }
        Ok(path)
    }

    // -- sending and forwarding ----------------------------------------------

    fn send_on_path(&mut self, path: Vec<String>, msg: NetMsg) {
        debug_assert!(!path.is_empty());
        let id = self.next_msg_id;
        self.next_msg_id += 1;
        let seq = self.next_trace_seq();
        self.trace.push(TraceLine::Send {
            at: self.now,
            seq,
            id,
            src: path[0].clone(),
            dst: path.last().unwrap().clone(),
            kind: msg.kind(),
            path: path.clone(),
        });
        self.metrics.bump("sends");
        let env = Envelope {
            id,
            origin: path[0].clone(),
            sent_at: self.now,
            path,
            hop: 0,
            msg,
        };
        if env.path.len() == 1 {
            self.push_event(self.now, EventKind::Deliver(env));
        } else {
            self.forward_hop(env);
        }
    }

    fn send_via_bfs(&mut self, from: &str, to: &str, msg: NetMsg) {
        match self.bfs(from, to) {
            Some(path) => self.send_on_path(path, msg),
            None => self.metrics.bump("route_fail"),
        }
    }

    /// Direct injection (radio-range plaintext or DoS junk): no links, no
    /// hops, immediate arrival at the target's inbox.
    fn send_direct(&mut self, origin: &str, target: &str, msg: NetMsg) {
        let id = self.next_msg_id;
        self.next_msg_id += 1;
        let seq = self.next_trace_seq();
        self.trace.push(TraceLine::Send {
            at: self.now,
            seq,
            id,
            src: origin.to_string(),
            dst: target.to_string(),
            kind: msg.kind(),
            path: vec![origin.to_string(), target.to_string()],
        });
        self.metrics.bump("sends");
        let env = Envelope {
            id,
            origin: origin.to_string(),
            sent_at: self.now,
            path: vec![origin.to_string(), target.to_string()],
            hop: 1,
            msg,
        };
        self.push_event(self.now, EventKind::Deliver(env));
    }

    fn forward_hop(&mut self, mut env: Envelope) {
        let from = env.path[env.hop].clone();
        let to = env.path[env.hop + 1].clone();
        let Some((latency, loss_prob)) = self.adjacent(&from, &to) else {
            let seq = self.next_trace_seq();
            self.trace.push(TraceLine::DropLoss {
                at: self.now,
                seq,
                id: env.id,
                link: format!("{from}-{to}"),
                reason: "no_route".into(),
            });
            self.metrics.bump("drop_loss");
            return;
        };

        // on-path adversaries mutate in flight
        let key = link_key(&from, &to);
        for i in 0..self.adversaries.len() {
            if !self.adversaries[i].active(self.now) {
                continue;
            }
            let (a_link, strategy) = match &self.adversaries[i].spec.kind {
                AdversaryKind::Mitm { link } => (link.clone(), TamperStrategy::ReplaceEphemeral),
                AdversaryKind::Tamper { link, strategy } => (link.clone(), *strategy),
                _ => continue,
            };
            if link_key(&a_link.0, &a_link.1) != key {
                continue;
            }
            let label = self.adversaries[i].label.clone();
            let mutated = {
                let adv = &mut self.adversaries[i];
                apply_tamper(&mut env.msg, strategy, &mut adv.rng)
            };
            if mutated {
                let seq = self.next_trace_seq();
                self.trace.push(TraceLine::Adversary {
                    at: self.now,
                    seq,
                    kind: "tamper".into(),
                    node: format!("{from}-{to}"),
                    detail: format!("{label} mutated a {} message", env.msg.kind()),
                });
                self.metrics.bump("adv_actions");
            }
        }

        if loss_prob > 0.0 {
            let rng = self.link_rngs.get_mut(&key).expect("losses only on explicit links");
            if rng.random::<f64>() < loss_prob {
                let seq = self.next_trace_seq();
                self.trace.push(TraceLine::DropLoss {
                    at: self.now,
                    seq,
                    id: env.id,
                    link: format!("{from}-{to}"),
                    reason: "loss".into(),
                });
                self.metrics.bump("drop_loss");
                return;
            }
        }

        let arrive_at = self.now + latency;
        let seq = self.next_trace_seq();
        self.trace.push(TraceLine::Hop {
            at: self.now,
            seq,
            id: env.id,
            from,
            to,
            latency,
            arrive_at,
        });
        env.hop += 1;
        self.push_event(arrive_at, EventKind::Deliver(env));
    }

    fn on_deliver(&mut self, env: Envelope) {
        let here = env.path[env.hop].clone();
        let is_final = env.hop + 1 == env.path.len();

        if !is_final {
            // relay adversaries act here, before honest forwarding
            for i in 0..self.adversaries.len() {
                if !self.adversaries[i].active(self.now) {
                    continue;
                }
                let drop = match &self.adversaries[i].spec.kind {
                    AdversaryKind::BlackHole { relay } if *relay == here => Some(true),
                    AdversaryKind::GreyHole { relay, drop_prob } if *relay == here => {
                        let p = *drop_prob;
                        Some(self.adversaries[i].rng.random::<f64>() < p)
                    }
                    _ => None,
                };
                match drop {
                    Some(true) => {
                        let label = self.adversaries[i].label.clone();
                        let seq = self.next_trace_seq();
                        self.trace.push(TraceLine::DropAdv {
                            at: self.now,
                            seq,
                            id: env.id,
                            node: here,
                            adversary: label,
                        });
                        self.metrics.bump("drop_adv");
                        self.metrics.bump("relay_dropped");
                        return;
                    }
                    Some(false) => {
                        self.metrics.bump("relay_forwarded");
                    }
                    None => {}
                }
            }
            if self.nodes.get(&here).is_some_and(|n| n.crashed) {
                let seq = self.next_trace_seq();
                self.trace.push(TraceLine::DropLoss {
                    at: self.now,
                    seq,
                    id: env.id,
                    link: here,
                    reason: "relay_down".into(),
                });
                self.metrics.bump("drop_loss");
                return;
            }
            self.forward_hop(env);
            return;
        }

        let dead = self.nodes.get(&here).map(|n| n.crashed).unwrap_or(true);
        if dead {
            let seq = self.next_trace_seq();
            self.trace.push(TraceLine::Expired {
                at: self.now,
                seq,
                id: env.id,
                node: here,
            });
            self.metrics.bump("expired");
            return;
        }
        let evicted = {
            let node = self.nodes.get_mut(&here).unwrap();
            if node.inbox.len() >= self.options.inbox_capacity {
                node.inbox.pop_front().map(|e| e.id)
            } else {
                None
            }
        };
        if let Some(id) = evicted {
            let seq = self.next_trace_seq();
            self.trace.push(TraceLine::Expired {
                at: self.now,
                seq,
                id,
                node: here.clone(),
            });
            self.metrics.bump("expired");
            self.metrics.bump("inbox_evictions");
        }
        let node = self.nodes.get_mut(&here).unwrap();
        node.inbox.push_back(env);
        let need_tick = !node.tick_scheduled;
        node.tick_scheduled = true;
        if need_tick {
            self.push_event(self.now, EventKind::Tick(here));
        }
    }

    fn on_tick(&mut self, node_id: &str) {
        let budget = {
            let Some(node) = self.nodes.get_mut(node_id) else {
                return;
            };
            node.tick_scheduled = false;
            if node.crashed {
                let drained: Vec<u64> = node.inbox.drain(..).map(|e| e.id).collect();
                for id in drained {
                    let seq = self.next_trace_seq();
                    self.trace.push(TraceLine::Expired {
                        at: self.now,
                        seq,
                        id,
                        node: node_id.to_string(),
                    });
                    self.metrics.bump("expired");
                }
                return;
            }
            if node.budget_at != self.now {
                node.budget_at = self.now;
                node.budget_used = 0;
            }
            self.options
                .processing_budget
                .saturating_sub(node.budget_used)
        };
        for _ in 0..budget {
            let node = self.nodes.get_mut(node_id).unwrap();
            let Some(env) = node.inbox.pop_front() else {
                break;
            };
            node.budget_used += 1;
            let seq = self.next_trace_seq();
            self.trace.push(TraceLine::Delivered {
                at: self.now,
                seq,
                id: env.id,
                node: node_id.to_string(),
            });
            self.metrics.bump("delivered");
            self.latencies.push(self.now - env.sent_at);
            self.dispatch(node_id, env);
        }
        let node = self.nodes.get_mut(node_id).unwrap();
        if !node.inbox.is_empty() && !node.tick_scheduled {
            node.tick_scheduled = true;
            self.push_event(self.now + 1, EventKind::Tick(node_id.to_string()));
        }
    }

    // -- per-message dispatch ---------------------------------------------------

    fn dispatch(&mut self, node_id: &str, env: Envelope) {
        match env.msg {
            NetMsg::Consensus(msg) => match *msg {
                ConsensusMessage::Reply(reply) => self.on_client_reply(node_id, reply),
                other => self.on_consensus(node_id, other),
            },
            NetMsg::Handshake(msg) => self.on_handshake(node_id, *msg, &env.origin, &env.path),
            NetMsg::Sealed(record) => self.on_sealed(node_id, record),
            NetMsg::LedgerPull => {
                let snapshot = self
                    .nodes
                    .get(node_id)
                    .and_then(|n| n.replica.as_ref())
                    .map(|r| r.ledger.clone());
                if let Some(state) = snapshot {
                    self.send_via_bfs(node_id, &env.origin, NetMsg::LedgerSnapshot(Box::new(state)));
                }
            }
            NetMsg::LedgerSnapshot(state) => self.on_snapshot(node_id, *state),
            NetMsg::Plain(payload) => {
                let node = self.nodes.get_mut(node_id).unwrap();
                node.inputs.push(CandidateInput {
                    source: None,
                    payload,
                });
                self.metrics.bump("plain_received");
            }
            NetMsg::Junk => {
                self.metrics.bump("junk_processed");
            }
        }
    }

    fn on_consensus(&mut self, node_id: &str, msg: ConsensusMessage) {
        let mut node = self.nodes.remove(node_id).expect("dispatch target exists");
        let Some(replica) = node.replica.as_mut() else {
            self.nodes.insert(node_id.to_string(), node);
            return;
        };
        let prev_view = replica.view;
        let outputs = replica.handle_message(&msg, self.now);
        let view = replica.view;
        self.nodes.insert(node_id.to_string(), node);
        if view > prev_view {
            let seq = self.next_trace_seq();
            self.trace.push(TraceLine::ViewChange {
                at: self.now,
                seq,
                node: node_id.to_string(),
                view,
            });
            self.metrics.bump("view_changes");
            self.metrics.set_max("max_view", view);
        }
        self.process_outputs(node_id, outputs);
    }

    fn process_outputs(&mut self, node_id: &str, outputs: Vec<Output>) {
        for out in outputs {
            match out {
                Output::Send(addr, m) => {
                    if let Some(dst) = self.addr_to_node.get(&addr).cloned() {
                        self.send_via_bfs(node_id, &dst, NetMsg::Consensus(Box::new(m)));
                    } else {
                        self.metrics.bump("route_fail");
                    }
                }
                Output::Broadcast(m) => {
                    let peers: Vec<String> = self
                        .validators
                        .iter()
                        .filter(|v| v.as_str() != node_id)
                        .cloned()
                        .collect();
                    for dst in peers {
                        self.send_via_bfs(node_id, &dst, NetMsg::Consensus(Box::new(m.clone())));
                    }
                }
                Output::SendClient(addr, m) => {
                    if let Some(dst) = self.addr_to_node.get(&addr).cloned() {
                        self.send_via_bfs(node_id, &dst, NetMsg::Consensus(Box::new(m)));
                    } else {
                        self.metrics.bump("route_fail");
                    }
                }
                Output::ArmTimer { id, delay } => {
                    self.push_event(
                        self.now + delay,
                        EventKind::Timer {
                            node: node_id.to_string(),
                            timer_id: id,
                        },
                    );
                }
                Output::Committed { seq: height, block } => {
                    let seq = self.next_trace_seq();
                    self.trace.push(TraceLine::Commit {
                        at: self.now,
                        seq,
                        node: node_id.to_string(),
                        height,
                        digest: hex::encode(block.hash()),
                    });
                    self.metrics.bump("commits");
                    self.metrics.set_max("chain_height", height);
                    for tx in &block.txs {
                        if self.fake_addrs.contains(&tx.submitter)
                            || self.forged_txs.contains(&tx.digest())
                        {
                            self.metrics.bump("fake_committed_txs");
                        }
                    }
                    // validators mirror their replica ledger as their view
                    let node = self.nodes.get_mut(node_id).unwrap();
                    if let Some(replica) = node.replica.as_ref() {
                        node.ledger_view = replica.ledger.clone();
                        node.resolver.refresh(&node.ledger_view);
                    }
                }
            }
        }
    }

    fn on_timer(&mut self, node_id: &str, timer_id: u64) {
        let Some(node) = self.nodes.get_mut(node_id) else {
            return;
        };
        if node.crashed {
            return;
        }
        let Some(replica) = node.replica.as_mut() else {
            return;
        };
        let prev_view = replica.view;
        let outputs = replica.handle_timeout(timer_id, self.now);
        let view = replica.view;
        if view > prev_view {
            let seq = self.next_trace_seq();
            self.trace.push(TraceLine::ViewChange {
                at: self.now,
                seq,
                node: node_id.to_string(),
                view,
            });
            self.metrics.bump("view_changes");
            self.metrics.set_max("max_view", view);
        }
        self.process_outputs(node_id, outputs);
    }

    fn on_client_reply(&mut self, node_id: &str, reply: crate::pbft::ReplyMsg) {
        let cfg = self.cfg.clone();
        let node = self.nodes.get_mut(node_id).unwrap();
        let digest = reply.request_digest;
        if node.accepted_requests.contains(&digest) {
            return;
        }
        let collector = node.collectors.entry(digest).or_default();
        if collector.add(reply, &cfg).is_some() {
            node.accepted_requests.insert(digest);
            let seq = self.next_trace_seq();
            self.trace.push(TraceLine::RequestAccepted {
                at: self.now,
                seq,
                node: node_id.to_string(),
                request: hex::encode(digest),
            });
            self.metrics.bump("requests_accepted");
        }
    }

    fn trace_handshake(
        &mut self,
        node: &str,
        peer: &BlockchainAddress,
        outcome: &str,
        cause: Option<&str>,
        initiator_node: &str,
        key_match: Option<bool>,
    ) {
        let peer_name = self
            .addr_to_node
            .get(peer)
            .cloned()
            .unwrap_or_else(|| hex::encode(peer.as_bytes()));
        let seq = self.next_trace_seq();
        self.trace.push(TraceLine::Handshake {
            at: self.now,
            seq,
            node: node.to_string(),
            peer: peer_name,
            outcome: outcome.to_string(),
            cause: cause.map(str::to_string),
            initiator_node: initiator_node.to_string(),
            key_match,
        });
    }

    fn on_handshake(
        &mut self,
        node_id: &str,
        msg: HandshakeMessage,
        origin: &str,
        path: &[String],
    ) {
        let reverse_path = || {
            let mut p: Vec<String> = path.to_vec();
            p.reverse();
            p
        };
        match msg.step {
            HandshakeStep::Hello => {
                let mut node = self.nodes.remove(node_id).expect("dispatch target exists");
                if node.adversary {
                    self.nodes.insert(node_id.to_string(), node);
                    return;
                }
                let seed = node.draw32();
                let result = bisa::respond(&node.identity, &msg, &node.ledger_view, &seed, self.now);
                match result {
                    Ok((session, response)) => {
                        node.sessions.insert(msg.sender_addr, session);
                        self.nodes.insert(node_id.to_string(), node);
                        self.send_on_path(
                            reverse_path(),
                            NetMsg::Handshake(Box::new(response)),
                        );
                    }
                    Err(e) => {
                        self.nodes.insert(node_id.to_string(), node);
                        let cause = handshake_cause(&e);
                        self.trace_handshake(
                            node_id,
                            &msg.sender_addr,
                            "rejected",
                            Some(cause),
                            origin,
                            None,
                        );
                        self.metrics.bump("handshake_rejected");
                        self.metrics.bump(&format!("handshake_fail_{cause}"));
                    }
                }
            }
            HandshakeStep::Response => {
                let mut node = self.nodes.remove(node_id).expect("dispatch target exists");
                let Some(pending) = node.pending_hs.remove(&msg.sender_addr) else {
                    self.nodes.insert(node_id.to_string(), node);
                    self.metrics.bump("handshake_stray_response");
                    return;
                };
                let result = bisa::complete(&pending, &msg, &node.ledger_view, self.now);
                match result {
                    Ok((session, confirm)) => {
                        node.sessions.insert(msg.sender_addr, session);
                        self.nodes.insert(node_id.to_string(), node);
                        self.metrics.bump("initiator_established");
                        self.send_on_path(reverse_path(), NetMsg::Handshake(Box::new(confirm)));
                    }
                    Err(e) => {
                        self.nodes.insert(node_id.to_string(), node);
                        let cause = handshake_cause(&e);
                        self.trace_handshake(
                            node_id,
                            &msg.sender_addr,
                            "failed",
                            Some(cause),
                            node_id,
                            None,
                        );
                        self.metrics.bump(&format!("handshake_fail_{cause}"));
                    }
                }
            }
            HandshakeStep::Confirm => {
                let mut node = self.nodes.remove(node_id).expect("dispatch target exists");
                let Some(session) = node.sessions.get_mut(&msg.sender_addr) else {
                    self.nodes.insert(node_id.to_string(), node);
                    self.metrics.bump("handshake_stray_confirm");
                    return;
                };
                let result = bisa::verify_confirm(session, &msg, &node.ledger_view);
                match result {
                    Ok(()) => {
                        let local_key = *node.sessions.get(&msg.sender_addr).unwrap().session_key();
                        let local_addr = node.identity.address;
                        self.nodes.insert(node_id.to_string(), node);
                        // cross-check both endpoints derived the same key
                        let key_match = self.nodes.get(origin).and_then(|initiator| {
                            initiator
                                .sessions
                                .get(&local_addr)
                                .map(|s| *s.session_key() == local_key)
                        });
                        self.trace_handshake(
                            node_id,
                            &msg.sender_addr,
                            "established",
                            None,
                            origin,
                            key_match,
                        );
                        self.metrics.bump("sessions_established");
                        if key_match == Some(false) {
                            self.metrics.bump("key_mismatches");
                        }
                        if self.adversary_nodes.contains(origin)
                            || self.fake_addrs.contains(&msg.sender_addr)
                        {
                            self.metrics.bump("adversary_sessions");
                        }
                    }
                    Err(e) => {
                        node.sessions.remove(&msg.sender_addr);
                        self.nodes.insert(node_id.to_string(), node);
                        let cause = handshake_cause(&e);
                        self.trace_handshake(
                            node_id,
                            &msg.sender_addr,
                            "failed",
                            Some(cause),
                            origin,
                            None,
                        );
                        self.metrics.bump(&format!("handshake_fail_{cause}"));
                    }
                }
            }
        }
    }

    fn on_sealed(&mut self, node_id: &str, record: WireRecord) {
        let node = self.nodes.get_mut(node_id).unwrap();
        let sender = record.sender;
        let Some(session) = node.sessions.get_mut(&sender) else {
            self.metrics.bump("sealed_no_session");
            return;
        };
        if let Some(bus) = node.bus.as_mut() {
            match bus.gateway_ingress(session, &record) {
                Ok(msg) => {
                    let sensitivity = match bus.component(&msg.dst).map(|c| c.sensitivity) {
                        Some(Sensitivity::Sensitive) => "sensitive",
                        _ => "non_sensitive",
                    };
                    node.inputs.push(CandidateInput {
                        source: Some(sender),
                        payload: msg.payload.clone(),
                    });
                    let component = msg.dst;
                    let seq = self.next_trace_seq();
                    self.trace.push(TraceLine::Bus {
                        at: self.now,
                        seq,
                        node: node_id.to_string(),
                        component,
                        origin: "external".into(),
                        sensitivity: sensitivity.into(),
                        outcome: "delivered".into(),
                    });
                    if sensitivity == "sensitive" {
                        self.metrics.bump("external_delivered_sensitive");
                    } else {
                        self.metrics.bump("external_delivered_nonsensitive");
                    }
                }
                Err(IngressError::Bus { dst, source: _ }) => {
                    let sensitivity = match bus.component(&dst).map(|c| c.sensitivity) {
                        Some(Sensitivity::Sensitive) => "sensitive",
                        Some(Sensitivity::NonSensitive) => "non_sensitive",
                        None => "unknown",
                    };
                    let seq = self.next_trace_seq();
                    self.trace.push(TraceLine::Bus {
                        at: self.now,
                        seq,
                        node: node_id.to_string(),
                        component: dst,
                        origin: "external".into(),
                        sensitivity: sensitivity.into(),
                        outcome: "blocked".into(),
                    });
                    self.metrics.bump("isolation_blocked");
                }
                Err(IngressError::Session(e)) => {
                    self.metrics.bump(&format!("open_fail_{}", session_cause(&e)));
                }
                Err(IngressError::MalformedPayload) => {
                    self.metrics.bump("open_fail_malformed");
                }
            }
        } else {
            match session.open(&record) {
                Ok(payload) => {
                    node.inputs.push(CandidateInput {
                        source: Some(sender),
                        payload,
                    });
                    self.metrics.bump("opened_records");
                }
                Err(e) => {
                    self.metrics.bump(&format!("open_fail_{}", session_cause(&e)));
                }
            }
        }
    }

    fn on_snapshot(&mut self, node_id: &str, state: LedgerState) {
        let node = self.nodes.get_mut(node_id).unwrap();
        if state.head.height < node.ledger_view.head.height {
            return;
        }
        node.ledger_view = state;
        node.resolver.refresh(&node.ledger_view);
        let height = node.ledger_view.head.height;
        let inputs = std::mem::take(&mut node.inputs);
        let view = node.ledger_view.clone();
        let seq = self.next_trace_seq();
        self.trace.push(TraceLine::Refresh {
            at: self.now,
            seq,
            node: node_id.to_string(),
            height,
        });
        self.metrics.bump("refreshes");
        for input in &inputs {
            let (kept, _) = decision_filter(&view, std::slice::from_ref(input));
            let accepted = !kept.is_empty();
            let seq = self.next_trace_seq();
            self.trace.push(TraceLine::Decision {
                at: self.now,
                seq,
                node: node_id.to_string(),
                source: input.source.map(|a| hex::encode(a.as_bytes())),
                accepted,
            });
            if accepted {
                self.metrics.bump("accepted_inputs");
            } else {
                self.metrics.bump("excluded_inputs");
            }
        }
    }

    // -- startup, mobility, workload -------------------------------------------

    fn submit_request(&mut self, node_id: &str, req: RequestMsg) {
        let validators = self.validators.clone();
        for v in validators {
            if v == node_id {
                self.send_on_path(vec![v], NetMsg::Consensus(Box::new(ConsensusMessage::Request(req.clone()))));
            } else {
                self.send_via_bfs(
                    node_id,
                    &v,
                    NetMsg::Consensus(Box::new(ConsensusMessage::Request(req.clone()))),
                );
            }
        }
    }

    fn on_register(&mut self, node_id: &str) {
        let mut node = self.nodes.remove(node_id).expect("register target exists");
        if node.crashed || node.adversary {
            self.nodes.insert(node_id.to_string(), node);
            return;
        }
        let addr = node.identity.address;
        let key = node.identity.key.clone();
        let mut txs = Vec::new();
        let register = LedgerTransaction::signed(
            TxPayload::RegisterIdentity {
                verify_key: key.verify_key().to_vec(),
                role: role_for(node.kind),
            },
            addr,
            &key,
        );
        // scratch state so the component exports see the vehicle as active
        let scratch = node
            .ledger_view
            .apply_transaction(&register, self.now)
            .expect("self-registration applies");
        txs.push(register);
        let record = DbnrRecord::signed(
            addr,
            node.id.clone(),
            node.own_locator(),
            node.next_record_version,
            u64::MAX,
            &key,
        );
        node.next_record_version += 1;
        txs.push(LedgerTransaction::signed(
            TxPayload::UpsertDbnrRecord(record),
            addr,
            &key,
        ));
        let exported = node.exported_components.clone();
        if let Some(bus) = node.bus.as_mut() {
            for comp in exported {
                let (reg, upsert) = bus
                    .export_component(&addr, &comp, &scratch, u64::MAX)
                    .expect("export validated at load");
                if let Some(c) = bus.component(&comp) {
                    if let Some(comp_addr) = c.address {
                        self.addr_to_node.insert(comp_addr, node.id.clone());
                    }
                }
                txs.push(reg);
                txs.push(upsert);
            }
        }
        let request_id = node.next_request_id;
        node.next_request_id += 1;
        let req = RequestMsg::signed(txs, addr, request_id, &key);
        self.nodes.insert(node_id.to_string(), node);
        self.submit_request(node_id, req);
    }

    fn on_refresh_pull(&mut self, node_id: &str) {
        let Some(node) = self.nodes.get(node_id) else {
            return;
        };
        if node.crashed || node.replica.is_some() {
            return;
        }
        // pull from the attachment if it is a validator, otherwise from the
        // first validator
        let target = match node.attachment.as_deref() {
            Some(att) if self.validators.iter().any(|v| v == att) => att.to_string(),
            _ => self.validators[0].clone(),
        };
        self.send_via_bfs(node_id, &target, NetMsg::LedgerPull);
    }

    fn on_waypoint(&mut self, node_id: &str, attach: &str) {
        let mut node = self.nodes.remove(node_id).expect("waypoint target exists");
        if node.crashed {
            self.nodes.insert(node_id.to_string(), node);
            return;
        }
        node.attachment = Some(attach.to_string());
        self.attachments
            .insert(node_id.to_string(), attach.to_string());
        let addr = node.identity.address;
        let key = node.identity.key.clone();
        let record = DbnrRecord::signed(
            addr,
            node.id.clone(),
            Locator {
                layer: Layer::Primary,
                attachment: attach.to_string(),
            },
            node.next_record_version,
            u64::MAX,
            &key,
        );
        node.next_record_version += 1;
        let tx = LedgerTransaction::signed(TxPayload::UpsertDbnrRecord(record), addr, &key);
        let request_id = node.next_request_id;
        node.next_request_id += 1;
        let req = RequestMsg::signed(vec![tx], addr, request_id, &key);
        self.nodes.insert(node_id.to_string(), node);
        self.metrics.bump("reregistrations");
        self.submit_request(node_id, req);
    }

    fn on_workload(&mut self, action: Action) {
        match action {
            Action::Handshake {
                initiator,
                responder,
            } => {
                let peer_addr = self.nodes[&responder].identity.address;
                let mut node = self.nodes.remove(&initiator).expect("initiator exists");
                if node.crashed {
                    self.nodes.insert(initiator, node);
                    return;
                }
                self.metrics.bump("handshakes_started");
                let seed = node.draw32();
                match bisa::initiate(&node.identity, peer_addr, &node.ledger_view, &seed) {
                    Ok((pending, hello)) => {
                        node.pending_hs.insert(peer_addr, pending);
                        let route = self.app_route(&node, &peer_addr);
                        self.nodes.insert(initiator.clone(), node);
                        match route {
                            Ok(path) => {
                                self.send_on_path(path, NetMsg::Handshake(Box::new(hello)));
                            }
                            Err(_) => {
                                self.trace_handshake(
                                    &initiator,
                                    &peer_addr,
                                    "failed",
                                    Some("resolution"),
                                    &initiator,
                                    None,
                                );
                                self.metrics.bump("handshake_fail_resolution");
                            }
                        }
                    }
                    Err(e) => {
                        self.nodes.insert(initiator.clone(), node);
                        let cause = handshake_cause(&e);
                        self.trace_handshake(
                            &initiator,
                            &peer_addr,
                            "failed",
                            Some(cause),
                            &initiator,
                            None,
                        );
                        self.metrics.bump(&format!("handshake_fail_{cause}"));
                    }
                }
            }
            Action::Send {
                src,
                dst,
                component,
                repeat,
                interval,
                payload_len,
            } => {
                self.do_send(&src, &dst, component.as_deref(), payload_len);
                if repeat > 1 {
                    self.push_event(
                        self.now + interval,
                        EventKind::Workload(Action::Send {
                            src,
                            dst,
                            component,
                            repeat: repeat - 1,
                            interval,
                            payload_len,
                        }),
                    );
                }
            }
            Action::Revoke { by, target } => {
                let target_addr = self.nodes[&target].identity.address;
                let node = self.nodes.get_mut(&by).unwrap();
                if node.crashed {
                    return;
                }
                let addr = node.identity.address;
                let key = node.identity.key.clone();
                let tx = LedgerTransaction::signed(
                    TxPayload::RevokeIdentity {
                        target: target_addr,
                    },
                    addr,
                    &key,
                );
                let request_id = node.next_request_id;
                node.next_request_id += 1;
                let req = RequestMsg::signed(vec![tx], addr, request_id, &key);
                self.metrics.bump("revocations_submitted");
                self.submit_request(&by, req);
            }
            Action::Inject { target } => {
                let payload = {
                    let node = self.nodes.get_mut(&target).unwrap();
                    let mut p = vec![0u8; 24];
                    node.rng.fill_bytes(&mut p);
                    p
                };
                self.metrics.bump("injections");
                self.send_direct("inject", &target, NetMsg::Plain(payload));
            }
        }
    }

    fn do_send(&mut self, src: &str, dst: &str, component: Option<&str>, payload_len: usize) {
        // destination session peer is always the endpoint identity; sealed
        // payloads to vehicles carry bus framing for the named component
        let dst_node_addr = self.nodes[dst].identity.address;
        let (route_addr, framed_component) = match component {
            Some(c) => {
                let comp_addr = self.nodes[dst]
                    .bus
                    .as_ref()
                    .and_then(|b| b.component(c))
                    .and_then(|d| d.address);
                (comp_addr.unwrap_or(dst_node_addr), Some(c.to_string()))
            }
            None => (dst_node_addr, None),
        };
        let mut node = self.nodes.remove(src).expect("send src exists");
        if node.crashed {
            self.nodes.insert(src.to_string(), node);
            return;
        }
        let mut payload = vec![0u8; payload_len];
        node.rng.fill_bytes(&mut payload);
        let plaintext = match &framed_component {
            Some(c) => encode_bus_payload(c, &payload),
            None => payload,
        };
        let Some(session) = node.sessions.get_mut(&dst_node_addr) else {
            self.nodes.insert(src.to_string(), node);
            self.metrics.bump("send_no_session");
            return;
        };
        match session.seal(&plaintext) {
            Ok(record) => {
                let route = self.app_route(&node, &route_addr);
                self.nodes.insert(src.to_string(), node);
                match route {
                    Ok(path) => {
                        self.metrics.bump("app_sends");
                        self.send_on_path(path, NetMsg::Sealed(record));
                    }
                    Err(_) => self.metrics.bump("route_fail"),
                }
            }
            Err(_) => {
                self.nodes.insert(src.to_string(), node);
                self.metrics.bump("send_no_session");
            }
        }
    }

    // -- adversary behaviors -----------------------------------------------------

    fn on_adv_inject(&mut self, idx: usize) {
        if !self.adversaries[idx].active(self.now) {
            return;
        }
        let label = self.adversaries[idx].label.clone();
        let (targets, rate) = match &self.adversaries[idx].spec.kind {
            AdversaryKind::Dos { target, rate } => (vec![target.clone()], *rate),
            AdversaryKind::Ddos { targets, rate } => (targets.clone(), *rate),
            _ => return,
        };
        for target in &targets {
            for _ in 0..rate {
                self.send_direct(&label, target, NetMsg::Junk);
                self.metrics.bump("dos_injected");
            }
        }
        let next = self.now + 1;
        if next <= self.t_end && next < self.adversaries[idx].spec.end {
            self.push_event(next, EventKind::AdvInject(idx));
        }
    }

    fn honest_endpoint_targets(&self) -> Vec<String> {
        self.nodes
            .values()
            .filter(|n| {
                !n.adversary
                    && n.replica.is_none()
                    && matches!(n.kind, NodeKindSpec::Vehicle | NodeKindSpec::Pedestrian)
            })
            .map(|n| n.id.clone())
            .collect()
    }

    fn on_adv_launch(&mut self, idx: usize) {
        let kind = self.adversaries[idx].spec.kind.clone();
        let label = self.adversaries[idx].label.clone();
        match kind {
            AdversaryKind::Sybil { count, .. } => {
                let targets = self.honest_endpoint_targets();
                for i in 0..count {
                    let id = format!("{label}-{i}");
                    let (fake_addr, key) = {
                        let n = &self.nodes[&id];
                        (n.identity.address, n.identity.key.clone())
                    };
                    // forged self-registration: the claimed address is not
                    // derived from the presented key
                    let tx = LedgerTransaction::signed(
                        TxPayload::RegisterIdentity {
                            verify_key: key.verify_key().to_vec(),
                            role: Role::Vehicle,
                        },
                        fake_addr,
                        &key,
                    );
                    self.forged_txs.insert(tx.digest());
                    let req = RequestMsg::signed(vec![tx], fake_addr, u64::from(i), &key);
                    self.metrics.bump("forged_requests");
                    let seq = self.next_trace_seq();
                    self.trace.push(TraceLine::Adversary {
                        at: self.now,
                        seq,
                        kind: "sybil".into(),
                        node: id.clone(),
                        detail: "forged registration submitted".into(),
                    });
                    self.submit_request(&id, req);

                    // handshake attempts under the fabricated identity
                    for target in &targets {
                        let target_addr = self.nodes[target].identity.address;
                        let (nonce, eph_seed) = {
                            let adv = &mut self.adversaries[idx];
                            let mut nonce = [0u8; bisa::NONCE_LEN];
                            adv.rng.fill_bytes(&mut nonce);
                            let mut s = [0u8; 32];
                            adv.rng.fill_bytes(&mut s);
                            (nonce, s)
                        };
                        let ephemeral = Provider::agreement_secret_from_seed(&eph_seed);
                        let hello = HandshakeMessage {
                            step: HandshakeStep::Hello,
                            sender_addr: fake_addr,
                            peer_addr: target_addr,
                            nonce,
                            echo_nonce: [0u8; bisa::NONCE_LEN],
                            ephemeral_pub: ephemeral.public().to_vec(),
                            transcript_sig: Vec::new(),
                        };
                        self.metrics.bump("adversary_handshakes");
                        self.send_via_bfs(&id, target, NetMsg::Handshake(Box::new(hello)));
                    }
                }
            }
            AdversaryKind::Impersonation { victim, .. } => {
                let (victim_addr, key) = {
                    let n = &self.nodes[&label];
                    (n.identity.address, n.identity.key.clone())
                };
                // forged registration under the victim's address
                let tx = LedgerTransaction::signed(
                    TxPayload::RegisterIdentity {
                        verify_key: key.verify_key().to_vec(),
                        role: Role::Vehicle,
                    },
                    victim_addr,
                    &key,
                );
                self.forged_txs.insert(tx.digest());
                let req = RequestMsg::signed(vec![tx], victim_addr, 0, &key);
                self.metrics.bump("forged_requests");
                let seq = self.next_trace_seq();
                self.trace.push(TraceLine::Adversary {
                    at: self.now,
                    seq,
                    kind: "impersonation".into(),
                    node: label.clone(),
                    detail: format!("claiming address of {victim}"),
                });
                self.submit_request(&label, req);

                // handshakes claiming the victim's address: the transcript
                // signature cannot verify against the victim's registered key
                let targets: Vec<String> = self
                    .honest_endpoint_targets()
                    .into_iter()
                    .filter(|t| *t != victim)
                    .collect();
                for target in targets {
                    let target_addr = self.nodes[&target].identity.address;
                    let mut node = self.nodes.remove(&label).unwrap();
                    let seed = node.draw32();
                    self.metrics.bump("adversary_handshakes");
                    match bisa::initiate(&node.identity, target_addr, &node.ledger_view, &seed) {
                        Ok((pending, hello)) => {
                            node.pending_hs.insert(target_addr, pending);
                            self.nodes.insert(label.clone(), node);
                            self.send_via_bfs(&label, &target, NetMsg::Handshake(Box::new(hello)));
                        }
                        Err(_) => {
                            self.nodes.insert(label.clone(), node);
                            self.metrics.bump("adversary_handshake_stillborn");
                        }
                    }
                }
            }
            _ => {}
        }
    }

    // -- end of run ----------------------------------------------------------------

    /// Sweep unfinished work, compute end-of-run metrics, and hand over the
    /// trace and artifacts.
    pub fn finish(mut self) -> RunOutcome {
        self.now = self.t_end;
        // messages still in flight or queued behind full inboxes expire
        let leftovers: Vec<EventKind> = std::mem::take(&mut self.queue).into_values().collect();
        for kind in leftovers {
            if let EventKind::Deliver(env) = kind {
                let node = env.path[env.hop].clone();
                let seq = self.next_trace_seq();
                self.trace.push(TraceLine::Expired {
                    at: self.t_end,
                    seq,
                    id: env.id,
                    node,
                });
                self.metrics.bump("expired");
            }
        }
        let node_ids: Vec<String> = self.nodes.keys().cloned().collect();
        for id in &node_ids {
            let drained: Vec<u64> = self
                .nodes
                .get_mut(id)
                .unwrap()
                .inbox
                .drain(..)
                .map(|e| e.id)
                .collect();
            for msg_id in drained {
                let seq = self.next_trace_seq();
                self.trace.push(TraceLine::Expired {
                    at: self.t_end,
                    seq,
                    id: msg_id,
                    node: id.clone(),
                });
                self.metrics.bump("expired");
            }
        }

        // staleness: live resolvers compared to the committed name map
        let reference = self
            .validators
            .iter()
            .filter_map(|v| self.nodes.get(v))
            .find(|n| !n.crashed)
            .and_then(|n| n.replica.as_ref())
            .map(|r| r.ledger.clone());
        if let Some(reference) = reference {
            let mut stale = 0u64;
            for node in self.nodes.values() {
                if node.crashed || node.adversary || node.replica.is_some() {
                    continue;
                }
                for (addr, rec) in &reference.dbnr {
                    let fresh = node
                        .resolver
                        .entries
                        .get(addr)
                        .map(|r| r.version == rec.version)
                        .unwrap_or(false);
                    if !fresh {
                        stale += 1;
                    }
                }
            }
            self.metrics.add("staleness", stale);
            self.metrics
                .set_max("chain_height", reference.head.height);
        }

        let sends = self.metrics.get("sends");
        let delivered = self.metrics.get("delivered");
        if sends > 0 {
            self.metrics
                .ratios
                .insert("delivery_ratio".into(), delivered as f64 / sends as f64);
        }
        let relay_dropped = self.metrics.get("relay_dropped");
        let relay_total = relay_dropped + self.metrics.get("relay_forwarded");
        if relay_total > 0 {
            self.metrics.ratios.insert(
                "relay_drop_fraction".into(),
                relay_dropped as f64 / relay_total as f64,
            );
        }
        if !self.latencies.is_empty() {
            let mut sorted = self.latencies.clone();
            sorted.sort_unstable();
            let sum: u64 = sorted.iter().sum();
            self.metrics.ratios.insert(
                "latency_mean".into(),
                sum as f64 / sorted.len() as f64,
            );
            let p95 = sorted[(sorted.len() * 95).div_euclid(100).min(sorted.len() - 1)];
            self.metrics.ratios.insert("latency_p95".into(), p95 as f64);
        }

        let mut decision_logs = BTreeMap::new();
        for v in &self.validators {
            if let Some(replica) = self.nodes.get(v).and_then(|n| n.replica.as_ref()) {
                let mut out = String::new();
                for entry in replica.decision_log() {
                    out.push_str(&serde_json::to_string(entry).unwrap());
                    out.push('\n');
                }
                decision_logs.insert(v.clone(), out);
            }
        }

        RunOutcome {
            trace: self.trace,
            metrics: self.metrics,
            genesis_json: self.genesis_json,
            decision_logs,
        }
    }
}

fn apply_tamper(msg: &mut NetMsg, strategy: TamperStrategy, rng: &mut ChaCha8Rng) -> bool {
    match (strategy, msg) {
        (TamperStrategy::FlipSealedBody, NetMsg::Sealed(record)) => {
            if record.body.is_empty() {
                return false;
            }
            let i = rng.random_range(0..record.body.len());
            let bit = rng.random_range(0..8u32);
            record.body[i] ^= 1 << bit;
            true
        }
        (TamperStrategy::ReplaceEphemeral, NetMsg::Handshake(hs)) => {
            if hs.step != HandshakeStep::Response && hs.step != HandshakeStep::Hello {
                return false;
            }
            let mut seed = [0u8; 32];
            rng.fill_bytes(&mut seed);
            hs.ephemeral_pub = Provider::agreement_secret_from_seed(&seed)
                .public()
                .to_vec();
            true
        }
        (TamperStrategy::FlipTranscriptSig, NetMsg::Handshake(hs)) => {
            if hs.transcript_sig.is_empty() {
                return false;
            }
            let i = rng.random_range(0..hs.transcript_sig.len());
            let bit = rng.random_range(0..8u32);
            hs.transcript_sig[i] ^= 1 << bit;
            true
        }
        _ => false,
    }
}

/// Recompute the trace-derivable counters and ratios from a trace alone.
/// The live run keeps a superset (protocol-internal counters the trace does
/// not carry), but on the shared keys the two must agree.
pub fn collect_metrics(lines: &[TraceLine]) -> Metrics {
    let mut m = Metrics::default();
    let mut send_times: BTreeMap<u64, u64> = BTreeMap::new();
    let mut latencies = Vec::new();
    for line in lines {
        match line {
            TraceLine::Send { id, at, .. } => {
                m.bump("sends");
                send_times.insert(*id, *at);
            }
            TraceLine::Delivered { id, at, .. } => {
                m.bump("delivered");
                if let Some(sent) = send_times.get(id) {
                    latencies.push(at - sent);
                }
            }
            TraceLine::DropLoss { .. } => m.bump("drop_loss"),
            TraceLine::DropAdv { .. } => m.bump("drop_adv"),
            TraceLine::Expired { .. } => m.bump("expired"),
            TraceLine::Commit { height, .. } => {
                m.bump("commits");
                m.set_max("chain_height", *height);
            }
            TraceLine::ViewChange { view, .. } => {
                m.bump("view_changes");
                m.set_max("max_view", *view);
            }
            TraceLine::Handshake { outcome, .. } => {
                if outcome == "established" {
                    m.bump("sessions_established");
                }
            }
            TraceLine::Bus {
                sensitivity,
                outcome,
                ..
            } => {
                if outcome == "blocked" {
                    m.bump("isolation_blocked");
                } else if sensitivity == "sensitive" {
                    m.bump("external_delivered_sensitive");
                } else {
                    m.bump("external_delivered_nonsensitive");
                }
            }
            TraceLine::Decision { accepted, .. } => {
                if *accepted {
                    m.bump("accepted_inputs");
                } else {
                    m.bump("excluded_inputs");
                }
            }
            TraceLine::Refresh { .. } => m.bump("refreshes"),
            TraceLine::RequestAccepted { .. } => m.bump("requests_accepted"),
            _ => {}
        }
    }
    let sends = m.get("sends");
    if sends > 0 {
        m.ratios.insert(
            "delivery_ratio".into(),
            m.get("delivered") as f64 / sends as f64,
        );
    }
    if !latencies.is_empty() {
        latencies.sort_unstable();
        let sum: u64 = latencies.iter().sum();
        m.ratios
            .insert("latency_mean".into(), sum as f64 / latencies.len() as f64);
        let p95 = latencies[(latencies.len() * 95).div_euclid(100).min(latencies.len() - 1)];
        m.ratios.insert("latency_p95".into(), p95 as f64);
    }
    m
}
