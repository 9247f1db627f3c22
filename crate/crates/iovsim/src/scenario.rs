//! Scenario configuration, the run pipeline, and offline trace verification.
//!
//! Scenarios are JSON files with a `schema_version` field. Loading fully
//! validates cross-references (every mentioned node exists, validators are
//! infrastructure nodes, probabilities are in range) so the simulator can
//! assume a well-formed world.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::trace::TraceLine;
use crate::sim::{Metrics, World};
use crate::vehicle::{ComponentKind, Sensitivity};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub t_end: u64,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
    pub validator_set: Vec<String>,
    #[serde(default)]
    pub adversaries: Vec<AdversarySpec>,
    #[serde(default)]
    pub workload: Vec<WorkloadItem>,
    #[serde(default)]
    pub expectations: Vec<Expectation>,
    #[serde(default)]
    pub options: SimOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKindSpec {
    Rsu,
    EdgeServer,
    CloudServer,
    Vehicle,
    Pedestrian,
}

impl NodeKindSpec {
    pub fn is_infrastructure(self) -> bool {
        matches!(self, NodeKindSpec::Rsu | NodeKindSpec::EdgeServer)
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeKindSpec::Rsu => "rsu",
            NodeKindSpec::EdgeServer => "edge_server",
            NodeKindSpec::CloudServer => "cloud_server",
            NodeKindSpec::Vehicle => "vehicle",
            NodeKindSpec::Pedestrian => "pedestrian",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKindSpec,
    /// Serving RSU / edge server; required for every non-infrastructure node.
    #[serde(default)]
    pub attachment: Option<String>,
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
    #[serde(default)]
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub crash_at: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComponentSpec {
    pub component_id: String,
    pub kind: ComponentKind,
    pub sensitivity: Sensitivity,
    #[serde(default)]
    pub export: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Waypoint {
    pub at: u64,
    pub attach: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
    #[serde(default = "default_latency")]
    pub latency: u64,
    #[serde(default)]
    pub loss_prob: f64,
}

fn default_latency() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperStrategy {
    /// Flip one bit in a sealed record body.
    FlipSealedBody,
    /// Substitute the adversary's ephemeral public key in a handshake.
    ReplaceEphemeral,
    /// Flip one bit in a handshake transcript signature.
    FlipTranscriptSig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversaryKind {
    /// One attacker presenting `count` fabricated identities from a single
    /// key; fakes attempt registration and handshakes with every honest
    /// non-infrastructure node.
    Sybil { count: u32, attach: String },
    Dos { target: String, rate: u32 },
    Ddos { targets: Vec<String>, rate: u32 },
    BlackHole { relay: String },
    GreyHole { relay: String, drop_prob: f64 },
    /// A node claiming `victim`'s address with its own keys.
    Impersonation { victim: String, attach: String },
    /// On-path attacker substituting ephemeral keys on a link.
    Mitm { link: (String, String) },
    Tamper {
        link: (String, String),
        strategy: TamperStrategy,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdversarySpec {
    #[serde(flatten)]
    pub kind: AdversaryKind,
    #[serde(default)]
    pub start: u64,
    #[serde(default = "default_end")]
    pub end: u64,
}

fn default_end() -> u64 {
    u64::MAX
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Mutual authentication between two endpoint nodes.
    Handshake { initiator: String, responder: String },
    /// Sealed application messages over an established session; sends to a
    /// vehicle must name a destination component.
    Send {
        src: String,
        dst: String,
        #[serde(default)]
        component: Option<String>,
        #[serde(default = "default_one")]
        repeat: u64,
        #[serde(default = "default_one")]
        interval: u64,
        #[serde(default = "default_payload_len")]
        payload_len: usize,
    },
    /// An infrastructure identity revokes a target identity on the ledger.
    Revoke { by: String, target: String },
    /// Unauthenticated plaintext pushed at a node (no session, no seal).
    Inject { target: String },
}

fn default_one() -> u64 {
    1
}

fn default_payload_len() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WorkloadItem {
    pub at: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Eq,
    Le,
    Ge,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Expectation {
    pub metric: String,
    pub op: Op,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SimOptions {
    /// Ticks between ledger pulls at non-validator nodes.
    pub refresh_interval: u64,
    /// Bounded per-node inbox; overflow evicts the oldest entry.
    pub inbox_capacity: usize,
    /// Messages a node processes per tick.
    pub processing_budget: usize,
    /// Latency of the implicit validator full mesh and attachment links.
    pub backbone_latency: u64,
    pub view_timeout: u64,
    pub checkpoint_interval: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            refresh_interval: 20,
            inbox_capacity: 64,
            processing_budget: 4,
            backbone_latency: 1,
            view_timeout: crate::pbft::DEFAULT_VIEW_TIMEOUT,
            checkpoint_interval: crate::pbft::DEFAULT_CHECKPOINT_INTERVAL,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Validation(String),
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    validate_scenario(&scenario)?;
    Ok(scenario)
}

fn validate_scenario(s: &Scenario) -> Result<(), ScenarioError> {
    let fail = |msg: String| Err(ScenarioError::Validation(msg));
    if s.schema_version != SCENARIO_SCHEMA_VERSION {
        return fail(format!(
            "schema_version {} is not supported (expected {})",
            s.schema_version, SCENARIO_SCHEMA_VERSION
        ));
    }
    if s.t_end == 0 {
        return fail("t_end must be positive".into());
    }
    let mut ids = BTreeSet::new();
    for node in &s.nodes {
        if !ids.insert(node.id.as_str()) {
            return fail(format!("duplicate node id {:?}", node.id));
        }
    }
    let known = |id: &str| ids.contains(id);
    let kind_of = |id: &str| s.nodes.iter().find(|n| n.id == id).map(|n| n.kind);
    let infra = |id: &str| kind_of(id).is_some_and(|k| k.is_infrastructure());

    for node in &s.nodes {
        let is_vehicle = node.kind == NodeKindSpec::Vehicle;
        if !node.kind.is_infrastructure() {
            match &node.attachment {
                None => {
                    return fail(format!("node {:?} needs an attachment", node.id));
                }
                Some(att) if !infra(att) => {
                    return fail(format!(
                        "attachment {att:?} of node {:?} is not a declared RSU or edge server",
                        node.id
                    ));
                }
                _ => {}
            }
        }
        if !is_vehicle && !node.components.is_empty() {
            return fail(format!(
                "node {:?} declares components but is not a vehicle",
                node.id
            ));
        }
        if is_vehicle {
            // exactly-one-gateway and sensitivity rules
            let descriptors = node
                .components
                .iter()
                .map(|c| crate::vehicle::ComponentDescriptor {
                    component_id: c.component_id.clone(),
                    kind: c.kind,
                    sensitivity: c.sensitivity,
                    address: None,
                })
                .collect();
            if let Err(e) = crate::vehicle::VehicleBus::new(node.id.clone(), descriptors) {
                return fail(format!("vehicle {:?}: {e}", node.id));
            }
            for c in &node.components {
                if c.export && c.sensitivity == Sensitivity::Sensitive {
                    return fail(format!(
                        "vehicle {:?}: component {:?} is sensitive and cannot be exported",
                        node.id, c.component_id
                    ));
                }
            }
        }
        for wp in &node.waypoints {
            if !infra(&wp.attach) {
                return fail(format!(
                    "waypoint of node {:?} attaches to unknown or non-infrastructure node {:?}",
                    node.id, wp.attach
                ));
            }
        }
    }

    if s.validator_set.is_empty() {
        return fail("validator_set must not be empty".into());
    }
    for v in &s.validator_set {
        if !known(v) {
            return fail(format!("validator_set references undeclared node {v:?}"));
        }
        if !infra(v) {
            return fail(format!(
                "validator_set entry {v:?} is not an RSU or edge server"
            ));
        }
    }

    for link in &s.links {
        for end in [&link.a, &link.b] {
            if !known(end) {
                return fail(format!("link references undeclared node {end:?}"));
            }
        }
        if !(0.0..=1.0).contains(&link.loss_prob) {
            return fail(format!(
                "link {}-{} loss_prob {} outside [0, 1]",
                link.a, link.b, link.loss_prob
            ));
        }
    }

    for adv in &s.adversaries {
        match &adv.kind {
            AdversaryKind::Sybil { attach, count } => {
                if *count == 0 {
                    return fail("sybil adversary count must be positive".into());
                }
                if !infra(attach) {
                    return fail(format!("sybil attach {attach:?} is not infrastructure"));
                }
            }
            AdversaryKind::Dos { target, .. } => {
                if !known(target) {
                    return fail(format!("dos target {target:?} is not declared"));
                }
            }
            AdversaryKind::Ddos { targets, .. } => {
                for t in targets {
                    if !known(t) {
                        return fail(format!("ddos target {t:?} is not declared"));
                    }
                }
            }
            AdversaryKind::BlackHole { relay } | AdversaryKind::GreyHole { relay, .. } => {
                if !known(relay) {
                    return fail(format!("relay {relay:?} is not declared"));
                }
                if let AdversaryKind::GreyHole { drop_prob, .. } = &adv.kind {
                    if !(0.0..=1.0).contains(drop_prob) {
                        return fail(format!("grey hole drop_prob {drop_prob} outside [0, 1]"));
                    }
                }
            }
            AdversaryKind::Impersonation { victim, attach } => {
                if !known(victim) {
                    return fail(format!("impersonation victim {victim:?} is not declared"));
                }
                if !infra(attach) {
                    return fail(format!(
                        "impersonation attach {attach:?} is not infrastructure"
                    ));
                }
            }
            AdversaryKind::Mitm { link } | AdversaryKind::Tamper { link, .. } => {
                for end in [&link.0, &link.1] {
                    if !known(end) {
                        return fail(format!("adversary link references undeclared node {end:?}"));
                    }
                }
            }
        }
    }

    for item in &s.workload {
        match &item.action {
            Action::Handshake {
                initiator,
                responder,
            } => {
                for n in [initiator, responder] {
                    if !known(n) {
                        return fail(format!("handshake references undeclared node {n:?}"));
                    }
                }
                if initiator == responder {
                    return fail(format!("handshake of {initiator:?} with itself"));
                }
            }
            Action::Send {
                src,
                dst,
                component,
                ..
            } => {
                for n in [src, dst] {
                    if !known(n) {
                        return fail(format!("send references undeclared node {n:?}"));
                    }
                }
                let dst_spec = s.nodes.iter().find(|n| &n.id == dst).unwrap();
                match component {
                    Some(c) => {
                        if dst_spec.kind != NodeKindSpec::Vehicle {
                            return fail(format!(
                                "send names component {c:?} but {dst:?} is not a vehicle"
                            ));
                        }
                        if !dst_spec.components.iter().any(|k| &k.component_id == c) {
                            return fail(format!(
                                "send references undeclared component {c:?} of {dst:?}"
                            ));
                        }
                    }
                    None => {
                        if dst_spec.kind == NodeKindSpec::Vehicle {
                            return fail(format!(
                                "send to vehicle {dst:?} must name a destination component"
                            ));
                        }
                    }
                }
            }
            Action::Revoke { by, target } => {
                if !infra(by) {
                    return fail(format!(
                        "revoke issuer {by:?} is not an RSU or edge server"
                    ));
                }
                if !known(target) {
                    return fail(format!("revoke target {target:?} is not declared"));
                }
            }
            Action::Inject { target } => {
                if !known(target) {
                    return fail(format!("inject target {target:?} is not declared"));
                }
            }
        }
        if item.at > s.t_end {
            return fail(format!("workload action at t={} is after t_end", item.at));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics report and expectations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ExpectationResult {
    pub metric: String,
    pub op: Op,
    pub value: f64,
    pub actual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub counters: std::collections::BTreeMap<String, u64>,
    pub ratios: std::collections::BTreeMap<String, f64>,
    pub expectations: Vec<ExpectationResult>,
    pub pass: bool,
}

impl MetricsReport {
    pub fn from_metrics(
        scenario: &Scenario,
        seed: u64,
        metrics: &Metrics,
    ) -> MetricsReport {
        let lookup = |name: &str| -> f64 {
            if let Some(v) = metrics.counters.get(name) {
                return *v as f64;
            }
            metrics.ratios.get(name).copied().unwrap_or(0.0)
        };
        let expectations: Vec<ExpectationResult> = scenario
            .expectations
            .iter()
            .map(|e| {
                let actual = lookup(&e.metric);
                let pass = match e.op {
                    Op::Eq => (actual - e.value).abs() < f64::EPSILON,
                    Op::Le => actual <= e.value,
                    Op::Ge => actual >= e.value,
                };
                ExpectationResult {
                    metric: e.metric.clone(),
                    op: e.op,
                    value: e.value,
                    actual,
                    pass,
                }
            })
            .collect();
        let pass = expectations.iter().all(|e| e.pass);
        MetricsReport {
            scenario: scenario.name.clone(),
            seed,
            counters: metrics.counters.clone(),
            ratios: metrics.ratios.clone(),
            expectations,
            pass,
        }
    }
}

// ---------------------------------------------------------------------------
// run pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub trace_path: PathBuf,
    pub metrics_path: PathBuf,
    pub report: MetricsReport,
}

/// Execute a scenario end to end: build the world, run to `t_end`, write
/// trace.jsonl / metrics.json / genesis.json / per-replica decision logs
/// under `<out>/<scenario name>/`.
pub fn run_scenario(
    scenario: &Scenario,
    overrides: &RunOverrides,
) -> anyhow::Result<RunArtifacts> {
    let seed = overrides.seed.unwrap_or(scenario.seed);
    let out_root = overrides
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"));
    let dir = out_root.join(&scenario.name);
    std::fs::create_dir_all(&dir)?;

    let mut world = World::new(scenario, seed);
    world.run();
    let outcome = world.finish();

    let trace_path = dir.join("trace.jsonl");
    std::fs::write(&trace_path, crate::sim::trace::to_jsonl(&outcome.trace))?;

    let report = MetricsReport::from_metrics(scenario, seed, &outcome.metrics);
    let metrics_path = dir.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&report)?)?;

    std::fs::write(dir.join("genesis.json"), &outcome.genesis_json)?;
    let decisions_dir = dir.join("decisions");
    std::fs::create_dir_all(&decisions_dir)?;
    for (node, log) in &outcome.decision_logs {
        std::fs::write(decisions_dir.join(format!("{node}.jsonl")), log)?;
    }

    Ok(RunArtifacts {
        trace_path,
        metrics_path,
        report,
    })
}

// ---------------------------------------------------------------------------
// offline trace verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace invariant {invariant} violated at line {line}: {detail}")]
pub struct VerdictFail {
    pub invariant: &'static str,
    /// 1-based line number of the first offending trace line.
    pub line: usize,
    pub detail: String,
}

/// Re-check global invariants from the trace alone: conservation (every send
/// has exactly one terminal), causality (hop arrivals respect latency,
/// deliveries respect send times), PBFT agreement (one digest per height),
/// and isolation (no external delivery reached a sensitive component).
pub fn verify_trace_lines(lines: &[TraceLine]) -> Result<(), VerdictFail> {
    use std::collections::BTreeMap;

    if !matches!(lines.first(), Some(TraceLine::Header { .. })) {
        return Err(VerdictFail {
            invariant: "header",
            line: 1,
            detail: "trace does not start with a header line".into(),
        });
    }

    // message id -> (send line, send at); terminal counts
    let mut sends: BTreeMap<u64, (usize, u64)> = BTreeMap::new();
    let mut terminals: BTreeMap<u64, usize> = BTreeMap::new();
    let mut commit_digests: BTreeMap<u64, (String, usize)> = BTreeMap::new();

    for (idx, line) in lines.iter().enumerate() {
        let lineno = idx + 1;
        match line {
            TraceLine::Send { id, at, .. } => {
                if sends.insert(*id, (lineno, *at)).is_some() {
                    return Err(VerdictFail {
                        invariant: "conservation",
                        line: lineno,
                        detail: format!("message {id} sent twice"),
                    });
                }
            }
            TraceLine::Hop {
                id,
                at,
                latency,
                arrive_at,
                ..
            } => {
                if !sends.contains_key(id) {
                    return Err(VerdictFail {
                        invariant: "conservation",
                        line: lineno,
                        detail: format!("hop for unsent message {id}"),
                    });
                }
                if *arrive_at < at + latency {
                    return Err(VerdictFail {
                        invariant: "causality",
                        line: lineno,
                        detail: format!(
                            "message {id} arrives at {arrive_at} before {at} + latency {latency}"
                        ),
                    });
                }
            }
            TraceLine::Delivered { id, at, .. }
            | TraceLine::DropLoss { id, at, .. }
            | TraceLine::DropAdv { id, at, .. }
            | TraceLine::Expired { id, at, .. } => {
                let Some((_, sent_at)) = sends.get(id) else {
                    return Err(VerdictFail {
                        invariant: "conservation",
                        line: lineno,
                        detail: format!("terminal for unsent message {id}"),
                    });
                };
                if matches!(line, TraceLine::Delivered { .. }) && at < sent_at {
                    return Err(VerdictFail {
                        invariant: "causality",
                        line: lineno,
                        detail: format!("message {id} delivered at {at} before send at {sent_at}"),
                    });
                }
                if let Some(first) = terminals.insert(*id, lineno) {
                    return Err(VerdictFail {
                        invariant: "conservation",
                        line: lineno,
                        detail: format!(
                            "message {id} has a second terminal (first at line {first})"
                        ),
                    });
                }
            }
            TraceLine::Commit {
                height, digest, ..
            } => match commit_digests.get(height) {
                None => {
                    commit_digests.insert(*height, (digest.clone(), lineno));
                }
                Some((existing, first)) if existing != digest => {
                    return Err(VerdictFail {
                        invariant: "agreement",
                        line: lineno,
                        detail: format!(
                            "height {height} committed as {digest} here but {existing} at line {first}"
                        ),
                    });
                }
                Some(_) => {}
            },
            TraceLine::Bus {
                origin,
                sensitivity,
                outcome,
                ..
            } if origin == "external" && sensitivity == "sensitive" && outcome == "delivered" => {
                return Err(VerdictFail {
                    invariant: "isolation",
                    line: lineno,
                    detail: "external message delivered to a sensitive component".into(),
                });
            }
            _ => {}
        }
    }

    for (id, (line, _)) in &sends {
        if !terminals.contains_key(id) {
            return Err(VerdictFail {
                invariant: "conservation",
                line: *line,
                detail: format!("message {id} has no terminal event"),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("trace line {line} does not parse: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Verdict(#[from] VerdictFail),
}

pub fn verify_trace(path: &Path) -> Result<(), VerifyError> {
    let text = std::fs::read_to_string(path).map_err(|source| VerifyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let lines = crate::sim::trace::from_jsonl(&text)
        .map_err(|(line, message)| VerifyError::Parse { line, message })?;
    verify_trace_lines(&lines)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// bundled corpus
// ---------------------------------------------------------------------------

/// The bundled scenario corpus: names and JSON sources.
pub fn bundled_scenarios() -> Vec<(&'static str, &'static str)> {
    vec![
        ("baseline", include_str!("../scenarios/baseline.json")),
        ("sybil", include_str!("../scenarios/sybil.json")),
        (
            "impersonation",
            include_str!("../scenarios/impersonation.json"),
        ),
        ("dos", include_str!("../scenarios/dos.json")),
        ("ddos", include_str!("../scenarios/ddos.json")),
        ("blackhole", include_str!("../scenarios/blackhole.json")),
        ("greyhole", include_str!("../scenarios/greyhole.json")),
        ("mitm", include_str!("../scenarios/mitm.json")),
        ("tamper", include_str!("../scenarios/tamper.json")),
        ("mobility", include_str!("../scenarios/mobility.json")),
        (
            "revocation_race",
            include_str!("../scenarios/revocation_race.json"),
        ),
        (
            "primary_crash",
            include_str!("../scenarios/primary_crash.json"),
        ),
        (
            "combined_attack",
            include_str!("../scenarios/combined_attack.json"),
        ),
    ]
}
