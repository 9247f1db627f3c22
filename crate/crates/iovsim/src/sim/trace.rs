//! JSONL trace emitted by the simulator and re-checked offline.
//!
//! The first line is a header; every following line is one trace event in
//! execution order. Message lifecycles obey a conservation rule: each `send`
//! is closed by exactly one of `delivered`, `drop_loss`, `drop_adv`, or
//! `expired`.

use serde::{Deserialize, Serialize};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NodeInfo {
    pub id: String,
    pub kind: String,
    pub address: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceLine {
    Header {
        schema_version: u32,
        scenario: String,
        seed: u64,
        t_end: u64,
        nodes: Vec<NodeInfo>,
        validators: Vec<String>,
        adversaries: Vec<String>,
    },
    /// A message enters the network at its origin.
    Send {
        at: u64,
        seq: u64,
        id: u64,
        src: String,
        dst: String,
        kind: String,
        path: Vec<String>,
    },
    /// One link traversal; `arrive_at` = `at` + link latency.
    Hop {
        at: u64,
        seq: u64,
        id: u64,
        from: String,
        to: String,
        latency: u64,
        arrive_at: u64,
    },
    /// Terminal: the destination node processed the message.
    Delivered {
        at: u64,
        seq: u64,
        id: u64,
        node: String,
    },
    /// Terminal: lost on a link (or no route to the next hop).
    DropLoss {
        at: u64,
        seq: u64,
        id: u64,
        link: String,
        reason: String,
    },
    /// Terminal: an adversary dropped it.
    DropAdv {
        at: u64,
        seq: u64,
        id: u64,
        node: String,
        adversary: String,
    },
    /// Terminal: evicted from a full inbox or still pending at the end.
    Expired {
        at: u64,
        seq: u64,
        id: u64,
        node: String,
    },
    Commit {
        at: u64,
        seq: u64,
        node: String,
        height: u64,
        digest: String,
    },
    ViewChange {
        at: u64,
        seq: u64,
        node: String,
        view: u64,
    },
    Handshake {
        at: u64,
        seq: u64,
        node: String,
        peer: String,
        outcome: String,
        cause: Option<String>,
        initiator_node: String,
        key_match: Option<bool>,
    },
    /// Gateway-to-bus routing outcome for one external message.
    Bus {
        at: u64,
        seq: u64,
        node: String,
        component: String,
        origin: String,
        sensitivity: String,
        outcome: String,
    },
    Decision {
        at: u64,
        seq: u64,
        node: String,
        source: Option<String>,
        accepted: bool,
    },
    Refresh {
        at: u64,
        seq: u64,
        node: String,
        height: u64,
    },
    Adversary {
        at: u64,
        seq: u64,
        kind: String,
        node: String,
        detail: String,
    },
    RequestAccepted {
        at: u64,
        seq: u64,
        node: String,
        request: String,
    },
}

pub fn to_jsonl(lines: &[TraceLine]) -> String {
    let mut out = String::new();
    for line in lines {
        out.push_str(&serde_json::to_string(line).expect("trace lines serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<TraceLine>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e.to_string())))
        .collect()
}
