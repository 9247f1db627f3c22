//! PBFT replication of the identity ledger across RSU / edge-server
//! validators.
//!
//! Replicas run the classic three-phase protocol (pre-prepare, prepare,
//! commit) with `f = ⌊(n−1)/3⌋`, plus one modification: the primary batches
//! all pending client requests into a single block per sequence number, and
//! proposes the next block only after the previous one committed locally.
//! Sequence numbers therefore equal chain heights.
//!
//! A backup accepts a pre-prepare only if it can rebuild the proposed block
//! deterministically from the carried request batch and its own ledger
//! state, so a Byzantine primary cannot smuggle transactions that no client
//! signed. Liveness is restored by view changes: backups arm a timer per
//! outstanding request and broadcast `ViewChange` when it fires; the next
//! primary assembles a `NewView` from a commit-quorum of view-change
//! messages, re-proposing the highest prepared certificate if one exists.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::crypto::{CryptoProvider, Digest32, Provider, SigningKey};
use crate::ledger::{Block, BlockchainAddress, LedgerState, LedgerTransaction, TxError};
use crate::wire::{self, Decode, Encode, Reader, WireError};

/// How many future-view / future-sequence messages a replica buffers before
/// dropping new ones.
pub const BUFFER_WINDOW: usize = 64;

pub const DEFAULT_VIEW_TIMEOUT: u64 = 50;
pub const DEFAULT_CHECKPOINT_INTERVAL: u64 = 16;

/// `f = ⌊(n−1)/3⌋`; returns `(f, prepare_quorum, commit_quorum, reply_quorum)`
/// = `(f, 2f, 2f+1, f+1)`.
pub fn quorum_sizes(n: usize) -> (usize, usize, usize, usize) {
    assert!(n >= 1, "validator set must be non-empty");
    let f = (n - 1) / 3;
    (f, 2 * f, 2 * f + 1, f + 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatorSetConfig {
    pub validators: Vec<BlockchainAddress>,
    pub view_timeout: u64,
    pub checkpoint_interval: u64,
}

impl ValidatorSetConfig {
    pub fn new(validators: Vec<BlockchainAddress>) -> Self {
        assert!(!validators.is_empty());
        ValidatorSetConfig {
            validators,
            view_timeout: DEFAULT_VIEW_TIMEOUT,
            checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL,
        }
    }

    pub fn n(&self) -> usize {
        self.validators.len()
    }

    pub fn f(&self) -> usize {
        quorum_sizes(self.n()).0
    }

    pub fn prepare_quorum(&self) -> usize {
        quorum_sizes(self.n()).1
    }

    pub fn commit_quorum(&self) -> usize {
        quorum_sizes(self.n()).2
    }

    pub fn reply_quorum(&self) -> usize {
        quorum_sizes(self.n()).3
    }

    pub fn primary_for(&self, view: u64) -> BlockchainAddress {
        self.validators[(view % self.n() as u64) as usize]
    }

    pub fn is_validator(&self, addr: &BlockchainAddress) -> bool {
        self.validators.contains(addr)
    }
}

// ---------------------------------------------------------------------------
// message family
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestMsg {
    pub txs: Vec<LedgerTransaction>,
    pub client: BlockchainAddress,
    pub request_id: u64,
    pub sig: Vec<u8>,
}

impl RequestMsg {
    pub fn digest(&self) -> Digest32 {
        Provider::hash(&self.unsigned_encoding())
    }

    fn unsigned_encoding(&self) -> Vec<u8> {
        RequestMsg {
            sig: Vec::new(),
            ..self.clone()
        }
        .encode()
    }

    pub fn signed(
        txs: Vec<LedgerTransaction>,
        client: BlockchainAddress,
        request_id: u64,
        key: &SigningKey,
    ) -> Self {
        let mut req = RequestMsg {
            txs,
            client,
            request_id,
            sig: Vec::new(),
        };
        req.sig = Provider::sign(key, &req.unsigned_encoding());
        req
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrePrepareMsg {
    pub view: u64,
    pub seq: u64,
    pub digest: Digest32,
    pub block: Block,
    pub requests: Vec<RequestMsg>,
    pub sender: BlockchainAddress,
    pub sig: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prepare,
    Commit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseMsg {
    pub phase: Phase,
    pub view: u64,
    pub seq: u64,
    pub digest: Digest32,
    pub sender: BlockchainAddress,
    pub sig: Vec<u8>,
}

/// Per-transaction accept/reject outcome carried back to the client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TxOutcome {
    #[serde(serialize_with = "ser_hex32")]
    pub tx_digest: Digest32,
    pub accepted: bool,
    pub reason: String,
}

fn ser_hex32<S: serde::Serializer>(v: &Digest32, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(v))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyMsg {
    pub view: u64,
    pub seq: u64,
    pub request_digest: Digest32,
    pub outcomes: Vec<TxOutcome>,
    pub client: BlockchainAddress,
    pub sender: BlockchainAddress,
    pub sig: Vec<u8>,
}

impl ReplyMsg {
    /// Digest the client matches across replicas; excludes view/seq so
    /// replies from different views still agree on the result.
    pub fn result_digest(&self) -> Digest32 {
        let mut bytes = self.request_digest.to_vec();
        wire::put_list(&mut bytes, &self.outcomes);
        Provider::hash(&bytes)
    }
}

/// Certificate that some digest prepared at `(view, seq)`; carried in
/// view-change messages so the next primary can re-propose it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedCert {
    pub view: u64,
    pub seq: u64,
    pub digest: Digest32,
    pub block: Block,
    pub requests: Vec<RequestMsg>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewChangeMsg {
    pub new_view: u64,
    pub last_stable: u64,
    pub prepared: Option<PreparedCert>,
    pub sender: BlockchainAddress,
    pub sig: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewViewMsg {
    pub view: u64,
    pub view_changes: Vec<ViewChangeMsg>,
    pub pre_prepare: Option<PrePrepareMsg>,
    pub sender: BlockchainAddress,
    pub sig: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMsg {
    pub seq: u64,
    pub state_digest: Digest32,
    pub sender: BlockchainAddress,
    pub sig: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConsensusMessage {
    Request(RequestMsg),
    PrePrepare(PrePrepareMsg),
    Prepare(PhaseMsg),
    Commit(PhaseMsg),
    Reply(ReplyMsg),
    ViewChange(ViewChangeMsg),
    NewView(NewViewMsg),
    Checkpoint(CheckpointMsg),
}

impl ConsensusMessage {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ConsensusMessage::Request(_) => "Request",
            ConsensusMessage::PrePrepare(_) => "PrePrepare",
            ConsensusMessage::Prepare(_) => "Prepare",
            ConsensusMessage::Commit(_) => "Commit",
            ConsensusMessage::Reply(_) => "Reply",
            ConsensusMessage::ViewChange(_) => "ViewChange",
            ConsensusMessage::NewView(_) => "NewView",
            ConsensusMessage::Checkpoint(_) => "Checkpoint",
        }
    }
}

// --- canonical encodings ---------------------------------------------------

impl Encode for RequestMsg {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_list(out, &self.txs);
        wire::put_fixed(out, self.client.as_bytes());
        wire::put_u64(out, self.request_id);
        wire::put_bytes(out, &self.sig);
    }
}

impl Decode for RequestMsg {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(RequestMsg {
            txs: r.list()?,
            client: BlockchainAddress(r.fixed()?),
            request_id: r.u64()?,
            sig: r.bytes()?,
        })
    }
}

impl Encode for TxOutcome {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_fixed(out, &self.tx_digest);
        wire::put_u8(out, self.accepted as u8);
        wire::put_str(out, &self.reason);
    }
}

impl Decode for TxOutcome {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(TxOutcome {
            tx_digest: r.fixed()?,
            accepted: r.u8()? != 0,
            reason: r.string()?,
        })
    }
}

impl Encode for PrePrepareMsg {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u64(out, self.view);
        wire::put_u64(out, self.seq);
        wire::put_fixed(out, &self.digest);
        self.block.encode_into(out);
        wire::put_list(out, &self.requests);
        wire::put_fixed(out, self.sender.as_bytes());
        wire::put_bytes(out, &self.sig);
    }
}

impl Decode for PrePrepareMsg {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(PrePrepareMsg {
            view: r.u64()?,
            seq: r.u64()?,
            digest: r.fixed()?,
            block: Block::decode_from(r)?,
            requests: r.list()?,
            sender: BlockchainAddress(r.fixed()?),
            sig: r.bytes()?,
        })
    }
}

impl PhaseMsg {
    fn encode_with_tag(&self, out: &mut Vec<u8>) {
        wire::put_u8(out, matches!(self.phase, Phase::Commit) as u8);
        wire::put_u64(out, self.view);
        wire::put_u64(out, self.seq);
        wire::put_fixed(out, &self.digest);
        wire::put_fixed(out, self.sender.as_bytes());
        wire::put_bytes(out, &self.sig);
    }

    fn decode_with_tag(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(PhaseMsg {
            phase: if r.u8()? != 0 { Phase::Commit } else { Phase::Prepare },
            view: r.u64()?,
            seq: r.u64()?,
            digest: r.fixed()?,
            sender: BlockchainAddress(r.fixed()?),
            sig: r.bytes()?,
        })
    }
}

impl Encode for ReplyMsg {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u64(out, self.view);
        wire::put_u64(out, self.seq);
        wire::put_fixed(out, &self.request_digest);
        wire::put_list(out, &self.outcomes);
        wire::put_fixed(out, self.client.as_bytes());
        wire::put_fixed(out, self.sender.as_bytes());
        wire::put_bytes(out, &self.sig);
    }
}

impl Decode for ReplyMsg {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(ReplyMsg {
            view: r.u64()?,
            seq: r.u64()?,
            request_digest: r.fixed()?,
            outcomes: r.list()?,
            client: BlockchainAddress(r.fixed()?),
            sender: BlockchainAddress(r.fixed()?),
            sig: r.bytes()?,
        })
    }
}

impl Encode for PreparedCert {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u64(out, self.view);
        wire::put_u64(out, self.seq);
        wire::put_fixed(out, &self.digest);
        self.block.encode_into(out);
        wire::put_list(out, &self.requests);
    }
}

impl Decode for PreparedCert {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(PreparedCert {
            view: r.u64()?,
            seq: r.u64()?,
            digest: r.fixed()?,
            block: Block::decode_from(r)?,
            requests: r.list()?,
        })
    }
}

impl Encode for ViewChangeMsg {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u64(out, self.new_view);
        wire::put_u64(out, self.last_stable);
        match &self.prepared {
            None => wire::put_u8(out, 0),
            Some(cert) => {
                wire::put_u8(out, 1);
                cert.encode_into(out);
            }
        }
        wire::put_fixed(out, self.sender.as_bytes());
        wire::put_bytes(out, &self.sig);
    }
}

impl Decode for ViewChangeMsg {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(ViewChangeMsg {
            new_view: r.u64()?,
            last_stable: r.u64()?,
            prepared: if r.u8()? != 0 {
                Some(PreparedCert::decode_from(r)?)
            } else {
                None
            },
            sender: BlockchainAddress(r.fixed()?),
            sig: r.bytes()?,
        })
    }
}

impl Encode for NewViewMsg {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u64(out, self.view);
        wire::put_list(out, &self.view_changes);
        match &self.pre_prepare {
            None => wire::put_u8(out, 0),
            Some(pp) => {
                wire::put_u8(out, 1);
                pp.encode_into(out);
            }
        }
        wire::put_fixed(out, self.sender.as_bytes());
        wire::put_bytes(out, &self.sig);
    }
}

impl Decode for NewViewMsg {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(NewViewMsg {
            view: r.u64()?,
            view_changes: r.list()?,
            pre_prepare: if r.u8()? != 0 {
                Some(PrePrepareMsg::decode_from(r)?)
            } else {
                None
            },
            sender: BlockchainAddress(r.fixed()?),
            sig: r.bytes()?,
        })
    }
}

impl Encode for CheckpointMsg {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u64(out, self.seq);
        wire::put_fixed(out, &self.state_digest);
        wire::put_fixed(out, self.sender.as_bytes());
        wire::put_bytes(out, &self.sig);
    }
}

impl Decode for CheckpointMsg {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(CheckpointMsg {
            seq: r.u64()?,
            state_digest: r.fixed()?,
            sender: BlockchainAddress(r.fixed()?),
            sig: r.bytes()?,
        })
    }
}

impl Encode for ConsensusMessage {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            ConsensusMessage::Request(m) => {
                wire::put_u8(out, 0);
                m.encode_into(out);
            }
            ConsensusMessage::PrePrepare(m) => {
                wire::put_u8(out, 1);
                m.encode_into(out);
            }
            ConsensusMessage::Prepare(m) | ConsensusMessage::Commit(m) => {
                wire::put_u8(out, 2);
                m.encode_with_tag(out);
            }
            ConsensusMessage::Reply(m) => {
                wire::put_u8(out, 3);
                m.encode_into(out);
            }
            ConsensusMessage::ViewChange(m) => {
                wire::put_u8(out, 4);
                m.encode_into(out);
            }
            ConsensusMessage::NewView(m) => {
                wire::put_u8(out, 5);
                m.encode_into(out);
            }
            ConsensusMessage::Checkpoint(m) => {
                wire::put_u8(out, 6);
                m.encode_into(out);
            }
        }
    }
}

impl Decode for ConsensusMessage {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            0 => ConsensusMessage::Request(RequestMsg::decode_from(r)?),
            1 => ConsensusMessage::PrePrepare(PrePrepareMsg::decode_from(r)?),
            2 => {
                let m = PhaseMsg::decode_with_tag(r)?;
                match m.phase {
                    Phase::Prepare => ConsensusMessage::Prepare(m),
                    Phase::Commit => ConsensusMessage::Commit(m),
                }
            }
            3 => ConsensusMessage::Reply(ReplyMsg::decode_from(r)?),
            4 => ConsensusMessage::ViewChange(ViewChangeMsg::decode_from(r)?),
            5 => ConsensusMessage::NewView(NewViewMsg::decode_from(r)?),
            6 => ConsensusMessage::Checkpoint(CheckpointMsg::decode_from(r)?),
            other => {
                return Err(WireError::InvalidValue {
                    field: "consensus_message",
                    reason: format!("unknown message tag {other}"),
                })
            }
        })
    }
}

// ---------------------------------------------------------------------------
// replica state machine
// ---------------------------------------------------------------------------

/// Effects a replica wants performed after handling an event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    /// Send to one validator.
    Send(BlockchainAddress, ConsensusMessage),
    /// Send to every other validator.
    Broadcast(ConsensusMessage),
    /// Send a reply to a client address.
    SendClient(BlockchainAddress, ConsensusMessage),
    /// Ask the host to fire `handle_timeout(id)` after `delay` time units.
    ArmTimer { id: u64, delay: u64 },
    /// A block committed and was applied to the local ledger.
    Committed { seq: u64, block: Block },
}

/// One line of the per-replica decision log (exported as JSONL).
#[derive(Debug, Clone, Serialize)]
pub struct DecisionEntry {
    pub view: u64,
    pub seq: u64,
    pub digest: String,
    pub action: String,
}

#[derive(Debug, Clone, Default)]
struct Instance {
    digest: Option<Digest32>,
    block: Option<Block>,
    requests: Vec<RequestMsg>,
    // votes keyed by sender, so a vote for the wrong digest never counts
    prepares: BTreeMap<BlockchainAddress, Digest32>,
    commits: BTreeMap<BlockchainAddress, Digest32>,
    commit_sent: bool,
    committed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimerPurpose {
    /// A request is outstanding; fire a view change if it never executes.
    RequestProgress(Digest32),
    /// A view change toward this view is underway; escalate if stuck.
    ViewChangeProgress(u64),
}

pub struct ReplicaState {
    pub id: BlockchainAddress,
    key: SigningKey,
    pub cfg: ValidatorSetConfig,
    pub view: u64,
    pub ledger: LedgerState,
    instances: BTreeMap<(u64, u64), Instance>,
    committed: BTreeMap<u64, Digest32>,
    /// FIFO of pending request batches, deduplicated by request digest.
    pending: Vec<RequestMsg>,
    pending_digests: BTreeSet<Digest32>,
    reply_cache: BTreeMap<Digest32, ReplyMsg>,
    executed_requests: BTreeSet<Digest32>,
    timers: BTreeMap<u64, TimerPurpose>,
    next_timer_id: u64,
    /// timers already armed per request so retransmits don't stack timers
    request_timers: BTreeMap<Digest32, u64>,
    view_change_target: Option<u64>,
    view_changes: BTreeMap<u64, BTreeMap<BlockchainAddress, ViewChangeMsg>>,
    pub last_stable_checkpoint: u64,
    checkpoints: BTreeMap<u64, BTreeMap<BlockchainAddress, Digest32>>,
    buffered: Vec<ConsensusMessage>,
    decision_log: Vec<DecisionEntry>,
    /// counters for dropped/bad messages, exposed for metrics
    pub dropped_bad_signature: u64,
    pub dropped_conflicting_preprepare: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RequestError {
    #[error("request signature invalid")]
    BadSignature,
    #[error("node is not a validator")]
    NotValidator,
}

impl ReplicaState {
    pub fn new(
        id: BlockchainAddress,
        key: SigningKey,
        cfg: ValidatorSetConfig,
        genesis_state: LedgerState,
    ) -> Self {
        assert!(cfg.is_validator(&id), "replica must be in the validator set");
        ReplicaState {
            id,
            key,
            cfg,
            view: 0,
            ledger: genesis_state,
            instances: BTreeMap::new(),
            committed: BTreeMap::new(),
            pending: Vec::new(),
            pending_digests: BTreeSet::new(),
            reply_cache: BTreeMap::new(),
            executed_requests: BTreeSet::new(),
            timers: BTreeMap::new(),
            next_timer_id: 0,
            request_timers: BTreeMap::new(),
            view_change_target: None,
            view_changes: BTreeMap::new(),
            last_stable_checkpoint: 0,
            checkpoints: BTreeMap::new(),
            buffered: Vec::new(),
            decision_log: Vec::new(),
            dropped_bad_signature: 0,
            dropped_conflicting_preprepare: 0,
        }
    }

    pub fn is_primary(&self) -> bool {
        self.cfg.primary_for(self.view) == self.id
    }

    pub fn next_seq(&self) -> u64 {
        self.ledger.head.height + 1
    }

    pub fn committed_digest(&self, seq: u64) -> Option<&Digest32> {
        self.committed.get(&seq)
    }

    pub fn decision_log(&self) -> &[DecisionEntry] {
        &self.decision_log
    }

    fn log_decision(&mut self, view: u64, seq: u64, digest: &Digest32, action: &str) {
        self.decision_log.push(DecisionEntry {
            view,
            seq,
            digest: hex::encode(digest),
            action: action.to_string(),
        });
    }

    fn validator_key(&self, addr: &BlockchainAddress) -> Option<Vec<u8>> {
        if !self.cfg.is_validator(addr) {
            return None;
        }
        self.ledger
            .active_identity(addr)
            .map(|r| r.verify_key.clone())
    }

    fn sign_phase(&self, phase: Phase, view: u64, seq: u64, digest: Digest32) -> PhaseMsg {
        let mut msg = PhaseMsg {
            phase,
            view,
            seq,
            digest,
            sender: self.id,
            sig: Vec::new(),
        };
        let mut bytes = Vec::new();
        msg.encode_with_tag(&mut bytes);
        msg.sig = Provider::sign(&self.key, &bytes);
        msg
    }

    fn verify_phase(&self, msg: &PhaseMsg) -> bool {
        let Some(vk) = self.validator_key(&msg.sender) else {
            return false;
        };
        let unsigned = PhaseMsg {
            sig: Vec::new(),
            ..msg.clone()
        };
        let mut bytes = Vec::new();
        unsigned.encode_with_tag(&mut bytes);
        Provider::verify(&vk, &bytes, &msg.sig)
    }

    fn verify_request(&self, req: &RequestMsg) -> bool {
        let payload = req.unsigned_encoding();
        if let Some(identity) = self.ledger.active_identity(&req.client) {
            return Provider::verify(&identity.verify_key, &payload, &req.sig);
        }
        // unregistered client: allowed only when the batch registers the
        // client's own key, self-signed
        for tx in &req.txs {
            if let crate::ledger::TxPayload::RegisterIdentity { verify_key, .. } = &tx.payload {
                if crate::ledger::derive_address(verify_key) == Ok(req.client) {
                    return Provider::verify(verify_key, &payload, &req.sig);
                }
            }
        }
        false
    }

    fn arm_timer(&mut self, purpose: TimerPurpose, outputs: &mut Vec<Output>) {
        let id = self.next_timer_id;
        self.next_timer_id += 1;
        self.timers.insert(id, purpose);
        if let TimerPurpose::RequestProgress(digest) = purpose {
            self.request_timers.insert(digest, id);
        }
        outputs.push(Output::ArmTimer {
            id,
            delay: self.cfg.view_timeout,
        });
    }

    fn cancel_request_timer(&mut self, digest: &Digest32) {
        if let Some(id) = self.request_timers.remove(digest) {
            self.timers.remove(&id);
        }
    }

    /// Entry point for client requests (also reached via
    /// [`Self::handle_message`] with a `Request`).
    pub fn handle_client_request(
        &mut self,
        req: &RequestMsg,
        now: u64,
    ) -> Result<Vec<Output>, RequestError> {
        if !self.verify_request(req) {
            self.dropped_bad_signature += 1;
            return Err(RequestError::BadSignature);
        }
        let digest = req.digest();
        let mut outputs = Vec::new();

        // duplicate of an executed request: re-emit the cached reply
        if let Some(reply) = self.reply_cache.get(&digest) {
            outputs.push(Output::SendClient(
                reply.client,
                ConsensusMessage::Reply(reply.clone()),
            ));
            return Ok(outputs);
        }
        if self.pending_digests.insert(digest) {
            self.pending.push(req.clone());
        }

        if self.is_primary() && self.view_change_target.is_none() {
            self.maybe_propose(now, &mut outputs);
        } else {
            // forward to the primary and watch for progress
            outputs.push(Output::Send(
                self.cfg.primary_for(self.view),
                ConsensusMessage::Request(req.clone()),
            ));
            if !self.request_timers.contains_key(&digest) {
                self.arm_timer(TimerPurpose::RequestProgress(digest), &mut outputs);
            }
        }
        Ok(outputs)
    }

    /// Deterministically build the next block from a request batch: fold the
    /// requests' transactions over the current ledger, keeping the valid
    /// ones. Returns the block plus the per-transaction outcomes.
    fn build_block(
        &self,
        requests: &[RequestMsg],
        logical_time: u64,
    ) -> (Option<Block>, BTreeMap<Digest32, (bool, String)>) {
        let mut outcomes = BTreeMap::new();
        let mut txs = Vec::new();
        let mut state = self.ledger.clone();
        for req in requests {
            for tx in &req.txs {
                match state.apply_transaction(tx, logical_time) {
                    Ok(next) => {
                        state = next;
                        txs.push(tx.clone());
                        outcomes.insert(tx.digest(), (true, String::new()));
                    }
                    Err(err) => {
                        outcomes.insert(tx.digest(), (false, err.to_string()));
                    }
                }
            }
        }
        if txs.is_empty() {
            return (None, outcomes);
        }
        let mut block = Block {
            height: self.next_seq(),
            parent_hash: self.ledger.head_hash(),
            txs,
            proposer: self.cfg.primary_for(self.view),
            proposer_sig: Vec::new(),
            logical_time,
        };
        if block.proposer == self.id {
            block.proposer_sig = Provider::sign(&self.key, &block.signing_bytes());
        }
        (Some(block), outcomes)
    }

    fn maybe_propose(&mut self, now: u64, outputs: &mut Vec<Output>) {
        if !self.is_primary() || self.pending.is_empty() {
            return;
        }
        let seq = self.next_seq();
        // one instance in flight at a time: seq numbers equal chain heights
        if self.instances.contains_key(&(self.view, seq)) {
            return;
        }
        let requests = std::mem::take(&mut self.pending);
        self.pending_digests.clear();
        let (block, outcomes) = self.build_block(&requests, now);
        let Some(block) = block else {
            // nothing valid to propose; answer the requests directly
            self.reply_to_batch(self.view, seq, &requests, &outcomes, outputs);
            return;
        };
        let digest = Provider::hash(&block.encode());
        let mut pp = PrePrepareMsg {
            view: self.view,
            seq,
            digest,
            block: block.clone(),
            requests: requests.clone(),
            sender: self.id,
            sig: Vec::new(),
        };
        pp.sig = Provider::sign(&self.key, &pp_signing_bytes(&pp));
        let view = self.view;
        let instance = self.instances.entry((view, seq)).or_default();
        instance.digest = Some(digest);
        instance.block = Some(block);
        instance.requests = requests;
        self.log_decision(view, seq, &digest, "pre-prepare");
        outputs.push(Output::Broadcast(ConsensusMessage::PrePrepare(pp)));
        self.check_progress(view, seq, outputs);
        self.execute_ready(now, outputs);
    }

    /// Reply to every request in a batch given the tx outcome map (empty map
    /// means every tx was rejected before proposal).
    fn reply_to_batch(
        &mut self,
        view: u64,
        seq: u64,
        requests: &[RequestMsg],
        outcome_map: &BTreeMap<Digest32, (bool, String)>,
        outputs: &mut Vec<Output>,
    ) {
        for req in requests {
            let digest = req.digest();
            let outcomes = req
                .txs
                .iter()
                .map(|tx| {
                    let tx_digest = tx.digest();
                    match outcome_map.get(&tx_digest) {
                        Some((accepted, reason)) => TxOutcome {
                            tx_digest,
                            accepted: *accepted,
                            reason: reason.clone(),
                        },
                        None => TxOutcome {
                            tx_digest,
                            accepted: false,
                            reason: TxError::BadSignature.to_string(),
                        },
                    }
                })
                .collect();
            let mut reply = ReplyMsg {
                view,
                seq,
                request_digest: digest,
                outcomes,
                client: req.client,
                sender: self.id,
                sig: Vec::new(),
            };
            reply.sig = Provider::sign(&self.key, &reply_signing_bytes(&reply));
            self.executed_requests.insert(digest);
            self.cancel_request_timer(&digest);
            self.pending_digests.remove(&digest);
            self.pending.retain(|p| p.digest() != digest);
            self.reply_cache.insert(digest, reply.clone());
            outputs.push(Output::SendClient(
                req.client,
                ConsensusMessage::Reply(reply),
            ));
        }
    }

    /// Main dispatch: feed any consensus message; malformed or ill-signed
    /// messages are dropped (counted), never panic.
    pub fn handle_message(&mut self, msg: &ConsensusMessage, now: u64) -> Vec<Output> {
        match msg {
            ConsensusMessage::Request(req) => {
                self.handle_client_request(req, now).unwrap_or_default()
            }
            ConsensusMessage::PrePrepare(pp) => self.handle_pre_prepare(pp, now),
            ConsensusMessage::Prepare(m) => self.handle_phase(m, now),
            ConsensusMessage::Commit(m) => self.handle_phase(m, now),
            ConsensusMessage::ViewChange(vc) => self.handle_view_change(vc, now),
            ConsensusMessage::NewView(nv) => self.handle_new_view(nv, now),
            ConsensusMessage::Checkpoint(cp) => self.handle_checkpoint(cp),
            // replicas are not clients; ignore stray replies
            ConsensusMessage::Reply(_) => Vec::new(),
        }
    }

    fn buffer_future(&mut self, msg: &ConsensusMessage) {
        if self.buffered.len() < BUFFER_WINDOW {
            self.buffered.push(msg.clone());
        }
    }

    fn drain_buffered(&mut self, now: u64, outputs: &mut Vec<Output>) {
        let buffered = std::mem::take(&mut self.buffered);
        for msg in buffered {
            outputs.extend(self.handle_message(&msg, now));
        }
    }

    fn handle_pre_prepare(&mut self, pp: &PrePrepareMsg, now: u64) -> Vec<Output> {
        let mut outputs = Vec::new();
        if pp.view != self.view || pp.sender != self.cfg.primary_for(pp.view) {
            if pp.view > self.view {
                self.buffer_future(&ConsensusMessage::PrePrepare(pp.clone()));
            }
            return outputs;
        }
        let Some(vk) = self.validator_key(&pp.sender) else {
            self.dropped_bad_signature += 1;
            return outputs;
        };
        if !Provider::verify(&vk, &pp_signing_bytes(pp), &pp.sig) {
            self.dropped_bad_signature += 1;
            return outputs;
        }
        if pp.seq != self.next_seq() {
            if pp.seq > self.next_seq() {
                self.buffer_future(&ConsensusMessage::PrePrepare(pp.clone()));
            }
            return outputs;
        }
        // at most one digest per (view, seq): first wins
        if let Some(instance) = self.instances.get(&(pp.view, pp.seq)) {
            if let Some(existing) = instance.digest {
                if existing != pp.digest {
                    self.dropped_conflicting_preprepare += 1;
                    self.log_decision(pp.view, pp.seq, &pp.digest, "reject-conflicting");
                }
                return outputs;
            }
        }
        // digest must match the block bytes
        if Provider::hash(&pp.block.encode()) != pp.digest {
            self.dropped_bad_signature += 1;
            return outputs;
        }
        // every request in the batch must be client-signed
        if !pp.requests.iter().all(|r| self.verify_request(r)) {
            self.dropped_bad_signature += 1;
            return outputs;
        }
        // the block must carry a valid proposer signature from a validator
        // (re-proposed blocks after a view change keep the old proposer)
        let proposer_ok = self
            .validator_key(&pp.block.proposer)
            .is_some_and(|vk| Provider::verify(&vk, &pp.block.signing_bytes(), &pp.block.proposer_sig));
        // and be exactly what we would build from the batch ourselves
        let (rebuilt, _) = self.build_block(&pp.requests, pp.block.logical_time);
        let consistent = rebuilt.as_ref().is_some_and(|b| {
            b.height == pp.block.height
                && b.parent_hash == pp.block.parent_hash
                && b.txs == pp.block.txs
        });
        if !proposer_ok || !consistent {
            self.dropped_bad_signature += 1;
            self.log_decision(pp.view, pp.seq, &pp.digest, "reject-inconsistent-block");
            return outputs;
        }

        let instance = self.instances.entry((pp.view, pp.seq)).or_default();
        instance.digest = Some(pp.digest);
        instance.block = Some(pp.block.clone());
        instance.requests = pp.requests.clone();
        self.log_decision(pp.view, pp.seq, &pp.digest, "accept-pre-prepare");

        if !self.is_primary() {
            let prepare = self.sign_phase(Phase::Prepare, pp.view, pp.seq, pp.digest);
            let id = self.id;
            self.instances
                .get_mut(&(pp.view, pp.seq))
                .unwrap()
                .prepares
                .insert(id, pp.digest);
            outputs.push(Output::Broadcast(ConsensusMessage::Prepare(prepare)));
        }
        self.check_progress(pp.view, pp.seq, &mut outputs);
        self.execute_ready(now, &mut outputs);
        outputs
    }

    fn handle_phase(&mut self, msg: &PhaseMsg, now: u64) -> Vec<Output> {
        let mut outputs = Vec::new();
        if msg.view != self.view {
            if msg.view > self.view {
                self.buffer_future(&match msg.phase {
                    Phase::Prepare => ConsensusMessage::Prepare(msg.clone()),
                    Phase::Commit => ConsensusMessage::Commit(msg.clone()),
                });
            }
            return outputs;
        }
        if msg.seq <= self.last_stable_checkpoint || msg.seq < self.next_seq() {
            return outputs;
        }
        if !self.verify_phase(msg) {
            self.dropped_bad_signature += 1;
            return outputs;
        }
        let instance = self.instances.entry((msg.view, msg.seq)).or_default();
        match msg.phase {
            Phase::Prepare => instance.prepares.insert(msg.sender, msg.digest),
            Phase::Commit => instance.commits.insert(msg.sender, msg.digest),
        };
        self.check_progress(msg.view, msg.seq, &mut outputs);
        self.execute_ready(now, &mut outputs);
        outputs
    }

    /// Advance an instance through prepared / committed as quorums fill.
    fn check_progress(&mut self, view: u64, seq: u64, outputs: &mut Vec<Output>) {
        let prepare_quorum = self.cfg.prepare_quorum();
        let commit_quorum = self.cfg.commit_quorum();
        let id = self.id;
        let send_commit;
        let digest;
        {
            let Some(instance) = self.instances.get_mut(&(view, seq)) else {
                return;
            };
            let Some(d) = instance.digest else {
                return;
            };
            digest = d;
            let matching = instance.prepares.values().filter(|v| **v == digest).count();
            send_commit = !instance.commit_sent && matching >= prepare_quorum;
            if send_commit {
                instance.commit_sent = true;
                instance.commits.insert(id, digest);
            }
        }
        if send_commit {
            let commit = self.sign_phase(Phase::Commit, view, seq, digest);
            self.log_decision(view, seq, &digest, "prepared");
            outputs.push(Output::Broadcast(ConsensusMessage::Commit(commit)));
        }
        let mark_committed = {
            let Some(instance) = self.instances.get_mut(&(view, seq)) else {
                return;
            };
            let matching = instance.commits.values().filter(|v| **v == digest).count();
            let hit = !instance.committed && instance.commit_sent && matching >= commit_quorum;
            if hit {
                instance.committed = true;
            }
            hit
        };
        if mark_committed {
            self.committed.entry(seq).or_insert(digest);
            self.log_decision(view, seq, &digest, "committed");
        }
    }

    /// Apply committed blocks in sequence order and answer the clients.
    fn execute_ready(&mut self, now: u64, outputs: &mut Vec<Output>) {
        loop {
            let seq = self.next_seq();
            let Some(digest) = self.committed.get(&seq).copied() else {
                return;
            };
            let Some(((view, _), instance)) = self
                .instances
                .iter()
                .find(|((_, s), inst)| *s == seq && inst.committed && inst.digest == Some(digest))
                .map(|(k, v)| (*k, v.clone()))
            else {
                return;
            };
            let block = instance.block.clone().expect("committed without block");
            match self.ledger.append_block(&block) {
                Ok(next) => self.ledger = next,
                Err(err) => {
                    // cannot happen for blocks validated at pre-prepare time
                    self.log_decision(view, seq, &digest, &format!("apply-failed: {err}"));
                    return;
                }
            }
            outputs.push(Output::Committed {
                seq,
                block: block.clone(),
            });
            // outcomes recomputed exactly as at proposal time
            let pre_state_requests = instance.requests.clone();
            let outcome_map = replay_outcomes(&pre_state_requests, &block);
            self.reply_to_batch(view, seq, &pre_state_requests, &outcome_map, outputs);

            if self.cfg.checkpoint_interval > 0 && seq.is_multiple_of(self.cfg.checkpoint_interval) {
                let state_digest = Provider::hash(&self.ledger.canonical_encoding());
                let mut cp = CheckpointMsg {
                    seq,
                    state_digest,
                    sender: self.id,
                    sig: Vec::new(),
                };
                cp.sig = Provider::sign(&self.key, &cp_signing_bytes(&cp));
                self.checkpoints
                    .entry(seq)
                    .or_default()
                    .insert(self.id, state_digest);
                outputs.push(Output::Broadcast(ConsensusMessage::Checkpoint(cp)));
            }

            // keep proposing while there is demand
            if self.view_change_target.is_none() {
                self.maybe_propose(now, outputs);
            }
            self.drain_buffered(now, outputs);
        }
    }

    fn handle_checkpoint(&mut self, cp: &CheckpointMsg) -> Vec<Output> {
        let Some(vk) = self.validator_key(&cp.sender) else {
            self.dropped_bad_signature += 1;
            return Vec::new();
        };
        if !Provider::verify(&vk, &cp_signing_bytes(cp), &cp.sig) {
            self.dropped_bad_signature += 1;
            return Vec::new();
        }
        self.checkpoints
            .entry(cp.seq)
            .or_default()
            .insert(cp.sender, cp.state_digest);
        let quorum = self.cfg.commit_quorum();
        let stable = self
            .checkpoints
            .iter()
            .filter(|(seq, votes)| {
                **seq > self.last_stable_checkpoint
                    && votes
                        .values()
                        .fold(BTreeMap::<&Digest32, usize>::new(), |mut acc, d| {
                            *acc.entry(d).or_default() += 1;
                            acc
                        })
                        .values()
                        .any(|count| *count >= quorum)
            })
            .map(|(seq, _)| *seq)
            .max();
        if let Some(stable) = stable {
            self.last_stable_checkpoint = stable;
            self.instances.retain(|(_, seq), _| *seq > stable);
            self.checkpoints.retain(|seq, _| *seq >= stable);
        }
        Vec::new()
    }

    /// Timer fired. Unknown or cancelled timers are ignored.
    pub fn handle_timeout(&mut self, timer_id: u64, now: u64) -> Vec<Output> {
        let Some(purpose) = self.timers.remove(&timer_id) else {
            return Vec::new();
        };
        match purpose {
            TimerPurpose::RequestProgress(digest) => {
                self.request_timers.remove(&digest);
                if self.executed_requests.contains(&digest) {
                    return Vec::new();
                }
                self.start_view_change(self.view + 1, now)
            }
            TimerPurpose::ViewChangeProgress(target) => {
                if self.view >= target {
                    return Vec::new();
                }
                self.start_view_change(target + 1, now)
            }
        }
    }

    fn prepared_cert(&self) -> Option<PreparedCert> {
        let seq = self.next_seq();
        self.instances
            .iter()
            .filter(|((_, s), inst)| *s == seq && inst.digest.is_some() && inst.commit_sent)
            .max_by_key(|((v, _), _)| *v)
            .map(|((view, _), inst)| PreparedCert {
                view: *view,
                seq,
                digest: inst.digest.unwrap(),
                block: inst.block.clone().unwrap(),
                requests: inst.requests.clone(),
            })
    }

    fn start_view_change(&mut self, target: u64, now: u64) -> Vec<Output> {
        let mut outputs = Vec::new();
        if self.view_change_target.is_some_and(|t| t >= target) {
            return outputs;
        }
        self.view_change_target = Some(target);
        let mut vc = ViewChangeMsg {
            new_view: target,
            last_stable: self.last_stable_checkpoint,
            prepared: self.prepared_cert(),
            sender: self.id,
            sig: Vec::new(),
        };
        vc.sig = Provider::sign(&self.key, &vc_signing_bytes(&vc));
        self.log_decision(target, self.next_seq(), &[0u8; 32], "view-change");
        self.view_changes
            .entry(target)
            .or_default()
            .insert(self.id, vc.clone());
        outputs.push(Output::Broadcast(ConsensusMessage::ViewChange(vc)));
        self.arm_timer(TimerPurpose::ViewChangeProgress(target), &mut outputs);
        self.maybe_emit_new_view(target, now, &mut outputs);
        outputs
    }

    fn verify_view_change(&self, vc: &ViewChangeMsg) -> bool {
        let Some(vk) = self.validator_key(&vc.sender) else {
            return false;
        };
        Provider::verify(&vk, &vc_signing_bytes(vc), &vc.sig)
    }

    fn handle_view_change(&mut self, vc: &ViewChangeMsg, now: u64) -> Vec<Output> {
        let mut outputs = Vec::new();
        if vc.new_view <= self.view {
            return outputs;
        }
        if !self.verify_view_change(vc) {
            self.dropped_bad_signature += 1;
            return outputs;
        }
        self.view_changes
            .entry(vc.new_view)
            .or_default()
            .insert(vc.sender, vc.clone());
        self.maybe_emit_new_view(vc.new_view, now, &mut outputs);
        outputs
    }

    fn maybe_emit_new_view(&mut self, target: u64, now: u64, outputs: &mut Vec<Output>) {
        if self.cfg.primary_for(target) != self.id || self.view >= target {
            return;
        }
        let votes = self.view_changes.get(&target).cloned().unwrap_or_default();
        if votes.len() < self.cfg.commit_quorum() {
            return;
        }
        // adopt the new view as its primary
        self.view = target;
        self.view_change_target = None;
        self.log_decision(target, self.next_seq(), &[0u8; 32], "new-view");

        // re-propose the highest prepared certificate for the undecided seq,
        // if any view-change carries one
        let seq = self.next_seq();
        let best = votes
            .values()
            .filter_map(|vc| vc.prepared.as_ref())
            .filter(|cert| cert.seq == seq)
            .max_by_key(|cert| cert.view);
        let pre_prepare = if let Some(cert) = best {
            let mut pp = PrePrepareMsg {
                view: target,
                seq,
                digest: cert.digest,
                block: cert.block.clone(),
                requests: cert.requests.clone(),
                sender: self.id,
                sig: Vec::new(),
            };
            pp.sig = Provider::sign(&self.key, &pp_signing_bytes(&pp));
            Some(pp)
        } else {
            None
        };
        let mut nv = NewViewMsg {
            view: target,
            view_changes: votes.values().cloned().collect(),
            pre_prepare: pre_prepare.clone(),
            sender: self.id,
            sig: Vec::new(),
        };
        nv.sig = Provider::sign(&self.key, &nv_signing_bytes(&nv));
        outputs.push(Output::Broadcast(ConsensusMessage::NewView(nv)));

        if let Some(pp) = pre_prepare {
            let instance = self.instances.entry((target, seq)).or_default();
            instance.digest = Some(pp.digest);
            instance.block = Some(pp.block.clone());
            instance.requests = pp.requests.clone();
            self.check_progress(target, seq, outputs);
        }
        // or propose fresh pending requests
        self.maybe_propose(now, outputs);
    }

    fn handle_new_view(&mut self, nv: &NewViewMsg, now: u64) -> Vec<Output> {
        let mut outputs = Vec::new();
        if nv.view <= self.view || nv.sender != self.cfg.primary_for(nv.view) {
            return outputs;
        }
        let Some(vk) = self.validator_key(&nv.sender) else {
            self.dropped_bad_signature += 1;
            return outputs;
        };
        if !Provider::verify(&vk, &nv_signing_bytes(nv), &nv.sig) {
            self.dropped_bad_signature += 1;
            return outputs;
        }
        // the new-view must prove a commit-quorum of valid view changes
        let mut senders = BTreeSet::new();
        for vc in &nv.view_changes {
            if vc.new_view == nv.view && self.verify_view_change(vc) {
                senders.insert(vc.sender);
            }
        }
        if senders.len() < self.cfg.commit_quorum() {
            self.dropped_bad_signature += 1;
            return outputs;
        }
        self.view = nv.view;
        self.view_change_target = None;
        self.view_changes.retain(|v, _| *v > nv.view);
        self.log_decision(nv.view, self.next_seq(), &[0u8; 32], "adopt-new-view");

        if let Some(pp) = &nv.pre_prepare {
            outputs.extend(self.handle_pre_prepare(pp, now));
        }
        // outstanding requests must still make progress in the new view
        let outstanding: Vec<RequestMsg> = self
            .pending
            .iter()
            .filter(|req| !self.executed_requests.contains(&req.digest()))
            .cloned()
            .collect();
        if self.is_primary() {
            self.maybe_propose(now, &mut outputs);
        } else {
            for req in outstanding {
                let digest = req.digest();
                outputs.push(Output::Send(
                    self.cfg.primary_for(self.view),
                    ConsensusMessage::Request(req),
                ));
                if !self.request_timers.contains_key(&digest) {
                    self.arm_timer(TimerPurpose::RequestProgress(digest), &mut outputs);
                }
            }
        }
        self.drain_buffered(now, &mut outputs);
        outputs
    }
}

/// Recompute per-transaction outcomes the way the proposer did: a tx is
/// accepted iff it made it into the block.
fn replay_outcomes(
    requests: &[RequestMsg],
    block: &Block,
) -> BTreeMap<Digest32, (bool, String)> {
    let in_block: BTreeSet<Digest32> = block.txs.iter().map(|tx| tx.digest()).collect();
    let mut map = BTreeMap::new();
    for req in requests {
        for tx in &req.txs {
            let digest = tx.digest();
            if in_block.contains(&digest) {
                map.insert(digest, (true, String::new()));
            } else {
                map.entry(digest)
                    .or_insert_with(|| (false, "rejected".to_string()));
            }
        }
    }
    map
}

fn pp_signing_bytes(pp: &PrePrepareMsg) -> Vec<u8> {
    PrePrepareMsg {
        sig: Vec::new(),
        ..pp.clone()
    }
    .encode()
}

fn reply_signing_bytes(reply: &ReplyMsg) -> Vec<u8> {
    ReplyMsg {
        sig: Vec::new(),
        ..reply.clone()
    }
    .encode()
}

fn vc_signing_bytes(vc: &ViewChangeMsg) -> Vec<u8> {
    ViewChangeMsg {
        sig: Vec::new(),
        ..vc.clone()
    }
    .encode()
}

fn nv_signing_bytes(nv: &NewViewMsg) -> Vec<u8> {
    NewViewMsg {
        sig: Vec::new(),
        ..nv.clone()
    }
    .encode()
}

fn cp_signing_bytes(cp: &CheckpointMsg) -> Vec<u8> {
    CheckpointMsg {
        sig: Vec::new(),
        ..cp.clone()
    }
    .encode()
}

// ---------------------------------------------------------------------------
// client side
// ---------------------------------------------------------------------------

/// Collects replies for one request until `f+1` matching results from
/// distinct validators arrive.
#[derive(Debug, Clone, Default)]
pub struct ReplyCollector {
    replies: BTreeMap<BlockchainAddress, (Digest32, ReplyMsg)>,
}

impl ReplyCollector {
    pub fn add(&mut self, reply: ReplyMsg, cfg: &ValidatorSetConfig) -> Option<ReplyMsg> {
        if !cfg.is_validator(&reply.sender) {
            return None;
        }
        let result = reply.result_digest();
        self.replies.insert(reply.sender, (result, reply));
        self.accepted(cfg)
    }

    pub fn accepted(&self, cfg: &ValidatorSetConfig) -> Option<ReplyMsg> {
        let quorum = cfg.reply_quorum();
        let mut counts: BTreeMap<Digest32, usize> = BTreeMap::new();
        for (digest, _) in self.replies.values() {
            *counts.entry(*digest).or_default() += 1;
        }
        let winner = counts.into_iter().find(|(_, c)| *c >= quorum)?.0;
        self.replies
            .values()
            .find(|(d, _)| *d == winner)
            .map(|(_, r)| r.clone())
    }
}

/// Spec-shaped convenience over [`ReplyCollector`]: feed signature-valid
/// replies, get the accepted result or `None` while still pending.
pub fn client_collect_replies(
    replies: &[ReplyMsg],
    cfg: &ValidatorSetConfig,
) -> Option<ReplyMsg> {
    let mut collector = ReplyCollector::default();
    let mut accepted = None;
    for reply in replies {
        accepted = collector.add(reply.clone(), cfg).or(accepted);
    }
    accepted
}

pub mod testkit {
    //! In-memory cluster harness for exercising replicas deterministically:
    //! outgoing messages accumulate in a pool and a seeded RNG picks the
    //! delivery order, so every interleaving is reproducible from its seed.

    use std::collections::BTreeSet;

    use rand::Rng;

    use super::*;
    use crate::ledger::{derive_address, Role};

    pub fn signing_key(label: &str) -> SigningKey {
        Provider::signing_key_from_seed(label.as_bytes())
    }

    pub fn address_of(key: &SigningKey) -> BlockchainAddress {
        derive_address(key.verify_key()).expect("provider keys have canonical length")
    }

    /// Genesis block pre-registering every validator key as an RSU.
    pub fn genesis_block(keys: &[SigningKey]) -> Block {
        let txs = keys
            .iter()
            .map(|key| {
                LedgerTransaction::signed(
                    crate::ledger::TxPayload::RegisterIdentity {
                        verify_key: key.verify_key().to_vec(),
                        role: Role::Rsu,
                    },
                    address_of(key),
                    key,
                )
            })
            .collect();
        Block::genesis(txs, 0)
    }

    /// Self-registration request for a fresh vehicle key derived from `label`.
    pub fn register_request(label: &str, request_id: u64) -> (RequestMsg, SigningKey) {
        let key = signing_key(label);
        let addr = address_of(&key);
        let tx = LedgerTransaction::signed(
            crate::ledger::TxPayload::RegisterIdentity {
                verify_key: key.verify_key().to_vec(),
                role: Role::Vehicle,
            },
            addr,
            &key,
        );
        (RequestMsg::signed(vec![tx], addr, request_id, &key), key)
    }

    pub fn sign_pre_prepare(mut pp: PrePrepareMsg, key: &SigningKey) -> PrePrepareMsg {
        pp.sig = Provider::sign(key, &pp_signing_bytes(&pp));
        pp
    }

    pub fn sign_block(mut block: Block, key: &SigningKey) -> Block {
        block.proposer_sig = Provider::sign(key, &block.signing_bytes());
        block
    }

    pub struct Cluster {
        pub cfg: ValidatorSetConfig,
        pub keys: Vec<SigningKey>,
        pub replicas: Vec<ReplicaState>,
        pub genesis: Block,
        /// undelivered (destination, message) pairs
        pub pool: Vec<(usize, ConsensusMessage)>,
        timers: Vec<(u64, usize, u64)>,
        pub replies: Vec<ReplyMsg>,
        pub now: u64,
        pub crashed: BTreeSet<usize>,
    }

    impl Cluster {
        pub fn new(n: usize) -> Self {
            let keys: Vec<SigningKey> = (0..n)
                .map(|i| signing_key(&format!("validator-{i}")))
                .collect();
            let genesis = genesis_block(&keys);
            let state = LedgerState::from_genesis(&genesis).expect("genesis is well-formed");
            let cfg = ValidatorSetConfig::new(keys.iter().map(address_of).collect());
            let replicas = keys
                .iter()
                .map(|key| {
                    ReplicaState::new(address_of(key), key.clone(), cfg.clone(), state.clone())
                })
                .collect();
            Cluster {
                cfg,
                keys,
                replicas,
                genesis,
                pool: Vec::new(),
                timers: Vec::new(),
                replies: Vec::new(),
                now: 0,
                crashed: BTreeSet::new(),
            }
        }

        pub fn addr(&self, i: usize) -> BlockchainAddress {
            self.cfg.validators[i]
        }

        fn index_of(&self, addr: &BlockchainAddress) -> Option<usize> {
            self.cfg.validators.iter().position(|v| v == addr)
        }

        pub fn crash(&mut self, i: usize) {
            self.crashed.insert(i);
        }

        /// A client broadcasts its request to every validator.
        pub fn submit(&mut self, req: &RequestMsg) {
            for i in 0..self.replicas.len() {
                self.pool.push((i, ConsensusMessage::Request(req.clone())));
            }
        }

        pub fn inject(&mut self, to: usize, msg: ConsensusMessage) {
            self.pool.push((to, msg));
        }

        fn absorb(&mut self, from: usize, outputs: Vec<Output>) {
            for out in outputs {
                match out {
                    Output::Send(addr, msg) => {
                        if let Some(i) = self.index_of(&addr) {
                            self.pool.push((i, msg));
                        }
                    }
                    Output::Broadcast(msg) => {
                        for i in 0..self.replicas.len() {
                            if i != from {
                                self.pool.push((i, msg.clone()));
                            }
                        }
                    }
                    Output::SendClient(_, ConsensusMessage::Reply(reply)) => {
                        self.replies.push(reply);
                    }
                    Output::SendClient(_, _) => {}
                    Output::ArmTimer { id, delay } => {
                        self.timers.push((self.now + delay, from, id));
                    }
                    Output::Committed { .. } => {}
                }
            }
        }

        /// Deliver one pooled message (picked by the RNG) or, when the pool
        /// is empty, fire the earliest pending timer. Returns false at
        /// quiescence.
        pub fn step(&mut self, rng: &mut impl Rng) -> bool {
            if !self.pool.is_empty() {
                let idx = rng.random_range(0..self.pool.len());
                let (to, msg) = self.pool.remove(idx);
                self.now += 1;
                if !self.crashed.contains(&to) {
                    let outputs = self.replicas[to].handle_message(&msg, self.now);
                    self.absorb(to, outputs);
                }
                return true;
            }
            let next = self
                .timers
                .iter()
                .enumerate()
                .min_by_key(|(_, (at, who, id))| (*at, *who, *id))
                .map(|(pos, _)| pos);
            if let Some(pos) = next {
                let (at, who, id) = self.timers.remove(pos);
                self.now = self.now.max(at);
                if !self.crashed.contains(&who) {
                    let outputs = self.replicas[who].handle_timeout(id, self.now);
                    self.absorb(who, outputs);
                }
                return true;
            }
            false
        }

        pub fn run(&mut self, rng: &mut impl Rng, max_steps: usize) {
            for _ in 0..max_steps {
                if !self.step(rng) {
                    return;
                }
            }
            panic!("cluster did not reach quiescence within {max_steps} steps");
        }

        /// Head hash shared by every live replica, if they agree.
        pub fn common_head(&self) -> Option<Digest32> {
            let mut heads = (0..self.replicas.len())
                .filter(|i| !self.crashed.contains(i))
                .map(|i| self.replicas[i].ledger.head_hash());
            let first = heads.next()?;
            heads.all(|h| h == first).then_some(first)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::testkit::*;
    use super::*;
    use crate::ledger::Role;

    #[test]
    fn quorum_sizes_match_formulas() {
        assert_eq!(quorum_sizes(4), (1, 2, 3, 2));
        assert_eq!(quorum_sizes(1), (0, 0, 1, 1));
        assert_eq!(quorum_sizes(7), (2, 4, 5, 3));
    }

    #[test]
    fn primary_rotates_with_view() {
        let cluster = Cluster::new(4);
        assert_eq!(cluster.cfg.primary_for(0), cluster.addr(0));
        assert_eq!(cluster.cfg.primary_for(1), cluster.addr(1));
        assert_eq!(cluster.cfg.primary_for(4), cluster.addr(0));
    }

    #[test]
    fn consensus_messages_roundtrip() {
        let (req, _) = register_request("rt-client", 7);
        let msgs = vec![
            ConsensusMessage::Request(req.clone()),
            ConsensusMessage::Prepare(PhaseMsg {
                phase: Phase::Prepare,
                view: 1,
                seq: 2,
                digest: [3u8; 32],
                sender: BlockchainAddress([4u8; 20]),
                sig: vec![5; 64],
            }),
            ConsensusMessage::Commit(PhaseMsg {
                phase: Phase::Commit,
                view: 1,
                seq: 2,
                digest: [3u8; 32],
                sender: BlockchainAddress([4u8; 20]),
                sig: vec![5; 64],
            }),
            ConsensusMessage::ViewChange(ViewChangeMsg {
                new_view: 9,
                last_stable: 0,
                prepared: None,
                sender: BlockchainAddress([1u8; 20]),
                sig: vec![2; 64],
            }),
        ];
        for msg in msgs {
            let bytes = msg.encode();
            assert_eq!(ConsensusMessage::decode(&bytes).unwrap(), msg);
        }
    }

    #[test]
    fn primary_emits_single_pre_prepare_for_request() {
        let mut cluster = Cluster::new(4);
        let (req, _) = register_request("veh-pp", 1);
        let outputs = cluster.replicas[0].handle_client_request(&req, 10).unwrap();
        let pps: Vec<_> = outputs
            .iter()
            .filter_map(|o| match o {
                Output::Broadcast(ConsensusMessage::PrePrepare(pp)) => Some(pp),
                _ => None,
            })
            .collect();
        assert_eq!(pps.len(), 1);
        assert_eq!(pps[0].view, 0);
        assert_eq!(pps[0].seq, 1);
        assert_eq!(pps[0].block.txs.len(), 1);
    }

    #[test]
    fn backup_forwards_request_and_arms_timer() {
        let mut cluster = Cluster::new(4);
        let (req, _) = register_request("veh-fwd", 1);
        let outputs = cluster.replicas[1].handle_client_request(&req, 10).unwrap();
        assert!(outputs.iter().any(|o| matches!(
            o,
            Output::Send(addr, ConsensusMessage::Request(_)) if *addr == cluster.addr(0)
        )));
        assert!(outputs
            .iter()
            .any(|o| matches!(o, Output::ArmTimer { delay, .. } if *delay == DEFAULT_VIEW_TIMEOUT)));
    }

    #[test]
    fn request_with_bad_signature_is_rejected() {
        let mut cluster = Cluster::new(4);
        let (mut req, _) = register_request("veh-bad", 1);
        req.sig[0] ^= 1;
        assert_eq!(
            cluster.replicas[0].handle_client_request(&req, 10),
            Err(RequestError::BadSignature)
        );
        assert_eq!(cluster.replicas[0].dropped_bad_signature, 1);
    }

    #[test]
    fn backup_commits_after_prepare_quorum() {
        let mut cluster = Cluster::new(4);
        let (req, _) = register_request("veh-prep", 1);
        let outputs = cluster.replicas[0].handle_client_request(&req, 5).unwrap();
        let pp = outputs
            .iter()
            .find_map(|o| match o {
                Output::Broadcast(ConsensusMessage::PrePrepare(pp)) => Some(pp.clone()),
                _ => None,
            })
            .unwrap();

        // backup 1 accepts the pre-prepare and prepares (its own vote is 1)
        let outputs = cluster.replicas[1].handle_message(&ConsensusMessage::PrePrepare(pp.clone()), 6);
        assert!(outputs
            .iter()
            .any(|o| matches!(o, Output::Broadcast(ConsensusMessage::Prepare(_)))));

        // one matching prepare from backup 2 reaches the 2f = 2 quorum
        let prepare2 = {
            let outputs =
                cluster.replicas[2].handle_message(&ConsensusMessage::PrePrepare(pp.clone()), 6);
            outputs
                .iter()
                .find_map(|o| match o {
                    Output::Broadcast(ConsensusMessage::Prepare(p)) => Some(p.clone()),
                    _ => None,
                })
                .unwrap()
        };
        let outputs = cluster.replicas[1].handle_message(&ConsensusMessage::Prepare(prepare2), 7);
        assert!(outputs
            .iter()
            .any(|o| matches!(o, Output::Broadcast(ConsensusMessage::Commit(_)))));
    }

    #[test]
    fn conflicting_pre_prepare_is_rejected_first_wins() {
        let mut cluster = Cluster::new(4);
        let (req, _) = register_request("veh-conflict", 1);
        let parent = cluster.replicas[1].ledger.head_hash();
        let make_pp = |logical_time: u64, cluster: &Cluster| {
            let block = sign_block(
                Block {
                    height: 1,
                    parent_hash: parent,
                    txs: req.txs.clone(),
                    proposer: cluster.addr(0),
                    proposer_sig: Vec::new(),
                    logical_time,
                },
                &cluster.keys[0],
            );
            let digest = Provider::hash(&block.encode());
            sign_pre_prepare(
                PrePrepareMsg {
                    view: 0,
                    seq: 1,
                    digest,
                    block,
                    requests: vec![req.clone()],
                    sender: cluster.addr(0),
                    sig: Vec::new(),
                },
                &cluster.keys[0],
            )
        };
        let pp_a = make_pp(5, &cluster);
        let pp_b = make_pp(6, &cluster);
        assert_ne!(pp_a.digest, pp_b.digest);

        cluster.replicas[1].handle_message(&ConsensusMessage::PrePrepare(pp_a.clone()), 5);
        cluster.replicas[1].handle_message(&ConsensusMessage::PrePrepare(pp_b), 6);
        assert_eq!(cluster.replicas[1].dropped_conflicting_preprepare, 1);
        let inst = cluster.replicas[1].instances.get(&(0, 1)).unwrap();
        assert_eq!(inst.digest, Some(pp_a.digest));
    }

    #[test]
    fn four_replicas_agree_under_random_delivery() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cluster = Cluster::new(4);
            let (req, _) = register_request("veh-rand", 1);
            cluster.submit(&req);
            cluster.run(&mut rng, 10_000);

            let head = cluster.common_head().expect("replicas diverged");
            assert_ne!(head, cluster.genesis.hash());
            for replica in &cluster.replicas {
                assert_eq!(replica.ledger.head.height, 1);
                assert!(replica
                    .ledger
                    .active_identity(&req.client)
                    .is_some_and(|r| r.role == Role::Vehicle));
            }
            // the client sees f+1 matching replies
            let accepted = client_collect_replies(&cluster.replies, &cluster.cfg);
            let accepted = accepted.expect("client never accepted a result");
            assert!(accepted.outcomes.iter().all(|o| o.accepted));
        }
    }

    #[test]
    fn single_validator_commits_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cluster = Cluster::new(1);
        let (req, _) = register_request("veh-solo", 1);
        cluster.submit(&req);
        cluster.run(&mut rng, 100);
        assert_eq!(cluster.replicas[0].ledger.head.height, 1);
        assert!(client_collect_replies(&cluster.replies, &cluster.cfg).is_some());
    }

    #[test]
    fn duplicate_request_is_answered_from_reply_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cluster = Cluster::new(4);
        let (req, _) = register_request("veh-dup", 1);
        cluster.submit(&req);
        cluster.run(&mut rng, 10_000);
        let replies_before = cluster.replies.len();

        let outputs = cluster.replicas[2].handle_client_request(&req, 999).unwrap();
        assert!(matches!(
            outputs.as_slice(),
            [Output::SendClient(_, ConsensusMessage::Reply(_))]
        ));
        // no new consensus round was started
        assert_eq!(cluster.replicas[2].ledger.head.height, 1);
        drop(outputs);
        assert_eq!(cluster.replies.len(), replies_before);
    }

    #[test]
    fn timeout_triggers_view_change_to_next_view() {
        let mut cluster = Cluster::new(4);
        let (req, _) = register_request("veh-vc", 1);
        let outputs = cluster.replicas[1].handle_client_request(&req, 0).unwrap();
        let timer_id = outputs
            .iter()
            .find_map(|o| match o {
                Output::ArmTimer { id, .. } => Some(*id),
                _ => None,
            })
            .unwrap();
        let outputs = cluster.replicas[1].handle_timeout(timer_id, DEFAULT_VIEW_TIMEOUT);
        let vc = outputs
            .iter()
            .find_map(|o| match o {
                Output::Broadcast(ConsensusMessage::ViewChange(vc)) => Some(vc),
                _ => None,
            })
            .unwrap();
        assert_eq!(vc.new_view, 1);
        assert!(vc.prepared.is_none());
    }

    #[test]
    fn crashed_primary_is_replaced_and_request_commits() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cluster = Cluster::new(4);
            cluster.crash(0);
            let (req, _) = register_request("veh-crash", 1);
            cluster.submit(&req);
            cluster.run(&mut rng, 20_000);

            cluster.common_head().expect("live replicas diverged");
            for i in 1..4 {
                assert_eq!(cluster.replicas[i].ledger.head.height, 1, "seed {seed}");
                assert!(cluster.replicas[i].view >= 1);
                assert!(cluster.replicas[i].view <= 3, "too many view changes");
            }
            assert!(client_collect_replies(&cluster.replies, &cluster.cfg).is_some());
        }
    }

    #[test]
    fn equivocating_primary_cannot_split_honest_replicas() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cluster = Cluster::new(4);
            // the Byzantine primary equivocates once, then stays silent
            cluster.crash(0);
            let (req, _) = register_request("veh-equiv", 1);
            let parent = cluster.replicas[1].ledger.head_hash();
            let make_pp = |logical_time: u64| {
                let block = sign_block(
                    Block {
                        height: 1,
                        parent_hash: parent,
                        txs: req.txs.clone(),
                        proposer: cluster.addr(0),
                        proposer_sig: Vec::new(),
                        logical_time,
                    },
                    &cluster.keys[0],
                );
                let digest = Provider::hash(&block.encode());
                sign_pre_prepare(
                    PrePrepareMsg {
                        view: 0,
                        seq: 1,
                        digest,
                        block,
                        requests: vec![req.clone()],
                        sender: cluster.addr(0),
                        sig: Vec::new(),
                    },
                    &cluster.keys[0],
                )
            };
            let pp_a = make_pp(5);
            let pp_b = make_pp(6);

            cluster.submit(&req);
            cluster.inject(1, ConsensusMessage::PrePrepare(pp_a.clone()));
            cluster.inject(2, ConsensusMessage::PrePrepare(pp_b.clone()));
            cluster.inject(3, ConsensusMessage::PrePrepare(pp_b.clone()));
            cluster.run(&mut rng, 20_000);

            // safety: every honest replica that committed seq 1 committed the
            // same digest
            let committed: Vec<Digest32> = (1..4)
                .filter_map(|i| cluster.replicas[i].committed_digest(1).copied())
                .collect();
            assert!(
                committed.windows(2).all(|w| w[0] == w[1]),
                "honest replicas committed different blocks (seed {seed})"
            );
            // liveness: the view change rescued the request
            assert_eq!(committed.len(), 3, "seed {seed}");
            cluster.common_head().expect("live replicas diverged");
        }
    }

    #[test]
    fn new_view_requires_quorum_of_valid_view_changes() {
        let mut cluster = Cluster::new(4);
        let mut vc = ViewChangeMsg {
            new_view: 1,
            last_stable: 0,
            prepared: None,
            sender: cluster.addr(2),
            sig: Vec::new(),
        };
        vc.sig = Provider::sign(&cluster.keys[2], &vc_signing_bytes(&vc));
        // a forged new-view citing only one view change is dropped
        let mut nv = NewViewMsg {
            view: 1,
            view_changes: vec![vc],
            pre_prepare: None,
            sender: cluster.addr(1),
            sig: Vec::new(),
        };
        nv.sig = Provider::sign(&cluster.keys[1], &nv_signing_bytes(&nv));
        cluster.replicas[3].handle_message(&ConsensusMessage::NewView(nv), 5);
        assert_eq!(cluster.replicas[3].view, 0);
    }

    #[test]
    fn reply_collector_needs_f_plus_one_matching() {
        let cluster = Cluster::new(4);
        let (req, _) = register_request("veh-replies", 1);
        let digest = req.digest();
        let make_reply = |i: usize, accepted: bool, cluster: &Cluster| {
            let mut reply = ReplyMsg {
                view: 0,
                seq: 1,
                request_digest: digest,
                outcomes: vec![TxOutcome {
                    tx_digest: req.txs[0].digest(),
                    accepted,
                    reason: String::new(),
                }],
                client: req.client,
                sender: cluster.addr(i),
                sig: Vec::new(),
            };
            reply.sig = Provider::sign(&cluster.keys[i], &reply_signing_bytes(&reply));
            reply
        };
        let r0 = make_reply(0, true, &cluster);
        let r1 = make_reply(1, false, &cluster);
        let r2 = make_reply(2, true, &cluster);
        assert!(client_collect_replies(std::slice::from_ref(&r0), &cluster.cfg).is_none());
        assert!(client_collect_replies(&[r0.clone(), r1.clone()], &cluster.cfg).is_none());
        let accepted = client_collect_replies(&[r0, r1, r2], &cluster.cfg).unwrap();
        assert!(accepted.outcomes[0].accepted);
        drop(cluster);
    }
}
