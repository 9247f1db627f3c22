//! Append-only identity ledger: the replicated state machine.
//!
//! The ledger holds identity registrations, revocations, and name-resolution
//! record updates as signed transactions grouped into hash-chained blocks.
//! Replicas agree on blocks (see [`crate::pbft`]) and fold them into a
//! [`LedgerState`] with [`apply_transaction`] / [`append_block`]; replay from
//! genesis is deterministic, so two replicas with the same chain hold
//! byte-identical states.
//!
//! Wire layout (see [`crate::wire`] for primitives):
//!
//! * `LedgerTransaction` = payload-kind u8, payload fields, submitter (20
//!   bytes fixed), signature (length-prefixed). The signed bytes are the
//!   encoding with an empty signature field.
//! * `Block` = height u64, parent_hash 32 bytes, tx list (u32 count),
//!   proposer 20 bytes, proposer_sig (length-prefixed), logical_time u64.
//!   The proposer signs the encoding with an empty signature; the block hash
//!   is the provider hash of the *full* encoding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoProvider, Digest32, Provider, SigningKey, KEY_LEN};
use crate::dbnr::DbnrRecord;
use crate::wire::{self, Decode, Encode, Reader, WireError};

pub const ADDRESS_LEN: usize = 20;

/// Compact on-ledger identifier: truncated hash of a verification key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockchainAddress(pub [u8; ADDRESS_LEN]);

impl BlockchainAddress {
    pub const ZERO: BlockchainAddress = BlockchainAddress([0u8; ADDRESS_LEN]);

    pub fn as_bytes(&self) -> &[u8; ADDRESS_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for BlockchainAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl std::fmt::Display for BlockchainAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl Serialize for BlockchainAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for BlockchainAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        let arr: [u8; ADDRESS_LEN] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("address must be 20 bytes"))?;
        Ok(BlockchainAddress(arr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Vehicle,
    Rsu,
    EdgeServer,
    CloudServer,
    VehicleComponent,
}

impl Role {
    fn to_u8(self) -> u8 {
        match self {
            Role::Vehicle => 0,
            Role::Rsu => 1,
            Role::EdgeServer => 2,
            Role::CloudServer => 3,
            Role::VehicleComponent => 4,
        }
    }

    fn from_u8(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            0 => Role::Vehicle,
            1 => Role::Rsu,
            2 => Role::EdgeServer,
            3 => Role::CloudServer,
            4 => Role::VehicleComponent,
            other => {
                return Err(WireError::InvalidValue {
                    field: "role",
                    reason: format!("unknown role tag {other}"),
                })
            }
        })
    }

    /// Roles allowed to revoke identities other than their own.
    pub fn may_revoke_others(self) -> bool {
        matches!(self, Role::Rsu | Role::EdgeServer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdentityStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub address: BlockchainAddress,
    pub verify_key: Vec<u8>,
    pub role: Role,
    pub status: IdentityStatus,
    pub registered_at: u64,
}

impl IdentityRecord {
    pub fn is_active(&self) -> bool {
        self.status == IdentityStatus::Active
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxPayload {
    RegisterIdentity { verify_key: Vec<u8>, role: Role },
    RevokeIdentity { target: BlockchainAddress },
    UpsertDbnrRecord(DbnrRecord),
}

impl TxPayload {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TxPayload::RegisterIdentity { .. } => "RegisterIdentity",
            TxPayload::RevokeIdentity { .. } => "RevokeIdentity",
            TxPayload::UpsertDbnrRecord(_) => "UpsertDbnrRecord",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerTransaction {
    pub payload: TxPayload,
    pub submitter: BlockchainAddress,
    pub signature: Vec<u8>,
}

impl LedgerTransaction {
    /// Bytes covered by the submitter signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let unsigned = LedgerTransaction {
            payload: self.payload.clone(),
            submitter: self.submitter,
            signature: Vec::new(),
        };
        unsigned.encode()
    }

    pub fn digest(&self) -> Digest32 {
        Provider::hash(&self.encode())
    }

    /// Build and sign a transaction with the submitter's key.
    pub fn signed(payload: TxPayload, submitter: BlockchainAddress, key: &SigningKey) -> Self {
        let mut tx = LedgerTransaction {
            payload,
            submitter,
            signature: Vec::new(),
        };
        tx.signature = Provider::sign(key, &tx.signing_bytes());
        tx
    }
}

impl Encode for TxPayload {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            TxPayload::RegisterIdentity { verify_key, role } => {
                wire::put_u8(out, 0);
                wire::put_bytes(out, verify_key);
                wire::put_u8(out, role.to_u8());
            }
            TxPayload::RevokeIdentity { target } => {
                wire::put_u8(out, 1);
                wire::put_fixed(out, &target.0);
            }
            TxPayload::UpsertDbnrRecord(record) => {
                wire::put_u8(out, 2);
                record.encode_into(out);
            }
        }
    }
}

impl Decode for TxPayload {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            0 => TxPayload::RegisterIdentity {
                verify_key: r.bytes()?,
                role: Role::from_u8(r.u8()?)?,
            },
            1 => TxPayload::RevokeIdentity {
                target: BlockchainAddress(r.fixed()?),
            },
            2 => TxPayload::UpsertDbnrRecord(DbnrRecord::decode_from(r)?),
            other => {
                return Err(WireError::InvalidValue {
                    field: "tx_payload",
                    reason: format!("unknown payload tag {other}"),
                })
            }
        })
    }
}

impl Encode for LedgerTransaction {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.payload.encode_into(out);
        wire::put_fixed(out, &self.submitter.0);
        wire::put_bytes(out, &self.signature);
    }
}

impl Decode for LedgerTransaction {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(LedgerTransaction {
            payload: TxPayload::decode_from(r)?,
            submitter: BlockchainAddress(r.fixed()?),
            signature: r.bytes()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub parent_hash: Digest32,
    pub txs: Vec<LedgerTransaction>,
    pub proposer: BlockchainAddress,
    pub proposer_sig: Vec<u8>,
    pub logical_time: u64,
}

impl Block {
    pub fn genesis(txs: Vec<LedgerTransaction>, logical_time: u64) -> Self {
        Block {
            height: 0,
            parent_hash: [0u8; 32],
            txs,
            proposer: BlockchainAddress::ZERO,
            proposer_sig: Vec::new(),
            logical_time,
        }
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let unsigned = Block {
            proposer_sig: Vec::new(),
            ..self.clone()
        };
        unsigned.encode()
    }

    pub fn hash(&self) -> Digest32 {
        Provider::hash(&self.encode())
    }
}

impl Encode for Block {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_u64(out, self.height);
        wire::put_fixed(out, &self.parent_hash);
        wire::put_list(out, &self.txs);
        wire::put_fixed(out, &self.proposer.0);
        wire::put_bytes(out, &self.proposer_sig);
        wire::put_u64(out, self.logical_time);
    }
}

impl Decode for Block {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Block {
            height: r.u64()?,
            parent_hash: r.fixed()?,
            txs: r.list()?,
            proposer: BlockchainAddress(r.fixed()?),
            proposer_sig: r.bytes()?,
            logical_time: r.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxError {
    #[error("identity already registered")]
    DuplicateIdentity,
    #[error("submitter not registered")]
    UnknownSubmitter,
    #[error("revocation target not registered")]
    UnknownTarget,
    #[error("submitter identity is revoked")]
    RevokedSubmitter,
    #[error("signature verification failed")]
    BadSignature,
    #[error("record version does not exceed the stored version")]
    StaleVersion,
    #[error("submitter may not perform this operation")]
    Unauthorized,
    #[error("malformed verification key")]
    MalformedKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockError {
    #[error("block height {got}, expected {expected}")]
    BadHeight { got: u64, expected: u64 },
    #[error("parent hash does not match head")]
    BadParentHash,
    #[error("proposer signature invalid")]
    BadProposerSig,
    #[error("transaction {index} invalid: {reason}")]
    InvalidTxInBlock { index: usize, reason: TxError },
    #[error("non-genesis block has no transactions")]
    EmptyBlock,
    #[error("genesis block malformed: {0}")]
    BadGenesis(String),
}

/// First failing block when replaying a chain.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("chain invalid at block {index}: {reason}")]
pub struct ChainFailure {
    pub index: usize,
    pub reason: BlockError,
}

/// Replayed ledger state: identity map, name-resolution map, chain head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerState {
    pub identities: BTreeMap<BlockchainAddress, IdentityRecord>,
    pub dbnr: BTreeMap<BlockchainAddress, DbnrRecord>,
    pub head: Block,
    head_hash: Digest32,
}

/// `verify_key` must have the provider's serialized key length.
pub fn derive_address(verify_key: &[u8]) -> Result<BlockchainAddress, TxError> {
    if verify_key.len() != KEY_LEN {
        return Err(TxError::MalformedKey);
    }
    let digest = Provider::hash(verify_key);
    let mut addr = [0u8; ADDRESS_LEN];
    addr.copy_from_slice(&digest[..ADDRESS_LEN]);
    Ok(BlockchainAddress(addr))
}

impl LedgerState {
    /// Build the initial state from a genesis block. Genesis transactions
    /// pre-register the validator set (and any other bootstrap identities).
    pub fn from_genesis(genesis: &Block) -> Result<Self, BlockError> {
        if genesis.height != 0 {
            return Err(BlockError::BadGenesis("height must be 0".into()));
        }
        if genesis.parent_hash != [0u8; 32] {
            return Err(BlockError::BadGenesis("parent_hash must be zero".into()));
        }
        let mut state = LedgerState {
            identities: BTreeMap::new(),
            dbnr: BTreeMap::new(),
            head: genesis.clone(),
            head_hash: genesis.hash(),
        };
        for (index, tx) in genesis.txs.iter().enumerate() {
            state = state
                .apply_transaction(tx, genesis.logical_time)
                .map_err(|reason| BlockError::InvalidTxInBlock { index, reason })?;
        }
        Ok(state)
    }

    pub fn head_hash(&self) -> Digest32 {
        self.head_hash
    }

    pub fn identity(&self, addr: &BlockchainAddress) -> Option<&IdentityRecord> {
        self.identities.get(addr)
    }

    pub fn active_identity(&self, addr: &BlockchainAddress) -> Option<&IdentityRecord> {
        self.identities.get(addr).filter(|r| r.is_active())
    }

    /// Canonical byte encoding of the whole state, used for convergence
    /// checks between replicas.
    pub fn canonical_encoding(&self) -> Vec<u8> {
        let mut out = Vec::new();
        wire::put_u32(&mut out, self.identities.len() as u32);
        for (addr, rec) in &self.identities {
            wire::put_fixed(&mut out, &addr.0);
            wire::put_bytes(&mut out, &rec.verify_key);
            wire::put_u8(&mut out, rec.role.to_u8());
            wire::put_u8(&mut out, matches!(rec.status, IdentityStatus::Revoked) as u8);
            wire::put_u64(&mut out, rec.registered_at);
        }
        wire::put_u32(&mut out, self.dbnr.len() as u32);
        for (addr, rec) in &self.dbnr {
            wire::put_fixed(&mut out, &addr.0);
            rec.encode_into(&mut out);
        }
        wire::put_fixed(&mut out, &self.head_hash);
        out
    }

    fn check_submitter(&self, tx: &LedgerTransaction) -> Result<IdentityRecord, TxError> {
        let record = self
            .identities
            .get(&tx.submitter)
            .ok_or(TxError::UnknownSubmitter)?;
        if !record.is_active() {
            return Err(TxError::RevokedSubmitter);
        }
        if !Provider::verify(&record.verify_key, &tx.signing_bytes(), &tx.signature) {
            return Err(TxError::BadSignature);
        }
        Ok(record.clone())
    }

    /// Apply one transaction; rejected transactions leave `self` untouched.
    pub fn apply_transaction(
        &self,
        tx: &LedgerTransaction,
        logical_time: u64,
    ) -> Result<LedgerState, TxError> {
        let mut next = self.clone();
        match &tx.payload {
            TxPayload::RegisterIdentity { verify_key, role } => {
                // self-signed by the key being registered
                let address = derive_address(verify_key)?;
                if address != tx.submitter {
                    return Err(TxError::BadSignature);
                }
                if !Provider::verify(verify_key, &tx.signing_bytes(), &tx.signature) {
                    return Err(TxError::BadSignature);
                }
                if next.identities.contains_key(&address) {
                    // covers revoked identities too: no resurrection
                    return Err(TxError::DuplicateIdentity);
                }
                next.identities.insert(
                    address,
                    IdentityRecord {
                        address,
                        verify_key: verify_key.clone(),
                        role: *role,
                        status: IdentityStatus::Active,
                        registered_at: logical_time,
                    },
                );
            }
            TxPayload::RevokeIdentity { target } => {
                let submitter = self.check_submitter(tx)?;
                if *target != tx.submitter && !submitter.role.may_revoke_others() {
                    return Err(TxError::Unauthorized);
                }
                let record = next
                    .identities
                    .get_mut(target)
                    .ok_or(TxError::UnknownTarget)?;
                record.status = IdentityStatus::Revoked;
            }
            TxPayload::UpsertDbnrRecord(record) => {
                let submitter = self.check_submitter(tx)?;
                if record.address != tx.submitter {
                    return Err(TxError::Unauthorized);
                }
                if record.version == 0 {
                    return Err(TxError::StaleVersion);
                }
                if !Provider::verify(
                    &submitter.verify_key,
                    &record.signing_bytes(),
                    &record.owner_sig,
                ) {
                    return Err(TxError::BadSignature);
                }
                if let Some(stored) = next.dbnr.get(&record.address) {
                    if record.version <= stored.version {
                        return Err(TxError::StaleVersion);
                    }
                }
                next.dbnr.insert(record.address, record.clone());
            }
        }
        Ok(next)
    }

    /// Append a block: all transactions apply in order or the whole block is
    /// rejected and `self` is unchanged.
    pub fn append_block(&self, block: &Block) -> Result<LedgerState, BlockError> {
        let expected = self.head.height + 1;
        if block.height != expected {
            return Err(BlockError::BadHeight {
                got: block.height,
                expected,
            });
        }
        if block.parent_hash != self.head_hash {
            return Err(BlockError::BadParentHash);
        }
        if block.txs.is_empty() {
            return Err(BlockError::EmptyBlock);
        }
        let proposer_key = self
            .identities
            .get(&block.proposer)
            .filter(|r| r.is_active())
            .map(|r| r.verify_key.clone())
            .ok_or(BlockError::BadProposerSig)?;
        if !Provider::verify(&proposer_key, &block.signing_bytes(), &block.proposer_sig) {
            return Err(BlockError::BadProposerSig);
        }
        let mut next = self.clone();
        for (index, tx) in block.txs.iter().enumerate() {
            next = next
                .apply_transaction(tx, block.logical_time)
                .map_err(|reason| BlockError::InvalidTxInBlock { index, reason })?;
        }
        next.head = block.clone();
        next.head_hash = block.hash();
        Ok(next)
    }
}

/// Replay a chain from genesis, reporting the first invalid block.
pub fn validate_chain(blocks: &[Block]) -> Result<LedgerState, ChainFailure> {
    let genesis = blocks.first().ok_or(ChainFailure {
        index: 0,
        reason: BlockError::BadGenesis("empty chain".into()),
    })?;
    let mut state = LedgerState::from_genesis(genesis).map_err(|reason| ChainFailure {
        index: 0,
        reason,
    })?;
    for (index, block) in blocks.iter().enumerate().skip(1) {
        state = state
            .append_block(block)
            .map_err(|reason| ChainFailure { index, reason })?;
    }
    Ok(state)
}
