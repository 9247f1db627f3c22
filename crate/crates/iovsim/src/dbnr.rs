//! Decentralized name resolution: address → interface + topological locator.
//!
//! Records are carried on the ledger as `UpsertDbnrRecord` transactions, so
//! they inherit the chain's authenticity and replay determinism. Resolvers
//! (RSUs, edge servers, and vehicle-side caches) serve snapshots refreshed
//! from a ledger state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoProvider, Provider, SigningKey};
use crate::ledger::{BlockchainAddress, LedgerState, LedgerTransaction, TxPayload};
use crate::wire::{self, Decode, Encode, Reader, WireError};

/// Which layer a locator points into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Primary,
    SubLayer,
}

/// Topological attachment: the serving RSU/edge server for primary-layer
/// endpoints, or the owning vehicle for exported sub-layer components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Locator {
    pub layer: Layer,
    pub attachment: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbnrRecord {
    pub address: BlockchainAddress,
    pub interface_id: String,
    pub locator: Locator,
    pub version: u64,
    pub expires_at: u64,
    #[serde(with = "hex_bytes")]
    pub owner_sig: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl DbnrRecord {
    /// Bytes covered by the owner signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let unsigned = DbnrRecord {
            owner_sig: Vec::new(),
            ..self.clone()
        };
        unsigned.encode()
    }

    pub fn signed(
        address: BlockchainAddress,
        interface_id: String,
        locator: Locator,
        version: u64,
        expires_at: u64,
        key: &SigningKey,
    ) -> Self {
        let mut record = DbnrRecord {
            address,
            interface_id,
            locator,
            version,
            expires_at,
            owner_sig: Vec::new(),
        };
        record.owner_sig = Provider::sign(key, &record.signing_bytes());
        record
    }
}

impl Encode for DbnrRecord {
    fn encode_into(&self, out: &mut Vec<u8>) {
        wire::put_fixed(out, self.address.as_bytes());
        wire::put_str(out, &self.interface_id);
        wire::put_u8(out, matches!(self.locator.layer, Layer::SubLayer) as u8);
        wire::put_str(out, &self.locator.attachment);
        wire::put_u64(out, self.version);
        wire::put_u64(out, self.expires_at);
        wire::put_bytes(out, &self.owner_sig);
    }
}

impl Decode for DbnrRecord {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let address = BlockchainAddress(r.fixed()?);
        let interface_id = r.string()?;
        let layer = match r.u8()? {
            0 => Layer::Primary,
            1 => Layer::SubLayer,
            other => {
                return Err(WireError::InvalidValue {
                    field: "layer",
                    reason: format!("unknown layer tag {other}"),
                })
            }
        };
        Ok(DbnrRecord {
            address,
            interface_id,
            locator: Locator {
                layer,
                attachment: r.string()?,
            },
            version: r.u64()?,
            expires_at: r.u64()?,
            owner_sig: r.bytes()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DbnrError {
    #[error("address has no record")]
    NotFound,
    #[error("record expired")]
    Expired,
    #[error("identity is revoked")]
    RevokedIdentity,
    #[error("no route: attachment node missing from topology")]
    NoRoute,
}

/// Snapshot of the ledger's DBNR map as of a chain height.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResolverCache {
    pub entries: BTreeMap<BlockchainAddress, DbnrRecord>,
    pub as_of: u64,
}

impl ResolverCache {
    /// Cached record if present and unexpired at `now`.
    pub fn resolve(&self, address: &BlockchainAddress, now: u64) -> Result<&DbnrRecord, DbnrError> {
        let record = self.entries.get(address).ok_or(DbnrError::NotFound)?;
        if record.expires_at <= now {
            return Err(DbnrError::Expired);
        }
        Ok(record)
    }

    /// Replace the snapshot with the ledger's current DBNR map.
    pub fn refresh(&mut self, ledger: &LedgerState) {
        self.entries = ledger.dbnr.clone();
        self.as_of = ledger.head.height;
    }

    pub fn canonical_encoding(&self) -> Vec<u8> {
        let mut out = Vec::new();
        wire::put_u64(&mut out, self.as_of);
        wire::put_u32(&mut out, self.entries.len() as u32);
        for record in self.entries.values() {
            record.encode_into(&mut out);
        }
        out
    }
}

/// Build a signed upsert transaction for the identity's own record.
pub fn make_upsert(
    key: &SigningKey,
    ledger: &LedgerState,
    interface_id: String,
    locator: Locator,
    expires_at: u64,
) -> Result<LedgerTransaction, DbnrError> {
    let address = crate::ledger::derive_address(key.verify_key()).map_err(|_| DbnrError::NotFound)?;
    let identity = ledger.identity(&address).ok_or(DbnrError::NotFound)?;
    if !identity.is_active() {
        return Err(DbnrError::RevokedIdentity);
    }
    let prev_version = ledger.dbnr.get(&address).map(|r| r.version).unwrap_or(0);
    let record = DbnrRecord::signed(
        address,
        interface_id,
        locator,
        prev_version + 1,
        expires_at,
        key,
    );
    Ok(LedgerTransaction::signed(
        TxPayload::UpsertDbnrRecord(record),
        address,
        key,
    ))
}

/// Static view of the scenario topology a router needs: which nodes exist
/// and where vehicles currently attach.
pub trait Topology {
    fn has_node(&self, id: &str) -> bool;
    /// Serving RSU / edge server of a vehicle node.
    fn attachment_rsu_of(&self, vehicle: &str) -> Option<String>;
}

/// Source endpoint for route computation: the node and its locator.
#[derive(Debug, Clone)]
pub struct RouteEndpoint {
    pub node: String,
    pub locator: Locator,
}

/// Ordered node identifiers a message traverses from `src` to the owner of
/// `dst`. Primary-layer endpoints route via their attachment RSUs over the
/// backbone mesh; sub-layer endpoints route through the owning vehicle's
/// gateway.
pub fn resolve_route<T: Topology>(
    topology: &T,
    src: &RouteEndpoint,
    dst: &DbnrRecord,
) -> Result<Vec<String>, DbnrError> {
    let mut path = vec![src.node.clone()];
    let push = |path: &mut Vec<String>, node: String| {
        if path.last() != Some(&node) {
            path.push(node);
        }
    };

    // climb out of the sub-layer through the owning vehicle (its gateway is
    // the vehicle's sole primary-layer endpoint)
    let src_rsu = match src.locator.layer {
        Layer::Primary => src.locator.attachment.clone(),
        Layer::SubLayer => {
            let vehicle = src.locator.attachment.clone();
            if !topology.has_node(&vehicle) {
                return Err(DbnrError::NoRoute);
            }
            let rsu = topology
                .attachment_rsu_of(&vehicle)
                .ok_or(DbnrError::NoRoute)?;
            push(&mut path, vehicle);
            rsu
        }
    };
    if !topology.has_node(&src_rsu) {
        return Err(DbnrError::NoRoute);
    }
    push(&mut path, src_rsu);

    match dst.locator.layer {
        Layer::Primary => {
            let dst_rsu = dst.locator.attachment.clone();
            if !topology.has_node(&dst_rsu) {
                return Err(DbnrError::NoRoute);
            }
            push(&mut path, dst_rsu);
            push(&mut path, dst.interface_id.clone());
        }
        Layer::SubLayer => {
            // exactly one gateway crossing into the destination vehicle
            let vehicle = dst.locator.attachment.clone();
            if !topology.has_node(&vehicle) {
                return Err(DbnrError::NoRoute);
            }
            let rsu = topology
                .attachment_rsu_of(&vehicle)
                .ok_or(DbnrError::NoRoute)?;
            if !topology.has_node(&rsu) {
                return Err(DbnrError::NoRoute);
            }
            push(&mut path, rsu);
            push(&mut path, vehicle);
            push(&mut path, dst.interface_id.clone());
        }
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::TestCrypto;
    use crate::ledger::{derive_address, Block, LedgerState, Role};

    fn bootstrap() -> (LedgerState, SigningKey, BlockchainAddress) {
        let key = TestCrypto::signing_key_from_seed(b"node");
        let addr = derive_address(key.verify_key()).unwrap();
        let tx = LedgerTransaction::signed(
            TxPayload::RegisterIdentity {
                verify_key: key.verify_key().to_vec(),
                role: Role::Rsu,
            },
            addr,
            &key,
        );
        let state = LedgerState::from_genesis(&Block::genesis(vec![tx], 0)).unwrap();
        (state, key, addr)
    }

    #[test]
    fn upsert_versions_count_up_from_one() {
        let (state, key, addr) = bootstrap();
        let locator = Locator {
            layer: Layer::Primary,
            attachment: "rsu1".into(),
        };
        let tx = make_upsert(&key, &state, "v2x0".into(), locator.clone(), 500).unwrap();
        let state = state.apply_transaction(&tx, 1).unwrap();
        assert_eq!(state.dbnr.get(&addr).unwrap().version, 1);
        let tx = make_upsert(&key, &state, "v2x0".into(), locator, 600).unwrap();
        let state = state.apply_transaction(&tx, 2).unwrap();
        assert_eq!(state.dbnr.get(&addr).unwrap().version, 2);
    }

    #[test]
    fn forged_owner_sig_rejected_at_apply() {
        let (state, key, addr) = bootstrap();
        let wrong_key = TestCrypto::signing_key_from_seed(b"attacker");
        // record signed with the wrong key, transaction signed correctly
        let record = DbnrRecord::signed(
            addr,
            "v2x0".into(),
            Locator {
                layer: Layer::Primary,
                attachment: "rsu1".into(),
            },
            1,
            500,
            &wrong_key,
        );
        let tx = LedgerTransaction::signed(TxPayload::UpsertDbnrRecord(record), addr, &key);
        assert_eq!(
            state.apply_transaction(&tx, 1),
            Err(crate::ledger::TxError::BadSignature)
        );
        assert!(state.dbnr.is_empty());
    }

    #[test]
    fn resolve_distinguishes_missing_and_expired() {
        let (state, key, addr) = bootstrap();
        let mut cache = ResolverCache::default();
        assert_eq!(cache.resolve(&addr, 0), Err(DbnrError::NotFound));
        let tx = make_upsert(
            &key,
            &state,
            "v2x0".into(),
            Locator {
                layer: Layer::Primary,
                attachment: "rsu1".into(),
            },
            100,
        )
        .unwrap();
        let state = state.apply_transaction(&tx, 1).unwrap();
        cache.refresh(&state);
        assert!(cache.resolve(&addr, 50).is_ok());
        assert_eq!(cache.resolve(&addr, 100), Err(DbnrError::Expired));
        assert_eq!(cache.resolve(&addr, 200), Err(DbnrError::Expired));
    }

    #[test]
    fn refresh_is_idempotent() {
        let (state, key, addr) = bootstrap();
        let tx = make_upsert(
            &key,
            &state,
            "v2x0".into(),
            Locator {
                layer: Layer::Primary,
                attachment: "rsu1".into(),
            },
            100,
        )
        .unwrap();
        let state = state.apply_transaction(&tx, 1).unwrap();
        let _ = addr;
        let mut a = ResolverCache::default();
        a.refresh(&state);
        let mut b = a.clone();
        b.refresh(&state);
        assert_eq!(a.canonical_encoding(), b.canonical_encoding());
    }

    struct FlatTopology(Vec<String>);

    impl Topology for FlatTopology {
        fn has_node(&self, id: &str) -> bool {
            self.0.iter().any(|n| n == id)
        }
        fn attachment_rsu_of(&self, vehicle: &str) -> Option<String> {
            self.has_node(vehicle).then(|| "rsu1".to_string())
        }
    }

    #[test]
    fn primary_to_primary_route() {
        let topo = FlatTopology(vec!["rsu1".into(), "rsu2".into(), "A".into(), "B".into()]);
        let src = RouteEndpoint {
            node: "A".into(),
            locator: Locator {
                layer: Layer::Primary,
                attachment: "rsu1".into(),
            },
        };
        let key = TestCrypto::signing_key_from_seed(b"b");
        let dst = DbnrRecord::signed(
            derive_address(key.verify_key()).unwrap(),
            "B".into(),
            Locator {
                layer: Layer::Primary,
                attachment: "rsu2".into(),
            },
            1,
            100,
            &key,
        );
        assert_eq!(
            resolve_route(&topo, &src, &dst).unwrap(),
            vec!["A", "rsu1", "rsu2", "B"]
        );
    }

    #[test]
    fn sublayer_destination_routes_through_owning_vehicle() {
        let topo = FlatTopology(vec!["rsu1".into(), "vehB".into(), "A".into()]);
        let src = RouteEndpoint {
            node: "A".into(),
            locator: Locator {
                layer: Layer::Primary,
                attachment: "rsu1".into(),
            },
        };
        let key = TestCrypto::signing_key_from_seed(b"comp");
        let dst = DbnrRecord::signed(
            derive_address(key.verify_key()).unwrap(),
            "telemetry0".into(),
            Locator {
                layer: Layer::SubLayer,
                attachment: "vehB".into(),
            },
            1,
            100,
            &key,
        );
        let path = resolve_route(&topo, &src, &dst).unwrap();
        assert_eq!(path, vec!["A", "rsu1", "vehB", "telemetry0"]);
        // exactly one gateway crossing: the owning vehicle appears once
        assert_eq!(path.iter().filter(|n| *n == "vehB").count(), 1);
    }

    #[test]
    fn missing_attachment_is_no_route() {
        let topo = FlatTopology(vec!["rsu1".into(), "A".into()]);
        let src = RouteEndpoint {
            node: "A".into(),
            locator: Locator {
                layer: Layer::Primary,
                attachment: "rsu1".into(),
            },
        };
        let key = TestCrypto::signing_key_from_seed(b"b");
        let dst = DbnrRecord::signed(
            derive_address(key.verify_key()).unwrap(),
            "B".into(),
            Locator {
                layer: Layer::Primary,
                attachment: "rsu9".into(),
            },
            1,
            100,
            &key,
        );
        assert_eq!(resolve_route(&topo, &src, &dst), Err(DbnrError::NoRoute));
    }
}
