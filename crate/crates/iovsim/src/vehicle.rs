//! Per-vehicle sub-layer: declared components, an internal message bus, and
//! the gateway that bridges to the primary layer.
//!
//! The isolation policy is deliberately blunt: messages that entered through
//! the gateway (External origin) may only reach NonSensitive components.
//! Sensitive components can talk internally and send data outward, but they
//! are never addressable from outside and never exported to the ledger.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bisa::{SessionContext, SessionError, WireRecord};
use crate::crypto::{CryptoProvider, Provider, SigningKey};
use crate::dbnr::{Layer, Locator};
use crate::ledger::{
    derive_address, BlockchainAddress, LedgerState, LedgerTransaction, Role, TxPayload,
};
use crate::wire::{self, Reader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComponentKind {
    Sensor,
    ControlUnit,
    Gateway,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sensitivity {
    Sensitive,
    NonSensitive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentDescriptor {
    pub component_id: String,
    pub kind: ComponentKind,
    pub sensitivity: Sensitivity,
    /// Present only after a NonSensitive component has been exported.
    pub address: Option<BlockchainAddress>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Origin {
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InternalMessage {
    pub src: String,
    pub dst: String,
    pub origin: Origin,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockReason {
    SensitiveTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("component {0} is not declared on this vehicle")]
    UnknownComponent(String),
    #[error("external message blocked: sensitive target")]
    Blocked(BlockReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusConfigError {
    #[error("vehicle declares no gateway component")]
    NoGateway,
    #[error("vehicle declares more than one gateway component")]
    MultipleGateways,
    #[error("sensitive component {0} must not carry an address")]
    AddressedSensitive(String),
    #[error("duplicate component id {0}")]
    DuplicateComponent(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExportError {
    #[error("sensitive components are never exported")]
    SensitiveExportRefused,
    #[error("component already exported")]
    DuplicateExport,
    #[error("component {0} is not declared on this vehicle")]
    UnknownComponent(String),
    #[error("vehicle identity is not active on the ledger")]
    InactiveVehicle,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngressError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("bus refused delivery to {dst}: {source}")]
    Bus { dst: String, source: BusError },
    #[error("sealed payload does not decode to a bus message")]
    MalformedPayload,
}

/// One vehicle's component table and bus counters.
#[derive(Debug, Clone)]
pub struct VehicleBus {
    pub vehicle_id: String,
    components: BTreeMap<String, ComponentDescriptor>,
    gateway_id: String,
    pub delivered_internal: u64,
    pub delivered_external: u64,
    pub blocked: u64,
}

impl VehicleBus {
    pub fn new(
        vehicle_id: String,
        components: Vec<ComponentDescriptor>,
    ) -> Result<Self, BusConfigError> {
        let mut map = BTreeMap::new();
        let mut gateway = None;
        for c in components {
            if c.sensitivity == Sensitivity::Sensitive && c.address.is_some() {
                return Err(BusConfigError::AddressedSensitive(c.component_id));
            }
            if c.kind == ComponentKind::Gateway
                && gateway.replace(c.component_id.clone()).is_some()
            {
                return Err(BusConfigError::MultipleGateways);
            }
            if map.insert(c.component_id.clone(), c.clone()).is_some() {
                return Err(BusConfigError::DuplicateComponent(c.component_id));
            }
        }
        Ok(VehicleBus {
            vehicle_id,
            components: map,
            gateway_id: gateway.ok_or(BusConfigError::NoGateway)?,
            delivered_internal: 0,
            delivered_external: 0,
            blocked: 0,
        })
    }

    pub fn gateway_id(&self) -> &str {
        &self.gateway_id
    }

    pub fn component(&self, id: &str) -> Option<&ComponentDescriptor> {
        self.components.get(id)
    }

    pub fn components(&self) -> impl Iterator<Item = &ComponentDescriptor> {
        self.components.values()
    }

    /// Deliver one message on the internal bus, enforcing isolation.
    pub fn route_internal(&mut self, msg: &InternalMessage) -> Result<(), BusError> {
        if !self.components.contains_key(&msg.src) {
            return Err(BusError::UnknownComponent(msg.src.clone()));
        }
        let dst = self
            .components
            .get(&msg.dst)
            .ok_or_else(|| BusError::UnknownComponent(msg.dst.clone()))?;
        match msg.origin {
            Origin::Internal => {
                self.delivered_internal += 1;
                Ok(())
            }
            Origin::External => {
                if dst.sensitivity == Sensitivity::Sensitive {
                    self.blocked += 1;
                    return Err(BusError::Blocked(BlockReason::SensitiveTarget));
                }
                self.delivered_external += 1;
                Ok(())
            }
        }
    }

    /// Deterministic signing key for an exported component.
    pub fn component_key(&self, component_id: &str) -> SigningKey {
        Provider::signing_key_from_seed(
            format!("component/{}/{}", self.vehicle_id, component_id).as_bytes(),
        )
    }

    /// Register a NonSensitive component on the ledger and publish its
    /// sub-layer locator. Returns the transaction pair for one batch: the
    /// registration applies first, then the record upsert.
    pub fn export_component(
        &mut self,
        vehicle_addr: &BlockchainAddress,
        component_id: &str,
        ledger: &LedgerState,
        expires_at: u64,
    ) -> Result<(LedgerTransaction, LedgerTransaction), ExportError> {
        if ledger.active_identity(vehicle_addr).is_none() {
            return Err(ExportError::InactiveVehicle);
        }
        let key = self.component_key(component_id);
        let component = self
            .components
            .get_mut(component_id)
            .ok_or_else(|| ExportError::UnknownComponent(component_id.to_string()))?;
        if component.sensitivity == Sensitivity::Sensitive {
            return Err(ExportError::SensitiveExportRefused);
        }
        if component.address.is_some() {
            return Err(ExportError::DuplicateExport);
        }
        let address =
            derive_address(key.verify_key()).expect("provider keys have canonical length");
        component.address = Some(address);

        let register = LedgerTransaction::signed(
            TxPayload::RegisterIdentity {
                verify_key: key.verify_key().to_vec(),
                role: Role::VehicleComponent,
            },
            address,
            &key,
        );
        let version = ledger.dbnr.get(&address).map(|r| r.version).unwrap_or(0) + 1;
        let record = crate::dbnr::DbnrRecord::signed(
            address,
            format!("{}/{}", self.vehicle_id, component_id),
            Locator {
                layer: Layer::SubLayer,
                attachment: self.vehicle_id.clone(),
            },
            version,
            expires_at,
            &key,
        );
        let upsert =
            LedgerTransaction::signed(TxPayload::UpsertDbnrRecord(record), address, &key);
        Ok((register, upsert))
    }

    /// Open a sealed record at the gateway and route the plaintext as an
    /// External-origin bus message. Tampered records never touch the bus.
    pub fn gateway_ingress(
        &mut self,
        session: &mut SessionContext,
        record: &WireRecord,
    ) -> Result<InternalMessage, IngressError> {
        let plaintext = session.open(record)?;
        let (dst, payload) =
            decode_bus_payload(&plaintext).ok_or(IngressError::MalformedPayload)?;
        let msg = InternalMessage {
            src: self.gateway_id.clone(),
            dst,
            origin: Origin::External,
            payload,
        };
        self.route_internal(&msg).map_err(|source| IngressError::Bus {
            dst: msg.dst.clone(),
            source,
        })?;
        Ok(msg)
    }
}

/// Plaintext framing used inside sealed records addressed to a vehicle:
/// destination component id, then the application payload.
pub fn encode_bus_payload(dst: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    wire::put_str(&mut out, dst);
    wire::put_bytes(&mut out, payload);
    out
}

pub fn decode_bus_payload(bytes: &[u8]) -> Option<(String, Vec<u8>)> {
    let mut r = Reader::new(bytes);
    let dst = r.string().ok()?;
    let payload = r.bytes().ok()?;
    r.finish().ok()?;
    Some((dst, payload))
}

/// One candidate input to a vehicle's decision logic: the authenticated
/// session peer (None for anything that arrived outside a session) and the
/// payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateInput {
    pub source: Option<BlockchainAddress>,
    pub payload: Vec<u8>,
}

/// Keep exactly the inputs that arrived through an established session from
/// an identity that is Active in `ledger_view`; returns the accepted inputs
/// and the count of excluded ones.
pub fn decision_filter(
    ledger_view: &LedgerState,
    inputs: &[CandidateInput],
) -> (Vec<CandidateInput>, u64) {
    let mut accepted = Vec::new();
    let mut excluded = 0;
    for input in inputs {
        match input.source {
            Some(addr) if ledger_view.active_identity(&addr).is_some() => {
                accepted.push(input.clone());
            }
            _ => excluded += 1,
        }
    }
    (accepted, excluded)
}
