//! Two-layer blockchain-backed IoV security stack.
//!
//! A primary layer replicates an identity ledger across roadside
//! infrastructure with PBFT, endpoints mutually authenticate and encrypt
//! sessions keyed to their on-chain addresses, and name resolution is served
//! from the same ledger. Each vehicle runs an isolated sub-layer bridged to
//! the primary layer through a single gateway. A deterministic discrete-event
//! simulator with a configurable adversary suite turns the stack's security
//! claims into checkable run properties.

pub mod bisa;
pub mod crypto;
pub mod dbnr;
pub mod ledger;
pub mod pbft;
pub mod scenario;
pub mod sim;
pub mod vehicle;
pub mod wire;
