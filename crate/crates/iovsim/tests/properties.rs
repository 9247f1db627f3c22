//! Randomized invariants over the wire formats and the session layer.

use proptest::prelude::*;

use iovsim::bisa::{self, EndpointIdentity, HandshakeMessage, HandshakeStep, WireRecord};
use iovsim::ledger::{BlockchainAddress, LedgerState, LedgerTransaction, Role, TxPayload};
use iovsim::ledger::Block;
use iovsim::pbft::quorum_sizes;
use iovsim::wire::{Decode, Encode};

fn addr_strategy() -> impl Strategy<Value = BlockchainAddress> {
    prop::array::uniform20(any::<u8>()).prop_map(BlockchainAddress)
}

fn handshake_strategy() -> impl Strategy<Value = HandshakeMessage> {
    (
        0u8..3,
        addr_strategy(),
        addr_strategy(),
        prop::array::uniform16(any::<u8>()),
        prop::array::uniform16(any::<u8>()),
        prop::collection::vec(any::<u8>(), 0..96),
        prop::collection::vec(any::<u8>(), 0..96),
    )
        .prop_map(|(step, sender, peer, nonce, echo, eph, sig)| HandshakeMessage {
            step: match step {
                0 => HandshakeStep::Hello,
                1 => HandshakeStep::Response,
                _ => HandshakeStep::Confirm,
            },
            sender_addr: sender,
            peer_addr: peer,
            nonce,
            echo_nonce: echo,
            ephemeral_pub: eph,
            transcript_sig: sig,
        })
}

fn session_pair() -> (bisa::SessionContext, bisa::SessionContext) {
    let alice = EndpointIdentity::from_seed(b"prop-alice");
    let bob = EndpointIdentity::from_seed(b"prop-bob");
    let txs = [&alice, &bob]
        .iter()
        .map(|ep| {
            LedgerTransaction::signed(
                TxPayload::RegisterIdentity {
                    verify_key: ep.key.verify_key().to_vec(),
                    role: Role::Vehicle,
                },
                ep.address,
                &ep.key,
            )
        })
        .collect();
    let ledger = LedgerState::from_genesis(&Block::genesis(txs, 0)).unwrap();
    let (pending, hello) = bisa::initiate(&alice, bob.address, &ledger, b"prop-i").unwrap();
    let (mut responder, response) = bisa::respond(&bob, &hello, &ledger, b"prop-r", 1).unwrap();
    let (initiator, confirm) = bisa::complete(&pending, &response, &ledger, 2).unwrap();
    bisa::verify_confirm(&mut responder, &confirm, &ledger).unwrap();
    (initiator, responder)
}

proptest! {
    #[test]
    fn handshake_message_roundtrips(msg in handshake_strategy()) {
        let decoded = HandshakeMessage::decode(&msg.encode()).unwrap();
        prop_assert_eq!(decoded, msg);
    }

    #[test]
    fn wire_record_roundtrips(
        sender in addr_strategy(),
        receiver in addr_strategy(),
        counter in any::<u64>(),
        body in prop::collection::vec(any::<u8>(), 0..256),
    ) {
        let record = WireRecord { sender, receiver, counter, body };
        let decoded = WireRecord::decode(&record.encode()).unwrap();
        prop_assert_eq!(decoded, record);
    }

    #[test]
    fn truncated_handshake_encodings_are_rejected(msg in handshake_strategy()) {
        let encoded = msg.encode();
        for cut in 0..encoded.len() {
            prop_assert!(HandshakeMessage::decode(&encoded[..cut]).is_err());
        }
    }

    #[test]
    fn sealed_records_roundtrip_and_replay_fails(
        plaintext in prop::collection::vec(any::<u8>(), 0..512),
    ) {
        let (mut tx, mut rx) = session_pair();
        let record = tx.seal(&plaintext).unwrap();
        prop_assert_eq!(rx.open(&record).unwrap(), plaintext);
        prop_assert!(rx.open(&record).is_err());
    }

    #[test]
    fn sealing_binds_addresses_and_counter(
        plaintext in prop::collection::vec(any::<u8>(), 1..128),
        bump in 1u64..1000,
    ) {
        let (mut tx, mut rx) = session_pair();
        let mut record = tx.seal(&plaintext).unwrap();
        record.counter += bump;
        prop_assert!(rx.open(&record).is_err());
    }

    #[test]
    fn quorum_sizes_are_consistent(n in 1usize..200) {
        let (f, prepare, commit, reply) = quorum_sizes(n);
        prop_assert_eq!(f, (n - 1) / 3);
        prop_assert_eq!(prepare, 2 * f);
        prop_assert_eq!(commit, 2 * f + 1);
        prop_assert_eq!(reply, f + 1);
        prop_assert!(commit <= n);
        prop_assert!(n > 3 * f);
    }
}
