//! End-to-end acceptance gate. Each test covers one release criterion and
//! prints a single `criterion NN <name>: pass|fail` line (visible with
//! `cargo test --test acceptance -- --nocapture`).

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iovsim::bisa::{self, EndpointIdentity, HandshakeMessage, SessionContext};
use iovsim::crypto::{CryptoProvider, Provider};
use iovsim::ledger::{
    derive_address, validate_chain, Block, LedgerState, LedgerTransaction, Role, TxPayload,
};
use iovsim::pbft::testkit::{register_request, sign_block, sign_pre_prepare, Cluster};
use iovsim::pbft::{client_collect_replies, ConsensusMessage, PrePrepareMsg};
use iovsim::scenario::{
    self, parse_scenario, run_scenario, verify_trace, MetricsReport, RunOverrides,
};
use iovsim::wire::{Decode, Encode};

fn verdict(number: u32, name: &str, failures: Vec<String>) {
    if failures.is_empty() {
        println!("criterion {number:02} {name}: pass");
    } else {
        println!("criterion {number:02} {name}: fail");
        panic!("criterion {number:02} {name} failed:\n  {}", failures.join("\n  "));
    }
}

fn out_dir(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("iovsim-acceptance-{}-{tag}", std::process::id()))
}

fn bundled(name: &str) -> &'static str {
    scenario::bundled_scenarios()
        .into_iter()
        .find(|(n, _)| *n == name)
        .unwrap_or_else(|| panic!("no bundled scenario named {name}"))
        .1
}

fn run_bundled(name: &str, tag: &str) -> MetricsReport {
    let sc = parse_scenario(bundled(name)).expect("bundled scenario parses");
    let overrides = RunOverrides {
        seed: None,
        out_dir: Some(out_dir(tag)),
    };
    run_scenario(&sc, &overrides).expect("scenario runs").report
}

fn check_counters(report: &MetricsReport, expected: &[(&str, u64)], failures: &mut Vec<String>) {
    for (metric, want) in expected {
        let got = report.counters.get(*metric).copied().unwrap_or(0);
        if got != *want {
            failures.push(format!(
                "{}: {metric} = {got}, expected {want}",
                report.scenario
            ));
        }
    }
}

// -- consensus ---------------------------------------------------------------

/// An equivocating primary never splits the honest replicas: across 1000
/// seeded delivery orders, every live replica that commits height 1 commits
/// the same block, and the run finishes well inside the time budget.
#[test]
fn c01_agreement_under_equivocating_primary() {
    let started = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cluster = Cluster::new(4);
        cluster.crash(0);
        let (req, _) = register_request("acc-equiv", 1);
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
        cluster.inject(1, ConsensusMessage::PrePrepare(pp_a));
        cluster.inject(2, ConsensusMessage::PrePrepare(pp_b.clone()));
        cluster.inject(3, ConsensusMessage::PrePrepare(pp_b));
        cluster.run(&mut rng, 40_000);

        let committed: Vec<_> = (1..4)
            .filter_map(|i| cluster.replicas[i].committed_digest(1).copied())
            .collect();
        if committed.windows(2).any(|w| w[0] != w[1]) {
            failures.push(format!("seed {seed}: honest replicas committed different blocks"));
        }
        if committed.len() != 3 {
            failures.push(format!(
                "seed {seed}: only {} of 3 honest replicas committed",
                committed.len()
            ));
        }
        if cluster.common_head().is_none() {
            failures.push(format!("seed {seed}: live replicas diverged"));
        }
    }
    let elapsed = started.elapsed();
    if elapsed.as_secs() >= 120 {
        failures.push(format!("1000 runs took {elapsed:?}, budget is 120s"));
    }
    verdict(1, "agreement under equivocating primary (1000 seeds)", failures);
}

/// With the view-0 primary crashed, 100 seeded runs all commit the pending
/// request after at most three view changes and the client collects a
/// matching reply quorum.
#[test]
fn c02_liveness_after_primary_crash() {
    let mut failures = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6c69 ^ seed);
        let mut cluster = Cluster::new(4);
        cluster.crash(0);
        let (req, _) = register_request("acc-crash", 1);
        cluster.submit(&req);
        cluster.run(&mut rng, 40_000);

        for i in 1..4 {
            let replica = &cluster.replicas[i];
            if replica.ledger.head.height != 1 {
                failures.push(format!("seed {seed}: replica {i} never committed"));
            }
            if replica.view == 0 || replica.view > 3 {
                failures.push(format!(
                    "seed {seed}: replica {i} at view {}, expected 1..=3",
                    replica.view
                ));
            }
        }
        if client_collect_replies(&cluster.replies, &cluster.cfg).is_none() {
            failures.push(format!("seed {seed}: client never accepted a reply quorum"));
        }
    }
    verdict(2, "liveness after primary crash (100 seeds)", failures);
}

// -- authentication and session integrity ------------------------------------

struct HandshakeOutcome {
    mutual: bool,
}

/// Replay the three-step handshake with `mutate` applied to exactly one
/// message, and report whether both sides ended up established on the same
/// key.
fn run_tampered_handshake(
    ledger: &LedgerState,
    alice: &EndpointIdentity,
    bob: &EndpointIdentity,
    step: usize,
    mutate: &dyn Fn(&mut HandshakeMessage),
) -> HandshakeOutcome {
    let failed = HandshakeOutcome { mutual: false };
    let (pending, mut hello) = bisa::initiate(alice, bob.address, ledger, b"acc-i").unwrap();
    if step == 0 {
        mutate(&mut hello);
    }
    let Ok((mut responder, mut response)) = bisa::respond(bob, &hello, ledger, b"acc-r", 1) else {
        return failed;
    };
    if step == 1 {
        mutate(&mut response);
    }
    let Ok((initiator, mut confirm)) = bisa::complete(&pending, &response, ledger, 2) else {
        return failed;
    };
    if step == 2 {
        mutate(&mut confirm);
    }
    if bisa::verify_confirm(&mut responder, &confirm, ledger).is_err() {
        return failed;
    }
    HandshakeOutcome {
        mutual: initiator.is_established()
            && responder.is_established()
            && initiator.session_key() == responder.session_key(),
    }
}

fn register_pair() -> (LedgerState, EndpointIdentity, EndpointIdentity) {
    let alice = EndpointIdentity::from_seed(b"acc-alice");
    let bob = EndpointIdentity::from_seed(b"acc-bob");
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
    let state = LedgerState::from_genesis(&Block::genesis(txs, 0)).unwrap();
    (state, alice, bob)
}

fn fresh_sessions(
    ledger: &LedgerState,
    alice: &EndpointIdentity,
    bob: &EndpointIdentity,
) -> (SessionContext, SessionContext) {
    let (pending, hello) = bisa::initiate(alice, bob.address, ledger, b"acc-i").unwrap();
    let (mut responder, response) = bisa::respond(bob, &hello, ledger, b"acc-r", 1).unwrap();
    let (initiator, confirm) = bisa::complete(&pending, &response, ledger, 2).unwrap();
    bisa::verify_confirm(&mut responder, &confirm, ledger).unwrap();
    (initiator, responder)
}

/// Every single-field tamper of any handshake message aborts mutual
/// establishment, and every single-bit flip of a sealed record fails to
/// open. The untampered paths still succeed.
#[test]
fn c03_tampered_handshakes_and_records_rejected() {
    let (ledger, alice, bob) = register_pair();
    let mut failures = Vec::new();

    // control: the clean handshake must work, or the tamper runs prove nothing
    let clean = run_tampered_handshake(&ledger, &alice, &bob, 0, &|_| {});
    if !clean.mutual {
        failures.push("untampered handshake did not establish".into());
    }

    type Mutation = Box<dyn Fn(&mut HandshakeMessage)>;
    let mutations: Vec<(&str, Mutation)> = vec![
        ("sender_addr", Box::new(|m: &mut HandshakeMessage| m.sender_addr.0[0] ^= 1)),
        ("peer_addr", Box::new(|m: &mut HandshakeMessage| m.peer_addr.0[0] ^= 1)),
        ("nonce", Box::new(|m: &mut HandshakeMessage| m.nonce[0] ^= 1)),
        ("echo_nonce", Box::new(|m: &mut HandshakeMessage| m.echo_nonce[0] ^= 1)),
        ("ephemeral_pub", Box::new(|m: &mut HandshakeMessage| m.ephemeral_pub[0] ^= 1)),
        ("transcript_sig", Box::new(|m: &mut HandshakeMessage| {
            if m.transcript_sig.is_empty() {
                m.transcript_sig = vec![0u8; 64];
            } else {
                m.transcript_sig[0] ^= 1;
            }
        })),
    ];
    for step in 0..3usize {
        for (field, mutate) in &mutations {
            let outcome = run_tampered_handshake(&ledger, &alice, &bob, step, mutate.as_ref());
            if outcome.mutual {
                failures.push(format!(
                    "tampering {field} of message {step} still established a mutual session"
                ));
            }
        }
    }

    // bit flips over the sealed wire encoding: none may open
    let (mut tx, mut rx) = fresh_sessions(&ledger, &alice, &bob);
    let plaintext = vec![0xA5u8; 64];
    let record = tx.seal(&plaintext).unwrap();
    let encoded = record.encode();
    for byte in 0..encoded.len() {
        for bit in 0..8 {
            let mut corrupt = encoded.clone();
            corrupt[byte] ^= 1 << bit;
            let Ok(parsed) = bisa::WireRecord::decode(&corrupt) else {
                continue;
            };
            if rx.open(&parsed).is_ok() {
                failures.push(format!("flipping byte {byte} bit {bit} still opened"));
            }
        }
    }
    // the pristine record still opens
    match rx.open(&record) {
        Ok(p) if p == plaintext => {}
        other => failures.push(format!("clean record failed to open: {other:?}")),
    }
    verdict(3, "tampered handshakes and sealed records rejected", failures);
}

// -- scenario-level criteria --------------------------------------------------

/// The benign baseline: 100 handshakes across ten endpoint pairs all
/// complete with matching session keys and no rejections.
#[test]
fn c04_baseline_all_handshakes_succeed() {
    let report = run_bundled("baseline", "c04");
    let mut failures = Vec::new();
    check_counters(
        &report,
        &[
            ("handshakes_started", 100),
            ("sessions_established", 100),
            ("initiator_established", 100),
            ("key_mismatches", 0),
            ("handshake_rejected", 0),
        ],
        &mut failures,
    );
    verdict(4, "baseline handshakes all succeed with matching keys", failures);
}

/// Sybil and impersonation attackers are shut out: forged registrations
/// never commit and no adversary ever holds an established session.
#[test]
fn c05_sybil_and_impersonation_rejected() {
    let mut failures = Vec::new();
    let sybil = run_bundled("sybil", "c05-sybil");
    check_counters(
        &sybil,
        &[
            ("forged_requests", 10),
            ("fake_committed_txs", 0),
            ("adversary_sessions", 0),
            ("adversary_handshakes", 40),
        ],
        &mut failures,
    );
    let imp = run_bundled("impersonation", "c05-imp");
    check_counters(
        &imp,
        &[
            ("forged_requests", 1),
            ("fake_committed_txs", 0),
            ("adversary_sessions", 0),
            ("handshake_fail_bad_transcript_sig", 3),
        ],
        &mut failures,
    );
    verdict(5, "sybil and impersonation attacks rejected", failures);
}

/// Vehicles that re-attach mid-run re-register their locators and every
/// peer's resolver converges: no stale entries remain at the end.
#[test]
fn c06_mobility_keeps_resolvers_fresh() {
    let report = run_bundled("mobility", "c06");
    let mut failures = Vec::new();
    check_counters(&report, &[("reregistrations", 6), ("staleness", 0)], &mut failures);
    let accepted = report.counters.get("requests_accepted").copied().unwrap_or(0);
    if accepted < 9 {
        failures.push(format!("requests_accepted = {accepted}, expected >= 9"));
    }
    verdict(6, "mobility keeps name resolution fresh", failures);
}

/// Under a combined sybil + impersonation + flooding + tampering campaign,
/// sensitive in-vehicle components stay unreachable from outside while
/// exported ones keep working.
#[test]
fn c07_combined_attack_isolation_holds() {
    let report = run_bundled("combined_attack", "c07");
    let mut failures = Vec::new();
    check_counters(
        &report,
        &[
            ("external_delivered_sensitive", 0),
            ("external_delivered_nonsensitive", 5),
            ("isolation_blocked", 3),
            ("adversary_sessions", 0),
            ("fake_committed_txs", 0),
        ],
        &mut failures,
    );
    verdict(7, "isolation holds under combined attack", failures);
}

/// Every bundled scenario is deterministic: two runs with the same seed
/// produce byte-identical traces, and every trace passes the invariant
/// checker.
#[test]
fn c08_bundled_scenarios_deterministic_and_valid() {
    let mut failures = Vec::new();
    for (name, text) in scenario::bundled_scenarios() {
        let sc = parse_scenario(text).expect("bundled scenario parses");
        let mut traces = Vec::new();
        for pass in 0..2 {
            let overrides = RunOverrides {
                seed: None,
                out_dir: Some(out_dir(&format!("c08-{pass}"))),
            };
            let artifacts = match run_scenario(&sc, &overrides) {
                Ok(a) => a,
                Err(e) => {
                    failures.push(format!("{name}: run failed: {e}"));
                    continue;
                }
            };
            if pass == 0 {
                if let Err(e) = verify_trace(&artifacts.trace_path) {
                    failures.push(format!("{name}: trace invariants violated: {e}"));
                }
            }
            traces.push(std::fs::read(&artifacts.trace_path).unwrap());
        }
        if traces.len() == 2 && traces[0] != traces[1] {
            failures.push(format!("{name}: traces differ between identical runs"));
        }
    }
    verdict(8, "bundled scenarios deterministic and invariant-clean", failures);
}

/// The grey hole relay drops close to its configured 0.5 fraction over a
/// 10k-message stream, and the exact per-seed drop count is frozen.
#[test]
fn c09_greyhole_drop_fraction_calibrated() {
    let report = run_bundled("greyhole", "c09");
    let mut failures = Vec::new();
    let dropped = report.counters.get("relay_dropped").copied().unwrap_or(0);
    let forwarded = report.counters.get("relay_forwarded").copied().unwrap_or(0);
    let relayed = dropped + forwarded;
    if relayed < 10_000 {
        failures.push(format!("only {relayed} messages crossed the relay, need >= 10000"));
    }
    let fraction = dropped as f64 / relayed as f64;
    if !(0.45..=0.55).contains(&fraction) {
        failures.push(format!("drop fraction {fraction:.4} outside 0.50 +/- 0.05"));
    }
    // frozen for the scenario's bundled seed; any drift means the RNG
    // consumption pattern changed
    if dropped != 5361 {
        failures.push(format!("relay_dropped = {dropped}, frozen value is 5361"));
    }
    verdict(9, "grey hole drop fraction calibrated", failures);
}

// -- ledger integrity ---------------------------------------------------------

/// Every possible single-byte corruption of a three-block chain is caught:
/// the mutated chain either fails to decode, fails validation, or no longer
/// reproduces the original head hash.
#[test]
fn c10_every_byte_mutation_of_chain_detected() {
    let validator = EndpointIdentity::from_seed(b"acc-chain-validator");
    let members = [
        EndpointIdentity::from_seed(b"acc-chain-veh"),
        EndpointIdentity::from_seed(b"acc-chain-ped"),
    ];
    let register = |ep: &EndpointIdentity, role| {
        LedgerTransaction::signed(
            TxPayload::RegisterIdentity {
                verify_key: ep.key.verify_key().to_vec(),
                role,
            },
            ep.address,
            &ep.key,
        )
    };
    let genesis = Block::genesis(vec![register(&validator, Role::Rsu)], 0);
    let mut blocks = vec![genesis];
    for (i, member) in members.iter().enumerate() {
        let block = sign_block(
            Block {
                height: i as u64 + 1,
                parent_hash: blocks.last().unwrap().hash(),
                txs: vec![register(member, Role::Vehicle)],
                proposer: validator.address,
                proposer_sig: Vec::new(),
                logical_time: 5 * (i as u64 + 1),
            },
            &validator.key,
        );
        blocks.push(block);
    }
    let baseline = validate_chain(&blocks).expect("clean chain validates");
    let head = baseline.head_hash();

    let mut failures = Vec::new();
    let mut total = 0usize;
    let mut detected = 0usize;
    for (bi, block) in blocks.iter().enumerate() {
        let encoded = block.encode();
        for pos in 0..encoded.len() {
            total += 1;
            let mut corrupt = encoded.clone();
            corrupt[pos] ^= 0x01;
            let Ok(mutated) = Block::decode(&corrupt) else {
                detected += 1;
                continue;
            };
            let mut chain = blocks.clone();
            chain[bi] = mutated;
            match validate_chain(&chain) {
                Err(_) => detected += 1,
                Ok(state) if state.head_hash() != head => detected += 1,
                Ok(_) => failures.push(format!(
                    "block {bi} byte {pos}: mutation validated with the original head hash"
                )),
            }
        }
    }
    if detected != total {
        failures.push(format!("{detected}/{total} mutations detected"));
    }
    verdict(10, "every single-byte chain mutation detected", failures);
}

// sanity: the two address derivations used above agree with the ledger's
#[test]
fn endpoint_addresses_match_ledger_derivation() {
    let ep = EndpointIdentity::from_seed(b"acc-derive");
    assert_eq!(ep.address, derive_address(ep.key.verify_key()).unwrap());
}
