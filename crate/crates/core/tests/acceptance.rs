//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use datamarket_core::adversim::{
    assert_fairness, enumerate_collusion_suite, generate_data, run_scenario, Behavior, DataSpec,
    Scenario,
};
use datamarket_core::commitments::{hash, merkle_root, EncodingKey, MerkleProof, PathStep};
use datamarket_core::exchange::{
    baseless_complaint, decode, encode_forged, encode_package, generate_pom, junk_blob,
    run_two_party, verify_package, verify_pom, DataBlob, EncodedPackage, MisbehaviorProof, PomKind,
    ProvenLeaf, TwoPartyPhase, TwoPartySetup,
};
use datamarket_core::ledger::{
    compute_payouts, parse_jsonl, to_jsonl, AccountId, Agreement, AgreementId, AgreementKind,
    Commission, EscrowId, EventBody, Ledger, LedgerError, LedgerEvent, Money, Party, PriceTerms,
    RhoRef, Role, Tick, TradeRules, VerdictBasis,
};
use datamarket_core::mediated::{
    reveal_key as mediated_reveal, run_mediated, trace_in_order, Behaviors, MarketRules,
    MarketSetup, MediatedError, MediatedPhase, MediatedTrade, Regulation,
};
use datamarket_core::predicate::{
    compile_spec, file_digest, DataLayout, PredicateCircuit, PredicateSpec, Word,
};
use datamarket_core::tradegraph::{rebuild_from_log, TradeGraph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Name, check and optional time limit.
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn acct(s: &str) -> AccountId {
    AccountId::new(s).expect("valid id")
}

fn bps(n: u32) -> Commission {
    Commission::from_bps(n).expect("valid bps")
}

// ---- 1 ----

fn payout_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let worked = compute_payouts(Money(100), bps(500), bps(1_000));
    ensure(
        worked.to_mediator == Money(15)
            && worked.to_seller == Money(95)
            && worked.buyer_escrow_outflow() == 110,
        || format!("worked example gave {worked:?}"),
    )?;
    const N: usize = 100_000;
    for _ in 0..N {
        let p: u64 = rng.gen_range(0..=1_000_000_000);
        let (cs, cb) = (rng.gen_range(0..=10_000u32), rng.gen_range(0..=10_000u32));
        let out = compute_payouts(Money(p), bps(cs), bps(cb));
        let fee_s = p as u128 * cs as u128 / 10_000;
        let fee_b = p as u128 * cb as u128 / 10_000;
        let escrow = p as u128 + fee_b;
        let ok = out.to_mediator.0 as u128 == fee_s + fee_b
            && out.to_seller.0 as u128 == p as u128 - fee_s
            && out.buyer_escrow_outflow() == escrow
            && escrow - out.to_mediator.0 as u128 - out.to_seller.0 as u128 == 0;
        ensure(ok, || format!("p={p} c_S={cs} c_B={cb}: {out:?}"))?;
    }
    Ok(format!("{N} random cases, escrow drained exactly"))
}

// ---- 2 ----

const FUZZ_CHUNKS: u32 = 3;

struct FuzzKit {
    circuit: PredicateCircuit,
    key: EncodingKey,
    honest: EncodedPackage,
    forged: EncodedPackage,
}

impl FuzzKit {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = PredicateSpec::AllChunksContain {
            pattern: b"ok".to_vec(),
        };
        let circuit =
            compile_spec(&spec, &DataLayout::Chunks { count: FUZZ_CHUNKS }).expect("compiles");
        let data = generate_data(
            &DataSpec::Chunks {
                count: FUZZ_CHUNKS,
                pattern: b"ok".to_vec(),
            },
            &mut rng,
        );
        let key = EncodingKey::random(&mut rng);
        let honest = encode_package(&data, &circuit, &key).expect("arity");
        let forged = encode_forged(&junk_blob(&data, &mut rng), &circuit, &key).expect("arity");
        FuzzKit {
            circuit,
            key,
            honest,
            forged,
        }
    }
}

#[derive(Debug)]
enum FuzzOp {
    Transfer(usize, usize, u64),
    FreezeLoose(usize, u64),
    Unfreeze(u64, usize),
    Register {
        seller: usize,
        buyer: usize,
        mediator: Option<usize>,
        price: u64,
        cs: u32,
        cb: u32,
        window: u64,
    },
    Pay(usize, bool),
    Commit(usize, bool),
    Reveal(usize, bool),
    Complain(usize),
    Settle(usize),
    Cancel(usize),
    Wait(u64),
}

/// Refers to the most recently registered trade.
const LAST: usize = usize::MAX;

/// One random operation, or a whole trade lifecycle as several.
fn random_ops<R: Rng>(rng: &mut R, accounts: usize) -> Vec<FuzzOp> {
    if rng.gen_bool(0.15) {
        let register = random_op(rng, accounts, 3);
        let mut ops = vec![
            register,
            FuzzOp::Pay(LAST, true),
            FuzzOp::Commit(LAST, rng.gen()),
            FuzzOp::Reveal(LAST, true),
        ];
        if rng.gen() {
            ops.push(FuzzOp::Complain(LAST));
        }
        if rng.gen() {
            ops.extend([FuzzOp::Wait(4), FuzzOp::Settle(LAST)]);
        }
        return ops;
    }
    let kind = rng.gen_range(0..14);
    vec![random_op(rng, accounts, kind)]
}

fn random_op<R: Rng>(rng: &mut R, accounts: usize, kind: u32) -> FuzzOp {
    let a = |rng: &mut R| rng.gen_range(0..accounts);
    let t = |rng: &mut R| {
        if rng.gen_bool(0.3) {
            LAST
        } else {
            rng.gen_range(0..4usize)
        }
    };
    match kind {
        0 => FuzzOp::Transfer(a(rng), a(rng), rng.gen_range(0..2_000)),
        1 => FuzzOp::FreezeLoose(a(rng), rng.gen_range(0..500)),
        2 => FuzzOp::Unfreeze(rng.gen_range(0..8), a(rng)),
        3 | 4 => {
            let seller = a(rng);
            let buyer = (seller + rng.gen_range(1..accounts)) % accounts;
            let mediator = rng
                .gen_bool(0.6)
                .then(|| (0..accounts).find(|&i| i != seller && i != buyer))
                .flatten();
            let (cs, cb) = if mediator.is_some() {
                (rng.gen_range(0..2_000), rng.gen_range(0..2_000))
            } else {
                (0, 0)
            };
            FuzzOp::Register {
                seller,
                buyer,
                mediator,
                price: rng.gen_range(1..1_000),
                cs,
                cb,
                window: rng.gen_range(0..4),
            }
        }
        5 | 6 => FuzzOp::Pay(t(rng), rng.gen_bool(0.8)),
        7 => FuzzOp::Commit(t(rng), rng.gen_bool(0.6)),
        8 | 9 => FuzzOp::Reveal(t(rng), rng.gen_bool(0.9)),
        10 => FuzzOp::Complain(t(rng)),
        11 => FuzzOp::Settle(t(rng)),
        12 => FuzzOp::Cancel(t(rng)),
        _ => FuzzOp::Wait(rng.gen_range(0..20)),
    }
}

fn apply_op(
    l: &mut Ledger,
    kit: &FuzzKit,
    names: &[AccountId],
    trades: &mut Vec<(AgreementId, bool)>,
    op: &FuzzOp,
) -> Result<(), LedgerError> {
    let last = trades.len().wrapping_sub(1);
    let i = |i: usize| if i == LAST { last } else { i };
    let trade = |n: usize| trades.get(i(n)).copied();
    match *op {
        FuzzOp::Transfer(a, b, m) => l.transfer(&names[a], &names[b], Money(m)),
        FuzzOp::FreezeLoose(a, m) => match trades.first() {
            Some(&(t, _)) => l.freeze(&names[a], Money(m), t).map(drop),
            None => Ok(()),
        },
        FuzzOp::Unfreeze(e, to) => l.unfreeze(EscrowId(e), &names[to]),
        FuzzOp::Register {
            seller,
            buyer,
            mediator,
            price,
            cs,
            cb,
            window,
        } => {
            let mut parties = vec![
                Party {
                    role: Role::Seller,
                    account: names[seller].clone(),
                },
                Party {
                    role: Role::Buyer,
                    account: names[buyer].clone(),
                },
            ];
            if let Some(m) = mediator {
                parties.push(Party {
                    role: Role::Mediator,
                    account: names[m].clone(),
                });
            }
            let a = Agreement::new(
                AgreementKind::Trade,
                parties,
                kit.circuit.digest(),
                RhoRef {
                    digest: hash(b"rho"),
                    text: "rho".into(),
                },
                PriceTerms {
                    price: Money(price),
                    seller_commission: bps(cs),
                    buyer_commission: bps(cb),
                },
                TradeRules::standard(Money(price), Tick(window)),
                None,
                Vec::new(),
                l.now(),
            );
            let id = l.register_agreement(a)?;
            trades.push((id, true));
            Ok(())
        }
        FuzzOp::Pay(i, full) => {
            let Some((t, _)) = trade(i) else {
                return Ok(());
            };
            let a = l.agreement(t).expect("registered").clone();
            let buyer = a.party(Role::Buyer).expect("buyer").clone();
            let total = a.buyer_total();
            let amount = if full { total } else { Money(total.0 / 2) };
            l.freeze(&buyer, amount, t).map(drop)
        }
        FuzzOp::Commit(n, honest) => {
            let Some((t, _)) = trade(n) else {
                return Ok(());
            };
            let pkg = if honest { &kit.honest } else { &kit.forged };
            l.post_commitment(t, pkg.root)?;
            trades[i(n)].1 = honest;
            Ok(())
        }
        FuzzOp::Reveal(i, enough) => {
            let Some((t, _)) = trade(i) else {
                return Ok(());
            };
            let min = l.agreement(t).expect("registered").rules.min_deposit;
            let deposit = if enough {
                min
            } else {
                Money(min.0.saturating_sub(1))
            };
            l.reveal_key(t, kit.key, deposit)
        }
        FuzzOp::Complain(i) => {
            let Some((t, honest)) = trade(i) else {
                return Ok(());
            };
            let pkg = if honest { &kit.honest } else { &kit.forged };
            let proof = generate_pom(pkg, &kit.key, &kit.circuit)
                .or_else(|| baseless_complaint(pkg, &kit.circuit))
                .expect("package is well formed");
            let buyer = l
                .agreement(t)
                .expect("registered")
                .party(Role::Buyer)
                .expect("buyer")
                .clone();
            l.submit_complaint(t, &buyer, &kit.circuit, proof).map(drop)
        }
        FuzzOp::Settle(i) => match trade(i) {
            Some((t, _)) => l.settle(t).map(drop),
            None => Ok(()),
        },
        FuzzOp::Cancel(i) => match trade(i) {
            Some((t, _)) => l.cancel_trade(t).map(drop),
            None => Ok(()),
        },
        FuzzOp::Wait(dt) => {
            l.advance_time(Tick(dt));
            Ok(())
        }
    }
}

fn conservation_and_replay() -> Outcome {
    const SEQUENCES: usize = 10_000;
    let kit = FuzzKit::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut steps, mut rejected, mut settled) = (0usize, 0usize, 0usize);
    for seq in 0..SEQUENCES {
        let mut l = Ledger::new();
        let accounts = rng.gen_range(3..=5);
        let names: Vec<AccountId> = (0..accounts).map(|i| acct(&format!("acct{i}"))).collect();
        for n in &names {
            l.open_account(n.clone(), Money(rng.gen_range(0..5_000)))
                .map_err(|e| e.to_string())?;
        }
        let mut trades = Vec::new();
        let ops: Vec<FuzzOp> = (0..rng.gen_range(1..=24))
            .flat_map(|_| random_ops(&mut rng, accounts))
            .collect();
        for op in ops {
            let before = l.state().clone();
            let log_len = l.log().len();
            steps += 1;
            if apply_op(&mut l, &kit, &names, &mut trades, &op).is_err() {
                rejected += 1;
                ensure(l.state() == &before && l.log().len() == log_len, || {
                    format!("sequence {seq}: rejected {op:?} changed state")
                })?;
            }
            ensure(l.total_supply() == l.genesis_supply(), || {
                format!(
                    "sequence {seq}: supply {} != {} after {op:?}",
                    l.total_supply(),
                    l.genesis_supply()
                )
            })?;
        }
        settled += l.graph().edges.len();
        let text = to_jsonl(l.log());
        let events = parse_jsonl(&text).map_err(|e| format!("sequence {seq}: {e}"))?;
        let replayed =
            Ledger::replay(&events).map_err(|e| format!("sequence {seq}: replay failed: {e}"))?;
        let a = serde_json::to_vec(replayed.state()).expect("state serializes");
        let b = serde_json::to_vec(l.state()).expect("state serializes");
        ensure(a == b, || format!("sequence {seq}: replayed state differs"))?;
    }
    Ok(format!("{SEQUENCES} sequences, {steps} steps ({rejected} rejected), {settled} settlements; replay identical"))
}

// ---- 3 ----

/// Independent fault oracle: the claimed transcript is faulty iff it differs
/// from honest evaluation of the claimed data, or its output is not true.
fn package_is_faulty(pkg: &EncodedPackage, key: &EncodingKey, c: &PredicateCircuit) -> bool {
    let (blob, _) = decode(pkg, key, c);
    let n = c.num_inputs();
    let claimed: Vec<Word> = (0..c.gate_count())
        .map(|g| {
            datamarket_core::commitments::decrypt_chunk(key, (n + g) as u64, &pkg.enc_wires[g])
        })
        .collect();
    let honest = c.eval_transcript(&blob.chunks).expect("arity").wire_values;
    claimed != honest || claimed[c.output_gate() as usize] != Word::TRUE
}

fn pom_completeness() -> Outcome {
    const PAIRS: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut corruptions, mut faulty, mut proofs) = (0usize, 0usize, 0usize);
    for pair in 0..PAIRS {
        let n = rng.gen_range(1..=64);
        let data = common::random_chunks(&mut rng, n);
        let c = common::random_circuit(&mut rng, &data, 64);
        let key = EncodingKey::random(&mut rng);
        let pkg = encode_package(&DataBlob::new(data.clone()).expect("nonempty"), &c, &key)
            .expect("arity");
        ensure(generate_pom(&pkg, &key, &c).is_none(), || {
            format!("pair {pair}: proof against an honest package")
        })?;
        for leaf in 0..pkg.leaf_count() {
            let mut bad = pkg.clone();
            let w = bad.leaf_mut(leaf).expect("in range");
            w.0[rng.gen_range(0..32)] ^= rng.gen_range(1..=255u8);
            // The seller commits to what it ships.
            bad.root = bad.recompute_root().expect("nonempty");
            corruptions += 1;
            let expect_fault = package_is_faulty(&bad, &key, &c);
            let pom = generate_pom(&bad, &key, &c);
            match (expect_fault, pom) {
                (true, Some(p)) => {
                    faulty += 1;
                    ensure(verify_pom(&bad.root, &c, &key, &p), || {
                        format!("pair {pair} leaf {leaf}: proof rejected")
                    })?;
                    proofs += 1;
                }
                (true, None) => return Err(format!("pair {pair} leaf {leaf}: missed misbehavior")),
                (false, Some(_)) => {
                    return Err(format!(
                        "pair {pair} leaf {leaf}: proof for a consistent package"
                    ))
                }
                (false, None) => {}
            }
        }
    }
    Ok(format!(
        "{PAIRS} circuit/data pairs, {corruptions} single-leaf corruptions, {faulty} inconsistent, {proofs} proved, 0 missed"
    ))
}

// ---- 4 ----

fn forge<R: Rng>(
    rng: &mut R,
    pkg: &EncodedPackage,
    c: &PredicateCircuit,
    key: &EncodingKey,
) -> MisbehaviorProof {
    let genuine = |kind: PomKind, idx: &[u64]| MisbehaviorProof {
        kind,
        leaves: idx
            .iter()
            .map(|&i| {
                let i = (i as usize).min(pkg.leaf_count() - 1);
                ProvenLeaf {
                    ciphertext: *pkg.leaf(i).expect("in range"),
                    proof: datamarket_core::commitments::merkle_prove(&pkg.leaves(), i)
                        .expect("in range"),
                }
            })
            .collect(),
    };
    let n = c.num_inputs() as u64;
    let gate = rng.gen_range(0..c.gate_count()) as u32;
    let operands: Vec<u64> = std::iter::once(n + gate as u64)
        .chain(
            c.gates()[gate as usize]
                .operands()
                .into_iter()
                .map(|r| match r {
                    datamarket_core::predicate::WireRef::Chunk(i) => i as u64,
                    datamarket_core::predicate::WireRef::Gate(g) => n + g as u64,
                }),
        )
        .collect();
    match rng.gen_range(0..9) {
        // Honest leaves, honestly placed, claimed inconsistent.
        0 => genuine(PomKind::BadGate { gate }, &operands),
        1 => genuine(PomKind::BadOutput, &[n + c.output_gate() as u64]),
        // Right positions, wrong ciphertext.
        2 => {
            let mut p = genuine(PomKind::BadGate { gate }, &operands);
            let l = rng.gen_range(0..p.leaves.len());
            p.leaves[l].ciphertext.0[rng.gen_range(0..32)] ^= rng.gen_range(1..=255u8);
            p
        }
        // Genuine leaves from other positions relabeled.
        3 => {
            let mut p = genuine(PomKind::BadGate { gate }, &operands);
            for leaf in &mut p.leaves {
                let other = rng.gen_range(0..pkg.leaf_count());
                leaf.ciphertext = *pkg.leaf(other).expect("in range");
            }
            p
        }
        // Proofs whose claimed index was rewritten.
        4 => {
            let shuffled: Vec<u64> = operands
                .iter()
                .map(|_| rng.gen_range(0..pkg.leaf_count() as u64))
                .collect();
            let mut p = genuine(PomKind::BadGate { gate }, &shuffled);
            for (leaf, &i) in p.leaves.iter_mut().zip(&operands) {
                leaf.proof.leaf_index = i;
            }
            p
        }
        // Leaves proved under a different package.
        5 => {
            let junk = junk_blob(&decode(pkg, key, c).0, rng);
            let other = encode_forged(&junk, c, key).expect("arity");
            generate_pom(&other, key, c)
                .unwrap_or_else(|| genuine(PomKind::BadOutput, &[n + c.output_gate() as u64]))
        }
        // Random words with random paths.
        6 => MisbehaviorProof {
            kind: PomKind::BadGate { gate },
            leaves: operands
                .iter()
                .map(|&i| ProvenLeaf {
                    ciphertext: Word(rng.gen()),
                    proof: MerkleProof {
                        leaf_index: i,
                        path: (0..rng.gen_range(0..8))
                            .map(|_| PathStep {
                                sibling: datamarket_core::commitments::Digest(rng.gen()),
                                sibling_left: rng.gen(),
                            })
                            .collect(),
                    },
                })
                .collect(),
        },
        // Wrong number of leaves.
        7 => {
            let mut p = genuine(PomKind::BadGate { gate }, &operands);
            if rng.gen() || p.leaves.len() == 1 {
                let extra = p.leaves[0].clone();
                p.leaves.push(extra);
            } else {
                p.leaves.pop();
            }
            p
        }
        // Claims about a gate that does not exist.
        _ => {
            let mut p = genuine(PomKind::BadGate { gate }, &operands);
            p.kind = PomKind::BadGate {
                gate: c.gate_count() as u32 + rng.gen_range(0..4),
            };
            p
        }
    }
}

fn pom_soundness() -> Outcome {
    const PACKAGES: usize = 200;
    const PER_PACKAGE: usize = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tried = 0usize;
    for p in 0..PACKAGES {
        let n = rng.gen_range(1..=32);
        let data = common::random_chunks(&mut rng, n);
        let c = common::random_circuit(&mut rng, &data, 48);
        let key = EncodingKey::random(&mut rng);
        let pkg = encode_package(&DataBlob::new(data).expect("nonempty"), &c, &key).expect("arity");
        for _ in 0..PER_PACKAGE {
            let proof = forge(&mut rng, &pkg, &c, &key);
            tried += 1;
            ensure(!verify_pom(&pkg.root, &c, &key, &proof), || {
                format!("package {p}: accepted forged {proof:?}")
            })?;
        }
    }
    Ok(format!(
        "{tried} forged proofs against honest packages, 0 accepted"
    ))
}

// ---- 5 ----

fn fairness_suite() -> Outcome {
    let base = Scenario::medical(10_000, 2024);
    let mut lines = Vec::new();
    let mut first_pass: Vec<String> = Vec::new();
    for round in 0..2 {
        for case in enumerate_collusion_suite(&base) {
            let report = run_scenario(&case.scenario).map_err(|e| format!("{}: {e}", case.id))?;
            let verdict = assert_fairness(&report, &case.honest);
            ensure(verdict.passed(), || {
                format!("{}: {:?}", case.id, verdict.failures())
            })?;
            ensure(report.info.mediator_is_blind(), || {
                format!("{}: mediator not blind", case.id)
            })?;
            if case.honest.contains(&Role::Mediator) && report.phase == MediatedPhase::Settled {
                let owed = report.expected_payouts.map(|p| p.to_mediator.0 as i128);
                ensure(Some(report.delta(Role::Mediator)) == owed, || {
                    format!("{}: commission unpaid", case.id)
                })?;
            }
            let fingerprint = format!("{}{}", report.to_json(), to_jsonl(&report.events));
            if round == 0 {
                lines.push(format!("{}={:?}", case.id, report.phase));
                first_pass.push(fingerprint);
            } else {
                ensure(
                    first_pass[lines
                        .iter()
                        .position(|l| l.starts_with(case.id))
                        .expect("seen")]
                        == fingerprint,
                    || format!("{}: rerun differs", case.id),
                )?;
            }
        }
    }
    Ok(format!(
        "7 cases over 10000 records, deterministic on rerun: {}",
        lines.join(" ")
    ))
}

// ---- 6 ----

const MEDIATED_ORDER: [MediatedPhase; 7] = [
    MediatedPhase::Offered,
    MediatedPhase::Requested,
    MediatedPhase::Matched,
    MediatedPhase::Paid,
    MediatedPhase::Revealed,
    MediatedPhase::Complained,
    MediatedPhase::Settled,
];

fn mediated_trace_ok(trace: &[MediatedPhase]) -> bool {
    let Some((&last, body)) = trace.split_last() else {
        return false;
    };
    if body.contains(&MediatedPhase::Aborted) || body.contains(&MediatedPhase::Settled) {
        return false;
    }
    if !matches!(last, MediatedPhase::Settled | MediatedPhase::Aborted) {
        return false;
    }
    let rank = |p: &MediatedPhase| {
        MEDIATED_ORDER
            .iter()
            .position(|q| q == p)
            .expect("non-terminal")
    };
    let ranks: Vec<usize> = trace
        .iter()
        .filter(|p| **p != MediatedPhase::Aborted)
        .map(rank)
        .collect();
    let strictly_rising = ranks.windows(2).all(|w| w[0] < w[1]);
    // No skipping steps 1 to 5; complaints are optional.
    let contiguous = ranks
        .iter()
        .enumerate()
        .all(|(i, &r)| r == i || (r == 6 && i >= 5) || (r == 5 && i == 5));
    let settled_after_reveal =
        last != MediatedPhase::Settled || trace.contains(&MediatedPhase::Revealed);
    strictly_rising && contiguous && settled_after_reveal
}

const TWO_PARTY_ORDER: [TwoPartyPhase; 5] = [
    TwoPartyPhase::Agreed,
    TwoPartyPhase::Funded,
    TwoPartyPhase::Delivered,
    TwoPartyPhase::Revealed,
    TwoPartyPhase::Settled,
];

fn two_party_trace_ok(trace: &[TwoPartyPhase]) -> bool {
    let Some((&last, body)) = trace.split_last() else {
        return false;
    };
    if body.contains(&TwoPartyPhase::Aborted)
        || !matches!(last, TwoPartyPhase::Settled | TwoPartyPhase::Aborted)
    {
        return false;
    }
    trace
        .iter()
        .filter(|p| **p != TwoPartyPhase::Aborted)
        .enumerate()
        .all(|(i, p)| TWO_PARTY_ORDER.get(i) == Some(p))
}

/// Per trade, the seq of the first event of each kind must respect
/// registration, payment, reveal and settlement order.
fn log_respects_order(events: &[LedgerEvent]) -> Result<(), String> {
    let mut first: BTreeMap<(AgreementId, &'static str), u64> = BTreeMap::new();
    let mut buyers: BTreeMap<AgreementId, AccountId> = BTreeMap::new();
    for e in events {
        let key = match &e.body {
            EventBody::AgreementRegistered { id, agreement } => {
                if let Some(b) = agreement.party(Role::Buyer) {
                    buyers.insert(*id, b.clone());
                }
                Some((*id, "registered"))
            }
            EventBody::Frozen {
                owner, contract, ..
            } if buyers.get(contract) == Some(owner) => Some((*contract, "paid")),
            EventBody::KeyRevealed { trade, .. } => Some((*trade, "revealed")),
            EventBody::ComplaintFiled { trade, .. } => Some((*trade, "complained")),
            EventBody::Settled { trade, .. } => Some((*trade, "settled")),
            _ => None,
        };
        if let Some(k) = key {
            first.entry(k).or_insert(e.seq);
        }
    }
    let chain = ["registered", "paid", "revealed", "settled"];
    for &(trade, kind) in first.keys() {
        let at = first[&(trade, kind)];
        for earlier in chain.iter().take_while(|k| **k != kind) {
            if chain.contains(&kind) {
                match first.get(&(trade, *earlier)) {
                    Some(&s) if s < at => {}
                    _ => {
                        return Err(format!(
                            "{trade}: {kind} at seq {at} without prior {earlier}"
                        ))
                    }
                }
            }
        }
        if kind == "complained" && first.get(&(trade, "revealed")).is_none_or(|&r| r > at) {
            return Err(format!("{trade}: complaint before reveal"));
        }
    }
    Ok(())
}

fn random_behaviors<R: Rng>(rng: &mut R) -> Behaviors {
    use Behavior::*;
    if rng.gen_bool(0.08) {
        return Behaviors {
            seller: OffChain,
            mediator: Honest,
            buyer: OffChain,
        };
    }
    Behaviors {
        seller: *[Honest, Honest, Abort, SellerJunkData, SellerWrongRho]
            .choose(rng)
            .expect("nonempty"),
        mediator: *[
            Honest,
            Honest,
            Abort,
            MediatorSkipPhiCheck,
            MediatorTamperPackage,
        ]
        .choose(rng)
        .expect("nonempty"),
        buyer: *[Honest, Honest, Abort, BuyerUnderpay, BuyerFalseComplaint]
            .choose(rng)
            .expect("nonempty"),
    }
}

fn random_scenario<R: Rng>(rng: &mut R) -> Scenario {
    let mut s = Scenario::medical(rng.gen_range(1..=12), rng.gen());
    if rng.gen() {
        s.data = DataSpec::Chunks {
            count: rng.gen_range(1..=8),
            pattern: b"ok".to_vec(),
        };
        s.predicate = PredicateSpec::AllChunksContain {
            pattern: b"ok".to_vec(),
        };
        s.rho = Regulation {
            text: "no personal data".into(),
            predicate: None,
        };
    }
    s.offer.ask = Money(rng.gen_range(1..300));
    s.request.budget = Money(rng.gen_range(1..300));
    s.offer.commission_bps = bps(rng.gen_range(0..=2_000));
    s.request.commission_bps = bps(rng.gen_range(0..=2_000));
    s.window = Tick(rng.gen_range(0..6));
    s.strategies = random_behaviors(rng);
    s
}

fn protocol_ordering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let kit = FuzzKit::new();
    let mut mediated_runs = 0;
    for i in 0..400 {
        let s = random_scenario(&mut rng);
        let r = run_scenario(&s).map_err(|e| format!("scenario {i}: {e}"))?;
        ensure(
            mediated_trace_ok(&r.trace) && trace_in_order(&r.trace),
            || format!("scenario {i}: trace {:?}", r.trace),
        )?;
        log_respects_order(&r.events).map_err(|e| format!("scenario {i}: {e}"))?;
        if s.strategies.buyer == Behavior::BuyerUnderpay {
            ensure(!r.key_revealed, || {
                format!("scenario {i}: key revealed to an underpaying buyer")
            })?;
        }
        mediated_runs += 1;
    }

    let mut two_party_runs = 0;
    for i in 0..400 {
        let mut l = Ledger::new();
        let (s, b) = (acct("seller"), acct("buyer"));
        l.open_account(s.clone(), Money(1_000))
            .map_err(|e| e.to_string())?;
        l.open_account(b.clone(), Money(1_000))
            .map_err(|e| e.to_string())?;
        let price = Money(rng.gen_range(1..500));
        let count = rng.gen_range(1..=6);
        let data = generate_data(
            &DataSpec::Chunks {
                count,
                pattern: b"ok".to_vec(),
            },
            &mut rng,
        );
        let circuit = compile_spec(
            &PredicateSpec::AllChunksContain {
                pattern: b"ok".to_vec(),
            },
            &DataLayout::Chunks { count },
        )
        .map_err(|e| e.to_string())?;
        let setup = TwoPartySetup {
            seller: s,
            buyer: b,
            data,
            circuit,
            rho: RhoRef {
                digest: hash(b"rho"),
                text: "rho".into(),
            },
            price,
            rules: TradeRules::standard(price, Tick(rng.gen_range(0..6))),
            key: EncodingKey::random(&mut rng),
        };
        use Behavior::*;
        let sb = *[Honest, Abort, SellerJunkData]
            .choose(&mut rng)
            .expect("nonempty");
        let bb = *[Honest, Abort, BuyerUnderpay, BuyerFalseComplaint]
            .choose(&mut rng)
            .expect("nonempty");
        let out = run_two_party(sb, bb, &setup, &mut l, &mut rng)
            .map_err(|e| format!("two-party {i}: {e}"))?;
        ensure(two_party_trace_ok(&out.trace), || {
            format!("two-party {i}: trace {:?}", out.trace)
        })?;
        log_respects_order(l.log()).map_err(|e| format!("two-party {i}: {e}"))?;
        two_party_runs += 1;
    }

    // Attempted reveals against incomplete payment.
    let mut attempts = 0;
    for i in 0..500 {
        let mut l = Ledger::new();
        let names = [acct("s"), acct("m"), acct("b")];
        for n in &names {
            l.open_account(n.clone(), Money(10_000))
                .map_err(|e| e.to_string())?;
        }
        let price = Money(rng.gen_range(1..2_000));
        let (cs, cb) = (bps(rng.gen_range(0..=3_000)), bps(rng.gen_range(0..=3_000)));
        let a = Agreement::new(
            AgreementKind::Trade,
            vec![
                Party {
                    role: Role::Seller,
                    account: names[0].clone(),
                },
                Party {
                    role: Role::Mediator,
                    account: names[1].clone(),
                },
                Party {
                    role: Role::Buyer,
                    account: names[2].clone(),
                },
            ],
            kit.circuit.digest(),
            RhoRef {
                digest: hash(b"rho"),
                text: "rho".into(),
            },
            PriceTerms {
                price,
                seller_commission: cs,
                buyer_commission: cb,
            },
            TradeRules::standard(price, Tick(3)),
            None,
            Vec::new(),
            l.now(),
        );
        let total = a.buyer_total();
        let t = l.register_agreement(a).map_err(|e| e.to_string())?;
        l.post_commitment(t, kit.honest.root)
            .map_err(|e| e.to_string())?;
        let paid = rng.gen_range(0..total.0);
        // Payment may arrive in pieces.
        let mut left = paid;
        while left > 0 {
            let piece = rng.gen_range(1..=left);
            l.freeze(&names[2], Money(piece), t)
                .map_err(|e| e.to_string())?;
            left -= piece;
        }
        let deposit = Money(price.0 / 10);
        let r = l.reveal_key(t, kit.key, deposit);
        ensure(r == Err(LedgerError::NotPaid(t)), || {
            format!("attempt {i}: paid {paid} of {total}, got {r:?}")
        })?;
        attempts += 1;

        let mut trade = MediatedTrade {
            id: t,
            offer: t,
            request: t,
            seller: names[0].clone(),
            mediator: names[1].clone(),
            buyer: names[2].clone(),
            ask: price,
            budget: price,
            price,
            phase: MediatedPhase::Matched,
            reveal_tick: None,
            window: Tick(3),
            escrow: None,
        };
        let r = mediated_reveal(&mut trade, kit.key, deposit, &mut l);
        ensure(matches!(r, Err(MediatedError::NotPaid(_))), || {
            format!("attempt {i}: mediated reveal gave {r:?}")
        })?;
        attempts += 1;
        ensure(l.trade(t).is_some_and(|rec| rec.key.is_none()), || {
            format!("attempt {i}: key on ledger")
        })?;
    }
    Ok(format!(
        "{mediated_runs} mediated and {two_party_runs} two-party runs in order; {attempts}/{attempts} early reveals returned NotPaid"
    ))
}

// ---- 7 ----

fn timeout_boundary() -> Outcome {
    let kit = FuzzKit::new();
    let mut checked = Vec::new();
    for t in [0u64, 1, 7, 1000] {
        let mut l = Ledger::new();
        let (s, b) = (acct("s"), acct("b"));
        l.open_account(s.clone(), Money(1_000))
            .map_err(|e| e.to_string())?;
        l.open_account(b.clone(), Money(1_000))
            .map_err(|e| e.to_string())?;
        let price = Money(100);
        let a = Agreement::new(
            AgreementKind::Trade,
            vec![
                Party {
                    role: Role::Seller,
                    account: s.clone(),
                },
                Party {
                    role: Role::Buyer,
                    account: b.clone(),
                },
            ],
            kit.circuit.digest(),
            RhoRef {
                digest: hash(b"rho"),
                text: "rho".into(),
            },
            PriceTerms {
                price,
                seller_commission: Commission::ZERO,
                buyer_commission: Commission::ZERO,
            },
            TradeRules::standard(price, Tick(t)),
            None,
            Vec::new(),
            l.now(),
        );
        let id = l.register_agreement(a).map_err(|e| e.to_string())?;
        l.freeze(&b, price, id).map_err(|e| e.to_string())?;
        l.post_commitment(id, kit.forged.root)
            .map_err(|e| e.to_string())?;
        l.advance_time(Tick(2));
        l.reveal_key(id, kit.key, Money(10))
            .map_err(|e| e.to_string())?;
        let reveal = l.now();
        let proof = generate_pom(&kit.forged, &kit.key, &kit.circuit)
            .ok_or("forged package has no proof")?;

        let mut on_time = l.clone();
        on_time.advance_time(Tick(t));
        ensure(on_time.now() == Tick(reveal.0 + t), || "clock".into())?;
        let v = on_time
            .submit_complaint(id, &b, &kit.circuit, proof.clone())
            .map_err(|e| format!("t={t}: on-time complaint: {e}"))?;
        ensure(v.basis == VerdictBasis::ValidPom, || {
            format!("t={t}: verdict {v:?}")
        })?;
        ensure(
            on_time.settle(id) == Err(LedgerError::ComplaintUpheld(id)),
            || format!("t={t}: settled after refund"),
        )?;

        let mut late = l.clone();
        late.advance_time(Tick(t + 1));
        let r = late.submit_complaint(id, &b, &kit.circuit, proof);
        ensure(
            matches!(r, Err(LedgerError::DeadlineExpired { .. })),
            || format!("t={t}: late complaint gave {r:?}"),
        )?;
        // With the window closed the seller is paid.
        late.settle(id)
            .map_err(|e| format!("t={t}: settle after window: {e}"))?;

        let mut early = l.clone();
        early.advance_time(Tick(t));
        ensure(
            matches!(early.settle(id), Err(LedgerError::WindowStillOpen { .. })),
            || format!("t={t}: settled inside window"),
        )?;
        checked.push(t.to_string());
    }
    Ok(format!(
        "t in {{{}}}: accepted at reveal+t, rejected at reveal+t+1",
        checked.join(", ")
    ))
}

// ---- 8 ----

type EdgeKey = (AccountId, AccountId, Money);

fn graph_reconstruction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut total_trades, mut total_edges) = (0usize, 0usize);
    for sc in 0..100 {
        let mut l = Ledger::new();
        let names: Vec<AccountId> = (0..rng.gen_range(3..=6))
            .map(|i| acct(&format!("p{i}")))
            .collect();
        for n in &names {
            l.open_account(n.clone(), Money(100_000))
                .map_err(|e| e.to_string())?;
        }
        let mut expected: Vec<EdgeKey> = Vec::new();
        let mut expected_tuples = 0usize;
        let mut expected_vertices = BTreeSet::new();
        for k in 0..rng.gen_range(2..=8) {
            total_trades += 1;
            let mut parties = names.clone();
            parties.shuffle(&mut rng);
            let count = rng.gen_range(1..=6);
            let data = generate_data(
                &DataSpec::Chunks {
                    count,
                    pattern: b"ok".to_vec(),
                },
                &mut rng,
            );
            let spec = PredicateSpec::AllChunksContain {
                pattern: b"ok".to_vec(),
            };
            if rng.gen_bool(0.6) {
                let ask = Money(rng.gen_range(1..400));
                let budget = Money(rng.gen_range(1..400));
                let setup = MarketSetup {
                    seller: parties[0].clone(),
                    mediator: parties[1].clone(),
                    buyer: parties[2].clone(),
                    data,
                    layout: DataLayout::Chunks { count },
                    phi: spec,
                    rho: Regulation {
                        text: format!("rule {k}"),
                        predicate: None,
                    },
                    ask,
                    seller_commission: bps(rng.gen_range(0..1_500)),
                    budget,
                    buyer_commission: bps(rng.gen_range(0..1_500)),
                    rules: MarketRules::new(Tick(rng.gen_range(0..4))),
                };
                let out = run_mediated(&setup, random_behaviors(&mut rng), &mut l, &mut rng)
                    .map_err(|e| format!("scenario {sc} trade {k}: {e}"))?;
                if out.phase == MediatedPhase::Settled {
                    expected.push((parties[0].clone(), parties[2].clone(), ask.min(budget)));
                    expected_tuples += 1;
                    expected_vertices.extend(parties[..3].iter().cloned());
                }
            } else {
                let price = Money(rng.gen_range(1..400));
                let setup = TwoPartySetup {
                    seller: parties[0].clone(),
                    buyer: parties[1].clone(),
                    data,
                    circuit: compile_spec(&spec, &DataLayout::Chunks { count })
                        .map_err(|e| e.to_string())?,
                    rho: RhoRef {
                        digest: hash(b"rho"),
                        text: "rho".into(),
                    },
                    price,
                    rules: TradeRules::standard(price, Tick(rng.gen_range(0..4))),
                    key: EncodingKey::random(&mut rng),
                };
                use Behavior::*;
                let sb = *[Honest, Honest, Abort, SellerJunkData]
                    .choose(&mut rng)
                    .expect("nonempty");
                let bb = *[Honest, Honest, BuyerUnderpay, BuyerFalseComplaint]
                    .choose(&mut rng)
                    .expect("nonempty");
                let out = run_two_party(sb, bb, &setup, &mut l, &mut rng)
                    .map_err(|e| format!("scenario {sc} trade {k}: {e}"))?;
                if out.phase() == TwoPartyPhase::Settled {
                    expected.push((parties[0].clone(), parties[1].clone(), price));
                    expected_vertices.extend(parties[..2].iter().cloned());
                }
            }
        }
        let incremental = l.graph().clone();
        let rebuilt =
            rebuild_from_log(&parse_jsonl(&to_jsonl(l.log())).map_err(|e| e.to_string())?)
                .map_err(|e| format!("scenario {sc}: {e}"))?;
        ensure(rebuilt == incremental, || {
            format!("scenario {sc}: rebuilt graph differs")
        })?;
        let mut got: Vec<EdgeKey> = rebuilt
            .edges
            .iter()
            .map(|e| (e.seller.clone(), e.buyer.clone(), e.weight))
            .collect();
        got.sort();
        expected.sort();
        ensure(got == expected, || {
            format!("scenario {sc}: edges {got:?}, expected {expected:?}")
        })?;
        ensure(
            rebuilt.tuples.len() == expected_tuples && rebuilt.vertices == expected_vertices,
            || format!("scenario {sc}: tuples or vertices differ"),
        )?;
        for cut in 0..=l.log().len() {
            let prefix = rebuild_from_log(&l.log()[..cut])
                .map_err(|e| format!("scenario {sc} prefix {cut}: {e}"))?;
            ensure(prefix.is_subgraph_of(&incremental), || {
                format!("scenario {sc}: prefix {cut} not a subgraph")
            })?;
        }
        total_edges += expected.len();
    }

    // Alice sells to Bob for 5.
    let mut l = Ledger::new();
    let (alice, bob) = (acct("Alice"), acct("Bob"));
    l.open_account(alice.clone(), Money(100))
        .map_err(|e| e.to_string())?;
    l.open_account(bob.clone(), Money(100))
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = PredicateSpec::AllChunksContain {
        pattern: b"s".to_vec(),
    };
    let data = generate_data(
        &DataSpec::Chunks {
            count: 4,
            pattern: b"s".to_vec(),
        },
        &mut rng,
    );
    let setup = TwoPartySetup {
        seller: alice.clone(),
        buyer: bob.clone(),
        data,
        circuit: compile_spec(&spec, &DataLayout::Chunks { count: 4 })
            .map_err(|e| e.to_string())?,
        rho: RhoRef {
            digest: hash(b"none"),
            text: "none".into(),
        },
        price: Money(5),
        rules: TradeRules::standard(Money(5), Tick(2)),
        key: EncodingKey::random(&mut rng),
    };
    run_two_party(Behavior::Honest, Behavior::Honest, &setup, &mut l, &mut rng)
        .map_err(|e| e.to_string())?;
    let g: TradeGraph = rebuild_from_log(l.log()).map_err(|e| e.to_string())?;
    let edges: Vec<EdgeKey> = g
        .edges
        .iter()
        .map(|e| (e.seller.clone(), e.buyer.clone(), e.weight))
        .collect();
    ensure(
        edges == vec![(alice.clone(), bob.clone(), Money(5))]
            && g.vertices == BTreeSet::from([alice, bob])
            && g.tuples.is_empty(),
        || format!("Alice/Bob graph {g:?}"),
    )?;
    Ok(format!(
        "100 scenarios, {total_trades} trades, {total_edges} edges match; Alice->Bob w=5"
    ))
}

// ---- 9 ----

fn hash_chain_circuit(chunks: &[Word]) -> PredicateCircuit {
    let digest = file_digest(chunks).expect("nonempty");
    compile_spec(
        &PredicateSpec::HashEquals { digest },
        &DataLayout::Chunks {
            count: chunks.len() as u32,
        },
    )
    .expect("compiles")
}

fn round_trip_and_flips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sizes = vec![0usize, 1, 31, 32, 33, 1_000, 65_536, 1 << 20];
    sizes.extend((0..8).map(|_| rng.gen_range(0..=1 << 20)));
    for &size in &sizes {
        let bytes: Vec<u8> = (0..size).map(|_| rng.gen()).collect();
        let blob = DataBlob::from_bytes(&bytes);
        let c = hash_chain_circuit(&blob.chunks);
        let key = EncodingKey::random(&mut rng);
        let pkg = encode_package(&blob, &c, &key).map_err(|e| e.to_string())?;
        ensure(verify_package(&pkg, &pkg.root, &c), || {
            format!("{size} bytes: honest package rejected")
        })?;
        let (out, ok) = decode(&pkg, &key, &c);
        ensure(
            ok && out.chunks == blob.chunks && out.to_bytes()[..size] == bytes[..],
            || format!("{size} bytes: round trip failed"),
        )?;
    }

    const FLIPS: usize = 1_000;
    let mut packages = Vec::new();
    for _ in 0..20 {
        let n = rng.gen_range(1..=512);
        let blob = DataBlob::new(common::random_chunks(&mut rng, n)).expect("nonempty");
        let c = hash_chain_circuit(&blob.chunks);
        let pkg =
            encode_package(&blob, &c, &EncodingKey::random(&mut rng)).map_err(|e| e.to_string())?;
        packages.push((pkg, c));
    }
    for trial in 0..FLIPS {
        let (pkg, c) = packages.choose(&mut rng).expect("nonempty");
        let mut bad = pkg.clone();
        let bit = 1u8 << rng.gen_range(0..8);
        if trial % 10 == 0 {
            // The root the package claims, not the agreed one.
            bad.root.0[rng.gen_range(0..32)] ^= bit;
        } else {
            let leaf = rng.gen_range(0..bad.leaf_count());
            bad.leaf_mut(leaf).expect("in range").0[rng.gen_range(0..32)] ^= bit;
        }
        ensure(!verify_package(&bad, &pkg.root, c), || {
            format!("flip {trial} accepted")
        })?;
    }
    // Re-sealing under a new root does not help against the agreed root.
    let (pkg, c) = &packages[0];
    let mut leaves = pkg.leaves();
    leaves[0].0[0] ^= 1;
    let mut resealed = pkg.clone();
    *resealed.leaf_mut(0).expect("in range") = leaves[0];
    resealed.root = merkle_root(&leaves.iter().map(|w| w.0).collect::<Vec<_>>()).expect("nonempty");
    ensure(!verify_package(&resealed, &pkg.root, c), || {
        "re-sealed package accepted".into()
    })?;
    Ok(format!(
        "{} blobs up to 1 MiB round-trip; {FLIPS} single-byte flips rejected",
        sizes.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (
            "payout arithmetic",
            payout_arithmetic,
            Some(Duration::from_secs(5)),
        ),
        (
            "conservation and replay",
            conservation_and_replay,
            Some(Duration::from_secs(30)),
        ),
        (
            "proof-of-misbehavior completeness",
            pom_completeness,
            Some(Duration::from_secs(60)),
        ),
        ("proof-of-misbehavior soundness", pom_soundness, None),
        ("fairness under collusion", fairness_suite, None),
        ("protocol ordering", protocol_ordering, None),
        ("complaint timeout boundary", timeout_boundary, None),
        ("trade graph reconstruction", graph_reconstruction, None),
        (
            "round trip and package verification",
            round_trip_and_flips,
            None,
        ),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let mut result = run();
        let took = t0.elapsed();
        if let (Ok(_), Some(limit)) = (&result, budget) {
            if took > *limit {
                result = Err(format!("took {took:.2?}, limit {limit:?}"));
            }
        }
        match result {
            Ok(detail) => println!("criterion {}: PASS {name} ({took:.2?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({took:.2?}): {why}", i + 1);
            }
        }
    }
    let total = start.elapsed();
    if total > Duration::from_secs(180) {
        failed += 1;
        println!("suite: FAIL wall clock {total:.2?} over 3 minutes");
    }
    println!(
        "acceptance: {} of 9 criteria passed in {total:.2?}",
        9 - failed.min(9)
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
