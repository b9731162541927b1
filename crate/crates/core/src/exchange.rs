//! Two-party fair exchange.
//!
//! The seller encrypts every data chunk and every wire of the predicate's
//! evaluation transcript under one key, commits to all ciphertexts with a
//! Merkle root, and reveals the key only after the buyer has paid into
//! escrow. If the decrypted transcript is inconsistent, or its output is not
//! true, the buyer can show it to the ledger with a proof that touches one
//! gate and its Merkle paths.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversim::Behavior;
use crate::commitments::{
    decrypt_chunk, encrypt_chunk, merkle_depth, merkle_verify, Digest, EncodingKey, MerkleProof,
    MerkleTree,
};
use crate::ledger::{
    AccountId, Agreement, AgreementId, AgreementKind, Commission, EscrowId, Ledger, LedgerError,
    Money, Party, PriceTerms, RhoRef, Role, Tick, TradeRules, Verdict, VerdictBasis,
};
use crate::predicate::{GateId, PredicateCircuit, TableLayout, WireRef, Word};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExchangeError {
    #[error("circuit expects {expected} chunks, blob has {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("a blob needs at least one chunk")]
    EmptyBlob,
}

/// The data being sold, as 32-byte chunks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataBlob {
    pub chunks: Vec<Word>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<TableLayout>,
}

impl DataBlob {
    pub fn new(chunks: Vec<Word>) -> Result<Self, ExchangeError> {
        if chunks.is_empty() {
            return Err(ExchangeError::EmptyBlob);
        }
        Ok(Self {
            chunks,
            table: None,
        })
    }

    pub fn with_table(chunks: Vec<Word>, table: TableLayout) -> Result<Self, ExchangeError> {
        Ok(Self {
            table: Some(table),
            ..Self::new(chunks)?
        })
    }

    /// Splits bytes into chunks, zero-padding the last one. Empty input
    /// becomes a single zero chunk.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut chunks: Vec<Word> = bytes.chunks(32).map(Word::from_slice_padded).collect();
        if chunks.is_empty() {
            chunks.push(Word::ZERO);
        }
        Self {
            chunks,
            table: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.chunks.iter().flat_map(|c| c.0).collect()
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// `f(D)`: ciphertexts of the chunks and of the transcript wires, plus the
/// commitment over both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "PackageJson", try_from = "PackageJson")]
pub struct EncodedPackage {
    pub enc_chunks: Vec<Word>,
    pub enc_wires: Vec<Word>,
    pub circuit_digest: Digest,
    pub root: Digest,
}

#[derive(Serialize, Deserialize)]
struct PackageJson {
    num_chunks: usize,
    leaves: Vec<Word>,
    circuit_digest: Digest,
    root: Digest,
}

impl From<EncodedPackage> for PackageJson {
    fn from(p: EncodedPackage) -> Self {
        let num_chunks = p.enc_chunks.len();
        let mut leaves = p.enc_chunks;
        leaves.extend(p.enc_wires);
        Self {
            num_chunks,
            leaves,
            circuit_digest: p.circuit_digest,
            root: p.root,
        }
    }
}

impl TryFrom<PackageJson> for EncodedPackage {
    type Error = String;
    fn try_from(mut j: PackageJson) -> Result<Self, String> {
        if j.num_chunks > j.leaves.len() {
            return Err(format!(
                "num_chunks {} exceeds {} leaves",
                j.num_chunks,
                j.leaves.len()
            ));
        }
        let enc_wires = j.leaves.split_off(j.num_chunks);
        Ok(Self {
            enc_chunks: j.leaves,
            enc_wires,
            circuit_digest: j.circuit_digest,
            root: j.root,
        })
    }
}

impl EncodedPackage {
    pub fn leaf_count(&self) -> usize {
        self.enc_chunks.len() + self.enc_wires.len()
    }

    /// Leaf `i` of the commitment: chunks first, then wires.
    pub fn leaf(&self, i: usize) -> Option<&Word> {
        if i < self.enc_chunks.len() {
            self.enc_chunks.get(i)
        } else {
            self.enc_wires.get(i - self.enc_chunks.len())
        }
    }

    pub fn leaf_mut(&mut self, i: usize) -> Option<&mut Word> {
        let n = self.enc_chunks.len();
        if i < n {
            self.enc_chunks.get_mut(i)
        } else {
            self.enc_wires.get_mut(i - n)
        }
    }

    pub fn leaves(&self) -> Vec<Word> {
        self.enc_chunks
            .iter()
            .chain(&self.enc_wires)
            .copied()
            .collect()
    }

    pub fn recompute_root(&self) -> Option<Digest> {
        MerkleTree::new(&self.leaves()).ok().map(|t| t.root())
    }

    fn tree(&self) -> Option<MerkleTree> {
        MerkleTree::new(&self.leaves()).ok()
    }
}

/// Encrypts plaintext chunks and wire values under `key` and commits to them.
/// Honest sellers pass the true transcript; this also builds dishonest packages.
pub fn seal(
    chunks: &[Word],
    wires: &[Word],
    circuit_digest: Digest,
    key: &EncodingKey,
) -> EncodedPackage {
    let n = chunks.len() as u64;
    let enc_chunks: Vec<Word> = chunks
        .iter()
        .enumerate()
        .map(|(i, c)| encrypt_chunk(key, i as u64, c))
        .collect();
    let enc_wires: Vec<Word> = wires
        .iter()
        .enumerate()
        .map(|(g, w)| encrypt_chunk(key, n + g as u64, w))
        .collect();
    let mut pkg = EncodedPackage {
        enc_chunks,
        enc_wires,
        circuit_digest,
        root: Digest::default(),
    };
    pkg.root = pkg.recompute_root().unwrap_or_default();
    pkg
}

pub fn encode_package(
    d: &DataBlob,
    c: &PredicateCircuit,
    key: &EncodingKey,
) -> Result<EncodedPackage, ExchangeError> {
    if d.chunks.len() != c.num_inputs() {
        return Err(ExchangeError::ArityMismatch {
            expected: c.num_inputs(),
            got: d.chunks.len(),
        });
    }
    let transcript = c.eval_transcript(&d.chunks).expect("arity checked");
    Ok(seal(&d.chunks, &transcript.wire_values, c.digest(), key))
}

/// The buyer's pre-payment check. Binds the package to the agreed root and
/// circuit without decrypting anything.
pub fn verify_package(
    pkg: &EncodedPackage,
    agreed_root: &Digest,
    circuit: &PredicateCircuit,
) -> bool {
    pkg.root == *agreed_root
        && pkg.circuit_digest == circuit.digest()
        && pkg.enc_chunks.len() == circuit.num_inputs()
        && pkg.enc_wires.len() == circuit.gate_count()
        && pkg.recompute_root().as_ref() == Some(agreed_root)
}

fn decrypt_all(pkg: &EncodedPackage, key: &EncodingKey) -> (Vec<Word>, Vec<Word>) {
    let n = pkg.enc_chunks.len() as u64;
    let chunks = pkg
        .enc_chunks
        .iter()
        .enumerate()
        .map(|(i, c)| decrypt_chunk(key, i as u64, c))
        .collect();
    let wires = pkg
        .enc_wires
        .iter()
        .enumerate()
        .map(|(g, w)| decrypt_chunk(key, n + g as u64, w))
        .collect();
    (chunks, wires)
}

/// Decrypts the chunks and evaluates the circuit on them.
pub fn decode(pkg: &EncodedPackage, key: &EncodingKey, c: &PredicateCircuit) -> (DataBlob, bool) {
    let (chunks, _) = decrypt_all(pkg, key);
    let ok = c.eval(&chunks).unwrap_or(false);
    (
        DataBlob {
            chunks,
            table: None,
        },
        ok,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PomKind {
    /// The committed output wire does not decrypt to true.
    BadOutput,
    /// Gate `gate`'s committed output disagrees with the gate applied to its
    /// committed operands.
    BadGate { gate: GateId },
}

/// A ciphertext leaf together with its inclusion path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenLeaf {
    pub ciphertext: Word,
    pub proof: MerkleProof,
}

/// Leaves are ordered: the gate's own wire first, then its operands in
/// [`crate::predicate::GateOp::operands`] order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisbehaviorProof {
    #[serde(flatten)]
    pub kind: PomKind,
    pub leaves: Vec<ProvenLeaf>,
}

impl MisbehaviorProof {
    /// Leaf positions whose plaintext the arbiter learns by verifying.
    pub fn disclosed_leaves(&self) -> Vec<u64> {
        self.leaves.iter().map(|l| l.proof.leaf_index).collect()
    }
}

/// Leaf positions a proof of `kind` must open, in order.
fn required_leaves(c: &PredicateCircuit, kind: PomKind) -> Option<Vec<u64>> {
    let n = c.num_inputs() as u64;
    match kind {
        PomKind::BadOutput => Some(vec![n + c.output_gate() as u64]),
        PomKind::BadGate { gate } => {
            let op = c.gates().get(gate as usize)?;
            let mut leaves = vec![n + gate as u64];
            leaves.extend(op.operands().into_iter().map(|r| match r {
                WireRef::Chunk(i) => i as u64,
                WireRef::Gate(g) => n + g as u64,
            }));
            Some(leaves)
        }
    }
}

fn prove(
    pkg: &EncodedPackage,
    tree: &MerkleTree,
    c: &PredicateCircuit,
    kind: PomKind,
) -> MisbehaviorProof {
    let leaves = required_leaves(c, kind)
        .expect("gate exists")
        .into_iter()
        .map(|i| ProvenLeaf {
            ciphertext: *pkg.leaf(i as usize).expect("leaf in range"),
            proof: tree.prove(i as usize).expect("leaf in range"),
        })
        .collect();
    MisbehaviorProof { kind, leaves }
}

/// Finds the seller's misbehavior, if any: a non-true output first, else the
/// smallest inconsistent gate.
pub fn generate_pom(
    pkg: &EncodedPackage,
    key: &EncodingKey,
    c: &PredicateCircuit,
) -> Option<MisbehaviorProof> {
    if pkg.enc_chunks.len() != c.num_inputs() || pkg.enc_wires.len() != c.gate_count() {
        return None;
    }
    let tree = pkg.tree()?;
    let (chunks, wires) = decrypt_all(pkg, key);
    if wires[c.output_gate() as usize] != Word::TRUE {
        return Some(prove(pkg, &tree, c, PomKind::BadOutput));
    }
    let transcript = crate::predicate::EvalTranscript { wire_values: wires };
    let gate = *c.transcript_violations(&chunks, &transcript).first()?;
    Some(prove(pkg, &tree, c, PomKind::BadGate { gate }))
}

/// The ledger's check. Opens only the proof's leaves: each must sit at its
/// required position under `root` with a full-depth path.
pub fn verify_pom(
    root: &Digest,
    c: &PredicateCircuit,
    key: &EncodingKey,
    proof: &MisbehaviorProof,
) -> bool {
    let Some(required) = required_leaves(c, proof.kind) else {
        return false;
    };
    if proof.leaves.len() != required.len() {
        return false;
    }
    let total = (c.num_inputs() + c.gate_count()) as u64;
    let depth = merkle_depth(total as usize);
    for (leaf, &index) in proof.leaves.iter().zip(&required) {
        if leaf.proof.leaf_index != index
            || index >= total
            || leaf.proof.path.len() != depth
            || !merkle_verify(root, leaf.ciphertext.as_bytes(), &leaf.proof)
        {
            return false;
        }
    }
    let plain: Vec<Word> = proof
        .leaves
        .iter()
        .zip(&required)
        .map(|(l, &i)| decrypt_chunk(key, i, &l.ciphertext))
        .collect();
    match proof.kind {
        PomKind::BadOutput => plain[0] != Word::TRUE,
        PomKind::BadGate { gate } => c.gates()[gate as usize].apply(&plain[1..]) != plain[0],
    }
}

/// A complaint that looks well formed but proves nothing: genuine leaves for
/// the output gate, claimed inconsistent.
pub fn baseless_complaint(pkg: &EncodedPackage, c: &PredicateCircuit) -> Option<MisbehaviorProof> {
    let tree = pkg.tree()?;
    required_leaves(
        c,
        PomKind::BadGate {
            gate: c.output_gate(),
        },
    )?
    .iter()
    .all(|&i| (i as usize) < pkg.leaf_count())
    .then(|| {
        prove(
            pkg,
            &tree,
            c,
            PomKind::BadGate {
                gate: c.output_gate(),
            },
        )
    })
}

/// What a junk-selling seller ships instead of `d`: every chunk except a table
/// header replaced with random words.
pub fn junk_blob<R: Rng + ?Sized>(d: &DataBlob, rng: &mut R) -> DataBlob {
    let keep = usize::from(d.table.is_some());
    let chunks = d
        .chunks
        .iter()
        .enumerate()
        .map(|(i, c)| if i < keep { *c } else { Word(rng.gen()) })
        .collect();
    DataBlob {
        chunks,
        table: d.table.clone(),
    }
}

/// A package for `junk` whose transcript claims the predicate holds: the
/// honest transcript with its output wire overwritten by true.
pub fn encode_forged(
    junk: &DataBlob,
    c: &PredicateCircuit,
    key: &EncodingKey,
) -> Result<EncodedPackage, ExchangeError> {
    if junk.chunks.len() != c.num_inputs() {
        return Err(ExchangeError::ArityMismatch {
            expected: c.num_inputs(),
            got: junk.chunks.len(),
        });
    }
    let mut wires = c
        .eval_transcript(&junk.chunks)
        .expect("arity checked")
        .wire_values;
    *wires.last_mut().expect("nonempty circuit") = Word::TRUE;
    Ok(seal(&junk.chunks, &wires, c.digest(), key))
}

// ---- two-party protocol ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoPartyPhase {
    Agreed,
    Funded,
    Delivered,
    Revealed,
    Settled,
    Aborted,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TwoPartyState {
    pub phase: Option<TwoPartyPhase>,
    pub trade: Option<AgreementId>,
    pub escrow: Option<EscrowId>,
    pub root: Option<Digest>,
    pub reveal_tick: Option<Tick>,
}

#[derive(Debug, Clone)]
pub struct TwoPartySetup {
    pub seller: AccountId,
    pub buyer: AccountId,
    pub data: DataBlob,
    pub circuit: PredicateCircuit,
    pub rho: RhoRef,
    pub price: Money,
    pub rules: TradeRules,
    pub key: EncodingKey,
}

#[derive(Debug, Clone)]
pub struct TradeOutcome {
    pub trace: Vec<TwoPartyPhase>,
    pub state: TwoPartyState,
    /// What the buyer decrypted, and whether the predicate holds on it.
    pub buyer_data: Option<(DataBlob, bool)>,
    pub verdicts: Vec<Verdict>,
    pub seller_delta: i128,
    pub buyer_delta: i128,
}

impl TradeOutcome {
    pub fn phase(&self) -> TwoPartyPhase {
        *self.trace.last().expect("trace starts at agreement")
    }
}

struct Run<'a> {
    ledger: &'a mut Ledger,
    state: TwoPartyState,
    trace: Vec<TwoPartyPhase>,
}

impl Run<'_> {
    fn enter(&mut self, phase: TwoPartyPhase) {
        self.trace.push(phase);
        self.state.phase = Some(phase);
    }
}

fn balance(ledger: &Ledger, id: &AccountId) -> i128 {
    ledger.balance(id).map_or(0, |m| m.0 as i128)
}

/// Drives one sale through agree, fund, deliver and reveal/settle. Seller
/// behaviors: `Honest`, `Abort`, `SellerJunkData`. Buyer behaviors: `Honest`,
/// `Abort`, `BuyerUnderpay`, `BuyerFalseComplaint`. Anything else acts honestly.
pub fn run_two_party<R: Rng + ?Sized>(
    seller_behavior: Behavior,
    buyer_behavior: Behavior,
    setup: &TwoPartySetup,
    ledger: &mut Ledger,
    rng: &mut R,
) -> Result<TradeOutcome, LedgerError> {
    let (s0, b0) = (
        balance(ledger, &setup.seller),
        balance(ledger, &setup.buyer),
    );
    let mut run = Run {
        ledger,
        state: TwoPartyState::default(),
        trace: Vec::new(),
    };
    let c = &setup.circuit;

    // Agree.
    let agreement = Agreement::new(
        AgreementKind::Trade,
        vec![
            Party {
                role: Role::Seller,
                account: setup.seller.clone(),
            },
            Party {
                role: Role::Buyer,
                account: setup.buyer.clone(),
            },
        ],
        c.digest(),
        setup.rho.clone(),
        PriceTerms {
            price: setup.price,
            seller_commission: Commission::ZERO,
            buyer_commission: Commission::ZERO,
        },
        setup.rules,
        None,
        Vec::new(),
        run.ledger.now(),
    );
    let trade = run.ledger.register_agreement(agreement.clone())?;
    run.state.trade = Some(trade);
    run.enter(TwoPartyPhase::Agreed);
    let finish = |run: Run<'_>, buyer_data| {
        let seller_delta = balance(run.ledger, &setup.seller) - s0;
        let buyer_delta = balance(run.ledger, &setup.buyer) - b0;
        let verdicts = run
            .ledger
            .verdicts()
            .iter()
            .filter(|v| v.trade == trade)
            .cloned()
            .collect();
        Ok(TradeOutcome {
            trace: run.trace,
            state: run.state,
            buyer_data,
            verdicts,
            seller_delta,
            buyer_delta,
        })
    };

    if seller_behavior == Behavior::Abort || buyer_behavior == Behavior::Abort {
        run.enter(TwoPartyPhase::Aborted);
        return finish(run, None);
    }

    // Fund.
    run.ledger.advance_time(Tick(1));
    let total = agreement.buyer_total();
    let pay = if buyer_behavior == Behavior::BuyerUnderpay {
        Money(total.0 / 2)
    } else {
        total
    };
    if pay > Money::ZERO {
        run.state.escrow = Some(run.ledger.freeze(&setup.buyer, pay, trade)?);
    }
    if run.ledger.is_paid(trade) {
        run.enter(TwoPartyPhase::Funded);
    }

    // Deliver.
    run.ledger.advance_time(Tick(1));
    let pkg = if seller_behavior == Behavior::SellerJunkData {
        encode_forged(&junk_blob(&setup.data, rng), c, &setup.key)
    } else {
        encode_package(&setup.data, c, &setup.key)
    }
    .map_err(|e| LedgerError::InvalidAgreement(e.to_string()))?;
    run.ledger.post_commitment(trade, pkg.root)?;
    run.state.root = Some(pkg.root);
    let delivered_ok = verify_package(&pkg, &pkg.root, c);
    if run.ledger.is_paid(trade) && delivered_ok {
        run.enter(TwoPartyPhase::Delivered);
    }

    // Reveal, only against full payment.
    run.ledger.advance_time(Tick(1));
    if !run.ledger.is_paid(trade) || !delivered_ok {
        let deadline = run.ledger.reveal_deadline(trade).expect("trade registered");
        let wait = deadline.0.saturating_sub(run.ledger.now().0) + 1;
        run.ledger.advance_time(Tick(wait));
        run.ledger.cancel_trade(trade)?;
        run.enter(TwoPartyPhase::Aborted);
        return finish(run, None);
    }
    run.ledger
        .reveal_key(trade, setup.key, setup.rules.min_deposit)?;
    run.state.reveal_tick = Some(run.ledger.now());
    run.enter(TwoPartyPhase::Revealed);

    // The buyer reads the key from the ledger.
    let key = run
        .ledger
        .trade(trade)
        .and_then(|t| t.key)
        .expect("key revealed");
    let (mut blob, ok) = decode(&pkg, &key, c);
    blob.table = setup.data.table.clone();
    let buyer_data = Some((blob, ok));
    let complaint = match buyer_behavior {
        Behavior::BuyerFalseComplaint => baseless_complaint(&pkg, c),
        _ => generate_pom(&pkg, &key, c),
    };
    if let Some(proof) = complaint {
        let v = run.ledger.submit_complaint(trade, &setup.buyer, c, proof)?;
        if v.basis == VerdictBasis::ValidPom {
            run.enter(TwoPartyPhase::Aborted);
            return finish(run, buyer_data);
        }
    }

    let until = run.ledger.complaint_deadline(trade).expect("revealed");
    let wait = until.0.saturating_sub(run.ledger.now().0) + 1;
    run.ledger.advance_time(Tick(wait));
    run.ledger.settle(trade)?;
    run.enter(TwoPartyPhase::Settled);
    finish(run, buyer_data)
}
