//! Three-party trade through a mediator.
//!
//! 1. The seller lists `f(D)` and `rho` with the mediator at ask `p_S`.
//! 2. The buyer registers `Phi` and a budget `p_B`.
//! 3. The mediator checks what it can without the key, registers the trade at
//!    `p = min(p_S, p_B)` and forwards the package.
//! 4. The buyer verifies the package, accepts `rho` and escrows `p + c_B p`.
//! 5. The seller reveals the key (with a deposit) once payment is in.
//! 6. The buyer may complain with a proof of misbehavior within `t` ticks.
//! 7. The ledger settles: commissions to the mediator, the rest to the seller.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversim::Behavior;
use crate::commitments::{hash, Digest, EncodingKey};
use crate::exchange::{
    baseless_complaint, decode, encode_forged, encode_package, generate_pom, junk_blob,
    verify_package, DataBlob, EncodedPackage,
};
use crate::ledger::{
    AccountId, Agreement, AgreementId, AgreementKind, Commission, EscrowId, Ledger, LedgerError,
    Money, Party, Payouts, PriceTerms, RhoRef, Role, Tick, TradeRules, Verdict, VerdictBasis,
    DEFAULT_REVEAL_TIMEOUT,
};
use crate::predicate::{
    compile_spec, DataLayout, Disclosure, PredicateCircuit, PredicateError, PredicateSpec, Word,
};

pub use crate::ledger::compute_payouts;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MediatedError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Predicate(#[from] PredicateError),
    #[error("ask must be positive")]
    ZeroAsk,
    #[error("budget must be positive")]
    ZeroBudget,
    #[error("malformed package: {0}")]
    MalformedPackage(String),
    #[error("unknown offer {0}")]
    UnknownOffer(AgreementId),
    #[error("unknown request {0}")]
    UnknownRequest(AgreementId),
    #[error("budget {budget} below ask {ask}")]
    BudgetBelowAsk { ask: Money, budget: Money },
    #[error("predicate check failed: {0}")]
    PhiCheckFailed(String),
    #[error("package does not match the on-ledger commitment")]
    PackageRejected,
    #[error("buyer rejects the regulation predicate")]
    RhoRejected,
    #[error("trade {0} is not paid")]
    NotPaid(AgreementId),
    #[error("trade {trade} is {actual:?}, expected {expected:?}")]
    WrongPhase {
        trade: AgreementId,
        expected: MediatedPhase,
        actual: MediatedPhase,
    },
}

pub type Result<T> = std::result::Result<T, MediatedError>;

/// A regulation predicate with its human-readable text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regulation {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<PredicateSpec>,
}

impl Regulation {
    /// Compiles the predicate against `layout`. The reference digest is the
    /// circuit digest, or the hash of the text when there is no predicate.
    pub fn compile(&self, layout: &DataLayout) -> Result<(RhoRef, Option<PredicateCircuit>)> {
        let circuit = self
            .predicate
            .as_ref()
            .map(|p| compile_spec(p, layout))
            .transpose()?;
        let digest = circuit
            .as_ref()
            .map_or_else(|| hash(self.text.as_bytes()), |c| c.digest());
        Ok((
            RhoRef {
                digest,
                text: self.text.clone(),
            },
            circuit,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SellerOffer {
    pub seller: AccountId,
    pub package: EncodedPackage,
    pub layout: DataLayout,
    /// Clear columns of a selectively encrypted table.
    pub disclosure: Option<Disclosure>,
    pub rho: RhoRef,
    pub ask: Money,
    pub commission: Commission,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuyerRequest {
    pub buyer: AccountId,
    pub phi_spec: PredicateSpec,
    pub phi: PredicateCircuit,
    pub budget: Money,
    pub commission: Commission,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediatedPhase {
    Offered,
    Requested,
    Matched,
    Paid,
    Revealed,
    Complained,
    Settled,
    Aborted,
}

impl MediatedPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, MediatedPhase::Settled | MediatedPhase::Aborted)
    }
}

/// True when `trace` follows steps 1 to 7 in order, ending at most once in a
/// terminal phase.
pub fn trace_in_order(trace: &[MediatedPhase]) -> bool {
    let mut prev: Option<MediatedPhase> = None;
    for &p in trace {
        if prev.is_some_and(|q| q.is_terminal()) {
            return false;
        }
        let ok = match (prev, p) {
            (None, MediatedPhase::Offered | MediatedPhase::Aborted) => true,
            (None, _) => false,
            (Some(_), MediatedPhase::Aborted) => true,
            (Some(q), MediatedPhase::Settled) => {
                q == MediatedPhase::Revealed || q == MediatedPhase::Complained
            }
            (Some(q), p) => (p as u8) == (q as u8) + 1,
        };
        if !ok {
            return false;
        }
        prev = Some(p);
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DepositRule {
    /// `floor(p / 10)`.
    #[default]
    Tenth,
    Fixed {
        amount: Money,
    },
}

impl DepositRule {
    pub fn for_price(self, price: Money) -> Money {
        match self {
            DepositRule::Tenth => Money(price.0 / 10),
            DepositRule::Fixed { amount } => amount,
        }
    }
}

/// Deal parameters the mediator stamps on every trade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarketRules {
    pub window: Tick,
    #[serde(default)]
    pub deposit: DepositRule,
    #[serde(default = "default_reveal_timeout")]
    pub reveal_timeout: Tick,
    #[serde(default)]
    pub false_complaint_penalty: Money,
}

fn default_reveal_timeout() -> Tick {
    DEFAULT_REVEAL_TIMEOUT
}

impl MarketRules {
    pub fn new(window: Tick) -> Self {
        Self {
            window,
            deposit: DepositRule::Tenth,
            reveal_timeout: DEFAULT_REVEAL_TIMEOUT,
            false_complaint_penalty: Money::ZERO,
        }
    }

    pub fn trade_rules(&self, price: Money) -> TradeRules {
        TradeRules {
            window: self.window,
            min_deposit: self.deposit.for_price(price),
            reveal_timeout: self.reveal_timeout,
            false_complaint_penalty: self.false_complaint_penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MediatedTrade {
    pub id: AgreementId,
    pub offer: AgreementId,
    pub request: AgreementId,
    pub seller: AccountId,
    pub mediator: AccountId,
    pub buyer: AccountId,
    pub ask: Money,
    pub budget: Money,
    pub price: Money,
    pub phase: MediatedPhase,
    pub reveal_tick: Option<Tick>,
    pub window: Tick,
    pub escrow: Option<EscrowId>,
}

/// Something a participant saw during a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "what", rename_all = "snake_case")]
pub enum Observation {
    Ciphertext {
        leaves: usize,
        root: Digest,
    },
    Disclosed {
        columns: Vec<String>,
    },
    Predicate {
        digest: Digest,
    },
    Regulation {
        digest: Digest,
    },
    Key {
        trade: AgreementId,
    },
    /// Plaintext of the listed commitment leaves.
    Plaintext {
        leaves: Vec<u64>,
    },
    /// Plaintext of the whole data set.
    Data {
        chunks: usize,
    },
}

/// Who saw what.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoFlow {
    pub seller: Vec<Observation>,
    pub mediator: Vec<Observation>,
    pub buyer: Vec<Observation>,
    pub arbiter: Vec<Observation>,
    /// Result of scanning every string the mediator received for the key and
    /// for encrypted plaintext chunks.
    pub mediator_blind: bool,
}

impl InfoFlow {
    /// No key and no encrypted plaintext reached the mediator.
    pub fn mediator_is_blind(&self) -> bool {
        self.mediator_blind
            && !self.mediator.iter().any(|o| {
                matches!(
                    o,
                    Observation::Key { .. }
                        | Observation::Plaintext { .. }
                        | Observation::Data { .. }
                )
            })
    }
}

/// The mediator and its view of the market.
#[derive(Debug, Clone)]
pub struct Mediator {
    pub account: AccountId,
    pub rules: MarketRules,
    /// Skip the step-3 predicate checks.
    pub skip_phi_check: bool,
    /// Flip a ciphertext byte before forwarding.
    pub tamper_package: bool,
    offers: BTreeMap<AgreementId, SellerOffer>,
    requests: BTreeMap<AgreementId, BuyerRequest>,
    observed: Vec<Observation>,
    strings: HashSet<String>,
}

impl Mediator {
    pub fn new(account: AccountId, rules: MarketRules) -> Self {
        Self {
            account,
            rules,
            skip_phi_check: false,
            tamper_package: false,
            offers: BTreeMap::new(),
            requests: BTreeMap::new(),
            observed: Vec::new(),
            strings: HashSet::new(),
        }
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observed
    }

    /// Whether `needle` occurs in any string value of any received message.
    pub fn has_seen(&self, needle: &str) -> bool {
        self.strings.contains(needle)
            || self
                .strings
                .iter()
                .any(|s| s.len() > needle.len() && s.contains(needle))
    }

    fn receive<T: Serialize>(&mut self, msg: &T) {
        let value = serde_json::to_value(msg).expect("messages serialize");
        collect_strings(&value, &mut self.strings);
    }

    /// Step 1.
    pub fn register_offer(
        &mut self,
        offer: SellerOffer,
        ledger: &mut Ledger,
    ) -> Result<AgreementId> {
        self.receive(&offer);
        if offer.ask == Money::ZERO {
            return Err(MediatedError::ZeroAsk);
        }
        if offer.package.recompute_root() != Some(offer.package.root) {
            return Err(MediatedError::MalformedPackage(
                "root does not match leaves".into(),
            ));
        }
        if offer.package.enc_chunks.len() != offer.layout.num_inputs() as usize {
            return Err(MediatedError::MalformedPackage(
                "chunk count does not match layout".into(),
            ));
        }
        let listing = Agreement::new(
            AgreementKind::Listing,
            vec![
                Party {
                    role: Role::Seller,
                    account: offer.seller.clone(),
                },
                Party {
                    role: Role::Mediator,
                    account: self.account.clone(),
                },
            ],
            offer.package.circuit_digest,
            offer.rho.clone(),
            PriceTerms {
                price: offer.ask,
                seller_commission: offer.commission,
                buyer_commission: Commission::ZERO,
            },
            self.rules.trade_rules(offer.ask),
            Some(offer.package.root),
            Vec::new(),
            ledger.now(),
        );
        let id = ledger.register_agreement(listing)?;
        self.observed.push(Observation::Ciphertext {
            leaves: offer.package.leaf_count(),
            root: offer.package.root,
        });
        if let Some(d) = &offer.disclosure {
            self.observed.push(Observation::Disclosed {
                columns: d.columns.clone(),
            });
        }
        self.observed.push(Observation::Regulation {
            digest: offer.rho.digest,
        });
        self.offers.insert(id, offer);
        Ok(id)
    }

    /// Step 2.
    pub fn register_request(
        &mut self,
        request: BuyerRequest,
        rho: RhoRef,
        ledger: &mut Ledger,
    ) -> Result<AgreementId> {
        self.receive(&request);
        if request.budget == Money::ZERO {
            return Err(MediatedError::ZeroBudget);
        }
        let agreement = Agreement::new(
            AgreementKind::Request,
            vec![
                Party {
                    role: Role::Buyer,
                    account: request.buyer.clone(),
                },
                Party {
                    role: Role::Mediator,
                    account: self.account.clone(),
                },
            ],
            request.phi.digest(),
            rho,
            PriceTerms {
                price: request.budget,
                seller_commission: Commission::ZERO,
                buyer_commission: request.commission,
            },
            self.rules.trade_rules(request.budget),
            None,
            Vec::new(),
            ledger.now(),
        );
        let id = ledger.register_agreement(agreement)?;
        self.observed.push(Observation::Predicate {
            digest: request.phi.digest(),
        });
        self.requests.insert(id, request);
        Ok(id)
    }

    /// Step 3. Checks budget against ask, the package against the listing
    /// and the buyer's predicate, and the predicate on the clear columns;
    /// then registers the trade and returns the package to forward.
    pub fn match_and_forward(
        &mut self,
        offer_id: AgreementId,
        request_id: AgreementId,
        ledger: &mut Ledger,
    ) -> Result<(MediatedTrade, EncodedPackage)> {
        let offer = self
            .offers
            .get(&offer_id)
            .ok_or(MediatedError::UnknownOffer(offer_id))?;
        let request = self
            .requests
            .get(&request_id)
            .ok_or(MediatedError::UnknownRequest(request_id))?;
        if request.budget < offer.ask {
            return Err(MediatedError::BudgetBelowAsk {
                ask: offer.ask,
                budget: request.budget,
            });
        }
        let listing = ledger
            .agreement(offer_id)
            .ok_or(LedgerError::UnknownAgreement(offer_id))?;
        let listed_root = listing
            .data_root
            .ok_or_else(|| MediatedError::MalformedPackage("listing has no root".into()))?;
        if !self.skip_phi_check {
            if offer.package.circuit_digest != request.phi.digest() {
                return Err(MediatedError::PhiCheckFailed(
                    "package was encoded under a different predicate".into(),
                ));
            }
            if !verify_package(&offer.package, &listed_root, &request.phi) {
                return Err(MediatedError::PhiCheckFailed(
                    "package does not fit the predicate".into(),
                ));
            }
            if let Some(view) = &offer.disclosure {
                if request.phi_spec.check_visible(&offer.layout, view) == Some(false) {
                    return Err(MediatedError::PhiCheckFailed(
                        "clear columns violate the predicate".into(),
                    ));
                }
            }
        }
        let price = offer.ask.min(request.budget);
        let agreement = Agreement::new(
            AgreementKind::Trade,
            vec![
                Party {
                    role: Role::Seller,
                    account: offer.seller.clone(),
                },
                Party {
                    role: Role::Mediator,
                    account: self.account.clone(),
                },
                Party {
                    role: Role::Buyer,
                    account: request.buyer.clone(),
                },
            ],
            request.phi.digest(),
            offer.rho.clone(),
            PriceTerms {
                price,
                seller_commission: offer.commission,
                buyer_commission: request.commission,
            },
            self.rules.trade_rules(price),
            Some(listed_root),
            vec![offer_id, request_id],
            ledger.now(),
        );
        let id = ledger.register_agreement(agreement)?;
        let trade = MediatedTrade {
            id,
            offer: offer_id,
            request: request_id,
            seller: offer.seller.clone(),
            mediator: self.account.clone(),
            buyer: request.buyer.clone(),
            ask: offer.ask,
            budget: request.budget,
            price,
            phase: MediatedPhase::Matched,
            reveal_tick: None,
            window: self.rules.window,
            escrow: None,
        };
        let mut pkg = offer.package.clone();
        if self.tamper_package {
            if let Some(w) = pkg.enc_chunks.first_mut() {
                w.0[0] ^= 0x01;
            }
        }
        Ok((trade, pkg))
    }
}

fn collect_strings(v: &serde_json::Value, out: &mut HashSet<String>) {
    match v {
        serde_json::Value::String(s) => {
            out.insert(s.clone());
        }
        serde_json::Value::Array(a) => a.iter().for_each(|x| collect_strings(x, out)),
        serde_json::Value::Object(o) => o.values().for_each(|x| collect_strings(x, out)),
        _ => {}
    }
}

fn expect_phase(trade: &MediatedTrade, expected: MediatedPhase) -> Result<()> {
    if trade.phase != expected {
        return Err(MediatedError::WrongPhase {
            trade: trade.id,
            expected,
            actual: trade.phase,
        });
    }
    Ok(())
}

/// Step 4. The buyer checks the forwarded package against the on-ledger
/// root, countersigns `rho`, and escrows `p + floor(c_B p / 10^4)`.
/// Rejections abort the trade with no funds moved.
pub fn accept_and_pay(
    trade: &mut MediatedTrade,
    pkg: &EncodedPackage,
    phi: &PredicateCircuit,
    accepted_rho: &Digest,
    ledger: &mut Ledger,
) -> Result<EscrowId> {
    expect_phase(trade, MediatedPhase::Matched)?;
    let agreement = ledger
        .agreement(trade.id)
        .ok_or(LedgerError::NoSuchTrade(trade.id))?
        .clone();
    let root = ledger
        .trade(trade.id)
        .and_then(|t| t.root)
        .ok_or(LedgerError::NoCommitment(trade.id))?;
    if !verify_package(pkg, &root, phi) {
        trade.phase = MediatedPhase::Aborted;
        return Err(MediatedError::PackageRejected);
    }
    if agreement.rho.digest != *accepted_rho {
        trade.phase = MediatedPhase::Aborted;
        return Err(MediatedError::RhoRejected);
    }
    let escrow = ledger.freeze(&trade.buyer, agreement.buyer_total(), trade.id)?;
    trade.escrow = Some(escrow);
    trade.phase = MediatedPhase::Paid;
    Ok(escrow)
}

/// Step 5. The ledger refuses unless payment is complete.
pub fn reveal_key(
    trade: &mut MediatedTrade,
    key: EncodingKey,
    deposit: Money,
    ledger: &mut Ledger,
) -> Result<()> {
    match ledger.reveal_key(trade.id, key, deposit) {
        Err(LedgerError::NotPaid(id)) => Err(MediatedError::NotPaid(id)),
        Err(e) => Err(e.into()),
        Ok(()) => {
            trade.phase = MediatedPhase::Revealed;
            trade.reveal_tick = Some(ledger.now());
            Ok(())
        }
    }
}

/// Step 6.
pub fn complain(
    trade: &mut MediatedTrade,
    phi: &PredicateCircuit,
    proof: crate::exchange::MisbehaviorProof,
    ledger: &mut Ledger,
) -> Result<Verdict> {
    let verdict = ledger.submit_complaint(trade.id, &trade.buyer.clone(), phi, proof)?;
    trade.phase = if verdict.basis == VerdictBasis::ValidPom {
        MediatedPhase::Aborted
    } else {
        MediatedPhase::Complained
    };
    Ok(verdict)
}

/// Step 7.
pub fn settle(trade: &mut MediatedTrade, ledger: &mut Ledger) -> Result<Payouts> {
    let payouts = ledger.settle(trade.id)?;
    trade.phase = MediatedPhase::Settled;
    Ok(payouts)
}

// ---- full runs ----

/// Everything needed to run one mediated trade.
#[derive(Debug, Clone)]
pub struct MarketSetup {
    pub seller: AccountId,
    pub mediator: AccountId,
    pub buyer: AccountId,
    pub data: DataBlob,
    pub layout: DataLayout,
    pub phi: PredicateSpec,
    pub rho: Regulation,
    pub ask: Money,
    pub seller_commission: Commission,
    pub budget: Money,
    pub buyer_commission: Commission,
    pub rules: MarketRules,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Behaviors {
    pub seller: Behavior,
    pub mediator: Behavior,
    pub buyer: Behavior,
}

impl Behaviors {
    pub const HONEST: Behaviors = Behaviors {
        seller: Behavior::Honest,
        mediator: Behavior::Honest,
        buyer: Behavior::Honest,
    };
}

#[derive(Debug, Clone, Serialize)]
pub struct MediatedOutcome {
    pub phase: MediatedPhase,
    pub trace: Vec<MediatedPhase>,
    pub trade: Option<MediatedTrade>,
    /// Net balance change per participant.
    pub deltas: BTreeMap<AccountId, i128>,
    pub expected_payouts: Option<Payouts>,
    pub payouts: Option<Payouts>,
    pub verdicts: Vec<Verdict>,
    pub key_revealed: bool,
    /// Whether the predicate holds on what the buyer decrypted.
    pub buyer_phi: Option<bool>,
    /// Whether the regulation predicate holds on what the buyer decrypted.
    pub rho_holds: Option<bool>,
    pub info: InfoFlow,
    pub notes: Vec<String>,
}

struct Runner<'a> {
    ledger: &'a mut Ledger,
    trace: Vec<MediatedPhase>,
    notes: Vec<String>,
    info: InfoFlow,
}

impl Runner<'_> {
    fn enter(&mut self, phase: MediatedPhase) {
        if self.trace.last() != Some(&phase) {
            self.trace.push(phase);
        }
    }

    fn abort(&mut self, why: impl Into<String>) {
        self.notes.push(why.into());
        self.enter(MediatedPhase::Aborted);
    }

    fn wait_past(&mut self, deadline: Tick) {
        let wait = deadline.0.saturating_sub(self.ledger.now().0) + 1;
        self.ledger.advance_time(Tick(wait));
    }
}

/// Runs steps 1 to 7 with the given behaviors. Each step advances the clock
/// one tick, except that a complaint never waits past the window.
/// Protocol-level refusals end the run in `Aborted`; only
/// unexpected ledger failures are returned as errors.
pub fn run_mediated<R: Rng + ?Sized>(
    setup: &MarketSetup,
    behaviors: Behaviors,
    ledger: &mut Ledger,
    rng: &mut R,
) -> Result<MediatedOutcome> {
    let parties = [&setup.seller, &setup.mediator, &setup.buyer];
    let before: Vec<i128> = parties
        .iter()
        .map(|p| ledger.balance(p).map_or(0, |m| m.0 as i128))
        .collect();
    let mut run = Runner {
        ledger,
        trace: Vec::new(),
        notes: Vec::new(),
        info: InfoFlow::default(),
    };
    let phi = compile_spec(&setup.phi, &setup.layout)?;
    let (rho, rho_circuit) = setup.rho.compile(&setup.layout)?;
    let key = EncodingKey::random(rng);
    let mut trade: Option<MediatedTrade> = None;
    let mut payouts = None;
    let mut buyer_phi = None;
    let mut rho_holds = None;
    let mut mediator = Mediator::new(setup.mediator.clone(), setup.rules);
    mediator.skip_phi_check = behaviors.mediator == Behavior::MediatorSkipPhiCheck;
    mediator.tamper_package = behaviors.mediator == Behavior::MediatorTamperPackage;

    let offchain = behaviors.seller == Behavior::OffChain || behaviors.buyer == Behavior::OffChain;
    'protocol: {
        if offchain {
            run.abort("seller and buyer trade outside the system");
            break 'protocol;
        }
        if behaviors.seller == Behavior::Abort {
            run.abort("seller withdrew before listing");
            break 'protocol;
        }

        // Step 1.
        let shipped = if behaviors.seller == Behavior::SellerJunkData {
            encode_forged(&junk_blob(&setup.data, rng), &phi, &key)
        } else {
            encode_package(&setup.data, &phi, &key)
        }
        .map_err(|e| MediatedError::MalformedPackage(e.to_string()))?;
        let offered_rho = if behaviors.seller == Behavior::SellerWrongRho {
            RhoRef {
                digest: hash(b"unregulated"),
                text: "no restrictions".into(),
            }
        } else {
            rho.clone()
        };
        // The disclosure is the seller's claim about the clear columns; a junk
        // seller still shows the genuine ones.
        let disclosure = match &setup.layout {
            DataLayout::Table(t) => Some(t.schema.disclose(&setup.data.chunks)),
            DataLayout::Chunks { .. } => None,
        };
        let offer = SellerOffer {
            seller: setup.seller.clone(),
            package: shipped.clone(),
            layout: setup.layout.clone(),
            disclosure,
            rho: offered_rho,
            ask: setup.ask,
            commission: setup.seller_commission,
        };
        let offer_id = match mediator.register_offer(offer, run.ledger) {
            Ok(id) => id,
            Err(e) => {
                run.abort(format!("offer rejected: {e}"));
                break 'protocol;
            }
        };
        run.enter(MediatedPhase::Offered);
        run.ledger.advance_time(Tick(1));

        // Step 2.
        if behaviors.buyer == Behavior::Abort {
            run.abort("buyer withdrew before requesting");
            break 'protocol;
        }
        let request = BuyerRequest {
            buyer: setup.buyer.clone(),
            phi_spec: setup.phi.clone(),
            phi: phi.clone(),
            budget: setup.budget,
            commission: setup.buyer_commission,
        };
        let request_id = match mediator.register_request(request, rho.clone(), run.ledger) {
            Ok(id) => id,
            Err(e) => {
                run.abort(format!("request rejected: {e}"));
                break 'protocol;
            }
        };
        run.enter(MediatedPhase::Requested);
        run.ledger.advance_time(Tick(1));

        // Step 3.
        if behaviors.mediator == Behavior::Abort {
            run.abort("mediator withdrew before matching");
            break 'protocol;
        }
        let (mut t, forwarded) = match mediator.match_and_forward(offer_id, request_id, run.ledger)
        {
            Ok(x) => x,
            Err(e) => {
                run.abort(format!("match refused: {e}"));
                break 'protocol;
            }
        };
        run.enter(MediatedPhase::Matched);
        run.info.buyer.push(Observation::Ciphertext {
            leaves: forwarded.leaf_count(),
            root: forwarded.root,
        });
        run.ledger.advance_time(Tick(1));

        // Step 4.
        let paid = match behaviors.buyer {
            Behavior::BuyerUnderpay => {
                let total = run
                    .ledger
                    .agreement(t.id)
                    .expect("registered")
                    .buyer_total();
                let partial = Money(total.0 / 2);
                if partial > Money::ZERO {
                    t.escrow = Some(run.ledger.freeze(&t.buyer, partial, t.id)?);
                }
                run.notes
                    .push(format!("buyer escrowed {partial} of {total}"));
                false
            }
            // A buyer set on complaining pays without checking.
            Behavior::BuyerFalseComplaint => {
                let total = run
                    .ledger
                    .agreement(t.id)
                    .expect("registered")
                    .buyer_total();
                t.escrow = Some(run.ledger.freeze(&t.buyer, total, t.id)?);
                t.phase = MediatedPhase::Paid;
                true
            }
            _ => match accept_and_pay(&mut t, &forwarded, &phi, &rho.digest, run.ledger) {
                Ok(_) => true,
                Err(MediatedError::Ledger(e)) => return Err(e.into()),
                Err(e) => {
                    run.abort(format!("buyer declined: {e}"));
                    trade = Some(t);
                    break 'protocol;
                }
            },
        };
        if paid {
            run.enter(MediatedPhase::Paid);
        }
        run.ledger.advance_time(Tick(1));

        // Step 5. The seller acts only on payment it can see on the ledger.
        if !run.ledger.is_paid(t.id) {
            run.notes
                .push("seller withholds the key: payment incomplete".into());
            let deadline = run.ledger.reveal_deadline(t.id).expect("registered");
            run.wait_past(deadline);
            let refunded = run.ledger.cancel_trade(t.id)?;
            run.notes.push(format!(
                "trade cancelled after reveal deadline, {refunded} refunded"
            ));
            t.phase = MediatedPhase::Aborted;
            run.enter(MediatedPhase::Aborted);
            trade = Some(t);
            break 'protocol;
        }
        let deposit = setup.rules.deposit.for_price(t.price);
        reveal_key(&mut t, key, deposit, run.ledger)?;
        run.enter(MediatedPhase::Revealed);
        // The buyer checks within the window, which may be zero ticks.
        run.ledger.advance_time(Tick(t.window.0.min(1)));

        // Step 6. The key is read from the ledger.
        let revealed = run
            .ledger
            .trade(t.id)
            .and_then(|r| r.key)
            .expect("revealed");
        run.info.buyer.push(Observation::Key { trade: t.id });
        run.info.arbiter.push(Observation::Key { trade: t.id });
        let (mut blob, ok) = decode(&forwarded, &revealed, &phi);
        blob.table = setup.data.table.clone();
        run.info.buyer.push(Observation::Data {
            chunks: blob.chunks.len(),
        });
        buyer_phi = Some(ok);
        rho_holds = rho_circuit
            .as_ref()
            .map(|c| c.eval(&blob.chunks).unwrap_or(false));
        let complaint = match behaviors.buyer {
            Behavior::BuyerFalseComplaint => generate_pom(&forwarded, &revealed, &phi)
                .or_else(|| baseless_complaint(&forwarded, &phi)),
            _ => generate_pom(&forwarded, &revealed, &phi),
        };
        if let Some(proof) = complaint {
            run.info.arbiter.push(Observation::Plaintext {
                leaves: proof.disclosed_leaves(),
            });
            run.enter(MediatedPhase::Complained);
            let verdict = complain(&mut t, &phi, proof, run.ledger)?;
            if verdict.basis == VerdictBasis::ValidPom {
                run.abort("complaint upheld: buyer refunded, seller deposit forfeited");
                trade = Some(t);
                break 'protocol;
            }
            run.notes.push("complaint rejected".into());
        }

        // Step 7.
        let until = run.ledger.complaint_deadline(t.id).expect("revealed");
        run.wait_past(until);
        payouts = Some(settle(&mut t, run.ledger)?);
        run.enter(MediatedPhase::Settled);
        trade = Some(t);
    }

    // The seller always knows its own data and key.
    run.info.seller = vec![Observation::Data {
        chunks: setup.data.chunks.len(),
    }];
    if run
        .ledger
        .log()
        .iter()
        .any(|e| matches!(e.body, crate::ledger::EventBody::KeyRevealed { .. }))
    {
        run.info.seller.push(Observation::Key {
            trade: trade.as_ref().map_or(AgreementId(0), |t| t.id),
        });
    }
    run.info.mediator = mediator.observations().to_vec();
    // A table header is public; every other nonzero chunk is encrypted content.
    let first_hidden = usize::from(matches!(setup.layout, DataLayout::Table(_)));
    run.info.mediator_blind = !mediator.has_seen(&key.to_hex())
        && setup.data.chunks[first_hidden..]
            .iter()
            .filter(|c| **c != Word::ZERO)
            .all(|c| !mediator.strings.contains(&c.to_hex()));

    let phase = *run.trace.last().expect("every run ends in a phase");
    let key_revealed = trade
        .as_ref()
        .is_some_and(|t| run.ledger.trade(t.id).is_some_and(|r| r.key.is_some()));
    let expected_payouts = trade.as_ref().map(|t| {
        let a = run.ledger.agreement(t.id).expect("registered");
        compute_payouts(
            a.terms.price,
            a.terms.seller_commission,
            a.terms.buyer_commission,
        )
    });
    let verdicts = match &trade {
        Some(t) => run
            .ledger
            .verdicts()
            .iter()
            .filter(|v| v.trade == t.id)
            .cloned()
            .collect(),
        None => Vec::new(),
    };
    let deltas = parties
        .iter()
        .zip(before)
        .map(|(p, b)| {
            (
                (*p).clone(),
                run.ledger.balance(p).map_or(0, |m| m.0 as i128) - b,
            )
        })
        .collect();
    Ok(MediatedOutcome {
        phase,
        trace: run.trace,
        trade,
        deltas,
        expected_payouts,
        payouts,
        verdicts,
        key_revealed,
        buyer_phi,
        rho_holds,
        info: run.info,
        notes: run.notes,
    })
}
