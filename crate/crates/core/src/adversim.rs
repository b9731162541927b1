//! Scripted adversaries, scenario files and fairness checks.
//!
//! A [`Scenario`] fixes genesis balances, the data, the predicates, prices and
//! one [`Behavior`] per role. [`run_scenario`] drives the mediated protocol
//! and returns a [`TranscriptReport`]; [`assert_fairness`] checks it from the
//! point of view of each honest role.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commitments::hash;
use crate::exchange::DataBlob;
use crate::hexbytes::hex_vec;
use crate::ledger::{
    AccountId, AgreementId, Commission, EventBody, Ledger, LedgerEvent, Money, Payouts, Role, Tick,
    Verdict, VerdictBasis,
};
use crate::mediated::{
    run_mediated, trace_in_order, Behaviors, DepositRule, InfoFlow, MarketRules, MarketSetup,
    MediatedPhase, Regulation,
};
use crate::predicate::{
    compile_spec, medical_schema, DataLayout, PredicateSpec, TableLayout, Word,
};

/// One role's script.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Honest,
    /// Walk away before committing funds.
    Abort,
    /// Seller and buyer deal outside the system.
    OffChain,
    /// Ship random data with a transcript claiming the predicate holds.
    SellerJunkData,
    /// Attach a regulation predicate other than the agreed one.
    SellerWrongRho,
    MediatorSkipPhiCheck,
    /// Flip a ciphertext byte before forwarding.
    MediatorTamperPackage,
    /// Escrow half of what is owed.
    BuyerUnderpay,
    /// Pay without checking, then complain regardless.
    BuyerFalseComplaint,
}

impl Behavior {
    pub fn allowed_for(self, role: Role) -> bool {
        use Behavior::*;
        match self {
            Honest | Abort => true,
            OffChain => role != Role::Mediator,
            SellerJunkData | SellerWrongRho => role == Role::Seller,
            MediatorSkipPhiCheck | MediatorTamperPackage => role == Role::Mediator,
            BuyerUnderpay | BuyerFalseComplaint => role == Role::Buyer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub role: Role,
    pub behavior: Behavior,
}

impl Behaviors {
    pub fn strategies(&self) -> [Strategy; 3] {
        [
            Strategy {
                role: Role::Seller,
                behavior: self.seller,
            },
            Strategy {
                role: Role::Mediator,
                behavior: self.mediator,
            },
            Strategy {
                role: Role::Buyer,
                behavior: self.buyer,
            },
        ]
    }

    pub fn from_strategies(strategies: &[Strategy]) -> Self {
        let mut b = Behaviors::HONEST;
        for s in strategies {
            match s.role {
                Role::Seller => b.seller = s.behavior,
                Role::Mediator => b.mediator = s.behavior,
                Role::Buyer => b.buyer = s.behavior,
            }
        }
        b
    }

    pub fn get(&self, role: Role) -> Behavior {
        match role {
            Role::Seller => self.seller,
            Role::Mediator => self.mediator,
            Role::Buyer => self.buyer,
        }
    }
}

impl Default for Behaviors {
    fn default() -> Self {
        Behaviors::HONEST
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genesis {
    pub id: AccountId,
    pub balance: Money,
}

/// What the seller is selling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Pharmacy records; `id` and `class_of_disease` are in the clear.
    Medical { rows: u64 },
    /// Random chunks, each containing `pattern` somewhere.
    Chunks {
        count: u32,
        #[serde(with = "hex_vec")]
        pattern: Vec<u8>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfferTerms {
    pub ask: Money,
    pub commission_bps: Commission,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTerms {
    pub budget: Money,
    pub commission_bps: Commission,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub accounts: Vec<Genesis>,
    pub seller: AccountId,
    pub mediator: AccountId,
    pub buyer: AccountId,
    pub data: DataSpec,
    /// The buyer's predicate.
    pub predicate: PredicateSpec,
    pub rho: Regulation,
    pub offer: OfferTerms,
    pub request: RequestTerms,
    /// Complaint window in ticks.
    pub window: Tick,
    #[serde(default)]
    pub deposit: DepositRule,
    #[serde(default)]
    pub reveal_timeout: Option<Tick>,
    /// Paid by the buyer to the seller when a complaint is rejected.
    #[serde(default)]
    pub false_complaint_penalty: Money,
    #[serde(default)]
    pub strategies: Behaviors,
}

pub const MEDICAL_CLASSES: [&str; 3] = ["Diabetes", "Heart Ailments", "Psychological Issues"];
const OTHER_CLASSES: [&str; 3] = ["Oncology", "Orthopedics", "Dermatology"];
const BLOOD_GROUPS: [&str; 8] = ["A+", "A-", "B+", "B-", "AB+", "AB-", "O+", "O-"];

/// The buyer's predicate from the pharmacy example.
pub fn medical_predicate(min_rows: u64) -> PredicateSpec {
    PredicateSpec::FieldMembership {
        column: "class_of_disease".into(),
        allowed: MEDICAL_CLASSES.iter().map(|s| s.to_string()).collect(),
    }
    .and(PredicateSpec::RowCountAtLeast { min_rows })
}

impl Scenario {
    /// Pharmacy (seller), marketplace (mediator) and research lab (buyer)
    /// trading `rows` records at 100 units with 5% and 10% commissions.
    pub fn medical(rows: u64, seed: u64) -> Self {
        let acct = |s: &str| AccountId::new(s).expect("static id");
        Scenario {
            name: "medical-records".into(),
            seed,
            accounts: vec![
                Genesis {
                    id: acct("pharmacy"),
                    balance: Money(1_000),
                },
                Genesis {
                    id: acct("marketplace"),
                    balance: Money(0),
                },
                Genesis {
                    id: acct("research-lab"),
                    balance: Money(1_000),
                },
            ],
            seller: acct("pharmacy"),
            mediator: acct("marketplace"),
            buyer: acct("research-lab"),
            data: DataSpec::Medical { rows },
            predicate: medical_predicate(rows),
            rho: Regulation {
                text: "records limited to diabetes, heart and psychological classes".into(),
                predicate: Some(PredicateSpec::FieldMembership {
                    column: "class_of_disease".into(),
                    allowed: MEDICAL_CLASSES.iter().map(|s| s.to_string()).collect(),
                }),
            },
            offer: OfferTerms {
                ask: Money(100),
                commission_bps: Commission::from_bps(500).expect("valid"),
            },
            request: RequestTerms {
                budget: Money(100),
                commission_bps: Commission::from_bps(1_000).expect("valid"),
            },
            window: Tick(5),
            deposit: DepositRule::Tenth,
            reveal_timeout: None,
            false_complaint_penalty: Money::ZERO,
            strategies: Behaviors::HONEST,
        }
    }

    pub fn rules(&self) -> MarketRules {
        let mut r = MarketRules::new(self.window);
        r.deposit = self.deposit;
        r.false_complaint_penalty = self.false_complaint_penalty;
        if let Some(t) = self.reveal_timeout {
            r.reveal_timeout = t;
        }
        r
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::MalformedScenario(m));
        let ids: BTreeSet<&AccountId> = self.accounts.iter().map(|g| &g.id).collect();
        if ids.len() != self.accounts.len() {
            return bad("duplicate account".into());
        }
        let roles = [
            (Role::Seller, &self.seller),
            (Role::Mediator, &self.mediator),
            (Role::Buyer, &self.buyer),
        ];
        for (role, id) in roles {
            if !ids.contains(id) {
                return bad(format!("{role} account {id} is not funded in accounts"));
            }
            let b = self.strategies.get(role);
            if !b.allowed_for(role) {
                return bad(format!("behavior {b:?} is not available to the {role}"));
            }
        }
        if self.seller == self.mediator || self.seller == self.buyer || self.mediator == self.buyer
        {
            return bad("seller, mediator and buyer must be distinct".into());
        }
        if (self.strategies.seller == Behavior::OffChain)
            != (self.strategies.buyer == Behavior::OffChain)
        {
            return bad("off_chain needs both seller and buyer".into());
        }
        let layout = self.layout();
        compile_spec(&self.predicate, &layout)
            .map_err(|e| ScenarioError::MalformedScenario(format!("predicate: {e}")))?;
        self.rho
            .compile(&layout)
            .map_err(|e| ScenarioError::MalformedScenario(format!("rho: {e}")))?;
        if let DataSpec::Chunks { count: 0, .. } = self.data {
            return bad("data needs at least one chunk".into());
        }
        if let DataSpec::Chunks { pattern, .. } = &self.data {
            if pattern.len() > 32 {
                return bad("pattern longer than a chunk".into());
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> DataLayout {
        match &self.data {
            DataSpec::Medical { rows } => DataLayout::Table(TableLayout {
                schema: medical_schema(),
                rows: *rows,
            }),
            DataSpec::Chunks { count, .. } => DataLayout::Chunks { count: *count },
        }
    }
}

/// Generates the seller's data for `spec`.
pub fn generate_data<R: Rng + ?Sized>(spec: &DataSpec, rng: &mut R) -> DataBlob {
    match spec {
        DataSpec::Medical { rows } => {
            let schema = medical_schema();
            let table: Vec<Vec<Vec<u8>>> = (0..*rows)
                .map(|i| {
                    vec![
                        (i as u32 + 1).to_be_bytes().to_vec(),
                        vec![rng.gen_range(18..90)],
                        BLOOD_GROUPS
                            .choose(rng)
                            .expect("nonempty")
                            .as_bytes()
                            .to_vec(),
                        MEDICAL_CLASSES
                            .choose(rng)
                            .expect("nonempty")
                            .as_bytes()
                            .to_vec(),
                        format!("D{:03}", rng.gen_range(0..1000)).into_bytes(),
                    ]
                })
                .collect();
            let chunks = schema
                .encode_table(&table)
                .expect("generated rows fit the schema");
            DataBlob::with_table(
                chunks,
                TableLayout {
                    schema,
                    rows: *rows,
                },
            )
            .expect("header chunk present")
        }
        DataSpec::Chunks { count, pattern } => {
            let chunks = (0..*count)
                .map(|_| {
                    let mut w = Word(rng.gen());
                    let at = rng.gen_range(0..=32 - pattern.len());
                    w.0[at..at + pattern.len()].copy_from_slice(pattern);
                    w
                })
                .collect();
            DataBlob::new(chunks).expect("count checked positive")
        }
    }
}

/// Rows whose class falls outside the allowed set, for negative tests.
pub fn medical_rows_with_other_class<R: Rng + ?Sized>(rows: u64, rng: &mut R) -> DataBlob {
    let mut blob = generate_data(&DataSpec::Medical { rows }, rng);
    let schema = medical_schema();
    let col = schema
        .column("class_of_disease")
        .expect("schema column")
        .clone();
    if let Some(row) = blob.chunks.get_mut(1) {
        let other = OTHER_CLASSES.choose(rng).expect("nonempty").as_bytes();
        let field = &mut row.0[col.offset as usize..(col.offset + col.width) as usize];
        field.fill(0);
        field[..other.len()].copy_from_slice(other);
    }
    blob
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("malformed scenario: {0}")]
    MalformedScenario(String),
    #[error("run failed: {0}")]
    Run(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAccounts {
    pub seller: AccountId,
    pub mediator: AccountId,
    pub buyer: AccountId,
}

impl RoleAccounts {
    pub fn get(&self, role: Role) -> &AccountId {
        match role {
            Role::Seller => &self.seller,
            Role::Mediator => &self.mediator,
            Role::Buyer => &self.buyer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranscriptReport {
    pub scenario: String,
    pub seed: u64,
    pub roles: RoleAccounts,
    pub strategies: [Strategy; 3],
    pub phase: MediatedPhase,
    pub trace: Vec<MediatedPhase>,
    pub trade: Option<AgreementId>,
    pub price: Option<Money>,
    pub expected_payouts: Option<Payouts>,
    pub payouts: Option<Payouts>,
    /// Net balance change of every genesis account.
    pub deltas: BTreeMap<AccountId, i128>,
    /// Funds still in escrow at the end of the run.
    pub locked: u128,
    pub key_revealed: bool,
    pub buyer_phi: Option<bool>,
    pub rho_holds: Option<bool>,
    pub verdicts: Vec<Verdict>,
    /// Fines the buyer paid the seller for rejected complaints.
    pub penalties: Money,
    pub info: InfoFlow,
    pub notes: Vec<String>,
    pub event_count: usize,
    #[serde(skip)]
    pub events: Vec<LedgerEvent>,
}

impl TranscriptReport {
    pub fn delta(&self, role: Role) -> i128 {
        self.deltas.get(self.roles.get(role)).copied().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

pub fn run_scenario(s: &Scenario) -> Result<TranscriptReport, ScenarioError> {
    s.validate()?;
    let mut ledger = Ledger::new();
    for g in &s.accounts {
        ledger
            .open_account(g.id.clone(), g.balance)
            .map_err(|e| ScenarioError::MalformedScenario(e.to_string()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let setup = MarketSetup {
        seller: s.seller.clone(),
        mediator: s.mediator.clone(),
        buyer: s.buyer.clone(),
        data: generate_data(&s.data, &mut rng),
        layout: s.layout(),
        phi: s.predicate.clone(),
        rho: s.rho.clone(),
        ask: s.offer.ask,
        seller_commission: s.offer.commission_bps,
        budget: s.request.budget,
        buyer_commission: s.request.commission_bps,
        rules: s.rules(),
    };
    let out = run_mediated(&setup, s.strategies, &mut ledger, &mut rng)
        .map_err(|e| ScenarioError::Run(e.to_string()))?;

    let deltas = s
        .accounts
        .iter()
        .map(|g| {
            (
                g.id.clone(),
                ledger.balance(&g.id).map_or(0, |m| m.0 as i128) - g.balance.0 as i128,
            )
        })
        .collect();
    let mut verdicts = out.verdicts.clone();
    if let (Some(t), MediatedPhase::Settled) = (&out.trade, out.phase) {
        if verdicts.is_empty() {
            verdicts.push(Verdict {
                trade: t.id,
                guilty: None,
                basis: VerdictBasis::NoComplaint,
            });
        }
    }
    let events = ledger.read_log(0);
    let penalties = events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::Transferred { from, to, amount } if *from == s.buyer && *to == s.seller => {
                Some(amount.0)
            }
            _ => None,
        })
        .sum();
    Ok(TranscriptReport {
        scenario: s.name.clone(),
        seed: s.seed,
        roles: RoleAccounts {
            seller: s.seller.clone(),
            mediator: s.mediator.clone(),
            buyer: s.buyer.clone(),
        },
        strategies: s.strategies.strategies(),
        phase: out.phase,
        trace: out.trace,
        trade: out.trade.as_ref().map(|t| t.id),
        price: out.trade.as_ref().map(|t| t.price),
        expected_payouts: out.expected_payouts,
        payouts: out.payouts,
        deltas,
        locked: ledger.live_escrow_total(),
        key_revealed: out.key_revealed,
        buyer_phi: out.buyer_phi,
        rho_holds: out.rho_holds,
        verdicts,
        penalties: Money(penalties),
        info: out.info,
        notes: out.notes,
        event_count: events.len(),
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FairnessCheck {
    /// `seller`, `mediator`, `buyer` or `protocol`.
    pub subject: String,
    pub property: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FairnessVerdict {
    pub checks: Vec<FairnessCheck>,
}

impl FairnessVerdict {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&FairnessCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Per-trade event order: registration, payment, reveal, complaints and
/// verdicts, settlement. Violations are returned as messages.
pub fn log_order_violations(events: &[LedgerEvent]) -> Vec<String> {
    #[derive(Default)]
    struct Seen {
        registered: bool,
        buyer: Option<AccountId>,
        paid: bool,
        revealed: bool,
        complaints: u32,
        verdicts: u32,
        closed: bool,
    }
    let mut trades: BTreeMap<AgreementId, Seen> = BTreeMap::new();
    let mut out = Vec::new();
    for e in events {
        let mut fail = |m: String| out.push(format!("seq {}: {m}", e.seq));
        match &e.body {
            EventBody::AgreementRegistered { id, agreement } => {
                let s = trades.entry(*id).or_default();
                s.registered = true;
                s.buyer = agreement.party(Role::Buyer).cloned();
            }
            EventBody::Frozen {
                owner, contract, ..
            } => {
                if let Some(s) = trades.get_mut(contract) {
                    if s.buyer.as_ref() == Some(owner) && !s.revealed {
                        s.paid = true;
                    }
                }
            }
            EventBody::KeyRevealed { trade, .. } => {
                let s = trades.entry(*trade).or_default();
                if !s.registered || !s.paid || s.revealed || s.closed {
                    fail(format!("key for {trade} revealed out of order"));
                }
                s.revealed = true;
            }
            EventBody::ComplaintFiled { trade, .. } => {
                let s = trades.entry(*trade).or_default();
                if !s.revealed || s.closed {
                    fail(format!("complaint on {trade} out of order"));
                }
                s.complaints += 1;
            }
            EventBody::VerdictIssued { verdict } => {
                let s = trades.entry(verdict.trade).or_default();
                s.verdicts += 1;
                if s.verdicts > s.complaints {
                    fail(format!("verdict on {} without complaint", verdict.trade));
                }
                if verdict.basis == VerdictBasis::ValidPom {
                    s.closed = true;
                }
            }
            EventBody::Settled { trade, .. } => {
                let s = trades.entry(*trade).or_default();
                if !s.revealed || s.closed || s.verdicts != s.complaints {
                    fail(format!("settlement of {trade} out of order"));
                }
                s.closed = true;
            }
            _ => {}
        }
    }
    out
}

/// Checks a report from the position of every role in `honest`, plus the
/// protocol-wide invariants that hold whoever cheats.
pub fn assert_fairness(r: &TranscriptReport, honest: &BTreeSet<Role>) -> FairnessVerdict {
    let mut checks = Vec::new();
    let mut check = |subject: &str, property: &'static str, passed: bool, detail: String| {
        checks.push(FairnessCheck {
            subject: subject.into(),
            property,
            passed,
            detail,
        });
    };
    let expected = r.expected_payouts;
    let settled = r.phase == MediatedPhase::Settled;

    if honest.contains(&Role::Buyer) {
        let d = r.delta(Role::Buyer);
        let good_data = r.buyer_phi == Some(true);
        check(
            "buyer",
            "holds data satisfying the predicate, or lost nothing",
            good_data != (d >= 0),
            format!("delta {d}, predicate on received data {:?}", r.buyer_phi),
        );
    }
    if honest.contains(&Role::Seller) {
        let d = r.delta(Role::Seller);
        let fines = r.penalties.0 as i128;
        let paid = expected
            .is_some_and(|p| r.key_revealed && settled && d == p.to_seller.0 as i128 + fines);
        let kept_key = !r.key_revealed && d == 0;
        check(
            "seller",
            "paid in full plus any fines, or key never revealed and deposit kept",
            paid != kept_key,
            format!(
                "delta {d}, fines {fines}, key revealed {}, phase {:?}",
                r.key_revealed, r.phase
            ),
        );
    }
    if honest.contains(&Role::Mediator) {
        let d = r.delta(Role::Mediator);
        let owed = if settled {
            expected.map_or(0, |p| p.to_mediator.0 as i128)
        } else {
            0
        };
        check(
            "mediator",
            "receives the full commission whenever the trade settles",
            d == owed,
            format!("delta {d}, owed {owed}"),
        );
    }
    check(
        "mediator",
        "never sees the key or encrypted plaintext",
        r.info.mediator_is_blind(),
        format!("{:?}", r.info.mediator),
    );
    let total: i128 = r.deltas.values().sum();
    check(
        "protocol",
        "balance changes plus funds still escrowed sum to zero",
        total + r.locked as i128 == 0,
        format!("sum of deltas {total}, locked {}", r.locked),
    );
    check(
        "protocol",
        "phases follow the protocol order",
        trace_in_order(&r.trace),
        format!("{:?}", r.trace),
    );
    let order = log_order_violations(&r.events);
    check(
        "protocol",
        "ledger events follow the protocol order",
        order.is_empty(),
        order.join("; "),
    );
    FairnessVerdict { checks }
}

/// One entry of the collusion suite.
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub id: &'static str,
    pub honest: BTreeSet<Role>,
    pub scenario: Scenario,
}

/// The honest baseline and the six adversary cases, each a copy of `base`
/// with different strategies and a seed derived from the case id.
pub fn enumerate_collusion_suite(base: &Scenario) -> Vec<SuiteCase> {
    use Behavior::*;
    use Role::*;
    let cases: [(&'static str, Behaviors, &[Role]); 7] = [
        ("honest", Behaviors::HONEST, &[Seller, Mediator, Buyer]),
        (
            "malicious-seller",
            Behaviors {
                seller: SellerJunkData,
                ..Behaviors::HONEST
            },
            &[Mediator, Buyer],
        ),
        (
            "malicious-mediator",
            Behaviors {
                mediator: MediatorTamperPackage,
                ..Behaviors::HONEST
            },
            &[Seller, Buyer],
        ),
        (
            "malicious-buyer",
            Behaviors {
                buyer: BuyerUnderpay,
                ..Behaviors::HONEST
            },
            &[Seller, Mediator],
        ),
        (
            "seller-mediator",
            Behaviors {
                seller: SellerJunkData,
                mediator: MediatorSkipPhiCheck,
                ..Behaviors::HONEST
            },
            &[Buyer],
        ),
        (
            "seller-buyer-offchain",
            Behaviors {
                seller: OffChain,
                buyer: OffChain,
                ..Behaviors::HONEST
            },
            &[Mediator],
        ),
        (
            "mediator-buyer",
            Behaviors {
                mediator: MediatorTamperPackage,
                buyer: BuyerFalseComplaint,
                ..Behaviors::HONEST
            },
            &[Seller],
        ),
    ];
    cases
        .into_iter()
        .map(|(id, strategies, honest)| {
            let digest = hash(format!("{}/{id}", base.seed).as_bytes());
            let seed = u64::from_be_bytes(digest.0[..8].try_into().expect("8 bytes"));
            let scenario = Scenario {
                name: format!("{}/{id}", base.name),
                seed,
                strategies,
                ..base.clone()
            };
            SuiteCase {
                id,
                honest: honest.iter().copied().collect(),
                scenario,
            }
        })
        .collect()
}
