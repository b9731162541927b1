//! The trusted arbiter: accounts, escrows, agreements, key reveals,
//! complaints and settlement over a logical clock.
//!
//! Every mutation is an event. Operations validate their preconditions, then
//! append one or more events; [`Ledger::replay`] rebuilds the same state by
//! folding the log through the same `apply` path.

mod events;
mod payouts;
mod types;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

pub use events::{parse_jsonl, to_jsonl, EventBody, LedgerEvent, LogParseError, ReleaseCause};
pub use payouts::{compute_payouts, DepositDisposition, Payouts};
pub use types::{
    AccountId, Agreement, AgreementId, AgreementKind, Commission, Escrow, EscrowId, IdError, Money,
    Party, PriceTerms, RhoRef, Role, Tick, TradeRules, Verdict, VerdictBasis,
    DEFAULT_REVEAL_TIMEOUT,
};

use crate::commitments::{Digest, EncodingKey};
use crate::exchange::{verify_pom, MisbehaviorProof};
use crate::predicate::PredicateCircuit;
use crate::tradegraph::TradeGraph;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("account {0} already open")]
    DuplicateAccount(AccountId),
    #[error("unknown account {0}")]
    UnknownAccount(AccountId),
    #[error("insufficient funds in {account}: spendable {available}, needed {needed}")]
    InsufficientFunds {
        account: AccountId,
        available: Money,
        needed: Money,
    },
    #[error("amount must be positive")]
    ZeroAmount,
    #[error("unknown escrow {0:?}")]
    UnknownEscrow(EscrowId),
    #[error("escrow {0:?} already released")]
    AlreadyReleased(EscrowId),
    #[error("escrow {0:?} is held by a revealed trade")]
    EscrowLocked(EscrowId),
    #[error("unknown agreement {0}")]
    UnknownAgreement(AgreementId),
    #[error("terms hash does not match agreement fields")]
    HashMismatch,
    #[error("invalid agreement: {0}")]
    InvalidAgreement(String),
    #[error("no such trade {0}")]
    NoSuchTrade(AgreementId),
    #[error("agreement {0} is not a trade")]
    NotATrade(AgreementId),
    #[error("trade {0} has no data commitment")]
    NoCommitment(AgreementId),
    #[error("trade {0} already has a data commitment")]
    CommitmentAlreadyPosted(AgreementId),
    #[error("trade {0} is not fully paid")]
    NotPaid(AgreementId),
    #[error("key for trade {0} already revealed")]
    AlreadyRevealed(AgreementId),
    #[error("deposit {offered} below the minimum {required}")]
    DepositTooLow { offered: Money, required: Money },
    #[error("key for trade {0} not revealed")]
    KeyNotRevealed(AgreementId),
    #[error("deadline for trade {trade} passed at tick {deadline}")]
    DeadlineExpired { trade: AgreementId, deadline: Tick },
    #[error("only the buyer of trade {0} may complain")]
    NotBuyer(AgreementId),
    #[error("circuit does not match the agreed predicate commitment")]
    CircuitMismatch,
    #[error("trade {0} is closed")]
    TradeClosed(AgreementId),
    #[error("complaint window for trade {trade} open until tick {until}")]
    WindowStillOpen { trade: AgreementId, until: Tick },
    #[error("trade {0} already settled")]
    AlreadySettled(AgreementId),
    #[error("trade {0} was refunded after an upheld complaint")]
    ComplaintUpheld(AgreementId),
    #[error("trade {trade} may still be revealed until tick {until}")]
    RevealWindowOpen { trade: AgreementId, until: Tick },
    #[error("amount overflows the supply")]
    Overflow,
    #[error("corrupt log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
}

pub type Result<T> = std::result::Result<T, LedgerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TradeStatus {
    Open,
    Settled,
    Refunded,
    Cancelled,
}

/// Ledger-side progress of one trade agreement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TradeRecord {
    pub root: Option<Digest>,
    pub payment: Vec<EscrowId>,
    pub key: Option<EncodingKey>,
    pub reveal_tick: Option<Tick>,
    pub deposit: Option<EscrowId>,
    pub complaints: u32,
    pub status: TradeStatus,
}

impl TradeRecord {
    fn new(root: Option<Digest>) -> Self {
        Self {
            root,
            payment: Vec::new(),
            key: None,
            reveal_tick: None,
            deposit: None,
            complaints: 0,
            status: TradeStatus::Open,
        }
    }

    fn holds(&self, escrow: EscrowId) -> bool {
        self.deposit == Some(escrow) || self.payment.contains(&escrow)
    }
}

/// Everything the log determines. Compared field for field by replay checks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LedgerState {
    pub balances: BTreeMap<AccountId, Money>,
    pub escrows: BTreeMap<EscrowId, Escrow>,
    pub agreements: BTreeMap<AgreementId, Agreement>,
    pub trades: BTreeMap<AgreementId, TradeRecord>,
    pub verdicts: Vec<Verdict>,
    pub genesis_supply: u64,
    pub graph: TradeGraph,
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    state: LedgerState,
    log: Vec<LedgerEvent>,
    clock: Tick,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    // ---- reads ----

    pub fn now(&self) -> Tick {
        self.clock
    }

    pub fn state(&self) -> &LedgerState {
        &self.state
    }

    pub fn log(&self) -> &[LedgerEvent] {
        &self.log
    }

    /// Events with `seq >= from_seq`, in order.
    pub fn read_log(&self, from_seq: u64) -> Vec<LedgerEvent> {
        self.log
            .iter()
            .skip(from_seq.min(self.log.len() as u64) as usize)
            .cloned()
            .collect()
    }

    pub fn balance(&self, id: &AccountId) -> Option<Money> {
        self.state.balances.get(id).copied()
    }

    pub fn escrow(&self, id: EscrowId) -> Option<&Escrow> {
        self.state.escrows.get(&id)
    }

    pub fn agreement(&self, id: AgreementId) -> Option<&Agreement> {
        self.state.agreements.get(&id)
    }

    pub fn trade(&self, id: AgreementId) -> Option<&TradeRecord> {
        self.state.trades.get(&id)
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.state.verdicts
    }

    pub fn graph(&self) -> &TradeGraph {
        &self.state.graph
    }

    /// Sum of all escrows not yet released.
    pub fn live_escrow_total(&self) -> u128 {
        self.state
            .escrows
            .values()
            .filter(|e| !e.released)
            .map(|e| e.amount.0 as u128)
            .sum()
    }

    /// Balances plus live escrows. Equal to the genesis supply at all times.
    pub fn total_supply(&self) -> u128 {
        self.state
            .balances
            .values()
            .map(|m| m.0 as u128)
            .sum::<u128>()
            + self.live_escrow_total()
    }

    pub fn genesis_supply(&self) -> u128 {
        self.state.genesis_supply as u128
    }

    /// Funds escrowed by the buyer and not yet released.
    pub fn paid_amount(&self, trade: AgreementId) -> Money {
        let Some(rec) = self.state.trades.get(&trade) else {
            return Money::ZERO;
        };
        Money(
            rec.payment
                .iter()
                .filter_map(|id| self.state.escrows.get(id))
                .filter(|e| !e.released)
                .map(|e| e.amount.0)
                .sum(),
        )
    }

    pub fn is_paid(&self, trade: AgreementId) -> bool {
        match self.state.agreements.get(&trade) {
            Some(a) if a.kind == AgreementKind::Trade => self.paid_amount(trade) >= a.buyer_total(),
            _ => false,
        }
    }

    /// Last tick at which the key may still be revealed.
    pub fn reveal_deadline(&self, trade: AgreementId) -> Option<Tick> {
        self.agreement(trade)
            .map(|a| a.created_at.saturating_add(a.rules.reveal_timeout))
    }

    /// Last tick at which a complaint is accepted.
    pub fn complaint_deadline(&self, trade: AgreementId) -> Option<Tick> {
        let reveal = self.trade(trade)?.reveal_tick?;
        Some(reveal.saturating_add(self.agreement(trade)?.rules.window))
    }

    // ---- operations ----

    pub fn advance_time(&mut self, dt: Tick) -> Tick {
        self.clock = self.clock.saturating_add(dt);
        self.clock
    }

    pub fn open_account(&mut self, id: AccountId, initial: Money) -> Result<AccountId> {
        if self.state.balances.contains_key(&id) {
            return Err(LedgerError::DuplicateAccount(id));
        }
        if self.state.genesis_supply.checked_add(initial.0).is_none() {
            return Err(LedgerError::Overflow);
        }
        self.commit(EventBody::AccountOpened {
            account: id.clone(),
            initial,
        });
        Ok(id)
    }

    pub fn transfer(&mut self, from: &AccountId, to: &AccountId, amount: Money) -> Result<()> {
        self.require_account(to)?;
        self.require_spendable(from, amount)?;
        self.commit(EventBody::Transferred {
            from: from.clone(),
            to: to.clone(),
            amount,
        });
        Ok(())
    }

    /// Moves `amount` of the owner's spendable balance into escrow under
    /// `contract`. A buyer's escrow on an unrevealed open trade counts as
    /// payment for it.
    pub fn freeze(
        &mut self,
        owner: &AccountId,
        amount: Money,
        contract: AgreementId,
    ) -> Result<EscrowId> {
        if amount == Money::ZERO {
            return Err(LedgerError::ZeroAmount);
        }
        self.require_spendable(owner, amount)?;
        let escrow = self.next_escrow_id();
        self.commit(EventBody::Frozen {
            escrow,
            owner: owner.clone(),
            amount,
            contract,
        });
        Ok(escrow)
    }

    pub fn unfreeze(&mut self, escrow: EscrowId, to: &AccountId) -> Result<()> {
        let e = self
            .state
            .escrows
            .get(&escrow)
            .ok_or(LedgerError::UnknownEscrow(escrow))?;
        if e.released {
            return Err(LedgerError::AlreadyReleased(escrow));
        }
        if let Some(rec) = self.state.trades.get(&e.contract) {
            if rec.holds(escrow) && rec.key.is_some() && rec.status == TradeStatus::Open {
                return Err(LedgerError::EscrowLocked(escrow));
            }
        }
        self.require_account(to)?;
        let amount = e.amount;
        self.commit(EventBody::Unfrozen {
            escrow,
            to: to.clone(),
            amount,
            cause: ReleaseCause::Manual,
        });
        Ok(())
    }

    pub fn register_agreement(&mut self, a: Agreement) -> Result<AgreementId> {
        if a.compute_terms_hash() != a.terms_hash {
            return Err(LedgerError::HashMismatch);
        }
        for p in &a.parties {
            self.require_account(&p.account)?;
        }
        for r in &a.references {
            if !self.state.agreements.contains_key(r) {
                return Err(LedgerError::UnknownAgreement(*r));
            }
        }
        validate_shape(&a)?;
        if a.terms
            .price
            .0
            .checked_add(a.terms.buyer_commission.of(a.terms.price).0)
            .is_none()
        {
            return Err(LedgerError::Overflow);
        }
        let id = AgreementId(self.state.agreements.len() as u64);
        self.commit(EventBody::AgreementRegistered { id, agreement: Box::new(a) });
        Ok(id)
    }

    /// Seller posts the Merkle root of the encoded package.
    pub fn post_commitment(&mut self, trade: AgreementId, root: Digest) -> Result<()> {
        let (_, rec) = self.open_trade(trade)?;
        if rec.root.is_some() {
            return Err(LedgerError::CommitmentAlreadyPosted(trade));
        }
        self.commit(EventBody::CommitmentPosted { trade, root });
        Ok(())
    }

    /// Seller reveals the key and escrows its deposit. Requires full payment
    /// and a posted commitment, before the reveal deadline.
    pub fn reveal_key(
        &mut self,
        trade: AgreementId,
        key: EncodingKey,
        deposit: Money,
    ) -> Result<()> {
        let (a, rec) = self.open_trade(trade)?;
        if rec.key.is_some() {
            return Err(LedgerError::AlreadyRevealed(trade));
        }
        if rec.root.is_none() {
            return Err(LedgerError::NoCommitment(trade));
        }
        let deadline = a.created_at.saturating_add(a.rules.reveal_timeout);
        if self.clock > deadline {
            return Err(LedgerError::DeadlineExpired { trade, deadline });
        }
        if !self.is_paid(trade) {
            return Err(LedgerError::NotPaid(trade));
        }
        if deposit < a.rules.min_deposit {
            return Err(LedgerError::DepositTooLow {
                offered: deposit,
                required: a.rules.min_deposit,
            });
        }
        let seller = a.party(Role::Seller).expect("trades have a seller").clone();
        let deposit_escrow = if deposit > Money::ZERO {
            self.require_spendable(&seller, deposit)?;
            let escrow = self.next_escrow_id();
            self.commit(EventBody::Frozen {
                escrow,
                owner: seller,
                amount: deposit,
                contract: trade,
            });
            Some(escrow)
        } else {
            None
        };
        self.commit(EventBody::KeyRevealed {
            trade,
            key,
            deposit_escrow,
        });
        Ok(())
    }

    /// Arbitrates a buyer's proof of misbehavior against the trade's
    /// commitment and the revealed key. An upheld complaint refunds every
    /// payment escrow and forfeits the seller deposit to the buyer; the
    /// mediator gets nothing. A rejected one costs the buyer the agreed
    /// penalty, if any.
    pub fn submit_complaint(
        &mut self,
        trade: AgreementId,
        complainant: &AccountId,
        circuit: &PredicateCircuit,
        proof: MisbehaviorProof,
    ) -> Result<Verdict> {
        let (a, rec) = self.open_trade(trade)?;
        let (Some(key), Some(reveal), Some(root)) = (rec.key, rec.reveal_tick, rec.root) else {
            return Err(LedgerError::KeyNotRevealed(trade));
        };
        let buyer = a.party(Role::Buyer).expect("trades have a buyer").clone();
        if *complainant != buyer {
            return Err(LedgerError::NotBuyer(trade));
        }
        let deadline = reveal.saturating_add(a.rules.window);
        if self.clock > deadline {
            return Err(LedgerError::DeadlineExpired { trade, deadline });
        }
        if circuit.digest() != a.phi_commitment {
            return Err(LedgerError::CircuitMismatch);
        }
        let valid = verify_pom(&root, circuit, &key, &proof);
        let seller = a.party(Role::Seller).expect("trades have a seller").clone();
        let penalty = a.rules.false_complaint_penalty;
        let live: Vec<(EscrowId, Money, ReleaseCause)> = rec
            .payment
            .iter()
            .map(|id| (*id, ReleaseCause::ComplaintRefund))
            .chain(rec.deposit.map(|id| (id, ReleaseCause::DepositForfeit)))
            .filter_map(|(id, cause)| {
                let e = &self.state.escrows[&id];
                (!e.released).then_some((id, e.amount, cause))
            })
            .collect();

        self.commit(EventBody::ComplaintFiled {
            trade,
            complainant: complainant.clone(),
            proof,
        });
        let verdict = if valid {
            for (escrow, amount, cause) in live {
                self.commit(EventBody::Unfrozen {
                    escrow,
                    to: buyer.clone(),
                    amount,
                    cause,
                });
            }
            Verdict {
                trade,
                guilty: Some(seller),
                basis: VerdictBasis::ValidPom,
            }
        } else {
            let fine = penalty.min(self.balance(&buyer).unwrap_or(Money::ZERO));
            if fine > Money::ZERO {
                self.commit(EventBody::Transferred {
                    from: buyer.clone(),
                    to: seller.clone(),
                    amount: fine,
                });
            }
            Verdict {
                trade,
                guilty: None,
                basis: VerdictBasis::InvalidComplaint,
            }
        };
        self.commit(EventBody::VerdictIssued {
            verdict: verdict.clone(),
        });
        Ok(verdict)
    }

    /// Pays out a revealed trade once its complaint window has closed.
    pub fn settle(&mut self, trade: AgreementId) -> Result<Payouts> {
        let a = self.trade_agreement(trade)?;
        let rec = &self.state.trades[&trade];
        match rec.status {
            TradeStatus::Settled => return Err(LedgerError::AlreadySettled(trade)),
            TradeStatus::Refunded => return Err(LedgerError::ComplaintUpheld(trade)),
            TradeStatus::Cancelled => return Err(LedgerError::TradeClosed(trade)),
            TradeStatus::Open => {}
        }
        let Some(reveal) = rec.reveal_tick else {
            return Err(LedgerError::KeyNotRevealed(trade));
        };
        let until = reveal.saturating_add(a.rules.window);
        if self.clock <= until {
            return Err(LedgerError::WindowStillOpen { trade, until });
        }
        let paid = self.paid_amount(trade);
        let mut payouts = compute_payouts(
            a.terms.price,
            a.terms.seller_commission,
            a.terms.buyer_commission,
        );
        // Payment was checked at reveal and is locked since.
        payouts.refund_to_buyer = Money(paid.0 - a.buyer_total().0);
        payouts.deposit = match rec.deposit.map(|id| &self.state.escrows[&id]) {
            Some(e) if !e.released => DepositDisposition::ReturnedToSeller(e.amount),
            _ => DepositDisposition::None,
        };
        self.commit(EventBody::Settled { trade, payouts });
        Ok(payouts)
    }

    /// Refunds the payment of a trade whose key was never revealed, once the
    /// reveal deadline has passed.
    pub fn cancel_trade(&mut self, trade: AgreementId) -> Result<Money> {
        let (a, rec) = self.open_trade(trade)?;
        if rec.key.is_some() {
            return Err(LedgerError::AlreadyRevealed(trade));
        }
        let until = a.created_at.saturating_add(a.rules.reveal_timeout);
        if self.clock <= until {
            return Err(LedgerError::RevealWindowOpen { trade, until });
        }
        let buyer = a.party(Role::Buyer).expect("trades have a buyer").clone();
        let live: Vec<(EscrowId, Money)> = rec
            .payment
            .iter()
            .map(|id| &self.state.escrows[id])
            .filter(|e| !e.released)
            .map(|e| (e.id, e.amount))
            .collect();
        let mut refunded = Money::ZERO;
        for (escrow, amount) in live {
            refunded = Money(refunded.0 + amount.0);
            self.commit(EventBody::Unfrozen {
                escrow,
                to: buyer.clone(),
                amount,
                cause: ReleaseCause::Cancelled,
            });
        }
        Ok(refunded)
    }

    // ---- replay ----

    /// Rebuilds a ledger from its log. The clock ends at the last event's tick.
    pub fn replay(events: &[LedgerEvent]) -> Result<Self> {
        let mut ledger = Ledger::new();
        for (i, e) in events.iter().enumerate() {
            let corrupt = |reason: String| LedgerError::CorruptLog { seq: e.seq, reason };
            if e.seq != i as u64 {
                return Err(corrupt(format!("expected seq {i}")));
            }
            if e.tick < ledger.clock {
                return Err(corrupt("tick went backwards".into()));
            }
            ledger.clock = e.tick;
            ledger.apply(&e.body).map_err(corrupt)?;
            ledger.log.push(e.clone());
        }
        Ok(ledger)
    }

    // ---- internals ----

    fn commit(&mut self, body: EventBody) {
        if let Err(reason) = self.apply(&body) {
            panic!(
                "validated {} event failed to apply: {reason}",
                body.kind_name()
            );
        }
        self.log.push(LedgerEvent {
            seq: self.log.len() as u64,
            tick: self.clock,
            body,
        });
    }

    /// The only place state changes. Checks what a log could get wrong.
    fn apply(&mut self, body: &EventBody) -> std::result::Result<(), String> {
        let s = &mut self.state;
        match body {
            EventBody::AccountOpened { account, initial } => {
                if s.balances.contains_key(account) {
                    return Err(format!("account {account} opened twice"));
                }
                s.genesis_supply = s
                    .genesis_supply
                    .checked_add(initial.0)
                    .ok_or("genesis supply overflows")?;
                s.balances.insert(account.clone(), *initial);
            }
            EventBody::Transferred { from, to, amount } => {
                if !s.balances.contains_key(to) {
                    return Err(format!("unknown account {to}"));
                }
                debit(s, from, *amount)?;
                credit(s, to, *amount)?;
            }
            EventBody::Frozen {
                escrow,
                owner,
                amount,
                contract,
            } => {
                if *escrow != EscrowId(s.escrows.len() as u64) {
                    return Err(format!("escrow id {} out of sequence", escrow.0));
                }
                if *amount == Money::ZERO {
                    return Err("zero escrow".into());
                }
                debit(s, owner, *amount)?;
                s.escrows.insert(
                    *escrow,
                    Escrow {
                        id: *escrow,
                        owner: owner.clone(),
                        amount: *amount,
                        contract: *contract,
                        released: false,
                    },
                );
                let is_buyer = s
                    .agreements
                    .get(contract)
                    .and_then(|a| a.party(Role::Buyer))
                    == Some(owner);
                if let Some(rec) = s.trades.get_mut(contract) {
                    if is_buyer && rec.key.is_none() && rec.status == TradeStatus::Open {
                        rec.payment.push(*escrow);
                    }
                }
            }
            EventBody::Unfrozen {
                escrow,
                to,
                amount,
                cause,
            } => {
                let e = s
                    .escrows
                    .get_mut(escrow)
                    .ok_or_else(|| format!("unknown escrow {}", escrow.0))?;
                if e.released {
                    return Err(format!("escrow {} released twice", escrow.0));
                }
                if e.amount != *amount {
                    return Err(format!(
                        "escrow {} holds {}, not {}",
                        escrow.0, e.amount, amount
                    ));
                }
                e.released = true;
                let contract = e.contract;
                credit(s, to, *amount)?;
                if *cause == ReleaseCause::Cancelled {
                    if let Some(rec) = s.trades.get_mut(&contract) {
                        rec.status = TradeStatus::Cancelled;
                    }
                }
            }
            EventBody::AgreementRegistered { id, agreement } => {
                if *id != AgreementId(s.agreements.len() as u64) {
                    return Err(format!("agreement id {id} out of sequence"));
                }
                if agreement.compute_terms_hash() != agreement.terms_hash {
                    return Err(format!("agreement {id} terms hash mismatch"));
                }
                if agreement.kind == AgreementKind::Trade {
                    s.trades.insert(*id, TradeRecord::new(agreement.data_root));
                }
                s.agreements.insert(*id, (**agreement).clone());
            }
            EventBody::CommitmentPosted { trade, root } => {
                let rec = s
                    .trades
                    .get_mut(trade)
                    .ok_or_else(|| format!("unknown trade {trade}"))?;
                if rec.root.is_some() {
                    return Err(format!("second commitment for {trade}"));
                }
                rec.root = Some(*root);
            }
            EventBody::KeyRevealed {
                trade,
                key,
                deposit_escrow,
            } => {
                if let Some(d) = deposit_escrow {
                    if !s
                        .escrows
                        .get(d)
                        .is_some_and(|e| e.contract == *trade && !e.released)
                    {
                        return Err(format!("deposit escrow {} not live for {trade}", d.0));
                    }
                }
                let rec = s
                    .trades
                    .get_mut(trade)
                    .ok_or_else(|| format!("unknown trade {trade}"))?;
                if rec.key.is_some() {
                    return Err(format!("second key reveal for {trade}"));
                }
                rec.key = Some(*key);
                rec.reveal_tick = Some(self.clock);
                rec.deposit = *deposit_escrow;
            }
            EventBody::ComplaintFiled { trade, .. } => {
                let rec = s
                    .trades
                    .get_mut(trade)
                    .ok_or_else(|| format!("unknown trade {trade}"))?;
                rec.complaints += 1;
            }
            EventBody::VerdictIssued { verdict } => {
                let rec = s
                    .trades
                    .get_mut(&verdict.trade)
                    .ok_or_else(|| format!("unknown trade {}", verdict.trade))?;
                if verdict.basis == VerdictBasis::ValidPom {
                    rec.status = TradeStatus::Refunded;
                }
                s.verdicts.push(verdict.clone());
            }
            EventBody::Settled { trade, payouts } => {
                apply_settlement(s, *trade, payouts, self.clock)?
            }
        }
        Ok(())
    }

    fn next_escrow_id(&self) -> EscrowId {
        EscrowId(self.state.escrows.len() as u64)
    }

    fn require_account(&self, id: &AccountId) -> Result<()> {
        if self.state.balances.contains_key(id) {
            Ok(())
        } else {
            Err(LedgerError::UnknownAccount(id.clone()))
        }
    }

    fn require_spendable(&self, id: &AccountId, amount: Money) -> Result<()> {
        let available = self
            .balance(id)
            .ok_or_else(|| LedgerError::UnknownAccount(id.clone()))?;
        if available < amount {
            return Err(LedgerError::InsufficientFunds {
                account: id.clone(),
                available,
                needed: amount,
            });
        }
        Ok(())
    }

    fn trade_agreement(&self, trade: AgreementId) -> Result<Agreement> {
        let a = self
            .state
            .agreements
            .get(&trade)
            .ok_or(LedgerError::NoSuchTrade(trade))?;
        if a.kind != AgreementKind::Trade {
            return Err(LedgerError::NotATrade(trade));
        }
        Ok(a.clone())
    }

    fn open_trade(&self, trade: AgreementId) -> Result<(Agreement, TradeRecord)> {
        let a = self.trade_agreement(trade)?;
        let rec = self.state.trades[&trade].clone();
        if rec.status != TradeStatus::Open {
            return Err(LedgerError::TradeClosed(trade));
        }
        Ok((a, rec))
    }
}

fn debit(s: &mut LedgerState, id: &AccountId, amount: Money) -> std::result::Result<(), String> {
    let bal = s
        .balances
        .get_mut(id)
        .ok_or_else(|| format!("unknown account {id}"))?;
    *bal = bal
        .checked_sub(amount)
        .ok_or_else(|| format!("{id} overdrawn"))?;
    Ok(())
}

fn credit(s: &mut LedgerState, id: &AccountId, amount: Money) -> std::result::Result<(), String> {
    let bal = s
        .balances
        .get_mut(id)
        .ok_or_else(|| format!("unknown account {id}"))?;
    *bal = bal.checked_add(amount).ok_or("balance overflow")?;
    Ok(())
}

fn apply_settlement(
    s: &mut LedgerState,
    trade: AgreementId,
    p: &Payouts,
    tick: Tick,
) -> std::result::Result<(), String> {
    let a = s
        .agreements
        .get(&trade)
        .ok_or_else(|| format!("unknown trade {trade}"))?
        .clone();
    let rec = s
        .trades
        .get(&trade)
        .ok_or_else(|| format!("unknown trade {trade}"))?
        .clone();
    if rec.status != TradeStatus::Open || rec.key.is_none() {
        return Err(format!("trade {trade} cannot settle"));
    }
    let root = rec
        .root
        .ok_or_else(|| format!("trade {trade} has no commitment"))?;
    let live_payment: Vec<EscrowId> = rec
        .payment
        .iter()
        .copied()
        .filter(|id| !s.escrows[id].released)
        .collect();
    let paid: u128 = live_payment
        .iter()
        .map(|id| s.escrows[id].amount.0 as u128)
        .sum();
    if paid != p.buyer_escrow_outflow() {
        return Err(format!(
            "payouts for {trade} do not drain the payment escrow"
        ));
    }
    let deposit = rec.deposit.filter(|id| !s.escrows[id].released);
    match (deposit, p.deposit) {
        (None, DepositDisposition::None) => {}
        (Some(id), DepositDisposition::ReturnedToSeller(m)) if s.escrows[&id].amount == m => {}
        _ => {
            return Err(format!(
                "deposit disposition for {trade} does not match escrow"
            ))
        }
    }
    let seller = a.party(Role::Seller).ok_or("trade without seller")?.clone();
    let buyer = a.party(Role::Buyer).ok_or("trade without buyer")?.clone();
    match a.party(Role::Mediator) {
        Some(m) => credit(s, m, p.to_mediator)?,
        None if p.to_mediator == Money::ZERO => {}
        None => return Err(format!("commission paid on unmediated trade {trade}")),
    }
    for id in live_payment.iter().chain(deposit.iter()) {
        s.escrows.get_mut(id).expect("checked above").released = true;
    }
    credit(s, &seller, p.to_seller)?;
    credit(s, &buyer, p.refund_to_buyer)?;
    if let DepositDisposition::ReturnedToSeller(m) = p.deposit {
        credit(s, &seller, m)?;
    }
    s.trades.get_mut(&trade).expect("checked above").status = TradeStatus::Settled;
    s.graph.record_settlement(trade, &a, root, tick);
    Ok(())
}

/// Structural rules per agreement kind.
fn validate_shape(a: &Agreement) -> Result<()> {
    let bad = |m: &str| Err(LedgerError::InvalidAgreement(m.into()));
    let count = |r: Role| a.parties.iter().filter(|p| p.role == r).count();
    let (s, m, b) = (
        count(Role::Seller),
        count(Role::Mediator),
        count(Role::Buyer),
    );
    let mut accounts: Vec<&AccountId> = a.parties.iter().map(|p| &p.account).collect();
    accounts.sort();
    accounts.dedup();
    if accounts.len() != a.parties.len() {
        return bad("parties must be distinct accounts");
    }
    match a.kind {
        AgreementKind::Listing if (s, m, b) != (1, 1, 0) => {
            bad("a listing names one seller and one mediator")
        }
        AgreementKind::Request if (s, m, b) != (0, 1, 1) => {
            bad("a request names one buyer and one mediator")
        }
        AgreementKind::Trade if s != 1 || b != 1 || m > 1 => {
            bad("a trade names one seller, one buyer and at most one mediator")
        }
        AgreementKind::Trade
            if m == 0
                && (a.terms.seller_commission != Commission::ZERO
                    || a.terms.buyer_commission != Commission::ZERO) =>
        {
            bad("commissions need a mediator")
        }
        _ if a.terms.price == Money::ZERO => bad("price must be positive"),
        _ => Ok(()),
    }
}
