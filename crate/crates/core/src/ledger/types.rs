use std::fmt;

use serde::{Deserialize, Serialize};

use crate::commitments::{hash, Digest};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum IdError {
    #[error("account id must be 1..=64 bytes, got {0}")]
    BadAccountId(usize),
    #[error("commission {0} bps exceeds 10000")]
    CommissionTooHigh(u32),
}

/// A participant. Nonempty, at most 64 bytes.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AccountId(String);

impl AccountId {
    pub fn new(id: impl Into<String>) -> Result<Self, IdError> {
        let id = id.into();
        if id.is_empty() || id.len() > 64 {
            return Err(IdError::BadAccountId(id.len()));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for AccountId {
    type Error = IdError;
    fn try_from(s: String) -> Result<Self, IdError> {
        Self::new(s)
    }
}

impl From<AccountId> for String {
    fn from(a: AccountId) -> String {
        a.0
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Integer micro-units of currency.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Money(pub u64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn checked_add(self, other: Money) -> Option<Money> {
        self.0.checked_add(other.0).map(Money)
    }

    pub fn checked_sub(self, other: Money) -> Option<Money> {
        self.0.checked_sub(other.0).map(Money)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Basis points, at most 10000.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(try_from = "u32", into = "u32")]
pub struct Commission(u16);

impl Commission {
    pub const ZERO: Commission = Commission(0);

    pub fn from_bps(bps: u32) -> Result<Self, IdError> {
        if bps > 10_000 {
            return Err(IdError::CommissionTooHigh(bps));
        }
        Ok(Self(bps as u16))
    }

    pub fn bps(self) -> u32 {
        self.0 as u32
    }

    /// `floor(bps * amount / 10^4)`.
    pub fn of(self, amount: Money) -> Money {
        Money((self.0 as u128 * amount.0 as u128 / 10_000) as u64)
    }
}

impl TryFrom<u32> for Commission {
    type Error = IdError;
    fn try_from(bps: u32) -> Result<Self, IdError> {
        Self::from_bps(bps)
    }
}

impl From<Commission> for u32 {
    fn from(c: Commission) -> u32 {
        c.bps()
    }
}

/// Logical time.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Tick(pub u64);

impl Tick {
    pub fn saturating_add(self, dt: Tick) -> Tick {
        Tick(self.0.saturating_add(dt.0))
    }
}

impl fmt::Display for Tick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgreementId(pub u64);

impl fmt::Display for AgreementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EscrowId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Escrow {
    pub id: EscrowId,
    pub owner: AccountId,
    pub amount: Money,
    pub contract: AgreementId,
    pub released: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Seller,
    Mediator,
    Buyer,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Seller => "seller",
            Role::Mediator => "mediator",
            Role::Buyer => "buyer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Party {
    pub role: Role,
    pub account: AccountId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementKind {
    /// Seller and mediator: an offer of committed data at an ask price.
    Listing,
    /// Buyer and mediator: a predicate and a budget.
    Request,
    /// The deal itself; its id is the trade id.
    Trade,
}

/// The regulation predicate bound to a trade: circuit digest plus its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhoRef {
    pub digest: Digest,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceTerms {
    pub price: Money,
    pub seller_commission: Commission,
    pub buyer_commission: Commission,
}

/// Deadlines and the deposit floor, all relative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradeRules {
    /// Complaint window after the key reveal.
    pub window: Tick,
    pub min_deposit: Money,
    /// The key must be revealed by `created_at + reveal_timeout`; after that an
    /// unrevealed trade may be cancelled.
    pub reveal_timeout: Tick,
    /// Taken from the buyer's spendable balance, up to what it holds, and
    /// paid to the seller when a complaint is rejected.
    #[serde(default)]
    pub false_complaint_penalty: Money,
}

/// Ticks a seller has, from trade creation, to reveal the key.
pub const DEFAULT_REVEAL_TIMEOUT: Tick = Tick(16);

impl TradeRules {
    /// Window `t`, deposit `floor(p/10)`, the default reveal timeout and no
    /// penalty for rejected complaints.
    pub fn standard(price: Money, window: Tick) -> Self {
        Self {
            window,
            min_deposit: Money(price.0 / 10),
            reveal_timeout: DEFAULT_REVEAL_TIMEOUT,
            false_complaint_penalty: Money::ZERO,
        }
    }
}

/// A registered deal record. Immutable once on the ledger; `terms_hash`
/// covers every other field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agreement {
    pub kind: AgreementKind,
    pub parties: Vec<Party>,
    pub phi_commitment: Digest,
    pub rho: RhoRef,
    pub terms: PriceTerms,
    pub rules: TradeRules,
    pub data_root: Option<Digest>,
    pub references: Vec<AgreementId>,
    pub created_at: Tick,
    pub terms_hash: Digest,
}

#[derive(Serialize)]
struct AgreementBody<'a> {
    kind: AgreementKind,
    parties: &'a [Party],
    phi_commitment: &'a Digest,
    rho: &'a RhoRef,
    terms: &'a PriceTerms,
    rules: &'a TradeRules,
    data_root: &'a Option<Digest>,
    references: &'a [AgreementId],
    created_at: Tick,
}

impl Agreement {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: AgreementKind,
        parties: Vec<Party>,
        phi_commitment: Digest,
        rho: RhoRef,
        terms: PriceTerms,
        rules: TradeRules,
        data_root: Option<Digest>,
        references: Vec<AgreementId>,
        created_at: Tick,
    ) -> Self {
        let mut a = Self {
            kind,
            parties,
            phi_commitment,
            rho,
            terms,
            rules,
            data_root,
            references,
            created_at,
            terms_hash: Digest::default(),
        };
        a.terms_hash = a.compute_terms_hash();
        a
    }

    pub fn compute_terms_hash(&self) -> Digest {
        let body = AgreementBody {
            kind: self.kind,
            parties: &self.parties,
            phi_commitment: &self.phi_commitment,
            rho: &self.rho,
            terms: &self.terms,
            rules: &self.rules,
            data_root: &self.data_root,
            references: &self.references,
            created_at: self.created_at,
        };
        let json = serde_json::to_string(&body).expect("agreement serializes");
        hash(json.as_bytes())
    }

    pub fn party(&self, role: Role) -> Option<&AccountId> {
        self.parties
            .iter()
            .find(|p| p.role == role)
            .map(|p| &p.account)
    }

    /// What the buyer must escrow: `p + floor(c_B * p / 10^4)`.
    pub fn buyer_total(&self) -> Money {
        Money(
            self.terms
                .price
                .0
                .saturating_add(self.terms.buyer_commission.of(self.terms.price).0),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictBasis {
    ValidPom,
    InvalidComplaint,
    NoComplaint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub trade: AgreementId,
    pub guilty: Option<AccountId>,
    pub basis: VerdictBasis,
}
