use serde::{Deserialize, Serialize};

use super::payouts::Payouts;
use super::types::{AccountId, Agreement, AgreementId, EscrowId, Money, Tick, Verdict};
use crate::commitments::{Digest, EncodingKey};
use crate::exchange::MisbehaviorProof;

/// Why escrowed funds left custody through an `unfrozen` event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseCause {
    Manual,
    ComplaintRefund,
    DepositForfeit,
    /// Refund of an unrevealed trade after its reveal timeout.
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    AccountOpened {
        account: AccountId,
        initial: Money,
    },
    Transferred {
        from: AccountId,
        to: AccountId,
        amount: Money,
    },
    Frozen {
        escrow: EscrowId,
        owner: AccountId,
        amount: Money,
        contract: AgreementId,
    },
    Unfrozen {
        escrow: EscrowId,
        to: AccountId,
        amount: Money,
        cause: ReleaseCause,
    },
    AgreementRegistered {
        id: AgreementId,
        agreement: Box<Agreement>,
    },
    CommitmentPosted {
        trade: AgreementId,
        root: Digest,
    },
    KeyRevealed {
        trade: AgreementId,
        key: EncodingKey,
        deposit_escrow: Option<EscrowId>,
    },
    ComplaintFiled {
        trade: AgreementId,
        complainant: AccountId,
        proof: MisbehaviorProof,
    },
    VerdictIssued {
        verdict: Verdict,
    },
    Settled {
        trade: AgreementId,
        payouts: Payouts,
    },
}

impl EventBody {
    pub fn kind_name(&self) -> &'static str {
        match self {
            EventBody::AccountOpened { .. } => "account_opened",
            EventBody::Transferred { .. } => "transferred",
            EventBody::Frozen { .. } => "frozen",
            EventBody::Unfrozen { .. } => "unfrozen",
            EventBody::AgreementRegistered { .. } => "agreement_registered",
            EventBody::CommitmentPosted { .. } => "commitment_posted",
            EventBody::KeyRevealed { .. } => "key_revealed",
            EventBody::ComplaintFiled { .. } => "complaint_filed",
            EventBody::VerdictIssued { .. } => "verdict_issued",
            EventBody::Settled { .. } => "settled",
        }
    }

    /// The trade this event belongs to, when it belongs to one.
    pub fn trade(&self) -> Option<AgreementId> {
        match self {
            EventBody::CommitmentPosted { trade, .. }
            | EventBody::KeyRevealed { trade, .. }
            | EventBody::ComplaintFiled { trade, .. }
            | EventBody::Settled { trade, .. } => Some(*trade),
            EventBody::VerdictIssued { verdict } => Some(verdict.trade),
            _ => None,
        }
    }
}

/// One line of the ledger log: `{"seq":..,"tick":..,"kind":..,"payload":{..}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    pub tick: Tick,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct LogParseError {
    pub line: usize,
    pub message: String,
}

/// Serializes events as JSON lines, one event per line.
pub fn to_jsonl(events: &[LedgerEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

/// Parses JSON lines. Blank lines are skipped; anything else must be an event.
pub fn parse_jsonl(text: &str) -> Result<Vec<LedgerEvent>, LogParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LogParseError {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
