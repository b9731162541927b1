//! Retrospective regulation audit over a ledger log.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::commitments::Digest;
use crate::ledger::{
    AgreementId, AgreementKind, EventBody, LedgerEvent, Money, Party, RhoRef, VerdictBasis,
};
use crate::tradegraph::GraphError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Settled,
    /// Closed by an upheld complaint.
    Refunded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditRow {
    pub trade: AgreementId,
    pub rho_digest: Digest,
    pub rho_text: String,
    pub parties: Vec<Party>,
    pub price: Money,
    pub outcome: AuditOutcome,
    /// An upheld complaint was filed against this trade.
    pub flagged: bool,
}

/// One row per trade that settled or was refunded, in trade id order.
pub fn audit_log(events: &[LedgerEvent]) -> Result<Vec<AuditRow>, GraphError> {
    let mut trades: BTreeMap<AgreementId, (Vec<Party>, RhoRef, Money)> = BTreeMap::new();
    let mut rows: BTreeMap<AgreementId, AuditRow> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        if e.seq != i as u64 {
            return Err(GraphError::CorruptLog {
                seq: e.seq,
                reason: format!("expected seq {i}"),
            });
        }
        let row = |trade: AgreementId, outcome| {
            let (parties, rho, price) =
                trades.get(&trade).ok_or_else(|| GraphError::CorruptLog {
                    seq: e.seq,
                    reason: format!("event for unknown trade {trade}"),
                })?;
            Ok::<_, GraphError>(AuditRow {
                trade,
                rho_digest: rho.digest,
                rho_text: rho.text.clone(),
                parties: parties.clone(),
                price: *price,
                outcome,
                flagged: outcome == AuditOutcome::Refunded,
            })
        };
        match &e.body {
            EventBody::AgreementRegistered { id, agreement }
                if agreement.kind == AgreementKind::Trade =>
            {
                trades.insert(
                    *id,
                    (
                        agreement.parties.clone(),
                        agreement.rho.clone(),
                        agreement.terms.price,
                    ),
                );
            }
            EventBody::Settled { trade, .. } => {
                rows.insert(*trade, row(*trade, AuditOutcome::Settled)?);
            }
            EventBody::VerdictIssued { verdict } if verdict.basis == VerdictBasis::ValidPom => {
                rows.insert(verdict.trade, row(verdict.trade, AuditOutcome::Refunded)?);
            }
            _ => {}
        }
    }
    Ok(rows.into_values().collect())
}
