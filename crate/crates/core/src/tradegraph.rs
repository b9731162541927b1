//! The trade graph `G = (V, E, T)`, rebuilt from the ledger log.
//!
//! Vertices are accounts that took part in a settled trade, edges are settled
//! sales weighted by price (parallel edges allowed), and tuples record the
//! seller, mediator and buyer of mediated trades.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commitments::Digest;
use crate::ledger::{
    AccountId, Agreement, AgreementId, AgreementKind, EventBody, LedgerEvent, Money, Role, Tick,
};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TradeEdge {
    pub seller: AccountId,
    pub buyer: AccountId,
    pub weight: Money,
    pub trade: AgreementId,
    pub data_root: Digest,
    pub tick: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TradeTuple {
    pub seller: AccountId,
    pub mediator: AccountId,
    pub buyer: AccountId,
    pub trade: AgreementId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradeGraph {
    pub vertices: BTreeSet<AccountId>,
    /// In settlement order.
    pub edges: Vec<TradeEdge>,
    pub tuples: BTreeSet<TradeTuple>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("corrupt log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
}

impl TradeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the edge (and tuple, when mediated) of a settled trade.
    pub fn record_settlement(
        &mut self,
        trade: AgreementId,
        agreement: &Agreement,
        data_root: Digest,
        tick: Tick,
    ) {
        let (Some(seller), Some(buyer)) =
            (agreement.party(Role::Seller), agreement.party(Role::Buyer))
        else {
            return;
        };
        self.vertices.insert(seller.clone());
        self.vertices.insert(buyer.clone());
        self.edges.push(TradeEdge {
            seller: seller.clone(),
            buyer: buyer.clone(),
            weight: agreement.terms.price,
            trade,
            data_root,
            tick,
        });
        if let Some(mediator) = agreement.party(Role::Mediator) {
            self.vertices.insert(mediator.clone());
            self.tuples.insert(TradeTuple {
                seller: seller.clone(),
                mediator: mediator.clone(),
                buyer: buyer.clone(),
                trade,
            });
        }
    }

    /// Whether every vertex, edge and tuple of `self` is in `other`.
    pub fn is_subgraph_of(&self, other: &TradeGraph) -> bool {
        self.vertices.is_subset(&other.vertices)
            && self.tuples.is_subset(&other.tuples)
            && self.edges.iter().all(|e| other.edges.contains(e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }
}

/// Rebuilds the graph from a log prefix. Only agreements, commitments and
/// settlements matter; the log must be contiguous from seq 0.
pub fn rebuild_from_log(events: &[LedgerEvent]) -> Result<TradeGraph, GraphError> {
    let mut graph = TradeGraph::new();
    let mut trades: BTreeMap<AgreementId, (Agreement, Option<Digest>)> = BTreeMap::new();
    let mut settled = BTreeSet::new();
    let mut next_agreement = 0u64;
    let mut last_tick = Tick(0);
    for (i, e) in events.iter().enumerate() {
        let corrupt = |reason: String| GraphError::CorruptLog { seq: e.seq, reason };
        if e.seq != i as u64 {
            return Err(corrupt(format!("expected seq {i}")));
        }
        if e.tick < last_tick {
            return Err(corrupt("tick went backwards".into()));
        }
        last_tick = e.tick;
        match &e.body {
            EventBody::AgreementRegistered { id, agreement } => {
                if id.0 != next_agreement {
                    return Err(corrupt(format!("agreement id {id} out of sequence")));
                }
                if agreement.compute_terms_hash() != agreement.terms_hash {
                    return Err(corrupt(format!("agreement {id} terms hash mismatch")));
                }
                next_agreement += 1;
                if agreement.kind == AgreementKind::Trade {
                    trades.insert(*id, ((**agreement).clone(), agreement.data_root));
                }
            }
            EventBody::CommitmentPosted { trade, root } => {
                let entry = trades
                    .get_mut(trade)
                    .ok_or_else(|| corrupt(format!("commitment for unknown trade {trade}")))?;
                entry.1 = Some(*root);
            }
            EventBody::Settled { trade, .. } => {
                let (agreement, root) = trades
                    .get(trade)
                    .ok_or_else(|| corrupt(format!("settlement of unknown trade {trade}")))?;
                let root = root
                    .ok_or_else(|| corrupt(format!("trade {trade} settled without commitment")))?;
                if !settled.insert(*trade) {
                    return Err(corrupt(format!("trade {trade} settled twice")));
                }
                graph.record_settlement(*trade, agreement, root, e.tick);
            }
            _ => {}
        }
    }
    Ok(graph)
}

/// Edges that carried `root`, in settlement order.
pub fn provenance_chain(graph: &TradeGraph, root: &Digest) -> Vec<TradeEdge> {
    graph
        .edges
        .iter()
        .filter(|e| e.data_root == *root)
        .cloned()
        .collect()
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// DOT rendering, ordered by trade id. Mediator links are dashed.
pub fn export_dot(graph: &TradeGraph) -> String {
    let mut out = String::from("digraph trades {\n");
    for v in &graph.vertices {
        let _ = writeln!(out, "  {};", quote(v.as_str()));
    }
    let mut edges: Vec<&TradeEdge> = graph.edges.iter().collect();
    edges.sort_by_key(|e| e.trade);
    for e in edges {
        let _ = writeln!(
            out,
            "  {} -> {} [label=\"{}\", trade=\"{}\"];",
            quote(e.seller.as_str()),
            quote(e.buyer.as_str()),
            e.weight,
            e.trade
        );
    }
    let mut tuples: Vec<&TradeTuple> = graph.tuples.iter().collect();
    tuples.sort_by_key(|t| t.trade);
    for t in tuples {
        for end in [&t.seller, &t.buyer] {
            let _ = writeln!(
                out,
                "  {} -> {} [style=dashed, arrowhead=none, trade=\"{}\"];",
                quote(t.mediator.as_str()),
                quote(end.as_str()),
                t.trade
            );
        }
    }
    out.push_str("}\n");
    out
}
