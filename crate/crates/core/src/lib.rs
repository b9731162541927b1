//! Protocol engine for a ledger-arbitrated data marketplace.
//!
//! The crate is organized bottom-up:
//!
//! - [`commitments`]: SHA-256, the keyed chunk cipher and Merkle proofs.
//! - [`predicate`]: boolean circuits over 32-byte words and the templates
//!   buyers and regulators compile into them.
//! - [`ledger`]: the trusted arbiter. Accounts, escrows, agreements, key
//!   reveals, complaints and settlement, all as a fold over an event log.
//! - [`exchange`]: two-party fair exchange with committed evaluation
//!   transcripts and proofs of misbehavior.
//! - [`mediated`]: the three-party seller/mediator/buyer protocol.
//! - [`tradegraph`]: trade graph and provenance rebuilt from the log.
//! - [`adversim`]: scripted adversaries and fairness checks.

pub mod adversim;
pub mod audit;
pub mod commitments;
pub mod exchange;
mod hexbytes;
pub mod ledger;
pub mod mediated;
pub mod predicate;
pub mod tradegraph;

pub use commitments::{Digest, EncodingKey};
pub use ledger::{AccountId, Commission, Ledger, LedgerError, LedgerEvent, Money, Tick};
pub use predicate::{PredicateCircuit, Word};
