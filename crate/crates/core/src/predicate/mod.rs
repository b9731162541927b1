//! Boolean predicate circuits over 32-byte words.
//!
//! A circuit is a list of fan-in-2 gates in topological order; the last gate is
//! the output and must be boolean-typed. Booleans are the words `0x00..00` and
//! `0x00..01`. The same gate semantics serve three roles: the buyer's
//! condition on the data, the regulation predicate bound to a trade, and the
//! ledger's per-gate re-execution when it judges a misbehavior proof.

mod compile;
mod table;

pub use compile::{compile_spec, file_digest, CircuitBuilder, DataLayout, PredicateSpec};
pub use table::{medical_schema, Column, Disclosure, TableLayout, TableSchema};

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::commitments::{hash, hash_parts, Digest};
use crate::hexbytes::bytes32_newtype;

bytes32_newtype!(
    /// A 32-byte data chunk or wire value.
    Word
);

impl Word {
    pub const ZERO: Word = Word([0; 32]);
    pub const FALSE: Word = Word([0; 32]);
    pub const TRUE: Word = {
        let mut w = [0u8; 32];
        w[31] = 1;
        Word(w)
    };

    pub fn from_bool(b: bool) -> Self {
        if b {
            Self::TRUE
        } else {
            Self::FALSE
        }
    }

    /// Word whose trailing 8 bytes hold `v` big-endian.
    pub fn from_u64(v: u64) -> Self {
        let mut w = [0u8; 32];
        w[24..].copy_from_slice(&v.to_be_bytes());
        Word(w)
    }

    pub fn trailing_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[24..].try_into().expect("8 bytes"))
    }

    pub fn is_true(&self) -> bool {
        *self == Self::TRUE
    }

    pub fn is_boolean(&self) -> bool {
        *self == Self::TRUE || *self == Self::FALSE
    }

    pub fn xor(&self, other: &Word) -> Word {
        let mut out = [0u8; 32];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(other.0.iter())) {
            *o = a ^ b;
        }
        Word(out)
    }

    /// Copies up to 32 bytes, zero-padding on the right.
    pub fn from_slice_padded(bytes: &[u8]) -> Word {
        let mut w = [0u8; 32];
        let n = bytes.len().min(32);
        w[..n].copy_from_slice(&bytes[..n]);
        Word(w)
    }
}

pub type GateId = u32;

/// A byte string expected inside a word, either at a fixed offset or anywhere.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pattern {
    pub offset: Option<u8>,
    pub bytes: Vec<u8>,
}

const ANY_OFFSET: u8 = 0xff;

impl Pattern {
    pub fn anywhere(bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            offset: None,
            bytes: bytes.into(),
        }
    }

    pub fn at(offset: u8, bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            offset: Some(offset),
            bytes: bytes.into(),
        }
    }

    pub fn is_valid(&self) -> bool {
        let len = self.bytes.len();
        (1..=32).contains(&len)
            && match self.offset {
                Some(off) => off as usize + len <= 32,
                None => true,
            }
    }

    pub fn matches(&self, word: &Word) -> bool {
        let len = self.bytes.len();
        if len == 0 || len > 32 {
            return false;
        }
        match self.offset {
            Some(off) => {
                let off = off as usize;
                off + len <= 32 && word.0[off..off + len] == self.bytes[..]
            }
            None => word.0.windows(len).any(|w| w == &self.bytes[..]),
        }
    }

    /// Canonical constant: one offset byte (`0xff` = anywhere) then the pattern.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + self.bytes.len());
        out.push(self.offset.unwrap_or(ANY_OFFSET));
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let (&first, rest) = bytes.split_first()?;
        let offset = if first == ANY_OFFSET {
            None
        } else {
            Some(first)
        };
        let pattern = Self {
            offset,
            bytes: rest.to_vec(),
        };
        pattern.is_valid().then_some(pattern)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GateOp {
    /// Reads data chunk `i`.
    Input(u32),
    Const(Word),
    Eq(GateId, GateId),
    And(GateId, GateId),
    Or(GateId, GateId),
    Not(GateId),
    /// Unsigned compare of the trailing 8 bytes (big-endian): `a >= b`.
    Ge64(GateId, GateId),
    Contains(GateId, Pattern),
    /// Word-valued: hash of the concatenated operand words.
    Hash(Vec<GateId>),
    /// Boolean: hash of the concatenated operand words equals the constant.
    HashEq(Vec<GateId>, Digest),
}

/// Where a gate's operand value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireRef {
    Chunk(u32),
    Gate(GateId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WireType {
    Bool,
    Word,
}

impl GateOp {
    pub fn name(&self) -> &'static str {
        match self {
            GateOp::Input(_) => "INPUT",
            GateOp::Const(_) => "CONST",
            GateOp::Eq(..) => "EQ",
            GateOp::And(..) => "AND",
            GateOp::Or(..) => "OR",
            GateOp::Not(_) => "NOT",
            GateOp::Ge64(..) => "GE64",
            GateOp::Contains(..) => "CONTAINS",
            GateOp::Hash(_) => "HASH",
            GateOp::HashEq(..) => "HASHEQ",
        }
    }

    /// Operand sources in the order `apply` expects them.
    pub fn operands(&self) -> Vec<WireRef> {
        match self {
            GateOp::Input(i) => vec![WireRef::Chunk(*i)],
            GateOp::Const(_) => vec![],
            GateOp::Eq(a, b) | GateOp::And(a, b) | GateOp::Or(a, b) | GateOp::Ge64(a, b) => {
                vec![WireRef::Gate(*a), WireRef::Gate(*b)]
            }
            GateOp::Not(a) | GateOp::Contains(a, _) => vec![WireRef::Gate(*a)],
            GateOp::Hash(ops) | GateOp::HashEq(ops, _) => {
                ops.iter().map(|g| WireRef::Gate(*g)).collect()
            }
        }
    }

    /// Gate function. Total on all words; `operands` must have the arity
    /// reported by [`GateOp::operands`].
    pub fn apply(&self, operands: &[Word]) -> Word {
        match self {
            GateOp::Input(_) => operands[0],
            GateOp::Const(w) => *w,
            GateOp::Eq(..) => Word::from_bool(operands[0] == operands[1]),
            GateOp::And(..) => Word::from_bool(operands[0].is_true() && operands[1].is_true()),
            GateOp::Or(..) => Word::from_bool(operands[0].is_true() || operands[1].is_true()),
            GateOp::Not(_) => Word::from_bool(!operands[0].is_true()),
            GateOp::Ge64(..) => {
                Word::from_bool(operands[0].trailing_u64() >= operands[1].trailing_u64())
            }
            GateOp::Contains(_, pattern) => Word::from_bool(pattern.matches(&operands[0])),
            GateOp::Hash(_) => Word(concat_hash(operands).0),
            GateOp::HashEq(_, expected) => Word::from_bool(concat_hash(operands) == *expected),
        }
    }

    fn output_type(&self) -> WireType {
        match self {
            GateOp::Input(_) | GateOp::Hash(_) => WireType::Word,
            GateOp::Const(w) if w.is_boolean() => WireType::Bool,
            GateOp::Const(_) => WireType::Word,
            _ => WireType::Bool,
        }
    }
}

fn concat_hash(words: &[Word]) -> Digest {
    let parts: Vec<&[u8]> = words.iter().map(|w| &w.0[..]).collect();
    hash_parts(&parts)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PredicateError {
    #[error("circuit expects {expected} input chunks, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("malformed circuit: {0}")]
    MalformedCircuit(String),
    #[error("unsupported predicate: {0}")]
    UnsupportedSpec(String),
    #[error("allowed-value set is empty")]
    EmptySet,
    #[error("malformed circuit serialization: {0}")]
    Parse(String),
}

/// A validated gate DAG plus the digest of its canonical serialization.
#[derive(Clone, PartialEq, Eq)]
pub struct PredicateCircuit {
    gates: Vec<GateOp>,
    num_inputs: u32,
    digest: Digest,
}

impl fmt::Debug for PredicateCircuit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PredicateCircuit")
            .field("gates", &self.gates.len())
            .field("num_inputs", &self.num_inputs)
            .field("digest", &self.digest)
            .finish()
    }
}

impl PredicateCircuit {
    pub fn new(gates: Vec<GateOp>, num_inputs: u32) -> Result<Self, PredicateError> {
        validate(&gates, num_inputs)?;
        let mut circuit = Self {
            gates,
            num_inputs,
            digest: Digest::default(),
        };
        circuit.digest = hash(circuit.to_canonical_json().as_bytes());
        Ok(circuit)
    }

    pub fn gates(&self) -> &[GateOp] {
        &self.gates
    }

    pub fn gate_count(&self) -> usize {
        self.gates.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs as usize
    }

    pub fn output_gate(&self) -> GateId {
        (self.gates.len() - 1) as GateId
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn to_canonical_json(&self) -> String {
        let gates: Vec<Value> = self.gates.iter().map(gate_to_json).collect();
        let mut obj = serde_json::Map::new();
        obj.insert("gates".into(), Value::Array(gates));
        obj.insert("num_inputs".into(), Value::from(self.num_inputs));
        Value::Object(obj).to_string()
    }

    pub fn from_json(text: &str) -> Result<Self, PredicateError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| PredicateError::Parse(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| parse_err("expected an object"))?;
        if obj.len() != 2 {
            return Err(parse_err("expected exactly the keys gates and num_inputs"));
        }
        let num_inputs = obj
            .get("num_inputs")
            .and_then(Value::as_u64)
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| parse_err("num_inputs must be a u32"))?;
        let gates = obj
            .get("gates")
            .and_then(Value::as_array)
            .ok_or_else(|| parse_err("gates must be an array"))?
            .iter()
            .map(gate_from_json)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(gates, num_inputs)
    }

    fn check_arity(&self, input: &[Word]) -> Result<(), PredicateError> {
        if input.len() != self.num_inputs() {
            return Err(PredicateError::ArityMismatch {
                expected: self.num_inputs(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, input: &[Word]) -> Result<bool, PredicateError> {
        Ok(self.eval_transcript(input)?.output().is_true())
    }

    pub fn eval_transcript(&self, input: &[Word]) -> Result<EvalTranscript, PredicateError> {
        self.check_arity(input)?;
        let mut wires: Vec<Word> = Vec::with_capacity(self.gates.len());
        let mut operands = Vec::with_capacity(2);
        for op in &self.gates {
            operands.clear();
            operands.extend(op.operands().into_iter().map(|r| match r {
                WireRef::Chunk(i) => input[i as usize],
                WireRef::Gate(g) => wires[g as usize],
            }));
            wires.push(op.apply(&operands));
        }
        Ok(EvalTranscript { wire_values: wires })
    }

    /// Gate ids whose recorded wire disagrees with the gate applied to its
    /// recorded operands, in ascending order.
    pub fn transcript_violations(
        &self,
        input: &[Word],
        transcript: &EvalTranscript,
    ) -> Vec<GateId> {
        let wires = &transcript.wire_values;
        let mut bad = Vec::new();
        for (g, op) in self.gates.iter().enumerate() {
            let operands: Vec<Word> = op
                .operands()
                .into_iter()
                .map(|r| match r {
                    WireRef::Chunk(i) => input[i as usize],
                    WireRef::Gate(o) => wires[o as usize],
                })
                .collect();
            if op.apply(&operands) != wires[g] {
                bad.push(g as GateId);
            }
        }
        bad
    }
}

impl Serialize for PredicateCircuit {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let value: Value =
            serde_json::from_str(&self.to_canonical_json()).map_err(serde::ser::Error::custom)?;
        value.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PredicateCircuit {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        Self::from_json(&value.to_string()).map_err(serde::de::Error::custom)
    }
}

pub fn eval_circuit(circuit: &PredicateCircuit, input: &[Word]) -> Result<bool, PredicateError> {
    circuit.eval(input)
}

pub fn eval_transcript(
    circuit: &PredicateCircuit,
    input: &[Word],
) -> Result<EvalTranscript, PredicateError> {
    circuit.eval_transcript(input)
}

/// Every wire value of one evaluation, in gate order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalTranscript {
    pub wire_values: Vec<Word>,
}

impl EvalTranscript {
    pub fn output(&self) -> Word {
        *self
            .wire_values
            .last()
            .expect("circuits have at least one gate")
    }
}

fn validate(gates: &[GateOp], num_inputs: u32) -> Result<(), PredicateError> {
    let malformed = |msg: String| Err(PredicateError::MalformedCircuit(msg));
    if gates.is_empty() {
        return malformed("circuit has no gates".into());
    }
    if gates.len() > u32::MAX as usize {
        return malformed("too many gates".into());
    }
    let mut types = Vec::with_capacity(gates.len());
    for (id, op) in gates.iter().enumerate() {
        for r in op.operands() {
            match r {
                WireRef::Chunk(i) if i >= num_inputs => {
                    return malformed(format!(
                        "gate {id} reads input {i} but circuit has {num_inputs} inputs"
                    ));
                }
                WireRef::Gate(g) if g as usize >= id => {
                    return malformed(format!(
                        "gate {id} references gate {g} which is not earlier"
                    ));
                }
                _ => {}
            }
        }
        let operand_type = |g: &GateId| types[*g as usize];
        match op {
            GateOp::And(a, b) | GateOp::Or(a, b) => {
                if operand_type(a) != WireType::Bool || operand_type(b) != WireType::Bool {
                    return malformed(format!("gate {id}: {} needs boolean operands", op.name()));
                }
            }
            GateOp::Not(a) if operand_type(a) != WireType::Bool => {
                return malformed(format!("gate {id}: NOT needs a boolean operand"));
            }
            GateOp::Contains(_, p) if !p.is_valid() => {
                return malformed(format!(
                    "gate {id}: pattern must be 1..=32 bytes inside the word"
                ));
            }
            GateOp::Hash(ops) | GateOp::HashEq(ops, _) if ops.is_empty() || ops.len() > 2 => {
                return malformed(format!(
                    "gate {id}: {} takes one or two operands",
                    op.name()
                ));
            }
            _ => {}
        }
        types.push(op.output_type());
    }
    if *types.last().expect("nonempty") != WireType::Bool {
        return malformed("output gate is not boolean".into());
    }
    Ok(())
}

fn parse_err(msg: &str) -> PredicateError {
    PredicateError::Parse(msg.to_string())
}

fn gate_to_json(op: &GateOp) -> Value {
    let mut items = vec![Value::from(op.name())];
    let id = |g: &GateId| Value::from(*g);
    match op {
        GateOp::Input(i) => items.push(Value::from(*i)),
        GateOp::Const(w) => items.push(Value::from(w.to_hex())),
        GateOp::Eq(a, b) | GateOp::And(a, b) | GateOp::Or(a, b) | GateOp::Ge64(a, b) => {
            items.push(id(a));
            items.push(id(b));
        }
        GateOp::Not(a) => items.push(id(a)),
        GateOp::Contains(a, p) => {
            items.push(id(a));
            items.push(Value::from(hex::encode(p.encode())));
        }
        GateOp::Hash(ops) => items.extend(ops.iter().map(id)),
        GateOp::HashEq(ops, h) => {
            items.extend(ops.iter().map(id));
            items.push(Value::from(h.to_hex()));
        }
    }
    Value::Array(items)
}

fn gate_from_json(value: &Value) -> Result<GateOp, PredicateError> {
    let items = value
        .as_array()
        .ok_or_else(|| parse_err("gate must be an array"))?;
    let (name, rest) = items.split_first().ok_or_else(|| parse_err("empty gate"))?;
    let name = name
        .as_str()
        .ok_or_else(|| parse_err("gate op must be a string"))?;
    let num = |v: &Value| -> Result<u32, PredicateError> {
        v.as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| parse_err("operand must be a u32"))
    };
    let text = |v: &Value| -> Result<Vec<u8>, PredicateError> {
        let s = v
            .as_str()
            .ok_or_else(|| parse_err("constant must be a hex string"))?;
        hex::decode(s).map_err(|e| PredicateError::Parse(e.to_string()))
    };
    let word = |v: &Value| -> Result<[u8; 32], PredicateError> {
        text(v)?
            .try_into()
            .map_err(|_| parse_err("constant must be 32 bytes"))
    };
    let ids = |vs: &[Value]| vs.iter().map(num).collect::<Result<Vec<_>, _>>();
    let op = match (name, rest) {
        ("INPUT", [i]) => GateOp::Input(num(i)?),
        ("CONST", [w]) => GateOp::Const(Word(word(w)?)),
        ("EQ", [a, b]) => GateOp::Eq(num(a)?, num(b)?),
        ("AND", [a, b]) => GateOp::And(num(a)?, num(b)?),
        ("OR", [a, b]) => GateOp::Or(num(a)?, num(b)?),
        ("NOT", [a]) => GateOp::Not(num(a)?),
        ("GE64", [a, b]) => GateOp::Ge64(num(a)?, num(b)?),
        ("CONTAINS", [a, p]) => {
            let pattern =
                Pattern::decode(&text(p)?).ok_or_else(|| parse_err("invalid CONTAINS pattern"))?;
            GateOp::Contains(num(a)?, pattern)
        }
        ("HASH", ops) if !ops.is_empty() => GateOp::Hash(ids(ops)?),
        ("HASHEQ", [ops @ .., h]) if !ops.is_empty() => GateOp::HashEq(ids(ops)?, Digest(word(h)?)),
        _ => return Err(PredicateError::Parse(format!("unrecognized gate {value}"))),
    };
    Ok(op)
}
