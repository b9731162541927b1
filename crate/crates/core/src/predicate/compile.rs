use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::table::{Disclosure, TableLayout};
use super::{GateId, GateOp, Pattern, PredicateCircuit, PredicateError, Word};
use crate::commitments::{hash, hash_parts, Digest};
use crate::hexbytes::hex_vec;

/// How the data being traded is laid out in chunks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataLayout {
    Chunks { count: u32 },
    Table(TableLayout),
}

impl DataLayout {
    pub fn num_inputs(&self) -> u32 {
        match self {
            DataLayout::Chunks { count } => *count,
            DataLayout::Table(t) => 1 + t.rows as u32,
        }
    }
}

/// Predicate templates the buyer (or regulator) can ask for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case")]
pub enum PredicateSpec {
    /// The chunk-digest chain of the whole file equals `digest`.
    HashEquals {
        digest: Digest,
    },
    /// Every chunk contains `pattern` somewhere.
    AllChunksContain {
        #[serde(with = "hex_vec")]
        pattern: Vec<u8>,
    },
    /// Every row's `column` holds one of `allowed`.
    FieldMembership {
        column: String,
        allowed: Vec<String>,
    },
    RowCountAtLeast {
        min_rows: u64,
    },
    And {
        left: Box<PredicateSpec>,
        right: Box<PredicateSpec>,
    },
    Or {
        left: Box<PredicateSpec>,
        right: Box<PredicateSpec>,
    },
    Not {
        inner: Box<PredicateSpec>,
    },
}

impl PredicateSpec {
    pub fn and(self, other: PredicateSpec) -> Self {
        PredicateSpec::And {
            left: Box::new(self),
            right: Box::new(other),
        }
    }

    /// Evaluates the part of the predicate decidable from the clear columns of
    /// a selectively encrypted table. `None` means "depends on ciphertext".
    pub fn check_visible(&self, layout: &DataLayout, view: &Disclosure) -> Option<bool> {
        let DataLayout::Table(table) = layout else {
            return None;
        };
        match self {
            PredicateSpec::RowCountAtLeast { min_rows } => {
                Some(view.rows.len() as u64 >= *min_rows && table.rows >= *min_rows)
            }
            PredicateSpec::FieldMembership { column, allowed } => {
                let col = table.schema.column(column)?;
                let values = view.column_values(column)?;
                let allowed: Vec<Vec<u8>> = allowed
                    .iter()
                    .map(|v| padded(v.as_bytes(), col.width as usize))
                    .collect();
                Some(
                    values.len() as u64 == table.rows && values.iter().all(|v| allowed.contains(v)),
                )
            }
            PredicateSpec::And { left, right } => match (
                left.check_visible(layout, view),
                right.check_visible(layout, view),
            ) {
                (Some(false), _) | (_, Some(false)) => Some(false),
                (Some(true), Some(true)) => Some(true),
                _ => None,
            },
            PredicateSpec::Or { left, right } => match (
                left.check_visible(layout, view),
                right.check_visible(layout, view),
            ) {
                (Some(true), _) | (_, Some(true)) => Some(true),
                (Some(false), Some(false)) => Some(false),
                _ => None,
            },
            PredicateSpec::Not { inner } => inner.check_visible(layout, view).map(|b| !b),
            PredicateSpec::HashEquals { .. } | PredicateSpec::AllChunksContain { .. } => None,
        }
    }
}

fn padded(v: &[u8], width: usize) -> Vec<u8> {
    let mut out = v.to_vec();
    out.resize(width.max(v.len()), 0);
    out
}

/// Chunk-digest chain: `d0 = H(c0)`, `di = H(d(i-1) || ci)`; the file digest is the last link.
pub fn file_digest(chunks: &[Word]) -> Option<Digest> {
    let (first, rest) = chunks.split_first()?;
    Some(rest.iter().fold(hash(first.as_bytes()), |acc, c| {
        hash_parts(&[acc.as_bytes(), c.as_bytes()])
    }))
}

/// Appends gates, sharing identical input reads and constants.
#[derive(Debug, Default)]
pub struct CircuitBuilder {
    gates: Vec<GateOp>,
    num_inputs: u32,
    inputs: HashMap<u32, GateId>,
    consts: HashMap<Word, GateId>,
}

impl CircuitBuilder {
    pub fn new(num_inputs: u32) -> Self {
        Self {
            num_inputs,
            ..Default::default()
        }
    }

    fn push(&mut self, op: GateOp) -> GateId {
        self.gates.push(op);
        (self.gates.len() - 1) as GateId
    }

    pub fn input(&mut self, i: u32) -> GateId {
        if let Some(&g) = self.inputs.get(&i) {
            return g;
        }
        let g = self.push(GateOp::Input(i));
        self.inputs.insert(i, g);
        g
    }

    pub fn constant(&mut self, w: Word) -> GateId {
        if let Some(&g) = self.consts.get(&w) {
            return g;
        }
        let g = self.push(GateOp::Const(w));
        self.consts.insert(w, g);
        g
    }

    pub fn op(&mut self, op: GateOp) -> GateId {
        self.push(op)
    }

    pub fn and_all(&mut self, terms: &[GateId]) -> GateId {
        match terms {
            [] => self.constant(Word::TRUE),
            [one] => *one,
            [first, rest @ ..] => rest
                .iter()
                .fold(*first, |acc, t| self.push(GateOp::And(acc, *t))),
        }
    }

    pub fn or_all(&mut self, terms: &[GateId]) -> GateId {
        match terms {
            [] => self.constant(Word::FALSE),
            [one] => *one,
            [first, rest @ ..] => rest
                .iter()
                .fold(*first, |acc, t| self.push(GateOp::Or(acc, *t))),
        }
    }

    /// Makes `output` the last gate and validates.
    pub fn finish(mut self, output: GateId) -> Result<PredicateCircuit, PredicateError> {
        if output as usize + 1 != self.gates.len() {
            self.push(GateOp::And(output, output));
        }
        PredicateCircuit::new(self.gates, self.num_inputs)
    }
}

pub fn compile_spec(
    spec: &PredicateSpec,
    layout: &DataLayout,
) -> Result<PredicateCircuit, PredicateError> {
    let mut b = CircuitBuilder::new(layout.num_inputs());
    let out = emit(&mut b, spec, layout)?;
    b.finish(out)
}

fn emit(
    b: &mut CircuitBuilder,
    spec: &PredicateSpec,
    layout: &DataLayout,
) -> Result<GateId, PredicateError> {
    let n = layout.num_inputs();
    match spec {
        PredicateSpec::HashEquals { digest } => match n {
            0 => Err(PredicateError::UnsupportedSpec(
                "hash of an empty file".into(),
            )),
            1 => {
                let x = b.input(0);
                Ok(b.op(GateOp::HashEq(vec![x], *digest)))
            }
            _ => {
                let first = b.input(0);
                let mut acc = b.op(GateOp::Hash(vec![first]));
                for i in 1..n - 1 {
                    let c = b.input(i);
                    acc = b.op(GateOp::Hash(vec![acc, c]));
                }
                let last = b.input(n - 1);
                Ok(b.op(GateOp::HashEq(vec![acc, last], *digest)))
            }
        },
        PredicateSpec::AllChunksContain { pattern } => {
            let pattern = Pattern::anywhere(pattern.clone());
            if !pattern.is_valid() {
                return Err(PredicateError::UnsupportedSpec(
                    "pattern must be 1..=32 bytes".into(),
                ));
            }
            let terms: Vec<GateId> = (0..n)
                .map(|i| {
                    let x = b.input(i);
                    b.op(GateOp::Contains(x, pattern.clone()))
                })
                .collect();
            Ok(b.and_all(&terms))
        }
        PredicateSpec::FieldMembership { column, allowed } => {
            let table = table_of(layout)?;
            if allowed.is_empty() {
                return Err(PredicateError::EmptySet);
            }
            let col = table.schema.column(column).ok_or_else(|| {
                PredicateError::UnsupportedSpec(format!("unknown column {column}"))
            })?;
            let patterns = allowed
                .iter()
                .map(|v| {
                    if v.len() > col.width as usize {
                        return Err(PredicateError::UnsupportedSpec(format!(
                            "value {v:?} wider than column {column}"
                        )));
                    }
                    Ok(Pattern::at(
                        col.offset,
                        padded(v.as_bytes(), col.width as usize),
                    ))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut terms = vec![header_check(b, table)];
            for r in 0..table.rows as u32 {
                let row = b.input(1 + r);
                let hits: Vec<GateId> = patterns
                    .iter()
                    .map(|p| b.op(GateOp::Contains(row, p.clone())))
                    .collect();
                terms.push(b.or_all(&hits));
            }
            Ok(b.and_all(&terms))
        }
        PredicateSpec::RowCountAtLeast { min_rows } => {
            if *min_rows == 0 {
                return Ok(b.constant(Word::TRUE));
            }
            let table = table_of(layout)?;
            let shape = header_check(b, table);
            let header = b.input(0);
            let bound = b.constant(Word::from_u64(*min_rows));
            let enough = b.op(GateOp::Ge64(header, bound));
            Ok(b.and_all(&[shape, enough]))
        }
        PredicateSpec::And { left, right } => {
            let l = emit(b, left, layout)?;
            let r = emit(b, right, layout)?;
            Ok(b.op(GateOp::And(l, r)))
        }
        PredicateSpec::Or { left, right } => {
            let l = emit(b, left, layout)?;
            let r = emit(b, right, layout)?;
            Ok(b.op(GateOp::Or(l, r)))
        }
        PredicateSpec::Not { inner } => {
            let x = emit(b, inner, layout)?;
            Ok(b.op(GateOp::Not(x)))
        }
    }
}

fn table_of(layout: &DataLayout) -> Result<&TableLayout, PredicateError> {
    match layout {
        DataLayout::Table(t) => Ok(t),
        DataLayout::Chunks { .. } => Err(PredicateError::UnsupportedSpec(
            "column predicates need a table layout".into(),
        )),
    }
}

/// Chunk 0 must be exactly the header for this schema and row count.
fn header_check(b: &mut CircuitBuilder, table: &TableLayout) -> GateId {
    let header = b.input(0);
    let expected = b.constant(table.schema.header(table.rows));
    b.op(GateOp::Eq(header, expected))
}
