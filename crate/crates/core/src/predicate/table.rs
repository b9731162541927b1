//! Row-per-chunk tabular layout.
//!
//! Chunk 0 is a header: bytes `0..4` are `TBL1`, byte 4 is the column count
//! `k`, then `k` pairs of `(offset, width)` bytes, and the trailing 8 bytes
//! hold the row count big-endian. Each following chunk is one row; column
//! values sit at their offset, right-padded with zeros to their width.

use serde::{Deserialize, Serialize};

use super::{PredicateError, Word};

pub const TABLE_MAGIC: &[u8; 4] = b"TBL1";
const MAX_COLUMNS: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub offset: u8,
    pub width: u8,
    /// Left in the clear by selective encryption.
    #[serde(default)]
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub columns: Vec<Column>,
}

impl TableSchema {
    pub fn new(columns: Vec<Column>) -> Result<Self, PredicateError> {
        if columns.is_empty() || columns.len() > MAX_COLUMNS {
            return Err(PredicateError::UnsupportedSpec(format!(
                "tables need 1..={MAX_COLUMNS} columns"
            )));
        }
        let mut used = [false; 32];
        for c in &columns {
            let end = c.offset as usize + c.width as usize;
            if c.width == 0 || end > 32 {
                return Err(PredicateError::UnsupportedSpec(format!(
                    "column {} does not fit a row",
                    c.name
                )));
            }
            for slot in &mut used[c.offset as usize..end] {
                if *slot {
                    return Err(PredicateError::UnsupportedSpec(format!(
                        "column {} overlaps another",
                        c.name
                    )));
                }
                *slot = true;
            }
        }
        Ok(Self { columns })
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn visible_columns(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.visible)
    }

    pub fn header(&self, rows: u64) -> Word {
        let mut w = [0u8; 32];
        w[..4].copy_from_slice(TABLE_MAGIC);
        w[4] = self.columns.len() as u8;
        for (i, c) in self.columns.iter().enumerate() {
            w[5 + 2 * i] = c.offset;
            w[6 + 2 * i] = c.width;
        }
        w[24..].copy_from_slice(&rows.to_be_bytes());
        Word(w)
    }

    /// Encodes one row given a value per column (in schema order).
    pub fn encode_row<V: AsRef<[u8]>>(&self, values: &[V]) -> Result<Word, PredicateError> {
        if values.len() != self.columns.len() {
            return Err(PredicateError::UnsupportedSpec(
                "row has the wrong number of values".into(),
            ));
        }
        let mut w = [0u8; 32];
        for (c, v) in self.columns.iter().zip(values) {
            let v = v.as_ref();
            if v.len() > c.width as usize {
                return Err(PredicateError::UnsupportedSpec(format!(
                    "value too wide for column {}",
                    c.name
                )));
            }
            w[c.offset as usize..c.offset as usize + v.len()].copy_from_slice(v);
        }
        Ok(Word(w))
    }

    /// The column's raw bytes (with padding) inside a row word.
    pub fn field<'a>(&self, column: &Column, row: &'a Word) -> &'a [u8] {
        &row.0[column.offset as usize..column.offset as usize + column.width as usize]
    }

    /// Chunks for a table: header then one chunk per row.
    pub fn encode_table<V: AsRef<[u8]>>(
        &self,
        rows: &[Vec<V>],
    ) -> Result<Vec<Word>, PredicateError> {
        let mut chunks = Vec::with_capacity(rows.len() + 1);
        chunks.push(self.header(rows.len() as u64));
        for row in rows {
            chunks.push(self.encode_row(row)?);
        }
        Ok(chunks)
    }

    /// Plaintext of the visible columns, for publication alongside ciphertext.
    pub fn disclose(&self, chunks: &[Word]) -> Disclosure {
        let visible: Vec<&Column> = self.visible_columns().collect();
        Disclosure {
            columns: visible.iter().map(|c| c.name.clone()).collect(),
            rows: chunks
                .iter()
                .skip(1)
                .map(|row| {
                    visible
                        .iter()
                        .map(|c| hex::encode(self.field(c, row)))
                        .collect()
                })
                .collect(),
        }
    }
}

/// Shape of a table: schema plus row count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableLayout {
    pub schema: TableSchema,
    pub rows: u64,
}

/// The clear-text part of a selectively encrypted table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disclosure {
    pub columns: Vec<String>,
    /// Per row, the hex of each disclosed column's padded field.
    pub rows: Vec<Vec<String>>,
}

impl Disclosure {
    pub fn column_values(&self, name: &str) -> Option<Vec<Vec<u8>>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        self.rows
            .iter()
            .map(|r| r.get(idx).and_then(|h| hex::decode(h).ok()))
            .collect()
    }
}

/// Pharmacy records: `id` and `class_of_disease` are published in the clear.
pub fn medical_schema() -> TableSchema {
    let col = |name: &str, offset, width, visible| Column {
        name: name.into(),
        offset,
        width,
        visible,
    };
    TableSchema::new(vec![
        col("id", 0, 4, true),
        col("age", 4, 1, false),
        col("blood_group", 5, 3, false),
        col("class_of_disease", 8, 20, true),
        col("drug_code", 28, 4, false),
    ])
    .expect("static schema is valid")
}
