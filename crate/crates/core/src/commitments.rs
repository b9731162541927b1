//! Hashing, the keyed chunk cipher and Merkle commitments.
//!
//! Everything here is a pure function of its inputs. The hash is SHA-256 and
//! the tree shape is fixed (domain-separated leaf/node prefixes, odd levels
//! padded by duplicating the last node) so roots are reproducible bit for bit.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::hexbytes::bytes32_newtype;
use crate::predicate::Word;

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;

bytes32_newtype!(
    /// A SHA-256 output.
    Digest
);

bytes32_newtype!(
    /// Secret key for the chunk cipher. Revealing it is what lets the buyer
    /// invert the encoding.
    EncodingKey
);

impl EncodingKey {
    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        Self(key)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommitmentError {
    #[error("merkle tree needs at least one leaf")]
    EmptyLeaves,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash of the concatenation of `parts`, without an intermediate buffer.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

/// Pad word for position `index`: `hash(key || index_be64)`.
pub fn keystream(key: &EncodingKey, index: u64) -> Word {
    let digest = hash_parts(&[key.as_bytes(), &index.to_be_bytes()]);
    Word(digest.0)
}

pub fn encrypt_chunk(key: &EncodingKey, index: u64, chunk: &Word) -> Word {
    chunk.xor(&keystream(key, index))
}

pub fn decrypt_chunk(key: &EncodingKey, index: u64, ciphertext: &Word) -> Word {
    // XOR stream: decryption is the same operation.
    encrypt_chunk(key, index, ciphertext)
}

pub fn leaf_hash(leaf: &[u8]) -> Digest {
    hash_parts(&[&[LEAF_PREFIX], leaf])
}

pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    hash_parts(&[&[NODE_PREFIX], left.as_bytes(), right.as_bytes()])
}

/// Number of path steps for a tree over `leaf_count` leaves: `ceil(log2(n))`.
pub fn merkle_depth(leaf_count: usize) -> usize {
    if leaf_count <= 1 {
        0
    } else {
        (usize::BITS - (leaf_count - 1).leading_zeros()) as usize
    }
}

/// One step of an inclusion path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub sibling: Digest,
    /// True when the sibling sits to the left of the running node.
    pub sibling_left: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_index: u64,
    pub path: Vec<PathStep>,
}

/// A fully materialized tree, for producing many proofs over the same leaves.
#[derive(Debug, Clone)]
pub struct MerkleTree {
    levels: Vec<Vec<Digest>>,
    leaf_count: usize,
}

impl MerkleTree {
    pub fn new<L: AsRef<[u8]>>(leaves: &[L]) -> Result<Self, CommitmentError> {
        if leaves.is_empty() {
            return Err(CommitmentError::EmptyLeaves);
        }
        let leaf_count = leaves.len();
        let mut levels = vec![leaves
            .iter()
            .map(|l| leaf_hash(l.as_ref()))
            .collect::<Vec<_>>()];
        loop {
            let current = levels.last_mut().expect("at least one level");
            if current.len() == 1 {
                break;
            }
            if current.len() % 2 == 1 {
                let last = *current.last().expect("nonempty level");
                current.push(last);
            }
            let next = current
                .chunks_exact(2)
                .map(|pair| node_hash(&pair[0], &pair[1]))
                .collect();
            levels.push(next);
        }
        Ok(Self { levels, leaf_count })
    }

    pub fn root(&self) -> Digest {
        self.levels.last().expect("at least one level")[0]
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn prove(&self, index: usize) -> Result<MerkleProof, CommitmentError> {
        if index >= self.leaf_count {
            return Err(CommitmentError::IndexOutOfRange {
                index,
                len: self.leaf_count,
            });
        }
        let mut path = Vec::with_capacity(self.levels.len() - 1);
        let mut pos = index;
        for level in &self.levels[..self.levels.len() - 1] {
            let sibling_left = pos % 2 == 1;
            let sibling = level[pos ^ 1];
            path.push(PathStep {
                sibling,
                sibling_left,
            });
            pos /= 2;
        }
        Ok(MerkleProof {
            leaf_index: index as u64,
            path,
        })
    }
}

pub fn merkle_root<L: AsRef<[u8]>>(leaves: &[L]) -> Result<Digest, CommitmentError> {
    MerkleTree::new(leaves).map(|t| t.root())
}

pub fn merkle_prove<L: AsRef<[u8]>>(
    leaves: &[L],
    index: usize,
) -> Result<MerkleProof, CommitmentError> {
    MerkleTree::new(leaves)?.prove(index)
}

/// Checks an inclusion proof. The side bits must agree with `leaf_index`, so a
/// valid path cannot be replayed under a different position.
pub fn merkle_verify(root: &Digest, leaf: &[u8], proof: &MerkleProof) -> bool {
    let depth = proof.path.len();
    if depth < 64 && proof.leaf_index >> depth != 0 {
        return false;
    }
    let mut node = leaf_hash(leaf);
    for (level, step) in proof.path.iter().enumerate() {
        let bit = level < 64 && (proof.leaf_index >> level) & 1 == 1;
        if step.sibling_left != bit {
            return false;
        }
        node = if step.sibling_left {
            node_hash(&step.sibling, &node)
        } else {
            node_hash(&node, &step.sibling)
        };
    }
    node == *root
}
