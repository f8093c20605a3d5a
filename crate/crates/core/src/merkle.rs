//! Binary Merkle trees with authentication paths.
//!
//! Leaves are hashed as `H(0x00 || leaf)` and internal nodes as
//! `H(0x01 || left || right)`. A level with an odd number of nodes promotes
//! its last node unchanged to the next level; it is never duplicated.
//!
//! Because of promotion, the parent of the node at position `p` is always at
//! position `p / 2`, so a leaf's index is fully determined by the sequence of
//! steps on its path. [`AuthPath`] records promoted levels explicitly, which
//! lets verifiers check that the claimed index matches the path shape.

use thiserror::Error;

use crate::canonical_struct;
use crate::codec::{CodecError, Decode, Decoder, Encode, Encoder};
use crate::crypto::{hash_parts, Hash32};

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MerkleError {
    #[error("cannot build a Merkle tree with no leaves")]
    Empty,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
}

pub fn leaf_hash(leaf: &[u8]) -> Hash32 {
    hash_parts(&[&[LEAF_PREFIX], leaf])
}

pub fn node_hash(left: &Hash32, right: &Hash32) -> Hash32 {
    hash_parts(&[&[NODE_PREFIX], left.as_bytes(), right.as_bytes()])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    /// `levels[0]` holds the leaf hashes; the last level holds the root.
    levels: Vec<Vec<Hash32>>,
}

impl MerkleTree {
    pub fn build<L: AsRef<[u8]>>(leaves: &[L]) -> Result<Self, MerkleError> {
        Self::from_leaf_hashes(leaves.iter().map(|l| leaf_hash(l.as_ref())).collect())
    }

    pub fn from_leaf_hashes(leaves: Vec<Hash32>) -> Result<Self, MerkleError> {
        if leaves.is_empty() {
            return Err(MerkleError::Empty);
        }
        let mut levels = vec![leaves];
        while levels.last().map_or(0, Vec::len) > 1 {
            let prev = levels.last().expect("nonempty");
            let next = prev
                .chunks(2)
                .map(|pair| match pair {
                    [l, r] => node_hash(l, r),
                    [only] => *only,
                    _ => unreachable!(),
                })
                .collect();
            levels.push(next);
        }
        Ok(Self { levels })
    }

    pub fn root(&self) -> Hash32 {
        self.levels.last().expect("nonempty")[0]
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn leaf_hashes(&self) -> &[Hash32] {
        &self.levels[0]
    }

    pub fn position_of(&self, leaf_hash: &Hash32) -> Option<usize> {
        self.levels[0].iter().position(|h| h == leaf_hash)
    }

    pub fn auth_path(&self, index: usize) -> Result<AuthPath, MerkleError> {
        if index >= self.len() {
            return Err(MerkleError::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        let mut steps = Vec::with_capacity(self.levels.len());
        let mut pos = index;
        for level in &self.levels[..self.levels.len() - 1] {
            let step = if pos % 2 == 1 {
                PathStep::Sibling(level[pos - 1], Side::Left)
            } else if pos + 1 < level.len() {
                PathStep::Sibling(level[pos + 1], Side::Right)
            } else {
                PathStep::Promoted
            };
            steps.push(step);
            pos /= 2;
        }
        Ok(AuthPath {
            leaf_index: index as u64,
            steps,
        })
    }
}

/// Which side of the running hash a sibling sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathStep {
    Sibling(Hash32, Side),
    /// The node was the unpaired last node of its level.
    Promoted,
}

impl Encode for PathStep {
    fn encode_to(&self, enc: &mut Encoder) {
        match self {
            PathStep::Sibling(h, Side::Left) => {
                enc.tag(0);
                enc.put(h);
            }
            PathStep::Sibling(h, Side::Right) => {
                enc.tag(1);
                enc.put(h);
            }
            PathStep::Promoted => enc.tag(2),
        }
    }
}

impl Decode for PathStep {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.tag()? {
            0 => Ok(PathStep::Sibling(dec.get()?, Side::Left)),
            1 => Ok(PathStep::Sibling(dec.get()?, Side::Right)),
            2 => Ok(PathStep::Promoted),
            tag => Err(CodecError::InvalidTag {
                ty: "PathStep",
                tag,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthPath {
    pub leaf_index: u64,
    pub steps: Vec<PathStep>,
}

canonical_struct!(AuthPath { leaf_index, steps });

impl AuthPath {
    pub fn siblings(&self) -> impl Iterator<Item = (&Hash32, Side)> {
        self.steps.iter().filter_map(|s| match s {
            PathStep::Sibling(h, side) => Some((h, *side)),
            PathStep::Promoted => None,
        })
    }

    /// The leaf index encoded by the step sequence, if the steps are
    /// well formed (no trailing promotions, fits in 64 bits).
    pub fn implied_index(&self) -> Option<u64> {
        if self.steps.len() > 63 || matches!(self.steps.last(), Some(PathStep::Promoted)) {
            return None;
        }
        let mut index = 0u64;
        for (level, step) in self.steps.iter().enumerate() {
            if let PathStep::Sibling(_, Side::Left) = step {
                index |= 1 << level;
            }
        }
        Some(index)
    }

    /// True when `leaf_index` agrees with the path's shape.
    pub fn is_consistent(&self) -> bool {
        self.implied_index() == Some(self.leaf_index)
    }
}

/// Folds a leaf up its authentication path.
pub fn get_merkle_root(path: &AuthPath, leaf: &[u8]) -> Hash32 {
    root_from_leaf_hash(path, leaf_hash(leaf))
}

pub fn root_from_leaf_hash(path: &AuthPath, leaf_hash: Hash32) -> Hash32 {
    path.siblings().fold(leaf_hash, |acc, (sib, side)| match side {
        Side::Left => node_hash(sib, &acc),
        Side::Right => node_hash(&acc, sib),
    })
}
