//! Weighted concatenation of embeddings from several models.
//!
//! Each member is L2-normalized row by row, scaled by its weight, and the
//! blocks are concatenated in member order. The result is not re-normalized,
//! so for any two ids the squared distance decomposes as
//! `sum_i w_i^2 * d_i^2` over the member blocks.

use thiserror::Error;

use crate::embstore::{align_by_ids, l2_normalize, EmbedError, EmbeddingSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble needs at least one member")]
    NoMembers,
    #[error("member {index} has invalid weight {weight}")]
    InvalidWeight { index: usize, weight: f64 },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub set: EmbeddingSet,
    pub weight: f64,
}

/// Ordered members with positive weights over a common id set.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    members: Vec<EnsembleMember>,
}

impl EnsembleSpec {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::NoMembers);
        }
        for (index, m) in members.iter().enumerate() {
            if !(m.weight.is_finite() && m.weight > 0.0) {
                return Err(EnsembleError::InvalidWeight {
                    index,
                    weight: m.weight,
                });
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }
}

pub fn concat_weighted(spec: &EnsembleSpec) -> Result<EmbeddingSet, EnsembleError> {
    let sets: Vec<EmbeddingSet> = spec.members.iter().map(|m| m.set.clone()).collect();
    let aligned = align_by_ids(&sets)?;
    let normalized = aligned
        .iter()
        .map(l2_normalize)
        .collect::<Result<Vec<_>, _>>()?;

    let total_dim: usize = normalized.iter().map(EmbeddingSet::dim).sum();
    let rows = normalized[0].len();
    let mut data = Vec::with_capacity(rows * total_dim);
    for r in 0..rows {
        for (set, member) in normalized.iter().zip(&spec.members) {
            data.extend(
                set.row(r)
                    .iter()
                    .map(|&v| (f64::from(v) * member.weight) as f32),
            );
        }
    }
    Ok(EmbeddingSet::new(
        normalized[0].ids().to_vec(),
        total_dim,
        data,
    )?)
}
