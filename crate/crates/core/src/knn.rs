//! Exact brute-force k-nearest-neighbor search under Euclidean distance.

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::embstore::EmbeddingSet;

/// Neighbor count used by the retrieval scorer.
pub const DEFAULT_K: usize = 100;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KnnError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("index set is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index_id: String,
    /// Euclidean (not squared) distance.
    pub distance: f64,
}

/// Ranked neighbors of one query: ascending distance, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query_id: String,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.neighbors.iter().map(|n| n.index_id.as_str())
    }
}

/// Squared Euclidean distance, accumulated in f64 in dimension order.
pub fn squared_euclidean(a: &[f32], b: &[f32]) -> Result<f64, KnnError> {
    if a.len() != b.len() {
        return Err(KnnError::DimMismatch(a.len(), b.len()));
    }
    Ok(squared_euclidean_unchecked(a, b))
}

#[inline]
fn squared_euclidean_unchecked(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = f64::from(x) - f64::from(y);
        acc += d * d;
    }
    acc
}

/// Top-`k` exact neighbors in `index` for every query, in query order.
///
/// Lists are truncated to the index size when `k` exceeds it. Queries are
/// processed in parallel; every list depends only on its own query, so the
/// result equals a sequential run.
pub fn top_k_search(
    queries: &EmbeddingSet,
    index: &EmbeddingSet,
    k: usize,
) -> Result<Vec<NeighborList>, KnnError> {
    if k == 0 {
        return Err(KnnError::ZeroK);
    }
    if queries.dim() != index.dim() {
        return Err(KnnError::DimMismatch(queries.dim(), index.dim()));
    }
    if index.is_empty() {
        return Err(KnnError::EmptyIndex);
    }

    // rank[i] is the position of index id i in lexicographic order, so ties
    // compare integers instead of strings.
    let mut by_id: Vec<usize> = (0..index.len()).collect();
    by_id.sort_unstable_by(|&a, &b| index.ids()[a].cmp(&index.ids()[b]));
    let mut rank = vec![0u32; index.len()];
    for (r, &i) in by_id.iter().enumerate() {
        rank[i] = r as u32;
    }

    let keep = k.min(index.len());
    let lists = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let query = queries.row(q);
            let mut scored: Vec<(f64, u32, u32)> = index
                .rows()
                .enumerate()
                .map(|(i, row)| (squared_euclidean_unchecked(query, row), rank[i], i as u32))
                .collect();
            let cmp = |a: &(f64, u32, u32), b: &(f64, u32, u32)| -> Ordering {
                a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
            };
            if keep < scored.len() {
                scored.select_nth_unstable_by(keep - 1, cmp);
                scored.truncate(keep);
            }
            scored.sort_unstable_by(cmp);
            NeighborList {
                query_id: queries.ids()[q].clone(),
                neighbors: scored
                    .into_iter()
                    .map(|(d2, _, i)| Neighbor {
                        index_id: index.ids()[i as usize].clone(),
                        distance: d2.sqrt(),
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(lists)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str], dim: usize, data: Vec<f32>) -> EmbeddingSet {
        EmbeddingSet::new(ids.iter().map(|s| s.to_string()).collect(), dim, data).unwrap()
    }

    #[test]
    fn distance_basics() {
        assert_eq!(squared_euclidean(&[1.0, 2.0], &[1.0, 2.0]), Ok(0.0));
        assert_eq!(squared_euclidean(&[0.0, 0.0], &[3.0, 4.0]), Ok(25.0));
        assert_eq!(
            squared_euclidean(&[0.0], &[3.0, 4.0]),
            Err(KnnError::DimMismatch(1, 2))
        );
    }

    #[test]
    fn self_match_is_rank_one() {
        let index = set(&["x", "y", "z"], 2, vec![0.0, 0.0, 1.0, 1.0, 5.0, 5.0]);
        let queries = set(&["q"], 2, vec![1.0, 1.0]);
        let out = top_k_search(&queries, &index, 2).unwrap();
        assert_eq!(out[0].neighbors[0].index_id, "y");
        assert_eq!(out[0].neighbors[0].distance, 0.0);
        assert_eq!(out[0].neighbors.len(), 2);
    }

    #[test]
    fn k_larger_than_index_truncates() {
        let data: Vec<f32> = (0..40).map(|i| i as f32).collect();
        let names: Vec<String> = (0..40).map(|i| format!("i{i}")).collect();
        let index = EmbeddingSet::new(names, 1, data).unwrap();
        let queries = set(&["q"], 1, vec![3.0]);
        let out = top_k_search(&queries, &index, DEFAULT_K).unwrap();
        assert_eq!(out[0].neighbors.len(), 40);
    }

    #[test]
    fn ties_break_by_id() {
        let index = set(&["b", "c", "a"], 1, vec![1.0, -1.0, 1.0]);
        let queries = set(&["q"], 1, vec![0.0]);
        let out = top_k_search(&queries, &index, 3).unwrap();
        let ids: Vec<_> = out[0].ids().collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let out = top_k_search(&queries, &index, 2).unwrap();
        let ids: Vec<_> = out[0].ids().collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn errors() {
        let index = set(&["a"], 2, vec![0.0, 0.0]);
        let q3 = set(&["q"], 3, vec![0.0; 3]);
        assert_eq!(
            top_k_search(&q3, &index, 1),
            Err(KnnError::DimMismatch(3, 2))
        );
        let empty = EmbeddingSet::empty(2, false).unwrap();
        let q2 = set(&["q"], 2, vec![0.0; 2]);
        assert_eq!(top_k_search(&q2, &empty, 1), Err(KnnError::EmptyIndex));
        assert_eq!(top_k_search(&q2, &index, 0), Err(KnnError::ZeroK));
    }
}
