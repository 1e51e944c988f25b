//! Retrieval scoring: mAP@100 and precision diagnostics.
//!
//! Per-query average precision follows the landmark-retrieval benchmark
//! definition:
//!
//! ```text
//! AP@k = 1 / min(m, k) * sum_{j=1..min(n,k)} P(j) * rel(j)
//! ```
//!
//! with `m` relevant ids, `n` predicted ids, `P(j)` the precision of the
//! first `j` predictions and `rel(j)` = 1 when prediction `j` is relevant.
//!
//! Queries whose relevant set is empty are **excluded** from the mean, not
//! scored as zero. A query known to the ground truth but missing from the
//! predictions scores zero.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use thiserror::Error;

use crate::knn::NeighborList;

/// Rank cut-off of the competition metric.
pub const MAP_CUTOFF: usize = 100;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("duplicate prediction {0:?}")]
    DuplicatePrediction(String),
    #[error("duplicate relevant id {0:?}")]
    DuplicateRelevant(String),
    #[error("query {0:?} appears more than once")]
    DuplicateQuery(String),
    #[error("prediction for unknown query {0:?}")]
    UnknownQuery(String),
    #[error("no query has a non-empty relevant set")]
    NoScorableQueries,
    #[error("query {query:?} lists {len} predictions, at most {MAP_CUTOFF} allowed")]
    TooManyPredictions { query: String, len: usize },
    #[error("empty id")]
    EmptyId,
    #[error("k must be at least 1")]
    ZeroK,
}

/// Query id -> set of relevant index ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    relevant: BTreeMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one query. Repeated queries, repeated relevant ids and empty
    /// ids are rejected.
    pub fn insert<I, S>(&mut self, query: impl Into<String>, relevant: I) -> Result<(), MetricError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let query = query.into();
        if query.is_empty() {
            return Err(MetricError::EmptyId);
        }
        if self.relevant.contains_key(&query) {
            return Err(MetricError::DuplicateQuery(query));
        }
        let mut set = BTreeSet::new();
        for id in relevant {
            let id = id.into();
            if id.is_empty() {
                return Err(MetricError::EmptyId);
            }
            if let Some(dup) = set.replace(id) {
                return Err(MetricError::DuplicateRelevant(dup));
            }
        }
        self.relevant.insert(query, set);
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.relevant.iter()
    }

    pub fn len(&self) -> usize {
        self.relevant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevant.is_empty()
    }
}

/// Query id -> ranked list of at most 100 distinct index ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RankedPredictions {
    ranked: BTreeMap<String, Vec<String>>,
}

impl RankedPredictions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        query: impl Into<String>,
        ranked: Vec<String>,
    ) -> Result<(), MetricError> {
        let query = query.into();
        if query.is_empty() {
            return Err(MetricError::EmptyId);
        }
        if self.ranked.contains_key(&query) {
            return Err(MetricError::DuplicateQuery(query));
        }
        if ranked.len() > MAP_CUTOFF {
            return Err(MetricError::TooManyPredictions {
                query,
                len: ranked.len(),
            });
        }
        check_distinct(&ranked)?;
        self.ranked.insert(query, ranked);
        Ok(())
    }

    /// Predictions from kNN output, keeping the first 100 neighbors.
    pub fn from_neighbors(lists: &[NeighborList]) -> Result<Self, MetricError> {
        let mut out = Self::new();
        for list in lists {
            let ranked = list.ids().take(MAP_CUTOFF).map(str::to_owned).collect();
            out.insert(list.query_id.clone(), ranked)?;
        }
        Ok(out)
    }

    pub fn get(&self, query: &str) -> Option<&[String]> {
        self.ranked.get(query).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.ranked.iter()
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

fn check_distinct<S: AsRef<str>>(ids: &[S]) -> Result<(), MetricError> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        let id = id.as_ref();
        if id.is_empty() {
            return Err(MetricError::EmptyId);
        }
        if !seen.insert(id) {
            return Err(MetricError::DuplicatePrediction(id.to_owned()));
        }
    }
    Ok(())
}

/// Average precision of one ranked list truncated at `k`.
pub fn average_precision_at_k<S: AsRef<str>>(
    predicted: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if relevant.is_empty() {
        return Err(MetricError::EmptyRelevant);
    }
    check_distinct(predicted)?;
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (j, id) in predicted.iter().take(k).enumerate() {
        if relevant.contains(id.as_ref()) {
            hits += 1;
            sum += hits as f64 / (j + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(k) as f64)
}

/// Mean AP@`k` over the ground-truth queries that have relevant ids.
pub fn mean_average_precision(
    predictions: &RankedPredictions,
    truth: &GroundTruth,
    k: usize,
) -> Result<f64, MetricError> {
    mean_over_queries(predictions, truth, |ranked, relevant| {
        average_precision_at_k(ranked, relevant, k)
    })
}

/// The competition metric: mean AP with rankings cut at 100.
pub fn mean_ap_at_100(
    predictions: &RankedPredictions,
    truth: &GroundTruth,
) -> Result<f64, MetricError> {
    mean_average_precision(predictions, truth, MAP_CUTOFF)
}

/// Fraction of the first `k` slots holding a relevant id; unfilled slots
/// count as misses.
pub fn precision_at_k<S: AsRef<str>>(
    predicted: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    check_distinct(predicted)?;
    let hits = predicted
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id.as_ref()))
        .count();
    Ok(hits as f64 / k as f64)
}

/// Mean precision@`k` over the same query population as [`mean_ap_at_100`].
pub fn mean_precision_at_k(
    predictions: &RankedPredictions,
    truth: &GroundTruth,
    k: usize,
) -> Result<f64, MetricError> {
    mean_over_queries(predictions, truth, |ranked, relevant| {
        precision_at_k(ranked, relevant, k)
    })
}

fn mean_over_queries<F>(
    predictions: &RankedPredictions,
    truth: &GroundTruth,
    score: F,
) -> Result<f64, MetricError>
where
    F: Fn(&[String], &BTreeSet<String>) -> Result<f64, MetricError>,
{
    if let Some((query, _)) = predictions.iter().find(|(q, _)| truth.get(q).is_none()) {
        return Err(MetricError::UnknownQuery(query.clone()));
    }
    let mut total = 0.0f64;
    let mut scored = 0usize;
    for (query, relevant) in truth.iter().filter(|(_, r)| !r.is_empty()) {
        let ranked = predictions.get(query).unwrap_or(&[]);
        total += score(ranked, relevant)?;
        scored += 1;
    }
    if scored == 0 {
        return Err(MetricError::NoScorableQueries);
    }
    Ok(total / scored as f64)
}
