//! Retrieval metrics: cumulative match characteristic and mean average precision.
//!
//! The counting kernels are generic over any exact or floating field
//! (`f64`, `num_rational::Ratio<i64>`, ...) so results can be compared
//! without tolerance against rational arithmetic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_traits::Num;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{rank, ScoreMatrix};
use crate::scalar::Real;

pub const REPORTED_RANKS: [usize; 4] = [1, 5, 10, 20];

/// What to do with queries that have no correct gallery entry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unmatchable {
    #[default]
    Fail,
    Exclude,
}

/// Field element built from a count without going through floating point.
fn count<T: Num + Clone>(n: usize) -> T {
    let mut acc = T::zero();
    let mut unit = T::one();
    let mut n = n;
    while n > 0 {
        if n & 1 == 1 {
            acc = acc + unit.clone();
        }
        unit = unit.clone() + unit;
        n >>= 1;
    }
    acc
}

/// Per-query hit flags in rank order, after applying the unmatchable policy.
/// Returns the flags and the indices of the queries that were kept.
pub fn hit_lists<L: PartialEq>(
    ranked: &[Vec<usize>],
    query_labels: &[L],
    gallery_labels: &[L],
    policy: Unmatchable,
    query_ids: Option<&[String]>,
) -> Result<(Vec<Vec<bool>>, Vec<usize>)> {
    if ranked.len() != query_labels.len() {
        return Err(Error::DimMismatch { expected: query_labels.len(), found: ranked.len() });
    }
    let mut hits = Vec::with_capacity(ranked.len());
    let mut kept = Vec::with_capacity(ranked.len());
    let mut missing = Vec::new();
    for (q, order) in ranked.iter().enumerate() {
        let mut row = Vec::with_capacity(order.len());
        for &g in order {
            let label = gallery_labels
                .get(g)
                .ok_or_else(|| Error::InvalidInput(format!("ranked index {g} outside gallery of {}", gallery_labels.len())))?;
            row.push(*label == query_labels[q]);
        }
        if row.iter().any(|&h| h) {
            hits.push(row);
            kept.push(q);
        } else {
            missing.push(query_ids.map_or_else(|| format!("query {q}"), |ids| ids[q].clone()));
        }
    }
    if !missing.is_empty() && policy == Unmatchable::Fail {
        return Err(Error::UnmatchableQuery(missing));
    }
    if hits.is_empty() {
        return Err(Error::EmptyInput("matchable queries"));
    }
    Ok((hits, kept))
}

/// Fraction of queries with a correct entry in the top `k` (clamped to the list length).
pub fn cmc_from_hits<T: Num + Clone>(hits: &[Vec<bool>], k: usize) -> T {
    let found = hits.iter().filter(|row| row.iter().take(k.max(1)).any(|&h| h)).count();
    count::<T>(found) / count::<T>(hits.len())
}

/// Mean of the precision values at every correct position.
pub fn average_precision<T: Num + Clone>(hits: &[bool]) -> T {
    let mut sum = T::zero();
    let mut found = 0;
    for (i, _) in hits.iter().enumerate().filter(|(_, &h)| h) {
        found += 1;
        sum = sum + count::<T>(found) / count::<T>(i + 1);
    }
    if found == 0 {
        T::zero()
    } else {
        sum / count::<T>(found)
    }
}

/// Per-query average precisions, computed in parallel.
pub fn per_query_ap<T: Num + Clone + Send>(hits: &[Vec<bool>]) -> Vec<T> {
    hits.par_iter().map(|row| average_precision(row)).collect()
}

/// Mean of values summed in ascending order, so query order cannot change the result.
pub fn order_free_mean<T: Num + Clone + PartialOrd>(values: &[T]) -> T {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("comparable values"));
    let n = sorted.len();
    sorted.into_iter().fold(T::zero(), |a, b| a + b) / count::<T>(n)
}

pub fn cmc<T: Num + Clone, L: PartialEq>(
    ranked: &[Vec<usize>],
    query_labels: &[L],
    gallery_labels: &[L],
    k: usize,
) -> Result<T> {
    let (hits, _) = hit_lists(ranked, query_labels, gallery_labels, Unmatchable::Fail, None)?;
    Ok(cmc_from_hits(&hits, k))
}

pub fn mean_average_precision<T: Num + Clone + PartialOrd + Send, L: PartialEq>(
    ranked: &[Vec<usize>],
    query_labels: &[L],
    gallery_labels: &[L],
) -> Result<T> {
    let (hits, _) = hit_lists(ranked, query_labels, gallery_labels, Unmatchable::Fail, None)?;
    Ok(order_free_mean(&per_query_ap::<T>(&hits)))
}

/// Rank accuracies, mAP and per-query APs of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rank_k: BTreeMap<usize, f64>,
    pub map_score: f64,
    /// `(query id, AP)` in input order.
    pub per_query_ap: Vec<(String, f64)>,
    /// Queries dropped because no gallery entry shares their label.
    pub excluded: Vec<String>,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.rank_k[&1]
    }

    /// `key=value` lines: `queries`, `excluded`, `rank_<k>` and `map`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "queries={}", self.per_query_ap.len());
        let _ = writeln!(s, "excluded={}", self.excluded.len());
        for (k, v) in &self.rank_k {
            let _ = writeln!(s, "rank_{k}={v}");
        }
        let _ = writeln!(s, "map={}", self.map_score);
        s
    }

    /// `query_id,ap` table.
    pub fn per_query_csv(&self) -> String {
        let mut s = String::from("query_id,ap\n");
        for (id, ap) in &self.per_query_ap {
            let _ = writeln!(s, "{id},{ap}");
        }
        s
    }
}

/// Scores a query × gallery matrix against query labels; gallery labels are
/// the matrix's column ids.
pub fn evaluate<T: Real>(scores: &ScoreMatrix<T>, query_labels: &[String], policy: Unmatchable) -> Result<EvalReport> {
    let ranked = rank(scores);
    let (hits, kept) = hit_lists(&ranked, query_labels, &scores.gallery_ids, policy, Some(&scores.query_ids))?;
    let kept_set: std::collections::BTreeSet<usize> = kept.iter().copied().collect();
    let excluded = (0..scores.rows()).filter(|q| !kept_set.contains(q)).map(|q| scores.query_ids[q].clone()).collect();
    let aps = per_query_ap::<f64>(&hits);
    Ok(EvalReport {
        rank_k: REPORTED_RANKS.iter().map(|&k| (k, cmc_from_hits(&hits, k))).collect(),
        map_score: order_free_mean(&aps),
        per_query_ap: kept.iter().zip(&aps).map(|(&q, &ap)| (scores.query_ids[q].clone(), ap)).collect(),
        excluded,
    })
}
