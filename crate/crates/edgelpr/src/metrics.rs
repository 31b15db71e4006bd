//! Retrieval quality metrics: Recall@k, mean reciprocal rank, a top-1
//! precision/recall sweep (max F1, PR AUC) and top-1 distance histograms.
//!
//! All functions take query results parallel to their ground-truth positive
//! sets; queries without positives must be filtered out beforehand.

use crate::retrieval::{GroundTruth, QueryResult};
use std::collections::BTreeMap;
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no queries left after filtering")]
    NoQueries,
    #[error("results and ground truth lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

fn check(results: &[QueryResult], positives: &[Vec<u64>]) -> Result<(), MetricsError> {
    if results.len() != positives.len() {
        return Err(MetricsError::LengthMismatch(results.len(), positives.len()));
    }
    if results.is_empty() {
        return Err(MetricsError::NoQueries);
    }
    Ok(())
}

/// Recall@k = fraction of queries with at least one positive in the top k.
pub fn recall_at_k(
    results: &[QueryResult],
    positives: &[Vec<u64>],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, MetricsError> {
    check(results, positives)?;
    let mut out = BTreeMap::new();
    for &k in ks {
        let hits = results
            .iter()
            .zip(positives)
            .filter(|(r, pos)| {
                let set: HashSet<u64> = pos.iter().copied().collect();
                r.hits.iter().take(k).any(|(id, _)| set.contains(id))
            })
            .count();
        out.insert(k, hits as f64 / results.len() as f64);
    }
    Ok(out)
}

/// Mean over queries of 1 / rank of the first positive; a query whose ranked
/// list contains no positive contributes 0.
pub fn mrr(results: &[QueryResult], positives: &[Vec<u64>]) -> Result<f64, MetricsError> {
    check(results, positives)?;
    let mut acc = 0.0f64;
    for (r, pos) in results.iter().zip(positives) {
        let set: HashSet<u64> = pos.iter().copied().collect();
        if let Some(rank) = r.hits.iter().position(|(id, _)| set.contains(id)) {
            acc += 1.0 / (rank + 1) as f64;
        }
    }
    Ok(acc / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrPoint {
    /// Sweep thresholds include the -inf and +inf sentinels, which JSON has
    /// no literal for, so non-finite values round-trip as strings.
    #[serde(with = "json_float")]
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

mod json_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            serializer.serialize_f64(*value)
        } else if *value > 0.0 {
            serializer.serialize_str("inf")
        } else if *value < 0.0 {
            serializer.serialize_str("-inf")
        } else {
            serializer.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(v) => Ok(v),
            Raw::Text(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!(
                    "invalid threshold: {other}"
                ))),
            },
        }
    }
}

/// Top-1 threshold sweep. Every query accepts its top-1 candidate when the
/// candidate's distance is at or below the threshold; the sweep visits every
/// distinct observed distance plus -inf and +inf. Precision at an empty
/// prediction set is 1 by convention; AUC is trapezoidal over the
/// recall-ordered sweep.
pub fn pr_curve(
    results: &[QueryResult],
    positives: &[Vec<u64>],
) -> Result<(Vec<PrPoint>, f64, f64), MetricsError> {
    check(results, positives)?;
    let top1: Vec<(f64, bool)> = results
        .iter()
        .zip(positives)
        .map(|(r, pos)| {
            let (id, dist) = r.hits[0];
            (dist as f64, pos.contains(&id))
        })
        .collect();
    // False negatives are correct top-1 matches rejected by the threshold;
    // a query whose nearest neighbor is wrong is unrecoverable at every
    // threshold and only ever contributes a false positive.
    let total_correct = top1.iter().filter(|&&(_, c)| c).count() as f64;

    let mut thresholds: Vec<f64> = vec![f64::NEG_INFINITY, f64::INFINITY];
    thresholds.extend(top1.iter().map(|&(d, _)| d));
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut points = Vec::with_capacity(thresholds.len());
    let mut max_f1 = 0.0f64;
    for &tau in &thresholds {
        let tp = top1.iter().filter(|&&(d, c)| d <= tau && c).count() as f64;
        let fp = top1.iter().filter(|&&(d, c)| d <= tau && !c).count() as f64;
        let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        let recall = if total_correct == 0.0 {
            0.0
        } else {
            tp / total_correct
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        max_f1 = max_f1.max(f1);
        points.push(PrPoint {
            threshold: tau,
            precision,
            recall,
        });
    }

    // recall is non-decreasing along ascending thresholds, so the sweep order
    // is already the integration order
    let mut auc = 0.0f64;
    for pair in points.windows(2) {
        let dr = pair[1].recall - pair[0].recall;
        auc += dr * (pair[0].precision + pair[1].precision) / 2.0;
    }
    Ok((points, max_f1, auc))
}

/// Histograms of top-1 distances for correct and incorrect queries; uniform
/// bins over [0, 2], values at or above 2 land in the last bin.
pub fn distance_distribution(
    results: &[QueryResult],
    positives: &[Vec<u64>],
    bins: usize,
) -> (Vec<u64>, Vec<u64>) {
    assert!(bins >= 1, "at least one bin");
    let mut pos_hist = vec![0u64; bins];
    let mut neg_hist = vec![0u64; bins];
    for (r, pos) in results.iter().zip(positives) {
        let (id, dist) = r.hits[0];
        let bin = ((dist as f64 / 2.0 * bins as f64) as usize).min(bins - 1);
        if pos.contains(&id) {
            pos_hist[bin] += 1;
        } else {
            neg_hist[bin] += 1;
        }
    }
    (pos_hist, neg_hist)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub max_f1: f64,
    pub pr_auc: f64,
    pub pr_points: Vec<PrPoint>,
    pub hist_positive: Vec<u64>,
    pub hist_negative: Vec<u64>,
    pub filtered_queries: usize,
    pub scored_queries: usize,
}

/// Drops filtered queries and computes every metric in one pass.
pub fn evaluate(
    results: &[QueryResult],
    gt: &GroundTruth,
    ks: &[usize],
    bins: usize,
) -> Result<EvalReport, MetricsError> {
    if results.len() != gt.positives.len() {
        return Err(MetricsError::LengthMismatch(
            results.len(),
            gt.positives.len(),
        ));
    }
    let mut kept_results = Vec::new();
    let mut kept_pos = Vec::new();
    for ((r, pos), &filtered) in results.iter().zip(&gt.positives).zip(&gt.filtered) {
        if !filtered {
            kept_results.push(r.clone());
            kept_pos.push(pos.clone());
        }
    }
    let recall_at = recall_at_k(&kept_results, &kept_pos, ks)?;
    let mrr = mrr(&kept_results, &kept_pos)?;
    let (pr_points, max_f1, pr_auc) = pr_curve(&kept_results, &kept_pos)?;
    let (hist_positive, hist_negative) = distance_distribution(&kept_results, &kept_pos, bins);
    Ok(EvalReport {
        recall_at,
        mrr,
        max_f1,
        pr_auc,
        pr_points,
        hist_positive,
        hist_negative,
        filtered_queries: gt.filtered_count(),
        scored_queries: kept_results.len(),
    })
}
