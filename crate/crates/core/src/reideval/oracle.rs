//! Brute-force reference evaluation.
//!
//! Deliberately the most naive possible enumeration: explicit pairwise
//! distances, a full sort per query, and a literal AP summation. Kept
//! independent of [`super::evaluate`] so the two can be compared exactly
//! (same distance arithmetic, same by-gallery-index tie-break).

use super::{EvalOptions, EvalReport, EvalSet};
use crate::error::{Error, Result};

/// Hard cap on problem size: this path is quadratic and only for testing.
pub const ORACLE_PAIR_CAP: usize = 1_000_000;

pub fn oracle_evaluate(set: &EvalSet, options: &EvalOptions) -> Result<EvalReport> {
    set.validate()?;
    let nq = set.query_embeddings.shape()[0];
    let ng = set.gallery_embeddings.shape()[0];
    if nq * ng > ORACLE_PAIR_CAP {
        return Err(Error::Eval(format!(
            "oracle cap exceeded: {nq} x {ng} pairs > {ORACLE_PAIR_CAP}"
        )));
    }
    let d = set.query_embeddings.shape()[1];

    let mut per_query_ap = Vec::new();
    let mut first_ranks = Vec::new();

    for qi in 0..nq {
        let q_label = set.query_labels[qi];
        let q_cam = set.query_cams[qi];

        // Explicit pairwise distances for this query.
        let mut ranked: Vec<(f64, usize)> = Vec::new();
        for gj in 0..ng {
            if options.cam_filter
                && set.gallery_labels[gj] == q_label
                && set.gallery_cams[gj] == q_cam
            {
                continue;
            }
            let mut dot = 0.0f64;
            for k in 0..d {
                dot += set.query_embeddings.data()[qi * d + k] as f64
                    * set.gallery_embeddings.data()[gj * d + k] as f64;
            }
            ranked.push((1.0 - dot, gj));
        }

        // Full sort: ascending distance, ties by gallery index.
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

        // Literal AP summation.
        let mut total_relevant = 0usize;
        for &(_, gj) in &ranked {
            if set.gallery_labels[gj] == q_label {
                total_relevant += 1;
            }
        }
        if total_relevant == 0 {
            continue;
        }
        let mut hits = 0usize;
        let mut ap_sum = 0.0f64;
        let mut first_rank = None;
        for (pos, &(_, gj)) in ranked.iter().enumerate() {
            if set.gallery_labels[gj] == q_label {
                hits += 1;
                ap_sum += hits as f64 / (pos + 1) as f64;
                if first_rank.is_none() {
                    first_rank = Some(pos + 1);
                }
            }
        }
        per_query_ap.push(ap_sum / total_relevant as f64);
        first_ranks.push(first_rank.expect("relevant item seen"));
    }

    let valid = per_query_ap.len();
    if valid == 0 {
        return Err(Error::Eval("no valid queries".into()));
    }
    let map = per_query_ap.iter().sum::<f64>() / valid as f64;
    let mut cmc = vec![0.0f64; ng];
    for rank in 1..=ng {
        let count = first_ranks.iter().filter(|&&r| r <= rank).count();
        cmc[rank - 1] = count as f64 / valid as f64;
    }
    Ok(EvalReport { map, cmc, per_query_ap, num_valid_queries: valid })
}
