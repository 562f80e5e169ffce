//! Person Re-ID retrieval evaluation: cosine distance matrix, mean Average
//! Precision, CMC curve. [`oracle::oracle_evaluate`] is an independent
//! brute-force reference used by the test suites for exact equivalence.

pub mod oracle;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-norm tolerance for evaluation inputs.
pub const EVAL_UNIT_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub query_embeddings: Tensor<f32>,
    pub query_labels: Vec<i64>,
    pub query_cams: Vec<i64>,
    pub gallery_embeddings: Tensor<f32>,
    pub gallery_labels: Vec<i64>,
    pub gallery_cams: Vec<i64>,
}

impl EvalSet {
    pub fn validate(&self) -> Result<()> {
        let nq = self.query_embeddings.shape()[0];
        let ng = self.gallery_embeddings.shape()[0];
        if nq == 0 || ng == 0 {
            return Err(Error::Eval("query and gallery must be non-empty".into()));
        }
        if self.query_embeddings.ndim() != 2
            || self.gallery_embeddings.ndim() != 2
            || self.query_embeddings.shape()[1] != self.gallery_embeddings.shape()[1]
        {
            return Err(Error::Eval(format!(
                "embedding shapes {:?} vs {:?}",
                self.query_embeddings.shape(),
                self.gallery_embeddings.shape()
            )));
        }
        if self.query_labels.len() != nq || self.query_cams.len() != nq {
            return Err(Error::Eval("query labels/cams length mismatch".into()));
        }
        if self.gallery_labels.len() != ng || self.gallery_cams.len() != ng {
            return Err(Error::Eval("gallery labels/cams length mismatch".into()));
        }
        for (what, emb) in [("query", &self.query_embeddings), ("gallery", &self.gallery_embeddings)]
        {
            let d = emb.shape()[1];
            for (i, row) in emb.data().chunks_exact(d).enumerate() {
                let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > EVAL_UNIT_TOL {
                    return Err(Error::Eval(format!("{what} row {i} norm {norm} not unit")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Drop gallery items sharing both person id and camera id with the
    /// query before ranking (standard cross-camera protocol).
    pub cam_filter: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { cam_filter: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub map: f64,
    /// `cmc[r-1]` = fraction of valid queries whose first relevant gallery
    /// item appears at rank <= r; length equals the gallery size.
    pub cmc: Vec<f64>,
    /// AP of each valid query, in query order.
    pub per_query_ap: Vec<f64>,
    pub num_valid_queries: usize,
}

impl EvalReport {
    pub fn cmc1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn to_json(&self, config_digest: &str) -> serde_json::Value {
        serde_json::json!({
            "map": self.map,
            "cmc": self.cmc,
            "num_valid_queries": self.num_valid_queries,
            "config_digest": config_digest,
        })
    }
}

/// Cosine distance accumulated in f64: `D[i][j] = 1 - q_i . g_j`.
pub fn distance_matrix(queries: &Tensor<f32>, gallery: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    if queries.ndim() != 2 || gallery.ndim() != 2 || queries.shape()[1] != gallery.shape()[1] {
        return Err(Error::Eval(format!(
            "distance_matrix shapes {:?} vs {:?}",
            queries.shape(),
            gallery.shape()
        )));
    }
    let (nq, d) = (queries.shape()[0], queries.shape()[1]);
    let ng = gallery.shape()[0];
    let mut out = vec![vec![0.0f64; ng]; nq];
    for i in 0..nq {
        let q = queries.row(i);
        for j in 0..ng {
            let g = gallery.row(j);
            let mut acc = 0.0f64;
            for k in 0..d {
                acc += q[k] as f64 * g[k] as f64;
            }
            out[i][j] = 1.0 - acc;
        }
    }
    Ok(out)
}

/// AP over a ranked boolean relevance list:
/// `(1/R) * sum over hit positions p of hits_up_to(p) / p`.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let total: usize = ranked_relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::Eval("average_precision needs at least one relevant entry".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (pos, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// Rank the gallery per query (ascending distance, ties broken by gallery
/// index), compute mAP and the CMC curve. Queries left without any relevant
/// gallery item after camera filtering are excluded from both metrics.
pub fn evaluate(set: &EvalSet, options: &EvalOptions) -> Result<EvalReport> {
    set.validate()?;
    let nq = set.query_embeddings.shape()[0];
    let ng = set.gallery_embeddings.shape()[0];
    let dists = distance_matrix(&set.query_embeddings, &set.gallery_embeddings)?;

    let mut per_query_ap = Vec::new();
    let mut first_hit_ranks = Vec::new();
    for i in 0..nq {
        let (q_label, q_cam) = (set.query_labels[i], set.query_cams[i]);
        let mut order: Vec<usize> = (0..ng)
            .filter(|&j| {
                !(options.cam_filter
                    && set.gallery_labels[j] == q_label
                    && set.gallery_cams[j] == q_cam)
            })
            .collect();
        order.sort_by(|&a, &b| {
            dists[i][a].total_cmp(&dists[i][b]).then_with(|| a.cmp(&b))
        });
        let relevance: Vec<bool> = order.iter().map(|&j| set.gallery_labels[j] == q_label).collect();
        if !relevance.iter().any(|&r| r) {
            continue;
        }
        per_query_ap.push(average_precision(&relevance)?);
        let first = relevance.iter().position(|&r| r).expect("relevant exists") + 1;
        first_hit_ranks.push(first);
    }

    let valid = per_query_ap.len();
    if valid == 0 {
        return Err(Error::Eval("no valid queries (no cross-camera relevant items)".into()));
    }
    let map = per_query_ap.iter().sum::<f64>() / valid as f64;
    let mut cmc = vec![0.0f64; ng];
    for &rank in &first_hit_ranks {
        cmc[rank - 1] += 1.0;
    }
    let mut acc = 0.0;
    for slot in cmc.iter_mut() {
        acc += *slot;
        *slot = acc / valid as f64;
    }
    Ok(EvalReport { map, cmc, per_query_ap, num_valid_queries: valid })
}
