//! CMC and mAP for query/gallery retrieval under Euclidean distance.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// `curve[k - 1]` is CMC@k for every k up to the gallery size.
    curve: Vec<f64>,
    pub mean_average_precision: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalSummary {
    pub rank_k_accuracy: BTreeMap<usize, f64>,
    pub mean_average_precision: f64,
    pub queries: usize,
}

impl RetrievalResult {
    /// CMC@k; ranks past the end of the gallery saturate.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "CMC ranks start at 1");
        self.curve[(k - 1).min(self.curve.len() - 1)]
    }

    pub fn curve(&self) -> &[f64] {
        &self.curve
    }

    pub fn summary(&self, ks: &[usize]) -> RetrievalSummary {
        RetrievalSummary {
            rank_k_accuracy: ks.iter().map(|&k| (k, self.rank(k))).collect(),
            mean_average_precision: self.mean_average_precision,
            queries: self.queries,
        }
    }

    /// `k,accuracy` lines for ranks `1..=max_rank`.
    pub fn to_csv(&self, max_rank: usize) -> String {
        let mut out = String::from("k,accuracy\n");
        for k in 1..=max_rank {
            out.push_str(&format!("{k},{}\n", self.rank(k)));
        }
        out
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ranks the gallery for every query; ties break by gallery index.
pub fn cmc_map(
    query: &Matrix,
    gallery: &Matrix,
    query_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<RetrievalResult> {
    if query.rows() == 0 {
        return Err(Error::EmptyInput("cmc_map queries"));
    }
    if query.cols() != gallery.cols() {
        return Err(Error::shape("cmc_map dimension", query.cols(), gallery.cols()));
    }
    if query_ids.len() != query.rows() {
        return Err(Error::shape("cmc_map query ids", query.rows(), query_ids.len()));
    }
    if gallery_ids.len() != gallery.rows() {
        return Err(Error::shape("cmc_map gallery ids", gallery.rows(), gallery_ids.len()));
    }
    let present: HashSet<usize> = gallery_ids.iter().copied().collect();
    if let Some(missing) = query_ids.iter().find(|id| !present.contains(id)) {
        return Err(Error::Config(format!(
            "query id {missing} has no match in the gallery"
        )));
    }

    let n = gallery.rows();
    let mut first_hit = vec![0usize; n];
    let mut ap_sum = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut dist = vec![0.0; n];
    for (q, &qid) in query_ids.iter().enumerate() {
        let qrow = query.row(q);
        for (g, d) in dist.iter_mut().enumerate() {
            *d = squared_distance(qrow, gallery.row(g));
        }
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &g) in order.iter().enumerate() {
            if gallery_ids[g] == qid {
                if hits == 0 {
                    first_hit[rank] += 1;
                }
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / hits as f64;
    }
    let nq = query_ids.len() as f64;
    let mut curve = Vec::with_capacity(n);
    let mut cum = 0usize;
    for count in first_hit {
        cum += count;
        curve.push(cum as f64 / nq);
    }
    Ok(RetrievalResult {
        curve,
        mean_average_precision: ap_sum / nq,
        queries: query_ids.len(),
    })
}
