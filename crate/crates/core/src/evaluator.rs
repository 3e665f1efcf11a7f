//! Full-ranking top-K evaluation and embedding-population diagnostics.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{s, Array1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Edge, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::objectives::l2_normalize_rows;

pub const DEFAULT_KS: [usize; 2] = [20, 50];

/// Users scored per dense block.
const USER_CHUNK: usize = 256;

fn by_score_then_index(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Indices of the `k` highest scores, skipping the sorted `masked` items.
/// Ties go to the lower item index.
pub fn rank_items(scores: &[f64], masked: &[u32], k: usize) -> Vec<u32> {
    let mut candidates: Vec<(f64, u32)> = Vec::with_capacity(scores.len());
    let mut mask = masked.iter().peekable();
    for (i, &s) in scores.iter().enumerate() {
        let i = i as u32;
        while mask.next_if(|&&m| m < i).is_some() {}
        if mask.peek() == Some(&&i) {
            continue;
        }
        candidates.push((s, i));
    }
    if k == 0 {
        return Vec::new();
    }
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, by_score_then_index);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(by_score_then_index);
    candidates.into_iter().map(|(_, i)| i).collect()
}

fn hits<'a>(topk: &'a [u32], relevant: &'a [u32], k: usize) -> impl Iterator<Item = usize> + 'a {
    topk.iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(r, _)| r)
}

/// `|topk[..k] ∩ relevant| / |relevant|`; `relevant` must be sorted.
pub fn recall_at_k(topk: &[u32], relevant: &[u32], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    hits(topk, relevant, k).count() as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with the ideal DCG truncated at `min(k, |relevant|)`.
pub fn ndcg_at_k(topk: &[u32], relevant: &[u32], k: usize) -> f64 {
    let gain = |rank0: usize| 1.0 / ((rank0 + 2) as f64).log2();
    let ideal: f64 = (0..k.min(relevant.len())).map(gain).sum();
    if ideal == 0.0 {
        return 0.0;
    }
    hits(topk, relevant, k).map(gain).sum::<f64>() / ideal
}

/// Separation between the user and item populations, on L2-normalised rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftDiagnostics {
    /// `‖mean(users) − mean(items)‖₂`.
    pub centroid_distance: f64,
    /// Mean `u·v` over the supplied edges; `None` without edges.
    pub alignment: Option<f64>,
    /// Mean cosine over distinct user pairs.
    pub user_user_cosine: f64,
    pub item_item_cosine: f64,
}

fn mean_pairwise_cosine(rows: &ArrayView2<f64>) -> f64 {
    let n = rows.nrows();
    if n < 2 {
        return 0.0;
    }
    // Σ_{i≠j} x_i·x_j = ‖Σ x‖² − Σ ‖x_i‖²
    let sum = rows.sum_axis(Axis(0));
    let self_terms: f64 = rows.rows().into_iter().map(|r| r.dot(&r)).sum();
    (sum.dot(&sum) - self_terms) / (n * (n - 1)) as f64
}

/// Population diagnostics of `final_emb` (rows `0..n_users` are users).
pub fn embedding_shift(final_emb: &ArrayView2<f64>, n_users: usize, edges: &[Edge]) -> ShiftDiagnostics {
    let (normed, _) = l2_normalize_rows(final_emb);
    let users = normed.slice(s![..n_users, ..]);
    let items = normed.slice(s![n_users.., ..]);
    let centroid = |m: &ArrayView2<f64>| -> Array1<f64> {
        m.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(m.ncols()))
    };
    let diff = centroid(&users) - centroid(&items);
    let alignment = (!edges.is_empty()).then(|| {
        edges
            .iter()
            .map(|e| users.row(e.user as usize).dot(&items.row(e.item as usize)))
            .sum::<f64>()
            / edges.len() as f64
    });
    ShiftDiagnostics {
        centroid_distance: diff.dot(&diff).sqrt(),
        alignment,
        user_user_cosine: mean_pairwise_cosine(&users),
        item_item_cosine: mean_pairwise_cosine(&items),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub n_evaluated_users: usize,
    /// Keys `recall@K` and `ndcg@K`.
    pub metrics: BTreeMap<String, f64>,
    pub diagnostics: ShiftDiagnostics,
}

impl MetricsReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.metrics.get(&format!("recall@{k}")).copied()
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.get(&format!("ndcg@{k}")).copied()
    }
}

/// Train items are always excluded from ranking; test evaluation also
/// excludes validation items.
fn ranking_mask(ds: &InteractionDataset, split: Split) -> Vec<Vec<u32>> {
    let mut mask = ds.items_by_user(Split::Train);
    if split == Split::Test {
        for (m, extra) in mask.iter_mut().zip(ds.items_by_user(Split::Valid)) {
            m.extend(extra);
            m.sort_unstable();
            m.dedup();
        }
    }
    mask
}

/// Recall@K and NDCG@K averaged over users holding at least one item in
/// `split`, ranking every unmasked item by unnormalised dot product.
pub fn evaluate(
    final_emb: &ArrayView2<f64>,
    ds: &InteractionDataset,
    split: Split,
    ks: &[usize],
) -> Result<MetricsReport> {
    if split == Split::Train {
        return Err(Error::config("evaluation split must be valid or test"));
    }
    if ds.split(split).is_empty() {
        return Err(Error::EmptyInput(format!("{split} split")));
    }
    if final_emb.nrows() != ds.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{} embedding rows for {} nodes",
            final_emb.nrows(),
            ds.n_nodes()
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::config("cutoffs must be a non-empty list of positive integers"));
    }
    let max_k = *ks.iter().max().unwrap();
    let relevant = ds.items_by_user(split);
    let mask = ranking_mask(ds, split);
    let users: Vec<usize> = (0..ds.n_users).filter(|&u| !relevant[u].is_empty()).collect();
    let items = final_emb.slice(s![ds.n_users.., ..]);

    let per_chunk: Vec<Vec<f64>> = users
        .par_chunks(USER_CHUNK)
        .map(|chunk| {
            let mut sums = vec![0.0; 2 * ks.len()];
            let rows = crate::objectives::gather_rows(final_emb, chunk.iter().copied());
            let scores = rows.dot(&items.t());
            for (&u, row) in chunk.iter().zip(scores.rows()) {
                let row = row.as_slice().expect("fresh gemm output is contiguous");
                let topk = rank_items(row, &mask[u], max_k);
                for (j, &k) in ks.iter().enumerate() {
                    sums[2 * j] += recall_at_k(&topk, &relevant[u], k);
                    sums[2 * j + 1] += ndcg_at_k(&topk, &relevant[u], k);
                }
            }
            sums
        })
        .collect();

    let mut totals = vec![0.0; 2 * ks.len()];
    for chunk in &per_chunk {
        for (t, c) in totals.iter_mut().zip(chunk) {
            *t += c;
        }
    }
    let n = users.len() as f64;
    let mut metrics = BTreeMap::new();
    for (j, &k) in ks.iter().enumerate() {
        metrics.insert(format!("recall@{k}"), totals[2 * j] / n);
        metrics.insert(format!("ndcg@{k}"), totals[2 * j + 1] / n);
    }
    Ok(MetricsReport {
        split,
        n_evaluated_users: users.len(),
        metrics,
        diagnostics: embedding_shift(final_emb, ds.n_users, ds.split(split)),
    })
}
