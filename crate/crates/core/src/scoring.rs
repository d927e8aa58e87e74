//! Pair and class scores.
//!
//! A pair's score is `alpha · max_l critical_l + mean_l global_l`, where the
//! critical score sums the `k_top` best aligned-pixel cosines of layer `l` and
//! the global score is the cosine of the layer's mean embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_unchecked, mean_embedding, FeatureMap, PixelMatrix};

/// Per-layer scores of one support/query pair plus their combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub layer_ids: Vec<u32>,
    pub critical: Vec<f64>,
    pub global: Vec<f64>,
    pub combined: f64,
}

/// Cosines of aligned rows `i` of both matrices.
pub fn aligned_cosines(support: &PixelMatrix, query: &PixelMatrix) -> Result<Vec<f64>> {
    if support.n() != query.n() || support.c() != query.c() {
        return Err(Error::invalid(format!(
            "aligned rows need equal shapes, got {}x{} and {}x{}",
            support.n(),
            support.c(),
            query.n(),
            query.c()
        )));
    }
    Ok(support
        .rows()
        .zip(query.rows())
        .map(|(s, q)| cosine_unchecked(s, q))
        .collect())
}

/// Indices of the `k` largest values, in descending value order; equal
/// values keep ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn critical_score(support: &PixelMatrix, query: &PixelMatrix, k_top: usize) -> Result<f64> {
    if k_top == 0 || k_top > support.n() {
        return Err(Error::invalid(format!(
            "k_top = {k_top} outside [1, {}]",
            support.n()
        )));
    }
    let cos = aligned_cosines(support, query)?;
    Ok(top_k_indices(&cos, k_top).iter().map(|&i| cos[i]).sum())
}

pub fn global_score(support: &FeatureMap, query: &FeatureMap) -> Result<f64> {
    if support.dims() != query.dims() {
        return Err(Error::invalid(format!(
            "global score needs equal dims, got {:?} and {:?}",
            support.dims(),
            query.dims()
        )));
    }
    Ok(cosine_unchecked(
        &mean_embedding(support),
        &mean_embedding(query),
    ))
}

/// `alpha · max(critical) + mean(global)` over `(critical, global)` pairs.
pub fn pair_score(per_layer: &[(f64, f64)], alpha: f64) -> Result<f64> {
    if per_layer.is_empty() {
        return Err(Error::invalid("pair score needs at least one layer"));
    }
    let crit = per_layer
        .iter()
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let glob = per_layer.iter().map(|p| p.1).sum::<f64>() / per_layer.len() as f64;
    Ok(alpha * crit + glob)
}

/// Mean of a query's scores against the K supports of one class.
pub fn class_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("class score needs at least one support"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
