//! Layer-wise embedding: cross-correlation of pooled support/query pixels,
//! temperature-softmax attention weights, and per-pixel reweighting.

use crate::error::{Error, Result};
use crate::tensor::{adaptive_avg_pool, dot, flatten_spatial, FeatureMap, PixelMatrix};

/// `n×n` dot products between support pixel `i` (row) and query pixel `j`
/// (column).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    n: usize,
    values: Vec<f64>,
}

impl CorrelationMap {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.len() != n * n {
            return Err(Error::invalid(format!(
                "correlation map of side {n} needs {} values, got {}",
                n * n,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("correlation map has non-finite entries"));
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[j * n + i] = self.values[i * n + j];
            }
        }
        Self { n, values }
    }
}

/// Positive per-pixel weights whose mean is one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Pools both maps to `pooled × pooled` and returns their pixel dot products.
pub fn cross_correlation(
    support: &FeatureMap,
    query: &FeatureMap,
    pooled: usize,
) -> Result<CorrelationMap> {
    if support.c() != query.c() {
        return Err(Error::invalid(format!(
            "support has {} channels, query has {}",
            support.c(),
            query.c()
        )));
    }
    let s = adaptive_avg_pool(support, pooled, pooled)?;
    let q = adaptive_avg_pool(query, pooled, pooled)?;
    correlate(&flatten_spatial(&s), &flatten_spatial(&q))
}

/// Dot-product correlation of two already flattened pixel sets.
pub fn correlate(support: &PixelMatrix, query: &PixelMatrix) -> Result<CorrelationMap> {
    if support.c() != query.c() || support.n() != query.n() {
        return Err(Error::invalid(format!(
            "cannot correlate {}x{} with {}x{}",
            support.n(),
            support.c(),
            query.n(),
            query.c()
        )));
    }
    let n = support.n();
    let mut values = Vec::with_capacity(n * n);
    for s in support.rows() {
        for q in query.rows() {
            values.push(dot(s, q));
        }
    }
    CorrelationMap::from_values(n, values)
}

/// Bidirectional softmax attention.
///
/// Support weight `i` sums, over every query column `j`, the softmax over
/// support positions of `corr[·][j] / T`; query weight `j` sums, over every
/// support row `i`, the softmax over query positions of `corr[i][·] / T`.
/// Each vector therefore sums to `n`.
pub fn attention_weights(
    corr: &CorrelationMap,
    temperature: f64,
) -> Result<(WeightVector, WeightVector)> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = corr.n;
    let mut support_w = vec![0.0; n];
    let mut query_w = vec![0.0; n];
    let mut buf = vec![0.0; n];

    for j in 0..n {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = corr.get(i, j) / temperature;
        }
        softmax_in_place(&mut buf);
        for (acc, p) in support_w.iter_mut().zip(&buf) {
            *acc += p;
        }
    }
    for i in 0..n {
        for (j, b) in buf.iter_mut().enumerate() {
            *b = corr.get(i, j) / temperature;
        }
        softmax_in_place(&mut buf);
        for (acc, p) in query_w.iter_mut().zip(&buf) {
            *acc += p;
        }
    }
    Ok((WeightVector(support_w), WeightVector(query_w)))
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Scales every pixel's channel vector by its weight.
pub fn reweight(m: &FeatureMap, w: &WeightVector) -> Result<FeatureMap> {
    if w.len() != m.pixel_count() {
        return Err(Error::invalid(format!(
            "{} weights for a map with {} pixels",
            w.len(),
            m.pixel_count()
        )));
    }
    let c = m.c();
    let data = m
        .data()
        .chunks_exact(c)
        .zip(&w.0)
        .flat_map(|(px, &wt)| px.iter().map(move |v| v * wt))
        .collect();
    FeatureMap::new(m.h(), m.w(), c, data)
}
