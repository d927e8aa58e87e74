//! Fixed-graph forward recorder and reverse pass for the episode loss.
//!
//! Only the matchers and the classifier carry parameters; everything upstream
//! of the matcher (pooling, attention reweighting, assignment) is computed
//! once per episode by [`prepare_episode`] and treated as constant input.

use crate::error::{Error, Result};
use crate::harness::{argmax_first, Episode, Hyperparams};
use crate::pipeline::{align_layer, AlignedLayer, PooledBank, ScoreConfig};
use crate::scoring::top_k_indices;
use crate::spm::{MatcherParams, RowCache};
use crate::tensor::{dot, mean_embedding, norm, COSINE_EPS};

use super::{softmax_cross_entropy, ModelParams};

/// Parameter-free part of an episode: aligned layers for every
/// (query, class, support) triple plus the classifier input of each query.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub layer_ids: Vec<u32>,
    pub queries: Vec<PreparedQuery>,
}

#[derive(Debug, Clone)]
pub struct PreparedQuery {
    /// Position of the true class within the episode.
    pub true_pos: usize,
    /// Global class label.
    pub label: u32,
    /// Mean embedding of the last selected layer's pooled map.
    pub embedding: Vec<f64>,
    /// `pairs[class][support][layer]`
    pub pairs: Vec<Vec<Vec<AlignedLayer>>>,
}

pub fn prepare_episode(
    bank: &PooledBank,
    episode: &Episode,
    cfg: &ScoreConfig,
) -> Result<PreparedEpisode> {
    let last = bank.maps.len() - 1;
    let mut queries = Vec::with_capacity(episode.query_count());
    for (true_pos, q) in episode.queries() {
        let q_maps = bank.image_maps(q);
        let pairs = episode
            .support
            .iter()
            .map(|supports| {
                supports
                    .iter()
                    .map(|&s| {
                        let s_maps = bank.image_maps(s);
                        bank.layer_ids
                            .iter()
                            .enumerate()
                            .map(|(l, &id)| align_layer(id, s_maps[l], q_maps[l], cfg))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        queries.push(PreparedQuery {
            true_pos,
            label: bank.labels[q],
            embedding: mean_embedding(&bank.maps[last][q]),
            pairs,
        });
    }
    Ok(PreparedEpisode {
        layer_ids: bank.layer_ids.clone(),
        queries,
    })
}

#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub queries: Vec<QueryTrace>,
    /// Mean of `beta · L1 + L2` over queries.
    pub loss: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct QueryTrace {
    pub true_pos: usize,
    pub label: u32,
    pub class_scores: Vec<f64>,
    pub l1: f64,
    pub l2: f64,
    metric_probs: Vec<f64>,
    classifier_probs: Vec<f64>,
    embedding: Vec<f64>,
    pairs: Vec<Vec<PairTrace>>,
}

#[derive(Debug, Clone)]
struct PairTrace {
    layers: Vec<LayerTrace>,
    best_layer: usize,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    matcher: usize,
    critical: f64,
    cosines: Vec<f64>,
    top: Vec<usize>,
    /// Inputs and activations of every matcher row; absent when the forward
    /// pass ran without recording.
    rows: Option<RowRecord>,
}

#[derive(Debug, Clone)]
struct RowRecord {
    support_in: Vec<Vec<f64>>,
    query_in: Vec<Vec<f64>>,
    support: Vec<RowCache>,
    query: Vec<RowCache>,
}

impl EpisodeTrace {
    /// Smallest gap at any discrete or piecewise-linear decision: top-k
    /// cut-offs, best-layer choice, and ReLU pre-activations.
    pub fn selection_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for q in &self.queries {
            for pair in q.pairs.iter().flatten() {
                for layer in &pair.layers {
                    let k = layer.top.len();
                    if k < layer.cosines.len() {
                        let order = top_k_indices(&layer.cosines, k + 1);
                        margin = margin.min(layer.cosines[order[k - 1]] - layer.cosines[order[k]]);
                    }
                    if let Some(rec) = &layer.rows {
                        for cache in rec.support.iter().chain(&rec.query) {
                            for z in cache.z1.iter().chain(&cache.z2) {
                                margin = margin.min(z.abs());
                            }
                        }
                    }
                }
                let best = pair.layers[pair.best_layer].critical;
                for (l, layer) in pair.layers.iter().enumerate() {
                    if l != pair.best_layer {
                        margin = margin.min(best - layer.critical);
                    }
                }
            }
        }
        margin
    }
}

fn matcher_index(params: &ModelParams, layer_id: u32) -> Result<usize> {
    params
        .matchers
        .layers
        .iter()
        .position(|l| l.layer_id == layer_id)
        .ok_or_else(|| Error::Config(format!("no matcher for layer {layer_id}")))
}

/// Runs the parameterised part of the pipeline on a prepared episode.
pub fn episode_forward(
    ep: &PreparedEpisode,
    params: &ModelParams,
    hp: &Hyperparams,
    beta: f64,
    record: bool,
) -> Result<EpisodeTrace> {
    let k = hp.score_config().effective_k_top();
    let matcher_of: Vec<usize> = ep
        .layer_ids
        .iter()
        .map(|&id| matcher_index(params, id))
        .collect::<Result<_>>()?;
    let mut queries = Vec::with_capacity(ep.queries.len());
    let mut loss = 0.0;

    for pq in &ep.queries {
        let mut pairs = Vec::with_capacity(pq.pairs.len());
        let mut class_scores = Vec::with_capacity(pq.pairs.len());
        for class_pairs in &pq.pairs {
            let mut traces = Vec::with_capacity(class_pairs.len());
            let mut sum = 0.0;
            for layers in class_pairs {
                let mut lt = Vec::with_capacity(layers.len());
                let mut global = 0.0;
                for (l, aligned) in layers.iter().enumerate() {
                    let m = matcher_of[l];
                    lt.push(layer_forward(
                        aligned,
                        &params.matchers.layers[m].params,
                        m,
                        k,
                        record,
                    )?);
                    global += aligned.global;
                }
                global /= layers.len() as f64;
                let crit: Vec<f64> = lt.iter().map(|t| t.critical).collect();
                let best_layer = argmax_first(&crit);
                sum += hp.alpha * crit[best_layer] + global;
                traces.push(PairTrace {
                    layers: lt,
                    best_layer,
                });
            }
            class_scores.push(sum / class_pairs.len() as f64);
            pairs.push(traces);
        }
        let (l1, metric_probs) = softmax_cross_entropy(&class_scores, pq.true_pos)?;
        if pq.embedding.len() != params.classifier.c {
            return Err(Error::invalid(format!(
                "classifier expects {} features, embedding has {}",
                params.classifier.c,
                pq.embedding.len()
            )));
        }
        let logits = params.classifier.logits(&pq.embedding);
        let (l2, classifier_probs) = softmax_cross_entropy(&logits, pq.label as usize)?;
        loss += beta * l1 + l2;
        queries.push(QueryTrace {
            true_pos: pq.true_pos,
            label: pq.label,
            class_scores,
            l1,
            l2,
            metric_probs,
            classifier_probs,
            embedding: pq.embedding.clone(),
            pairs,
        });
    }
    let n = queries.len().max(1) as f64;
    Ok(EpisodeTrace {
        queries,
        loss: loss / n,
        alpha: hp.alpha,
        beta,
    })
}

fn layer_forward(
    aligned: &AlignedLayer,
    p: &MatcherParams,
    matcher: usize,
    k: usize,
    record: bool,
) -> Result<LayerTrace> {
    if aligned.support.c() != p.c {
        return Err(Error::invalid(format!(
            "layer {} has {} channels, matcher expects {}",
            aligned.layer_id,
            aligned.support.c(),
            p.c
        )));
    }
    let support: Vec<RowCache> = aligned.support.rows().map(|r| p.forward_row(r)).collect();
    let query: Vec<RowCache> = aligned.query.rows().map(|r| p.forward_row(r)).collect();
    let cosines: Vec<f64> = support
        .iter()
        .zip(&query)
        .map(|(s, q)| crate::tensor::cosine_unchecked(&s.out, &q.out))
        .collect();
    let top = top_k_indices(&cosines, k);
    let critical = top.iter().map(|&i| cosines[i]).sum();
    let rows = record.then(|| RowRecord {
        support_in: aligned.support.rows().map(<[f64]>::to_vec).collect(),
        query_in: aligned.query.rows().map(<[f64]>::to_vec).collect(),
        support,
        query,
    });
    Ok(LayerTrace {
        matcher,
        critical,
        cosines,
        top,
        rows,
    })
}

/// Gradient of `scale · trace.loss` with respect to every parameter.
pub fn backward(trace: &EpisodeTrace, params: &ModelParams, scale: f64) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    let per_query = scale / trace.queries.len().max(1) as f64;

    for q in &trace.queries {
        // L2: d/dlogit = p − onehot
        let cls = &mut grads.classifier;
        for (c, &p) in q.classifier_probs.iter().enumerate() {
            let d = per_query * (p - if c == q.label as usize { 1.0 } else { 0.0 });
            cls.b[c] += d;
            for (gw, e) in cls.w[c * cls.c..(c + 1) * cls.c]
                .iter_mut()
                .zip(&q.embedding)
            {
                *gw += d * e;
            }
        }

        if trace.beta == 0.0 || trace.alpha == 0.0 {
            continue;
        }
        for (c, class_pairs) in q.pairs.iter().enumerate() {
            let d_class = per_query
                * trace.beta
                * (q.metric_probs[c] - if c == q.true_pos { 1.0 } else { 0.0 });
            let d_pair = d_class / class_pairs.len() as f64;
            for pair in class_pairs {
                let layer = &pair.layers[pair.best_layer];
                let d_crit = trace.alpha * d_pair;
                let rec = layer.rows.as_ref().ok_or_else(|| {
                    Error::Internal("trace was recorded without matcher activations".into())
                })?;
                let p = &params.matchers.layers[layer.matcher].params;
                let g = &mut grads.matchers.layers[layer.matcher].params;
                for &i in &layer.top {
                    let (s, qr) = (&rec.support[i], &rec.query[i]);
                    let (ds, dq) = cosine_grads(&s.out, &qr.out, layer.cosines[i], d_crit);
                    row_backward(p, g, &rec.support_in[i], s, &ds);
                    row_backward(p, g, &rec.query_in[i], qr, &dq);
                }
            }
        }
    }
    Ok(grads)
}

/// Upstream `d` times the gradient of `cos(a, b)` with respect to `a` and `b`.
fn cosine_grads(a: &[f64], b: &[f64], cos: f64, d: f64) -> (Vec<f64>, Vec<f64>) {
    let na = norm(a);
    let nb = norm(b);
    if na < COSINE_EPS || nb < COSINE_EPS {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    debug_assert!((dot(a, b) / (na * nb) - cos).abs() < 1e-12);
    let inv = 1.0 / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| d * (y * inv - cos * x / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| d * (x * inv - cos * y / (nb * nb)))
        .collect();
    (ga, gb)
}

/// Accumulates parameter gradients of one matcher row given `d out`.
fn row_backward(
    p: &MatcherParams,
    g: &mut MatcherParams,
    input: &[f64],
    cache: &RowCache,
    d_out: &[f64],
) {
    let (c, hid) = (p.c, p.hidden);
    let dz2: Vec<f64> = d_out
        .iter()
        .zip(&cache.z2)
        .map(|(d, z)| if *z > 0.0 { *d } else { 0.0 })
        .collect();
    let mut dz1 = vec![0.0; hid];
    for (u, (&z1, dz)) in cache.z1.iter().zip(&mut dz1).enumerate() {
        let a = z1.max(0.0);
        let w = &p.w2[u * c..(u + 1) * c];
        let gw = &mut g.w2[u * c..(u + 1) * c];
        let mut dh = 0.0;
        for k in 0..c {
            gw[k] += a * dz2[k];
            dh += dz2[k] * w[k];
        }
        if z1 > 0.0 {
            *dz = dh;
        }
    }
    for (gb, d) in g.b2.iter_mut().zip(&dz2) {
        *gb += d;
    }
    for (gb, d) in g.b1.iter_mut().zip(&dz1) {
        *gb += d;
    }
    for (k, &x) in input.iter().enumerate() {
        for (gw, d) in g.w1[k * hid..(k + 1) * hid].iter_mut().zip(&dz1) {
            *gw += x * d;
        }
    }
}
