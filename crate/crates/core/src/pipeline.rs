//! End-to-end scoring of a support/query pair across backbone layers.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::FeatureBank;
use crate::error::{Error, Result};
use crate::lwe::{attention_weights, correlate, reweight};
use crate::scoring::{aligned_cosines, global_score, pair_score, top_k_indices, ScoreBreakdown};
use crate::spm::{
    hungarian_assign, matching_matrix, nn_assign, rearrange, Assignment, MatcherParams, MatcherSet,
};
use crate::tensor::{adaptive_avg_pool, flatten_spatial, FeatureMap, PixelMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignMethod {
    Hungarian,
    Nn,
}

impl FromStr for AssignMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hungarian" => Ok(AssignMethod::Hungarian),
            "nn" | "nearest" | "nearest-neighbor" => Ok(AssignMethod::Nn),
            other => Err(Error::Config(format!(
                "unknown assignment method {other:?} (expected hungarian or nn)"
            ))),
        }
    }
}

impl fmt::Display for AssignMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AssignMethod::Hungarian => "hungarian",
            AssignMethod::Nn => "nn",
        })
    }
}

/// Settings that affect a single pair score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub k_top: usize,
    pub pooled: usize,
    pub assign: AssignMethod,
}

impl ScoreConfig {
    /// `k_top` actually used: a single pooled pixel always uses one.
    pub fn effective_k_top(&self) -> usize {
        if self.pooled == 1 {
            1
        } else {
            self.k_top
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        if self.pooled == 0 {
            return Err(Error::Config("pooled size must be at least 1".into()));
        }
        let n = self.pooled * self.pooled;
        let k = self.effective_k_top();
        if k == 0 || k > n {
            return Err(Error::Config(format!(
                "k_top = {} outside [1, {n}] for pooled size {}",
                self.k_top, self.pooled
            )));
        }
        Ok(())
    }
}

/// One layer of a pair after attention reweighting and pixel alignment.
/// Nothing here depends on trainable parameters.
#[derive(Debug, Clone)]
pub struct AlignedLayer {
    pub layer_id: u32,
    /// Reweighted support pixels, in their original order.
    pub support: PixelMatrix,
    /// Reweighted query pixels, row `i` aligned with support row `i`.
    pub query: PixelMatrix,
    pub global: f64,
    pub assignment: Assignment,
}

/// Reweights a pooled support/query pair and aligns the query to the support.
pub fn align_layer(
    layer_id: u32,
    support: &FeatureMap,
    query: &FeatureMap,
    cfg: &ScoreConfig,
) -> Result<AlignedLayer> {
    let p = cfg.pooled;
    let s = adaptive_avg_pool(support, p, p)?;
    let q = adaptive_avg_pool(query, p, p)?;
    let corr = correlate(&flatten_spatial(&s), &flatten_spatial(&q))?;
    let (ws, wq) = attention_weights(&corr, cfg.temperature)?;
    let s1 = reweight(&s, &ws)?;
    let q1 = reweight(&q, &wq)?;
    let global = global_score(&s1, &q1)?;
    let sp = flatten_spatial(&s1);
    let qp = flatten_spatial(&q1);
    let m = matching_matrix(&sp, &qp)?;
    let assignment = match cfg.assign {
        AssignMethod::Hungarian => hungarian_assign(&m)?,
        AssignMethod::Nn => nn_assign(&m)?,
    };
    let query = rearrange(&qp, &assignment)?;
    Ok(AlignedLayer {
        layer_id,
        support: sp,
        query,
        global,
        assignment,
    })
}

/// Aligned-row cosines after the optional matcher.
pub fn refined_cosines(layer: &AlignedLayer, matcher: Option<&MatcherParams>) -> Result<Vec<f64>> {
    match matcher {
        None => aligned_cosines(&layer.support, &layer.query),
        Some(p) => {
            let s = crate::spm::matcher_forward(&layer.support, p)?;
            let q = crate::spm::matcher_forward(&layer.query, p)?;
            aligned_cosines(&s, &q)
        }
    }
}

pub fn critical_of(cosines: &[f64], k_top: usize) -> f64 {
    top_k_indices(cosines, k_top)
        .iter()
        .map(|&i| cosines[i])
        .sum()
}

pub(crate) fn matcher_for(
    matchers: Option<&MatcherSet>,
    layer_id: u32,
) -> Result<Option<&MatcherParams>> {
    match matchers {
        None => Ok(None),
        Some(set) => set.get(layer_id).map(Some).ok_or_else(|| {
            Error::Config(format!(
                "matcher parameters have no entry for layer {layer_id}"
            ))
        }),
    }
}

/// Scores one pair given its maps per layer (same order as `layer_ids`).
pub fn score_pair(
    layer_ids: &[u32],
    support: &[&FeatureMap],
    query: &[&FeatureMap],
    matchers: Option<&MatcherSet>,
    cfg: &ScoreConfig,
) -> Result<ScoreBreakdown> {
    if layer_ids.is_empty() || support.len() != layer_ids.len() || query.len() != layer_ids.len() {
        return Err(Error::invalid(
            "one support and one query map per layer required",
        ));
    }
    let k = cfg.effective_k_top();
    let mut critical = Vec::with_capacity(layer_ids.len());
    let mut global = Vec::with_capacity(layer_ids.len());
    for ((&id, s), q) in layer_ids.iter().zip(support).zip(query) {
        let aligned = align_layer(id, s, q, cfg)?;
        let cos = refined_cosines(&aligned, matcher_for(matchers, id)?)?;
        if k > cos.len() {
            return Err(Error::invalid(format!(
                "k_top = {k} exceeds {} pooled pixels",
                cos.len()
            )));
        }
        critical.push(critical_of(&cos, k));
        global.push(aligned.global);
    }
    let pairs: Vec<(f64, f64)> = critical
        .iter()
        .copied()
        .zip(global.iter().copied())
        .collect();
    let combined = pair_score(&pairs, cfg.alpha)?;
    Ok(ScoreBreakdown {
        layer_ids: layer_ids.to_vec(),
        critical,
        global,
        combined,
    })
}

/// Selected layers of a bank, pooled once to `pooled × pooled`.
#[derive(Debug, Clone)]
pub struct PooledBank {
    pub layer_ids: Vec<u32>,
    /// `maps[layer][image]`
    pub maps: Vec<Vec<FeatureMap>>,
    pub labels: Vec<u32>,
    pub class_count: u32,
}

impl PooledBank {
    pub fn new(bank: &FeatureBank, layer_ids: &[u32], pooled: usize) -> Result<Self> {
        if layer_ids.is_empty() {
            return Err(Error::Config("at least one layer must be selected".into()));
        }
        let mut maps = Vec::with_capacity(layer_ids.len());
        for &id in layer_ids {
            let layer = bank.layer(id).ok_or_else(|| {
                Error::Config(format!(
                    "layer {id} not in bank (available: {:?})",
                    bank.layer_ids()
                ))
            })?;
            if pooled > layer.h || pooled > layer.w {
                return Err(Error::Config(format!(
                    "layer {id} maps are {}x{}, smaller than pooled size {pooled}",
                    layer.h, layer.w
                )));
            }
            let pooled_maps = layer
                .maps
                .par_iter()
                .map(|m| adaptive_avg_pool(m, pooled, pooled))
                .collect::<Result<Vec<_>>>()?;
            maps.push(pooled_maps);
        }
        Ok(Self {
            layer_ids: layer_ids.to_vec(),
            maps,
            labels: bank.labels.clone(),
            class_count: bank.class_count,
        })
    }

    pub fn image_count(&self) -> usize {
        self.labels.len()
    }

    pub fn image_maps(&self, image: usize) -> Vec<&FeatureMap> {
        self.maps.iter().map(|layer| &layer[image]).collect()
    }

    pub fn channels(&self) -> Vec<(u32, usize)> {
        self.layer_ids
            .iter()
            .zip(&self.maps)
            .map(|(&id, m)| (id, m[0].c()))
            .collect()
    }

    pub fn score(
        &self,
        support: usize,
        query: usize,
        matchers: Option<&MatcherSet>,
        cfg: &ScoreConfig,
    ) -> Result<ScoreBreakdown> {
        if support >= self.image_count() || query >= self.image_count() {
            return Err(Error::Config(format!(
                "image index out of range (bank has {} images)",
                self.image_count()
            )));
        }
        score_pair(
            &self.layer_ids,
            &self.image_maps(support),
            &self.image_maps(query),
            matchers,
            cfg,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ScoreConfig {
        ScoreConfig {
            temperature: 5.0,
            alpha: 0.25,
            k_top: 5,
            pooled: 3,
            assign: AssignMethod::Hungarian,
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        let data = (0..h * w * c)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        FeatureMap::new(h, w, c, data).unwrap()
    }

    #[test]
    fn identical_pair_scores_are_maximal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_map(&mut rng, 5, 5, 8);
        let b = random_map(&mut rng, 3, 3, 16);
        let s = score_pair(&[7, 8], &[&a, &b], &[&a, &b], None, &cfg()).unwrap();
        for (c, g) in s.critical.iter().zip(&s.global) {
            assert!((c - 5.0).abs() < 1e-12);
            assert!((g - 1.0).abs() < 1e-12);
        }
        assert!((s.combined - (0.25 * 5.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn query_pixel_permutation_keeps_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let matchers = MatcherSet::init(&[(7, 6)], 4);
        for _ in 0..20 {
            let s = random_map(&mut rng, 3, 3, 6);
            let q = random_map(&mut rng, 3, 3, 6);
            let mut perm: Vec<usize> = (0..9).collect();
            perm.shuffle(&mut rng);
            let qp = q.permute_pixels(&perm).unwrap();
            for m in [None, Some(&matchers)] {
                let a = score_pair(&[7], &[&s], &[&q], m, &cfg()).unwrap();
                let b = score_pair(&[7], &[&s], &[&qp], m, &cfg()).unwrap();
                assert!((a.combined - b.combined).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_pixel_forces_k_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_map(&mut rng, 4, 4, 3);
        let b = random_map(&mut rng, 4, 4, 3);
        let c = ScoreConfig {
            pooled: 1,
            k_top: 5,
            ..cfg()
        };
        c.validate().unwrap();
        let s = score_pair(&[1], &[&a], &[&b], None, &c).unwrap();
        // one pixel: the critical cosine equals the global cosine
        assert!((s.critical[0] - s.global[0]).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(ScoreConfig {
            temperature: 0.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(ScoreConfig { k_top: 10, ..cfg() }.validate().is_err());
        assert!(ScoreConfig { k_top: 0, ..cfg() }.validate().is_err());
        assert!(ScoreConfig { pooled: 0, ..cfg() }.validate().is_err());
        assert_eq!("NN".parse::<AssignMethod>().unwrap(), AssignMethod::Nn);
        assert!("greedy".parse::<AssignMethod>().is_err());
    }

    #[test]
    fn missing_matcher_layer_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_map(&mut rng, 3, 3, 4);
        let set = MatcherSet::zeros(&[(8, 4)]);
        assert!(matches!(
            score_pair(&[7], &[&a], &[&a], Some(&set), &cfg()),
            Err(Error::Config(_))
        ));
    }
}
