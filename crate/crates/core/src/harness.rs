//! N-way K-shot episodes: sampling, query classification, batch evaluation
//! with 95% confidence intervals, and the assignment-solver benchmark.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bank::FeatureBank;
use crate::error::{Error, Result};
use crate::pipeline::{AssignMethod, PooledBank, ScoreConfig};
use crate::spm::{hungarian_assign, MatcherSet, MatchingMatrix};

/// Per-dataset `(alpha, beta)` defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    MiniImageNet,
    TieredImageNet,
    CifarFs,
    Cub,
}

impl Preset {
    pub fn alpha_beta(self) -> (f64, f64) {
        match self {
            Preset::MiniImageNet => (0.25, 0.25),
            Preset::TieredImageNet => (0.25, 0.25),
            Preset::CifarFs => (1.0, 0.5),
            Preset::Cub => (1.0, 1.5),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "miniimagenet" => Ok(Preset::MiniImageNet),
            "tieredimagenet" => Ok(Preset::TieredImageNet),
            "cifarfs" | "cifarfc" => Ok(Preset::CifarFs),
            "cub" | "cub200" | "cub2002011" => Ok(Preset::Cub),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k_top: usize,
    pub pooled: usize,
    pub layer_ids: Vec<u32>,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub episode_count: usize,
    pub seed: u64,
    pub assign: AssignMethod,
}

impl Default for Hyperparams {
    fn default() -> Self {
        let (alpha, beta) = Preset::MiniImageNet.alpha_beta();
        Self {
            temperature: 5.0,
            alpha,
            beta,
            k_top: 5,
            pooled: 3,
            layer_ids: vec![7, 8],
            n_way: 5,
            k_shot: 1,
            query_per_class: 15,
            episode_count: 2000,
            seed: 42,
            assign: AssignMethod::Hungarian,
        }
    }
}

impl Hyperparams {
    pub fn with_preset(mut self, preset: Preset) -> Self {
        (self.alpha, self.beta) = preset.alpha_beta();
        self
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            temperature: self.temperature,
            alpha: self.alpha,
            k_top: self.k_top,
            pooled: self.pooled,
            assign: self.assign,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.score_config().validate()?;
        if self.n_way < 2 {
            return Err(Error::Config(format!(
                "n_way must be >= 2, got {}",
                self.n_way
            )));
        }
        if self.k_shot == 0 || self.query_per_class == 0 || self.episode_count == 0 {
            return Err(Error::Config(
                "k_shot, query_per_class and episode_count must be positive".into(),
            ));
        }
        if self.layer_ids.is_empty() {
            return Err(Error::Config("at least one layer must be selected".into()));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        Ok(())
    }
}

/// One sampled task. `support[c]` and `query[c]` hold image indices of
/// `classes[c]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Episode {
    pub classes: Vec<u32>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    /// `(class position, image)` for every query, class-major.
    pub fn queries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(c, imgs)| imgs.iter().map(move |&i| (c, i)))
    }

    pub fn query_count(&self) -> usize {
        self.query.iter().map(Vec::len).sum()
    }
}

/// RNG for episode `index`: the seed picks the key, the index picks the stream.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_episode(bank: &FeatureBank, hp: &Hyperparams, rng: &mut impl Rng) -> Result<Episode> {
    sample_from_groups(&bank.images_by_class(), hp, rng)
}

/// Samples classes without replacement among those with enough images, then
/// support and query images without replacement within each class.
pub fn sample_from_groups(
    groups: &[Vec<usize>],
    hp: &Hyperparams,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let need = hp.k_shot + hp.query_per_class;
    let eligible: Vec<usize> = (0..groups.len())
        .filter(|&c| groups[c].len() >= need)
        .collect();
    if eligible.len() < hp.n_way {
        return Err(Error::Config(format!(
            "{}-way episodes need {} classes with >= {need} images each, bank has {} \
             (short by {})",
            hp.n_way,
            hp.n_way,
            eligible.len(),
            hp.n_way - eligible.len()
        )));
    }
    let mut classes = Vec::with_capacity(hp.n_way);
    let mut support = Vec::with_capacity(hp.n_way);
    let mut query = Vec::with_capacity(hp.n_way);
    for ci in sample(rng, eligible.len(), hp.n_way) {
        let class = eligible[ci];
        let imgs = &groups[class];
        let picked: Vec<usize> = sample(rng, imgs.len(), need)
            .into_iter()
            .map(|i| imgs[i])
            .collect();
        classes.push(class as u32);
        support.push(picked[..hp.k_shot].to_vec());
        query.push(picked[hp.k_shot..].to_vec());
    }
    Ok(Episode {
        classes,
        support,
        query,
    })
}

/// Index of the maximum, ties to the lowest index.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Scores a query against every class of the episode (mean over that class's
/// supports) and returns `(predicted class position, class scores)`.
pub fn classify_query(
    bank: &PooledBank,
    episode: &Episode,
    query: usize,
    matchers: Option<&MatcherSet>,
    cfg: &ScoreConfig,
) -> Result<(usize, Vec<f64>)> {
    let mut scores = Vec::with_capacity(episode.classes.len());
    for supports in &episode.support {
        let per_support = supports
            .iter()
            .map(|&s| bank.score(s, query, matchers, cfg).map(|b| b.combined))
            .collect::<Result<Vec<_>>>()?;
        scores.push(crate::scoring::class_score(&per_support)?);
    }
    Ok((argmax_first(&scores), scores))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub episode_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci95: f64,
    /// `[episode][query][class]` scores, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_matrices: Option<Vec<Vec<Vec<f64>>>>,
}

impl EvalReport {
    pub fn from_accuracies(acc: Vec<f64>) -> Self {
        let (mean, ci95) = mean_ci95(&acc);
        Self {
            episode_accuracies: acc,
            mean_accuracy: mean,
            ci95,
            score_matrices: None,
        }
    }

    /// `episode,accuracy` rows followed by `mean` and `ci95` summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode,accuracy\n");
        for (i, a) in self.episode_accuracies.iter().enumerate() {
            let _ = writeln!(s, "{i},{a}");
        }
        let _ = writeln!(s, "mean,{}", self.mean_accuracy);
        let _ = writeln!(s, "ci95,{}", self.ci95);
        s
    }
}

/// Mean and `1.96 · s / √n` with the sample standard deviation `s`
/// (zero for a single value).
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

pub fn evaluate(
    bank: &PooledBank,
    matchers: Option<&MatcherSet>,
    hp: &Hyperparams,
    dump_scores: bool,
) -> Result<EvalReport> {
    let cfg = hp.score_config();
    evaluate_with(bank, hp, dump_scores, |_, episode, query| {
        classify_query(bank, episode, query, matchers, &cfg).map(|(_, s)| s)
    })
}

/// Runs `hp.episode_count` episodes in parallel, scoring queries with
/// `class_scores(episode_index, episode, query_image)`. Results do not depend
/// on the number of worker threads.
pub fn evaluate_with<F>(
    bank: &PooledBank,
    hp: &Hyperparams,
    dump_scores: bool,
    class_scores: F,
) -> Result<EvalReport>
where
    F: Fn(usize, &Episode, usize) -> Result<Vec<f64>> + Sync,
{
    hp.validate()?;
    let groups = group_labels(&bank.labels, bank.class_count);
    let results = (0..hp.episode_count)
        .into_par_iter()
        .map(|e| {
            let mut rng = episode_rng(hp.seed, e as u64);
            let episode = sample_from_groups(&groups, hp, &mut rng)?;
            let mut correct = 0usize;
            let mut matrix = Vec::with_capacity(episode.query_count());
            for (truth, q) in episode.queries() {
                let scores = class_scores(e, &episode, q)?;
                if scores.len() != episode.classes.len() {
                    return Err(Error::Internal(format!(
                        "{} class scores for a {}-way episode",
                        scores.len(),
                        episode.classes.len()
                    )));
                }
                if argmax_first(&scores) == truth {
                    correct += 1;
                }
                if dump_scores {
                    matrix.push(scores);
                }
            }
            Ok((correct as f64 / episode.query_count() as f64, matrix))
        })
        .collect::<Result<Vec<_>>>()?;
    let (acc, matrices): (Vec<f64>, Vec<_>) = results.into_iter().unzip();
    let mut report = EvalReport::from_accuracies(acc);
    if dump_scores {
        report.score_matrices = Some(matrices);
    }
    Ok(report)
}

pub(crate) fn group_labels(labels: &[u32], class_count: u32) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); class_count as usize];
    for (i, &l) in labels.iter().enumerate() {
        groups[l as usize].push(i);
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    /// Pooled side length.
    pub d: usize,
    /// Matrix side, `d²`.
    pub n: usize,
    pub mean_seconds: f64,
}

/// Mean Hungarian solve time on random `d² × d²` matching matrices.
pub fn bench_assign(sizes: &[usize], trials: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || trials == 0 || sizes.contains(&0) {
        return Err(Error::Config(
            "bench needs positive sizes and trials".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &d in sizes {
        let n = d * d;
        let mats: Vec<MatchingMatrix> = (0..trials)
            .map(|_| {
                let v = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                MatchingMatrix::from_values(n, v)
            })
            .collect::<Result<_>>()?;
        // warm-up
        hungarian_assign(&mats[0])?;
        let start = Instant::now();
        let mut checksum = 0usize;
        for m in &mats {
            checksum += hungarian_assign(m)?.perm[0];
        }
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(checksum);
        rows.push(BenchRow {
            d,
            n,
            mean_seconds: elapsed / trials as f64,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln(mean_seconds)` against `ln(n)`.
pub fn loglog_slope(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).ln(), r.mean_seconds.max(1e-12).ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("d,n,mean_seconds\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:e}", r.d, r.n, r.mean_seconds);
    }
    s
}
