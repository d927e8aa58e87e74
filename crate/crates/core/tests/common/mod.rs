#![allow(dead_code)]

use lwfm_core::bank::{gen_synthetic_bank, FeatureBank, SyntheticSpec};
use lwfm_core::harness::{episode_rng, sample_episode, Hyperparams};
use lwfm_core::pipeline::PooledBank;
use lwfm_core::spm::MatchingMatrix;
use lwfm_core::training::{
    batch_loss, episode_forward, init_params, prepare_episode, ModelParams, PreparedEpisode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;
pub const MIN_MARGIN: f64 = 1e-3;

/// Exhaustive minimum of Σ C[i][p[i]] over all permutations (Heap's algorithm).
pub fn brute_force_min_cost(cost: &[f64], n: usize) -> f64 {
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    let total = |p: &[usize]| {
        p.iter()
            .enumerate()
            .map(|(i, &j)| cost[i * n + j])
            .sum::<f64>()
    };
    let mut best = total(&p);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            best = best.min(total(&p));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

pub fn random_matching(rng: &mut ChaCha8Rng, n: usize) -> MatchingMatrix {
    let v = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    MatchingMatrix::from_values(n, v).unwrap()
}

pub fn synthetic(
    classes: usize,
    per_class: usize,
    layers: &[&str],
    proto: f64,
    noise: f64,
    seed: u64,
) -> FeatureBank {
    gen_synthetic_bank(&SyntheticSpec {
        class_count: classes,
        images_per_class: per_class,
        layers: layers.iter().map(|s| s.parse().unwrap()).collect(),
        prototype_scale: proto,
        noise_scale: noise,
        seed,
    })
    .unwrap()
}

/// A small random training problem for gradient checks: 3-way 1-shot, two
/// layers of 3×3 maps pooled to 2×2 with 4 or 6 channels each, random
/// matcher biases and classifier weights.
pub struct GradConfig {
    pub batch: Vec<PreparedEpisode>,
    pub params: ModelParams,
    pub hp: Hyperparams,
    pub beta: f64,
    pub margin: f64,
    pub attempts: usize,
}

pub fn gradient_config(seed: u64) -> GradConfig {
    let mut attempts = 0;
    loop {
        let sub = seed.wrapping_mul(1_000_003).wrapping_add(attempts as u64);
        attempts += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        let c1 = if rng.random_bool(0.5) { 4 } else { 6 };
        let c2 = if rng.random_bool(0.5) { 4 } else { 6 };
        let l1 = format!("3:3x3x{c1}");
        let l2 = format!("5:3x3x{c2}");
        let bank = synthetic(4, 3, &[&l1, &l2], 1.0, 0.7, sub);
        let hp = Hyperparams {
            temperature: 5.0,
            alpha: rng.random_range(0.5..1.5),
            beta: rng.random_range(0.25..1.5),
            k_top: 2,
            pooled: 2,
            layer_ids: vec![3, 5],
            n_way: 3,
            k_shot: 1,
            query_per_class: 1,
            episode_count: 1,
            seed: sub,
            ..Hyperparams::default()
        };
        let pooled = PooledBank::new(&bank, &hp.layer_ids, hp.pooled).unwrap();
        let episode = sample_episode(&bank, &hp, &mut episode_rng(sub, 0)).unwrap();
        let prepared = prepare_episode(&pooled, &episode, &hp.score_config()).unwrap();

        let mut params = init_params(&pooled, sub);
        for l in &mut params.matchers.layers {
            let p = &mut l.params;
            p.b1.iter_mut()
                .for_each(|b| *b = rng.random_range(-0.3..0.3));
            p.b2.iter_mut()
                .for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        params
            .classifier
            .w
            .iter_mut()
            .chain(params.classifier.b.iter_mut())
            .for_each(|v| *v = rng.random_range(-0.5..0.5));

        let trace = episode_forward(&prepared, &params, &hp, hp.beta, true).unwrap();
        let margin = trace.selection_margin();
        if margin >= MIN_MARGIN {
            return GradConfig {
                batch: vec![prepared],
                beta: hp.beta,
                params,
                hp,
                margin,
                attempts,
            };
        }
    }
}

/// Central finite differences of the batch loss for every parameter.
pub fn finite_difference(cfg: &GradConfig) -> Vec<f64> {
    let n = cfg.params.len();
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let mut plus = cfg.params.clone();
        let mut minus = cfg.params.clone();
        *plus.values_mut().nth(idx).unwrap() += FD_STEP;
        *minus.values_mut().nth(idx).unwrap() -= FD_STEP;
        let lp = batch_loss(&cfg.batch, &plus, &cfg.hp, cfg.beta).unwrap();
        let lm = batch_loss(&cfg.batch, &minus, &cfg.hp, cfg.beta).unwrap();
        out.push((lp - lm) / (2.0 * FD_STEP));
    }
    out
}

/// Checks every component against the tolerance (relative, with an
/// absolute floor). Returns whether all pass and the worst relative error
/// among components with magnitude above `1e-6`.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> (bool, f64) {
    let mut all_ok = true;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        if diff > FD_ABS_FLOOR && diff > FD_REL_TOL * scale {
            all_ok = false;
        }
        if scale > 1e-6 {
            worst = worst.max(diff / scale);
        }
    }
    (all_ok, worst)
}
