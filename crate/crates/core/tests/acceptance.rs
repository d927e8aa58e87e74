//! Acceptance criteria for the scoring engine. Run with
//! `cargo test -p lwfm-core --test acceptance -- --nocapture` to see one
//! PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use common::*;
use lwfm_core::bank::{encode_bank, read_bank, write_bank, BankLayer, FeatureBank};
use lwfm_core::harness::{bench_assign, bench_csv, evaluate, loglog_slope, Hyperparams};
use lwfm_core::pipeline::{score_pair, PooledBank};
use lwfm_core::spm::{hungarian_assign, repair_to_bijection, MatcherSet};
use lwfm_core::tensor::FeatureMap;
use lwfm_core::training::batch_loss_and_grad;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(name: &str, ok: bool, detail: String) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

#[test]
fn assignment_matches_exhaustive_search() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for n in 2..=8 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + n as u64);
        for _ in 0..1000 {
            let m = random_matching(&mut rng, n);
            let a = hungarian_assign(&m).unwrap();
            let cost: Vec<f64> = m.values().iter().map(|v| 1.0 - v).collect();
            let best = brute_force_min_cost(&cost, n);
            worst = worst.max((m.total_cost(&a) - best).abs());
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "assignment oracle",
        worst <= 1e-9 && secs < 60.0,
        format!("{checked} matrices, max |hungarian - brute force| = {worst:e}, {secs:.2} s"),
    );
}

#[test]
fn analytic_gradients_agree_with_finite_differences() {
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut resampled = 0;
    for seed in 0..20 {
        let cfg = gradient_config(seed);
        resampled += cfg.attempts - 1;
        let (_, grads) = batch_loss_and_grad(&cfg.batch, &cfg.params, &cfg.hp, cfg.beta).unwrap();
        let analytic: Vec<f64> = grads.values().copied().collect();
        let (ok, w) = compare_gradients(&analytic, &finite_difference(&cfg));
        worst = worst.max(w);
        if !ok {
            failed.push(seed);
        }
    }
    report(
        "gradient correctness",
        failed.is_empty(),
        format!(
            "20 configs ({resampled} resampled for margin), worst relative error {worst:e}, failing seeds {failed:?}"
        ),
    );
}

#[test]
fn pipeline_separates_well_separated_classes() {
    let hp = Hyperparams {
        n_way: 5,
        k_shot: 1,
        episode_count: 2000,
        ..Hyperparams::default()
    };
    let layers = ["7:5x5x8", "8:3x3x16"];

    let bank = synthetic(10, 20, &layers, 10.0, 1.0, 77);
    let pooled = PooledBank::new(&bank, &hp.layer_ids, hp.pooled).unwrap();
    let noisy = evaluate(&pooled, None, &hp, false).unwrap();

    let clean_bank = synthetic(10, 20, &layers, 10.0, 0.0, 78);
    let pooled = PooledBank::new(&clean_bank, &hp.layer_ids, hp.pooled).unwrap();
    let clean = evaluate(&pooled, None, &hp, false).unwrap();

    report(
        "pipeline discriminativeness",
        noisy.mean_accuracy >= 0.99 && clean.mean_accuracy == 1.0 && clean.ci95 == 0.0,
        format!(
            "separation 10: {:.4} ± {:.4}; noise-free: {} ± {}",
            noisy.mean_accuracy, noisy.ci95, clean.mean_accuracy, clean.ci95
        ),
    );
}

fn refs(v: &[FeatureMap]) -> Vec<&FeatureMap> {
    v.iter().collect()
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    let data = (0..h * w * c).map(|_| rng.sample(StandardNormal)).collect();
    FeatureMap::new(h, w, c, data).unwrap()
}

#[test]
fn pair_score_ignores_query_pixel_order() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pooled = rng.random_range(2..=4);
        let channels = [rng.random_range(4..=12), rng.random_range(4..=12)];
        let hp = Hyperparams {
            pooled,
            k_top: rng.random_range(1..=pooled * pooled),
            alpha: rng.random_range(0.1..2.0),
            temperature: rng.random_range(0.5..10.0),
            ..Hyperparams::default()
        };
        let cfg = hp.score_config();
        // maps are already at pooled size so pooling is the identity
        let support: Vec<FeatureMap> = channels
            .iter()
            .map(|&c| random_map(&mut rng, pooled, pooled, c))
            .collect();
        let query: Vec<FeatureMap> = channels
            .iter()
            .map(|&c| random_map(&mut rng, pooled, pooled, c))
            .collect();
        let permuted: Vec<FeatureMap> = query
            .iter()
            .map(|m| {
                let mut perm: Vec<usize> = (0..m.pixel_count()).collect();
                perm.shuffle(&mut rng);
                m.permute_pixels(&perm).unwrap()
            })
            .collect();
        let matchers = (seed % 2 == 0).then(|| {
            let dims: Vec<(u32, usize)> = hp.layer_ids.iter().copied().zip(channels).collect();
            MatcherSet::init(&dims, seed)
        });

        let a = score_pair(
            &hp.layer_ids,
            &refs(&support),
            &refs(&query),
            matchers.as_ref(),
            &cfg,
        )
        .unwrap();
        let b = score_pair(
            &hp.layer_ids,
            &refs(&support),
            &refs(&permuted),
            matchers.as_ref(),
            &cfg,
        )
        .unwrap();
        worst = worst.max((a.combined - b.combined).abs());
    }
    report(
        "end-to-end permutation invariance",
        worst < 1e-9,
        format!("100 pairs, max score change {worst:e}"),
    );
}

#[test]
fn hungarian_dominates_repaired_nearest_neighbour() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut violations = 0;
    let mut brute_mismatch = 0.0f64;
    let mut strictly_better = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let m = random_matching(&mut rng, n);
        let h = m.total(&hungarian_assign(&m).unwrap());
        let nn = m.total(&repair_to_bijection(&m));
        if h < nn - 1e-12 {
            violations += 1;
        }
        if h > nn + 1e-12 {
            strictly_better += 1;
        }
        if n <= 8 {
            let cost: Vec<f64> = m.values().iter().map(|v| 1.0 - v).collect();
            let best = n as f64 - brute_force_min_cost(&cost, n);
            brute_mismatch = brute_mismatch.max((h - best).abs());
        }
    }
    report(
        "hungarian >= nearest neighbour",
        violations == 0 && brute_mismatch <= 1e-9,
        format!(
            "1000 matrices, {violations} violations, strictly better on {strictly_better}, max brute-force gap {brute_mismatch:e}"
        ),
    );
}

#[test]
fn assignment_cost_grows_at_most_cubically() {
    let rows = bench_assign(&[3, 4, 6, 9, 12], 100, 7).unwrap();
    let slope = loglog_slope(&rows);
    print!("{}", bench_csv(&rows));
    report(
        "complexity micro-benchmark",
        slope <= 3.5,
        format!("log-log slope in n = {slope:.3} (in d: {:.3})", 2.0 * slope),
    );
}

fn random_bank(rng: &mut ChaCha8Rng) -> FeatureBank {
    let class_count = rng.random_range(1..=5u32);
    let image_count = rng.random_range(1..=8usize);
    let labels = (0..image_count)
        .map(|_| rng.random_range(0..class_count))
        .collect();
    let layers = (0..rng.random_range(1..=3u32))
        .map(|i| {
            let (h, w, c) = (
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=6),
            );
            let maps = (0..image_count)
                .map(|_| {
                    let data = (0..h * w * c)
                        .map(|_| rng.random_range(-1e3..1e3))
                        .collect();
                    FeatureMap::new(h, w, c, data).unwrap()
                })
                .collect();
            BankLayer {
                layer_id: i * 3 + rng.random_range(0..3),
                h,
                w,
                c,
                maps,
            }
        })
        .collect();
    FeatureBank {
        layers,
        labels,
        class_count,
    }
}

#[test]
fn bank_files_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatched = 0;
    for i in 0..100 {
        let bank = random_bank(&mut rng);
        let first = dir.path().join(format!("{i}-a.fbnk"));
        let second = dir.path().join(format!("{i}-b.fbnk"));
        write_bank(&bank, &first).unwrap();
        let read = read_bank(&first).unwrap();
        write_bank(&read, &second).unwrap();
        let (a, b) = (
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap(),
        );
        if a != b || encode_bank(&read).unwrap() != a {
            mismatched += 1;
        }
    }
    report(
        "format round-trip",
        mismatched == 0,
        format!("100 banks, {mismatched} mismatches"),
    );
}
