//! Library results checked against independent brute-force computations.

mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recrag::metrics::{cdf, hit_at_10, ndcg_at_10};
use recrag::mf::{gradient, objective, predict, recommend_top10, rmse, train, MfModel, Observation};
use recrag::retrieval::{top_k_neighbors, KnownRatings};

fn random_rows(rng: &mut ChaCha8Rng, n_users: usize, n_items: usize, density: f64) -> Vec<Vec<(u32, u8)>> {
    let mut rows = vec![Vec::new(); n_users];
    for row in &mut rows {
        for i in 0..n_items as u32 {
            if rng.gen_bool(density) {
                row.push((i, rng.gen_range(1..=5)));
            }
        }
    }
    rows
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_k_matches_dense_oracle(
        seed in any::<u64>(),
        n_users in 2usize..40,
        n_items in 1usize..30,
        density in 0.05f64..0.9,
        k in 1usize..50,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, n_users, n_items, density);
        let known = KnownRatings::from_rows(rows.clone(), n_items);
        let target = rng.gen_range(0..n_users);
        let got = top_k_neighbors(&known, target as u32, k).unwrap();
        let want = common::dense_top_k(&rows, n_items, target, k);
        prop_assert_eq!(got.len(), want.len());
        for (g, (u, s)) in got.iter().zip(&want) {
            prop_assert_eq!(g.user, *u);
            prop_assert!((g.similarity - s).abs() < 1e-9, "{} vs {}", g.similarity, s);
        }
    }

    #[test]
    fn ndcg_and_hit_match_brute_force(
        rec in Just((0u32..30).collect::<Vec<_>>()).prop_shuffle(),
        len in 0usize..15,
        masked in proptest::collection::hash_set(0u32..30, 1..20),
    ) {
        let rec = &rec[..len];
        let n = ndcg_at_10(rec, &masked).unwrap();
        prop_assert!((n - common::brute_ndcg(rec, &masked)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&n));
        let h = hit_at_10(rec, &masked).unwrap();
        prop_assert!((h - common::brute_hit(rec, &masked)).abs() < 1e-9);
    }

    #[test]
    fn cdf_matches_counting(values in proptest::collection::vec(-50i32..50, 1..200)) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let series = cdf(&values).unwrap();
        let distinct: HashSet<i64> = values.iter().map(|&v| v as i64).collect();
        prop_assert_eq!(series.points.len(), distinct.len());
        for &(x, frac) in &series.points {
            prop_assert!((frac - common::count_below(&values, x)).abs() < 1e-12);
        }
        prop_assert_eq!(series.points.last().unwrap().1, 1.0);
    }

    #[test]
    fn top10_matches_full_argsort(seed in any::<u64>(), n_items in 1usize..40, n_known in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = MfModel::zeros(1, n_items, 2, 3.0);
        for v in model.item_factors.iter_mut().chain(model.user_factors.iter_mut()) {
            // Coarse values force ties.
            *v = rng.gen_range(-2..=2) as f64 * 0.5;
        }
        let known: HashSet<u32> = (0..n_known.min(n_items)).map(|_| rng.gen_range(0..n_items as u32)).collect();
        let top = recommend_top10(&model, 0, &known).unwrap();
        let mut all: Vec<(f64, u32)> = (0..n_items as u32)
            .filter(|i| !known.contains(i))
            .map(|i| (predict(&model, 0, i).unwrap(), i))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<u32> = all.iter().take(10).map(|p| p.1).collect();
        prop_assert_eq!(&top.items, &want);
        prop_assert_eq!(top.short, all.len() < 10);
        prop_assert!(top.items.iter().all(|i| !known.contains(i)));
    }
}

#[test]
fn dense_oracle_agrees_on_large_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..5 {
        let rows = random_rows(&mut rng, 200, 100, 0.1);
        let known = KnownRatings::from_rows(rows.clone(), 100);
        for target in [0usize, 57, 199] {
            let got = top_k_neighbors(&known, target as u32, 20).unwrap();
            let want = common::dense_top_k(&rows, 100, target, 20);
            for (g, (u, s)) in got.iter().zip(&want) {
                assert!((g.similarity - s).abs() < 1e-9);
                assert_eq!(g.user, *u);
            }
        }
    }
}

/// Central finite differences of the objective, one parameter at a time.
fn finite_difference_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_users, n_items, d, l2) = (5usize, 4usize, 2usize, 0.05);
    let data: Vec<Observation> = (0..n_users as u32)
        .flat_map(|u| (0..n_items as u32).map(move |i| (u, i)))
        .filter(|_| rng.gen_bool(0.7))
        .collect::<Vec<_>>()
        .into_iter()
        .map(|(user, item)| Observation {
            user,
            item,
            rating: rng.gen_range(1..=5) as f64,
        })
        .collect();
    let mut model = MfModel::zeros(n_users, n_items, d, 3.0);
    for v in model
        .user_factors
        .iter_mut()
        .chain(model.item_factors.iter_mut())
        .chain(model.user_bias.iter_mut())
        .chain(model.item_bias.iter_mut())
    {
        *v = rng.gen_range(-1.0..1.0);
    }
    let g = gradient(&model, &data, l2);
    let analytic: Vec<f64> = [&g.user_factors, &g.item_factors, &g.user_bias, &g.item_bias]
        .into_iter()
        .flatten()
        .copied()
        .collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (idx, a) in analytic.iter().enumerate() {
        let bump = |m: &mut MfModel, delta: f64| {
            let (uf, itf, ub) = (m.user_factors.len(), m.item_factors.len(), m.user_bias.len());
            let slot = if idx < uf {
                &mut m.user_factors[idx]
            } else if idx < uf + itf {
                &mut m.item_factors[idx - uf]
            } else if idx < uf + itf + ub {
                &mut m.user_bias[idx - uf - itf]
            } else {
                &mut m.item_bias[idx - uf - itf - ub]
            };
            *slot += delta;
        };
        let (mut plus, mut minus) = (model.clone(), model.clone());
        bump(&mut plus, h);
        bump(&mut minus, -h);
        let numeric = (objective(&plus, &data, l2) - objective(&minus, &data, l2)) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..5 {
        let worst = finite_difference_check(seed);
        assert!(worst < 1e-5, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn reordered_training_data_changes_parameters_but_not_quality() {
    let data = common::rank_three(42);
    let config = common::rank_three_config();
    let (a, _) = train(&data.observed, data.n_users, data.n_items, &config).unwrap();
    let mut reversed = data.observed.clone();
    reversed.reverse();
    let (b, _) = train(&reversed, data.n_users, data.n_items, &config).unwrap();
    assert_ne!(a.user_factors, b.user_factors);
    let (ra, rb) = (rmse(&a, &data.held_out), rmse(&b, &data.held_out));
    assert!((ra - rb).abs() < 0.05, "{ra} vs {rb}");
}

#[test]
fn duplicate_recommendations_violate_the_precondition() {
    let masked: HashSet<u32> = [22].into();
    assert!(ndcg_at_10(&[22, 22], &masked).is_err());
    assert!(hit_at_10(&[22, 22], &masked).is_err());
}
