//! Seeded synthetic rating data for tests, demos and smoke runs.

use rand::seq::index;
use rand::Rng;

use crate::error::Result;
use crate::ingest::{ItemId, Rating, RatingMatrix, UserId};
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub min_ratings: usize,
    pub max_ratings: usize,
    /// Zipf exponent of item popularity; item 0 is the most popular.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_users: 20,
            n_items: 80,
            min_ratings: 6,
            max_ratings: 40,
            popularity_skew: 1.1,
            seed: 0,
        }
    }
}

/// A small rating matrix with Zipf-distributed item popularity. Each item
/// has a latent quality that shifts its ratings, and timestamps increase
/// per user.
pub fn toy_ratings(config: &ToyConfig) -> Result<RatingMatrix> {
    let mut rng = rng_from(config.seed);
    let max = config.max_ratings.min(config.n_items);
    let min = config.min_ratings.clamp(2, max);
    let quality: Vec<f64> = (0..config.n_items).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut entries = Vec::new();
    for user in 0..config.n_users {
        let n = rng.gen_range(min..=max);
        let items = index::sample_weighted(
            &mut rng,
            config.n_items,
            |i| 1.0 / ((i + 1) as f64).powf(config.popularity_skew),
            n,
        )
        .expect("weights are positive and finite");
        let mut t = 1_000_000_000 + rng.gen_range(0..100_000i64);
        for item in items {
            t += rng.gen_range(1..5_000);
            let score = 3.0 + 1.5 * quality[item] + rng.gen_range(-1.0..1.0);
            entries.push(Rating {
                user: user as UserId,
                item: item as ItemId,
                rating: score.round().clamp(1.0, 5.0) as u8,
                timestamp: t,
            });
        }
    }
    RatingMatrix::new(config.n_users, config.n_items, entries)
}

/// Renders a matrix as `u.data`-style tab-separated text.
pub fn to_tsv(matrix: &RatingMatrix) -> String {
    let mut out = String::with_capacity(matrix.len() * 16);
    for r in matrix.entries() {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.user, r.item, r.rating, r.timestamp));
    }
    out
}
