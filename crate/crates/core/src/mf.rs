//! Biased matrix factorization trained with SGD, used as the collaborative
//! filtering baseline.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ItemId, UserId};
use crate::seed::{derive_seed, rng_from};

/// A training triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub user: UserId,
    pub item: ItemId,
    pub rating: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Share of training entries held out internally for early stopping.
    /// Zero disables early stopping.
    pub validation_fraction: f64,
    pub patience: usize,
    pub init_std: f64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            learning_rate: 0.01,
            l2: 0.05,
            epochs: 200,
            seed: 0,
            validation_fraction: 0.1,
            patience: 20,
            init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfModel {
    pub dim: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub global_mean: f64,
    /// Row-major `n_users x dim`.
    pub user_factors: Vec<f64>,
    /// Row-major `n_items x dim`.
    pub item_factors: Vec<f64>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
}

impl MfModel {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize, global_mean: f64) -> Self {
        Self {
            dim,
            n_users,
            n_items,
            global_mean,
            user_factors: vec![0.0; n_users * dim],
            item_factors: vec![0.0; n_items * dim],
            user_bias: vec![0.0; n_users],
            item_bias: vec![0.0; n_items],
        }
    }

    pub fn user_row(&self, user: UserId) -> &[f64] {
        let d = self.dim;
        &self.user_factors[user as usize * d..(user as usize + 1) * d]
    }

    pub fn item_row(&self, item: ItemId) -> &[f64] {
        let d = self.dim;
        &self.item_factors[item as usize * d..(item as usize + 1) * d]
    }

    fn score(&self, user: usize, item: usize) -> f64 {
        let d = self.dim;
        let p = &self.user_factors[user * d..(user + 1) * d];
        let q = &self.item_factors[item * d..(item + 1) * d];
        self.global_mean + self.user_bias[user] + self.item_bias[item] + dot(p, q)
    }

    pub fn is_finite(&self) -> bool {
        self.user_factors
            .iter()
            .chain(&self.item_factors)
            .chain(&self.user_bias)
            .chain(&self.item_bias)
            .all(|v| v.is_finite())
            && self.global_mean.is_finite()
    }

    /// Little-endian checkpoint: `dim, n_users, n_items` as u64, then
    /// `global_mean`, user factors, item factors, user biases and item
    /// biases as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n_floats = 1 + self.user_factors.len() + self.item_factors.len() + self.n_users + self.n_items;
        let mut out = Vec::with_capacity(24 + 8 * n_floats);
        for v in [self.dim, self.n_users, self.n_items] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.global_mean.to_le_bytes());
        for v in self
            .user_factors
            .iter()
            .chain(&self.item_factors)
            .chain(&self.user_bias)
            .chain(&self.item_bias)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let word = |i: usize| {
            let mut w = [0u8; 8];
            w.copy_from_slice(&bytes[i * 8..i * 8 + 8]);
            w
        };
        let dim = u64::from_le_bytes(word(0)) as usize;
        let n_users = u64::from_le_bytes(word(1)) as usize;
        let n_items = u64::from_le_bytes(word(2)) as usize;
        let global_mean = f64::from_le_bytes(word(3));
        let expected = n_users
            .checked_add(n_items)
            .and_then(|n| n.checked_mul(dim + 1))
            .and_then(|n| n.checked_add(4))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint("header sizes overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} bytes for d={dim}, {n_users} users, {n_items} items; found {}",
                bytes.len()
            )));
        }
        let mut floats = (4..expected / 8).map(|i| f64::from_le_bytes(word(i)));
        let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f64>>();
        let user_factors = take(n_users * dim);
        let item_factors = take(n_items * dim);
        let user_bias = take(n_users);
        let item_bias = take(n_items);
        Ok(Self {
            dim,
            n_users,
            n_items,
            global_mean,
            user_factors,
            item_factors,
            user_bias,
            item_bias,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unclipped prediction `mean + b_u + b_i + p_u . q_i`.
pub fn predict(model: &MfModel, user: UserId, item: ItemId) -> Result<f64> {
    if user as usize >= model.n_users || item as usize >= model.n_items {
        return Err(Error::Validation(format!(
            "(user {user}, item {item}) outside {}x{} model",
            model.n_users, model.n_items
        )));
    }
    Ok(model.score(user as usize, item as usize))
}

pub fn rmse(model: &MfModel, data: &[Observation]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let se: f64 = data
        .iter()
        .map(|o| (o.rating - model.score(o.user as usize, o.item as usize)).powi(2))
        .sum();
    (se / data.len() as f64).sqrt()
}

/// Regularized objective whose per-entry gradient is exactly the SGD step:
/// `sum over entries of 1/2 e^2 + 1/2 l2 (|p_u|^2 + |q_i|^2 + b_u^2 + b_i^2)`.
pub fn objective(model: &MfModel, data: &[Observation], l2: f64) -> f64 {
    data.iter()
        .map(|o| {
            let (u, i) = (o.user as usize, o.item as usize);
            let e = o.rating - model.score(u, i);
            let p = &model.user_factors[u * model.dim..(u + 1) * model.dim];
            let q = &model.item_factors[i * model.dim..(i + 1) * model.dim];
            0.5 * e * e
                + 0.5 * l2 * (dot(p, p) + dot(q, q) + model.user_bias[u].powi(2) + model.item_bias[i].powi(2))
        })
        .sum()
}

/// Gradient of [`objective`], laid out like the model's parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub user_factors: Vec<f64>,
    pub item_factors: Vec<f64>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
}

pub fn gradient(model: &MfModel, data: &[Observation], l2: f64) -> Gradient {
    let d = model.dim;
    let mut g = Gradient {
        user_factors: vec![0.0; model.user_factors.len()],
        item_factors: vec![0.0; model.item_factors.len()],
        user_bias: vec![0.0; model.n_users],
        item_bias: vec![0.0; model.n_items],
    };
    for o in data {
        let (u, i) = (o.user as usize, o.item as usize);
        let e = o.rating - model.score(u, i);
        for f in 0..d {
            let p = model.user_factors[u * d + f];
            let q = model.item_factors[i * d + f];
            g.user_factors[u * d + f] += -e * q + l2 * p;
            g.item_factors[i * d + f] += -e * p + l2 * q;
        }
        g.user_bias[u] += -e + l2 * model.user_bias[u];
        g.item_bias[i] += -e + l2 * model.item_bias[i];
    }
    g
}

fn sgd_step(model: &mut MfModel, o: &Observation, lr: f64, l2: f64) {
    let d = model.dim;
    let (u, i) = (o.user as usize, o.item as usize);
    let e = o.rating - model.score(u, i);
    model.user_bias[u] += lr * (e - l2 * model.user_bias[u]);
    model.item_bias[i] += lr * (e - l2 * model.item_bias[i]);
    for f in 0..d {
        let p = model.user_factors[u * d + f];
        let q = model.item_factors[i * d + f];
        model.user_factors[u * d + f] += lr * (e * q - l2 * p);
        model.item_factors[i * d + f] += lr * (e * p - l2 * q);
    }
}

/// Loss and validation history of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub losses: Vec<f64>,
    pub validation_rmse: Vec<f64>,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const LOSS_WINDOW: usize = 50;
/// Relative slack on the window check so SGD noise at a plateau is not
/// mistaken for divergence.
const WINDOW_SLACK: f64 = 0.01;

/// Trains on `data`, which must contain known ratings only.
pub fn train(
    data: &[Observation],
    n_users: usize,
    n_items: usize,
    config: &MfConfig,
) -> Result<(MfModel, TrainingReport)> {
    validate_config(config)?;
    if data.is_empty() {
        return Err(Error::NoRatings);
    }
    if let Some(o) = data
        .iter()
        .find(|o| o.user as usize >= n_users || o.item as usize >= n_items || !o.rating.is_finite())
    {
        return Err(Error::Validation(format!(
            "observation (user {}, item {}, rating {}) invalid for {n_users}x{n_items}",
            o.user, o.item, o.rating
        )));
    }

    // The holdout is drawn from entry positions only, so rating values never
    // influence which entries train.
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_from(derive_seed(config.seed, "mf-holdout", &[])));
    let n_val = if config.validation_fraction > 0.0 && data.len() >= 10 {
        ((data.len() as f64) * config.validation_fraction).round() as usize
    } else {
        0
    };
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let train_set: Vec<Observation> = train_idx.iter().map(|&i| data[i]).collect();
    let val_set: Vec<Observation> = val_idx.iter().map(|&i| data[i]).collect();

    let global_mean = train_set.iter().map(|o| o.rating).sum::<f64>() / train_set.len() as f64;
    let mut model = MfModel::zeros(n_users, n_items, config.dim, global_mean);
    let normal = Normal::new(0.0, config.init_std)
        .map_err(|e| Error::Validation(format!("init_std: {e}")))?;
    let mut init_rng = rng_from(derive_seed(config.seed, "mf-init", &[]));
    for v in model.user_factors.iter_mut().chain(model.item_factors.iter_mut()) {
        *v = normal.sample(&mut init_rng);
    }

    let mut shuffle_rng = rng_from(derive_seed(config.seed, "mf-shuffle", &[]));
    let mut report = TrainingReport::default();
    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut min_loss = f64::INFINITY;
    let mut epoch_order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        epoch_order.shuffle(&mut shuffle_rng);
        for &i in &epoch_order {
            sgd_step(&mut model, &train_set[i], config.learning_rate, config.l2);
        }

        let loss = objective(&model, &train_set, config.l2);
        report.losses.push(loss);
        report.epochs_run = epoch;
        if !loss.is_finite() || !model.is_finite() || loss > DIVERGENCE_FACTOR * min_loss {
            return Err(Error::Divergence { epoch, loss });
        }
        if epoch > LOSS_WINDOW && loss > report.losses[epoch - 1 - LOSS_WINDOW] * (1.0 + WINDOW_SLACK) {
            return Err(Error::Divergence { epoch, loss });
        }
        min_loss = min_loss.min(loss);

        if val_set.is_empty() {
            best = (loss, model.clone(), epoch);
            continue;
        }
        let v = rmse(&model, &val_set);
        report.validation_rmse.push(v);
        if v < best.0 {
            best = (v, model.clone(), epoch);
        } else if epoch - best.2 >= config.patience {
            break;
        }
    }
    report.best_epoch = best.2;
    Ok((best.1, report))
}

fn validate_config(config: &MfConfig) -> Result<()> {
    let mut problems = Vec::new();
    if config.dim == 0 {
        problems.push("mf.dim must be at least 1".to_string());
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        problems.push(format!("mf.learning_rate {} must be positive", config.learning_rate));
    }
    if !(config.l2 >= 0.0 && config.l2.is_finite()) {
        problems.push(format!("mf.l2 {} must be non-negative", config.l2));
    }
    if config.epochs == 0 {
        problems.push("mf.epochs must be at least 1".to_string());
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        problems.push(format!("mf.validation_fraction {} outside [0, 1)", config.validation_fraction));
    }
    if !(config.init_std > 0.0 && config.init_std.is_finite()) {
        problems.push(format!("mf.init_std {} must be positive", config.init_std));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

/// Top-10 unseen items for a user.
#[derive(Debug, Clone, PartialEq)]
pub struct TopN {
    pub items: Vec<ItemId>,
    /// Fewer than ten unseen items existed.
    pub short: bool,
}

/// Ranks every item not in `known_items` by predicted rating, highest
/// first, ties by lower item id.
pub fn recommend_top10(model: &MfModel, user: UserId, known_items: &HashSet<ItemId>) -> Result<TopN> {
    if user as usize >= model.n_users {
        return Err(Error::Validation(format!("user {user} outside model ({} users)", model.n_users)));
    }
    let mut scored: Vec<(f64, ItemId)> = (0..model.n_items as ItemId)
        .filter(|i| !known_items.contains(i))
        .map(|i| (model.score(user as usize, i as usize), i))
        .collect();
    let n = scored.len().min(crate::promptgen::RECOMMENDATION_COUNT);
    let order = |a: &(f64, ItemId), b: &(f64, ItemId)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if n < scored.len() {
        scored.select_nth_unstable_by(n, order);
        scored.truncate(n);
    }
    scored.sort_by(order);
    Ok(TopN {
        items: scored.into_iter().map(|(_, i)| i).collect(),
        short: n < crate::promptgen::RECOMMENDATION_COUNT,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_closed_form() {
        let model = MfModel::zeros(2, 2, 2, 3.4);
        for (u, i) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(predict(&model, u, i).unwrap(), 3.4);
        }
        let mut model = MfModel::zeros(2, 2, 2, 0.0);
        model.user_factors[..2].copy_from_slice(&[1.0, 0.0]);
        model.item_factors[2..].copy_from_slice(&[2.0, 0.0]);
        assert_eq!(predict(&model, 0, 1).unwrap(), 2.0);

        let model = MfModel {
            dim: 2,
            n_users: 2,
            n_items: 2,
            global_mean: 3.0,
            user_factors: vec![0.5, -1.0, 2.0, 0.25],
            item_factors: vec![1.0, 2.0, -0.5, 4.0],
            user_bias: vec![0.1, -0.2],
            item_bias: vec![0.3, 0.05],
        };
        // 3 - 0.2 + 0.05 + (2 * -0.5 + 0.25 * 4)
        assert!((predict(&model, 1, 1).unwrap() - 2.85).abs() < 1e-12);
        // 3 + 0.1 + 0.3 + (0.5 - 2)
        assert!((predict(&model, 0, 0).unwrap() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn predict_out_of_range() {
        let model = MfModel::zeros(2, 3, 1, 0.0);
        assert!(predict(&model, 2, 0).is_err());
        assert!(predict(&model, 0, 3).is_err());
    }

    #[test]
    fn constant_matrix() {
        let data: Vec<Observation> = (0..20)
            .flat_map(|u| (0..15).map(move |i| Observation { user: u, item: i, rating: 3.0 }))
            .filter(|o| (o.user + o.item) % 3 != 0)
            .collect();
        let config = MfConfig { dim: 1, seed: 4, ..Default::default() };
        let (model, _) = train(&data, 20, 15, &config).unwrap();
        assert!((model.global_mean - 3.0).abs() < 1e-12);
        let test: Vec<Observation> = (0..20)
            .flat_map(|u| (0..15).map(move |i| Observation { user: u, item: i, rating: 3.0 }))
            .filter(|o| (o.user + o.item) % 3 == 0)
            .collect();
        assert!(rmse(&model, &test) < 0.01);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data: Vec<Observation> = (0..10)
            .flat_map(|u| (0..8).map(move |i| Observation { user: u, item: i, rating: ((u * 3 + i) % 5 + 1) as f64 }))
            .collect();
        let config = MfConfig { dim: 4, epochs: 30, seed: 9, ..Default::default() };
        let (a, _) = train(&data, 10, 8, &config).unwrap();
        let (b, _) = train(&data, 10, 8, &config).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let data: Vec<Observation> = (0..10)
            .flat_map(|u| (0..8).map(move |i| Observation { user: u, item: i, rating: ((u + i) % 5 + 1) as f64 }))
            .collect();
        let config = MfConfig { dim: 4, learning_rate: 5.0, init_std: 1.0, ..Default::default() };
        match train(&data, 10, 8, &config) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_problems_are_listed_together() {
        let config = MfConfig { dim: 0, epochs: 0, ..Default::default() };
        match train(&[Observation { user: 0, item: 0, rating: 3.0 }], 1, 1, &config) {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn top10_forced_candidates_and_ties() {
        let mut model = MfModel::zeros(1, 30, 1, 0.0);
        for i in 0..30 {
            model.item_bias[i] = i as f64;
        }
        let known: HashSet<ItemId> = (0..20).collect();
        let top = recommend_top10(&model, 0, &known).unwrap();
        assert_eq!(top.items, (20..30).rev().collect::<Vec<_>>());
        assert!(!top.short);

        let flat = MfModel::zeros(1, 12, 1, 1.0);
        let top = recommend_top10(&flat, 0, &HashSet::new()).unwrap();
        assert_eq!(top.items, (0..10).collect::<Vec<_>>());

        let known: HashSet<ItemId> = (0..25).collect();
        let top = recommend_top10(&model, 0, &known).unwrap();
        assert_eq!(top.items, vec![29, 28, 27, 26, 25]);
        assert!(top.short);
    }

    #[test]
    fn checkpoint_rejects_bad_length() {
        let model = MfModel::zeros(2, 3, 2, 3.5);
        let mut bytes = model.to_bytes();
        assert_eq!(bytes.len(), 8 * (4 + 2 * 2 + 3 * 2 + 2 + 3));
        assert_eq!(MfModel::from_bytes(&bytes).unwrap(), model);
        bytes.pop();
        assert!(MfModel::from_bytes(&bytes).is_err());
        assert!(MfModel::from_bytes(&[0u8; 8]).is_err());
    }
}
