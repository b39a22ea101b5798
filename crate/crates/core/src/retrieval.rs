//! User-user cosine retrieval over known ratings, fraction sampling of
//! neighbor histories, and global popularity statistics.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ItemId, UserId, UserSplit};
use crate::seed::{derive_seed, rng_from};

/// Sparse rating vector: `(item, rating)` pairs sorted by item.
pub type SparseRow = Vec<(ItemId, u8)>;

/// Known-rating rows for every user. Masked ratings never enter this type.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownRatings {
    rows: Vec<SparseRow>,
    sq_norms: Vec<u64>,
    n_items: usize,
}

impl KnownRatings {
    pub fn from_splits(splits: &[UserSplit], n_items: usize) -> Self {
        let rows = splits
            .iter()
            .map(|s| s.known.iter().map(|r| (r.item, r.rating)).collect())
            .collect();
        Self::from_rows(rows, n_items)
    }

    /// Rows need not be sorted; duplicates within a row are not allowed.
    pub fn from_rows(mut rows: Vec<SparseRow>, n_items: usize) -> Self {
        for row in &mut rows {
            row.sort_unstable_by_key(|&(item, _)| item);
        }
        let sq_norms = rows.iter().map(|row| squared_norm(row)).collect();
        Self {
            rows,
            sq_norms,
            n_items,
        }
    }

    pub fn n_users(&self) -> usize {
        self.rows.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn row(&self, user: UserId) -> &[(ItemId, u8)] {
        &self.rows[user as usize]
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn squared_norm(row: &[(ItemId, u8)]) -> u64 {
    row.iter().map(|&(_, r)| (r as u64) * (r as u64)).sum()
}

fn sparse_dot(a: &[(ItemId, u8)], b: &[(ItemId, u8)]) -> u64 {
    let (mut i, mut j, mut dot) = (0, 0, 0u64);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                dot += a[i].1 as u64 * b[j].1 as u64;
                i += 1;
                j += 1;
            }
        }
    }
    dot
}

/// `dot / sqrt(|a|^2 |b|^2)`. Star ratings are small integers, so the dot
/// product and squared norms are exact and identical inputs give exactly 1.
fn cosine_from_parts(dot: u64, sq_a: u64, sq_b: u64) -> f64 {
    if sq_a == 0 || sq_b == 0 {
        return 0.0;
    }
    let sim = dot as f64 / ((sq_a as f64) * (sq_b as f64)).sqrt();
    sim.min(1.0)
}

/// Cosine similarity of two sorted sparse rating vectors, unobserved entries
/// being zero. Zero vectors have similarity 0 with everything.
pub fn cosine_similarity(a: &[(ItemId, u8)], b: &[(ItemId, u8)]) -> f64 {
    cosine_from_parts(sparse_dot(a, b), squared_norm(a), squared_norm(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub user: UserId,
    pub similarity: f64,
}

/// Exact cosine as `(dot, |a|^2 |b|^2)`; compared by cross-multiplying
/// squares so equal similarities tie exactly and fall back to user id.
#[derive(Debug, Clone, Copy)]
struct ExactCosine {
    user: UserId,
    dot: u64,
    sq_product: u64,
}

impl ExactCosine {
    fn ratio(&self) -> (u128, u128) {
        if self.sq_product == 0 {
            (0, 1)
        } else {
            ((self.dot as u128) * (self.dot as u128), self.sq_product as u128)
        }
    }

    fn similarity(&self) -> f64 {
        if self.sq_product == 0 {
            0.0
        } else {
            (self.dot as f64 / (self.sq_product as f64).sqrt()).min(1.0)
        }
    }
}

fn neighbor_order(a: &ExactCosine, b: &ExactCosine) -> Ordering {
    let ((an, ad), (bn, bd)) = (a.ratio(), b.ratio());
    (bn * ad).cmp(&(an * bd)).then(a.user.cmp(&b.user))
}

/// The `min(k, n_users - 1)` users most similar to `target`, by similarity
/// descending and then user id ascending.
pub fn top_k_neighbors(known: &KnownRatings, target: UserId, k: usize) -> Result<Vec<Neighbor>> {
    if target as usize >= known.n_users() {
        return Err(Error::Validation(format!(
            "target user {target} out of range (n_users = {})",
            known.n_users()
        )));
    }
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let t_row = known.row(target);
    let t_sq = known.sq_norms[target as usize];
    let mut all: Vec<ExactCosine> = (0..known.n_users())
        .filter(|&u| u != target as usize)
        .map(|u| ExactCosine {
            user: u as UserId,
            dot: sparse_dot(t_row, &known.rows[u]),
            sq_product: t_sq * known.sq_norms[u],
        })
        .collect();
    let k = k.min(all.len());
    if k < all.len() {
        all.select_nth_unstable_by(k, neighbor_order);
        all.truncate(k);
    }
    all.sort_by(neighbor_order);
    Ok(all
        .iter()
        .map(|c| Neighbor {
            user: c.user,
            similarity: c.similarity(),
        })
        .collect())
}

/// Top-k neighbors plus each neighbor's sampled rating set.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborContext {
    pub target: UserId,
    pub neighbors: Vec<Neighbor>,
    /// Parallel to `neighbors`; each list sorted by item id.
    pub sampled_ratings: Vec<SparseRow>,
    pub fraction: f64,
}

impl NeighborContext {
    pub fn k(&self) -> usize {
        self.neighbors.len()
    }
}

/// `ceil(fraction * n)`, tolerant of float noise in the product.
pub fn sample_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Samples `ceil(fraction * |R_u|)` ratings from each neighbor's known
/// history.
///
/// Each (target, neighbor) pair gets its own permutation seeded from
/// `seed`, and the sample is a prefix of it, so samples nest across
/// fractions and do not depend on neighbor processing order. Items in
/// `exclude` are dropped before sampling.
pub fn sample_neighbor_ratings(
    known: &KnownRatings,
    target: UserId,
    neighbors: &[Neighbor],
    fraction: f64,
    seed: u64,
    exclude: Option<&HashSet<ItemId>>,
) -> Result<NeighborContext> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!("fraction {fraction} outside (0, 1]")));
    }
    let sampled_ratings = neighbors
        .iter()
        .map(|n| {
            let pool: SparseRow = known
                .row(n.user)
                .iter()
                .copied()
                .filter(|(item, _)| exclude.map_or(true, |ex| !ex.contains(item)))
                .collect();
            sample_row(pool, fraction, derive_seed(seed, "neighbor-sample", &[target.into(), n.user.into()]))
        })
        .collect();
    Ok(NeighborContext {
        target,
        neighbors: neighbors.to_vec(),
        sampled_ratings,
        fraction,
    })
}

fn sample_row(pool: SparseRow, fraction: f64, seed: u64) -> SparseRow {
    let take = sample_size(pool.len(), fraction);
    if take >= pool.len() {
        return pool;
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng_from(seed));
    let mut picked: SparseRow = order[..take].iter().map(|&i| pool[i]).collect();
    picked.sort_unstable_by_key(|&(item, _)| item);
    picked
}

/// Whether the fraction applies before or after seen-item filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleOrder {
    #[default]
    SampleThenFilter,
    FilterThenSample,
}

impl FromStr for SampleOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample_then_filter" => Ok(SampleOrder::SampleThenFilter),
            "filter_then_sample" => Ok(SampleOrder::FilterThenSample),
            other => Err(Error::Validation(format!("unknown sample order `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemStat {
    pub count: usize,
    pub avg_rating: f64,
}

/// Per-item rater count and mean rating over known ratings.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityStats {
    stats: Vec<Option<ItemStat>>,
}

impl PopularityStats {
    pub fn get(&self, item: ItemId) -> Option<ItemStat> {
        self.stats.get(item as usize).copied().flatten()
    }

    pub fn count(&self, item: ItemId) -> usize {
        self.get(item).map_or(0, |s| s.count)
    }

    pub fn n_items(&self) -> usize {
        self.stats.len()
    }

    pub fn total_count(&self) -> usize {
        self.stats.iter().flatten().map(|s| s.count).sum()
    }

    /// Items by count descending, then id ascending; items nobody rated are
    /// left out.
    pub fn ranked(&self) -> Vec<ItemId> {
        let mut items: Vec<ItemId> = (0..self.stats.len() as ItemId)
            .filter(|&i| self.count(i) > 0)
            .collect();
        items.sort_by(|&a, &b| self.count(b).cmp(&self.count(a)).then(a.cmp(&b)));
        items
    }
}

pub fn popularity_stats(known: &KnownRatings) -> PopularityStats {
    let mut sums = vec![(0usize, 0u64); known.n_items()];
    for row in known.rows() {
        for &(item, rating) in row {
            let slot = &mut sums[item as usize];
            slot.0 += 1;
            slot.1 += rating as u64;
        }
    }
    PopularityStats {
        stats: sums
            .into_iter()
            .map(|(count, sum)| {
                (count > 0).then(|| ItemStat {
                    count,
                    avg_rating: sum as f64 / count as f64,
                })
            })
            .collect(),
    }
}

/// Writes `target<TAB>neighbor:similarity...` lines, similarities at six
/// decimals.
pub fn write_neighbor_cache(path: impl AsRef<Path>, entries: &[(UserId, Vec<Neighbor>)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (target, neighbors) in entries {
        let _ = write!(out, "{target}");
        for n in neighbors {
            let _ = write!(out, "\t{}:{:.6}", n.user, n.similarity);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_neighbor_cache(path: impl AsRef<Path>) -> Result<Vec<(UserId, Vec<Neighbor>)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: &str| Error::Parse {
        line,
        message: message.to_string(),
    };
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let target = fields
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(idx + 1, "bad target id"))?;
        let neighbors = fields
            .map(|f| {
                let (u, s) = f.split_once(':').ok_or_else(|| bad(idx + 1, "expected neighbor:similarity"))?;
                Ok(Neighbor {
                    user: u.parse().map_err(|_| bad(idx + 1, "bad neighbor id"))?,
                    similarity: s.parse().map_err(|_| bad(idx + 1, "bad similarity"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((target, neighbors));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(v: &[u8]) -> SparseRow {
        v.iter()
            .enumerate()
            .filter(|(_, &r)| r > 0)
            .map(|(i, &r)| (i as ItemId, r))
            .collect()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&dense(&[5, 0, 3]), &dense(&[5, 0, 3])), 1.0);
        assert_eq!(cosine_similarity(&dense(&[5, 0, 0]), &dense(&[0, 3, 0])), 0.0);
        let expected = 20.0 / (34.0f64 * 20.0).sqrt();
        let got = cosine_similarity(&dense(&[5, 0, 3]), &dense(&[4, 2, 0]));
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.76697).abs() < 1e-5);
    }

    #[test]
    fn zero_vector_similarity_is_zero() {
        assert_eq!(cosine_similarity(&[], &dense(&[1, 2])), 0.0);
        assert_eq!(cosine_similarity(&[], &[]), 0.0);
    }

    #[test]
    fn fewer_users_than_k() {
        let known = KnownRatings::from_rows(vec![dense(&[5, 1]), dense(&[1, 5]), dense(&[3, 3])], 2);
        let n = top_k_neighbors(&known, 0, 10).unwrap();
        assert_eq!(n.len(), 2);
        assert_eq!(n[0].user, 2);
    }

    #[test]
    fn identical_vectors_tie_break_by_id() {
        let known = KnownRatings::from_rows(
            vec![dense(&[4, 2, 0]), dense(&[0, 0, 5]), dense(&[4, 2, 0]), dense(&[4, 2, 0])],
            3,
        );
        let n = top_k_neighbors(&known, 3, 2).unwrap();
        assert_eq!(n.iter().map(|x| x.user).collect::<Vec<_>>(), vec![0, 2]);
        assert!(n.iter().all(|x| x.similarity == 1.0));
    }

    #[test]
    fn top_k_validates_inputs() {
        let known = KnownRatings::from_rows(vec![dense(&[1]), dense(&[2])], 1);
        assert!(top_k_neighbors(&known, 2, 1).is_err());
        assert!(top_k_neighbors(&known, 0, 0).is_err());
    }

    #[test]
    fn sampling_sizes() {
        let row: SparseRow = (0..12).map(|i| (i, 3)).collect();
        let short: SparseRow = (0..8).map(|i| (i, 3)).collect();
        let known = KnownRatings::from_rows(vec![vec![(0, 1)], row.clone(), short], 12);
        let neighbors = [Neighbor { user: 1, similarity: 0.5 }, Neighbor { user: 2, similarity: 0.4 }];
        let full = sample_neighbor_ratings(&known, 0, &neighbors, 1.0, 3, None).unwrap();
        assert_eq!(full.sampled_ratings[0], row);
        let quarter = sample_neighbor_ratings(&known, 0, &neighbors, 0.25, 3, None).unwrap();
        assert_eq!(quarter.sampled_ratings[1].len(), 2);
        assert_eq!(quarter.sampled_ratings[0].len(), 3);
        assert_eq!(sample_size(10, 0.7), 7);
        assert_eq!(sample_size(1, 0.25), 1);
    }

    #[test]
    fn sampling_rejects_bad_fraction() {
        let known = KnownRatings::from_rows(vec![vec![(0, 1)], vec![(0, 2)]], 1);
        let n = [Neighbor { user: 1, similarity: 1.0 }];
        for f in [0.0, -0.5, 1.01, f64::NAN] {
            assert!(sample_neighbor_ratings(&known, 0, &n, f, 0, None).is_err());
        }
    }

    #[test]
    fn sampling_excludes_before_sampling() {
        let known = KnownRatings::from_rows(vec![vec![(0, 1)], (0..10).map(|i| (i, 4)).collect()], 10);
        let n = [Neighbor { user: 1, similarity: 1.0 }];
        let exclude: HashSet<ItemId> = [0, 1, 2, 3, 4, 5].into_iter().collect();
        let ctx = sample_neighbor_ratings(&known, 0, &n, 0.5, 9, Some(&exclude)).unwrap();
        assert_eq!(ctx.sampled_ratings[0].len(), 2);
        assert!(ctx.sampled_ratings[0].iter().all(|(i, _)| *i >= 6));
    }

    #[test]
    fn popularity_examples() {
        let known = KnownRatings::from_rows(vec![vec![(0, 5)], vec![(0, 3)], vec![]], 2);
        let stats = popularity_stats(&known);
        let s = stats.get(0).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(s.avg_rating, 4.0);
        assert!(stats.get(1).is_none());
        assert_eq!(stats.count(1), 0);
        assert_eq!(stats.ranked(), vec![0]);
    }

    #[test]
    fn neighbor_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nn.tsv");
        let entries = vec![
            (0, vec![Neighbor { user: 3, similarity: 0.9876543 }, Neighbor { user: 1, similarity: 0.5 }]),
            (1, vec![]),
        ];
        write_neighbor_cache(&path, &entries).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "0\t3:0.987654\t1:0.500000\n1\n");
        let back = read_neighbor_cache(&path).unwrap();
        assert_eq!(back[0].1[0].user, 3);
        assert!((back[0].1[0].similarity - 0.987654).abs() < 1e-12);
        assert!(back[1].1.is_empty());
    }
}
