//! Rating-file loading, per-user known/masked splits and hot/cold cohorts.

use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

pub type UserId = u32;
pub type ItemId = u32;

/// One observed star rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rating {
    pub user: UserId,
    pub item: ItemId,
    pub rating: u8,
    pub timestamp: i64,
}

/// Field separator of a rating file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    /// MovieLens 100K `u.data`.
    #[default]
    Tab,
    /// MovieLens 1M/10M `ratings.dat`.
    DoubleColon,
    Comma,
    Custom(String),
}

impl Delimiter {
    fn as_str(&self) -> &str {
        match self {
            Delimiter::Tab => "\t",
            Delimiter::DoubleColon => "::",
            Delimiter::Comma => ",",
            Delimiter::Custom(s) => s,
        }
    }
}

impl FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab" | "\t" | "\\t" => Ok(Delimiter::Tab),
            "::" | "double_colon" => Ok(Delimiter::DoubleColon),
            "," | "comma" => Ok(Delimiter::Comma),
            "" => Err(Error::Validation("empty delimiter".into())),
            other => Ok(Delimiter::Custom(other.to_string())),
        }
    }
}

/// Sparse user x item star-rating matrix with contiguous zero-based IDs.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    n_users: usize,
    n_items: usize,
    entries: Vec<Rating>,
    raw_user_ids: Vec<String>,
    raw_item_ids: Vec<String>,
}

impl RatingMatrix {
    /// Builds a matrix from already-remapped entries, checking every invariant.
    pub fn new(n_users: usize, n_items: usize, entries: Vec<Rating>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for r in &entries {
            if !(1..=5).contains(&r.rating) {
                return Err(Error::Validation(format!(
                    "rating {} for (user {}, item {}) outside 1-5",
                    r.rating, r.user, r.item
                )));
            }
            if r.user as usize >= n_users || r.item as usize >= n_items {
                return Err(Error::Validation(format!(
                    "entry (user {}, item {}) outside {n_users}x{n_items}",
                    r.user, r.item
                )));
            }
            if !seen.insert((r.user, r.item)) {
                return Err(Error::Validation(format!(
                    "duplicate rating for (user {}, item {})",
                    r.user, r.item
                )));
            }
        }
        Ok(Self {
            n_users,
            n_items,
            entries,
            raw_user_ids: (0..n_users).map(|u| u.to_string()).collect(),
            raw_item_ids: (0..n_items).map(|i| i.to_string()).collect(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn entries(&self) -> &[Rating] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Raw (file) identifier of a remapped user.
    pub fn raw_user_id(&self, user: UserId) -> &str {
        &self.raw_user_ids[user as usize]
    }

    pub fn raw_item_id(&self, item: ItemId) -> &str {
        &self.raw_item_ids[item as usize]
    }

    /// Ratings grouped by user, in file order.
    pub fn by_user(&self) -> Vec<Vec<Rating>> {
        let mut rows = vec![Vec::new(); self.n_users];
        for r in &self.entries {
            rows[r.user as usize].push(*r);
        }
        rows
    }

    pub fn user_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_users];
        for r in &self.entries {
            counts[r.user as usize] += 1;
        }
        counts
    }

    /// Returns a copy with every rating replaced by `f(rating)`; IDs and
    /// timestamps are untouched.
    pub fn map_ratings(&self, mut f: impl FnMut(&Rating) -> u8) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|r| Rating {
                rating: f(r),
                ..*r
            })
            .collect();
        let mut out = Self::new(self.n_users, self.n_items, entries)?;
        out.raw_user_ids = self.raw_user_ids.clone();
        out.raw_item_ids = self.raw_item_ids.clone();
        Ok(out)
    }
}

/// Loads a `user<d>item<d>rating<d>timestamp` file, remapping raw IDs to
/// contiguous indices in order of first appearance.
pub fn load_ratings(path: impl AsRef<Path>, delimiter: &Delimiter) -> Result<RatingMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(&text, delimiter)
}

pub fn parse_ratings(text: &str, delimiter: &Delimiter) -> Result<RatingMatrix> {
    let sep = delimiter.as_str();
    let mut user_ids: HashMap<String, UserId> = HashMap::new();
    let mut item_ids: HashMap<String, ItemId> = HashMap::new();
    let mut raw_users = Vec::new();
    let mut raw_items = Vec::new();
    let mut entries = Vec::new();
    let mut seen: HashMap<(UserId, ItemId), usize> = HashMap::new();

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let rating: i64 = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("rating `{}` is not an integer", fields[2]),
        })?;
        let timestamp: i64 = fields[3].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("timestamp `{}` is not an integer", fields[3]),
        })?;
        if !(1..=5).contains(&rating) {
            return Err(Error::Validation(format!(
                "line {line_no}: rating {rating} outside 1-5"
            )));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty user or item id".into(),
            });
        }

        let user = intern(&mut user_ids, &mut raw_users, fields[0]);
        let item = intern(&mut item_ids, &mut raw_items, fields[1]);
        match seen.entry((user, item)) {
            Entry::Occupied(first) => {
                return Err(Error::Validation(format!(
                    "line {line_no}: duplicate rating for (user {}, item {}), first seen on line {}",
                    fields[0],
                    fields[1],
                    first.get()
                )));
            }
            Entry::Vacant(slot) => {
                slot.insert(line_no);
            }
        }
        entries.push(Rating {
            user,
            item,
            rating: rating as u8,
            timestamp,
        });
    }

    if entries.is_empty() {
        return Err(Error::NoRatings);
    }
    Ok(RatingMatrix {
        n_users: raw_users.len(),
        n_items: raw_items.len(),
        entries,
        raw_user_ids: raw_users,
        raw_item_ids: raw_items,
    })
}

fn intern(map: &mut HashMap<String, u32>, raw: &mut Vec<String>, key: &str) -> u32 {
    if let Some(&id) = map.get(key) {
        return id;
    }
    let id = raw.len() as u32;
    map.insert(key.to_string(), id);
    raw.push(key.to_string());
    id
}

/// How the masked subset is chosen after chronological sorting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Uniform random subset.
    #[default]
    Random,
    /// The most recent ratings.
    Latest,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskMode::Random),
            "latest" => Ok(MaskMode::Latest),
            other => Err(Error::Validation(format!("unknown mask mode `{other}`"))),
        }
    }
}

/// A user's ratings partitioned into known history and held-out targets.
/// Both halves are in chronological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user: UserId,
    pub known: Vec<Rating>,
    pub masked: Vec<Rating>,
}

impl UserSplit {
    pub fn total(&self) -> usize {
        self.known.len() + self.masked.len()
    }

    pub fn masked_items(&self) -> Vec<ItemId> {
        let mut items: Vec<_> = self.masked.iter().map(|r| r.item).collect();
        items.sort_unstable();
        items
    }

    pub fn known_items(&self) -> HashSet<ItemId> {
        self.known.iter().map(|r| r.item).collect()
    }
}

/// `max(1, round_half_up(fraction * total))`, capped so at least one rating
/// stays known.
pub fn mask_count(total: usize, fraction: f64) -> usize {
    let raw = (fraction * total as f64 + 0.5 + 1e-9).floor() as usize;
    raw.max(1).min(total.saturating_sub(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub mask_fraction: f64,
    pub mode: MaskMode,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            mask_fraction: 0.2,
            mode: MaskMode::Random,
        }
    }
}

/// Sorts a user's ratings by (timestamp, item) and moves
/// [`mask_count`] of them into the masked set.
pub fn split_user(ratings: &[Rating], seed: u64, options: SplitOptions) -> Result<UserSplit> {
    let Some(first) = ratings.first() else {
        return Err(Error::Validation("cannot split an empty rating list".into()));
    };
    if ratings.len() < 2 {
        return Err(Error::Validation(format!(
            "user {} has a single rating; at least 2 are needed to keep one known",
            first.user
        )));
    }
    if !(options.mask_fraction > 0.0 && options.mask_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "mask fraction {} outside (0, 1)",
            options.mask_fraction
        )));
    }
    let mut sorted = ratings.to_vec();
    sorted.sort_by_key(|r| (r.timestamp, r.item));

    let n = sorted.len();
    let m = mask_count(n, options.mask_fraction);
    let mut is_masked = vec![false; n];
    match options.mode {
        MaskMode::Random => {
            let mut rng = rng_from(seed);
            for i in index::sample(&mut rng, n, m) {
                is_masked[i] = true;
            }
        }
        MaskMode::Latest => is_masked[n - m..].iter_mut().for_each(|b| *b = true),
    }

    let (masked, known): (Vec<_>, Vec<_>) = sorted
        .into_iter()
        .zip(is_masked)
        .partition(|(_, masked)| *masked);
    Ok(UserSplit {
        user: first.user,
        known: known.into_iter().map(|(r, _)| r).collect(),
        masked: masked.into_iter().map(|(r, _)| r).collect(),
    })
}

/// Splits every user, deriving each user's seed with `seed_for(user)`.
pub fn split_all(
    matrix: &RatingMatrix,
    options: SplitOptions,
    mut seed_for: impl FnMut(UserId) -> u64,
) -> Result<Vec<UserSplit>> {
    matrix
        .by_user()
        .into_iter()
        .enumerate()
        .map(|(user, rows)| split_user(&rows, seed_for(user as UserId), options))
        .collect()
}

/// Writes one `user<TAB>item,item,...` line per user listing masked items.
pub fn write_split_manifest(path: impl AsRef<Path>, splits: &[UserSplit]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for split in splits {
        let items: Vec<String> = split.masked_items().iter().map(|i| i.to_string()).collect();
        let _ = writeln!(out, "{}\t{}", split.user, items.join(","));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Hot/cold evaluation groups split at the median rating count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCohort {
    pub hot_users: Vec<UserId>,
    pub cold_users: Vec<UserId>,
    pub median_count: usize,
}

/// Lower median of the per-user rating counts; users strictly above it are
/// hot, the rest cold. Each group is sampled down to `sample_size`.
pub fn build_cohort(matrix: &RatingMatrix, sample_size: usize, seed: u64) -> Result<EvalCohort> {
    if matrix.is_empty() {
        return Err(Error::NoRatings);
    }
    if sample_size == 0 {
        return Err(Error::Validation("cohort sample size must be positive".into()));
    }
    let counts = matrix.user_counts();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let median = sorted[(sorted.len() - 1) / 2];

    let (hot, cold): (Vec<UserId>, Vec<UserId>) =
        (0..counts.len() as UserId).partition(|&u| counts[u as usize] > median);

    let mut rng = rng_from(seed);
    let mut sample = |group: Vec<UserId>| {
        if group.len() <= sample_size {
            return group;
        }
        let mut picked: Vec<UserId> = index::sample(&mut rng, group.len(), sample_size)
            .into_iter()
            .map(|i| group[i])
            .collect();
        picked.sort_unstable();
        picked
    };
    let hot_users = sample(hot);
    let cold_users = sample(cold);
    Ok(EvalCohort {
        hot_users,
        cold_users,
        median_count: median,
    })
}
