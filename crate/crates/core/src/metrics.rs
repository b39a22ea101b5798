//! Ranking metrics, per-trial records, aggregation and empirical CDFs.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ItemId, UserId};
use crate::promptgen::Strategy;

/// Rank cutoff shared by both metrics.
pub const CUTOFF: usize = 10;

fn discount(rank: usize) -> f64 {
    // rank is 1-based
    1.0 / ((rank + 1) as f64).log2()
}

fn check_inputs(recommended: &[ItemId], masked: &HashSet<ItemId>) -> Result<()> {
    if masked.is_empty() {
        return Err(Error::Validation("masked set is empty".into()));
    }
    let mut seen = HashSet::with_capacity(recommended.len());
    if let Some(dup) = recommended.iter().find(|i| !seen.insert(**i)) {
        return Err(Error::Validation(format!("item {dup} recommended twice")));
    }
    Ok(())
}

/// Binary-relevance NDCG over the first ten recommendations.
pub fn ndcg_at_10(recommended: &[ItemId], masked: &HashSet<ItemId>) -> Result<f64> {
    check_inputs(recommended, masked)?;
    let dcg: f64 = recommended
        .iter()
        .take(CUTOFF)
        .enumerate()
        .filter(|(_, item)| masked.contains(item))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=masked.len().min(CUTOFF)).map(discount).sum();
    Ok(dcg / idcg)
}

/// The three readings of "hit rate at 10".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitScores {
    /// Hits / min(10, |masked|).
    pub normalized: f64,
    /// 1 if any hit, else 0.
    pub any: f64,
    /// Hits / 10.
    pub flat: f64,
}

pub fn hit_scores(recommended: &[ItemId], masked: &HashSet<ItemId>) -> Result<HitScores> {
    check_inputs(recommended, masked)?;
    let hits = recommended.iter().take(CUTOFF).filter(|i| masked.contains(i)).count();
    Ok(HitScores {
        normalized: hits as f64 / masked.len().min(CUTOFF) as f64,
        any: if hits > 0 { 1.0 } else { 0.0 },
        flat: hits as f64 / CUTOFF as f64,
    })
}

pub fn hit_at_10(recommended: &[ItemId], masked: &HashSet<ItemId>) -> Result<f64> {
    hit_scores(recommended, masked).map(|h| h.normalized)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Hot,
    Cold,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Hot => "hot",
            Group::Cold => "cold",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hot" => Ok(Group::Hot),
            "cold" => Ok(Group::Cold),
            other => Err(Error::Validation(format!("unknown group `{other}`"))),
        }
    }
}

/// A prompt strategy or the matrix-factorization baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Llm(Strategy),
    Mf,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Llm(s) => s.as_str(),
            Method::Mf => "mf",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mf" {
            return Ok(Method::Mf);
        }
        s.parse().map(Method::Llm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Short,
    Failed,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Ok => "ok",
            Outcome::Short => "short",
            Outcome::Failed => "failed",
        }
    }
}

impl FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(Outcome::Ok),
            "short" => Ok(Outcome::Short),
            "failed" => Ok(Outcome::Failed),
            other => Err(Error::Validation(format!("unknown outcome `{other}`"))),
        }
    }
}

/// One scored trial. Metric fields are `None` exactly when the trial failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user: UserId,
    pub group: Group,
    pub method: Method,
    pub k: usize,
    pub fraction: f64,
    pub ndcg: Option<f64>,
    pub hit_score: Option<f64>,
    pub hit_any: Option<f64>,
    pub latency_ms: f64,
    pub prompt_tokens: usize,
    pub outcome: Outcome,
}

impl EvalRecord {
    /// Canonical sort key: (user, method, k, fraction).
    pub fn sort_key(&self) -> (UserId, Method, usize, u64) {
        (self.user, self.method, self.k, self.fraction.to_bits())
    }
}

pub const RESULTS_COLUMNS: [&str; 11] = [
    "user",
    "group",
    "method",
    "k",
    "fraction",
    "ndcg",
    "hit_score",
    "hit_any",
    "latency_ms",
    "prompt_tokens",
    "outcome",
];

/// Shortest decimal rendering that still reads as a real (`1.0`, `0.25`).
pub fn fmt_fraction(f: f64) -> String {
    let s = format!("{f}");
    if s.contains('.') || s.contains('e') {
        s
    } else {
        format!("{s}.0")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupField {
    Group,
    Method,
    K,
    Fraction,
}

impl GroupField {
    pub fn name(self) -> &'static str {
        match self {
            GroupField::Group => "group",
            GroupField::Method => "method",
            GroupField::K => "k",
            GroupField::Fraction => "fraction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

/// Mean and sample standard deviation, summed in sorted order so the result
/// does not depend on input order.
pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary::default();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = if sorted.len() > 1 {
        sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Summary {
        mean,
        stddev: var.sqrt(),
        count: sorted.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    /// Key values, parallel to the requested group fields.
    pub key: Vec<String>,
    pub trials: usize,
    pub failed: usize,
    pub ndcg: Summary,
    pub hit_score: Summary,
    pub hit_any: Summary,
    pub latency_ms: Summary,
    pub prompt_tokens: Summary,
}

impl AggregateRow {
    pub fn failure_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.failed as f64 / self.trials as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum KeyPart {
    Group(Group),
    Method(Method),
    K(usize),
    Fraction(u64),
}

fn key_part(record: &EvalRecord, field: GroupField) -> KeyPart {
    match field {
        GroupField::Group => KeyPart::Group(record.group),
        GroupField::Method => KeyPart::Method(record.method),
        GroupField::K => KeyPart::K(record.k),
        // non-negative floats order like their bit patterns
        GroupField::Fraction => KeyPart::Fraction(record.fraction.to_bits()),
    }
}

fn render_part(part: &KeyPart) -> String {
    match part {
        KeyPart::Group(g) => g.to_string(),
        KeyPart::Method(m) => m.to_string(),
        KeyPart::K(k) => k.to_string(),
        KeyPart::Fraction(bits) => fmt_fraction(f64::from_bits(*bits)),
    }
}

/// Groups records and summarizes each group. Failed trials count toward
/// `failed` but not toward metric means. Rows come out in key order.
pub fn aggregate(records: &[EvalRecord], group_by: &[GroupField]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<Vec<KeyPart>, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        let key = group_by.iter().map(|&f| key_part(r, f)).collect();
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, rows)| {
            let scored: Vec<&&EvalRecord> = rows.iter().filter(|r| r.outcome != Outcome::Failed).collect();
            let pick = |f: fn(&EvalRecord) -> Option<f64>| -> Vec<f64> { scored.iter().filter_map(|r| f(r)).collect() };
            AggregateRow {
                key: key.iter().map(render_part).collect(),
                trials: rows.len(),
                failed: rows.len() - scored.len(),
                ndcg: summarize(&pick(|r| r.ndcg)),
                hit_score: summarize(&pick(|r| r.hit_score)),
                hit_any: summarize(&pick(|r| r.hit_any)),
                latency_ms: summarize(&pick(|r| Some(r.latency_ms))),
                prompt_tokens: summarize(&pick(|r| Some(r.prompt_tokens as f64))),
            }
        })
        .collect()
}

/// Empirical CDF: one point per distinct value.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfSeries {
    pub points: Vec<(f64, f64)>,
}

pub fn cdf(values: &[f64]) -> Result<CdfSeries> {
    if values.is_empty() {
        return Err(Error::Validation("cannot build a CDF from no values".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("CDF input contains NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n as f64;
        match points.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => points.push((v, frac)),
        }
    }
    Ok(CdfSeries { points })
}
