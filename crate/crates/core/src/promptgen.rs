//! Prompt rendering for the four collaborative-context strategies.
//!
//! All templates live in this file as string constants and are pinned by
//! golden files under `tests/golden/`. Any wording change must bump
//! [`TEMPLATE_VERSION`], which is recorded with every run.

use std::collections::{BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ItemId, UserId};
use crate::retrieval::{NeighborContext, PopularityStats};

pub const TEMPLATE_VERSION: &str = "v1";

/// Number of recommendations every prompt asks for.
pub const RECOMMENDATION_COUNT: usize = 10;

const TARGET_LABEL: &str = "user A";

const QUESTION: &str = "Which 10 movies should user A watch next that they haven't seen?";
const REASONING_DIRECTIVE: &str =
    "Reason based on the patterns above: which 10 movies should user A watch next that they haven't seen?";
const FULL_REASONING_DIRECTIVE: &str = "Reason based on the patterns above and the popularity statistics: \
     which 10 movies should user A watch next that they haven't seen?";
const ANSWER_FORMAT: &str =
    "Answer with exactly 10 movie IDs as a comma-separated list, most recommended first.";
const DO_NOT_REPEAT: &str = "Do not select movies that user A has already rated.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    Sentiment,
    Reasoning,
    FullReasoning,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Baseline,
        Strategy::Sentiment,
        Strategy::Reasoning,
        Strategy::FullReasoning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Sentiment => "sentiment",
            Strategy::Reasoning => "reasoning",
            Strategy::FullReasoning => "full_reasoning",
        }
    }

    /// Every strategy except the baseline hides items the target already rated.
    pub fn filters_seen(self) -> bool {
        self != Strategy::Baseline
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenHeuristic {
    /// Whitespace-delimited word count.
    Whitespace,
    /// Word count x 1.3, rounded up.
    #[default]
    Scaled,
}

/// Tokenizer-free prompt size estimate.
pub fn estimate_tokens(text: &str, heuristic: TokenHeuristic) -> usize {
    let words = text.split_whitespace().count();
    match heuristic {
        TokenHeuristic::Whitespace => words,
        TokenHeuristic::Scaled => (words * 13).div_ceil(10),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub strategy: Strategy,
    pub text: String,
    pub candidate_items: BTreeSet<ItemId>,
    pub token_estimate: usize,
    pub target: UserId,
    pub k: usize,
    pub fraction: f64,
}

/// Ratings grouped by sentiment. An item can land in several buckets when
/// different neighbors disagree about it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SentimentBuckets {
    pub liked: Vec<ItemId>,
    pub neutral: Vec<ItemId>,
    pub disliked: Vec<ItemId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sentiment {
    Liked,
    Neutral,
    Disliked,
}

pub fn sentiment_of(rating: u8) -> Sentiment {
    match rating {
        r if r >= 4 => Sentiment::Liked,
        3 => Sentiment::Neutral,
        _ => Sentiment::Disliked,
    }
}

impl SentimentBuckets {
    /// Buckets every `(item, rating)`; each bucket is sorted and deduplicated.
    pub fn from_ratings(ratings: impl IntoIterator<Item = (ItemId, u8)>) -> Self {
        let (mut liked, mut neutral, mut disliked) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
        for (item, rating) in ratings {
            match sentiment_of(rating) {
                Sentiment::Liked => liked.insert(item),
                Sentiment::Neutral => neutral.insert(item),
                Sentiment::Disliked => disliked.insert(item),
            };
        }
        Self {
            liked: liked.into_iter().collect(),
            neutral: neutral.into_iter().collect(),
            disliked: disliked.into_iter().collect(),
        }
    }
}

/// Everything a renderer needs besides the neighbor context.
#[derive(Debug, Clone, Copy)]
pub struct PromptInputs<'a> {
    /// The target's known `(item, rating)` history.
    pub target_known: &'a [(ItemId, u8)],
    pub n_items: usize,
    pub heuristic: TokenHeuristic,
}

fn fmt_rating_list(ratings: &[(ItemId, u8)]) -> String {
    let mut out = String::new();
    for (i, (item, rating)) in ratings.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "M{item} ({rating})");
    }
    out
}

fn fmt_item_list(items: &[ItemId]) -> String {
    if items.is_empty() {
        return "(none)".to_string();
    }
    items.iter().map(|i| format!("M{i}")).collect::<Vec<_>>().join(", ")
}

fn header(out: &mut String, inputs: &PromptInputs<'_>) {
    let _ = writeln!(
        out,
        "You are a movie recommender. Movies are identified by integer IDs from 0 to {}; only IDs in this range are valid.",
        inputs.n_items.saturating_sub(1)
    );
    let _ = writeln!(
        out,
        "{} has rated the following movies: {}",
        capitalize(TARGET_LABEL),
        fmt_rating_list(inputs.target_known)
    );
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
        .unwrap_or_default()
}

fn seen_items(inputs: &PromptInputs<'_>) -> HashSet<ItemId> {
    inputs.target_known.iter().map(|&(i, _)| i).collect()
}

fn neighbor_lines(context: &NeighborContext, seen: Option<&HashSet<ItemId>>) -> Vec<(UserId, Vec<(ItemId, u8)>)> {
    context
        .neighbors
        .iter()
        .zip(&context.sampled_ratings)
        .map(|(n, ratings)| {
            let kept = ratings
                .iter()
                .copied()
                .filter(|(item, _)| seen.map_or(true, |s| !s.contains(item)))
                .collect();
            (n.user, kept)
        })
        .filter(|(_, r): &(UserId, Vec<(ItemId, u8)>)| !r.is_empty())
        .collect()
}

fn finish(
    strategy: Strategy,
    text: String,
    candidate_items: BTreeSet<ItemId>,
    context: &NeighborContext,
    inputs: &PromptInputs<'_>,
) -> RenderedPrompt {
    RenderedPrompt {
        strategy,
        token_estimate: estimate_tokens(&text, inputs.heuristic),
        text,
        candidate_items,
        target: context.target,
        k: context.k(),
        fraction: context.fraction,
    }
}

/// All sampled neighbor ratings, including items the target already rated.
pub fn render_baseline(context: &NeighborContext, inputs: &PromptInputs<'_>) -> Result<RenderedPrompt> {
    if context.neighbors.is_empty() {
        return Err(Error::NoCollaborativeContext);
    }
    let lines = neighbor_lines(context, None);
    let candidates = lines.iter().flat_map(|(_, r)| r.iter().map(|&(i, _)| i)).collect();

    let mut text = String::new();
    header(&mut text, inputs);
    let _ = writeln!(text, "The {} users most similar to {TARGET_LABEL} have rated:", context.k());
    for (user, ratings) in &lines {
        let _ = writeln!(text, "User {user} rated: {}", fmt_rating_list(ratings));
    }
    let _ = writeln!(text, "{DO_NOT_REPEAT}");
    let _ = writeln!(text, "{ANSWER_FORMAT}");
    let _ = writeln!(text, "{QUESTION}");
    Ok(finish(Strategy::Baseline, text, candidates, context, inputs))
}

/// Unseen neighbor ratings grouped into liked, neutral and disliked lists.
pub fn render_sentiment(context: &NeighborContext, inputs: &PromptInputs<'_>) -> Result<RenderedPrompt> {
    if context.neighbors.is_empty() {
        return Err(Error::NoCollaborativeContext);
    }
    let seen = seen_items(inputs);
    let lines = neighbor_lines(context, Some(&seen));
    if lines.is_empty() {
        return Err(Error::NoUnseenCandidates);
    }
    let buckets = SentimentBuckets::from_ratings(lines.iter().flat_map(|(_, r)| r.iter().copied()));
    let candidates = lines.iter().flat_map(|(_, r)| r.iter().map(|&(i, _)| i)).collect();

    let mut text = String::new();
    header(&mut text, inputs);
    let _ = writeln!(
        text,
        "The {} users most similar to {TARGET_LABEL} rated these movies that {TARGET_LABEL} has not seen:",
        context.k()
    );
    let _ = writeln!(text, "Liked (rated 4 or 5): {}", fmt_item_list(&buckets.liked));
    let _ = writeln!(text, "Neutral (rated 3): {}", fmt_item_list(&buckets.neutral));
    let _ = writeln!(text, "Disliked (rated 1 or 2): {}", fmt_item_list(&buckets.disliked));
    let _ = writeln!(text, "{ANSWER_FORMAT}");
    let _ = writeln!(text, "{QUESTION}");
    Ok(finish(Strategy::Sentiment, text, candidates, context, inputs))
}

fn reasoning_body(context: &NeighborContext, inputs: &PromptInputs<'_>) -> Result<(String, BTreeSet<ItemId>)> {
    if context.neighbors.is_empty() {
        return Err(Error::NoCollaborativeContext);
    }
    let seen = seen_items(inputs);
    let lines = neighbor_lines(context, Some(&seen));
    if lines.is_empty() {
        return Err(Error::NoUnseenCandidates);
    }
    let candidates = lines.iter().flat_map(|(_, r)| r.iter().map(|&(i, _)| i)).collect();
    let mut text = String::new();
    header(&mut text, inputs);
    let _ = writeln!(
        text,
        "The {} users most similar to {TARGET_LABEL} have collectively rated the following unseen movies:",
        context.k()
    );
    for (user, ratings) in &lines {
        let _ = writeln!(text, "User {user} rated: {}", fmt_rating_list(ratings));
    }
    Ok((text, candidates))
}

/// Unseen neighbor ratings followed by the reasoning directive.
pub fn render_reasoning(context: &NeighborContext, inputs: &PromptInputs<'_>) -> Result<RenderedPrompt> {
    let (mut text, candidates) = reasoning_body(context, inputs)?;
    let _ = writeln!(text, "{ANSWER_FORMAT}");
    let _ = writeln!(text, "{REASONING_DIRECTIVE}");
    Ok(finish(Strategy::Reasoning, text, candidates, context, inputs))
}

/// The reasoning prompt plus rater count and mean rating for each candidate.
pub fn render_full_reasoning(
    context: &NeighborContext,
    inputs: &PromptInputs<'_>,
    stats: &PopularityStats,
) -> Result<RenderedPrompt> {
    let (mut text, candidates) = reasoning_body(context, inputs)?;
    let _ = writeln!(text, "Movie popularity stats:");
    for &item in &candidates {
        if let Some(s) = stats.get(item) {
            let _ = writeln!(text, "M{item} - Count: {}, AvgRating: {:.1}", s.count, s.avg_rating);
        }
    }
    let _ = writeln!(text, "{ANSWER_FORMAT}");
    let _ = writeln!(text, "{FULL_REASONING_DIRECTIVE}");
    Ok(finish(Strategy::FullReasoning, text, candidates, context, inputs))
}

pub fn render(
    strategy: Strategy,
    context: &NeighborContext,
    inputs: &PromptInputs<'_>,
    stats: &PopularityStats,
) -> Result<RenderedPrompt> {
    match strategy {
        Strategy::Baseline => render_baseline(context, inputs),
        Strategy::Sentiment => render_sentiment(context, inputs),
        Strategy::Reasoning => render_reasoning(context, inputs),
        Strategy::FullReasoning => render_full_reasoning(context, inputs, stats),
    }
}

/// File name used when dumping prompts for audit.
pub fn dump_file_name(prompt: &RenderedPrompt) -> String {
    format!(
        "{}_{}_k{}_f{}.txt",
        prompt.target,
        prompt.strategy,
        prompt.k,
        crate::metrics::fmt_fraction(prompt.fraction)
    )
}
