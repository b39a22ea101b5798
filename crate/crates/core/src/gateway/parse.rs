use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::ingest::ItemId;
use crate::promptgen::RECOMMENDATION_COUNT;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedRecommendation {
    /// Unique in-range IDs in order of first appearance, at most ten.
    pub items: Vec<ItemId>,
    pub raw_matches: usize,
    pub dropped_out_of_range: usize,
    pub dropped_duplicate: usize,
    pub short: bool,
}

fn integer_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").expect("static regex"))
}

/// Extracts item IDs from free text. Every run of ASCII digits counts as an
/// integer literal; out-of-range values and repeats are dropped and the
/// list stops at ten.
pub fn parse_recommendations(text: &str, n_items: usize) -> ParsedRecommendation {
    let mut out = ParsedRecommendation::default();
    let mut seen = HashSet::new();
    for m in integer_pattern().find_iter(text) {
        if out.items.len() == RECOMMENDATION_COUNT {
            break;
        }
        out.raw_matches += 1;
        match m.as_str().parse::<u64>() {
            Ok(v) if (v as u128) < n_items as u128 => {
                let id = v as ItemId;
                if seen.insert(id) {
                    out.items.push(id);
                } else {
                    out.dropped_duplicate += 1;
                }
            }
            _ => out.dropped_out_of_range += 1,
        }
    }
    out.short = out.items.len() < RECOMMENDATION_COUNT;
    out
}
