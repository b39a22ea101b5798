use std::collections::HashSet;
use std::str::FromStr;
use std::time::Duration;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{BackendError, CompletionBackend, RawCompletion};
use crate::error::Error;
use crate::ingest::{ItemId, UserSplit};
use crate::promptgen::{RenderedPrompt, RECOMMENDATION_COUNT};
use crate::retrieval::PopularityStats;
use crate::seed::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    /// Answers with the target's masked items, padded with popular items.
    OracleLeak,
    /// The ten most-rated items the target has not seen.
    Popularity,
    /// Ten uniformly random unseen items.
    Random,
    /// A fixed reply.
    Echo,
}

impl MockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MockKind::OracleLeak => "oracle_leak",
            MockKind::Popularity => "popularity",
            MockKind::Random => "random",
            MockKind::Echo => "echo",
        }
    }
}

impl FromStr for MockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        [MockKind::OracleLeak, MockKind::Popularity, MockKind::Random, MockKind::Echo]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown mock backend `{s}`")))
    }
}

/// Privileged data a mock may need; which fields are required depends on
/// the kind.
#[derive(Debug, Clone, Default)]
pub struct MockContext {
    pub n_items: usize,
    /// Per user, sorted masked items.
    pub masked: Option<Vec<Vec<ItemId>>>,
    /// Per user, known items.
    pub known: Option<Vec<HashSet<ItemId>>>,
    /// Items by known-rating count, most popular first.
    pub popular: Option<Vec<ItemId>>,
}

impl MockContext {
    pub fn from_splits(splits: &[UserSplit], n_items: usize, stats: &PopularityStats) -> Self {
        Self {
            n_items,
            masked: Some(splits.iter().map(UserSplit::masked_items).collect()),
            known: Some(splits.iter().map(UserSplit::known_items).collect()),
            popular: Some(stats.ranked()),
        }
    }
}

pub const ECHO_TEXT: &str = "1, 2, 3";

/// Deterministic stand-in for a chat-completion model.
#[derive(Debug, Clone)]
pub struct MockBackend {
    kind: MockKind,
    seed: u64,
    context: MockContext,
    id: String,
}

impl MockBackend {
    pub fn new(kind: MockKind, seed: u64, context: MockContext) -> Result<Self, BackendError> {
        let missing = |what: &str| BackendError::Config(format!("{} mock needs {what}", kind.as_str()));
        match kind {
            MockKind::OracleLeak => {
                context.masked.as_ref().ok_or_else(|| missing("masked sets"))?;
                context.known.as_ref().ok_or_else(|| missing("known sets"))?;
                context.popular.as_ref().ok_or_else(|| missing("popularity stats"))?;
            }
            MockKind::Popularity => {
                context.popular.as_ref().ok_or_else(|| missing("popularity stats"))?;
                context.known.as_ref().ok_or_else(|| missing("known sets"))?;
            }
            MockKind::Random => {
                context.known.as_ref().ok_or_else(|| missing("known sets"))?;
                if context.n_items == 0 {
                    return Err(missing("a non-empty item catalog"));
                }
            }
            MockKind::Echo => {}
        }
        Ok(Self {
            kind,
            seed,
            context,
            id: format!("mock:{}", kind.as_str()),
        })
    }

    pub fn kind(&self) -> MockKind {
        self.kind
    }

    fn known(&self, user: usize) -> Result<&HashSet<ItemId>, BackendError> {
        self.context
            .known
            .as_ref()
            .and_then(|k| k.get(user))
            .ok_or_else(|| BackendError::BadRequest {
                status: 400,
                message: format!("unknown user {user}"),
            })
    }

    fn popular_unseen(&self, known: &HashSet<ItemId>, skip: &HashSet<ItemId>, n: usize) -> Vec<ItemId> {
        self.context
            .popular
            .iter()
            .flatten()
            .copied()
            .filter(|i| !known.contains(i) && !skip.contains(i))
            .take(n)
            .collect()
    }

    /// The items this mock answers with for `prompt`.
    pub fn answer(&self, prompt: &RenderedPrompt) -> Result<Vec<ItemId>, BackendError> {
        let user = prompt.target as usize;
        match self.kind {
            MockKind::Echo => Ok(Vec::new()),
            MockKind::OracleLeak => {
                let masked = self
                    .context
                    .masked
                    .as_ref()
                    .and_then(|m| m.get(user))
                    .ok_or_else(|| BackendError::BadRequest {
                        status: 400,
                        message: format!("unknown user {user}"),
                    })?;
                let mut items: Vec<ItemId> = masked.iter().copied().take(RECOMMENDATION_COUNT).collect();
                let chosen: HashSet<ItemId> = items.iter().copied().collect();
                let pad = RECOMMENDATION_COUNT - items.len();
                items.extend(self.popular_unseen(self.known(user)?, &chosen, pad));
                Ok(items)
            }
            MockKind::Popularity => Ok(self.popular_unseen(self.known(user)?, &HashSet::new(), RECOMMENDATION_COUNT)),
            MockKind::Random => {
                let known = self.known(user)?;
                let unseen: Vec<ItemId> = (0..self.context.n_items as ItemId).filter(|i| !known.contains(i)).collect();
                let seed = derive_seed(
                    self.seed,
                    "mock-random",
                    &[
                        prompt.target.into(),
                        prompt.strategy.as_str().into(),
                        prompt.k.into(),
                        prompt.fraction.into(),
                    ],
                );
                let n = RECOMMENDATION_COUNT.min(unseen.len());
                Ok(index::sample(&mut rng_from(seed), unseen.len(), n)
                    .into_iter()
                    .map(|i| unseen[i])
                    .collect())
            }
        }
    }
}

/// Simulated round trip: fixed overhead plus a per-token cost, so mocked
/// runs are reproducible to the byte.
pub fn simulated_latency(prompt: &RenderedPrompt) -> Duration {
    Duration::from_micros(150_000 + 50 * prompt.token_estimate as u64)
}

impl CompletionBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, prompt: &RenderedPrompt, _timeout: Duration) -> Result<RawCompletion, BackendError> {
        let text = match self.kind {
            MockKind::Echo => ECHO_TEXT.to_string(),
            _ => {
                let items = self.answer(prompt)?;
                let list: Vec<String> = items.iter().map(|i| format!("M{i}")).collect();
                format!("Recommended movies: {}", list.join(", "))
            }
        };
        Ok(RawCompletion {
            text,
            prompt_tokens: None,
            completion_tokens: None,
            simulated_latency: Some(simulated_latency(prompt)),
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::gateway::parse_recommendations;
    use crate::promptgen::Strategy;

    fn prompt(target: u32) -> RenderedPrompt {
        RenderedPrompt {
            strategy: Strategy::Baseline,
            text: "x".into(),
            candidate_items: BTreeSet::new(),
            token_estimate: 1,
            target,
            k: 5,
            fraction: 0.5,
        }
    }

    fn context() -> MockContext {
        MockContext {
            n_items: 40,
            masked: Some(vec![vec![3, 9, 21, 30], vec![1]]),
            known: Some(vec![(10..15).collect(), (0..1).collect()]),
            // popularity order: 10, 11, ..., 39, 0, ..., 9
            popular: Some((10..40).chain(0..10).collect()),
        }
    }

    #[test]
    fn oracle_leads_with_masked_items() {
        let m = MockBackend::new(MockKind::OracleLeak, 0, context()).unwrap();
        let items = m.answer(&prompt(0)).unwrap();
        assert_eq!(&items[..4], &[3, 9, 21, 30]);
        assert_eq!(&items[4..], &[15, 16, 17, 18, 19, 20]);
        let raw = m.send(&prompt(0), Duration::from_secs(1)).unwrap();
        assert_eq!(parse_recommendations(&raw.text, 40).items, items);
        assert!(raw.simulated_latency.unwrap() > Duration::ZERO);
    }

    #[test]
    fn popularity_skips_seen() {
        let m = MockBackend::new(MockKind::Popularity, 0, context()).unwrap();
        assert_eq!(m.answer(&prompt(0)).unwrap(), (15..25).collect::<Vec<_>>());
    }

    #[test]
    fn random_is_seeded() {
        let a = MockBackend::new(MockKind::Random, 7, context()).unwrap();
        let b = MockBackend::new(MockKind::Random, 7, context()).unwrap();
        let x = a.answer(&prompt(0)).unwrap();
        assert_eq!(x, b.answer(&prompt(0)).unwrap());
        assert_eq!(x.len(), 10);
        assert!(x.iter().all(|i| !(10..15).contains(i)));
        assert_eq!(x.iter().collect::<HashSet<_>>().len(), 10);
    }

    #[test]
    fn echo_reply() {
        let m = MockBackend::new(MockKind::Echo, 0, MockContext::default()).unwrap();
        assert_eq!(m.send(&prompt(0), Duration::from_secs(1)).unwrap().text, "1, 2, 3");
    }

    #[test]
    fn missing_context_is_a_config_error() {
        for kind in [MockKind::OracleLeak, MockKind::Popularity, MockKind::Random] {
            let err = MockBackend::new(kind, 0, MockContext::default()).unwrap_err();
            assert!(matches!(err, BackendError::Config(_)));
        }
    }
}
