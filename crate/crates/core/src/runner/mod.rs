//! End-to-end experiment orchestration.
//!
//! A run expands the config into trials, one per (cohort user, strategy, k,
//! fraction) plus one MF trial per user, and executes them on a pool of
//! `gateway.concurrency` workers. Every random choice is keyed by
//! identifiers rather than by execution order:
//!
//! * user splits: `derive_seed(master, "split", [user])`
//! * cohort sampling: `derive_seed(master, "cohort", [])`
//! * neighbor samples: `derive_seed(master, "sample", [])`, then per
//!   (target, neighbor) inside retrieval
//! * mock backends: `derive_seed(master, "mock", [])`, then per
//!   (user, strategy, k, fraction)
//! * MF: `derive_seed(master, "mf", [])`
//!
//! so results do not depend on scheduling. Finished trials are appended to
//! `trials.jsonl` as they complete; a later run with the same config skips
//! them.

pub mod config;
pub mod manifest;
pub mod report;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;

pub use config::{BackendKind, ExperimentConfig};
pub use manifest::{RunManifest, RunState};
pub use report::{report, write_results_csv, ReportFiles};

use crate::error::{Error, Result};
use crate::gateway::{
    complete, parse_recommendations, BackendError, ChatCompletionsBackend, CompletionBackend, MockBackend,
    MockContext, RateLimiter,
};
use crate::ingest::{build_cohort, load_ratings, split_all, EvalCohort, ItemId, RatingMatrix, UserId, UserSplit};
use crate::metrics::{hit_scores, ndcg_at_10, EvalRecord, Group, Method, Outcome};
use crate::mf::{self, MfModel, Observation};
use crate::promptgen::{self, PromptInputs, RenderedPrompt, Strategy};
use crate::retrieval::{
    popularity_stats, sample_neighbor_ratings, top_k_neighbors, KnownRatings, Neighbor, PopularityStats,
    SampleOrder,
};
use crate::seed::derive_seed;
use manifest::{key_string, recover_log, LoggedTrial, TrialLog};

/// Identity of one trial. MF trials use `k = 0` and `fraction = 0.0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialKey {
    pub user: UserId,
    pub method: Method,
    pub k: usize,
    pub fraction: f64,
}

impl fmt::Display for TrialKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.user,
            self.method,
            self.k,
            crate::metrics::fmt_fraction(self.fraction)
        )
    }
}

impl TrialKey {
    pub fn seed(&self, master: u64) -> u64 {
        derive_seed(
            master,
            "trial",
            &[self.user.into(), self.method.as_str().into(), self.k.into(), self.fraction.into()],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSpec {
    pub key: TrialKey,
    pub group: Group,
}

/// Dataset-side state shared by every trial: the split, the cohort and
/// everything derived from known ratings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub matrix: RatingMatrix,
    pub splits: Vec<UserSplit>,
    pub cohort: EvalCohort,
    pub known: KnownRatings,
    pub stats: PopularityStats,
    master_seed: u64,
}

impl Prepared {
    pub fn from_matrix(matrix: RatingMatrix, config: &ExperimentConfig) -> Result<Self> {
        let master = config.master_seed();
        let splits = split_all(&matrix, config.split_options(), |u| {
            derive_seed(master, "split", &[u.into()])
        })?;
        let cohort = build_cohort(&matrix, config.cohort.sample_size, derive_seed(master, "cohort", &[]))?;
        let known = KnownRatings::from_splits(&splits, matrix.n_items());
        let stats = popularity_stats(&known);
        Ok(Self {
            matrix,
            splits,
            cohort,
            known,
            stats,
            master_seed: master,
        })
    }

    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let matrix = load_ratings(&config.dataset.path, &config.delimiter()?)?;
        Self::from_matrix(matrix, config)
    }

    pub fn n_items(&self) -> usize {
        self.matrix.n_items()
    }

    /// Cohort users of the configured groups, hot first.
    pub fn evaluated_users(&self, config: &ExperimentConfig) -> Vec<(UserId, Group)> {
        let mut out = Vec::new();
        for group in [Group::Hot, Group::Cold] {
            if !config.cohort.groups.contains(&group) {
                continue;
            }
            let users = match group {
                Group::Hot => &self.cohort.hot_users,
                Group::Cold => &self.cohort.cold_users,
            };
            out.extend(users.iter().map(|&u| (u, group)));
        }
        out
    }

    fn sample_seed(&self) -> u64 {
        derive_seed(self.master_seed, "sample", &[])
    }

    /// Training observations: known ratings only.
    pub fn observations(&self) -> Vec<Observation> {
        self.splits
            .iter()
            .flat_map(|s| {
                s.known.iter().map(|r| Observation {
                    user: r.user,
                    item: r.item,
                    rating: r.rating as f64,
                })
            })
            .collect()
    }

    pub fn train_mf(&self, config: &ExperimentConfig) -> Result<MfModel> {
        let mf_config = config.mf.to_config(derive_seed(self.master_seed, "mf", &[]));
        let (model, _) = mf::train(&self.observations(), self.matrix.n_users(), self.n_items(), &mf_config)?;
        Ok(model)
    }

    /// Renders the prompt for `target` with its top-`k` neighbors.
    pub fn render_for(
        &self,
        config: &ExperimentConfig,
        target: UserId,
        k: usize,
        strategy: Strategy,
        fraction: f64,
    ) -> Result<RenderedPrompt> {
        let neighbors = top_k_neighbors(&self.known, target, k)?;
        self.render_with(config, target, &neighbors, strategy, fraction)
    }

    /// Renders the prompt for `target` given an explicit neighbor list.
    pub fn render_with(
        &self,
        config: &ExperimentConfig,
        target: UserId,
        neighbors: &[Neighbor],
        strategy: Strategy,
        fraction: f64,
    ) -> Result<RenderedPrompt> {
        let exclude = (config.sweep.sample_order == SampleOrder::FilterThenSample && strategy.filters_seen())
            .then(|| self.splits[target as usize].known_items());
        let context = sample_neighbor_ratings(
            &self.known,
            target,
            neighbors,
            fraction,
            self.sample_seed(),
            exclude.as_ref(),
        )?;
        let inputs = PromptInputs {
            target_known: self.known.row(target),
            n_items: self.n_items(),
            heuristic: config.sweep.token_heuristic,
        };
        promptgen::render(strategy, &context, &inputs, &self.stats)
    }
}

/// All trials of a sweep in canonical order.
pub fn plan_trials(config: &ExperimentConfig, prepared: &Prepared) -> Vec<TrialSpec> {
    let mut specs = Vec::new();
    for (user, group) in prepared.evaluated_users(config) {
        for &strategy in &config.sweep.strategies {
            for &k in &config.sweep.k_values {
                for &fraction in &config.sweep.fractions {
                    specs.push(TrialSpec {
                        key: TrialKey {
                            user,
                            method: Method::Llm(strategy),
                            k,
                            fraction,
                        },
                        group,
                    });
                }
            }
        }
        if config.mf.enabled {
            specs.push(TrialSpec {
                key: TrialKey {
                    user,
                    method: Method::Mf,
                    k: 0,
                    fraction: 0.0,
                },
                group,
            });
        }
    }
    specs
}

/// Runtime switches that do not change results.
#[derive(Clone, Default)]
pub struct RunOptions {
    /// Required for `backend.kind = "live"`.
    pub live: bool,
    /// Stop after dispatching this many new trials, leaving a resumable run.
    pub max_new_trials: Option<usize>,
    /// Use this backend instead of the one the config describes.
    pub backend: Option<Arc<dyn CompletionBackend>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Aborted(String),
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub status: RunStatus,
    pub config_hash: String,
    pub total_trials: usize,
    pub new_trials: usize,
    pub failed: usize,
    /// Canonically sorted records; complete only when the run completed.
    pub records: Vec<EvalRecord>,
    pub failure_threshold: f64,
}

impl RunSummary {
    pub fn failure_rate(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.failed as f64 / self.records.len() as f64
        }
    }

    /// 0 success, 2 too many failed trials, 3 aborted.
    pub fn exit_code(&self) -> i32 {
        match self.status {
            RunStatus::Aborted(_) => 3,
            RunStatus::Completed if self.failure_rate() > self.failure_threshold => 2,
            RunStatus::Completed => 0,
        }
    }
}

/// Builds the backend a config asks for.
pub fn build_backend(
    config: &ExperimentConfig,
    prepared: &Prepared,
    live: bool,
) -> Result<Arc<dyn CompletionBackend>> {
    match config.backend.kind {
        BackendKind::Mock => {
            let ctx = MockContext::from_splits(&prepared.splits, prepared.n_items(), &prepared.stats);
            let seed = derive_seed(config.master_seed(), "mock", &[]);
            Ok(Arc::new(MockBackend::new(config.backend.mock, seed, ctx)?))
        }
        BackendKind::Live if !live => Err(Error::Config(vec![
            "backend.kind = \"live\" sends prompts to an external API; pass --live to allow it".into(),
        ])),
        BackendKind::Live => Ok(Arc::new(ChatCompletionsBackend::from_env(config.backend.http.clone())?)),
    }
}

struct TrialContext<'a> {
    config: &'a ExperimentConfig,
    prepared: &'a Prepared,
    neighbors: HashMap<UserId, Vec<Neighbor>>,
    masked: HashMap<UserId, HashSet<ItemId>>,
    backend: Option<Arc<dyn CompletionBackend>>,
    limiter: RateLimiter,
    mf_model: Option<MfModel>,
}

enum TrialResult {
    Done(LoggedTrial),
    Abort(BackendError),
}

fn failed_record(spec: &TrialSpec, latency_ms: f64, prompt_tokens: usize) -> EvalRecord {
    EvalRecord {
        user: spec.key.user,
        group: spec.group,
        method: spec.key.method,
        k: spec.key.k,
        fraction: spec.key.fraction,
        ndcg: None,
        hit_score: None,
        hit_any: None,
        latency_ms,
        prompt_tokens,
        outcome: Outcome::Failed,
    }
}

fn scored(
    spec: &TrialSpec,
    items: &[ItemId],
    short: bool,
    masked: &HashSet<ItemId>,
    latency_ms: f64,
    prompt_tokens: usize,
) -> LoggedTrial {
    let key = key_string(&spec.key);
    let (ndcg, hits) = match (ndcg_at_10(items, masked), hit_scores(items, masked)) {
        (Ok(n), Ok(h)) => (n, h),
        _ => {
            return LoggedTrial {
                key,
                record: failed_record(spec, latency_ms, prompt_tokens),
                hit_flat: None,
                masked_count: masked.len(),
            }
        }
    };
    LoggedTrial {
        key,
        record: EvalRecord {
            user: spec.key.user,
            group: spec.group,
            method: spec.key.method,
            k: spec.key.k,
            fraction: spec.key.fraction,
            ndcg: Some(ndcg),
            hit_score: Some(hits.normalized),
            hit_any: Some(hits.any),
            latency_ms,
            prompt_tokens,
            outcome: if short { Outcome::Short } else { Outcome::Ok },
        },
        hit_flat: Some(hits.flat),
        masked_count: masked.len(),
    }
}

fn execute_trial(ctx: &TrialContext<'_>, spec: &TrialSpec) -> TrialResult {
    let user = spec.key.user;
    let masked = &ctx.masked[&user];
    match spec.key.method {
        Method::Mf => {
            let model = ctx.mf_model.as_ref().expect("mf model trained before dispatch");
            let known = ctx.prepared.splits[user as usize].known_items();
            match mf::recommend_top10(model, user, &known) {
                Ok(top) => TrialResult::Done(scored(spec, &top.items, top.short, masked, 0.0, 0)),
                Err(_) => TrialResult::Done(LoggedTrial {
                    key: key_string(&spec.key),
                    record: failed_record(spec, 0.0, 0),
                    hit_flat: None,
                    masked_count: masked.len(),
                }),
            }
        }
        Method::Llm(strategy) => {
            let neighbors = &ctx.neighbors[&user];
            let k = spec.key.k.min(neighbors.len());
            let fail = |tokens| {
                TrialResult::Done(LoggedTrial {
                    key: key_string(&spec.key),
                    record: failed_record(spec, 0.0, tokens),
                    hit_flat: None,
                    masked_count: masked.len(),
                })
            };
            let prompt = match ctx
                .prepared
                .render_with(ctx.config, user, &neighbors[..k], strategy, spec.key.fraction)
            {
                Ok(p) => p,
                Err(_) => return fail(0),
            };
            let backend = ctx.backend.as_ref().expect("backend present for llm trials");
            match complete(&prompt, backend.as_ref(), &ctx.config.gateway.retry, &ctx.limiter) {
                Ok(result) => {
                    let parsed = parse_recommendations(&result.text, ctx.prepared.n_items());
                    let tokens = result.prompt_tokens.unwrap_or(prompt.token_estimate);
                    let latency_ms = result.latency.as_secs_f64() * 1000.0;
                    TrialResult::Done(scored(spec, &parsed.items, parsed.short, masked, latency_ms, tokens))
                }
                Err(e) if e.aborts_run() => TrialResult::Abort(e),
                Err(_) => fail(prompt.token_estimate),
            }
        }
    }
}

/// Runs (or resumes) the sweep described by `config`, then writes the
/// results, aggregate and CDF files.
pub fn run(config: &ExperimentConfig, options: RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let prepared = Prepared::load(config)?;
    run_prepared(config, &prepared, options)
}

pub fn run_prepared(config: &ExperimentConfig, prepared: &Prepared, options: RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let out_dir = config.output_dir.as_path();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_hash = config.hash();

    let specs = plan_trials(config, prepared);
    let mut manifest = match RunManifest::load(out_dir)? {
        Some(m) if m.config_hash != config_hash => {
            return Err(Error::ConfigMismatch {
                expected: config_hash,
                found: m.config_hash,
            })
        }
        Some(mut m) => {
            m.state = RunState::Running;
            m.abort_reason = None;
            m
        }
        None => RunManifest::new(config_hash.clone(), config.template_version.clone(), specs.len()),
    };
    fs::write(out_dir.join("config.toml"), config.to_toml_string())
        .map_err(|e| Error::io(out_dir.join("config.toml"), e))?;

    let mut done = recover_log(out_dir)?;
    let pending: Vec<TrialSpec> = specs
        .iter()
        .copied()
        .filter(|s| !done.contains_key(&key_string(&s.key)))
        .collect();
    manifest.trials = done.iter().map(|(k, t)| (k.clone(), t.record.outcome)).collect();
    manifest.save(out_dir)?;

    let needs_llm = pending.iter().any(|s| s.key.method != Method::Mf);
    let needs_mf = pending.iter().any(|s| s.key.method == Method::Mf);
    let backend = match (&options.backend, needs_llm) {
        (Some(b), _) => Some(b.clone()),
        (None, true) => Some(build_backend(config, prepared, options.live)?),
        (None, false) => None,
    };
    let mf_model = if needs_mf {
        let model = prepared.train_mf(config)?;
        model.save(out_dir.join("mf_model.bin"))?;
        Some(model)
    } else {
        None
    };

    let max_k = config.max_k();
    let mut neighbors = HashMap::new();
    let mut masked = HashMap::new();
    for (user, _) in prepared.evaluated_users(config) {
        if needs_llm {
            neighbors.insert(user, top_k_neighbors(&prepared.known, user, max_k)?);
        }
        masked.insert(user, prepared.splits[user as usize].masked_items().into_iter().collect());
    }
    let ctx = TrialContext {
        config,
        prepared,
        neighbors,
        masked,
        backend,
        limiter: RateLimiter::new(config.gateway.min_interval()),
        mf_model,
    };

    let budget = options.max_new_trials.unwrap_or(usize::MAX);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let mut log = TrialLog::open(out_dir)?;
    let mut new_trials = 0;
    let mut abort: Option<String> = None;
    let mut write_error: Option<Error> = None;

    thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<TrialResult>();
        let workers = config.gateway.concurrency.min(pending.len().max(1));
        for _ in 0..workers {
            let tx = tx.clone();
            let (ctx, pending, next, stop) = (&ctx, &pending, &next, &stop);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pending.len() || i >= budget {
                    break;
                }
                if tx.send(execute_trial(ctx, &pending[i])).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // The receiving loop is the only writer of the log and manifest.
        for result in rx {
            match result {
                TrialResult::Done(trial) => {
                    if write_error.is_some() || abort.is_some() {
                        continue;
                    }
                    if let Err(e) = log.append(&trial) {
                        write_error = Some(e);
                        stop.store(true, Ordering::SeqCst);
                        continue;
                    }
                    manifest.trials.insert(trial.key.clone(), trial.record.outcome);
                    done.insert(trial.key.clone(), trial);
                    new_trials += 1;
                }
                TrialResult::Abort(e) => {
                    stop.store(true, Ordering::SeqCst);
                    abort.get_or_insert_with(|| e.to_string());
                }
            }
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }

    let complete = specs.iter().all(|s| done.contains_key(&key_string(&s.key)));
    let status = match (abort, complete) {
        (Some(reason), _) => RunStatus::Aborted(reason),
        (None, false) => RunStatus::Aborted("trial budget reached".into()),
        (None, true) => RunStatus::Completed,
    };

    let mut records: Vec<EvalRecord> = specs
        .iter()
        .filter_map(|s| done.get(&key_string(&s.key)).map(|t| t.record.clone()))
        .collect();
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let failed = records.iter().filter(|r| r.outcome == Outcome::Failed).count();

    match &status {
        RunStatus::Completed => {
            let extras: Vec<&LoggedTrial> = specs.iter().map(|s| &done[&key_string(&s.key)]).collect();
            report::write_results(out_dir, &config_hash, &records, &extras)?;
            report(out_dir)?;
            manifest.state = RunState::Completed;
        }
        RunStatus::Aborted(reason) => {
            manifest.state = RunState::Aborted;
            manifest.abort_reason = Some(reason.clone());
        }
    }
    manifest.save(out_dir)?;

    Ok(RunSummary {
        status,
        config_hash,
        total_trials: specs.len(),
        new_trials,
        failed,
        records,
        failure_threshold: config.failure_threshold,
    })
}

/// Writes the split manifest, cohort file and neighbor cache for a config.
pub fn prepare_outputs(config: &ExperimentConfig, prepared: &Prepared) -> Result<()> {
    let out_dir = config.output_dir.as_path();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    crate::ingest::write_split_manifest(out_dir.join("split.tsv"), &prepared.splits)?;
    let cohort = serde_json::to_string_pretty(&prepared.cohort)?;
    fs::write(out_dir.join("cohort.json"), cohort).map_err(|e| Error::io(out_dir.join("cohort.json"), e))?;
    let entries = prepared
        .evaluated_users(config)
        .into_iter()
        .map(|(u, _)| top_k_neighbors(&prepared.known, u, config.max_k()).map(|n| (u, n)))
        .collect::<Result<Vec<_>>>()?;
    crate::retrieval::write_neighbor_cache(out_dir.join("neighbors.tsv"), &entries)
}

/// Renders every prompt of the sweep into `dir` as
/// `<user>_<strategy>_k<k>_f<f>.txt`. Returns the number written.
pub fn dump_prompts(config: &ExperimentConfig, prepared: &Prepared, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = 0;
    for (user, _) in prepared.evaluated_users(config) {
        let neighbors = top_k_neighbors(&prepared.known, user, config.max_k())?;
        for &strategy in &config.sweep.strategies {
            for &k in &config.sweep.k_values {
                for &fraction in &config.sweep.fractions {
                    let n = &neighbors[..k.min(neighbors.len())];
                    let Ok(prompt) = prepared.render_with(config, user, n, strategy, fraction) else {
                        continue;
                    };
                    let path = dir.join(promptgen::dump_file_name(&prompt));
                    fs::write(&path, &prompt.text).map_err(|e| Error::io(path, e))?;
                    written += 1;
                }
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::gateway::{MockKind, RawCompletion};
    use crate::synth::{toy_ratings, ToyConfig};

    fn toy_config(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            seed: Some(7),
            output_dir: dir.to_path_buf(),
            ..Default::default()
        };
        c.cohort.sample_size = 4;
        c.sweep.k_values = vec![3, 5];
        c.sweep.fractions = vec![0.5, 1.0];
        c.mf.epochs = 20;
        c.mf.dim = 4;
        c
    }

    fn prepared(config: &ExperimentConfig) -> Prepared {
        let matrix = toy_ratings(&ToyConfig::default()).unwrap();
        Prepared::from_matrix(matrix, config).unwrap()
    }

    #[test]
    fn plan_covers_the_sweep() {
        let dir = tempfile::tempdir().unwrap();
        let config = toy_config(dir.path());
        let p = prepared(&config);
        let users = p.evaluated_users(&config).len();
        assert!(users > 0 && users <= 8);
        assert_eq!(plan_trials(&config, &p).len(), users * (4 * 2 * 2 + 1));
    }

    #[test]
    fn oracle_leak_run_scores_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = toy_config(dir.path());
        config.backend.mock = MockKind::OracleLeak;
        config.mf.enabled = false;
        let p = prepared(&config);
        let summary = run_prepared(&config, &p, RunOptions::default()).unwrap();
        assert_eq!(summary.status, RunStatus::Completed);
        assert_eq!(summary.exit_code(), 0);
        for r in &summary.records {
            assert_eq!(r.ndcg, Some(1.0), "{r:?}");
            assert_eq!(r.hit_any, Some(1.0));
        }
        for f in ["results.csv", "results_extra.csv", "aggregate.csv", "manifest.json", "trials.jsonl"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn budgeted_run_resumes_to_the_same_results() {
        let full_dir = tempfile::tempdir().unwrap();
        let config = toy_config(full_dir.path());
        let p = prepared(&config);
        run_prepared(&config, &p, RunOptions::default()).unwrap();
        let expected = fs::read_to_string(full_dir.path().join("results.csv")).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let config = toy_config(dir.path());
        let partial = run_prepared(
            &config,
            &p,
            RunOptions {
                max_new_trials: Some(10),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(matches!(partial.status, RunStatus::Aborted(_)));
        assert_eq!(partial.exit_code(), 3);
        assert_eq!(partial.new_trials, 10);

        let resumed = run_prepared(&config, &p, RunOptions::default()).unwrap();
        assert_eq!(resumed.status, RunStatus::Completed);
        assert_eq!(resumed.new_trials, resumed.total_trials - 10);
        assert_eq!(fs::read_to_string(dir.path().join("results.csv")).unwrap(), expected);
    }

    #[test]
    fn resume_with_a_different_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let config = toy_config(dir.path());
        let p = prepared(&config);
        run_prepared(
            &config,
            &p,
            RunOptions {
                max_new_trials: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        let mut other = config.clone();
        other.seed = Some(8);
        let p2 = prepared(&other);
        assert!(matches!(
            run_prepared(&other, &p2, RunOptions::default()),
            Err(Error::ConfigMismatch { .. })
        ));
    }

    struct Down;

    impl CompletionBackend for Down {
        fn id(&self) -> &str {
            "down"
        }

        fn send(&self, _: &RenderedPrompt, _: Duration) -> std::result::Result<RawCompletion, BackendError> {
            Err(BackendError::Unreachable("connection refused".into()))
        }
    }

    struct Garbage;

    impl CompletionBackend for Garbage {
        fn id(&self) -> &str {
            "garbage"
        }

        fn send(&self, _: &RenderedPrompt, _: Duration) -> std::result::Result<RawCompletion, BackendError> {
            Err(BackendError::BadRequest {
                status: 400,
                message: "no".into(),
            })
        }
    }

    #[test]
    fn unreachable_backend_aborts_with_exit_3() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = toy_config(dir.path());
        config.gateway.retry.max_retries = 1;
        config.gateway.retry.backoff_base = Duration::from_millis(1);
        config.mf.enabled = false;
        let p = prepared(&config);
        let summary = run_prepared(
            &config,
            &p,
            RunOptions {
                backend: Some(Arc::new(Down)),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(matches!(summary.status, RunStatus::Aborted(ref r) if r.contains("unreachable")));
        assert_eq!(summary.exit_code(), 3);
        assert!(!dir.path().join("results.csv").exists());
        let manifest = RunManifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(manifest.state, RunState::Aborted);
    }

    #[test]
    fn failing_trials_above_threshold_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let config = toy_config(dir.path());
        let p = prepared(&config);
        let summary = run_prepared(
            &config,
            &p,
            RunOptions {
                backend: Some(Arc::new(Garbage)),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(summary.status, RunStatus::Completed);
        assert!(summary.failure_rate() > 0.5);
        assert_eq!(summary.exit_code(), 2);
        let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(text.lines().any(|l| l.ends_with(",failed")));
    }

    #[test]
    fn live_backend_needs_explicit_opt_in() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = toy_config(dir.path());
        config.backend.kind = BackendKind::Live;
        let p = prepared(&config);
        assert!(matches!(build_backend(&config, &p, false), Err(Error::Config(_))));
    }

    #[test]
    fn prompts_and_prep_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let config = toy_config(dir.path());
        let p = prepared(&config);
        prepare_outputs(&config, &p).unwrap();
        for f in ["split.tsv", "cohort.json", "neighbors.tsv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let n = dump_prompts(&config, &p, &dir.path().join("prompts")).unwrap();
        assert!(n > 0);
        assert_eq!(fs::read_dir(dir.path().join("prompts")).unwrap().count(), n);
    }
}
