//! Experiment configuration (TOML, schema version 1).
//!
//! ```toml
//! schema_version = 1
//! seed = 42
//! output_dir = "runs/ml100k"
//!
//! [dataset]
//! path = "data/ml-100k/u.data"
//! delimiter = "tab"            # tab | :: | comma | any literal separator
//!
//! [split]
//! mask_fraction = 0.2
//! mask_mode = "random"         # random | latest
//!
//! [cohort]
//! sample_size = 350
//! groups = ["hot", "cold"]
//!
//! [sweep]
//! strategies = ["baseline", "sentiment", "reasoning", "full_reasoning"]
//! k_values = [5, 10, 20]
//! fractions = [0.25, 0.5, 0.75, 1.0]
//! sample_order = "sample_then_filter"
//! token_heuristic = "scaled"   # scaled | whitespace
//!
//! [backend]
//! kind = "mock"                # mock | live
//! mock = "popularity"          # oracle_leak | popularity | random | echo
//!
//! [backend.http]
//! base_url = "https://api.openai.com/v1"
//! model = "gpt-4.1-mini"
//! api_key_env = "OPENAI_API_KEY"
//!
//! [gateway]
//! concurrency = 4
//! min_interval_ms = 0
//!
//! [mf]
//! enabled = true
//! dim = 32
//! ```
//!
//! Every section and key except `seed` has a default.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{HttpBackendConfig, MockKind, RetryPolicy};
use crate::ingest::{Delimiter, MaskMode, SplitOptions};
use crate::metrics::Group;
use crate::mf::MfConfig;
use crate::promptgen::{Strategy, TokenHeuristic, TEMPLATE_VERSION};
use crate::retrieval::SampleOrder;
use crate::seed::sha256_hex;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed. Required: runs are never seeded from the clock.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub template_version: String,
    /// Share of failed trials above which a completed run exits with code 2.
    pub failure_threshold: f64,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub cohort: CohortConfig,
    pub sweep: SweepConfig,
    pub backend: BackendConfig,
    pub gateway: GatewayConfig,
    pub mf: MfSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: None,
            output_dir: PathBuf::from("runs/default"),
            template_version: TEMPLATE_VERSION.to_string(),
            failure_threshold: 0.1,
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            cohort: CohortConfig::default(),
            sweep: SweepConfig::default(),
            backend: BackendConfig::default(),
            gateway: GatewayConfig::default(),
            mf: MfSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub delimiter: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data/ml-100k/u.data"),
            delimiter: "tab".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mask_fraction: f64,
    pub mask_mode: MaskMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mask_fraction: 0.2,
            mask_mode: MaskMode::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub sample_size: usize,
    pub groups: Vec<Group>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            sample_size: 350,
            groups: vec![Group::Hot, Group::Cold],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub strategies: Vec<Strategy>,
    pub k_values: Vec<usize>,
    pub fractions: Vec<f64>,
    pub sample_order: SampleOrder,
    pub token_heuristic: TokenHeuristic,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            k_values: vec![5, 10, 20],
            fractions: vec![0.25, 0.5, 0.75, 1.0],
            sample_order: SampleOrder::SampleThenFilter,
            token_heuristic: TokenHeuristic::Scaled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub mock: MockKind,
    pub http: HttpBackendConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            mock: MockKind::Popularity,
            http: HttpBackendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub concurrency: usize,
    pub min_interval_ms: u64,
    pub retry: RetryPolicy,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            concurrency: 4,
            min_interval_ms: 0,
            retry: RetryPolicy::default(),
        }
    }
}

impl GatewayConfig {
    pub fn min_interval(&self) -> Duration {
        Duration::from_millis(self.min_interval_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfSection {
    pub enabled: bool,
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub init_std: f64,
}

impl Default for MfSection {
    fn default() -> Self {
        let d = MfConfig::default();
        Self {
            enabled: true,
            dim: d.dim,
            learning_rate: d.learning_rate,
            l2: d.l2,
            epochs: d.epochs,
            validation_fraction: d.validation_fraction,
            patience: d.patience,
            init_std: d.init_std,
        }
    }
}

impl MfSection {
    pub fn to_config(&self, seed: u64) -> MfConfig {
        MfConfig {
            dim: self.dim,
            learning_rate: self.learning_rate,
            l2: self.l2,
            epochs: self.epochs,
            seed,
            validation_fraction: self.validation_fraction,
            patience: self.patience,
            init_std: self.init_std,
        }
    }
}

/// The result-affecting part of a config; scheduling knobs and the output
/// location are left out so they can change between a run and its resume.
#[derive(Serialize)]
struct HashedView<'a> {
    schema_version: u32,
    seed: Option<u64>,
    template_version: &'a str,
    dataset: &'a DatasetConfig,
    split: &'a SplitConfig,
    cohort: &'a CohortConfig,
    sweep: &'a SweepConfig,
    backend: &'a BackendConfig,
    mf: &'a MfSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Master seed; only call after [`ExperimentConfig::validate`].
    pub fn master_seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn delimiter(&self) -> Result<Delimiter> {
        self.dataset.delimiter.parse()
    }

    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            mask_fraction: self.split.mask_fraction,
            mode: self.split.mask_mode,
        }
    }

    pub fn max_k(&self) -> usize {
        self.sweep.k_values.iter().copied().max().unwrap_or(1)
    }

    /// Hex SHA-256 of the result-affecting fields.
    pub fn hash(&self) -> String {
        let view = HashedView {
            schema_version: self.schema_version,
            seed: self.seed,
            template_version: &self.template_version,
            dataset: &self.dataset,
            split: &self.split,
            cohort: &self.cohort,
            sweep: &self.sweep,
            backend: &self.backend,
            mf: &self.mf,
        };
        sha256_hex(serde_json::to_string(&view).expect("config serializes").as_bytes())
    }

    /// Lists every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            p.push(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seed.is_none() {
            p.push("seed is required".to_string());
        }
        if self.template_version != TEMPLATE_VERSION {
            p.push(format!(
                "template_version `{}` does not match the built-in templates (`{TEMPLATE_VERSION}`)",
                self.template_version
            ));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            p.push(format!("failure_threshold {} outside [0, 1]", self.failure_threshold));
        }
        if let Err(e) = self.delimiter() {
            p.push(format!("dataset.delimiter: {e}"));
        }
        if !(self.split.mask_fraction > 0.0 && self.split.mask_fraction < 1.0) {
            p.push(format!("split.mask_fraction {} outside (0, 1)", self.split.mask_fraction));
        }
        if self.cohort.sample_size == 0 {
            p.push("cohort.sample_size must be positive".to_string());
        }
        if self.cohort.groups.is_empty() {
            p.push("cohort.groups is empty".to_string());
        }
        if self.sweep.strategies.is_empty() && !self.mf.enabled {
            p.push("nothing to run: no strategies and mf disabled".to_string());
        }
        if self.sweep.k_values.is_empty() && !self.sweep.strategies.is_empty() {
            p.push("sweep.k_values is empty".to_string());
        }
        if self.sweep.fractions.is_empty() && !self.sweep.strategies.is_empty() {
            p.push("sweep.fractions is empty".to_string());
        }
        for &k in &self.sweep.k_values {
            if k == 0 {
                p.push("sweep.k_values must all be >= 1".to_string());
            }
        }
        for &f in &self.sweep.fractions {
            if !(f > 0.0 && f <= 1.0) {
                p.push(format!("sweep.fractions: {f} outside (0, 1]"));
            }
        }
        let mut seen = HashSet::new();
        for s in &self.sweep.strategies {
            if !seen.insert(*s) {
                p.push(format!("sweep.strategies lists `{s}` twice"));
            }
        }
        let mut seen = HashSet::new();
        for &k in &self.sweep.k_values {
            if !seen.insert(k) {
                p.push(format!("sweep.k_values lists {k} twice"));
            }
        }
        let mut seen = HashSet::new();
        for &f in &self.sweep.fractions {
            if !seen.insert(f.to_bits()) {
                p.push(format!("sweep.fractions lists {f} twice"));
            }
        }
        if self.gateway.concurrency == 0 {
            p.push("gateway.concurrency must be at least 1".to_string());
        }
        if !(self.gateway.retry.backoff_factor >= 1.0 && self.gateway.retry.backoff_factor.is_finite()) {
            p.push("gateway.retry.backoff_factor must be >= 1".to_string());
        }
        if !(self.gateway.retry.jitter >= 0.0 && self.gateway.retry.jitter.is_finite()) {
            p.push("gateway.retry.jitter must be >= 0".to_string());
        }
        if self.backend.kind == BackendKind::Live && self.backend.http.model.is_empty() {
            p.push("backend.http.model is empty".to_string());
        }
        if self.mf.enabled {
            if self.mf.dim == 0 {
                p.push("mf.dim must be at least 1".to_string());
            }
            if self.mf.epochs == 0 {
                p.push("mf.epochs must be at least 1".to_string());
            }
            if !(self.mf.learning_rate > 0.0) {
                p.push("mf.learning_rate must be positive".to_string());
            }
            if !(self.mf.l2 >= 0.0) {
                p.push("mf.l2 must be non-negative".to_string());
            }
            if !(0.0..1.0).contains(&self.mf.validation_fraction) {
                p.push("mf.validation_fraction outside [0, 1)".to_string());
            }
            if !(self.mf.init_std > 0.0) {
                p.push("mf.init_std must be positive".to_string());
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Settings of the opt-in live smoke run: reasoning strategy, k = 10,
    /// f = 1.0, 20 cold users, MF disabled.
    pub fn live_smoke(dataset: PathBuf, output_dir: PathBuf, seed: u64) -> Self {
        Self {
            seed: Some(seed),
            output_dir,
            dataset: DatasetConfig {
                path: dataset,
                ..Default::default()
            },
            cohort: CohortConfig {
                sample_size: 20,
                groups: vec![Group::Cold],
            },
            sweep: SweepConfig {
                strategies: vec![Strategy::Reasoning],
                k_values: vec![10],
                fractions: vec![1.0],
                ..Default::default()
            },
            backend: BackendConfig {
                kind: BackendKind::Live,
                ..Default::default()
            },
            mf: MfSection {
                enabled: false,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> ExperimentConfig {
        ExperimentConfig {
            seed: Some(1),
            ..Default::default()
        }
    }

    #[test]
    fn defaults_follow_the_experiment_protocol() {
        let c = valid();
        assert_eq!(c.split.mask_fraction, 0.2);
        assert_eq!(c.cohort.sample_size, 350);
        assert_eq!(c.sweep.fractions, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(c.sweep.k_values, vec![5, 10, 20]);
        assert_eq!(c.backend.kind, BackendKind::Mock);
        assert_eq!(c.backend.http.temperature, 0.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn seed_is_required() {
        let err = ExperimentConfig::default().validate().unwrap_err();
        assert!(err.to_string().contains("seed is required"));
    }

    #[test]
    fn all_problems_reported_together() {
        let mut c = valid();
        c.sweep.fractions = vec![0.0, 1.5];
        c.sweep.k_values = vec![0];
        c.gateway.concurrency = 0;
        match c.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 4, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = valid();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        let partial = ExperimentConfig::from_toml_str("seed = 5\n[sweep]\nk_values = [10]\n").unwrap();
        assert_eq!(partial.seed, Some(5));
        assert_eq!(partial.sweep.k_values, vec![10]);
        assert_eq!(partial.cohort.sample_size, 350);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("seed = 5\nsede = 3\n").is_err());
    }

    #[test]
    fn hash_ignores_scheduling_and_output() {
        let a = valid();
        let mut b = a.clone();
        b.gateway.concurrency = 8;
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = Some(2);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn live_smoke_settings() {
        let c = ExperimentConfig::live_smoke("u.data".into(), "out".into(), 3);
        assert!(c.validate().is_ok());
        assert_eq!(c.sweep.k_values, vec![10]);
        assert_eq!(c.sweep.fractions, vec![1.0]);
        assert_eq!(c.sweep.strategies, vec![Strategy::Reasoning]);
        assert_eq!(c.cohort.groups, vec![Group::Cold]);
        assert_eq!(c.cohort.sample_size, 20);
        assert_eq!(c.backend.kind, BackendKind::Live);
    }
}
