//! Simulation configuration and its TOML file form.
//!
//! ```toml
//! name = "two-arm"
//! seed = 7
//! total_turns = 5000
//! accumulation_steps = 8
//!
//! [strategy]
//! kind = "odm"              # or "static" (with weights / weights_file) or "uniform"
//!
//! [policy]
//! alpha = 0.9
//! warmup_steps = 0          # default: 1% of total_turns
//!
//! [loss_model]
//! noise_sigma = 0.0
//! [[loss_model.domain]]
//! name = "high"
//! floor = 5.0
//! amplitude = 0.0
//! decay = 0.5
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::loss::{DomainCurve, FloorChange, LossModel};
use crate::corpus::SyntheticCorpus;
use crate::error::{Error, Result};
use crate::policy::{validate_probability_vector, PolicyConfig, PolicySpec, DEFAULT_SEED};

pub const DEFAULT_ACCUMULATION_STEPS: usize = 8;
pub const DEFAULT_BATCH_SIZE: usize = 60;
pub const DEFAULT_SEQ_LEN: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "weights", rename_all = "lowercase")]
pub enum Strategy {
    Odm,
    Static(Vec<f64>),
    Uniform,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Odm => "odm",
            Strategy::Static(_) => "static",
            Strategy::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CorpusSource {
    /// Count tokens only.
    Tally,
    Manifest(PathBuf),
    Synthetic(SyntheticCorpus),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub name: String,
    pub seed: u64,
    pub policy: PolicyConfig,
    pub total_turns: u64,
    pub accumulation_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub eval_every: u64,
    pub loss_model: LossModel,
    pub strategy: Strategy,
    pub corpus: CorpusSource,
    /// Stand-in duration of one training step, spent busy each turn.
    pub busy_work: Duration,
    pub record_timing: bool,
}

/// Evaluation cadence: every 1% of the run, at least every turn.
pub fn default_eval_every(total_turns: u64) -> u64 {
    total_turns.div_ceil(100).max(1)
}

pub(crate) fn sub_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SimulationConfig {
    /// Config with the default shapes and an ODM strategy over `loss_model`.
    pub fn new(name: impl Into<String>, loss_model: LossModel, total_turns: u64) -> Self {
        let k = loss_model.num_domains();
        Self {
            name: name.into(),
            seed: DEFAULT_SEED,
            policy: PolicyConfig::new(k),
            total_turns,
            accumulation_steps: DEFAULT_ACCUMULATION_STEPS,
            batch_size: DEFAULT_BATCH_SIZE,
            seq_len: DEFAULT_SEQ_LEN,
            eval_every: default_eval_every(total_turns),
            loss_model,
            strategy: Strategy::Odm,
            corpus: CorpusSource::Tally,
            busy_work: Duration::ZERO,
            record_timing: false,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.loss_model.num_domains()
    }

    pub fn batch_seed(&self) -> u64 {
        sub_seed(self.seed, 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_model.validate()?;
        self.policy.validate()?;
        let k = self.num_domains();
        if self.policy.num_domains != k {
            return Err(Error::config(format!(
                "policy has K = {} but the loss model has {k} domains",
                self.policy.num_domains
            )));
        }
        if self.total_turns == 0 || self.accumulation_steps == 0 {
            return Err(Error::config("total_turns and accumulation_steps must be at least 1"));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size, seq_len and eval_every must be positive"));
        }
        if let Strategy::Static(w) = &self.strategy {
            validate_probability_vector(w, k, "static weights")?;
        }
        Ok(())
    }

    /// Content digest of the resolved config.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Replace the strategy by kind name, taking static weights from the
    /// current static strategy or the policy's initial weights.
    pub fn with_strategy_kind(mut self, kind: &str) -> Result<Self> {
        self.strategy = match kind {
            "odm" => Strategy::Odm,
            "uniform" => Strategy::Uniform,
            "static" => match (&self.strategy, &self.policy.initial_weights) {
                (Strategy::Static(w), _) => Strategy::Static(w.clone()),
                (_, Some(w)) => Strategy::Static(w.clone()),
                _ => return Err(Error::config("static strategy needs weights (strategy.weights or policy.initial_weights)")),
            },
            other => return Err(Error::config(format!("unknown strategy '{other}'"))),
        };
        self.validate()?;
        Ok(self)
    }

    pub fn from_file(path: impl AsRef<Path>, seed_override: Option<u64>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io("cannot read simulation config", path, e))?;
        let file: SimulationFile =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        file.resolve(path.parent().unwrap_or_else(|| Path::new(".")), seed_override)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationFile {
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub total_turns: u64,
    pub accumulation_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub seq_len: Option<usize>,
    pub eval_every: Option<u64>,
    pub busy_work_micros: Option<u64>,
    pub record_timing: Option<bool>,
    #[serde(default)]
    pub strategy: StrategyFile,
    #[serde(default)]
    pub policy: PolicyFile,
    pub loss_model: LossModelFile,
    pub corpus: Option<CorpusFile>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyFile {
    pub kind: Option<String>,
    pub weights: Option<Vec<f64>>,
    pub weights_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub alpha: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub warmup_fraction: Option<f64>,
    pub warmup_reward_updates: Option<bool>,
    pub initial_weights: Option<Vec<f64>>,
    pub initial_weights_file: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossModelFile {
    pub noise_sigma: Option<f64>,
    pub seed: Option<u64>,
    pub transfer: Option<Vec<Vec<f64>>>,
    pub domain: Vec<DomainCurve>,
    #[serde(default)]
    pub floor_change: Vec<FloorChange>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFile {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub docs_per_domain: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub vocab_size: u32,
}

/// A weight-vector file: `weights = [...]`, optionally with `names = [...]`
/// that must match the run's domain order.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    names: Option<Vec<String>>,
    weights: Vec<f64>,
}

fn read_weights(base: &Path, file: &Path, domain_names: &[String]) -> Result<Vec<f64>> {
    let path = if file.is_absolute() { file.to_path_buf() } else { base.join(file) };
    let text = fs::read_to_string(&path).map_err(|e| Error::io("cannot read weights file", &path, e))?;
    let w: WeightsFile = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    if let Some(names) = &w.names {
        if names != domain_names {
            return Err(Error::config(format!("{}: domain names do not match the loss model", path.display())));
        }
    }
    // Published weight tables are rounded; renormalize before validation.
    let sum: f64 = w.weights.iter().sum();
    if sum.is_nan() || sum <= 0.0 {
        return Err(Error::config(format!("{}: weights must have positive mass", path.display())));
    }
    Ok(w.weights.iter().map(|x| x / sum).collect())
}

impl SimulationFile {
    pub fn resolve(&self, base: &Path, seed_override: Option<u64>) -> Result<SimulationConfig> {
        let loss_seed_explicit = seed_override.is_none().then_some(self.loss_model.seed).flatten();
        let seed = seed_override
            .or(self.seed)
            .or(self.policy.seed)
            .unwrap_or(DEFAULT_SEED);
        let loss_model = LossModel {
            domains: self.loss_model.domain.clone(),
            transfer: self.loss_model.transfer.clone(),
            noise_sigma: self.loss_model.noise_sigma.unwrap_or(0.0),
            seed: loss_seed_explicit.unwrap_or_else(|| sub_seed(seed, 2)),
            floor_changes: self.loss_model.floor_change.clone(),
        };
        loss_model.validate()?;
        let names = loss_model.names();
        let k = names.len();

        let initial_weights = match (&self.policy.initial_weights, &self.policy.initial_weights_file) {
            (Some(_), Some(_)) => return Err(Error::config("give initial_weights or initial_weights_file, not both")),
            (Some(w), None) => Some(w.clone()),
            (None, Some(f)) => Some(read_weights(base, f, &names)?),
            (None, None) => None,
        };
        let policy = PolicySpec {
            num_domains: None,
            alpha: self.policy.alpha,
            warmup_steps: self.policy.warmup_steps,
            warmup_fraction: self.policy.warmup_fraction,
            total_turns: None,
            warmup_reward_updates: self.policy.warmup_reward_updates,
            initial_weights,
            seed: Some(seed),
        }
        .resolve(Some(k), Some(self.total_turns))?;

        let static_weights = match (&self.strategy.weights, &self.strategy.weights_file) {
            (Some(_), Some(_)) => return Err(Error::config("give strategy.weights or strategy.weights_file, not both")),
            (Some(w), None) => Some(w.clone()),
            (None, Some(f)) => Some(read_weights(base, f, &names)?),
            (None, None) => None,
        };
        let strategy = match self.strategy.kind.as_deref().unwrap_or("odm") {
            "odm" => Strategy::Odm,
            "uniform" => Strategy::Uniform,
            "static" => Strategy::Static(
                static_weights
                    .or_else(|| policy.initial_weights.clone())
                    .ok_or_else(|| Error::config("static strategy needs weights"))?,
            ),
            other => return Err(Error::config(format!("unknown strategy '{other}'"))),
        };

        let corpus = match &self.corpus {
            None => CorpusSource::Tally,
            Some(CorpusFile { manifest: Some(_), synthetic: Some(_) }) => {
                return Err(Error::config("corpus takes a manifest or a synthetic section, not both"))
            }
            Some(CorpusFile { manifest: Some(m), .. }) => {
                CorpusSource::Manifest(if m.is_absolute() { m.clone() } else { base.join(m) })
            }
            Some(CorpusFile { synthetic: Some(s), .. }) => CorpusSource::Synthetic(SyntheticCorpus {
                names: names.clone(),
                docs_per_domain: s.docs_per_domain,
                min_doc_len: s.min_doc_len,
                max_doc_len: s.max_doc_len,
                vocab_size: s.vocab_size,
                seed: sub_seed(seed, 3),
            }),
            Some(_) => CorpusSource::Tally,
        };

        let config = SimulationConfig {
            name: self.name.clone().unwrap_or_else(|| "simulation".into()),
            seed,
            policy,
            total_turns: self.total_turns,
            accumulation_steps: self.accumulation_steps.unwrap_or(DEFAULT_ACCUMULATION_STEPS),
            batch_size: self.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
            seq_len: self.seq_len.unwrap_or(DEFAULT_SEQ_LEN),
            eval_every: self.eval_every.unwrap_or_else(|| default_eval_every(self.total_turns)),
            loss_model,
            strategy,
            corpus,
            busy_work: Duration::from_micros(self.busy_work_micros.unwrap_or(0)),
            record_timing: self.record_timing.unwrap_or(false),
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
name = "basic"
seed = 11
total_turns = 300

[strategy]
kind = "static"
weights = [0.75, 0.25]

[loss_model]
[[loss_model.domain]]
name = "a"
floor = 2.0
amplitude = 1.0
decay = 0.2
[[loss_model.domain]]
name = "b"
floor = 1.0
amplitude = 0.0
decay = 1.0
"#;

    fn parse(text: &str, seed: Option<u64>) -> Result<SimulationConfig> {
        let file: SimulationFile = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        file.resolve(Path::new("."), seed)
    }

    #[test]
    fn defaults_fill_in() {
        let c = parse(BASIC, None).unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.policy.rng_seed, 11);
        assert_eq!((c.accumulation_steps, c.batch_size, c.seq_len), (8, 60, 1024));
        assert_eq!(c.policy.warmup_steps, 3);
        assert_eq!(c.eval_every, 3);
        assert_eq!(c.strategy, Strategy::Static(vec![0.75, 0.25]));
        assert_eq!(c.policy.alpha, 0.9);
    }

    #[test]
    fn seed_flag_wins() {
        let c = parse(BASIC, Some(99)).unwrap();
        assert_eq!((c.seed, c.policy.rng_seed), (99, 99));
        let unseeded = BASIC.replace("seed = 11\n", "");
        assert_eq!(parse(&unseeded, None).unwrap().seed, DEFAULT_SEED);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(parse(&BASIC.replace("[0.75, 0.25]", "[0.75, 0.5]"), None).is_err());
        assert!(parse(&BASIC.replace("kind = \"static\"", "kind = \"greedy\""), None).is_err());
        assert!(parse(&BASIC.replace("total_turns = 300", "total_turns = 0"), None).is_err());
        assert!(parse(&format!("{BASIC}\nextra = 1\n"), None).is_err());
    }

    #[test]
    fn strategy_override() {
        let c = parse(BASIC, None).unwrap();
        assert_eq!(c.clone().with_strategy_kind("uniform").unwrap().strategy, Strategy::Uniform);
        let odm = c.with_strategy_kind("odm").unwrap();
        assert!(odm.with_strategy_kind("static").is_err());
    }

    #[test]
    fn weights_file_is_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("w.toml"), "names = [\"a\", \"b\"]\nweights = [3.0, 1.0]\n").unwrap();
        let text = BASIC.replace("weights = [0.75, 0.25]", "weights_file = \"w.toml\"");
        let file: SimulationFile = toml::from_str(&text).unwrap();
        let c = file.resolve(dir.path(), None).unwrap();
        assert_eq!(c.strategy, Strategy::Static(vec![0.75, 0.25]));

        fs::write(dir.path().join("w.toml"), "names = [\"b\", \"a\"]\nweights = [3.0, 1.0]\n").unwrap();
        assert!(file.resolve(dir.path(), None).is_err());
    }
}
