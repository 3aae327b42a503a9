//! Exp3-style bandit over data domains.
//!
//! Each domain is an arm. At turn `t` the policy mixes a Gibbs distribution
//! over moving-average importance-weighted reward estimates with a uniform
//! floor of height `ε_t`:
//!
//! ```text
//! π_t(i) = (1 − K·ε_t) · exp(ε_{t−1}·R̂_i) / Σ_j exp(ε_{t−1}·R̂_j) + ε_t
//! ε_t    = min{ 1/K, sqrt(ln K / (K·t)) }
//! R̂_i   ← α·R̂_i + (1 − α) · L_i / π(i)
//! ```
//!
//! where `L_i` is the loss summed over the accumulation steps of the turn
//! that drew domain `i`. During warmup the sampling distribution is held at
//! the configured initial weights.
//!
//! Turns are 1-based. A fresh state sits at `t = 1` with `ε_0 = 1/K` and all
//! reward estimates at zero.

mod persist;
mod session;

pub use persist::{load_state, save_state, PolicyStateJson, STATE_FORMAT_VERSION, STATE_MAGIC};
pub use session::Session;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing factor used when a config does not set one.
pub const DEFAULT_ALPHA: f64 = 0.9;
/// Fraction of total turns spent in warmup when a run length is known.
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.01;
pub const DEFAULT_SEED: u64 = 0x0D11_5EED;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub num_domains: usize,
    pub alpha: f64,
    pub warmup_steps: u64,
    /// Apply reward updates during warmup (importance-weighted by the
    /// stationary warmup weights). Disable for the ablation that freezes the
    /// estimates until warmup exits.
    pub warmup_reward_updates: bool,
    pub initial_weights: Option<Vec<f64>>,
    pub rng_seed: u64,
}

impl PolicyConfig {
    pub fn new(num_domains: usize) -> Self {
        Self {
            num_domains,
            alpha: DEFAULT_ALPHA,
            warmup_steps: 0,
            warmup_reward_updates: true,
            initial_weights: None,
            rng_seed: DEFAULT_SEED,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_warmup(mut self, steps: u64) -> Self {
        self.warmup_steps = steps;
        self
    }

    pub fn with_initial_weights(mut self, weights: Vec<f64>) -> Self {
        self.initial_weights = Some(weights);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("num_domains must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if let Some(w) = &self.initial_weights {
            validate_probability_vector(w, self.num_domains, "initial_weights")?;
        }
        Ok(())
    }

    /// The stationary warmup distribution: `initial_weights`, or uniform.
    pub fn warmup_weights(&self) -> Vec<f64> {
        match &self.initial_weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.num_domains as f64; self.num_domains],
        }
    }
}

pub(crate) fn validate_probability_vector(w: &[f64], k: usize, what: &str) -> Result<()> {
    if w.len() != k {
        return Err(Error::config(format!("{what} has {} entries, expected {k}", w.len())));
    }
    if let Some(bad) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::config(format!("{what} entries must be finite and nonnegative, got {bad}")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::config(format!("{what} must sum to 1 (got {sum})")));
    }
    Ok(())
}

/// Warmup length as a fraction of the run, rounded up to whole turns.
pub fn warmup_steps_for(total_turns: u64, fraction: f64) -> u64 {
    let raw = total_turns as f64 * fraction;
    let nearest = raw.round();
    // 0.01 * 100000 must give 1000, not 1001.
    if (raw - nearest).abs() < 1e-9 {
        nearest as u64
    } else {
        raw.ceil() as u64
    }
}

/// Loosely-specified policy settings, as read from config files and the
/// foreign-function mapping. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(default, alias = "K")]
    pub num_domains: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    #[serde(default)]
    pub warmup_fraction: Option<f64>,
    #[serde(default)]
    pub total_turns: Option<u64>,
    #[serde(default)]
    pub warmup_reward_updates: Option<bool>,
    #[serde(default)]
    pub initial_weights: Option<Vec<f64>>,
    #[serde(default, alias = "rng_seed")]
    pub seed: Option<u64>,
}

impl PolicySpec {
    /// Resolve into a validated config. `num_domains` and `total_turns`
    /// supply values the spec leaves out (e.g. K from a loss model).
    pub fn resolve(&self, num_domains: Option<usize>, total_turns: Option<u64>) -> Result<PolicyConfig> {
        let k = match (self.num_domains, num_domains) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::config(format!("policy declares K = {a} but the run has {b} domains")))
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => return Err(Error::config("K (num_domains) is required")),
        };
        let total = self.total_turns.or(total_turns);
        let warmup_steps = match (self.warmup_steps, self.warmup_fraction, total) {
            (Some(steps), _, _) => steps,
            (None, Some(f), _) if !(0.0..=1.0).contains(&f) => {
                return Err(Error::config(format!("warmup_fraction must lie in [0, 1], got {f}")))
            }
            (None, f, Some(n)) => warmup_steps_for(n, f.unwrap_or(DEFAULT_WARMUP_FRACTION)),
            (None, Some(_), None) => {
                return Err(Error::config("warmup_fraction needs total_turns to resolve"))
            }
            (None, None, None) => 0,
        };
        let config = PolicyConfig {
            num_domains: k,
            alpha: self.alpha.unwrap_or(DEFAULT_ALPHA),
            warmup_steps,
            warmup_reward_updates: self.warmup_reward_updates.unwrap_or(true),
            initial_weights: self.initial_weights.clone(),
            rng_seed: self.seed.unwrap_or(DEFAULT_SEED),
        };
        config.validate()?;
        Ok(config)
    }
}

/// `min{1/K, sqrt(ln K / (K·t))}`.
pub fn exploration_rate(num_domains: usize, turn: u64) -> Result<f64> {
    if num_domains == 0 {
        return Err(Error::config("exploration rate needs K >= 1"));
    }
    if turn == 0 {
        return Err(Error::config("exploration rate is defined for turns t >= 1"));
    }
    let k = num_domains as f64;
    let decayed = (k.ln() / (k * turn as f64)).sqrt();
    Ok(decayed.min(1.0 / k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingDistribution {
    pub probs: Vec<f64>,
    pub turn: u64,
}

impl MixingDistribution {
    pub fn uniform(num_domains: usize, turn: u64) -> Self {
        Self {
            probs: vec![1.0 / num_domains as f64; num_domains],
            turn,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardUpdate {
    pub domain_id: usize,
    /// Loss in nats, summed over the accumulation steps that drew this domain.
    pub summed_loss: f64,
    /// Probability under which the domain was drawn this turn.
    pub sample_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub turn: u64,
    pub eps_current: f64,
    pub eps_prev: f64,
    pub reward_estimates: Vec<f64>,
    pub in_warmup: bool,
    pub config: PolicyConfig,
}

impl PolicyState {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let k = config.num_domains;
        Ok(Self {
            turn: 1,
            eps_current: exploration_rate(k, 1)?,
            eps_prev: 1.0 / k as f64,
            reward_estimates: vec![0.0; k],
            in_warmup: config.warmup_steps >= 1,
            config,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.config.num_domains
    }

    /// Apply the end-of-turn reward updates. All updates are validated
    /// before any estimate changes. Entries with zero summed loss are
    /// skipped, as are all entries during warmup when warmup reward
    /// accumulation is disabled.
    pub fn update_rewards(&mut self, updates: &[RewardUpdate]) -> Result<()> {
        let k = self.num_domains();
        for (n, u) in updates.iter().enumerate() {
            if u.domain_id >= k {
                return Err(Error::UnknownDomain { id: u.domain_id, num_domains: k });
            }
            if updates[..n].iter().any(|p| p.domain_id == u.domain_id) {
                return Err(Error::InvalidUpdate(format!("domain {} updated twice in one turn", u.domain_id)));
            }
            if !u.summed_loss.is_finite() {
                return Err(Error::NonFinite { what: "summed loss", value: u.summed_loss });
            }
            if u.summed_loss < 0.0 {
                return Err(Error::InvalidUpdate(format!("negative loss {} for domain {}", u.summed_loss, u.domain_id)));
            }
            if !(u.sample_prob > 0.0 && u.sample_prob <= 1.0) {
                return Err(Error::InvalidUpdate(format!(
                    "sample probability {} for domain {} is outside (0, 1]",
                    u.sample_prob, u.domain_id
                )));
            }
        }
        if self.in_warmup && !self.config.warmup_reward_updates {
            return Ok(());
        }
        let alpha = self.config.alpha;
        let estimate = |u: &RewardUpdate, r: &[f64]| alpha * r[u.domain_id] + (1.0 - alpha) * (u.summed_loss / u.sample_prob);
        // Each domain appears at most once, so checking before writing keeps
        // the update all-or-nothing without a scratch copy.
        for u in updates.iter().filter(|u| u.summed_loss != 0.0) {
            let e = estimate(u, &self.reward_estimates);
            if !e.is_finite() {
                return Err(Error::NonFinite { what: "reward estimate", value: e });
            }
        }
        for u in updates.iter().filter(|u| u.summed_loss != 0.0) {
            self.reward_estimates[u.domain_id] = estimate(u, &self.reward_estimates);
        }
        Ok(())
    }

    pub fn advance_turn(&mut self) {
        self.turn += 1;
        self.eps_prev = self.eps_current;
        self.eps_current =
            exploration_rate(self.num_domains(), self.turn).expect("K >= 1 and t >= 1 hold for a valid state");
        self.in_warmup = self.turn <= self.config.warmup_steps;
    }
}

/// Gibbs-plus-uniform mixture for the state's current turn.
pub fn mixing_distribution(state: &PolicyState) -> Result<MixingDistribution> {
    let k = state.num_domains();
    if let Some(bad) = state.reward_estimates.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite { what: "reward estimate", value: *bad });
    }
    let uniform = 1.0 / k as f64;
    let eps = state.eps_current;
    // K·(1/K) need not round to exactly 1, so the cold-start window is
    // detected directly and returned as the exact uniform vector.
    if eps >= uniform {
        return Ok(MixingDistribution::uniform(k, state.turn));
    }
    let exploit = 1.0 - k as f64 * eps;
    let temperature = state.eps_prev;
    let max = state.reward_estimates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = state
        .reward_estimates
        .iter()
        .map(|r| (temperature * (r - max)).exp())
        .collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p = exploit * (*p / z) + eps;
    }
    Ok(MixingDistribution { probs, turn: state.turn })
}

/// The stationary distribution used while the warmup gate is open.
pub fn warmup_distribution(state: &PolicyState) -> MixingDistribution {
    MixingDistribution {
        probs: state.config.warmup_weights(),
        turn: state.turn,
    }
}

/// Inverse-CDF lookup of `u ∈ [0, 1)`. A draw landing exactly on a CDF edge
/// belongs to the interval on its right; zero-mass arms are never returned.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut cdf = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cdf += p;
        if u < cdf {
            return i;
        }
    }
    // Rounding left the total just under u.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

pub fn sample_domain<R: Rng + ?Sized>(dist: &MixingDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    sample_index(&dist.probs, u)
}

/// Policy state together with the random source it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    state: PolicyState,
    rng: ChaCha8Rng,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(Self {
            state: PolicyState::new(config)?,
            rng,
        })
    }

    pub(crate) fn from_parts(state: PolicyState, rng: ChaCha8Rng) -> Self {
        Self { state, rng }
    }

    pub fn state(&self) -> &PolicyState {
        &self.state
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.state.config
    }

    pub fn turn(&self) -> u64 {
        self.state.turn
    }

    pub fn num_domains(&self) -> usize {
        self.state.num_domains()
    }

    pub(crate) fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Sampling distribution for the current turn: the warmup weights while
    /// the gate is open, the Gibbs-plus-uniform mixture afterwards.
    pub fn distribution(&self) -> Result<MixingDistribution> {
        if self.state.in_warmup {
            Ok(warmup_distribution(&self.state))
        } else {
            mixing_distribution(&self.state)
        }
    }

    pub fn sample(&mut self, dist: &MixingDistribution) -> usize {
        sample_domain(dist, &mut self.rng)
    }

    pub fn update_rewards(&mut self, updates: &[RewardUpdate]) -> Result<()> {
        self.state.update_rewards(updates)
    }

    pub fn advance_turn(&mut self) {
        self.state.advance_turn()
    }

    pub fn save(&self) -> Vec<u8> {
        save_state(self)
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        load_state(bytes)
    }
}
