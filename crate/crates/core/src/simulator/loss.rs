use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Power-law-plus-floor training curve of one domain:
/// `floor + amplitude · (1 + n)^(−decay)` nats per token after `n`
/// effective tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainCurve {
    pub name: String,
    pub floor: f64,
    pub amplitude: f64,
    pub decay: f64,
}

/// Step change of one domain's floor, effective from `turn` onwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloorChange {
    pub turn: u64,
    pub domain: usize,
    pub floor: f64,
}

/// Synthetic stand-in for a model's per-domain training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub domains: Vec<DomainCurve>,
    /// `transfer[i][j]`: how much a token of domain `j` counts toward domain
    /// `i`'s progress. `None` is the identity.
    pub transfer: Option<Vec<Vec<f64>>>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub floor_changes: Vec<FloorChange>,
}

impl LossModel {
    pub fn new(domains: Vec<DomainCurve>) -> Self {
        Self {
            domains,
            transfer: None,
            noise_sigma: 0.0,
            seed: 0,
            floor_changes: Vec::new(),
        }
    }

    /// Constant-loss arms, one per floor.
    pub fn constant(floors: &[f64]) -> Self {
        Self::new(
            floors
                .iter()
                .enumerate()
                .map(|(i, a)| DomainCurve {
                    name: format!("domain-{i}"),
                    floor: *a,
                    amplitude: 0.0,
                    decay: 1.0,
                })
                .collect(),
        )
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.domains.len();
        if k == 0 {
            return Err(Error::config("loss model has no domains"));
        }
        for d in &self.domains {
            let finite = d.floor.is_finite() && d.amplitude.is_finite() && d.decay.is_finite();
            if !finite || d.floor < 0.0 || d.amplitude < 0.0 || d.decay <= 0.0 {
                return Err(Error::config(format!(
                    "domain '{}': need floor >= 0, amplitude >= 0, decay > 0",
                    d.name
                )));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be finite and nonnegative"));
        }
        if let Some(t) = &self.transfer {
            if t.len() != k || t.iter().any(|row| row.len() != k) {
                return Err(Error::config(format!("transfer matrix must be {k}x{k}")));
            }
            for (i, row) in t.iter().enumerate() {
                if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(Error::config("transfer entries must be finite and nonnegative"));
                }
                if row[i] != 1.0 {
                    return Err(Error::config(format!("transfer diagonal entry {i} must be 1")));
                }
            }
        }
        for c in &self.floor_changes {
            if c.domain >= k || !c.floor.is_finite() || c.floor < 0.0 {
                return Err(Error::config(format!("invalid floor change {c:?}")));
            }
        }
        Ok(())
    }

    fn curve(&self, domain_id: usize) -> Result<&DomainCurve> {
        self.domains.get(domain_id).ok_or(Error::UnknownDomain {
            id: domain_id,
            num_domains: self.domains.len(),
        })
    }

    /// Floor in force at `turn` after applying the step-change schedule.
    pub fn floor_at(&self, domain_id: usize, turn: u64) -> Result<f64> {
        let base = self.curve(domain_id)?.floor;
        Ok(self
            .floor_changes
            .iter()
            .filter(|c| c.domain == domain_id && c.turn <= turn)
            .max_by_key(|c| c.turn)
            .map_or(base, |c| c.floor))
    }

    /// `Σ_j transfer[i][j] · tokens_served[j]`.
    pub fn effective_tokens(&self, domain_id: usize, tokens_served: &[u64]) -> f64 {
        match &self.transfer {
            None => tokens_served[domain_id] as f64,
            Some(t) => t[domain_id]
                .iter()
                .zip(tokens_served)
                .map(|(w, n)| w * *n as f64)
                .sum(),
        }
    }

    /// Noise-free loss. Held-out evaluation uses this.
    pub fn clean_loss(&self, domain_id: usize, effective_tokens: f64, turn: u64) -> Result<f64> {
        let c = self.curve(domain_id)?;
        if effective_tokens.is_nan() || effective_tokens < 0.0 {
            return Err(Error::config(format!("effective tokens must be >= 0, got {effective_tokens}")));
        }
        let floor = self.floor_at(domain_id, turn)?;
        Ok(floor + c.amplitude * (1.0 + effective_tokens).powf(-c.decay))
    }

    /// Training loss of one micro-batch. Gaussian noise is keyed by
    /// `call_index`, so a replay reproduces it exactly; the result is
    /// clamped at zero.
    pub fn synthetic_loss(&self, domain_id: usize, effective_tokens: f64, turn: u64, call_index: u64) -> Result<f64> {
        let clean = self.clean_loss(domain_id, effective_tokens, turn)?;
        if self.noise_sigma == 0.0 {
            return Ok(clean);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(call_index);
        let z: f64 = StandardNormal.sample(&mut rng);
        Ok((clean + self.noise_sigma * z).max(0.0))
    }
}
