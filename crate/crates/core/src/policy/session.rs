use super::{MixingDistribution, Policy, PolicyConfig, RewardUpdate};
use crate::error::{Error, Result};

/// Turn-granular driver for an external training loop: draw domains for the
/// accumulation steps, report the summed loss of every drawn domain, then
/// step to the next turn.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    policy: Policy,
    dist: MixingDistribution,
    hits: Vec<u32>,
}

impl Session {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        Self::from_policy(Policy::new(config)?)
    }

    pub fn from_policy(policy: Policy) -> Result<Self> {
        let dist = policy.distribution()?;
        let hits = vec![0; policy.num_domains()];
        Ok(Self { policy, dist, hits })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn distribution(&self) -> &MixingDistribution {
        &self.dist
    }

    pub fn sample(&mut self) -> usize {
        let i = self.policy.sample(&self.dist);
        self.hits[i] += 1;
        i
    }

    /// Domains drawn so far this turn, with multiplicity.
    pub fn hits(&self) -> &[u32] {
        &self.hits
    }

    /// Close the turn. `losses` holds one summed loss per domain drawn this
    /// turn; nothing else is accepted.
    pub fn step(&mut self, losses: &[(usize, f64)]) -> Result<&MixingDistribution> {
        let k = self.policy.num_domains();
        let drawn = self.hits.iter().filter(|h| **h > 0).count();
        if drawn > 0 && losses.is_empty() {
            return Err(Error::Contract(format!("turn drew {drawn} domain(s) but no losses were reported")));
        }
        let mut updates = Vec::with_capacity(losses.len());
        for &(domain_id, summed_loss) in losses {
            if domain_id >= k {
                return Err(Error::UnknownDomain { id: domain_id, num_domains: k });
            }
            if self.hits[domain_id] == 0 {
                return Err(Error::Contract(format!("loss reported for domain {domain_id}, which was not drawn this turn")));
            }
            updates.push(RewardUpdate {
                domain_id,
                summed_loss,
                sample_prob: self.dist.probs[domain_id],
            });
        }
        if updates.len() < drawn {
            let missing: Vec<_> = (0..k)
                .filter(|i| self.hits[*i] > 0 && !losses.iter().any(|(d, _)| d == i))
                .collect();
            return Err(Error::Contract(format!("no loss reported for drawn domain(s) {missing:?}")));
        }
        self.policy.update_rewards(&updates)?;
        self.policy.advance_turn();
        self.dist = self.policy.distribution()?;
        self.hits.iter_mut().for_each(|h| *h = 0);
        Ok(&self.dist)
    }

    /// Snapshot between turns. Refused while draws are pending.
    pub fn save(&self) -> Result<Vec<u8>> {
        if self.hits.iter().any(|h| *h > 0) {
            return Err(Error::Contract("cannot save in the middle of a turn".into()));
        }
        Ok(self.policy.save())
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        Self::from_policy(Policy::load(bytes)?)
    }
}
