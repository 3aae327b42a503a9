//! Versioned binary snapshot of a [`Policy`], including the random-source
//! position, so a resumed run continues bit-for-bit.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "ODMP" | version u16 | payload_len u32 | payload | crc32(magic..payload) u32
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{exploration_rate, Policy, PolicyConfig, PolicyState};
use crate::error::{Error, Result};
use crate::wire::{Reader, Writer};

pub const STATE_MAGIC: [u8; 4] = *b"ODMP";
pub const STATE_FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4;

pub fn save_state(policy: &Policy) -> Vec<u8> {
    let s = policy.state();
    let c = &s.config;
    let mut w = Writer::default();
    w.u32(c.num_domains as u32);
    w.f64(c.alpha);
    w.u64(c.warmup_steps);
    w.bool(c.warmup_reward_updates);
    match &c.initial_weights {
        Some(weights) => {
            w.bool(true);
            weights.iter().for_each(|x| w.f64(*x));
        }
        None => w.bool(false),
    }
    w.u64(c.rng_seed);
    w.u64(s.turn);
    w.f64(s.eps_current);
    w.f64(s.eps_prev);
    w.bool(s.in_warmup);
    s.reward_estimates.iter().for_each(|x| w.f64(*x));
    let rng = policy.rng();
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
    let payload = w.into_inner();

    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(&STATE_MAGIC);
    out.extend_from_slice(&STATE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn load_state(bytes: &[u8]) -> Result<Policy> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::StateFormat(format!("truncated: {} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != STATE_MAGIC {
        return Err(Error::StateFormat("bad magic bytes, not a policy state".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != STATE_FORMAT_VERSION {
        return Err(Error::StateFormat(format!(
            "format version {version} is not supported (expected {STATE_FORMAT_VERSION})"
        )));
    }
    let payload_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + payload_len + 4;
    if bytes.len() != expected {
        return Err(Error::StateFormat(format!(
            "truncated or padded: {} bytes, header declares {expected} (format version {version})",
            bytes.len()
        )));
    }
    let body = &bytes[..HEADER_LEN + payload_len];
    let stored = u32::from_le_bytes(bytes[HEADER_LEN + payload_len..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::StateFormat(format!("checksum mismatch (format version {version})")));
    }

    let mut r = Reader::new(&bytes[HEADER_LEN..HEADER_LEN + payload_len]);
    let k = r.u32()? as usize;
    if k == 0 {
        return Err(Error::StateFormat("zero domains".into()));
    }
    let alpha = r.f64()?;
    let warmup_steps = r.u64()?;
    let warmup_reward_updates = r.bool()?;
    let initial_weights = if r.bool()? {
        Some((0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let rng_seed = r.u64()?;
    let config = PolicyConfig {
        num_domains: k,
        alpha,
        warmup_steps,
        warmup_reward_updates,
        initial_weights,
        rng_seed,
    };
    config.validate().map_err(|e| Error::StateFormat(e.to_string()))?;
    let turn = r.u64()?;
    let eps_current = r.f64()?;
    let eps_prev = r.f64()?;
    let in_warmup = r.bool()?;
    let reward_estimates = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let seed: [u8; 32] = r.bytes(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    r.finish()?;

    let state = PolicyState {
        turn,
        eps_current,
        eps_prev,
        reward_estimates,
        in_warmup,
        config,
    };
    check_state(&state)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(Policy::from_parts(state, rng))
}

fn check_state(s: &PolicyState) -> Result<()> {
    let k = s.config.num_domains;
    if s.turn == 0 {
        return Err(Error::StateFormat("turn 0 is not a valid turn".into()));
    }
    if s.eps_current != exploration_rate(k, s.turn)? {
        return Err(Error::StateFormat(format!("eps_current does not match turn {}", s.turn)));
    }
    let expected_prev = if s.turn == 1 { 1.0 / k as f64 } else { exploration_rate(k, s.turn - 1)? };
    if s.eps_prev != expected_prev {
        return Err(Error::StateFormat(format!("eps_prev does not match turn {}", s.turn)));
    }
    if s.in_warmup != (s.turn <= s.config.warmup_steps) {
        return Err(Error::StateFormat("warmup flag inconsistent with turn".into()));
    }
    if let Some(bad) = s.reward_estimates.iter().find(|x| !x.is_finite()) {
        return Err(Error::StateFormat(format!("non-finite reward estimate {bad}")));
    }
    Ok(())
}

/// Debug export of a [`Policy`]. Integers are exact and reals serialize with
/// shortest round-trip formatting, so the export is lossless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStateJson {
    pub format_version: u16,
    pub turn: u64,
    pub eps_current: f64,
    pub eps_prev: f64,
    pub in_warmup: bool,
    pub reward_estimates: Vec<f64>,
    pub config: PolicyConfig,
    pub rng: RngPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngPosition {
    pub algorithm: String,
    pub seed_hex: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl PolicyStateJson {
    pub fn from_policy(policy: &Policy) -> Self {
        let s = policy.state();
        let rng = policy.rng();
        Self {
            format_version: STATE_FORMAT_VERSION,
            turn: s.turn,
            eps_current: s.eps_current,
            eps_prev: s.eps_prev,
            in_warmup: s.in_warmup,
            reward_estimates: s.reward_estimates.clone(),
            config: s.config.clone(),
            rng: RngPosition {
                algorithm: "chacha8".into(),
                seed_hex: hex::encode(rng.get_seed()),
                stream: rng.get_stream(),
                word_pos: rng.get_word_pos(),
            },
        }
    }

    pub fn into_policy(self) -> Result<Policy> {
        if self.format_version != STATE_FORMAT_VERSION {
            return Err(Error::StateFormat(format!("format version {} is not supported", self.format_version)));
        }
        if self.rng.algorithm != "chacha8" {
            return Err(Error::StateFormat(format!("unknown rng algorithm {}", self.rng.algorithm)));
        }
        let seed: [u8; 32] = hex::decode(&self.rng.seed_hex)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| Error::StateFormat("rng seed must be 32 hex-encoded bytes".into()))?;
        self.config.validate().map_err(|e| Error::StateFormat(e.to_string()))?;
        if self.reward_estimates.len() != self.config.num_domains {
            return Err(Error::StateFormat("reward vector length does not match K".into()));
        }
        let state = PolicyState {
            turn: self.turn,
            eps_current: self.eps_current,
            eps_prev: self.eps_prev,
            reward_estimates: self.reward_estimates,
            in_warmup: self.in_warmup,
            config: self.config,
        };
        check_state(&state)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.rng.stream);
        rng.set_word_pos(self.rng.word_pos);
        Ok(Policy::from_parts(state, rng))
    }
}
