//! End-to-end online data mixing against a synthetic loss model.
//!
//! One turn: compute the distribution, draw `G` micro-batches (one domain
//! each), sum the per-domain losses, update reward estimates (ODM only) and
//! advance the policy. Losses within a turn are evaluated at the token
//! counts in force when the turn began, since the model does not change
//! during gradient accumulation.

mod config;
mod loss;
pub mod trace;

pub use config::{
    default_eval_every, CorpusSource, SimulationConfig, SimulationFile, Strategy, DEFAULT_ACCUMULATION_STEPS,
    DEFAULT_BATCH_SIZE, DEFAULT_SEQ_LEN,
};
pub use loss::{DomainCurve, FloorChange, LossModel};

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{BatchSource, GroupedCorpus, TokenTally};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::policy::{MixingDistribution, Policy, RewardUpdate};
use crate::wire::{Reader, Writer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: u64,
    /// Domain drawn at each accumulation step.
    pub sampled: Vec<usize>,
    pub summed_losses: Vec<f64>,
    pub distribution: Vec<f64>,
    pub eps_current: f64,
    pub in_warmup: bool,
    /// Seconds in policy code; zero unless timing is recorded.
    pub wall_time_policy: f64,
    pub wall_time_total: f64,
}

impl TurnRecord {
    pub fn argmax(&self) -> usize {
        MixingDistribution { probs: self.distribution.clone(), turn: self.turn }.argmax()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub name: String,
    pub strategy: String,
    pub domain_names: Vec<String>,
    pub accumulation_steps: usize,
    /// Distribution the run starts from: the warmup weights for ODM, the
    /// fixed weights otherwise.
    pub initial_weights: Vec<f64>,
    pub records: Vec<TurnRecord>,
    pub evaluations: Vec<EvalReport>,
    pub tokens_served: Vec<u64>,
}

impl Trace {
    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn sample_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_domains()];
        for r in &self.records {
            for d in &r.sampled {
                counts[*d] += 1;
            }
        }
        counts
    }

    pub fn final_evaluation(&self) -> Option<&EvalReport> {
        self.evaluations.last()
    }

    /// Fraction of wall time spent in policy code.
    pub fn policy_overhead(&self) -> f64 {
        let policy: f64 = self.records.iter().map(|r| r.wall_time_policy).sum();
        let total: f64 = self.records.iter().map(|r| r.wall_time_total).sum();
        policy / total
    }
}

/// Spin for `duration` doing throwaway arithmetic: the stand-in cost of a
/// real forward/backward pass when measuring policy overhead.
pub fn simulated_training_step(duration: Duration) {
    if duration.is_zero() {
        return;
    }
    let start = Instant::now();
    let mut acc = 0x2545_F491_4F6C_DD1Du64;
    loop {
        for _ in 0..256 {
            acc ^= acc << 13;
            acc ^= acc >> 7;
            acc ^= acc << 17;
        }
        black_box(acc);
        if start.elapsed() >= duration {
            break;
        }
    }
}

struct Stopwatch {
    enabled: bool,
    total: Duration,
}

impl Stopwatch {
    fn time<T>(&mut self, f: impl FnOnce() -> T) -> T {
        if !self.enabled {
            return f();
        }
        let start = Instant::now();
        let out = f();
        self.total += start.elapsed();
        out
    }
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"ODMS";
const CHECKPOINT_VERSION: u16 = 1;

/// A running simulation. Owns the policy, the batch source and the
/// counters that make the run replayable.
pub struct Simulation {
    config: SimulationConfig,
    policy: Policy,
    source: Box<dyn BatchSource>,
    domain_names: Vec<String>,
    batch_rng: ChaCha8Rng,
    loss_calls: u64,
    evaluations: Vec<EvalReport>,
    updates: Vec<RewardUpdate>,
}

impl Simulation {
    pub fn new(config: SimulationConfig) -> Result<Self> {
        config.validate()?;
        let k = config.num_domains();
        let (source, domain_names): (Box<dyn BatchSource>, Vec<String>) = match &config.corpus {
            CorpusSource::Tally => (Box::new(TokenTally::new(k)), config.loss_model.names()),
            CorpusSource::Manifest(path) => {
                let c = GroupedCorpus::load(path)?;
                let names = c.names();
                (Box::new(c), names)
            }
            CorpusSource::Synthetic(spec) => {
                let c = spec.build()?;
                let names = c.names();
                (Box::new(c), names)
            }
        };
        if source.num_domains() != k {
            return Err(Error::config(format!(
                "corpus has {} domains but the loss model has {k}",
                source.num_domains()
            )));
        }
        let policy = Policy::new(config.policy.clone())?;
        let batch_rng = ChaCha8Rng::seed_from_u64(config.batch_seed());
        Ok(Self {
            config,
            policy,
            source,
            domain_names,
            batch_rng,
            loss_calls: 0,
            evaluations: Vec::new(),
            updates: Vec::with_capacity(k),
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    /// Turn the next call to [`step`](Self::step) will execute.
    pub fn next_turn(&self) -> u64 {
        self.policy.turn()
    }

    pub fn is_finished(&self) -> bool {
        self.next_turn() > self.config.total_turns
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn tokens_served(&self) -> Vec<u64> {
        self.source.tokens_served()
    }

    pub fn evaluations(&self) -> &[EvalReport] {
        &self.evaluations
    }

    fn initial_weights(&self) -> Vec<f64> {
        let k = self.config.num_domains();
        match &self.config.strategy {
            Strategy::Odm => self.config.policy.warmup_weights(),
            Strategy::Static(w) => w.clone(),
            Strategy::Uniform => vec![1.0 / k as f64; k],
        }
    }

    pub fn step(&mut self) -> Result<TurnRecord> {
        if self.is_finished() {
            return Err(Error::Contract("simulation already ran all turns".into()));
        }
        let cfg = &self.config;
        let k = cfg.num_domains();
        let turn = self.policy.turn();
        let in_warmup = self.policy.state().in_warmup;
        let turn_start = cfg.record_timing.then(Instant::now);
        let mut watch = Stopwatch { enabled: cfg.record_timing, total: Duration::ZERO };

        // The policy's draws use their own stream, so all G can be taken
        // before any batch is served; this keeps the timed region in one piece.
        let policy = &mut self.policy;
        let (dist, sampled) = watch.time(|| -> Result<(MixingDistribution, Vec<usize>)> {
            let dist = match &cfg.strategy {
                Strategy::Odm => policy.distribution()?,
                Strategy::Static(w) => MixingDistribution { probs: w.clone(), turn },
                Strategy::Uniform => MixingDistribution::uniform(k, turn),
            };
            let sampled = (0..cfg.accumulation_steps).map(|_| policy.sample(&dist)).collect();
            Ok((dist, sampled))
        })?;

        let served = self.source.tokens_served();
        let mut summed = vec![0.0; k];
        for &d in &sampled {
            self.source.draw(d, cfg.batch_size, cfg.seq_len, &mut self.batch_rng)?;
            let eff = cfg.loss_model.effective_tokens(d, &served);
            let loss = cfg.loss_model.synthetic_loss(d, eff, turn, self.loss_calls)?;
            self.loss_calls += 1;
            if !loss.is_finite() {
                return Err(Error::NonFinite { what: "synthetic loss", value: loss });
            }
            summed[d] += loss;
        }

        simulated_training_step(cfg.busy_work);

        let eps_current = self.policy.state().eps_current;
        let odm = matches!(cfg.strategy, Strategy::Odm);
        let policy = &mut self.policy;
        let updates = &mut self.updates;
        watch.time(|| -> Result<()> {
            if odm {
                updates.clear();
                for (i, l) in summed.iter().enumerate().filter(|(_, l)| **l != 0.0) {
                    updates.push(RewardUpdate { domain_id: i, summed_loss: *l, sample_prob: dist.probs[i] });
                }
                policy.update_rewards(updates)?;
            }
            policy.advance_turn();
            Ok(())
        })?;

        if turn.is_multiple_of(cfg.eval_every) || turn == cfg.total_turns {
            self.evaluations.push(self.evaluate(turn)?);
        }

        let wall_time_total = turn_start.map_or(0.0, |s| s.elapsed().as_secs_f64());
        Ok(TurnRecord {
            turn,
            sampled,
            summed_losses: summed,
            distribution: dist.probs,
            eps_current,
            in_warmup,
            wall_time_policy: watch.total.as_secs_f64(),
            wall_time_total,
        })
    }

    /// Held-out losses: the noise-free curve at the current token counts.
    pub fn evaluate(&self, turn: u64) -> Result<EvalReport> {
        let served = self.source.tokens_served();
        let model = &self.config.loss_model;
        let losses = (0..model.num_domains())
            .map(|i| model.clean_loss(i, model.effective_tokens(i, &served), turn))
            .collect::<Result<Vec<_>>>()?;
        EvalReport::from_losses(turn, losses)
    }

    /// Run the remaining turns and return them as a trace.
    pub fn run(mut self) -> Result<Trace> {
        let mut records = Vec::with_capacity((self.config.total_turns + 1 - self.next_turn()) as usize);
        while !self.is_finished() {
            records.push(self.step()?);
        }
        Ok(self.into_trace(records))
    }

    pub fn into_trace(self, records: Vec<TurnRecord>) -> Trace {
        Trace {
            name: self.config.name.clone(),
            strategy: self.config.strategy.label().to_string(),
            initial_weights: self.initial_weights(),
            domain_names: self.domain_names,
            accumulation_steps: self.config.accumulation_steps,
            records,
            evaluations: self.evaluations,
            tokens_served: self.source.tokens_served(),
        }
    }

    /// Snapshot between turns. Evaluations already taken are not included.
    pub fn checkpoint(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.bytes(self.config.digest().as_bytes());
        w.u64(self.loss_calls);
        w.bytes(&self.batch_rng.get_seed());
        w.u64(self.batch_rng.get_stream());
        w.u128(self.batch_rng.get_word_pos());
        let served = self.source.tokens_served();
        w.u32(served.len() as u32);
        served.iter().for_each(|n| w.u64(*n));
        let blob = self.policy.save();
        w.u32(blob.len() as u32);
        w.bytes(&blob);
        let mut out = w.into_inner();
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Rebuild a simulation from `config` and a checkpoint taken under it.
    pub fn resume(config: SimulationConfig, checkpoint: &[u8]) -> Result<Self> {
        if checkpoint.len() < 4 {
            return Err(Error::StateFormat("truncated checkpoint".into()));
        }
        let (body, crc) = checkpoint.split_at(checkpoint.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(Error::StateFormat("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader::new(body);
        if r.bytes(4)? != CHECKPOINT_MAGIC {
            return Err(Error::StateFormat("not a simulation checkpoint".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::StateFormat(format!("checkpoint version {version} is not supported")));
        }
        if r.bytes(64)? != config.digest().as_bytes() {
            return Err(Error::StateFormat("checkpoint was taken under a different config".into()));
        }
        let mut sim = Self::new(config)?;
        sim.loss_calls = r.u64()?;
        let seed: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(r.u128()?);
        sim.batch_rng = rng;
        let k = r.u32()? as usize;
        let served = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        sim.source.restore_tokens(&served)?;
        let len = r.u32()? as usize;
        sim.policy = Policy::load(r.bytes(len)?)?;
        r.finish()?;
        if sim.policy.config() != &sim.config.policy {
            return Err(Error::StateFormat("checkpointed policy config differs from the run config".into()));
        }
        Ok(sim)
    }
}

pub fn run_simulation(config: &SimulationConfig) -> Result<Trace> {
    Simulation::new(config.clone())?.run()
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))
}

/// Configs that may be compared turn by turn: same loss model and shapes.
pub fn check_compatible(configs: &[SimulationConfig]) -> Result<()> {
    let Some(first) = configs.first() else {
        return Err(Error::config("no configs to run"));
    };
    for c in &configs[1..] {
        let same = c.loss_model == first.loss_model
            && c.total_turns == first.total_turns
            && c.accumulation_steps == first.accumulation_steps
            && c.batch_size == first.batch_size
            && c.seq_len == first.seq_len
            && c.eval_every == first.eval_every;
        if !same {
            return Err(Error::config(format!(
                "config '{}' differs from '{}' in loss model or shapes",
                c.name, first.name
            )));
        }
    }
    Ok(())
}

/// Run several strategies over one loss model. Traces come back in input
/// order whatever the worker scheduling.
pub fn run_baseline_suite(configs: &[SimulationConfig], workers: usize) -> Result<Vec<Trace>> {
    check_compatible(configs)?;
    for c in configs {
        c.validate()?;
    }
    pool(workers)?.install(|| configs.par_iter().map(run_simulation).collect())
}

/// One run per seed, each seeding policy, batches and noise from its own
/// seed.
pub fn run_seed_sweep(config: &SimulationConfig, seeds: &[u64], workers: usize) -> Result<Vec<Trace>> {
    let configs: Vec<_> = seeds
        .iter()
        .map(|s| {
            let mut c = config.clone();
            c.seed = *s;
            c.policy.rng_seed = *s;
            c.loss_model.seed = config::sub_seed(*s, 2);
            c
        })
        .collect();
    pool(workers)?.install(|| configs.par_iter().map(run_simulation).collect())
}

/// Causal 3-point median of the unweighted average evaluation loss.
pub fn smoothed_eval_losses(trace: &Trace) -> Vec<(u64, f64)> {
    let raw: Vec<f64> = trace.evaluations.iter().map(|e| e.avg_loss).collect();
    raw.iter()
        .enumerate()
        .map(|(i, _)| {
            let mut w: Vec<f64> = raw[i.saturating_sub(2)..=i].to_vec();
            w.sort_by(f64::total_cmp);
            let m = match w.len() {
                1 => w[0],
                2 => 0.5 * (w[0] + w[1]),
                _ => w[1],
            };
            (trace.evaluations[i].turn, m)
        })
        .collect()
}

/// Last point of the smoothed curve: the target a baseline sets for the
/// others, and one the baseline itself reaches exactly at its final turn.
pub fn final_smoothed_loss(trace: &Trace) -> Option<f64> {
    smoothed_eval_losses(trace).last().map(|(_, l)| *l)
}

/// First evaluated turn whose smoothed average loss reaches `target`.
pub fn iterations_to_target(trace: &Trace, target_avg_loss: f64) -> Option<u64> {
    smoothed_eval_losses(trace)
        .into_iter()
        .find(|(_, l)| *l <= target_avg_loss)
        .map(|(t, _)| t)
}
