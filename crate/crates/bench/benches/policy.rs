use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use odm_core::policy::{mixing_distribution, Policy, PolicyConfig, PolicyState, RewardUpdate, Session};
use odm_core::simulator::{run_simulation, DomainCurve, LossModel, SimulationConfig};

const K: usize = 22;

fn warm_state() -> PolicyState {
    let mut s = PolicyState::new(PolicyConfig::new(K).with_warmup(0)).unwrap();
    while s.turn < 5000 {
        s.advance_turn();
    }
    s.reward_estimates = (0..K).map(|i| 20.0 + 3.5 * i as f64).collect();
    s
}

fn distribution(c: &mut Criterion) {
    let s = warm_state();
    c.bench_function("mixing_distribution_k22", |b| b.iter(|| mixing_distribution(black_box(&s)).unwrap()));
}

fn sampling(c: &mut Criterion) {
    let mut p = Policy::new(PolicyConfig::new(K).with_warmup(0)).unwrap();
    let d = mixing_distribution(&warm_state()).unwrap();
    c.bench_function("sample_domain_k22", |b| b.iter(|| p.sample(black_box(&d))));
}

fn full_turn(c: &mut Criterion) {
    c.bench_function("session_100_turns_k22_g8", |b| {
        b.iter_batched(
            || Session::new(PolicyConfig::new(K).with_warmup(0)).unwrap(),
            |mut s| {
                for _ in 0..100 {
                    let mut sums = [0.0; K];
                    for _ in 0..8 {
                        sums[s.sample()] += 2.5;
                    }
                    let losses: Vec<(usize, f64)> =
                        sums.iter().enumerate().filter(|(_, l)| **l > 0.0).map(|(i, l)| (i, *l)).collect();
                    s.step(&losses).unwrap();
                }
                s
            },
            BatchSize::SmallInput,
        )
    });
}

fn reward_update(c: &mut Criterion) {
    let mut s = warm_state();
    let ups: Vec<RewardUpdate> =
        (0..8).map(|i| RewardUpdate { domain_id: i * 2, summed_loss: 2.0, sample_prob: 0.04 }).collect();
    c.bench_function("update_rewards_8", |b| b.iter(|| s.update_rewards(black_box(&ups)).unwrap()));
}

fn simulation(c: &mut Criterion) {
    let model = LossModel::new(
        (0..K)
            .map(|i| DomainCurve { name: format!("d{i}"), floor: 1.0 + 0.05 * i as f64, amplitude: 5.0, decay: 0.12 })
            .collect(),
    );
    let mut cfg = SimulationConfig::new("bench", model, 1000);
    cfg.loss_model.noise_sigma = 0.05;
    let mut g = c.benchmark_group("simulation");
    g.sample_size(20);
    g.bench_function("1000_turns_k22", |b| b.iter(|| run_simulation(black_box(&cfg)).unwrap()));
    g.finish();
}

criterion_group!(benches, distribution, sampling, reward_update, full_turn, simulation);
criterion_main!(benches);
