//! Online data mixing for language-model pretraining.
//!
//! Each pretraining domain is an arm of an Exp3-style bandit. Every turn the
//! [`policy`] turns moving-average, importance-weighted training losses into
//! a sampling distribution over domains; the [`simulator`] drives it against
//! synthetic loss curves so its behaviour can be checked without a model,
//! and [`metrics`] reduces the resulting traces to plot-ready numbers.

pub mod corpus;
pub mod error;
pub mod ffi;
pub mod metrics;
pub mod policy;
pub mod simulator;
mod wire;

pub use corpus::{BatchSource, DomainGroup, GroupedCorpus, PackedBatch, SyntheticCorpus, TokenTally};
pub use error::{Error, Result};
pub use metrics::{
    bucket_domains, cumulative_sampling_distribution, export_report, import_report, unweighted_average, Bucket,
    BucketCounts, EvalReport, Report, ReportFormat, SamplingSummary,
};
pub use policy::{
    exploration_rate, mixing_distribution, sample_domain, warmup_distribution, MixingDistribution, Policy,
    PolicyConfig, PolicySpec, PolicyState, RewardUpdate, Session,
};
pub use simulator::{
    final_smoothed_loss, iterations_to_target, run_baseline_suite, run_simulation, DomainCurve, LossModel, Simulation, SimulationConfig,
    Strategy, Trace, TurnRecord,
};
