//! Replicated-training backdoor detection for outsourced model training.
//!
//! A client that outsources training to several providers can replicate
//! selected sub-runs of the job across the fleet, compute pairwise model
//! distances over the returned weights, take the minimum-variance cluster of
//! sorted distances as the empirical benign-benign distribution, and test
//! each server's distances against that cluster with a two-sample
//! Kolmogorov-Smirnov test (or a MAD anomaly rule when the fleet is small).
//! Servers whose updates fall outside the cluster are flagged as malicious.
//!
//! The crate simulates the whole protocol at desk scale: deterministic
//! SGD training of a small classifier, configurable trigger-poisoning and
//! adaptive adversaries, four model-distance metrics, the detection rules,
//! and a scenario harness with ablation sweeps. Start with the `examples/`
//! directory: each file exercises one capability end to end.

pub mod attack;
pub mod cli;
pub mod data;
pub mod detect;
pub mod distance;
pub mod error;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod stats;

pub use attack::{AdaptiveZestConfig, AttackMetrics, BackdoorConfig, TriggerKind, TriggerSpec};
pub use data::{LabeledDataset, SegmentMap};
pub use detect::{
    cost_overhead, detect_all, detection_probability, find_benign_cluster, pairwise_distances,
    DetectionConfig, DetectionReport, DistanceMatrix, ServerVerdict,
};
pub use distance::{MetricKind, ProbeContext, ProbeSettings, ZestSignature};
pub use error::{Error, Result};
pub use harness::{
    run_primary_training, run_scenario, sweep, Scenario, ScenarioConfig, ScenarioReport,
    ServerBehavior, ServerKind, SweepAxis, SweepValue,
};
pub use nn::{Checkpoint, ModelArch, ModelWeights, SubRunSpec};
pub use rng::{RngKey, Stream};
pub use stats::{anomaly_index, ks_two_sample, mad, median, min_variance_window, KsResult, WindowSelection};
