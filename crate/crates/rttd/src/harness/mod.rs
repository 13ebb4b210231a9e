//! Scenario orchestration: build datasets, spawn simulated servers with
//! declared behaviors, run the primary training decomposed into sub-runs,
//! replicate chosen sub-runs across the fleet, invoke detection, and run
//! ablation sweeps.

pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    adaptive_param_attack, adaptive_zest_attack, attack_success_rate, malicious_subrun,
    AdaptiveZestConfig, AttackMetrics, BackdoorConfig,
};
use crate::data::{make_blobs, make_tiny_images, split, LabeledDataset, SegmentMap};
use crate::detect::{detect_all, pairwise_distances, DetectionConfig, DetectionReport, FallbackRule, WindowPolicy};
use crate::distance::{MetricKind, ProbeContext, ProbeSettings};
use crate::error::{Error, Result};
use crate::nn::{init_weights, train_subrun, Checkpoint, ModelArch, ModelWeights, SubRunSpec};
use crate::rng::{mix_seeds, seeded_rng, RngKey, Stream};

const DATASET_SEED_TAG: u64 = 0x6461_7461;
const SPLIT_SEED_TAG: u64 = 0x7370_6c69;
const PROBE_SEED_TAG: u64 = 0x7072_6f62;
const SELECT_SEED_TAG: u64 = 0x7365_6c65;

/// Encodes a (server, replica) pair into the key's server field; replicas of
/// one server share the id digits above one million.
pub const REPLICA_KEY_STRIDE: u64 = 1_000_000;

/// What a simulated server does with the sub-runs it receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerKind {
    Benign,
    Backdoor {
        attack: BackdoorConfig,
    },
    AdaptiveParam {
        attack: BackdoorConfig,
        lr_scale: f64,
    },
    AdaptiveZest {
        attack: BackdoorConfig,
        zest: AdaptiveZestConfig,
    },
}

impl ServerKind {
    pub fn is_malicious(&self) -> bool {
        !matches!(self, ServerKind::Benign)
    }

    pub fn attack(&self) -> Option<&BackdoorConfig> {
        match self {
            ServerKind::Benign => None,
            ServerKind::Backdoor { attack }
            | ServerKind::AdaptiveParam { attack, .. }
            | ServerKind::AdaptiveZest { attack, .. } => Some(attack),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerBehavior {
    pub server_id: u64,
    pub behavior: ServerKind,
}

/// Which synthetic dataset family a scenario trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs {
        num_classes: usize,
        dim: usize,
        points_per_class: usize,
        spread: f64,
        /// Contiguous segmentation used by the signature metric.
        segments: usize,
    },
    TinyImages {
        num_classes: usize,
        side: usize,
        points_per_class: usize,
    },
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Blobs { dim, .. } => *dim,
            DatasetSpec::TinyImages { side, .. } => side * side,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Blobs { num_classes, .. } | DatasetSpec::TinyImages { num_classes, .. } => *num_classes,
        }
    }

    fn build(&self, seed: u64) -> Result<(LabeledDataset, SegmentMap)> {
        match self {
            DatasetSpec::Blobs {
                num_classes,
                dim,
                points_per_class,
                spread,
                segments,
            } => {
                let data = make_blobs(seed, *num_classes, *dim, *points_per_class, *spread)?;
                let map = SegmentMap::contiguous(*dim, *segments)?;
                Ok((data, map))
            }
            DatasetSpec::TinyImages {
                num_classes,
                side,
                points_per_class,
            } => make_tiny_images(seed, *num_classes, *side, *points_per_class),
        }
    }
}

/// Detection knobs carried by the scenario; the benign fraction `r` lives on
/// the scenario itself and is injected when building the full config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionSettings {
    pub significance: f64,
    pub fallback: FallbackRule,
    pub mad_quartile: f64,
}

impl Default for DetectionSettings {
    fn default() -> Self {
        DetectionSettings {
            significance: 0.01,
            fallback: FallbackRule::Ks,
            mad_quartile: 0.75,
        }
    }
}

impl DetectionSettings {
    pub fn to_config(self, benign_fraction_r: f64) -> DetectionConfig {
        DetectionConfig {
            benign_fraction_r,
            significance: self.significance,
            window_policy: WindowPolicy::ContiguousSorted,
            fallback: self.fallback,
            mad_quartile: self.mad_quartile,
        }
    }
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario_seed: u64,
    pub dataset: DatasetSpec,
    pub arch: ModelArch,
    /// Total training steps (T); must be a multiple of `subrun_steps`.
    pub total_steps: u64,
    /// Sub-run length in gradient updates (k).
    pub subrun_steps: u64,
    /// Start step (t) of the anchor sub-run that is always replicated.
    pub subrun_start: u64,
    /// Number of replicated sub-runs (m); the anchor plus a seeded uniform
    /// choice of the rest.
    pub replicated_subruns: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub augment_noise_std: f64,
    /// Train share of the generated dataset.
    pub train_fraction: f64,
    pub servers: Vec<ServerBehavior>,
    /// Lower bound on the benign fraction (r), over effective servers.
    pub benign_fraction_r: f64,
    pub metric: MetricKind,
    pub probe: ProbeSettings,
    pub detection: DetectionSettings,
    /// Identical jobs submitted per server to inflate the fleet.
    pub virtualize_replicas: u64,
    /// When set, malicious servers return identical weights for all their
    /// replicas (the non-collusion assumption is dropped).
    pub collude: bool,
}

impl ScenarioConfig {
    pub fn subrun_count(&self) -> u64 {
        self.total_steps / self.subrun_steps
    }

    pub fn anchor_index(&self) -> u64 {
        self.subrun_start / self.subrun_steps
    }

    /// Effective server count after virtualization.
    pub fn n_effective(&self) -> usize {
        self.servers.len() * self.virtualize_replicas as usize
    }

    pub fn detection_config(&self) -> DetectionConfig {
        self.detection.to_config(self.benign_fraction_r)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.arch.input_dim != self.dataset.dim() {
            return Err(Error::config(format!(
                "arch input dim {} does not match dataset dim {}",
                self.arch.input_dim,
                self.dataset.dim()
            )));
        }
        if self.arch.num_classes != self.dataset.num_classes() {
            return Err(Error::config("arch classes do not match dataset classes"));
        }
        if self.total_steps == 0 || self.subrun_steps == 0 {
            return Err(Error::config("T and k must be positive"));
        }
        if self.total_steps % self.subrun_steps != 0 {
            return Err(Error::config(format!(
                "T = {} must be a multiple of k = {}",
                self.total_steps, self.subrun_steps
            )));
        }
        if self.subrun_start % self.subrun_steps != 0 {
            return Err(Error::config("t must be a multiple of k"));
        }
        if self.subrun_start + self.subrun_steps > self.total_steps {
            return Err(Error::config("t + k must not exceed T"));
        }
        if self.replicated_subruns == 0 || self.replicated_subruns > self.subrun_count() {
            return Err(Error::config("m must lie in [1, T/k]"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train fraction must lie in (0,1)"));
        }
        if !(self.augment_noise_std >= 0.0) {
            return Err(Error::config("augment noise std must be nonnegative"));
        }
        if self.virtualize_replicas == 0 {
            return Err(Error::config("virtualize_replicas must be >= 1"));
        }
        if self.servers.is_empty() {
            return Err(Error::config("at least one server required"));
        }
        if self.servers[0].server_id != 1 {
            return Err(Error::config("the primary server must be declared first with id 1"));
        }
        let mut ids: Vec<u64> = self.servers.iter().map(|s| s.server_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.servers.len() {
            return Err(Error::config("server ids must be unique"));
        }
        if self.servers.iter().any(|s| s.server_id == 0) {
            return Err(Error::config("server ids start at 1"));
        }

        let n_eff = self.n_effective();
        if !(self.benign_fraction_r > 0.0 && self.benign_fraction_r <= 1.0) {
            return Err(Error::config("benign fraction r must lie in (0,1]"));
        }
        let rn = crate::detect::ceil_count(self.benign_fraction_r, n_eff);
        if rn < 2 {
            return Err(Error::config("ceil(r*n) must be at least 2"));
        }
        let benign_eff = self.servers.iter().filter(|s| !s.behavior.is_malicious()).count()
            * self.virtualize_replicas as usize;
        if rn > benign_eff {
            return Err(Error::config(format!(
                "ground truth has {benign_eff} benign (virtual) servers, fewer than ceil(r*n) = {rn}"
            )));
        }

        for s in &self.servers {
            if let Some(attack) = s.behavior.attack() {
                attack
                    .validate(self.dataset.dim(), self.dataset.num_classes())
                    .map_err(|e| e.for_server(s.server_id))?;
            }
            if let ServerKind::AdaptiveParam { lr_scale, .. } = &s.behavior {
                if !(*lr_scale > 0.0 && *lr_scale <= 1.0) {
                    return Err(Error::config("lr_scale must lie in (0,1]").for_server(s.server_id));
                }
            }
            if let ServerKind::AdaptiveZest { zest, .. } = &s.behavior {
                zest.validate().map_err(|e| e.for_server(s.server_id))?;
            }
        }

        if !self.collude {
            let triggers: Vec<&crate::attack::TriggerSpec> = self
                .servers
                .iter()
                .filter_map(|s| s.behavior.attack().map(|a| &a.trigger))
                .collect();
            for a in 0..triggers.len() {
                for b in (a + 1)..triggers.len() {
                    if triggers[a] == triggers[b] {
                        return Err(Error::config(
                            "malicious servers must use distinct triggers unless collusion mode is enabled",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One virtual server of the replicated fleet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualServerId {
    pub server_id: u64,
    pub replica: u64,
    pub malicious: bool,
}

impl VirtualServerId {
    pub fn key_field(&self) -> u64 {
        self.server_id * REPLICA_KEY_STRIDE + self.replica
    }

    pub fn label(&self) -> String {
        if self.replica == 0 {
            format!("{}", self.server_id)
        } else {
            format!("{}.{}", self.server_id, self.replica)
        }
    }
}

/// Models returned by one replicated sub-run, row-aligned with the fleet.
#[derive(Debug, Clone)]
pub struct ReplicatedSubrun {
    pub subrun_index: u64,
    pub models: Vec<ModelWeights>,
    pub servers: Vec<VirtualServerId>,
}

impl ReplicatedSubrun {
    pub fn ground_truth(&self) -> Vec<bool> {
        self.servers.iter().map(|s| !s.malicious).collect()
    }
}

/// Distance-group label of a model pair under ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairGroup {
    BenignBenign,
    BenignMalicious,
    MaliciousMalicious,
}

impl PairGroup {
    pub fn name(self) -> &'static str {
        match self {
            PairGroup::BenignBenign => "benign-benign",
            PairGroup::BenignMalicious => "benign-malicious",
            PairGroup::MaliciousMalicious => "malicious-malicious",
        }
    }

    fn of(a_benign: bool, b_benign: bool) -> Self {
        match (a_benign, b_benign) {
            (true, true) => PairGroup::BenignBenign,
            (false, false) => PairGroup::MaliciousMalicious,
            _ => PairGroup::BenignMalicious,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub metric: String,
    pub group: PairGroup,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

/// Everything recorded about one replicated sub-run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubRunOutcome {
    pub subrun_index: u64,
    pub start_step: u64,
    pub probe_seed: u64,
    pub servers: Vec<VirtualServerId>,
    pub detection: DetectionReport,
    /// Per-row attack metrics; None for benign servers.
    pub attack_metrics: Vec<Option<AttackMetrics>>,
    pub histogram: Vec<HistogramRow>,
}

/// Full scenario output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario_seed: u64,
    pub metric: MetricKind,
    pub n_effective: usize,
    pub subruns: Vec<SubRunOutcome>,
    /// Fraction of correct verdicts over all replicated sub-runs.
    pub aggregate_accuracy: f64,
}

impl ScenarioReport {
    pub fn any_malicious_verdict(&self) -> bool {
        self.subruns
            .iter()
            .flat_map(|s| &s.detection.verdicts)
            .any(|v| !v.is_benign)
    }
}

/// Caps worker parallelism from the `RTTD_THREADS` environment variable
/// (0 or unset means automatic). First call wins.
pub fn init_thread_pool() {
    if let Ok(v) = std::env::var("RTTD_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// A validated scenario with its datasets materialized.
pub struct Scenario {
    cfg: ScenarioConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    segments: SegmentMap,
}

impl Scenario {
    pub fn prepare(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let (full, segments) = cfg
            .dataset
            .build(mix_seeds(cfg.scenario_seed, DATASET_SEED_TAG))
            .map_err(|e| e.at_stage("dataset"))?;
        let (train, test) = split(&full, cfg.train_fraction, mix_seeds(cfg.scenario_seed, SPLIT_SEED_TAG))
            .map_err(|e| e.at_stage("dataset split"))?;
        if cfg.batch_size > train.len() {
            return Err(Error::config(format!(
                "batch size {} exceeds train split size {}",
                cfg.batch_size,
                train.len()
            )));
        }
        Ok(Scenario {
            cfg,
            train,
            test,
            segments,
        })
    }

    pub fn cfg(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn train(&self) -> &LabeledDataset {
        &self.train
    }

    pub fn test(&self) -> &LabeledDataset {
        &self.test
    }

    pub fn segments(&self) -> &SegmentMap {
        &self.segments
    }

    /// The client-chosen initialization all servers start from.
    pub fn initial_weights(&self) -> Result<ModelWeights> {
        init_weights(&self.cfg.arch, &RngKey::new(self.cfg.scenario_seed, 0, 0, Stream::Init))
    }

    pub fn subrun_spec(&self, subrun_index: u64) -> SubRunSpec {
        SubRunSpec {
            steps: self.cfg.subrun_steps,
            learning_rate: self.cfg.learning_rate,
            batch_size: self.cfg.batch_size,
            start_step: subrun_index * self.cfg.subrun_steps,
            augment_noise_std: self.cfg.augment_noise_std,
        }
    }

    pub fn probe_seed(&self, subrun_index: u64) -> u64 {
        mix_seeds(mix_seeds(self.cfg.scenario_seed, PROBE_SEED_TAG), subrun_index)
    }

    /// The shared probe context of one sub-run's replicated comparison.
    pub fn probe_context(&self, subrun_index: u64) -> Result<ProbeContext> {
        ProbeContext::from_dataset(&self.train, &self.segments, &self.cfg.probe, self.probe_seed(subrun_index))
    }

    fn execute(
        &self,
        behavior: &ServerKind,
        w_t: &ModelWeights,
        spec: &SubRunSpec,
        key: &RngKey,
        ctx: &ProbeContext,
    ) -> Result<ModelWeights> {
        match behavior {
            ServerKind::Benign => train_subrun(w_t, &self.train, spec, key),
            ServerKind::Backdoor { attack } => malicious_subrun(w_t, &self.train, spec, attack, key),
            ServerKind::AdaptiveParam { attack, lr_scale } => {
                adaptive_param_attack(w_t, &self.train, spec, attack, *lr_scale, key)
            }
            ServerKind::AdaptiveZest { attack, zest } => {
                adaptive_zest_attack(w_t, &self.train, spec, attack, zest, ctx, key)
            }
        }
    }

    /// The primary server (id 1, declared first) trains all T steps in T/k
    /// sub-runs per its behavior; returns the T/k + 1 boundary checkpoints,
    /// the initialization included.
    pub fn run_primary_training(&self) -> Result<Vec<Checkpoint>> {
        let primary = &self.cfg.servers[0];
        let mut weights = self.initial_weights().map_err(|e| e.at_stage("init"))?;
        let mut checkpoints = Vec::with_capacity(self.cfg.subrun_count() as usize + 1);
        let mut boundary = Checkpoint::new(weights.clone(), 0);
        boundary.metadata.insert("server".into(), primary.server_id.to_string());
        checkpoints.push(boundary);
        for idx in 0..self.cfg.subrun_count() {
            let spec = self.subrun_spec(idx);
            let key = RngKey::new(
                self.cfg.scenario_seed,
                primary.server_id * REPLICA_KEY_STRIDE,
                idx,
                Stream::Shuffle,
            );
            let ctx = self.probe_context(idx).map_err(|e| e.at_stage("probe context"))?;
            weights = self
                .execute(&primary.behavior, &weights, &spec, &key, &ctx)
                .map_err(|e| e.for_server(primary.server_id).at_stage("primary training"))?;
            let mut ck = Checkpoint::new(weights.clone(), (idx + 1) * self.cfg.subrun_steps);
            ck.metadata.insert("server".into(), primary.server_id.to_string());
            checkpoints.push(ck);
        }
        Ok(checkpoints)
    }

    /// Every (server, replica) executes its behavior from `w_t`. Benign
    /// servers differ only by key; in collusion mode a malicious server
    /// reuses its replica-0 key, returning identical weights for all its
    /// replicas.
    pub fn replicate_subrun(&self, w_t: &ModelWeights, subrun_index: u64) -> Result<ReplicatedSubrun> {
        let spec = self.subrun_spec(subrun_index);
        let ctx = self.probe_context(subrun_index).map_err(|e| e.at_stage("probe context"))?;
        let mut jobs = Vec::with_capacity(self.cfg.n_effective());
        for server in &self.cfg.servers {
            for replica in 0..self.cfg.virtualize_replicas {
                let malicious = server.behavior.is_malicious();
                let key_replica = if malicious && self.cfg.collude { 0 } else { replica };
                let key = RngKey::new(
                    self.cfg.scenario_seed,
                    server.server_id * REPLICA_KEY_STRIDE + key_replica,
                    subrun_index,
                    Stream::Shuffle,
                );
                jobs.push((
                    VirtualServerId {
                        server_id: server.server_id,
                        replica,
                        malicious,
                    },
                    &server.behavior,
                    key,
                ));
            }
        }
        let models: Result<Vec<ModelWeights>> = jobs
            .par_iter()
            .map(|(vid, behavior, key)| {
                self.execute(behavior, w_t, &spec, key, &ctx)
                    .map_err(|e| e.for_server(vid.key_field()).at_stage("replicated sub-run"))
            })
            .collect();
        Ok(ReplicatedSubrun {
            subrun_index,
            models: models?,
            servers: jobs.into_iter().map(|(vid, _, _)| vid).collect(),
        })
    }

    /// The sub-run indices undergoing replication: the anchor at `t/k`, plus
    /// a seeded uniform draw of `m - 1` of the remaining indices.
    pub fn replicated_indices(&self) -> Vec<u64> {
        let anchor = self.cfg.anchor_index();
        let m = self.cfg.replicated_subruns;
        let total = self.cfg.subrun_count();
        let mut indices = vec![anchor];
        if m > 1 {
            let mut others: Vec<u64> = (0..total).filter(|&i| i != anchor).collect();
            let mut rng = seeded_rng(mix_seeds(self.cfg.scenario_seed, SELECT_SEED_TAG));
            use rand::seq::SliceRandom;
            others.shuffle(&mut rng);
            indices.extend(others.into_iter().take(m as usize - 1));
        }
        indices.sort_unstable();
        indices
    }

    fn subrun_outcome(&self, replicated: &ReplicatedSubrun) -> Result<SubRunOutcome> {
        let ctx = self.probe_context(replicated.subrun_index)?;
        let matrix = pairwise_distances(&replicated.models, self.cfg.metric, &ctx, self.cfg.probe.ridge_lambda)
            .map_err(|e| e.at_stage("pairwise distances"))?;
        let truth = replicated.ground_truth();
        let detection = detect_all(&matrix, &self.cfg.detection_config(), Some(&truth))
            .map_err(|e| e.at_stage("detection"))?;

        let attack_metrics: Result<Vec<Option<AttackMetrics>>> = replicated
            .servers
            .par_iter()
            .zip(&replicated.models)
            .map(|(vid, model)| {
                let behavior = &self
                    .cfg
                    .servers
                    .iter()
                    .find(|s| s.server_id == vid.server_id)
                    .expect("row maps to a declared server")
                    .behavior;
                match behavior.attack() {
                    None => Ok(None),
                    Some(attack) => attack_success_rate(model, &self.test, &attack.trigger, attack.target_class)
                        .map(Some)
                        .map_err(|e| e.for_server(vid.key_field())),
                }
            })
            .collect();

        let histogram = build_histogram(self.cfg.metric, &matrix, &truth);
        Ok(SubRunOutcome {
            subrun_index: replicated.subrun_index,
            start_step: replicated.subrun_index * self.cfg.subrun_steps,
            probe_seed: self.probe_seed(replicated.subrun_index),
            servers: replicated.servers.clone(),
            detection,
            attack_metrics: attack_metrics?,
            histogram,
        })
    }

    /// Primary training, replication of the chosen sub-runs, detection, and
    /// report assembly.
    pub fn run(&self) -> Result<ScenarioReport> {
        init_thread_pool();
        let checkpoints = self.run_primary_training()?;
        let mut subruns = Vec::new();
        for idx in self.replicated_indices() {
            let w_t = &checkpoints[idx as usize].weights;
            let replicated = self.replicate_subrun(w_t, idx)?;
            subruns.push(self.subrun_outcome(&replicated)?);
        }
        let (hits, total) = subruns
            .iter()
            .flat_map(|s| s.detection.verdicts.iter().zip(s.detection.ground_truth.as_ref().expect("truth known")))
            .fold((0usize, 0usize), |(h, t), (v, &truth)| {
                (h + usize::from(v.is_benign == truth), t + 1)
            });
        Ok(ScenarioReport {
            scenario_seed: self.cfg.scenario_seed,
            metric: self.cfg.metric,
            n_effective: self.cfg.n_effective(),
            subruns,
            aggregate_accuracy: hits as f64 / total.max(1) as f64,
        })
    }
}

const HISTOGRAM_BINS: usize = 20;

fn build_histogram(metric: MetricKind, matrix: &crate::detect::DistanceMatrix, truth: &[bool]) -> Vec<HistogramRow> {
    let n = matrix.n();
    let mut pairs: Vec<(PairGroup, f64)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((PairGroup::of(truth[i], truth[j]), matrix.get(i, j)));
        }
    }
    let lo = pairs.iter().map(|(_, d)| *d).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().map(|(_, d)| *d).fold(f64::NEG_INFINITY, f64::max);
    let groups = [PairGroup::BenignBenign, PairGroup::BenignMalicious, PairGroup::MaliciousMalicious];
    let mut rows = Vec::with_capacity(HISTOGRAM_BINS * groups.len());
    if !(hi > lo) {
        for group in groups {
            rows.push(HistogramRow {
                metric: metric.name().to_string(),
                group,
                bin_lo: lo,
                bin_hi: hi,
                count: pairs.iter().filter(|(g, _)| *g == group).count(),
            });
        }
        return rows;
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    for group in groups {
        for b in 0..HISTOGRAM_BINS {
            let bin_lo = lo + b as f64 * width;
            let bin_hi = if b + 1 == HISTOGRAM_BINS { hi } else { lo + (b + 1) as f64 * width };
            let count = pairs
                .iter()
                .filter(|(g, d)| {
                    *g == group && {
                        let idx = (((d - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                        idx == b
                    }
                })
                .count();
            rows.push(HistogramRow {
                metric: metric.name().to_string(),
                group,
                bin_lo,
                bin_hi,
                count,
            });
        }
    }
    rows
}

/// Builds, runs, and reports a scenario in one call.
pub fn run_scenario(cfg: ScenarioConfig) -> Result<ScenarioReport> {
    Scenario::prepare(cfg)?.run()
}

/// Primary-training checkpoints for a config, without replication.
pub fn run_primary_training(cfg: ScenarioConfig) -> Result<Vec<Checkpoint>> {
    Scenario::prepare(cfg)?.run_primary_training()
}

/// Ablation axis of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Sub-run length k; the anchor start t is realigned down to a multiple.
    SubrunSteps,
    /// Anchor start step t.
    StartStep,
    /// Client learning rate eta.
    LearningRate,
    /// Fleet size n; the declared fleet is resized keeping the benign share.
    ServerCount,
    /// Benign fraction r; the fleet is recomposed to match.
    BenignFraction,
    /// Poison fraction of every malicious server (the attack-strength knob
    /// behind the observed attack success rate).
    AttackStrength,
    /// Distance metric.
    Metric,
    /// Masked samples per reference point of signature-matching adversaries.
    MasksPerPoint,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "k" => SweepAxis::SubrunSteps,
            "t" => SweepAxis::StartStep,
            "eta" => SweepAxis::LearningRate,
            "n" => SweepAxis::ServerCount,
            "r" => SweepAxis::BenignFraction,
            "asr" => SweepAxis::AttackStrength,
            "metric" => SweepAxis::Metric,
            "masks_per_point" => SweepAxis::MasksPerPoint,
            other => return Err(Error::invalid(format!("unknown sweep axis `{other}`"))),
        })
    }
}

/// One sweep point: a number for the numeric axes, a metric for `metric`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Number(f64),
    Metric(MetricKind),
}

impl SweepValue {
    fn number(&self) -> Result<f64> {
        match self {
            SweepValue::Number(v) => Ok(*v),
            SweepValue::Metric(_) => Err(Error::invalid("axis expects a numeric value")),
        }
    }
}

fn resize_fleet(cfg: &mut ScenarioConfig, n: usize, r: f64) -> Result<()> {
    if n < 3 {
        return Err(Error::invalid("sweep fleet needs at least 3 servers"));
    }
    let benign_count = crate::detect::ceil_count(r, n);
    if benign_count >= n {
        return Err(Error::invalid("sweep fleet needs at least one malicious server"));
    }
    let templates: Vec<ServerKind> = cfg
        .servers
        .iter()
        .filter(|s| s.behavior.is_malicious())
        .map(|s| s.behavior.clone())
        .collect();
    if templates.is_empty() {
        return Err(Error::invalid("base scenario declares no malicious behavior to replicate"));
    }
    let mut servers = Vec::with_capacity(n);
    for id in 1..=benign_count as u64 {
        servers.push(ServerBehavior {
            server_id: id,
            behavior: ServerKind::Benign,
        });
    }
    for (slot, id) in (benign_count as u64 + 1..=n as u64).enumerate() {
        let round = slot / templates.len();
        let mut behavior = templates[slot % templates.len()].clone();
        if round > 0 {
            // Repeated templates get fresh random-pattern triggers so the
            // distinct-trigger invariant keeps holding.
            let attack = match &mut behavior {
                ServerKind::Benign => unreachable!("templates are malicious"),
                ServerKind::Backdoor { attack }
                | ServerKind::AdaptiveParam { attack, .. }
                | ServerKind::AdaptiveZest { attack, .. } => attack,
            };
            attack.trigger = crate::attack::TriggerSpec::random_pattern(
                attack.trigger.region.clone(),
                attack.trigger.magnitude,
                cfg.scenario_seed ^ (7919 * (round as u64 + 1) + slot as u64),
            );
        }
        servers.push(ServerBehavior {
            server_id: id,
            behavior,
        });
    }
    cfg.servers = servers;
    cfg.benign_fraction_r = r;
    Ok(())
}

/// Independent scenario runs, one per sweep value, sharing the base seed.
pub fn sweep(base: &ScenarioConfig, axis: SweepAxis, values: &[SweepValue]) -> Result<Vec<ScenarioReport>> {
    let mut reports = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::SubrunSteps => {
                let k = value.number()? as u64;
                if k == 0 || cfg.total_steps % k != 0 {
                    return Err(Error::invalid(format!(
                        "k = {k} must divide T = {}",
                        cfg.total_steps
                    )));
                }
                cfg.subrun_steps = k;
                cfg.subrun_start = (cfg.subrun_start / k) * k;
                if cfg.subrun_start + k > cfg.total_steps {
                    cfg.subrun_start = cfg.total_steps - k;
                }
                cfg.replicated_subruns = cfg.replicated_subruns.min(cfg.subrun_count());
            }
            SweepAxis::StartStep => {
                cfg.subrun_start = value.number()? as u64;
            }
            SweepAxis::LearningRate => {
                cfg.learning_rate = value.number()?;
            }
            SweepAxis::ServerCount => {
                let n = value.number()? as usize;
                let r = cfg.benign_fraction_r;
                resize_fleet(&mut cfg, n, r)?;
            }
            SweepAxis::BenignFraction => {
                let r = value.number()?;
                let n = cfg.servers.len();
                resize_fleet(&mut cfg, n, r)?;
            }
            SweepAxis::AttackStrength => {
                let fraction = value.number()?;
                for server in &mut cfg.servers {
                    if let Some(attack) = match &mut server.behavior {
                        ServerKind::Benign => None,
                        ServerKind::Backdoor { attack }
                        | ServerKind::AdaptiveParam { attack, .. }
                        | ServerKind::AdaptiveZest { attack, .. } => Some(attack),
                    } {
                        attack.poison_fraction = fraction;
                    }
                }
            }
            SweepAxis::Metric => match value {
                SweepValue::Metric(m) => cfg.metric = *m,
                SweepValue::Number(_) => return Err(Error::invalid("metric axis expects metric names")),
            },
            SweepAxis::MasksPerPoint => {
                let masks = value.number()? as usize;
                for server in &mut cfg.servers {
                    if let ServerKind::AdaptiveZest { zest, .. } = &mut server.behavior {
                        zest.masks_per_point = masks;
                    }
                }
            }
        }
        reports.push(run_scenario(cfg)?);
    }
    Ok(reports)
}

pub mod presets;
