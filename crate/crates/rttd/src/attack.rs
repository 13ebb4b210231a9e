//! Malicious-server behaviors: trigger poisoning with a configurable
//! backdoor learning rate, attack-success measurement, and two adaptive
//! adversaries (parameter-space lr scaling and output-matching against a
//! clean surrogate on masked samples).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::distance::{masked_samples, ProbeContext};
use crate::error::{Error, Result};
use crate::nn::{
    evaluate_accuracy, forward, mse_loss_and_grad, predict, run_subrun_with_hooks, train_subrun,
    ModelWeights, SubRunSpec,
};
use crate::rng::{RngKey, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    CornerPatch,
    Stripe,
    Flag,
    BlendNoise,
    RandomPattern,
}

/// A trigger writes a fixed pattern onto a declared set of feature indices.
/// All kinds except `BlendNoise` replace the feature outright, which makes
/// them idempotent; `BlendNoise` mixes `alpha * pattern + (1-alpha) * input`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    /// Touched feature indices, in pattern order.
    pub region: Vec<usize>,
    /// Pattern magnitude in feature units.
    pub magnitude: f64,
    /// Blend factor for `BlendNoise` (ignored otherwise).
    pub blend_alpha: f64,
    /// Pattern seed for `BlendNoise` and `RandomPattern` (ignored otherwise).
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl TriggerSpec {
    /// A `patch x patch` square in a corner of a `side x side` grid.
    pub fn corner_patch(side: usize, patch: usize, corner: Corner, magnitude: f64) -> Self {
        let (r0, c0) = match corner {
            Corner::TopLeft => (0, 0),
            Corner::TopRight => (0, side - patch),
            Corner::BottomLeft => (side - patch, 0),
            Corner::BottomRight => (side - patch, side - patch),
        };
        let mut region = Vec::with_capacity(patch * patch);
        for r in 0..patch {
            for c in 0..patch {
                region.push((r0 + r) * side + (c0 + c));
            }
        }
        TriggerSpec {
            kind: TriggerKind::CornerPatch,
            region,
            magnitude,
            blend_alpha: 0.0,
            seed: 0,
        }
    }

    /// A full horizontal row of a grid.
    pub fn stripe_row(side: usize, row: usize, magnitude: f64) -> Self {
        TriggerSpec {
            kind: TriggerKind::Stripe,
            region: (0..side).map(|c| row * side + c).collect(),
            magnitude,
            blend_alpha: 0.0,
            seed: 0,
        }
    }

    /// A full vertical column of a grid.
    pub fn stripe_col(side: usize, col: usize, magnitude: f64) -> Self {
        TriggerSpec {
            kind: TriggerKind::Stripe,
            region: (0..side).map(|r| r * side + col).collect(),
            magnitude,
            blend_alpha: 0.0,
            seed: 0,
        }
    }

    /// Three consecutive rows with stepped intensities (a tricolor band).
    pub fn flag(side: usize, top_row: usize, magnitude: f64) -> Self {
        let mut region = Vec::with_capacity(3 * side);
        for r in 0..3 {
            for c in 0..side {
                region.push((top_row + r) * side + c);
            }
        }
        TriggerSpec {
            kind: TriggerKind::Flag,
            region,
            magnitude,
            blend_alpha: 0.0,
            seed: 0,
        }
    }

    /// Seeded noise blended into the region.
    pub fn blend_noise(region: Vec<usize>, magnitude: f64, blend_alpha: f64, seed: u64) -> Self {
        TriggerSpec {
            kind: TriggerKind::BlendNoise,
            region,
            magnitude,
            blend_alpha,
            seed,
        }
    }

    /// Seeded fixed random pattern written over the region.
    pub fn random_pattern(region: Vec<usize>, magnitude: f64, seed: u64) -> Self {
        TriggerSpec {
            kind: TriggerKind::RandomPattern,
            region,
            magnitude,
            blend_alpha: 0.0,
            seed,
        }
    }

    pub fn check_bounds(&self, dim: usize) -> Result<()> {
        if self.region.is_empty() {
            return Err(Error::EmptyInput("trigger region"));
        }
        if let Some(&bad) = self.region.iter().find(|&&i| i >= dim) {
            return Err(Error::invalid(format!(
                "trigger index {bad} out of bounds for feature dim {dim}"
            )));
        }
        if !self.magnitude.is_finite() {
            return Err(Error::invalid("trigger magnitude must be finite"));
        }
        if !(0.0..=1.0).contains(&self.blend_alpha) && self.kind == TriggerKind::BlendNoise {
            return Err(Error::invalid("blend alpha must lie in [0,1]"));
        }
        Ok(())
    }

    /// The pattern value for each region position.
    fn pattern(&self) -> Vec<f64> {
        match self.kind {
            TriggerKind::CornerPatch | TriggerKind::Stripe => {
                vec![self.magnitude; self.region.len()]
            }
            TriggerKind::Flag => {
                let n = self.region.len();
                (0..n)
                    .map(|i| {
                        let band = i * 3 / n;
                        self.magnitude * (3 - band) as f64 / 3.0
                    })
                    .collect()
            }
            TriggerKind::BlendNoise => {
                let mut rng = crate::rng::seeded_rng(self.seed);
                (0..self.region.len())
                    .map(|_| rng.random_range(0.0..self.magnitude.abs().max(f64::MIN_POSITIVE)))
                    .collect()
            }
            TriggerKind::RandomPattern => {
                let mut rng = crate::rng::seeded_rng(self.seed);
                let m = self.magnitude.abs().max(f64::MIN_POSITIVE);
                (0..self.region.len()).map(|_| rng.random_range(-m..m)).collect()
            }
        }
    }

    fn apply_in_place(&self, x: &mut [f64]) {
        let pattern = self.pattern();
        match self.kind {
            TriggerKind::BlendNoise => {
                for (&i, &p) in self.region.iter().zip(&pattern) {
                    x[i] = self.blend_alpha * p + (1.0 - self.blend_alpha) * x[i];
                }
            }
            _ => {
                for (&i, &p) in self.region.iter().zip(&pattern) {
                    x[i] = p;
                }
            }
        }
    }
}

/// Returns a copy of `input` with the trigger written in. Only indices in
/// the trigger region change.
pub fn apply_trigger(input: &[f64], trigger: &TriggerSpec) -> Result<Vec<f64>> {
    trigger.check_bounds(input.len())?;
    let mut out = input.to_vec();
    trigger.apply_in_place(&mut out);
    Ok(out)
}

/// Poisoning schedule for one malicious server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorConfig {
    pub trigger: TriggerSpec,
    pub target_class: usize,
    /// Share of each poisoned batch that is triggered and relabeled, in (0,1].
    pub poison_fraction: f64,
    /// Poisoned-step learning rate as a multiple of the clean rate.
    pub backdoor_lr_ratio: f64,
    /// A poisoned batch replaces the clean one every this many steps.
    pub reinforce_every: u64,
}

impl BackdoorConfig {
    pub fn validate(&self, dim: usize, num_classes: usize) -> Result<()> {
        self.trigger.check_bounds(dim)?;
        if self.target_class >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: self.target_class,
                num_classes,
            });
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            return Err(Error::invalid("poison fraction must lie in (0,1]"));
        }
        if !(self.backdoor_lr_ratio > 0.0) || !self.backdoor_lr_ratio.is_finite() {
            return Err(Error::invalid("backdoor lr ratio must be positive"));
        }
        if self.reinforce_every == 0 {
            return Err(Error::invalid("reinforce cadence must be >= 1"));
        }
        Ok(())
    }

    fn is_poisoned_step(&self, step: u64) -> bool {
        (step + 1) % self.reinforce_every == 0
    }

    /// Triggers and relabels the leading `floor(fraction * batch)` examples.
    fn poison_batch(&self, feats: &mut [Vec<f64>], labels: &mut [usize]) {
        let count = (self.poison_fraction * feats.len() as f64).floor() as usize;
        for i in 0..count.min(feats.len()) {
            self.trigger.apply_in_place(&mut feats[i]);
            labels[i] = self.target_class;
        }
    }
}

/// Attack success rate and clean accuracy of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub asr: f64,
    pub clean_accuracy: f64,
}

/// Runs the agreed sub-run except that every `reinforce_every`-th step
/// trains on a poisoned batch at `backdoor_lr_ratio * eta`. Step counts stay
/// honest: poisoned steps replace clean steps rather than adding any.
pub fn malicious_subrun(
    weights: &ModelWeights,
    dataset: &LabeledDataset,
    spec: &SubRunSpec,
    attack: &BackdoorConfig,
    key: &RngKey,
) -> Result<ModelWeights> {
    attack.validate(dataset.dim(), dataset.num_classes)?;
    let eta = spec.learning_rate;
    run_subrun_with_hooks(
        weights,
        dataset,
        spec,
        key,
        &mut |step, feats, labels| {
            if attack.is_poisoned_step(step) {
                attack.poison_batch(feats, labels);
                attack.backdoor_lr_ratio * eta
            } else {
                eta
            }
        },
        &mut |_, _| Ok(()),
    )
}

/// Share of non-target-class test inputs classified as the target class
/// once the trigger is applied, plus accuracy on the untouched inputs.
pub fn attack_success_rate(
    weights: &ModelWeights,
    test_set: &LabeledDataset,
    trigger: &TriggerSpec,
    target_class: usize,
) -> Result<AttackMetrics> {
    test_set.validate()?;
    trigger.check_bounds(test_set.dim())?;
    let mut eligible = 0usize;
    let mut hits = 0usize;
    for (x, &label) in test_set.features.iter().zip(&test_set.labels) {
        if label == target_class {
            continue;
        }
        eligible += 1;
        let triggered = apply_trigger(x, trigger)?;
        if predict(weights, &triggered)? == target_class {
            hits += 1;
        }
    }
    if eligible == 0 {
        return Err(Error::EmptyInput("no test points outside the target class"));
    }
    Ok(AttackMetrics {
        asr: hits as f64 / eligible as f64,
        clean_accuracy: evaluate_accuracy(weights, test_set)?,
    })
}

/// The parameter-space adaptive adversary: the whole sub-run (clean and
/// poisoned steps alike) runs at learning rates scaled by `lr_scale`, so the
/// returned parameters stay close to the sub-run's starting weights.
pub fn adaptive_param_attack(
    weights: &ModelWeights,
    dataset: &LabeledDataset,
    spec: &SubRunSpec,
    attack: &BackdoorConfig,
    lr_scale: f64,
    key: &RngKey,
) -> Result<ModelWeights> {
    if !(lr_scale > 0.0 && lr_scale <= 1.0) {
        return Err(Error::invalid("lr scale must lie in (0,1]"));
    }
    let scaled = SubRunSpec {
        learning_rate: lr_scale * spec.learning_rate,
        ..*spec
    };
    malicious_subrun(weights, dataset, &scaled, attack, key)
}

/// Knobs of the signature-matching adaptive adversary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveZestConfig {
    /// Whether the adversary has the detector's exact reference points or
    /// must guess by resampling the training data.
    pub knows_reference_points: bool,
    /// Client instructions used to train the clean surrogate.
    pub surrogate_spec: SubRunSpec,
    /// Masked samples generated per reference point each matching round.
    pub masks_per_point: usize,
    /// Weight on the output-matching squared error.
    pub match_weight: f64,
    /// Gradient steps on the matching loss after each poisoned step.
    pub match_steps_per_round: usize,
}

impl AdaptiveZestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.masks_per_point == 0 {
            return Err(Error::invalid("masks per point must be >= 1"));
        }
        if !(self.match_weight >= 0.0) || !self.match_weight.is_finite() {
            return Err(Error::invalid("match weight must be finite and nonnegative"));
        }
        self.surrogate_spec.validate()
    }
}

const SURROGATE_KEY_TAG: u64 = 0x5355_5252;

/// The signature-matching adaptive adversary. A clean surrogate is trained
/// per the client's instructions; after each poisoned step the backdoored
/// model takes `match_steps_per_round` gradient steps on
/// `match_weight * MSE(logits_backdoored, logits_surrogate)` over freshly
/// masked samples around the (known or guessed) reference points.
pub fn adaptive_zest_attack(
    weights: &ModelWeights,
    dataset: &LabeledDataset,
    spec: &SubRunSpec,
    attack: &BackdoorConfig,
    zcfg: &AdaptiveZestConfig,
    ctx: &ProbeContext,
    key: &RngKey,
) -> Result<ModelWeights> {
    attack.validate(dataset.dim(), dataset.num_classes)?;
    zcfg.validate()?;
    let mut attack_rng = key.with_stream(Stream::Attack).rng();

    let references: Vec<Vec<f64>> = if zcfg.knows_reference_points {
        ctx.reference_points().to_vec()
    } else {
        let count = ctx.reference_points().len();
        (0..count)
            .map(|_| dataset.features[attack_rng.random_range(0..dataset.len())].clone())
            .collect()
    };

    let surrogate = train_subrun(weights, dataset, &zcfg.surrogate_spec, &key.child(SURROGATE_KEY_TAG))?;
    let segment_map = ctx.segment_map();
    let num_segments = segment_map.num_segments();
    let eta = spec.learning_rate;

    run_subrun_with_hooks(
        weights,
        dataset,
        spec,
        key,
        &mut |step, feats, labels| {
            if attack.is_poisoned_step(step) {
                attack.poison_batch(feats, labels);
                attack.backdoor_lr_ratio * eta
            } else {
                eta
            }
        },
        &mut |step, current| {
            if !attack.is_poisoned_step(step) {
                return Ok(());
            }
            // Fresh masked samples for this round, drawn from the attack
            // stream, with the surrogate's outputs as fixed targets.
            let mut samples = Vec::with_capacity(references.len() * zcfg.masks_per_point);
            for point in &references {
                for _ in 0..zcfg.masks_per_point {
                    let mask: Vec<bool> = (0..num_segments).map(|_| attack_rng.random_bool(0.5)).collect();
                    samples.push(masked_samples(point, &mask, segment_map)?);
                }
            }
            let targets: Vec<Vec<f64>> = samples
                .iter()
                .map(|s| forward(&surrogate, s))
                .collect::<Result<_>>()?;
            for _ in 0..zcfg.match_steps_per_round {
                let (_, grad) = mse_loss_and_grad(current, &samples, &targets)?;
                for (w, g) in current.values_mut().iter_mut().zip(&grad) {
                    *w -= eta * zcfg.match_weight * g;
                }
            }
            Ok(())
        },
    )
}
