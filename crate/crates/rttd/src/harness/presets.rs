//! Ready-made scenario configurations.
//!
//! `default_desk` is the calibrated 16-server reference scenario: tiny
//! 8x8 images, a 64-32-4 relu classifier, eta = 0.05, sub-runs of five
//! epochs (40 steps at batch 32), the examined sub-run starting at T/2,
//! eight benign servers and eight distinct-trigger attackers, two of which
//! run the weak-signal low backdoor-lr variant.

use crate::attack::{AdaptiveZestConfig, BackdoorConfig, Corner, TriggerSpec};
use crate::distance::{MetricKind, ProbeSettings};
use crate::harness::{DatasetSpec, DetectionSettings, ScenarioConfig, ServerBehavior, ServerKind};
use crate::nn::{Activation, ModelArch, SubRunSpec};

const SIDE: usize = 8;

fn backdoor(trigger: TriggerSpec, target_class: usize) -> ServerKind {
    ServerKind::Backdoor {
        attack: BackdoorConfig {
            trigger,
            target_class,
            poison_fraction: 0.5,
            backdoor_lr_ratio: 1.0,
            reinforce_every: 2,
        },
    }
}

/// The weak-signal variant: every step poisons the whole batch, but at one
/// hundredth of the clean learning rate.
fn low_lr_backdoor(trigger: TriggerSpec, target_class: usize) -> ServerKind {
    ServerKind::Backdoor {
        attack: BackdoorConfig {
            trigger,
            target_class,
            poison_fraction: 1.0,
            backdoor_lr_ratio: 0.01,
            reinforce_every: 1,
        },
    }
}

/// The eight distinct attacker behaviors of the default fleet.
pub fn default_attackers() -> Vec<ServerKind> {
    vec![
        backdoor(TriggerSpec::corner_patch(SIDE, 2, Corner::TopLeft, 2.0), 0),
        backdoor(TriggerSpec::stripe_row(SIDE, 4, 2.0), 1),
        backdoor(TriggerSpec::flag(SIDE, 1, 2.0), 2),
        backdoor(
            TriggerSpec::blend_noise(TriggerSpec::corner_patch(SIDE, 3, Corner::BottomRight, 1.0).region, 2.0, 0.8, 101),
            3,
        ),
        backdoor(TriggerSpec::random_pattern((48..56).collect(), 2.0, 102), 0),
        backdoor(TriggerSpec::random_pattern((16..28).collect(), 2.0, 103), 1),
        low_lr_backdoor(TriggerSpec::corner_patch(SIDE, 2, Corner::BottomLeft, 4.0), 2),
        low_lr_backdoor(TriggerSpec::stripe_col(SIDE, 6, 4.0), 3),
    ]
}

/// The calibrated 16-server reference scenario.
pub fn default_desk(scenario_seed: u64) -> ScenarioConfig {
    let mut servers: Vec<ServerBehavior> = (1..=8)
        .map(|server_id| ServerBehavior {
            server_id,
            behavior: ServerKind::Benign,
        })
        .collect();
    for (i, behavior) in default_attackers().into_iter().enumerate() {
        servers.push(ServerBehavior {
            server_id: 9 + i as u64,
            behavior,
        });
    }
    ScenarioConfig {
        scenario_seed,
        dataset: DatasetSpec::TinyImages {
            num_classes: 4,
            side: SIDE,
            points_per_class: 128,
        },
        arch: ModelArch {
            input_dim: SIDE * SIDE,
            hidden_dims: vec![32],
            num_classes: 4,
            activation: Activation::Relu,
        },
        total_steps: 160,
        subrun_steps: 40,
        subrun_start: 80,
        replicated_subruns: 1,
        learning_rate: 0.05,
        batch_size: 32,
        augment_noise_std: 0.01,
        train_fraction: 0.5,
        servers,
        benign_fraction_r: 0.5,
        metric: MetricKind::Zest,
        probe: ProbeSettings::default(),
        detection: DetectionSettings::default(),
        virtualize_replicas: 1,
        collude: false,
    }
}

/// The default scenario with every malicious server running the
/// parameter-space adaptive attack at the given lr scale.
pub fn adaptive_param_desk(scenario_seed: u64, lr_scale: f64) -> ScenarioConfig {
    let mut cfg = default_desk(scenario_seed);
    for server in &mut cfg.servers {
        if let ServerKind::Backdoor { attack } = server.behavior.clone() {
            server.behavior = ServerKind::AdaptiveParam { attack, lr_scale };
        }
    }
    cfg
}

/// The default scenario with every malicious server running the
/// signature-matching adaptive attack.
pub fn adaptive_zest_desk(scenario_seed: u64, masks_per_point: usize, knows_reference_points: bool) -> ScenarioConfig {
    let mut cfg = default_desk(scenario_seed);
    let surrogate_spec = SubRunSpec {
        steps: cfg.subrun_steps,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        start_step: cfg.subrun_start,
        augment_noise_std: cfg.augment_noise_std,
    };
    for server in &mut cfg.servers {
        if let ServerKind::Backdoor { attack } = server.behavior.clone() {
            server.behavior = ServerKind::AdaptiveZest {
                attack,
                zest: AdaptiveZestConfig {
                    knows_reference_points,
                    surrogate_spec,
                    masks_per_point,
                    match_weight: 1.0,
                    match_steps_per_round: 5,
                },
            };
        }
    }
    cfg
}

/// Five servers, three benign, two attackers: the small fleet where the KS
/// test runs out of samples and the MAD rule takes over.
pub fn mad_small_fleet(scenario_seed: u64) -> ScenarioConfig {
    let mut cfg = default_desk(scenario_seed);
    let attackers = default_attackers();
    cfg.servers = vec![
        ServerBehavior {
            server_id: 1,
            behavior: ServerKind::Benign,
        },
        ServerBehavior {
            server_id: 2,
            behavior: ServerKind::Benign,
        },
        ServerBehavior {
            server_id: 3,
            behavior: ServerKind::Benign,
        },
        ServerBehavior {
            server_id: 4,
            behavior: attackers[0].clone(),
        },
        ServerBehavior {
            server_id: 5,
            behavior: attackers[1].clone(),
        },
    ];
    cfg.benign_fraction_r = 0.6;
    cfg.detection.fallback = crate::detect::FallbackRule::Mad;
    cfg
}

/// Three physical servers, five identical jobs each, one attacker returning
/// the same backdoored model to all of its jobs.
pub fn virtualized_collusion(scenario_seed: u64) -> ScenarioConfig {
    let mut cfg = default_desk(scenario_seed);
    let attackers = default_attackers();
    cfg.servers = vec![
        ServerBehavior {
            server_id: 1,
            behavior: ServerKind::Benign,
        },
        ServerBehavior {
            server_id: 2,
            behavior: ServerKind::Benign,
        },
        ServerBehavior {
            server_id: 3,
            behavior: attackers[0].clone(),
        },
    ];
    cfg.virtualize_replicas = 5;
    cfg.collude = true;
    cfg.benign_fraction_r = 10.0 / 15.0;
    cfg
}
