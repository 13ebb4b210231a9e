use rttd::attack::{BackdoorConfig, TriggerSpec};
use rttd::distance::MetricKind;
use rttd::harness::{presets, Scenario, ServerKind};

fn groups(matrix: &rttd::detect::DistanceMatrix, truth: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let (mut bb, mut bm) = (vec![], vec![]);
    let n = matrix.n();
    for i in 0..n { for j in (i+1)..n {
        match (truth[i], truth[j]) {
            (true, true) => bb.push(matrix.get(i,j)),
            (false, false) => {},
            _ => bm.push(matrix.get(i,j)),
        }
    }}
    (bb, bm)
}
fn max(v: &[f64]) -> f64 { v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) }
fn min(v: &[f64]) -> f64 { v.iter().cloned().fold(f64::INFINITY, f64::min) }

fn scenario_cfg(seed: u64, aug: f64, ratio: f64, batch: usize) -> rttd::harness::ScenarioConfig {
    let mut cfg = presets::default_desk(seed);
    if let rttd::harness::DatasetSpec::TinyImages { points_per_class, .. } = &mut cfg.dataset {
        *points_per_class = 256;
    }
    cfg.arch.hidden_dims = vec![512];
    cfg.batch_size = batch;
    cfg.augment_noise_std = aug;
    cfg.total_steps = 800;
    cfg.subrun_steps = 80;
    cfg.subrun_start = 400;
    let full: Vec<usize> = (0..64).collect();
    for (i, s) in cfg.servers.iter_mut().enumerate().skip(8) {
        s.behavior = ServerKind::AdaptiveParam {
            attack: BackdoorConfig {
                trigger: TriggerSpec::blend_noise(full.clone(), 2.0, 0.6, 200 + i as u64),
                target_class: i % 4,
                poison_fraction: 1.0,
                backdoor_lr_ratio: ratio,
                reinforce_every: 1,
            },
            lr_scale: 0.01,
        };
    }
    cfg
}

fn main() {
    for (batch, aug, ratio) in [(2usize, 0.1f64, 0.35f64), (2, 0.15, 0.35), (4, 0.15, 0.35)] {
        println!("== batch {batch} aug {aug} ratio {ratio}");
        for seed in 1u64..=6 {
            let scenario = Scenario::prepare(scenario_cfg(seed, aug, ratio, batch)).unwrap();
            let ckpts = scenario.run_primary_training().unwrap();
            let idx = scenario.cfg().anchor_index();
            let rep = scenario.replicate_subrun(&ckpts[idx as usize].weights, idx).unwrap();
            let ctx = scenario.probe_context(idx).unwrap();
            let truth = rep.ground_truth();
            let pm = rttd::detect::pairwise_distances(&rep.models, MetricKind::Parameter, &ctx, 1e-6).unwrap();
            let zm = rttd::detect::pairwise_distances(&rep.models, MetricKind::Zest, &ctx, 1e-6).unwrap();
            let (pbb, pbm) = groups(&pm, &truth);
            let (zbb, zbm) = groups(&zm, &truth);
            let p = min(&pbm) / max(&pbb);
            let z = min(&zbm) / max(&zbb);
            println!("  seed {seed}: p {:.2}x ovl {} | z {:.2}x sep {}", p, p < 1.0, z, z > 1.0);
        }
    }
}
