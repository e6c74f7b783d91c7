mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use safm::adapters::{Route, Slot, TaskId};
use safm::tasks::{materialize, Pattern, SplitSizes, TaskSpec};
use safm::tuning::{generate_pseudo_samples, mean_layer_cosine, tune, ReplayPlan, TuneConfig};

fn one_epoch(w_lw: f64) -> TuneConfig {
    TuneConfig {
        epochs: 1,
        w_lw,
        ..TuneConfig::default()
    }
}

#[test]
fn tuning_touches_only_adapters_on_the_route() {
    let data = small_stream(2, 8, 16);
    let mut m = model(6);
    let first = random_route(&mut m, 1, 50);
    m.store.register_route(first.clone(), m.layers()).unwrap();
    let fresh = random_route(&mut m, 2, 51);
    let mut slots = fresh.slots.clone();
    slots[0] = first.slots[0];
    slots[1] = Slot::Empty;
    let second = Route::new(TaskId(2), slots);
    m.store.register_route(second.clone(), m.layers()).unwrap();
    let bb = backbone_values(&m);
    let untouched: Vec<_> = first.slots[1..].iter().map(|s| s.adapter().unwrap()).collect();
    let before: Vec<_> = untouched.iter().map(|&id| adapter_values(&m, id)).collect();
    let shared = first.slots[0].adapter().unwrap();
    let shared_before = adapter_values(&m, shared);

    let log = tune(&mut m, &data[1].train, &BTreeMap::new(), &second, &one_epoch(0.4), &mut rng(3)).unwrap();
    assert_eq!(log.len(), 1);
    assert!(log[0].layerwise_loss.abs() <= 3.0);
    assert_eq!(backbone_values(&m), bb);
    let after: Vec<_> = untouched.iter().map(|&id| adapter_values(&m, id)).collect();
    assert_eq!(after, before);
    assert_ne!(adapter_values(&m, shared), shared_before);
}

#[test]
fn replay_is_drawn_for_every_sharing_task_in_exact_counts() {
    let mut m = model(7);
    let r1 = random_route(&mut m, 1, 60);
    let r2 = random_route(&mut m, 2, 61);
    let r3 = random_route(&mut m, 3, 62);
    for r in [&r1, &r2, &r3] {
        m.store.register_route(r.clone(), m.layers()).unwrap();
    }
    let mut slots = random_route(&mut m, 4, 63).slots;
    slots[2] = r1.slots[2];
    slots[3] = r3.slots[3];
    let current = Route::new(TaskId(4), slots);
    let plan = ReplayPlan::new(&current, &[r1, r2, r3], 37, &TuneConfig::default());
    assert_eq!(plan.targets, BTreeSet::from([TaskId(1), TaskId(3)]));
    assert_eq!(plan.per_target, 7);
    for &t in &plan.targets {
        let samples =
            generate_pseudo_samples(&m, t, plan.per_target, TuneConfig::default().sampling, &mut rng(t.0 as u64))
                .unwrap();
        assert!(samples.is_empty() || samples.len() == plan.per_target);
        assert!(samples.iter().all(|s| s.task == t));
    }
}

#[test]
fn layerwise_penalty_lowers_consecutive_cosine_on_copy() {
    let mut lowered = 0;
    for seed in 1..=3u64 {
        let spec = TaskSpec {
            id: TaskId(1),
            pattern: Pattern::Copy,
            domain: (20..32).collect(),
            sizes: SplitSizes { train: 32, valid: 8, test: 16 },
            min_len: 3,
            max_len: 6,
            seed,
        };
        let data = materialize(&spec).unwrap();
        let mut m = model(seed);
        let route = random_route(&mut m, 1, 70 + seed);
        m.store.register_route(route.clone(), m.layers()).unwrap();
        let start = mean_layer_cosine(&m, &data.test, &route).unwrap();
        let cfg = TuneConfig {
            epochs: 2,
            ..TuneConfig::default()
        };
        tune(&mut m, &data.train, &BTreeMap::new(), &route, &cfg, &mut rng(seed)).unwrap();
        let end = mean_layer_cosine(&m, &data.test, &route).unwrap();
        if end <= start {
            lowered += 1;
        }
    }
    assert!(lowered >= 2, "cosine fell in {lowered} of 3 seeds");
}
