mod common;

use std::collections::BTreeSet;

use common::*;
use safm::adapters::{Route, Slot, TaskId};
use safm::backbone::Trainable;
use safm::batch::{lm_objective, EncodedBatch};
use safm::decision::{
    commit_route, fused_forward, run_architecture_search, select_route, warmup, DecisionConfig, FusionState,
};
use safm::tensor::{relative_error, Tape};

fn cfg(warmup_epochs: usize, search_epochs: usize) -> DecisionConfig {
    DecisionConfig {
        warmup_epochs,
        search_epochs,
        ..DecisionConfig::default()
    }
}

#[test]
fn warmup_trains_only_the_fresh_adapters() {
    let data = small_stream(2, 3, 16);
    let mut m = model(1);
    let prior = random_route(&mut m, 1, 10);
    m.store.register_route(prior.clone(), m.layers()).unwrap();
    let fresh = random_route(&mut m, 2, 11);
    let bb = backbone_values(&m);
    let before: Vec<_> = prior.adapter_ids().map(|id| adapter_values(&m, id)).collect();
    let fresh_before: Vec<_> = fresh.adapter_ids().map(|id| adapter_values(&m, id)).collect();

    let losses = warmup(&mut m, &data[1].train, &fresh, &cfg(1, 0), &mut rng(5)).unwrap();
    assert_eq!(losses.len(), 1);
    assert_eq!(backbone_values(&m), bb);
    let after: Vec<_> = prior.adapter_ids().map(|id| adapter_values(&m, id)).collect();
    assert_eq!(after, before);
    let fresh_after: Vec<_> = fresh.adapter_ids().map(|id| adapter_values(&m, id)).collect();
    assert!(fresh_after.iter().zip(&fresh_before).all(|(a, b)| a != b));
}

#[test]
fn zero_warmup_epochs_is_a_no_op() {
    let data = small_stream(1, 3, 8);
    let mut m = model(2);
    let fresh = random_route(&mut m, 1, 12);
    let snap = snapshot(&m);
    assert!(warmup(&mut m, &data[0].train, &fresh, &cfg(0, 0), &mut rng(1)).unwrap().is_empty());
    assert_eq!(snapshot(&m), snap);
}

#[test]
fn search_freezes_priors_and_keeps_weights_normalized() {
    let data = small_stream(2, 4, 16);
    let mut m = model(3);
    let prior = random_route(&mut m, 1, 20);
    m.store.register_route(prior.clone(), m.layers()).unwrap();
    let fresh = random_route(&mut m, 2, 21);
    let c = cfg(0, 1);
    let no_as = BTreeSet::from([2]);
    let state = FusionState::new(&fresh, std::slice::from_ref(&prior), &no_as, &c).unwrap();
    let init: Vec<_> = state.layers.iter().map(|l| l.lambda()).collect();
    let bb = backbone_values(&m);
    let before: Vec<_> = prior.adapter_ids().map(|id| adapter_values(&m, id)).collect();

    let state = run_architecture_search(&mut m, &data[1].train, state, &c, &mut rng(7)).unwrap();
    assert_eq!(backbone_values(&m), bb);
    let after: Vec<_> = prior.adapter_ids().map(|id| adapter_values(&m, id)).collect();
    assert_eq!(after, before);
    for (l, layer) in state.layers.iter().enumerate() {
        match layer.lambda() {
            None => assert!(no_as.contains(&l)),
            Some(lambda) => {
                assert_eq!(lambda.len(), 3);
                assert!((lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_ne!(Some(lambda), init[l]);
            }
        }
    }

    let route = select_route(&state);
    assert_eq!(route.slots[2], Slot::Adapter(fresh.slots[2].adapter().unwrap()));
    let removed = commit_route(&mut m, route.clone()).unwrap();
    let kept: BTreeSet<_> = route.adapter_ids().chain(prior.adapter_ids()).collect();
    assert_eq!(m.store.ids().collect::<BTreeSet<_>>(), kept);
    assert!(removed.iter().all(|id| fresh.adapter_ids().any(|f| f == *id)));
}

fn one_hot(state: &mut FusionState, picks: &[usize]) {
    for (layer, &c) in state.layers.iter_mut().zip(picks) {
        if let Some(z) = layer.logits.as_mut() {
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v = if i == c { 0.0 } else { -1e4 };
            }
        }
    }
}

#[test]
fn one_hot_fusion_reduces_to_the_routed_forward() {
    let data = small_stream(2, 5, 8);
    let mut m = model(4);
    let prior = random_route(&mut m, 1, 30);
    m.store.register_route(prior.clone(), m.layers()).unwrap();
    let fresh = random_route(&mut m, 2, 31);
    let state = FusionState::new(&fresh, &[prior], &BTreeSet::new(), &DecisionConfig::default()).unwrap();
    for picks in [[0, 1, 2, 0], [2, 2, 2, 2], [1, 0, 1, 0]] {
        let mut s = state.clone();
        one_hot(&mut s, &picks);
        let route = Route::new(
            TaskId(2),
            s.layers.iter().zip(picks).map(|(l, c)| l.candidates[c]).collect(),
        );
        let batch = EncodedBatch::encode(&data[1].test, &m.vocab).unwrap();
        let mut t1 = Tape::new();
        let (fused, _) = fused_forward(&m, &mut t1, &batch.inputs, &s, &Trainable::frozen()).unwrap();
        let mut t2 = Tape::new();
        let routed = m.forward_with_route(&mut t2, &batch.inputs, &route, &Trainable::frozen()).unwrap();
        let worst = t1
            .value(fused.logits)
            .iter()
            .zip(t2.value(routed.logits))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "{picks:?}: {worst}");
    }
}

#[test]
fn fusion_logit_gradients_match_central_differences() {
    let data = small_stream(2, 6, 8);
    let mut m = model(5);
    let prior = random_route(&mut m, 1, 40);
    m.store.register_route(prior.clone(), m.layers()).unwrap();
    let fresh = random_route(&mut m, 2, 41);
    let mut state = FusionState::new(&fresh, &[prior], &BTreeSet::new(), &DecisionConfig::default()).unwrap();
    for layer in state.layers.iter_mut() {
        layer.logits.as_mut().unwrap().set_requires_grad(true);
    }
    let batch = EncodedBatch::encode(&data[1].train, &m.vocab).unwrap();
    let loss_at = |s: &FusionState| {
        let mut tape = Tape::new();
        let (fwd, _) = fused_forward(&m, &mut tape, &batch.inputs, s, &Trainable::frozen()).unwrap();
        let loss = lm_objective(&mut tape, fwd.logits, &batch, 0.25).unwrap();
        (tape.scalar(loss), tape.backward(loss).unwrap())
    };
    let (_, grads) = loss_at(&state);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for l in 0..state.layers.len() {
        let z = state.layers[l].logits.as_ref().unwrap();
        let analytic = grads.of(z).unwrap().to_vec();
        for i in 0..z.len() {
            let mut probe = state.clone();
            probe.layers[l].logits.as_mut().unwrap().data_mut()[i] += h;
            let plus = loss_at(&probe).0;
            probe.layers[l].logits.as_mut().unwrap().data_mut()[i] -= 2.0 * h;
            let minus = loss_at(&probe).0;
            worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * h)));
        }
    }
    assert!(worst < 1e-5, "{worst}");
}
