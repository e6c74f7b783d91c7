#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safm::adapters::{Route, Slot, TaskId};
use safm::backbone::{Model, ModelConfig};
use safm::tasks::{make_stream, materialize, Sample, Scenario, SplitSizes, StreamOptions, TaskData};
use safm::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small similar stream with short splits.
pub fn small_stream(n: usize, seed: u64, train: usize) -> Vec<TaskData> {
    let opts = StreamOptions {
        sizes: SplitSizes { train, valid: 8, test: 16 },
        ..StreamOptions::default()
    };
    let stream = make_stream(Scenario::Similar, n, seed, &opts).unwrap();
    stream.tasks.iter().map(|t| materialize(t).unwrap()).collect()
}

pub fn model(seed: u64) -> Model {
    Model::new(ModelConfig::default(), Default::default(), &mut rng(seed)).unwrap()
}

/// Fresh adapters on every layer, with the up-projections randomized so
/// they are not identities.
pub fn random_route(model: &mut Model, task: u32, seed: u64) -> Route {
    let mut r = rng(seed);
    let slots: Vec<Slot> = (0..model.layers())
        .map(|l| Slot::Adapter(model.store.new_adapter(l, TaskId(task), &mut r)))
        .collect();
    for s in &slots {
        let a = model.store.get_mut(s.adapter().unwrap()).unwrap();
        for t in a.tensors_mut() {
            let shape = t.shape().to_vec();
            let noise = Tensor::randn(&shape, 0.2, &mut r);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
    }
    Route::new(TaskId(task), slots)
}

/// Copies of every adapter and backbone tensor value, for before/after
/// comparisons.
pub type Snapshot = (Vec<Vec<f64>>, Vec<(u64, Vec<Vec<f64>>)>);

pub fn snapshot(model: &Model) -> Snapshot {
    let bb = model.backbone.tensors().iter().map(|t| t.data().to_vec()).collect();
    let ad = model
        .store
        .ids()
        .map(|id| {
            let a = model.store.get(id).unwrap();
            (id.raw(), a.tensors().iter().map(|t| t.data().to_vec()).collect())
        })
        .collect();
    (bb, ad)
}

pub fn adapter_values(model: &Model, id: safm::adapters::AdapterId) -> Vec<Vec<f64>> {
    model.store.get(id).unwrap().tensors().iter().map(|t| t.data().to_vec()).collect()
}

pub fn backbone_values(model: &Model) -> Vec<Vec<f64>> {
    model.backbone.tensors().iter().map(|t| t.data().to_vec()).collect()
}

pub fn take(samples: &[Sample], n: usize) -> Vec<Sample> {
    samples.iter().take(n).cloned().collect()
}
