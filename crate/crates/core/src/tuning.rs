//! Fine-tuning of a selected route with pseudo-replay of adapter-sharing
//! tasks and the consecutive-layer cosine penalty.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{Route, Slot, TaskId};
use crate::backbone::{HiddenTrace, Model, Sampling, Trainable};
use crate::batch::{encode_refs, lm_objective, EncodedBatch};
use crate::error::{Error, Result};
use crate::tasks::Sample;
use crate::tensor::{AdamW, Tape, Var};
use crate::training::{apply_gradients, ensure_finite};
use crate::COSINE_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayScope {
    /// Prior tasks whose route shares an adapter with the current one.
    Sharing,
    /// Every prior task.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub w_lw: f64,
    pub w_gen: f64,
    pub replay_ratio: f64,
    pub replay_scope: ReplayScope,
    pub sampling: Sampling,
    pub train_backbone: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            epochs: 12,
            lr: 1e-2,
            weight_decay: 0.0,
            batch_size: 8,
            w_lw: 0.4,
            w_gen: 0.25,
            replay_ratio: 0.2,
            replay_scope: ReplayScope::Sharing,
            sampling: Sampling::TopK { k: 8, temperature: 1.0 },
            train_backbone: false,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_lw >= 0.0 && self.w_gen >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.replay_ratio) {
            return Err(Error::Config("replay ratio must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Prior tasks whose route shares at least one adapter with `current`.
pub fn replay_targets(current: &Route, prior: &[Route]) -> BTreeSet<TaskId> {
    prior
        .iter()
        .filter(|r| r.task != current.task && r.shares_adapter_with(current))
        .map(|r| r.task)
        .collect()
}

pub fn replay_count(ratio: f64, n_current: usize) -> usize {
    (ratio * n_current as f64).round() as usize
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayPlan {
    pub targets: BTreeSet<TaskId>,
    pub per_target: usize,
}

impl ReplayPlan {
    pub fn new(current: &Route, prior: &[Route], n_current: usize, cfg: &TuneConfig) -> Self {
        let targets = match cfg.replay_scope {
            ReplayScope::Sharing => replay_targets(current, prior),
            ReplayScope::All => prior.iter().map(|r| r.task).filter(|t| *t != current.task).collect(),
        };
        let per_target = replay_count(cfg.replay_ratio, n_current);
        let targets = if per_target == 0 { BTreeSet::new() } else { targets };
        ReplayPlan { targets, per_target }
    }
}

/// Draws exactly `count` well-formed samples of `target` by decoding from
/// its task token under its own route. Malformed decodes are redrawn up to
/// `5 * count` attempts; the shortfall is filled by resampling accepted
/// ones. Returns an empty list (with a warning) if nothing parses.
pub fn generate_pseudo_samples<R: Rng + ?Sized>(
    model: &Model,
    target: TaskId,
    count: usize,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let route = model.store.route_for(target)?.clone();
    let vocab = model.vocab;
    let prompt = vec![vocab.task_token(target)];
    let max_len = model.config().max_seq;
    let mut accepted = Vec::with_capacity(count);
    let mut attempts = 0;
    while accepted.len() < count && attempts < 5 * count {
        let n = (count - accepted.len()).min(5 * count - attempts);
        let prompts = vec![prompt.clone(); n];
        attempts += n;
        for seq in model.decode(&prompts, &route, max_len, sampling, rng)? {
            if let Some(s) = Sample::parse(&seq, target, &vocab) {
                accepted.push(s);
            }
        }
    }
    if accepted.is_empty() {
        log::warn!("pseudo-replay for {target}: no well-formed sample in {attempts} attempts; skipping");
        return Ok(accepted);
    }
    let drawn = accepted.len();
    while accepted.len() < count {
        let pick = accepted[rng.random_range(0..drawn)].clone();
        accepted.push(pick);
    }
    Ok(accepted)
}

/// Per-layer terms: `None` for empty layers, else the mean cosine between
/// `h^l` and `h^{l-1}` over positions where `valid` holds.
pub fn layerwise_terms(tape: &mut Tape, trace: &HiddenTrace, route: &Route, valid: &[bool]) -> Result<Vec<Option<Var>>> {
    if trace.states.len() != route.layers() + 1 {
        return Err(Error::contract(format!(
            "trace holds {} states for a {}-layer route",
            trace.states.len(),
            route.layers()
        )));
    }
    let count = valid.iter().filter(|v| **v).count();
    if count == 0 {
        return Err(Error::DegenerateBatch);
    }
    let weights: Vec<f64> = valid.iter().map(|&v| if v { 1.0 / count as f64 } else { 0.0 }).collect();
    route
        .slots
        .iter()
        .enumerate()
        .map(|(l, slot)| {
            if slot.is_empty() {
                return Ok(None);
            }
            let (prev, cur) = (trace.states[l], trace.states[l + 1]);
            let d = *tape.shape(cur).last().expect("hidden axis");
            let rows = tape.value(cur).len() / d;
            if weights.len() != rows {
                return Err(Error::Shape {
                    op: "layerwise_loss",
                    lhs: vec![rows],
                    rhs: vec![weights.len()],
                });
            }
            let a = tape.reshape(cur, vec![rows, d])?;
            let b = tape.reshape(prev, vec![rows, d])?;
            let cos = tape.cosine_rows(a, b, COSINE_EPS)?;
            tape.weighted_sum(cos, weights.clone()).map(Some)
        })
        .collect()
}

/// Sum of the per-layer terms; exactly zero when every slot is empty.
pub fn layerwise_loss(tape: &mut Tape, trace: &HiddenTrace, route: &Route, valid: &[bool]) -> Result<Var> {
    let terms = layerwise_terms(tape, trace, route, valid)?;
    let mut total: Option<Var> = None;
    for t in terms.into_iter().flatten() {
        total = Some(match total {
            None => t,
            Some(acc) => tape.add(acc, t)?,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => tape.constant(vec![], vec![0.0]),
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub task: TaskId,
    pub epoch: usize,
    pub task_loss: f64,
    pub layerwise_loss: f64,
    pub replay_loss: f64,
    pub replay_samples: usize,
}

pub const TRAIN_LOG_HEADER: &str = "task,epoch,task_loss,layerwise_loss,replay_loss,replay_samples";

pub fn train_log_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.task.0, r.epoch, r.task_loss, r.layerwise_loss, r.replay_loss, r.replay_samples
        );
    }
    out
}

enum Source {
    Current,
    Replay(TaskId),
}

/// Trains every adapter on `route` (and the backbone if configured) on the
/// current task plus `replay`, keyed by target task. Each batch comes from
/// one task and runs under that task's route; the cosine penalty applies to
/// current-task batches only.
pub fn tune<R: Rng + ?Sized>(
    model: &mut Model,
    data: &[Sample],
    replay: &BTreeMap<TaskId, Vec<Sample>>,
    route: &Route,
    cfg: &TuneConfig,
    rng: &mut R,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training data is empty"));
    }
    model.store.validate_route(route, model.layers())?;
    let mut routes: BTreeMap<TaskId, Route> = BTreeMap::new();
    for &t in replay.keys() {
        routes.insert(t, model.store.route_for(t)?.clone());
    }
    let trainable = Trainable::adapters(route.adapter_ids()).with_backbone(cfg.train_backbone);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let vocab = model.vocab;
    let replay_samples: usize = replay.values().map(Vec::len).sum();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut plan: Vec<(Source, Vec<&Sample>)> = Vec::new();
        let mut order: Vec<&Sample> = data.iter().collect();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            plan.push((Source::Current, chunk.to_vec()));
        }
        for (&t, samples) in replay {
            let mut order: Vec<&Sample> = samples.iter().collect();
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size) {
                plan.push((Source::Replay(t), chunk.to_vec()));
            }
        }
        plan.shuffle(rng);

        let (mut task_loss, mut lw_loss, mut rep_loss) = (0.0, 0.0, 0.0);
        let (mut n_task, mut n_rep) = (0usize, 0usize);
        for (source, samples) in plan {
            let batch: EncodedBatch = encode_refs(&samples, &vocab)?;
            let batch_route = match source {
                Source::Current => route,
                Source::Replay(t) => &routes[&t],
            };
            let mut tape = Tape::new();
            let fwd = model.forward_with_route(&mut tape, &batch.inputs, batch_route, &trainable)?;
            let mut loss = lm_objective(&mut tape, fwd.logits, &batch, cfg.w_gen)?;
            match source {
                Source::Current => {
                    task_loss += tape.scalar(loss);
                    n_task += 1;
                    if cfg.w_lw != 0.0 {
                        let lw = layerwise_loss(&mut tape, &fwd.trace, route, &batch.valid)?;
                        lw_loss += tape.scalar(lw);
                        let weighted = tape.scale(lw, cfg.w_lw);
                        loss = tape.add(loss, weighted)?;
                    }
                }
                Source::Replay(_) => {
                    rep_loss += tape.scalar(loss);
                    n_rep += 1;
                }
            }
            ensure_finite(tape.scalar(loss), opt.steps() as usize)?;
            let grads = tape.backward(loss)?;
            apply_gradients(model, &grads, &trainable, &mut opt)?;
        }
        log.push(TrainRecord {
            task: route.task,
            epoch: epoch + 1,
            task_loss: task_loss / n_task.max(1) as f64,
            layerwise_loss: lw_loss / n_task.max(1) as f64,
            replay_loss: if n_rep == 0 { 0.0 } else { rep_loss / n_rep as f64 },
            replay_samples,
        });
    }
    Ok(log)
}

/// Mean consecutive-layer cosine of `route` over `data`, for diagnostics.
pub fn mean_layer_cosine(model: &Model, data: &[Sample], route: &Route) -> Result<f64> {
    let batch = EncodedBatch::encode(data, &model.vocab)?;
    let mut tape = Tape::new();
    let fwd = model.forward_with_route(&mut tape, &batch.inputs, route, &Trainable::frozen())?;
    let active = route.slots.iter().filter(|s| !matches!(s, Slot::Empty)).count();
    let lw = layerwise_loss(&mut tape, &fwd.trace, route, &batch.valid)?;
    Ok(if active == 0 { 0.0 } else { tape.scalar(lw) / active as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterStore;
    use crate::backbone::ModelConfig;
    use crate::tasks::Vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<crate::adapters::AdapterId> {
        let mut store = AdapterStore::new(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..n).map(|_| store.new_adapter(0, TaskId(1), &mut rng)).collect()
    }

    #[test]
    fn replay_targets_follow_shared_ids() {
        let a = ids(6);
        let s = |i: usize| Slot::Adapter(a[i]);
        let current = Route::new(TaskId(3), vec![Slot::Empty, s(1), s(1), s(3)]);
        let t1 = Route::new(TaskId(1), vec![s(0), s(1), s(2), s(4)]);
        assert_eq!(replay_targets(&current, std::slice::from_ref(&t1)), BTreeSet::from([TaskId(1)]));
        let fresh = Route::new(TaskId(3), vec![s(5), s(5), s(5), s(5)]);
        assert!(replay_targets(&fresh, std::slice::from_ref(&t1)).is_empty());
        let t2 = Route::new(TaskId(2), vec![Slot::Empty, s(1), Slot::Empty, Slot::Empty]);
        assert_eq!(replay_targets(&current, &[t1, t2]), BTreeSet::from([TaskId(1), TaskId(2)]));
    }

    #[test]
    fn replay_counts_round_the_ratio() {
        assert_eq!(replay_count(0.2, 100), 20);
        assert_eq!(replay_count(0.2, 256), 51);
        assert_eq!(replay_count(0.0, 256), 0);
        let a = ids(1);
        let r = Route::new(TaskId(2), vec![Slot::Adapter(a[0])]);
        let p = Route::new(TaskId(1), vec![Slot::Adapter(a[0])]);
        let cfg = TuneConfig {
            replay_ratio: 0.0,
            ..TuneConfig::default()
        };
        assert!(ReplayPlan::new(&r, &[p], 100, &cfg).targets.is_empty());
    }

    fn trace_of(tape: &mut Tape, states: &[Vec<f64>], d: usize) -> HiddenTrace {
        let rows = states[0].len() / d;
        HiddenTrace {
            states: states
                .iter()
                .map(|s| tape.constant(vec![1, rows, d], s.clone()).unwrap())
                .collect(),
        }
    }

    #[test]
    fn layerwise_contract() {
        let a = ids(2);
        let mut tape = Tape::new();
        let h = vec![3.0, -1.0, 2.0, 2.0, 2.0, 1.0];
        let trace = trace_of(&mut tape, &[h.clone(), h.clone(), h.clone()], 3);
        let valid = [true, true];
        let empty = Route::all_empty(TaskId(1), 2);
        let z = layerwise_loss(&mut tape, &trace, &empty, &valid).unwrap();
        assert_eq!(tape.scalar(z), 0.0);
        let full = Route::new(TaskId(1), vec![Slot::Adapter(a[0]), Slot::Adapter(a[1])]);
        let two = layerwise_loss(&mut tape, &trace, &full, &valid).unwrap();
        assert!((tape.scalar(two) - 2.0).abs() < 1e-8);

        let ortho = trace_of(&mut tape, &[vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]], 3);
        let one = Route::new(TaskId(1), vec![Slot::Adapter(a[0])]);
        let o = layerwise_loss(&mut tape, &ortho, &one, &valid).unwrap();
        assert_eq!(tape.scalar(o), 0.0);
    }

    #[test]
    fn layerwise_ignores_padding_rows() {
        let a = ids(1);
        let mut tape = Tape::new();
        let trace = trace_of(&mut tape, &[vec![1.0, 0.0, 1.0, 0.0], vec![1.0, 0.0, -1.0, 0.0]], 2);
        let one = Route::new(TaskId(1), vec![Slot::Adapter(a[0])]);
        let v = layerwise_loss(&mut tape, &trace, &one, &[true, false]).unwrap();
        assert!((tape.scalar(v) - 1.0).abs() < 1e-8);
        let v = layerwise_loss(&mut tape, &trace, &one, &[true, true]).unwrap();
        assert!(tape.scalar(v).abs() < 1e-12);
    }

    #[test]
    fn pseudo_samples_have_exact_count_and_format() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            max_seq: 16,
            bottleneck: 4,
            ..ModelConfig::default()
        };
        let mut m = Model::new(cfg, Vocab::default(), &mut rng).unwrap();
        let id = m.store.new_adapter(0, TaskId(1), &mut rng);
        m.store
            .register_route(Route::new(TaskId(1), vec![Slot::Adapter(id), Slot::Empty]), 2)
            .unwrap();
        // An untrained model almost never emits the format; the contract is
        // "exactly count or nothing".
        let s = generate_pseudo_samples(&m, TaskId(1), 6, Sampling::TopK { k: 75, temperature: 1.0 }, &mut rng).unwrap();
        assert!(s.is_empty() || s.len() == 6);
        for x in &s {
            assert_eq!(x.task, TaskId(1));
        }
        assert!(generate_pseudo_samples(&m, TaskId(1), 0, Sampling::Greedy, &mut rng).unwrap().is_empty());
    }
}
