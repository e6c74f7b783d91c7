//! Per-layer choice between the empty adapter, reusing a prior adapter and
//! keeping a fresh one: warmup, softmax-weighted fusion search, argmax
//! selection.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{unique_adapters_at_layer, AdapterId, Route, Slot, TaskId};
use crate::backbone::{Forward, HiddenTrace, Model, TokenBatch, Trainable};
use crate::batch::{encode_refs, lm_objective, minibatches};
use crate::error::{Error, Result};
use crate::tasks::Sample;
use crate::tensor::{AdamW, Tape, Tensor, Var};
use crate::training::{apply_gradients, ensure_finite};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecisionConfig {
    /// Sparse factor: initial logit of the empty candidate.
    pub alpha: f64,
    /// Reuse factor: initial logit of reused candidates; the new adapter
    /// starts at its negation.
    pub beta: f64,
    /// Reject `alpha <= beta` or `beta <= 0`.
    pub strict: bool,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub lr: f64,
    /// Step size for the fusion logits.
    pub arch_lr: f64,
    pub batch_size: usize,
    pub w_gen: f64,
    /// Offer the empty adapter as a candidate.
    pub allow_empty: bool,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig {
            alpha: 0.11,
            beta: 0.08,
            strict: true,
            warmup_epochs: 3,
            search_epochs: 3,
            lr: 1e-2,
            arch_lr: 1e-2,
            batch_size: 8,
            w_gen: 0.25,
            allow_empty: true,
        }
    }
}

/// Initial fusion logits `{alpha, beta x k, -beta}`.
pub fn init_logits(k: usize, alpha: f64, beta: f64, strict: bool) -> Result<Vec<f64>> {
    if strict && !(alpha > beta && beta > 0.0) {
        return Err(Error::Config(format!(
            "sparse factor {alpha} and reuse factor {beta} must satisfy alpha > beta > 0"
        )));
    }
    let mut z = Vec::with_capacity(k + 2);
    z.push(alpha);
    z.extend(std::iter::repeat_n(beta, k));
    z.push(-beta);
    Ok(z)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Initial fusion weights over `[empty, k reused, new]`.
pub fn init_lambda(k: usize, alpha: f64, beta: f64, strict: bool) -> Result<Vec<f64>> {
    init_logits(k, alpha, beta, strict).map(|z| softmax(&z))
}

/// `[Empty] + prior adapters at this layer in first-use order + [new]`.
/// Without the empty candidate the list starts at the reused adapters.
pub fn build_candidates(layer: usize, prior: &[Route], new: AdapterId, allow_empty: bool) -> Vec<Slot> {
    let mut c = Vec::new();
    if allow_empty {
        c.push(Slot::Empty);
    }
    c.extend(unique_adapters_at_layer(layer, prior).into_iter().map(Slot::Adapter));
    c.push(Slot::Adapter(new));
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFusion {
    pub candidates: Vec<Slot>,
    /// `None` on layers exempt from search.
    pub logits: Option<Tensor>,
    pub init_lambda: Option<Vec<f64>>,
}

impl LayerFusion {
    pub fn new_adapter(&self) -> AdapterId {
        self.candidates
            .last()
            .and_then(|s| s.adapter())
            .expect("candidate list ends with the new adapter")
    }

    pub fn lambda(&self) -> Option<Vec<f64>> {
        self.logits.as_ref().map(|z| softmax(z.data()))
    }
}

/// Fusion search state for one incoming task. Discarded after selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionState {
    pub task: TaskId,
    pub layers: Vec<LayerFusion>,
}

impl FusionState {
    /// `fresh` must hold one new adapter per layer; `no_as` lists
    /// zero-based layers exempt from search.
    pub fn new(fresh: &Route, prior: &[Route], no_as: &BTreeSet<usize>, cfg: &DecisionConfig) -> Result<Self> {
        let layers = fresh
            .slots
            .iter()
            .enumerate()
            .map(|(l, slot)| {
                let new = slot
                    .adapter()
                    .ok_or_else(|| Error::contract(format!("fresh route has no adapter at layer {}", l + 1)))?;
                let candidates = build_candidates(l, prior, new, cfg.allow_empty);
                if no_as.contains(&l) {
                    return Ok(LayerFusion {
                        candidates,
                        logits: None,
                        init_lambda: None,
                    });
                }
                let k = unique_adapters_at_layer(l, prior).len();
                let mut z = init_logits(k, cfg.alpha, cfg.beta, cfg.strict)?;
                if !cfg.allow_empty {
                    z.remove(0);
                }
                let lambda = softmax(&z);
                Ok(LayerFusion {
                    candidates,
                    logits: Some(Tensor::from_vec(z)),
                    init_lambda: Some(lambda),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionState {
            task: fresh.task,
            layers,
        })
    }

    pub fn new_adapters(&self) -> Vec<AdapterId> {
        self.layers.iter().map(LayerFusion::new_adapter).collect()
    }

    /// Route of the fresh adapters at every layer.
    pub fn fresh_route(&self) -> Route {
        Route::new(self.task, self.new_adapters().into_iter().map(Slot::Adapter).collect())
    }
}

/// Forward pass where every searched layer mixes its candidates with
/// `softmax(z)` and every exempt layer routes through its new adapter.
/// Returns the forward and the tape handles of each layer's logits.
pub fn fused_forward(
    model: &Model,
    tape: &mut Tape,
    batch: &TokenBatch,
    state: &FusionState,
    trainable: &Trainable,
) -> Result<(Forward, Vec<Option<Var>>)> {
    if state.layers.len() != model.layers() {
        return Err(Error::Routing(format!(
            "fusion state has {} layers, model has {}",
            state.layers.len(),
            model.layers()
        )));
    }
    let bb = model.backbone.bind(tape, trainable.backbone);
    let mut h = bb.embed(tape, batch)?;
    let mut states = vec![h];
    let mut logit_vars = Vec::with_capacity(state.layers.len());
    for (l, fusion) in state.layers.iter().enumerate() {
        let f = bb.forward_layer(tape, l, h)?;
        let train = |slot: Slot| slot.adapter().is_some_and(|id| trainable.adapter(id));
        match &fusion.logits {
            None => {
                let slot = Slot::Adapter(fusion.new_adapter());
                h = model.store.apply_adapter(tape, slot, f, train(slot))?;
                logit_vars.push(None);
            }
            Some(z) => {
                let zv = tape.bind(z);
                let lambda = tape.softmax(zv);
                if let Some(bad) = tape.value(lambda).iter().find(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        layer: l + 1,
                        detail: format!("fusion weight {bad}"),
                    });
                }
                let mut acc: Option<Var> = None;
                for (c, &slot) in fusion.candidates.iter().enumerate() {
                    let out = model.store.apply_adapter(tape, slot, f, train(slot))?;
                    let w = tape.select(lambda, c)?;
                    let term = tape.scale_by(out, w)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.add(a, term)?,
                    });
                }
                h = acc.expect("at least one candidate");
                logit_vars.push(Some(zv));
            }
        }
        states.push(h);
    }
    let logits = bb.logits(tape, h)?;
    Ok((
        Forward {
            logits,
            trace: HiddenTrace { states },
        },
        logit_vars,
    ))
}

fn require_data(data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        Err(Error::contract("training data is empty"))
    } else {
        Ok(())
    }
}

/// Trains the fresh adapters of `route` with hard routing. Prior adapters
/// and the backbone are untouched. Returns the mean loss per epoch.
pub fn warmup<R: Rng + ?Sized>(
    model: &mut Model,
    data: &[Sample],
    route: &Route,
    cfg: &DecisionConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    require_data(data)?;
    let trainable = Trainable::adapters(route.adapter_ids());
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let vocab = model.vocab;
    let mut losses = Vec::with_capacity(cfg.warmup_epochs);
    for _ in 0..cfg.warmup_epochs {
        let mut total = 0.0;
        let batches = minibatches(data, cfg.batch_size, rng);
        let n = batches.len();
        for mb in batches {
            let batch = encode_refs(&mb, &vocab)?;
            let mut tape = Tape::new();
            let fwd = model.forward_with_route(&mut tape, &batch.inputs, route, &trainable)?;
            let loss = lm_objective(&mut tape, fwd.logits, &batch, cfg.w_gen)?;
            let value = tape.scalar(loss);
            ensure_finite(value, opt.steps() as usize)?;
            total += value;
            let grads = tape.backward(loss)?;
            apply_gradients(model, &grads, &trainable, &mut opt)?;
        }
        losses.push(total / n as f64);
    }
    Ok(losses)
}

/// Jointly trains the fusion logits and the fresh adapters through
/// [`fused_forward`]. Prior adapters and the backbone stay frozen.
pub fn run_architecture_search<R: Rng + ?Sized>(
    model: &mut Model,
    data: &[Sample],
    mut state: FusionState,
    cfg: &DecisionConfig,
    rng: &mut R,
) -> Result<FusionState> {
    require_data(data)?;
    let trainable = Trainable::adapters(state.new_adapters());
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let mut arch_opt = AdamW::new(cfg.arch_lr, 0.0);
    let vocab = model.vocab;
    for _ in 0..cfg.search_epochs {
        for mb in minibatches(data, cfg.batch_size, rng) {
            let batch = encode_refs(&mb, &vocab)?;
            let mut tape = Tape::new();
            let (fwd, zvars) = fused_forward(model, &mut tape, &batch.inputs, &state, &trainable)?;
            let loss = lm_objective(&mut tape, fwd.logits, &batch, cfg.w_gen)?;
            ensure_finite(tape.scalar(loss), opt.steps() as usize)?;
            let grads = tape.backward(loss)?;
            apply_gradients(model, &grads, &trainable, &mut opt)?;
            let mut logits: Vec<&mut Tensor> = Vec::new();
            for (layer, zv) in state.layers.iter_mut().zip(&zvars) {
                if let (Some(z), Some(_)) = (layer.logits.as_mut(), zv) {
                    z.zero_grad();
                    grads.accumulate_into(z);
                    logits.push(z);
                }
            }
            if !logits.is_empty() {
                arch_opt.step(&mut logits)?;
            }
        }
    }
    Ok(state)
}

/// Argmax per searched layer; ties go to the earliest candidate, i.e.
/// empty, then earlier reused adapters, then new. Exempt layers keep their
/// new adapter.
pub fn select_route(state: &FusionState) -> Route {
    let slots = state
        .layers
        .iter()
        .map(|layer| match layer.lambda() {
            None => Slot::Adapter(layer.new_adapter()),
            Some(lambda) => layer.candidates[crate::backbone::argmax(&lambda)],
        })
        .collect();
    Route::new(state.task, slots)
}

/// Registers the selected route and drops fresh adapters it left unused.
pub fn commit_route(model: &mut Model, route: Route) -> Result<Vec<AdapterId>> {
    let layers = model.layers();
    model.store.register_route(route, layers)?;
    Ok(model.store.remove_unreferenced())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Empty,
    Reuse,
    New,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Empty => "empty",
            Selection::Reuse => "reuse",
            Selection::New => "new",
        }
    }
}

/// One row of the decision log. `layer` is one-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub task: TaskId,
    pub layer: usize,
    pub candidates: Vec<Slot>,
    pub init_lambda: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub selected: Slot,
    pub kind: Selection,
}

pub fn decision_records(state: &FusionState, route: &Route) -> Vec<DecisionRecord> {
    state
        .layers
        .iter()
        .zip(&route.slots)
        .enumerate()
        .map(|(l, (layer, &selected))| {
            let kind = match selected {
                Slot::Empty => Selection::Empty,
                Slot::Adapter(id) if id == layer.new_adapter() => Selection::New,
                Slot::Adapter(_) => Selection::Reuse,
            };
            DecisionRecord {
                task: state.task,
                layer: l + 1,
                candidates: layer.candidates.clone(),
                init_lambda: layer.init_lambda.clone(),
                lambda: layer.lambda(),
                selected,
                kind,
            }
        })
        .collect()
}

/// Records for a route chosen without search (all candidates fresh).
pub fn fixed_records(route: &Route, fresh: &BTreeSet<AdapterId>) -> Vec<DecisionRecord> {
    route
        .slots
        .iter()
        .enumerate()
        .map(|(l, &slot)| DecisionRecord {
            task: route.task,
            layer: l + 1,
            candidates: vec![slot],
            init_lambda: None,
            lambda: None,
            selected: slot,
            kind: match slot {
                Slot::Empty => Selection::Empty,
                Slot::Adapter(id) if fresh.contains(&id) => Selection::New,
                Slot::Adapter(_) => Selection::Reuse,
            },
        })
        .collect()
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join("|")
}

pub const DECISION_LOG_HEADER: &str = "task,layer,candidates,lambda_init,lambda_final,selected,kind";

/// CSV with `|`-joined candidate and weight lists; exempt layers leave the
/// weight columns empty.
pub fn decision_log_csv(records: &[DecisionRecord]) -> String {
    let mut out = String::from(DECISION_LOG_HEADER);
    out.push('\n');
    for r in records {
        let weights = |w: &Option<Vec<f64>>| w.as_ref().map(|v| join(v, |x| format!("{x}"))).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.task.0,
            r.layer,
            join(&r.candidates, Slot::to_string),
            weights(&r.init_lambda),
            weights(&r.lambda),
            r.selected,
            r.kind.as_str()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::TaskId;
    use crate::backbone::ModelConfig;
    use crate::tasks::Vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: f64 = 0.11;
    const B: f64 = 0.08;

    #[test]
    fn symmetric_two_way_split() {
        let l = init_lambda(0, 0.0, 0.0, false).unwrap();
        assert_eq!(l, vec![0.5, 0.5]);
    }

    #[test]
    fn reference_weights_for_one_and_two_priors() {
        let l1 = init_lambda(1, A, B, true).unwrap();
        for (a, b) in l1.iter().zip([0.3575, 0.3469, 0.2956]) {
            assert!((a - b).abs() < 5e-5, "{l1:?}");
        }
        let l2 = init_lambda(2, A, B, true).unwrap();
        for (a, b) in l2.iter().zip([0.2654, 0.2576, 0.2576, 0.2195]) {
            assert!((a - b).abs() < 5e-5, "{l2:?}");
        }
    }

    #[test]
    fn strict_mode_rejects_inverted_factors() {
        assert!(matches!(init_lambda(1, 0.05, 0.08, true), Err(Error::Config(_))));
        assert!(init_lambda(1, 0.05, 0.08, false).is_ok());
    }

    #[test]
    fn softmax_of_logits_is_shift_invariant() {
        let z = init_logits(3, A, B, true).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.5).collect();
        let (a, b) = (softmax(&z), softmax(&shifted));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    fn ids(n: usize) -> Vec<AdapterId> {
        let mut m = Model::new(ModelConfig::default(), Vocab::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (0..n).map(|_| m.store.new_adapter(0, TaskId(1), &mut ChaCha8Rng::seed_from_u64(1))).collect()
    }

    #[test]
    fn candidate_lists() {
        let a = ids(4);
        assert_eq!(build_candidates(0, &[], a[3], true), vec![Slot::Empty, Slot::Adapter(a[3])]);
        let prior = vec![
            Route::new(TaskId(1), vec![Slot::Adapter(a[1])]),
            Route::new(TaskId(2), vec![Slot::Adapter(a[0])]),
            Route::new(TaskId(3), vec![Slot::Adapter(a[1])]),
        ];
        let c = build_candidates(0, &prior, a[3], true);
        assert_eq!(c, vec![Slot::Empty, Slot::Adapter(a[1]), Slot::Adapter(a[0]), Slot::Adapter(a[3])]);
        let c = build_candidates(0, &prior, a[3], false);
        assert_eq!(c.first(), Some(&Slot::Adapter(a[1])));
    }

    fn state_with(lambdas: Vec<Vec<f64>>, cands: Vec<Vec<Slot>>) -> FusionState {
        FusionState {
            task: TaskId(2),
            layers: lambdas
                .into_iter()
                .zip(cands)
                .map(|(lam, candidates)| LayerFusion {
                    logits: (!lam.is_empty()).then(|| Tensor::from_vec(lam.iter().map(|p| p.ln()).collect())),
                    init_lambda: None,
                    candidates,
                })
                .collect(),
        }
    }

    #[test]
    fn selection_argmax_ties_and_exempt_layers() {
        let a = ids(3);
        let (e, mu, new) = (Slot::Empty, Slot::Adapter(a[0]), Slot::Adapter(a[1]));
        let s = state_with(
            vec![vec![0.40, 0.35, 0.25], vec![0.5, 0.5], vec![], vec![0.2, 0.3, 0.5]],
            vec![vec![e, mu, new], vec![e, new], vec![e, new], vec![e, mu, new]],
        );
        let r = select_route(&s);
        assert_eq!(r.slots, vec![e, e, new, new]);
        let rec = decision_records(&s, &r);
        let kinds: Vec<_> = rec.iter().map(|r| r.kind).collect();
        assert_eq!(kinds, vec![Selection::Empty, Selection::Empty, Selection::New, Selection::New]);
    }

    #[test]
    fn decision_log_layout() {
        let a = ids(2);
        let s = state_with(vec![vec![0.25, 0.75], vec![]], vec![
            vec![Slot::Empty, Slot::Adapter(a[1])],
            vec![Slot::Empty, Slot::Adapter(a[1])],
        ]);
        let csv = decision_log_csv(&decision_records(&s, &select_route(&s)));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], DECISION_LOG_HEADER);
        assert!(lines[1].starts_with("2,1,E|A1,,0.2"), "{}", lines[1]);
        assert!(lines[1].ends_with(",A1,new"), "{}", lines[1]);
        assert_eq!(lines[2], "2,2,E|A1,,,A1,new");
    }
}
