//! Bottleneck adapters, their identities, and per-task routes.
//!
//! Adapters are shared by identity: two routes that name the same
//! [`AdapterId`] at a layer run the very same weights, so training the
//! adapter for one task changes the forward pass of every task routed
//! through it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Std-dev of the down-projection at creation. The up-projection starts at
/// zero, so a fresh adapter is exactly the identity.
pub const ADAPTER_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdapterId(u64);

impl AdapterId {
    pub fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}", self.0)
    }
}

/// One layer's entry in a route: the identity mapping or a stored adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    Empty,
    Adapter(AdapterId),
}

impl Slot {
    pub fn adapter(self) -> Option<AdapterId> {
        match self {
            Slot::Empty => None,
            Slot::Adapter(id) => Some(id),
        }
    }

    pub fn is_empty(self) -> bool {
        matches!(self, Slot::Empty)
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Empty => f.write_str("E"),
            Slot::Adapter(id) => id.fmt(f),
        }
    }
}

/// A task's per-layer adapter assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub task: TaskId,
    pub slots: Vec<Slot>,
}

impl Route {
    pub fn new(task: TaskId, slots: Vec<Slot>) -> Self {
        Route { task, slots }
    }

    pub fn all_empty(task: TaskId, layers: usize) -> Self {
        Route::new(task, vec![Slot::Empty; layers])
    }

    pub fn layers(&self) -> usize {
        self.slots.len()
    }

    pub fn adapter_ids(&self) -> impl Iterator<Item = AdapterId> + '_ {
        self.slots.iter().filter_map(|s| s.adapter())
    }

    pub fn shares_adapter_with(&self, other: &Route) -> bool {
        let mine: BTreeSet<_> = self.adapter_ids().collect();
        other.adapter_ids().any(|id| mine.contains(&id))
    }
}

/// Residual bottleneck: x + up(gelu(down(x))).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub down_w: Tensor,
    pub down_b: Tensor,
    pub up_w: Tensor,
    pub up_b: Tensor,
}

impl Adapter {
    pub fn new<R: Rng + ?Sized>(hidden: usize, bottleneck: usize, rng: &mut R) -> Self {
        Adapter {
            down_w: Tensor::randn(&[hidden, bottleneck], ADAPTER_INIT_STD, rng),
            down_b: Tensor::zeros(&[bottleneck]),
            up_w: Tensor::zeros(&[bottleneck, hidden]),
            up_b: Tensor::zeros(&[hidden]),
        }
    }

    pub fn param_count(hidden: usize, bottleneck: usize) -> usize {
        2 * hidden * bottleneck + bottleneck + hidden
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.down_w, &self.down_b, &self.up_w, &self.up_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.down_w, &mut self.down_b, &mut self.up_w, &mut self.up_b]
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        let bind = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.bind(t)
            } else {
                tape.bind_frozen(t)
            }
        };
        let (dw, db) = (bind(tape, &self.down_w), bind(tape, &self.down_b));
        let (uw, ub) = (bind(tape, &self.up_w), bind(tape, &self.up_b));
        let h = tape.matmul(x, dw)?;
        let h = tape.add_bias(h, db)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, uw)?;
        let h = tape.add_bias(h, ub)?;
        tape.add(x, h)
    }

    pub fn absorb(&mut self, grads: &Gradients) {
        for t in self.tensors_mut() {
            grads.accumulate_into(t);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    /// Zero-based layer index the adapter was created for.
    pub layer: usize,
    pub task: TaskId,
    pub adapter: Adapter,
}

/// Owner of every adapter and the registry of task routes in arrival order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterStore {
    hidden: usize,
    bottleneck: usize,
    next_id: u64,
    adapters: BTreeMap<AdapterId, AdapterEntry>,
    routes: Vec<Route>,
}

impl AdapterStore {
    pub fn new(hidden: usize, bottleneck: usize) -> Self {
        AdapterStore {
            hidden,
            bottleneck,
            next_id: 0,
            adapters: BTreeMap::new(),
            routes: Vec::new(),
        }
    }

    /// Creates a fresh near-identity adapter. Ids are never reused.
    pub fn new_adapter<R: Rng + ?Sized>(&mut self, layer: usize, task: TaskId, rng: &mut R) -> AdapterId {
        let id = AdapterId(self.next_id);
        self.next_id += 1;
        let adapter = Adapter::new(self.hidden, self.bottleneck, rng);
        self.adapters.insert(id, AdapterEntry { layer, task, adapter });
        id
    }

    pub fn contains(&self, id: AdapterId) -> bool {
        self.adapters.contains_key(&id)
    }

    pub fn entry(&self, id: AdapterId) -> Result<&AdapterEntry> {
        self.adapters
            .get(&id)
            .ok_or_else(|| Error::Routing(format!("unknown adapter {id}")))
    }

    pub fn get(&self, id: AdapterId) -> Result<&Adapter> {
        self.entry(id).map(|e| &e.adapter)
    }

    pub fn get_mut(&mut self, id: AdapterId) -> Result<&mut Adapter> {
        self.adapters
            .get_mut(&id)
            .map(|e| &mut e.adapter)
            .ok_or_else(|| Error::Routing(format!("unknown adapter {id}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = AdapterId> + '_ {
        self.adapters.keys().copied()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (AdapterId, &mut Adapter)> + '_ {
        self.adapters.iter_mut().map(|(id, e)| (*id, &mut e.adapter))
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    /// Applies the adapter named by `slot`. `Slot::Empty` returns `x`
    /// itself, so the identity path is bit-exact.
    pub fn apply_adapter(&self, tape: &mut Tape, slot: Slot, x: Var, trainable: bool) -> Result<Var> {
        match slot {
            Slot::Empty => Ok(x),
            Slot::Adapter(id) => self.get(id)?.apply(tape, x, trainable),
        }
    }

    pub fn validate_route(&self, route: &Route, layers: usize) -> Result<()> {
        if route.layers() != layers {
            return Err(Error::Routing(format!(
                "route for {} has {} entries, model has {layers} layers",
                route.task,
                route.layers()
            )));
        }
        if let Some(id) = route.adapter_ids().find(|id| !self.contains(*id)) {
            return Err(Error::Routing(format!(
                "route for {} references missing adapter {id}",
                route.task
            )));
        }
        Ok(())
    }

    /// Records the route for a task, replacing an earlier one for the same task.
    pub fn register_route(&mut self, route: Route, layers: usize) -> Result<()> {
        self.validate_route(&route, layers)?;
        match self.routes.iter_mut().find(|r| r.task == route.task) {
            Some(existing) => *existing = route,
            None => self.routes.push(route),
        }
        Ok(())
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn route_for(&self, task: TaskId) -> Result<&Route> {
        self.routes
            .iter()
            .find(|r| r.task == task)
            .ok_or_else(|| Error::Routing(format!("no route registered for {task}")))
    }

    /// Drops adapters that no registered route references, returning their ids.
    pub fn remove_unreferenced(&mut self) -> Vec<AdapterId> {
        let live: BTreeSet<AdapterId> = self.routes.iter().flat_map(|r| r.adapter_ids()).collect();
        let dead: Vec<AdapterId> = self.adapters.keys().filter(|id| !live.contains(id)).copied().collect();
        for id in &dead {
            self.adapters.remove(id);
        }
        dead
    }

    pub fn remove(&mut self, id: AdapterId) -> Option<AdapterEntry> {
        self.adapters.remove(&id)
    }
}

/// Distinct non-empty adapters used at `layer` by `prior` routes, in order
/// of first use.
pub fn unique_adapters_at_layer(layer: usize, prior: &[Route]) -> Vec<AdapterId> {
    let mut seen = BTreeSet::new();
    prior
        .iter()
        .filter_map(|r| r.slots.get(layer).and_then(|s| s.adapter()))
        .filter(|id| seen.insert(*id))
        .collect()
}

/// Parameters a method has to learn: every distinct adapter referenced by
/// any route counted once, plus the backbone when it is trainable.
pub fn count_learnable_params(routes: &[Route], store: &AdapterStore, backbone_params: Option<usize>) -> Result<usize> {
    let distinct: BTreeSet<AdapterId> = routes.iter().flat_map(|r| r.adapter_ids()).collect();
    let mut total = backbone_params.unwrap_or(0);
    for id in distinct {
        total += store.get(id)?.num_params();
    }
    Ok(total)
}
