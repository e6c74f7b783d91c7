//! Toy pre-norm decoder-only transformer with an adapter hook after every
//! block.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterId, AdapterStore, Route};
use crate::error::{Error, Result};
use crate::tasks::{Vocab, EOS, PAD};
use crate::tensor::{Gradients, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const FFN_MULT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub bottleneck: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            hidden: 32,
            heads: 2,
            vocab: Vocab::default().size(),
            max_seq: 32,
            bottleneck: 8,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.bottleneck == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form backbone parameter count.
    pub fn backbone_params(&self) -> usize {
        let (d, v, s, l) = (self.hidden, self.vocab, self.max_seq, self.layers);
        let f = FFN_MULT * d;
        let block = 2 * d          // ln1
            + d * 3 * d + 3 * d    // qkv
            + d * d + d            // attention out
            + 2 * d                // ln2
            + d * f + f            // fc
            + f * d + d; // proj
        v * d + s * d + l * block + 2 * d + d * v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    ln1_g: Tensor,
    ln1_b: Tensor,
    w_qkv: Tensor,
    b_qkv: Tensor,
    w_o: Tensor,
    b_o: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w_fc: Tensor,
    b_fc: Tensor,
    w_proj: Tensor,
    b_proj: Tensor,
}

impl Block {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let f = FFN_MULT * d;
        let resid_std = cfg.init_std / ((2 * cfg.layers) as f64).sqrt();
        Block {
            ln1_g: Tensor::filled(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            w_qkv: Tensor::randn(&[d, 3 * d], cfg.init_std, rng),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_o: Tensor::randn(&[d, d], resid_std, rng),
            b_o: Tensor::zeros(&[d]),
            ln2_g: Tensor::filled(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            w_fc: Tensor::randn(&[d, f], cfg.init_std, rng),
            b_fc: Tensor::zeros(&[f]),
            w_proj: Tensor::randn(&[f, d], resid_std, rng),
            b_proj: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_qkv, &self.b_qkv, &self.w_o, &self.b_o,
            &self.ln2_g, &self.ln2_b, &self.w_fc, &self.b_fc, &self.w_proj, &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.w_qkv, &mut self.b_qkv,
            &mut self.w_o, &mut self.b_o, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.w_fc, &mut self.b_fc, &mut self.w_proj, &mut self.b_proj,
        ]
    }
}

/// Weights of the shared transformer. Adapters live in the
/// [`AdapterStore`], not here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    config: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    w_out: Tensor,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        Ok(Backbone {
            tok_emb: Tensor::randn(&[config.vocab, d], config.init_std, rng),
            pos_emb: Tensor::randn(&[config.max_seq, d], config.init_std, rng),
            blocks: (0..config.layers).map(|_| Block::new(&config, rng)).collect(),
            lnf_g: Tensor::filled(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            w_out: Tensor::randn(&[d, config.vocab], config.init_std, rng),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([&self.lnf_g, &self.lnf_b, &self.w_out]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_out]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn absorb(&mut self, grads: &Gradients) {
        for t in self.tensors_mut() {
            grads.accumulate_into(t);
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBackbone {
        let mut b = |t: &Tensor| if trainable { tape.bind(t) } else { tape.bind_frozen(t) };
        let blocks = self
            .blocks
            .iter()
            .map(|blk| BoundBlock {
                ln1_g: b(&blk.ln1_g),
                ln1_b: b(&blk.ln1_b),
                w_qkv: b(&blk.w_qkv),
                b_qkv: b(&blk.b_qkv),
                w_o: b(&blk.w_o),
                b_o: b(&blk.b_o),
                ln2_g: b(&blk.ln2_g),
                ln2_b: b(&blk.ln2_b),
                w_fc: b(&blk.w_fc),
                b_fc: b(&blk.b_fc),
                w_proj: b(&blk.w_proj),
                b_proj: b(&blk.b_proj),
            })
            .collect();
        BoundBackbone {
            tok_emb: b(&self.tok_emb),
            pos_emb: b(&self.pos_emb),
            blocks,
            lnf_g: b(&self.lnf_g),
            lnf_b: b(&self.lnf_b),
            w_out: b(&self.w_out),
            hidden: self.config.hidden,
            heads: self.config.heads,
            max_seq: self.config.max_seq,
        }
    }
}

struct BoundBlock {
    ln1_g: Var,
    ln1_b: Var,
    w_qkv: Var,
    b_qkv: Var,
    w_o: Var,
    b_o: Var,
    ln2_g: Var,
    ln2_b: Var,
    w_fc: Var,
    b_fc: Var,
    w_proj: Var,
    b_proj: Var,
}

/// Backbone weights recorded on one tape.
pub struct BoundBackbone {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BoundBlock>,
    lnf_g: Var,
    lnf_b: Var,
    w_out: Var,
    hidden: usize,
    heads: usize,
    max_seq: usize,
}

/// Right-padded token ids, row-major `batch × seq`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        if rows.is_empty() || seq == 0 {
            return Err(Error::contract("empty token batch"));
        }
        let mut tokens = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            tokens.extend_from_slice(r);
            tokens.extend(std::iter::repeat_n(PAD, seq - r.len()));
        }
        Ok(TokenBatch {
            tokens,
            batch: rows.len(),
            seq,
        })
    }
}

impl BoundBackbone {
    /// Token plus positional embedding: the state entering layer 1.
    pub fn embed(&self, tape: &mut Tape, batch: &TokenBatch) -> Result<Var> {
        if batch.seq > self.max_seq {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_seq {}",
                batch.seq, self.max_seq
            )));
        }
        let d = self.hidden;
        let shape = vec![batch.batch, batch.seq, d];
        let tok = tape.embedding(self.tok_emb, &batch.tokens, shape.clone())?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let pos = tape.embedding(self.pos_emb, &positions, shape)?;
        tape.add(tok, pos)
    }

    /// Transformer block `layer` (zero-based) applied to `h` of shape
    /// `batch × seq × hidden`, before any adapter.
    pub fn forward_layer(&self, tape: &mut Tape, layer: usize, h: Var) -> Result<Var> {
        let blk = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::contract(format!("layer index {layer} out of range")))?;
        let shape = tape.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.hidden {
            return Err(Error::Shape {
                op: "forward_layer",
                lhs: shape,
                rhs: vec![self.hidden],
            });
        }
        let d = self.hidden;
        let dh = d / self.heads;

        let x = tape.layer_norm(h, blk.ln1_g, blk.ln1_b, LN_EPS)?;
        let qkv = tape.matmul(x, blk.w_qkv)?;
        let qkv = tape.add_bias(qkv, blk.b_qkv)?;
        let q = tape.slice_last(qkv, 0, d)?;
        let k = tape.slice_last(qkv, d, d)?;
        let v = tape.slice_last(qkv, 2 * d, d)?;
        let q = tape.split_heads(q, self.heads)?;
        let k = tape.split_heads(k, self.heads)?;
        let v = tape.split_heads(v, self.heads)?;
        let scores = tape.bmm_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.causal_softmax(scores)?;
        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.merge_heads(ctx, self.heads)?;
        let out = tape.matmul(ctx, blk.w_o)?;
        let out = tape.add_bias(out, blk.b_o)?;
        let h = tape.add(h, out)?;

        let x = tape.layer_norm(h, blk.ln2_g, blk.ln2_b, LN_EPS)?;
        let f = tape.matmul(x, blk.w_fc)?;
        let f = tape.add_bias(f, blk.b_fc)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, blk.w_proj)?;
        let f = tape.add_bias(f, blk.b_proj)?;
        tape.add(h, f)
    }

    pub fn logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let x = tape.layer_norm(h, self.lnf_g, self.lnf_b, LN_EPS)?;
        tape.matmul(x, self.w_out)
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }
}

/// Which parameters a forward pass records as trainable.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub adapters: BTreeSet<AdapterId>,
}

impl Trainable {
    pub fn frozen() -> Self {
        Trainable::default()
    }

    pub fn adapters(ids: impl IntoIterator<Item = AdapterId>) -> Self {
        Trainable {
            backbone: false,
            adapters: ids.into_iter().collect(),
        }
    }

    pub fn with_backbone(mut self, flag: bool) -> Self {
        self.backbone = flag;
        self
    }

    pub fn adapter(&self, id: AdapterId) -> bool {
        self.adapters.contains(&id)
    }
}

/// `states[0]` is the embedding output; `states[l]` is the post-adapter
/// state after layer `l`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HiddenTrace {
    pub states: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub trace: HiddenTrace,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

/// Backbone plus adapter store: everything a task's forward pass needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub vocab: Vocab,
    pub backbone: Backbone,
    pub store: AdapterStore,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        if config.vocab < vocab.size() {
            return Err(Error::Config(format!(
                "model vocabulary {} smaller than token layout {}",
                config.vocab,
                vocab.size()
            )));
        }
        let store = AdapterStore::new(config.hidden, config.bottleneck);
        Ok(Model {
            vocab,
            backbone: Backbone::new(config, rng)?,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.backbone.config()
    }

    pub fn layers(&self) -> usize {
        self.config().layers
    }

    /// Hard-routed forward: h^l = adapter_l(block_l(h^{l-1})).
    pub fn forward_with_route(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        route: &Route,
        trainable: &Trainable,
    ) -> Result<Forward> {
        self.store.validate_route(route, self.layers())?;
        let bb = self.backbone.bind(tape, trainable.backbone);
        let mut h = bb.embed(tape, batch)?;
        let mut states = vec![h];
        for (l, slot) in route.slots.iter().enumerate() {
            let f = bb.forward_layer(tape, l, h)?;
            let train = slot.adapter().is_some_and(|id| trainable.adapter(id));
            h = self.store.apply_adapter(tape, *slot, f, train)?;
            states.push(h);
        }
        let logits = bb.logits(tape, h)?;
        Ok(Forward {
            logits,
            trace: HiddenTrace { states },
        })
    }

    /// Forward without any adapter.
    pub fn forward_plain(&self, tape: &mut Tape, batch: &TokenBatch) -> Result<Var> {
        let bb = self.backbone.bind(tape, false);
        let mut h = bb.embed(tape, batch)?;
        for l in 0..bb.layers() {
            h = bb.forward_layer(tape, l, h)?;
        }
        bb.logits(tape, h)
    }

    /// Absorbs gradients into the backbone and every adapter in `trainable`.
    pub fn absorb(&mut self, grads: &Gradients, trainable: &Trainable) -> Result<()> {
        if trainable.backbone {
            self.backbone.absorb(grads);
        }
        for &id in &trainable.adapters {
            self.store.get_mut(id)?.absorb(grads);
        }
        Ok(())
    }

    /// Mutable handles to every trainable tensor, in a stable order.
    pub fn trainable_tensors(&mut self, trainable: &Trainable) -> Result<Vec<&mut Tensor>> {
        for &id in &trainable.adapters {
            self.store.get(id)?;
        }
        let mut out: Vec<&mut Tensor> = Vec::new();
        if trainable.backbone {
            out.extend(self.backbone.tensors_mut());
        }
        let Model { store, .. } = self;
        let mut pending: Vec<AdapterId> = trainable.adapters.iter().copied().collect();
        pending.sort();
        // BTreeMap iteration gives each adapter a disjoint &mut.
        for (id, adapter) in store.iter_mut() {
            if pending.binary_search(&id).is_ok() {
                out.extend(adapter.tensors_mut());
            }
        }
        Ok(out)
    }

    /// Autoregressive continuation of each prompt under `route`, stopping
    /// at EOS or at `max_len` total tokens. Returned sequences include the
    /// prompt.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        prompts: &[Vec<usize>],
        route: &Route,
        max_len: usize,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Vec<Vec<usize>>> {
        let max_len = max_len.min(self.config().max_seq);
        let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
        let mut active: Vec<usize> = (0..seqs.len())
            .filter(|&i| !seqs[i].is_empty() && seqs[i].len() < max_len && seqs[i].last() != Some(&EOS))
            .collect();
        for s in &mut seqs {
            s.truncate(max_len);
        }
        let vocab = self.config().vocab;
        while !active.is_empty() {
            let rows: Vec<Vec<usize>> = active.iter().map(|&i| seqs[i].clone()).collect();
            let batch = TokenBatch::from_rows(&rows)?;
            let mut tape = Tape::new();
            let fwd = self.forward_with_route(&mut tape, &batch, route, &Trainable::frozen())?;
            let logits = tape.value(fwd.logits);
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let pos = seqs[i].len() - 1;
                let at = (r * batch.seq + pos) * vocab;
                let next = pick_token(&logits[at..at + vocab], sampling, rng);
                seqs[i].push(next);
                if next != EOS && seqs[i].len() < max_len {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(seqs)
    }

    pub fn generate<R: Rng + ?Sized>(
        &self,
        prefix: &[usize],
        route: &Route,
        max_len: usize,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let mut out = self.decode(&[prefix.to_vec()], route, max_len, sampling, rng)?;
        Ok(out.pop().expect("one prompt in, one sequence out"))
    }
}

fn pick_token<R: Rng + ?Sized>(logits: &[f64], sampling: Sampling, rng: &mut R) -> usize {
    match sampling {
        Sampling::Greedy => argmax(logits),
        Sampling::TopK { k, temperature } => {
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            idx.truncate(k.max(1));
            let t = temperature.max(1e-6);
            let top = logits[idx[0]];
            let weights: Vec<f64> = idx.iter().map(|&i| ((logits[i] - top) / t).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (w, &i) in weights.iter().zip(&idx) {
                if u < *w {
                    return i;
                }
                u -= w;
            }
            *idx.last().expect("k >= 1")
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
