//! Optimizer plumbing shared by every stage, and generic backbone
//! pretraining.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{Route, TaskId};
use crate::backbone::{Model, Trainable};
use crate::batch::{lm_objective, EncodedBatch};
use crate::error::{Error, Result};
use crate::tasks::{Sample, Vocab};
use crate::tensor::{AdamW, Gradients, Tape};

/// Zeroes every trainable gradient slot, absorbs `grads` and applies one
/// optimizer step.
pub fn apply_gradients(model: &mut Model, grads: &Gradients, trainable: &Trainable, opt: &mut AdamW) -> Result<()> {
    for p in model.trainable_tensors(trainable)? {
        p.zero_grad();
    }
    model.absorb(grads, trainable)?;
    let mut params = model.trainable_tensors(trainable)?;
    opt.step(&mut params)
}

pub fn ensure_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

/// Generic pretraining that stands in for a pretrained language model: the
/// backbone sees every content token and the sample format before any task
/// arrives. Answers map each input token through one fixed random
/// permutation of the content vocabulary, so the backbone has to align
/// answer positions with input positions rather than match repeated tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corpus {
    /// `y` is `x` mapped through a fixed permutation.
    Permutation,
    /// `y` equals `x`.
    Copy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub corpus: Corpus,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub w_gen: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            corpus: Corpus::Permutation,
            steps: 6000,
            lr: 3e-3,
            batch_size: 16,
            min_len: 3,
            max_len: 6,
            w_gen: 0.25,
            seed: 0,
        }
    }
}

/// Content-token permutation with no fixed point.
fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, v)| i != *v) {
            return p;
        }
    }
}

fn pretrain_sample<R: Rng + ?Sized>(vocab: &Vocab, cfg: &PretrainConfig, perm: &[usize], rng: &mut R) -> Sample {
    let n = rng.random_range(cfg.min_len..=cfg.max_len);
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab.content)).collect();
    Sample {
        task: TaskId(rng.random_range(1..=vocab.max_tasks as u32)),
        x: idx.iter().map(|&i| vocab.content_token(i)).collect(),
        y: idx.iter().map(|&i| vocab.content_token(perm[i])).collect(),
    }
}

/// Trains the backbone alone (no adapters) on freshly drawn samples over
/// the whole content vocabulary, under every task token. Returns the mean
/// loss of the final tenth of the steps.
pub fn pretrain_backbone(model: &mut Model, cfg: &PretrainConfig) -> Result<f64> {
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.batch_size == 0 {
        return Err(Error::Config("invalid pretraining lengths or batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = model.vocab;
    let perm = match cfg.corpus {
        Corpus::Permutation => derangement(vocab.content, &mut rng),
        Corpus::Copy => (0..vocab.content).collect(),
    };
    let route = Route::all_empty(TaskId(1), model.layers());
    let trainable = Trainable::frozen().with_backbone(true);
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let tail = (cfg.steps / 10).max(1);
    let mut tail_loss = 0.0;
    for step in 0..cfg.steps {
        let samples: Vec<Sample> = (0..cfg.batch_size).map(|_| pretrain_sample(&vocab, cfg, &perm, &mut rng)).collect();
        let batch = EncodedBatch::encode(&samples, &vocab)?;
        let mut tape = Tape::new();
        let fwd = model.forward_with_route(&mut tape, &batch.inputs, &route, &trainable)?;
        let loss = lm_objective(&mut tape, fwd.logits, &batch, cfg.w_gen)?;
        let value = tape.scalar(loss);
        ensure_finite(value, step)?;
        if step + tail >= cfg.steps {
            tail_loss += value;
        }
        let grads = tape.backward(loss)?;
        apply_gradients(model, &grads, &trainable, &mut opt)?;
        if step % 250 == 0 {
            log::debug!("pretrain step {step} loss {value:.4}");
        }
    }
    Ok(tail_loss / tail.min(cfg.steps.max(1)) as f64)
}
