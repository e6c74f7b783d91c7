//! Teacher-forcing batches and the per-batch language-model objective.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::backbone::TokenBatch;
use crate::error::{Error, Result};
use crate::tasks::{Sample, Vocab, SEP};
use crate::tensor::{Tape, Var};

/// Inputs are `seq[..n-1]`, targets `seq[1..]`, right-padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedBatch {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
    /// Positions predicting `y` and the closing EOS.
    pub answer: Vec<bool>,
    /// Every non-padding position.
    pub valid: Vec<bool>,
}

impl EncodedBatch {
    pub fn encode(samples: &[Sample], vocab: &Vocab) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("cannot encode an empty batch"));
        }
        let seqs: Vec<Vec<usize>> = samples.iter().map(|s| s.sequence(vocab)).collect();
        let rows: Vec<Vec<usize>> = seqs.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
        let inputs = TokenBatch::from_rows(&rows)?;
        let t = inputs.seq;
        let n = inputs.batch * t;
        let mut targets = vec![0; n];
        let mut answer = vec![false; n];
        let mut valid = vec![false; n];
        for (r, seq) in seqs.iter().enumerate() {
            let sep = seq.iter().position(|&x| x == SEP).expect("sequence holds SEP");
            for p in 0..seq.len() - 1 {
                let i = r * t + p;
                targets[i] = seq[p + 1];
                valid[i] = true;
                answer[i] = p >= sep;
            }
        }
        Ok(EncodedBatch {
            inputs,
            targets,
            answer,
            valid,
        })
    }

    pub fn rows(&self) -> usize {
        self.inputs.batch
    }

    pub fn positions(&self) -> usize {
        self.inputs.batch * self.inputs.seq
    }
}

/// `CE(answer) + w_gen · CE(all positions)` on logits of shape
/// `batch × seq × vocab`.
pub fn lm_objective(tape: &mut Tape, logits: Var, batch: &EncodedBatch, w_gen: f64) -> Result<Var> {
    let v = *tape.shape(logits).last().expect("logits have a vocab axis");
    let flat = tape.reshape(logits, vec![batch.positions(), v])?;
    let task = tape.cross_entropy(flat, &batch.targets, &batch.answer)?;
    if w_gen == 0.0 {
        return Ok(task);
    }
    let gen = tape.cross_entropy(flat, &batch.targets, &batch.valid)?;
    let gen = tape.scale(gen, w_gen);
    tape.add(task, gen)
}

/// Shuffled minibatches of `samples`, the last one possibly short.
pub fn minibatches<'a, R: Rng + ?Sized>(samples: &'a [Sample], size: usize, rng: &mut R) -> Vec<Vec<&'a Sample>> {
    let mut order: Vec<&Sample> = samples.iter().collect();
    order.shuffle(rng);
    order.chunks(size.max(1)).map(<[&Sample]>::to_vec).collect()
}

pub fn encode_refs(samples: &[&Sample], vocab: &Vocab) -> Result<EncodedBatch> {
    let owned: Vec<Sample> = samples.iter().map(|s| (*s).clone()).collect();
    EncodedBatch::encode(&owned, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::TaskId;
    use crate::tasks::{EOS, PAD};

    fn sample(x: &[usize], y: &[usize]) -> Sample {
        Sample {
            task: TaskId(1),
            x: x.to_vec(),
            y: y.to_vec(),
        }
    }

    #[test]
    fn encode_shifts_and_masks() {
        let v = Vocab::default();
        let b = EncodedBatch::encode(&[sample(&[20, 21], &[30, 31]), sample(&[22], &[32])], &v).unwrap();
        // row 0: [T 20 21 SEP 30 31 EOS] -> inputs len 6
        assert_eq!(b.inputs.seq, 6);
        assert_eq!(&b.inputs.tokens[..6], &[3, 20, 21, SEP, 30, 31]);
        assert_eq!(&b.targets[..6], &[20, 21, SEP, 30, 31, EOS]);
        assert_eq!(&b.answer[..6], &[false, false, false, true, true, true]);
        // row 1: [T 22 SEP 32 EOS] -> 4 inputs then padding
        assert_eq!(&b.inputs.tokens[6..], &[3, 22, SEP, 32, PAD, PAD]);
        assert_eq!(&b.answer[6..], &[false, false, true, true, false, false]);
        assert_eq!(&b.valid[6..], &[true, true, true, true, false, false]);
    }

    #[test]
    fn minibatches_cover_every_sample_once() {
        use rand::SeedableRng;
        let v: Vec<Sample> = (0..19).map(|i| sample(&[20 + i], &[30])).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mb = minibatches(&v, 8, &mut rng);
        assert_eq!(mb.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8, 3]);
        let mut xs: Vec<usize> = mb.iter().flatten().map(|s| s.x[0]).collect();
        xs.sort();
        assert_eq!(xs, (20..39).collect::<Vec<_>>());
    }
}
