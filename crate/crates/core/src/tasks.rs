//! Synthetic task streams.
//!
//! Every pattern is a deterministic function of its input, so a sample is
//! either exactly right or wrong and accuracy is plain exact match.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::TaskId;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: usize = 3;

/// Token layout: PAD, SEP, EOS, then one token per task slot, then the
/// shared content tokens that domains are carved from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub content: usize,
    pub max_tasks: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            content: 64,
            max_tasks: 8,
        }
    }
}

impl Vocab {
    pub fn size(&self) -> usize {
        SPECIALS + self.max_tasks + self.content
    }

    pub fn task_token(&self, task: TaskId) -> usize {
        assert!(
            task.0 >= 1 && (task.0 as usize) <= self.max_tasks,
            "{task} outside the vocabulary's task slots"
        );
        SPECIALS + task.0 as usize - 1
    }

    pub fn task_of_token(&self, token: usize) -> Option<TaskId> {
        (SPECIALS..SPECIALS + self.max_tasks)
            .contains(&token)
            .then(|| TaskId((token - SPECIALS + 1) as u32))
    }

    pub fn content_token(&self, i: usize) -> usize {
        SPECIALS + self.max_tasks + i
    }

    pub fn is_content(&self, token: usize) -> bool {
        token >= SPECIALS + self.max_tasks && token < self.size()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub task: TaskId,
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

impl Sample {
    /// `task-token x SEP y EOS`.
    pub fn sequence(&self, vocab: &Vocab) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.x.len() + self.y.len() + 3);
        s.push(vocab.task_token(self.task));
        s.extend_from_slice(&self.x);
        s.push(SEP);
        s.extend_from_slice(&self.y);
        s.push(EOS);
        s
    }

    /// `task-token x SEP`, the prompt used for answering.
    pub fn prompt(&self, vocab: &Vocab) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.x.len() + 2);
        s.push(vocab.task_token(self.task));
        s.extend_from_slice(&self.x);
        s.push(SEP);
        s
    }

    pub fn encoded_len(&self) -> usize {
        self.x.len() + self.y.len() + 3
    }

    /// Parses a decoded `task-token x SEP y [EOS]` sequence. Returns `None`
    /// unless it starts with `task`'s token, holds exactly one SEP, and both
    /// halves are non-empty runs of content tokens.
    pub fn parse(tokens: &[usize], task: TaskId, vocab: &Vocab) -> Option<Sample> {
        let (&first, rest) = tokens.split_first()?;
        if first != vocab.task_token(task) {
            return None;
        }
        let body = match rest.iter().position(|&t| t == EOS) {
            Some(end) if end + 1 == rest.len() => &rest[..end],
            Some(_) => return None,
            None => return None,
        };
        let sep = body.iter().position(|&t| t == SEP)?;
        let (x, y) = (&body[..sep], &body[sep + 1..]);
        let ok = |part: &[usize]| !part.is_empty() && part.iter().all(|&t| vocab.is_content(t));
        (ok(x) && ok(y)).then(|| Sample {
            task,
            x: x.to_vec(),
            y: y.to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Verbalize,
    Copy,
    Reverse,
    Sort,
    ClassifyIntent,
    ExtractSlot,
}

impl Pattern {
    pub const ALL: [Pattern; 6] = [
        Pattern::Copy,
        Pattern::Reverse,
        Pattern::Sort,
        Pattern::ClassifyIntent,
        Pattern::ExtractSlot,
        Pattern::Verbalize,
    ];

    /// Computes the unique correct output for `x` over `domain`.
    pub fn apply(self, x: &[usize], domain: &[usize]) -> Option<Vec<usize>> {
        match self {
            Pattern::Copy => Some(x.to_vec()),
            Pattern::Reverse => Some(x.iter().rev().copied().collect()),
            Pattern::Sort => {
                let mut y = x.to_vec();
                y.sort_unstable();
                Some(y)
            }
            Pattern::Verbalize => {
                let half = domain.len() / 2;
                let (attrs, words) = domain.split_at(half);
                x.iter()
                    .map(|t| attrs.iter().position(|a| a == t).map(|i| words[i]))
                    .collect()
            }
            Pattern::ClassifyIntent => {
                let k = intent_keywords(domain.len());
                let (keywords, rest) = domain.split_at(k);
                let labels = &rest[..k];
                let mut hits = x.iter().filter_map(|t| keywords.iter().position(|kw| kw == t));
                match (hits.next(), hits.next()) {
                    (Some(i), None) => Some(vec![labels[i]]),
                    _ => None,
                }
            }
            Pattern::ExtractSlot => {
                let marker = domain[0];
                let mut at = x.iter().enumerate().filter(|(_, &t)| t == marker).map(|(i, _)| i);
                match (at.next(), at.next()) {
                    (Some(p), None) if p + 2 < x.len() => Some(x[p + 1..p + 3].to_vec()),
                    _ => None,
                }
            }
        }
    }

    fn draw_input(self, len: usize, domain: &[usize], rng: &mut impl Rng) -> Vec<usize> {
        let pick = |pool: &[usize], rng: &mut dyn rand::RngCore| pool[rng.random_range(0..pool.len())];
        match self {
            Pattern::Copy | Pattern::Reverse | Pattern::Sort => (0..len).map(|_| pick(domain, rng)).collect(),
            Pattern::Verbalize => {
                let attrs = &domain[..domain.len() / 2];
                (0..len).map(|_| pick(attrs, rng)).collect()
            }
            Pattern::ClassifyIntent => {
                let k = intent_keywords(domain.len());
                let fillers = &domain[2 * k..];
                let mut x: Vec<usize> = (0..len - 1).map(|_| pick(fillers, rng)).collect();
                let at = rng.random_range(0..len);
                x.insert(at, pick(&domain[..k], rng));
                x
            }
            Pattern::ExtractSlot => {
                let values = &domain[1..];
                let mut x: Vec<usize> = (0..len - 1).map(|_| pick(values, rng)).collect();
                let at = rng.random_range(0..len - 2);
                x.insert(at, domain[0]);
                x
            }
        }
    }

    fn min_domain(self) -> usize {
        match self {
            Pattern::Copy | Pattern::Reverse | Pattern::Sort => 2,
            Pattern::Verbalize => 4,
            Pattern::ClassifyIntent => 6,
            Pattern::ExtractSlot => 3,
        }
    }

    fn min_input_len(self) -> usize {
        match self {
            Pattern::ExtractSlot => 3,
            Pattern::ClassifyIntent => 2,
            _ => 1,
        }
    }
}

fn intent_keywords(domain: usize) -> usize {
    (domain / 4).max(1)
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant serializes");
        f.write_str(s.as_str().expect("string variant"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 256,
            valid: 64,
            test: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    pub pattern: Pattern,
    /// Content-token ids this task draws from.
    pub domain: Vec<usize>,
    pub sizes: SplitSizes,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Similar,
    Dissimilar,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Similar => "similar",
            Scenario::Dissimilar => "dissimilar",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similar" => Ok(Scenario::Similar),
            "dissimilar" => Ok(Scenario::Dissimilar),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Knobs shared by both stream builders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamOptions {
    pub vocab: Vocab,
    pub domain_size: usize,
    pub sizes: SplitSizes,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            vocab: Vocab::default(),
            domain_size: 12,
            sizes: SplitSizes::default(),
            min_len: 3,
            max_len: 6,
        }
    }
}

impl StreamOptions {
    /// Longest encoded sample any task in a stream built with these options
    /// can produce.
    pub fn max_sample_len(&self) -> usize {
        2 * self.max_len + 3
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stream {
    pub scenario: Scenario,
    pub seed: u64,
    /// Permutation of domain blocks (similar) or patterns (dissimilar)
    /// that produced this task order.
    pub order: Vec<usize>,
    pub vocab: Vocab,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskData {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn domain_blocks(n_tasks: usize, opts: &StreamOptions) -> Result<Vec<Vec<usize>>> {
    if n_tasks == 0 {
        return Err(Error::Config("a stream needs at least one task".into()));
    }
    if n_tasks > opts.vocab.max_tasks {
        return Err(Error::Config(format!(
            "{n_tasks} tasks exceed the {} task tokens in the vocabulary",
            opts.vocab.max_tasks
        )));
    }
    let blocks = opts.vocab.content / opts.domain_size.max(1);
    if blocks < n_tasks {
        return Err(Error::Config(format!(
            "vocabulary exhausted: {n_tasks} disjoint domains of {} tokens need {} content tokens, have {}",
            opts.domain_size,
            n_tasks * opts.domain_size,
            opts.vocab.content
        )));
    }
    Ok((0..blocks)
        .map(|b| {
            (0..opts.domain_size)
                .map(|i| opts.vocab.content_token(b * opts.domain_size + i))
                .collect()
        })
        .collect())
}

fn validate_options(opts: &StreamOptions, patterns: &[Pattern]) -> Result<()> {
    if opts.sizes.train == 0 || opts.sizes.valid == 0 || opts.sizes.test == 0 {
        return Err(Error::Config("split sizes must be at least 1".into()));
    }
    if opts.min_len > opts.max_len {
        return Err(Error::Config("min_len exceeds max_len".into()));
    }
    for p in patterns {
        if opts.domain_size < p.min_domain() {
            return Err(Error::Config(format!(
                "pattern {p} needs a domain of at least {} tokens",
                p.min_domain()
            )));
        }
        if opts.max_len < p.min_input_len() {
            return Err(Error::Config(format!(
                "pattern {p} needs inputs of at least {} tokens",
                p.min_input_len()
            )));
        }
    }
    Ok(())
}

fn spec(id: usize, pattern: Pattern, domain: Vec<usize>, opts: &StreamOptions, seed: u64) -> TaskSpec {
    TaskSpec {
        id: TaskId(id as u32 + 1),
        pattern,
        domain,
        sizes: opts.sizes,
        min_len: opts.min_len.max(pattern.min_input_len()),
        max_len: opts.max_len,
        seed: derive_seed(seed, &[0x7a5c, id as u64]),
    }
}

/// Same pattern (verbalize) for every task, each over its own disjoint
/// domain vocabulary.
pub fn make_similar_stream(n_tasks: usize, seed: u64, opts: &StreamOptions) -> Result<Stream> {
    validate_options(opts, &[Pattern::Verbalize])?;
    let blocks = domain_blocks(n_tasks, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x51]));
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(n_tasks);
    let tasks = order
        .iter()
        .enumerate()
        .map(|(i, &b)| spec(i, Pattern::Verbalize, blocks[b].clone(), opts, seed))
        .collect();
    Ok(Stream {
        scenario: Scenario::Similar,
        seed,
        order,
        vocab: opts.vocab,
        tasks,
    })
}

/// A seeded ordering of distinct patterns, cycling once all six are used.
/// Each task gets its own disjoint domain.
pub fn make_dissimilar_stream(n_tasks: usize, seed: u64, opts: &StreamOptions) -> Result<Stream> {
    validate_options(opts, &Pattern::ALL)?;
    let blocks = domain_blocks(n_tasks, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xd5]));
    let mut order: Vec<usize> = (0..Pattern::ALL.len()).collect();
    order.shuffle(&mut rng);
    let tasks = (0..n_tasks)
        .map(|i| {
            let pattern = Pattern::ALL[order[i % order.len()]];
            spec(i, pattern, blocks[i].clone(), opts, seed)
        })
        .collect();
    Ok(Stream {
        scenario: Scenario::Dissimilar,
        seed,
        order,
        vocab: opts.vocab,
        tasks,
    })
}

pub fn make_stream(scenario: Scenario, n_tasks: usize, seed: u64, opts: &StreamOptions) -> Result<Stream> {
    match scenario {
        Scenario::Similar => make_similar_stream(n_tasks, seed, opts),
        Scenario::Dissimilar => make_dissimilar_stream(n_tasks, seed, opts),
    }
}

/// Draws train/valid/test splits with pairwise-distinct inputs, so no test
/// input is ever seen during training.
pub fn materialize(spec: &TaskSpec) -> Result<TaskData> {
    let total = spec.sizes.train + spec.sizes.valid + spec.sizes.test;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(total);
    let mut samples = Vec::with_capacity(total);
    let budget = total * 200;
    let mut attempts = 0;
    while samples.len() < total {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Config(format!(
                "{}: could only draw {} distinct inputs of {total}",
                spec.id,
                samples.len()
            )));
        }
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let x = spec.pattern.draw_input(len, &spec.domain, &mut rng);
        if !seen.insert(x.clone()) {
            continue;
        }
        let y = spec
            .pattern
            .apply(&x, &spec.domain)
            .expect("drawn inputs always satisfy their pattern");
        samples.push(Sample { task: spec.id, x, y });
    }
    let test = samples.split_off(spec.sizes.train + spec.sizes.valid);
    let valid = samples.split_off(spec.sizes.train);
    Ok(TaskData {
        train: samples,
        valid,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    task: u32,
    x: Vec<usize>,
    y: Vec<usize>,
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let row = JsonlRow {
            task: s.task.0,
            x: s.x.clone(),
            y: s.y.clone(),
        };
        serde_json::to_writer(&mut w, &row).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        out.push(Sample {
            task: TaskId(row.task),
            x: row.x,
            y: row.y,
        });
    }
    Ok(out)
}

/// Writes `manifest.json` plus `task_<id>_{train,valid,test}.jsonl`.
pub fn write_stream(dir: &Path, stream: &Stream) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(stream).map_err(|e| Error::json(&manifest, e))?;
    std::fs::write(&manifest, json + "\n").map_err(|e| Error::io(&manifest, e))?;
    for spec in &stream.tasks {
        let data = materialize(spec)?;
        for (name, split) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
            write_jsonl(&dir.join(format!("task_{}_{name}.jsonl", spec.id.0)), split)?;
        }
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Stream> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn opts() -> StreamOptions {
        StreamOptions::default()
    }

    #[test]
    fn similar_stream_is_deterministic_disjoint_and_verbalize() {
        let a = make_similar_stream(5, 1, &opts()).unwrap();
        let b = make_similar_stream(5, 1, &opts()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tasks.len(), 5);
        for (i, s) in a.tasks.iter().enumerate() {
            assert_eq!(s.pattern, Pattern::Verbalize);
            for t in &a.tasks[i + 1..] {
                let x: BTreeSet<_> = s.domain.iter().collect();
                assert!(t.domain.iter().all(|d| !x.contains(d)));
            }
        }
        assert_ne!(a, make_similar_stream(5, 2, &opts()).unwrap());
    }

    #[test]
    fn vocabulary_exhaustion_is_config_error() {
        let err = make_similar_stream(6, 1, &opts()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn dissimilar_stream_has_distinct_patterns() {
        let s = make_dissimilar_stream(5, 3, &opts()).unwrap();
        let patterns: BTreeSet<_> = s.tasks.iter().map(|t| format!("{}", t.pattern)).collect();
        assert_eq!(patterns.len(), 5);
        assert_eq!(s, make_dissimilar_stream(5, 3, &opts()).unwrap());
    }

    #[test]
    fn pattern_definitions() {
        let d: Vec<usize> = (20..32).collect();
        assert_eq!(Pattern::Copy.apply(&[7, 3, 9], &d).unwrap(), vec![7, 3, 9]);
        assert_eq!(Pattern::Sort.apply(&[7, 3, 9], &d).unwrap(), vec![3, 7, 9]);
        assert_eq!(Pattern::Reverse.apply(&[7, 3, 9], &d).unwrap(), vec![9, 3, 7]);
        // attrs 20..26 map onto words 26..32
        assert_eq!(Pattern::Verbalize.apply(&[21, 20, 25], &d).unwrap(), vec![27, 26, 31]);
        // keywords 20..23, labels 23..26, fillers 26..
        assert_eq!(Pattern::ClassifyIntent.apply(&[27, 22, 28], &d).unwrap(), vec![25]);
        assert!(Pattern::ClassifyIntent.apply(&[20, 21, 28], &d).is_none());
        assert_eq!(Pattern::ExtractSlot.apply(&[25, 20, 27, 29, 22], &d).unwrap(), vec![27, 29]);
    }

    #[test]
    fn materialized_samples_follow_their_pattern() {
        for stream in [
            make_similar_stream(5, 4, &opts()).unwrap(),
            make_dissimilar_stream(5, 4, &opts()).unwrap(),
        ] {
            for spec in &stream.tasks {
                let data = materialize(spec).unwrap();
                assert_eq!(data.train.len(), 256);
                assert_eq!(data.valid.len(), 64);
                assert_eq!(data.test.len(), 64);
                let mut inputs = HashSet::new();
                for s in data.train.iter().chain(&data.valid).chain(&data.test) {
                    assert_eq!(Pattern::apply(spec.pattern, &s.x, &spec.domain).unwrap(), s.y);
                    assert!(s.encoded_len() <= opts().max_sample_len());
                    assert!(s.x.iter().chain(&s.y).all(|&t| t < stream.vocab.size()));
                    assert!(inputs.insert(s.x.clone()), "duplicate input across splits");
                }
            }
        }
    }

    #[test]
    fn parse_accepts_only_well_formed() {
        let v = Vocab::default();
        let t = TaskId(2);
        let tt = v.task_token(t);
        let c = v.content_token(0);
        let ok = Sample::parse(&[tt, c, SEP, c, EOS], t, &v).unwrap();
        assert_eq!(ok.x, vec![c]);
        assert!(Sample::parse(&[tt, c, SEP, c], t, &v).is_none());
        assert!(Sample::parse(&[tt, c, SEP, SEP, c, EOS], t, &v).is_none());
        assert!(Sample::parse(&[tt, SEP, c, EOS], t, &v).is_none());
        assert!(Sample::parse(&[v.task_token(TaskId(1)), c, SEP, c, EOS], t, &v).is_none());
        let s = Sample { task: t, x: vec![c, c], y: vec![c] };
        assert_eq!(Sample::parse(&s.sequence(&v), t, &v).unwrap(), s);
    }

    #[test]
    fn jsonl_and_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stream = make_dissimilar_stream(2, 9, &opts()).unwrap();
        write_stream(dir.path(), &stream).unwrap();
        assert_eq!(read_manifest(&dir.path().join("manifest.json")).unwrap(), stream);
        let back = read_jsonl(&dir.path().join("task_1_test.jsonl")).unwrap();
        assert_eq!(back, materialize(&stream.tasks[0]).unwrap().test);
        let line = std::fs::read_to_string(dir.path().join("task_2_train.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(first["task"], 2);
        assert!(first["x"].is_array() && first["y"].is_array());
    }
}
