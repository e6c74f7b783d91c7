//! Config-driven continual-learning runs over a task stream, per-seed
//! artifacts with per-task checkpoints, and cross-run reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapters::{count_learnable_params, Route, Slot, TaskId};
use crate::backbone::{Model, ModelConfig, Sampling};
use crate::decision::{
    commit_route, decision_log_csv, decision_records, fixed_records, run_architecture_search, select_route, warmup,
    DecisionConfig, DecisionRecord, FusionState, Selection,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_task, fmt_bwt, EvalReport, RMatrix};
use crate::seed::derive_seed;
use crate::tasks::{make_stream, materialize, Scenario, Stream, StreamOptions, TaskData};
use crate::training::{pretrain_backbone, PretrainConfig};
use crate::tuning::{generate_pseudo_samples, train_log_csv, tune, ReplayPlan, ReplayScope, TrainRecord, TuneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One adapter route shared and retrained by every task.
    Finetune,
    /// Fresh adapters at every layer for every task, frozen afterwards.
    Adaptercl,
    /// Search over reused and new adapters only, no cosine penalty.
    Acm,
    Safm,
    SafmNoLw,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Finetune, Method::Adaptercl, Method::Acm, Method::Safm, Method::SafmNoLw];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Adaptercl => "adaptercl",
            Method::Acm => "acm",
            Method::Safm => "safm",
            Method::SafmNoLw => "safm_no_lw",
        }
    }

    pub fn searches(self) -> bool {
        matches!(self, Method::Acm | Method::Safm | Method::SafmNoLw)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Everything that determines a run. Layer numbers are one-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub n_tasks: usize,
    pub seeds: Vec<u64>,
    pub method: Method,
    pub model: ModelConfig,
    pub stream: StreamOptions,
    pub pretrain: PretrainConfig,
    pub alpha: f64,
    pub beta: f64,
    pub strict_factors: bool,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub tune_epochs: usize,
    pub lr: f64,
    pub arch_lr: f64,
    pub batch_size: usize,
    pub replay_ratio: f64,
    pub replay_scope: ReplayScope,
    pub replay_sampling: Sampling,
    /// Cosine-penalty weight; scenario default when absent.
    pub w_lw: Option<f64>,
    pub w_gen: f64,
    /// Layers exempt from search; one mid-stack layer when absent.
    pub no_as: Option<Vec<usize>>,
    /// Let the first task's tuning also update the backbone.
    pub train_backbone_first_task: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Similar,
            n_tasks: 5,
            seeds: vec![1, 2, 3],
            method: Method::Safm,
            model: ModelConfig::default(),
            stream: StreamOptions::default(),
            pretrain: PretrainConfig::default(),
            alpha: 0.11,
            beta: 0.08,
            strict_factors: true,
            warmup_epochs: 3,
            search_epochs: 3,
            tune_epochs: 12,
            lr: 1e-2,
            arch_lr: 1e-2,
            batch_size: 8,
            replay_ratio: 0.2,
            replay_scope: ReplayScope::Sharing,
            replay_sampling: Sampling::TopK { k: 8, temperature: 1.0 },
            w_lw: None,
            w_gen: 0.25,
            no_as: None,
            train_backbone_first_task: false,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.n_tasks == 0 {
            return Err(Error::Config("n_tasks must be at least 1".into()));
        }
        if self.model.vocab < self.stream.vocab.size() {
            return Err(Error::Config(format!(
                "model vocabulary {} cannot hold the {} stream tokens",
                self.model.vocab,
                self.stream.vocab.size()
            )));
        }
        if self.stream.max_sample_len() > self.model.max_seq {
            return Err(Error::Config(format!(
                "samples up to {} tokens exceed max_seq {}",
                self.stream.max_sample_len(),
                self.model.max_seq
            )));
        }
        if self.strict_factors && !(self.alpha > self.beta && self.beta > 0.0) {
            return Err(Error::Config("alpha > beta > 0 required in strict mode".into()));
        }
        if let Some(layers) = &self.no_as {
            if let Some(l) = layers.iter().find(|l| **l == 0 || **l > self.model.layers) {
                return Err(Error::Config(format!("no_as layer {l} outside 1..={}", self.model.layers)));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.tune_config(1).validate()
    }

    pub fn w_lw(&self) -> f64 {
        self.w_lw.unwrap_or(match self.scenario {
            Scenario::Similar => 0.4,
            Scenario::Dissimilar => 0.1,
        })
    }

    /// Zero-based exempt layers.
    pub fn no_as_layers(&self) -> BTreeSet<usize> {
        match &self.no_as {
            Some(v) => v.iter().map(|l| l - 1).collect(),
            None => BTreeSet::from([self.model.layers.div_ceil(2)]),
        }
    }

    pub fn decision_config(&self) -> DecisionConfig {
        DecisionConfig {
            alpha: self.alpha,
            beta: self.beta,
            strict: self.strict_factors,
            warmup_epochs: self.warmup_epochs,
            search_epochs: self.search_epochs,
            lr: self.lr,
            arch_lr: self.arch_lr,
            batch_size: self.batch_size,
            w_gen: self.w_gen,
            allow_empty: self.method != Method::Acm,
        }
    }

    /// Tuning settings for task `task` (one-based) under the configured
    /// method.
    pub fn tune_config(&self, task: usize) -> TuneConfig {
        let (w_lw, replay_ratio) = match self.method {
            Method::Safm => (self.w_lw(), self.replay_ratio),
            Method::SafmNoLw | Method::Acm => (0.0, self.replay_ratio),
            Method::Finetune | Method::Adaptercl => (0.0, 0.0),
        };
        TuneConfig {
            epochs: self.tune_epochs,
            lr: self.lr,
            weight_decay: 0.0,
            batch_size: self.batch_size,
            w_lw,
            w_gen: self.w_gen,
            replay_ratio,
            replay_scope: self.replay_scope,
            sampling: self.replay_sampling,
            train_backbone: self.train_backbone_first_task && task == 1,
        }
    }

    pub fn stream(&self, seed: u64) -> Result<Stream> {
        make_stream(self.scenario, self.n_tasks, seed, &self.stream)
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(self.method.as_str()).join(format!("seed_{seed}"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_text(path, &(json + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Bumped whenever pretraining changes in a way its settings do not show.
const PRETRAIN_CACHE_VERSION: u32 = 2;

#[derive(Serialize, Deserialize)]
struct PretrainCache {
    #[serde(default)]
    version: u32,
    model: ModelConfig,
    stream: StreamOptions,
    pretrain: PretrainConfig,
    base: Model,
}

/// Fresh model with the pretrained backbone and an empty adapter store.
pub fn pretrained_model(cfg: &ExperimentConfig) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.pretrain.seed, &[0xb0]));
    let mut model = Model::new(cfg.model.clone(), cfg.stream.vocab, &mut rng)?;
    let loss = pretrain_backbone(&mut model, &cfg.pretrain)?;
    log::info!("pretraining finished, final loss {loss:.4}");
    Ok(model)
}

/// Loads the pretrained model cached under the output directory, or
/// builds and caches it. The cache is keyed by every setting that shapes
/// it.
pub fn load_or_pretrain(cfg: &ExperimentConfig) -> Result<Model> {
    let path = cfg.output_dir.join("pretrained.json");
    if path.exists() {
        let cache: PretrainCache = read_json(&path)?;
        if cache.version == PRETRAIN_CACHE_VERSION
            && cache.model == cfg.model
            && cache.stream == cfg.stream
            && cache.pretrain == cfg.pretrain
        {
            return Ok(cache.base);
        }
        log::info!("pretraining cache at {} is stale, rebuilding", path.display());
    }
    let base = pretrained_model(cfg)?;
    write_json(
        &path,
        &PretrainCache {
            version: PRETRAIN_CACHE_VERSION,
            model: cfg.model.clone(),
            stream: cfg.stream,
            pretrain: cfg.pretrain.clone(),
            base: base.clone(),
        },
    )?;
    Ok(base)
}

/// State after a completed task, enough to resume the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunState {
    pub tasks_done: usize,
    pub model: Model,
    pub r_matrix: RMatrix,
    pub decisions: Vec<DecisionRecord>,
    pub train_log: Vec<TrainRecord>,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub report: EvalReport,
    pub state: RunState,
}

const STAGE_ADAPTERS: u64 = 1;
const STAGE_WARMUP: u64 = 2;
const STAGE_SEARCH: u64 = 3;
const STAGE_REPLAY: u64 = 4;
const STAGE_TUNE: u64 = 5;

fn stage_rng(seed: u64, task: usize, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[task as u64, stage]))
}

fn fresh_route(model: &mut Model, task: TaskId, rng: &mut ChaCha8Rng) -> Route {
    let slots = (0..model.layers())
        .map(|l| Slot::Adapter(model.store.new_adapter(l, task, rng)))
        .collect();
    Route::new(task, slots)
}

/// Chooses and registers the route for task `n` (one-based). Returns the
/// decision-log rows.
fn decide(cfg: &ExperimentConfig, seed: u64, n: usize, model: &mut Model, data: &TaskData) -> Result<Vec<DecisionRecord>> {
    let task = TaskId(n as u32);
    let layers = model.layers();
    let prior = model.store.routes().to_vec();
    let mut rng = stage_rng(seed, n, STAGE_ADAPTERS);
    match cfg.method {
        Method::Finetune if n > 1 => {
            let route = Route::new(task, prior[0].slots.clone());
            model.store.register_route(route.clone(), layers)?;
            Ok(fixed_records(&route, &BTreeSet::new()))
        }
        Method::Finetune | Method::Adaptercl => {
            let route = fresh_route(model, task, &mut rng);
            let fresh = route.adapter_ids().collect();
            model.store.register_route(route.clone(), layers)?;
            Ok(fixed_records(&route, &fresh))
        }
        Method::Acm | Method::Safm | Method::SafmNoLw => {
            let dcfg = cfg.decision_config();
            let fresh = fresh_route(model, task, &mut rng);
            warmup(model, &data.train, &fresh, &dcfg, &mut stage_rng(seed, n, STAGE_WARMUP))?;
            let state = FusionState::new(&fresh, &prior, &cfg.no_as_layers(), &dcfg)?;
            let state = run_architecture_search(model, &data.train, state, &dcfg, &mut stage_rng(seed, n, STAGE_SEARCH))?;
            let route = select_route(&state);
            let records = decision_records(&state, &route);
            commit_route(model, route)?;
            Ok(records)
        }
    }
}

fn learnable_params(cfg: &ExperimentConfig, model: &Model) -> Result<usize> {
    let backbone = cfg.train_backbone_first_task.then(|| model.config().backbone_params());
    count_learnable_params(model.store.routes(), &model.store, backbone)
}

fn run_task(cfg: &ExperimentConfig, seed: u64, n: usize, state: &mut RunState, data: &[TaskData]) -> Result<()> {
    let model = &mut state.model;
    let current = &data[n - 1];
    let records = decide(cfg, seed, n, model, current)?;
    let route = model.store.route_for(TaskId(n as u32))?.clone();
    let tcfg = cfg.tune_config(n);
    let prior: Vec<Route> = model.store.routes().iter().filter(|r| r.task != route.task).cloned().collect();
    let plan = ReplayPlan::new(&route, &prior, current.train.len(), &tcfg);
    let mut replay = BTreeMap::new();
    let mut rng = stage_rng(seed, n, STAGE_REPLAY);
    for &t in &plan.targets {
        let samples = generate_pseudo_samples(model, t, plan.per_target, tcfg.sampling, &mut rng)?;
        if !samples.is_empty() {
            replay.insert(t, samples);
        }
    }
    let log = tune(model, &current.train, &replay, &route, &tcfg, &mut stage_rng(seed, n, STAGE_TUNE))?;
    let row = (1..=n)
        .map(|j| {
            let r = model.store.route_for(TaskId(j as u32))?;
            evaluate_task(model, r, &data[j - 1].test)
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!("{} seed {seed} task {n}: row {row:?}", cfg.method);
    state.r_matrix.push_row(row)?;
    state.decisions.extend(records);
    state.train_log.extend(log);
    state.tasks_done = n;
    Ok(())
}

fn checkpoint_path(dir: &Path, n: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("task_{n}.json"))
}

fn latest_checkpoint(dir: &Path, n_tasks: usize) -> Result<Option<RunState>> {
    for n in (1..=n_tasks).rev() {
        let p = checkpoint_path(dir, n);
        if p.exists() {
            return read_json(&p).map(Some);
        }
    }
    Ok(None)
}

/// Runs one seed starting from `base`. With `dir`, artifacts and per-task
/// checkpoints are written there and an interrupted run resumes from its
/// latest checkpoint.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, base: &Model, dir: Option<&Path>) -> Result<SeedRun> {
    cfg.validate()?;
    let stream = cfg.stream(seed)?;
    let data = stream.tasks.iter().map(materialize).collect::<Result<Vec<_>>>()?;
    let mut state = match dir.map(|d| latest_checkpoint(d, cfg.n_tasks)).transpose()?.flatten() {
        Some(s) => {
            log::info!("resuming {} seed {seed} after task {}", cfg.method, s.tasks_done);
            s
        }
        None => RunState {
            tasks_done: 0,
            model: base.clone(),
            r_matrix: RMatrix::new(),
            decisions: Vec::new(),
            train_log: Vec::new(),
        },
    };
    for n in state.tasks_done + 1..=cfg.n_tasks {
        run_task(cfg, seed, n, &mut state, &data).map_err(|e| Error::Task {
            task: n,
            source: Box::new(e),
        })?;
        if let Some(d) = dir {
            write_json(&checkpoint_path(d, n), &state)?;
            write_artifacts(d, &state)?;
        }
    }
    let params = learnable_params(cfg, &state.model)?;
    let report = EvalReport::new(cfg.method.as_str(), seed, &cfg.scenario.to_string(), state.r_matrix.clone(), params)?;
    if let Some(d) = dir {
        write_artifacts(d, &state)?;
        write_json(&d.join("report.json"), &report)?;
        write_text(&d.join("report.md"), &seed_markdown(&report, &state.decisions))?;
    }
    Ok(SeedRun { report, state })
}

fn write_artifacts(dir: &Path, state: &RunState) -> Result<()> {
    write_text(&dir.join("r_matrix.csv"), &state.r_matrix.to_csv())?;
    write_text(&dir.join("decision_log.csv"), &decision_log_csv(&state.decisions))?;
    write_text(&dir.join("train_log.csv"), &train_log_csv(&state.train_log))
}

fn seed_markdown(report: &EvalReport, decisions: &[DecisionRecord]) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# {} (seed {}, {} stream)\n", report.method, report.seed, report.scenario);
    let _ = writeln!(md, "- Score: {:.2}", 100.0 * report.score);
    let _ = writeln!(md, "- BWT: {}", fmt_bwt(report.bwt));
    let _ = writeln!(md, "- Learnable parameters: {}\n", report.learnable_params);
    let t = report.r_matrix.tasks();
    md.push_str("| after \\ test |");
    for j in 1..=t {
        let _ = write!(md, " T{j} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(t));
    md.push('\n');
    for (i, row) in report.r_matrix.rows().iter().enumerate() {
        let _ = write!(md, "| T{} |", i + 1);
        for j in 0..t {
            match row.get(j) {
                Some(v) => {
                    let _ = write!(md, " {:.2} |", 100.0 * v);
                }
                None => md.push_str("  |"),
            }
        }
        md.push('\n');
    }
    md.push_str("\n| task | layer | selected | kind |\n|---|---|---|---|\n");
    for d in decisions {
        let _ = writeln!(md, "| {} | {} | {} | {} |", d.task.0, d.layer, d.selected, d.kind.as_str());
    }
    md
}

/// Runs every configured seed, writing artifacts under the output
/// directory.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let base = load_or_pretrain(cfg)?;
    cfg.seeds
        .iter()
        .map(|&seed| {
            let dir = cfg.run_dir(seed);
            write_json(&dir.join("config.json"), cfg)?;
            run_seed(cfg, seed, &base, Some(&dir)).map(|r| r.report)
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-layer shares of empty / reuse / new selections, keyed by one-based
/// layer.
pub fn selection_frequencies(records: impl IntoIterator<Item = (usize, Selection)>) -> BTreeMap<usize, [f64; 3]> {
    let mut counts: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
    for (layer, kind) in records {
        let c = counts.entry(layer).or_default();
        c[match kind {
            Selection::Empty => 0,
            Selection::Reuse => 1,
            Selection::New => 2,
        }] += 1;
    }
    counts
        .into_iter()
        .map(|(l, c)| {
            let total = c.iter().sum::<usize>() as f64;
            (l, c.map(|x| x as f64 / total))
        })
        .collect()
}

fn parse_decision_log(path: &Path) -> Result<Vec<(usize, Selection)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse {
                what: "decision log",
                detail: format!("{}: `{line}`", path.display()),
            };
            let layer = cells.get(1).and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let kind = match cells.last().copied() {
                Some("empty") => Selection::Empty,
                Some("reuse") => Selection::Reuse,
                Some("new") => Selection::New,
                _ => return Err(bad()),
            };
            Ok((layer, kind))
        })
        .collect()
}

/// Aggregates every `<method>/seed_*/report.json` under `dir` into
/// `summary.md`, `summary.csv` and `selection_frequency.csv`. Output is a
/// pure function of the run files.
pub fn report(dir: &Path) -> Result<String> {
    let mut runs: BTreeMap<String, Vec<(EvalReport, PathBuf)>> = BTreeMap::new();
    let mut method_dirs: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect(),
        Err(e) => return Err(Error::io(dir, e)),
    };
    method_dirs.sort();
    for m in method_dirs {
        let mut seeds: Vec<PathBuf> = fs::read_dir(&m)
            .map_err(|e| Error::io(&m, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("report.json").is_file())
            .collect();
        seeds.sort();
        for s in seeds {
            let r: EvalReport = read_json(&s.join("report.json"))?;
            runs.entry(r.method.clone()).or_default().push((r, s));
        }
    }
    if runs.is_empty() {
        return Err(Error::contract(format!("no completed runs under {}", dir.display())));
    }
    let mut md = String::from("# Summary\n\n| method | seeds | Score | BWT | learnable params |\n|---|---|---|---|---|\n");
    let mut csv = String::from("method,seeds,score_mean,score_std,bwt_mean,bwt_std,params_mean\n");
    let mut freq_csv = String::from("method,layer,empty,reuse,new\n");
    let mut freq_md = String::from("\n## Selection frequency per layer\n\n| method | layer | empty | reuse | new |\n|---|---|---|---|---|\n");
    for (method, reps) in &runs {
        let scores: Vec<f64> = reps.iter().map(|(r, _)| r.score).collect();
        let bwts: Vec<f64> = reps.iter().filter_map(|(r, _)| r.bwt).collect();
        let params: Vec<f64> = reps.iter().map(|(r, _)| r.learnable_params as f64).collect();
        let (sm, ss) = mean_std(&scores);
        let (pm, _) = mean_std(&params);
        let (bwt_md, bwt_csv) = if bwts.is_empty() {
            ("N/A".to_string(), ",".to_string())
        } else {
            let (bm, bs) = mean_std(&bwts);
            (format!("{:.2} ± {:.2}", 100.0 * bm, 100.0 * bs), format!("{bm},{bs}"))
        };
        let _ = writeln!(
            md,
            "| {method} | {} | {:.2} ± {:.2} | {bwt_md} | {pm:.0} |",
            reps.len(),
            100.0 * sm,
            100.0 * ss
        );
        let _ = writeln!(csv, "{method},{},{sm},{ss},{bwt_csv},{pm}", reps.len());

        let mut records = Vec::new();
        for (_, path) in reps {
            let log = path.join("decision_log.csv");
            if log.is_file() {
                records.extend(parse_decision_log(&log)?);
            }
        }
        for (layer, f) in selection_frequencies(records) {
            let _ = writeln!(freq_csv, "{method},{layer},{},{},{}", f[0], f[1], f[2]);
            let _ = writeln!(freq_md, "| {method} | {layer} | {:.2} | {:.2} | {:.2} |", f[0], f[1], f[2]);
        }
    }
    md.push_str(&freq_md);
    write_text(&dir.join("summary.md"), &md)?;
    write_text(&dir.join("summary.csv"), &csv)?;
    write_text(&dir.join("selection_frequency.csv"), &freq_csv)?;
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("lamol".parse::<Method>().is_err());
    }

    #[test]
    fn default_config_is_valid_and_exempts_layer_three() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.no_as_layers(), BTreeSet::from([2]));
        assert_eq!(cfg.w_lw(), 0.4);
        let dis = ExperimentConfig {
            scenario: Scenario::Dissimilar,
            ..cfg
        };
        assert_eq!(dis.w_lw(), 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"method": "safm", "lamda": 1}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"));
        let ok: ExperimentConfig = serde_json::from_str(r#"{"method": "acm", "seeds": [4]}"#).unwrap();
        assert_eq!(ok.method, Method::Acm);
        assert!(!ok.decision_config().allow_empty);
        assert_eq!(ok.tune_config(2).w_lw, 0.0);
    }

    #[test]
    fn validation_catches_bad_settings() {
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        };
        bad(|c| c.seeds.clear());
        bad(|c| c.no_as = Some(vec![0]));
        bad(|c| c.alpha = 0.01);
        bad(|c| c.model.max_seq = 8);
    }

    #[test]
    fn frequencies_sum_to_one() {
        let rec = |layer, kind| DecisionRecord {
            task: TaskId(1),
            layer,
            candidates: vec![],
            init_lambda: None,
            lambda: None,
            selected: Slot::Empty,
            kind,
        };
        let recs = [rec(1, Selection::Empty), rec(1, Selection::New), rec(2, Selection::Reuse)];
        let f = selection_frequencies(recs.iter().map(|r| (r.layer, r.kind)));
        for v in f.values() {
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(f[&1], [0.5, 0.0, 0.5]);
    }

    #[test]
    fn std_of_one_sample_is_zero() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }
}
