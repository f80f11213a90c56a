//! Closed search loop: bootstrap population, then per-epoch sampling,
//! conditional generation, verification, evaluation, persistence, pair
//! extraction and corpus export.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{self, EvalError, Evaluator, EvaluatorKind, SurrogateConfig, SyntheticSpec};
use crate::ir::Hyperparams;
use crate::mutator::{self, stream_rng, MutateError, MutatorConfig};
use crate::netdsl;
use crate::proposer::{self, build_prompt, Extraction, GenerationParams, ProposalRequest, ProposeError, Proposer, ProposerKind};
use crate::repository::{
    export_corpus, extract_pairs, source_id, CandidateRecord, EpochSummary, PairFilter, ProposerTag, RecordVerdict, RepoError,
    Repository, DEFAULT_METRIC,
};
use crate::stats::{self, AnalyzeConfig, StatsError};
use crate::verifier::{verify_net, Verdict};

pub const REPO_DIR: &str = "repository";
pub const CORPUS_DIR: &str = "corpus";
pub const REPORT_DIR: &str = "report";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("bootstrap population is empty")]
    EmptyPopulation,
    #[error("no valid record to sample a baseline from before epoch {0}")]
    NoBaseline(u32),
    #[error("seed network is invalid: {0}")]
    InvalidSeed(String),
    #[error("existing run in {0} was started with a different config")]
    ConfigMismatch(PathBuf),
    #[error(transparent)]
    Mutate(#[from] MutateError),
    #[error(transparent)]
    Propose(#[from] ProposeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("dataset: {0}")]
    Dataset(#[from] evaluator::DatasetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePolicy {
    /// Uniform over every valid record from earlier epochs.
    UniformValid,
    /// Uniform over the k most accurate valid records from earlier epochs.
    TopK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposerChoice {
    Random,
    External,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposerConfig {
    pub kind: ProposerChoice,
    pub endpoint: Option<String>,
    pub concurrency: usize,
    pub transcript: Option<PathBuf>,
    pub params: GenerationParams,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        ProposerConfig {
            kind: ProposerChoice::Random,
            endpoint: None,
            concurrency: 4,
            transcript: None,
            params: GenerationParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluatorConfig {
    pub kind: EvaluatorKind,
    /// CFTD file for the micro trainer; a synthetic set is generated when absent.
    pub dataset: Option<PathBuf>,
    pub train_seed: u64,
    pub surrogate: SurrogateConfig,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig { kind: EvaluatorKind::Surrogate, dataset: None, train_seed: 0, surrogate: SurrogateConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Generation epochs, numbered from 0. The bootstrap population is stored
    /// under epoch 0 as well but is not one of them.
    pub epochs: u32,
    pub candidates_per_epoch: usize,
    pub delta: f64,
    pub bootstrap_count: usize,
    pub rng_seed: u64,
    pub baseline_policy: BaselinePolicy,
    pub max_pairs: usize,
    /// Worker threads for verification and evaluation; 0 uses the global pool.
    pub workers: usize,
    pub seed_file: Option<PathBuf>,
    pub hp: Hyperparams,
    pub mutator: MutatorConfig,
    pub proposer: ProposerConfig,
    pub evaluator: EvaluatorConfig,
    pub analysis: AnalyzeConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 22,
            candidates_per_epoch: 10,
            delta: 0.02,
            bootstrap_count: 100,
            rng_seed: 0,
            baseline_policy: BaselinePolicy::UniformValid,
            max_pairs: 1000,
            workers: 0,
            seed_file: None,
            hp: Hyperparams::default(),
            mutator: MutatorConfig::default(),
            proposer: ProposerConfig::default(),
            evaluator: EvaluatorConfig::default(),
            analysis: AnalyzeConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn from_toml(text: &str) -> Result<SearchConfig, SearchError> {
        let cfg: SearchConfig = toml::from_str(text).map_err(|e| SearchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SearchConfig, SearchError> {
        let text = fs::read_to_string(path).map_err(|e| SearchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.candidates_per_epoch < 1 {
            return bad("candidates_per_epoch must be at least 1");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be positive");
        }
        if matches!(self.baseline_policy, BaselinePolicy::TopK(0)) {
            return bad("top_k must be at least 1");
        }
        if !self.hp.is_valid() {
            return bad("default hyperparameters out of range");
        }
        if !self.mutator.is_valid() {
            return bad("mutator config out of range");
        }
        match self.proposer.kind {
            ProposerChoice::External if self.proposer.endpoint.is_none() => bad("external proposer needs an endpoint"),
            ProposerChoice::Replay if self.proposer.transcript.is_none() => bad("replay proposer needs a transcript"),
            _ => Ok(()),
        }
    }

    /// Mutator settings with the run seed folded in.
    fn mutator_config(&self) -> MutatorConfig {
        MutatorConfig { rng_seed: self.mutator.rng_seed ^ self.rng_seed, ..self.mutator.clone() }
    }

    pub fn proposer_kind(&self) -> ProposerKind {
        match self.proposer.kind {
            ProposerChoice::Random => ProposerKind::RandomMutation(self.mutator_config()),
            ProposerChoice::External => ProposerKind::External {
                endpoint: self.proposer.endpoint.clone().unwrap_or_default(),
                params: self.proposer.params.clone(),
                concurrency: self.proposer.concurrency,
            },
            ProposerChoice::Replay => ProposerKind::Replay(self.proposer.transcript.clone().unwrap_or_default()),
        }
    }

    pub fn build_evaluator(&self) -> Result<Evaluator, SearchError> {
        Ok(match self.evaluator.kind {
            EvaluatorKind::Surrogate => Evaluator::Surrogate(self.evaluator.surrogate.clone()),
            EvaluatorKind::Micro => {
                let data = match &self.evaluator.dataset {
                    Some(path) => evaluator::load_dataset(path)?,
                    None => evaluator::synthetic(&SyntheticSpec::toy100()),
                };
                Evaluator::Micro { data: Arc::new(data), seed: self.evaluator.train_seed }
            }
        })
    }

    /// The network to start from: `seed_file` or the built-in AlexNet-style seed.
    pub fn seed_source(&self) -> Result<String, SearchError> {
        match &self.seed_file {
            Some(p) => fs::read_to_string(p).map_err(|e| SearchError::Config(format!("seed file {}: {e}", p.display()))),
            None => Ok(crate::seeds::ALEXNET.to_string()),
        }
    }
}

fn proposer_tag(kind: &ProposerKind) -> ProposerTag {
    match kind {
        ProposerKind::RandomMutation(_) => ProposerTag::Random,
        ProposerKind::External { .. } => ProposerTag::External,
        ProposerKind::Replay(_) => ProposerTag::Replay,
    }
}

/// Record verdict for a verifier outcome. Stage 0 marks failures outside the
/// verifier (extraction or evaluation).
fn record_verdict(v: &Verdict) -> RecordVerdict {
    match v {
        Verdict::Valid => RecordVerdict::Valid,
        Verdict::Invalid { stage, reason } => RecordVerdict::Invalid { stage: stage.number(), reason: reason.to_string() },
    }
}

struct Outcome {
    verdict: RecordVerdict,
    accuracy: Option<f64>,
    params: Option<u64>,
}

fn verify_and_evaluate(source: &str, hp: &Hyperparams, eval: &Evaluator) -> Outcome {
    let invalid = |verdict| Outcome { verdict, accuracy: None, params: None };
    let net = match netdsl::parse_unvalidated(source) {
        Ok(n) => n,
        Err(e) => return invalid(RecordVerdict::Invalid { stage: 1, reason: format!("parse error: {e}") }),
    };
    let report = verify_net(&net);
    if !report.is_valid() {
        return invalid(record_verdict(&report.verdict));
    }
    match eval.evaluate(&net, hp) {
        Ok(r) => Outcome { verdict: RecordVerdict::Valid, accuracy: Some(r.accuracy), params: Some(r.params) },
        Err(e) => invalid(RecordVerdict::Invalid { stage: 0, reason: format!("evaluation failed: {e}") }),
    }
}

fn summarize(epoch: u32, attempted: usize, accs: &[f64], prev_best: Option<f64>) -> EpochSummary {
    let max = accs.iter().copied().reduce(f64::max);
    let best_so_far = match (prev_best, max) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    };
    EpochSummary {
        epoch,
        attempted,
        valid_count: accs.len(),
        mean_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
        max_accuracy: max,
        best_so_far,
        proposer_failures: 0,
        extraction_failures: 0,
        duplicates: 0,
        bootstrap: false,
    }
}

/// Records a generation epoch `t` may build on: the bootstrap population and
/// every candidate from earlier epochs.
fn available_before(r: &CandidateRecord, t: u32) -> bool {
    r.epoch < t || r.proposer_kind == ProposerTag::Bootstrap
}

fn best_before(repo: &Repository, t: u32) -> Option<f64> {
    repo.records().iter().filter(|r| available_before(r, t)).filter_map(|r| r.score()).reduce(f64::max)
}

/// Per-request proposer seed for candidate `i` of epoch `t`.
fn request_seed(rng_seed: u64, t: u32, i: usize) -> u64 {
    let mut rng = stream_rng(rng_seed ^ 0x9e0_90e5, (t as u64) << 32 | i as u64);
    rng.gen()
}

/// A search rooted at one output directory.
pub struct Search {
    pub cfg: SearchConfig,
    out_dir: PathBuf,
    repo: Repository,
    evaluator: Evaluator,
    proposer: Option<Proposer>,
    pool: Option<rayon::ThreadPool>,
}

impl Search {
    /// Opens (or creates) the run in `out_dir`. An existing manifest must
    /// carry the same config.
    pub fn open(cfg: SearchConfig, out_dir: &Path) -> Result<Search, SearchError> {
        cfg.validate()?;
        fs::create_dir_all(out_dir)?;
        let manifest_path = out_dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let old: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
                .map_err(|e| SearchError::Config(format!("manifest: {e}")))?;
            let ours = serde_json::to_value(&cfg).expect("config serializes");
            if old.get("config") != Some(&ours) {
                return Err(SearchError::ConfigMismatch(out_dir.to_path_buf()));
            }
        }
        let repo = Repository::open(&out_dir.join(REPO_DIR))?;
        for w in repo.warnings() {
            log::warn!("{w}");
        }
        let evaluator = cfg.build_evaluator()?;
        let pool = (cfg.workers > 0)
            .then(|| rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build())
            .transpose()
            .map_err(|e| SearchError::Config(e.to_string()))?;
        Ok(Search { cfg, out_dir: out_dir.to_path_buf(), repo, evaluator, proposer: None, pool })
    }

    pub fn repository(&self) -> &Repository {
        &self.repo
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    pub fn write_manifest(&self, seed_src: &str) -> Result<PathBuf, SearchError> {
        let manifest = serde_json::json!({
            "tool": "channel-forge",
            "version": env!("CARGO_PKG_VERSION"),
            "template_version": proposer::TEMPLATE_VERSION,
            "seed_id": source_id(seed_src),
            "dataset": self.evaluator.dataset_tag(),
            "config": self.cfg,
        });
        let path = self.out_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
        Ok(path)
    }

    /// Epoch 0: verified mutation variants of the seed, evaluated and stored.
    pub fn run_bootstrap(&mut self, seed_src: &str) -> Result<EpochSummary, SearchError> {
        if self.cfg.bootstrap_count == 0 {
            return Err(SearchError::EmptyPopulation);
        }
        let seed_net = netdsl::parse(seed_src).map_err(|e| SearchError::InvalidSeed(e.to_string()))?;
        let report = verify_net(&seed_net);
        if !report.is_valid() {
            return Err(SearchError::InvalidSeed(report.verdict.to_string()));
        }
        let mcfg = self.cfg.mutator_config();
        let count = self.cfg.bootstrap_count;
        let out = self.install(|| mutator::bootstrap(seed_src, count, &mcfg))?;
        log::info!(
            "bootstrap: {} variants from {} draws ({} duplicates, {} rejected)",
            out.variants.len(),
            out.draws,
            out.duplicate_draws,
            out.verifier_rejections
        );
        let hp = self.cfg.hp.clone();
        let eval = &self.evaluator;
        let results: Vec<Result<evaluator::EvalResult, EvalError>> =
            self.install(|| out.variants.par_iter().map(|v| eval.evaluate(&v.net, &hp)).collect());
        let parent = source_id(seed_src);
        let tag = self.evaluator.dataset_tag();
        let mut accs = Vec::new();
        for (v, r) in out.variants.iter().zip(results) {
            let r = r?;
            accs.push(r.accuracy);
            let rec = CandidateRecord::new(
                0,
                v.source.clone(),
                hp.clone(),
                &tag,
                RecordVerdict::Valid,
                Some(r.accuracy),
                Some(r.params),
                Some(parent.clone()),
                ProposerTag::Bootstrap,
            );
            self.repo.append(rec)?;
        }
        let mut summary = summarize(0, out.variants.len(), &accs, None);
        summary.bootstrap = true;
        self.repo.append_epoch(summary.clone())?;
        Ok(summary)
    }

    fn sample_baselines(&self, t: u32) -> Result<Vec<CandidateRecord>, SearchError> {
        let mut pool: Vec<&CandidateRecord> =
            self.repo.records().iter().filter(|r| available_before(r, t) && r.score().is_some()).collect();
        if pool.is_empty() {
            return Err(SearchError::NoBaseline(t));
        }
        if let BaselinePolicy::TopK(k) = self.cfg.baseline_policy {
            pool.sort_by(|a, b| b.score().unwrap().total_cmp(&a.score().unwrap()).then_with(|| a.id.cmp(&b.id)));
            pool.truncate(k);
        }
        let mut rng = stream_rng(self.cfg.rng_seed ^ 0xba5e_11e5, t as u64);
        Ok((0..self.cfg.candidates_per_epoch).map(|_| (*pool.choose(&mut rng).expect("non-empty")).clone()).collect())
    }

    /// One generation epoch. Epoch 0 builds on the bootstrap population alone.
    pub fn run_epoch(&mut self, t: u32) -> Result<EpochSummary, SearchError> {
        if self.proposer.is_none() {
            let mut p = Proposer::new(self.cfg.proposer_kind())?;
            let served = self.repo.epochs().iter().filter(|e| !e.bootstrap).map(|e| e.attempted.saturating_sub(e.proposer_failures)).sum();
            p.resume_after(served);
            self.proposer = Some(p);
        }
        let baselines = self.sample_baselines(t)?;
        let mut failures = 0usize;
        let mut requests = Vec::new();
        let mut parents = Vec::new();
        for (i, b) in baselines.iter().enumerate() {
            let target = b.score().expect("valid baseline") + self.cfg.delta;
            match build_prompt(b, target) {
                Ok(prompt) => {
                    requests.push(ProposalRequest {
                        prompt,
                        baseline_source: b.source.clone(),
                        baseline_hp: b.hp.clone(),
                        seed: request_seed(self.cfg.rng_seed, t, i),
                    });
                    parents.push(b.id.clone());
                }
                Err(e) => {
                    log::warn!("epoch {t}: prompt for baseline {} failed: {e}", b.id);
                    failures += 1;
                }
            }
        }
        let proposer = self.proposer.as_mut().expect("proposer built");
        let tag = proposer_tag(proposer.kind());
        let responses = proposer.propose_batch(&requests);

        // (parent, source, hp, extraction failure reason)
        let mut candidates: Vec<(String, String, Hyperparams, Option<String>)> = Vec::new();
        let mut extraction_failures = 0;
        for (parent, resp) in parents.into_iter().zip(responses) {
            match resp {
                Err(e) => {
                    log::warn!("epoch {t}: proposer failed: {e}");
                    failures += 1;
                }
                Ok(raw) => match proposer::extract_candidate(&raw, &self.cfg.hp) {
                    Extraction::Ok(x) => {
                        for w in &x.warnings {
                            log::debug!("epoch {t}: {w}");
                        }
                        candidates.push((parent, x.source, x.hp, None));
                    }
                    Extraction::Failure { reason } => {
                        extraction_failures += 1;
                        candidates.push((parent, raw, self.cfg.hp.clone(), Some(reason)));
                    }
                },
            }
        }

        let eval = &self.evaluator;
        let outcomes: Vec<Outcome> = self.install(|| {
            candidates
                .par_iter()
                .map(|(_, src, hp, failed)| match failed {
                    Some(reason) => Outcome {
                        verdict: RecordVerdict::Invalid { stage: 0, reason: format!("extraction failed: {reason}") },
                        accuracy: None,
                        params: None,
                    },
                    None => verify_and_evaluate(src, hp, eval),
                })
                .collect()
        });

        let dataset = self.evaluator.dataset_tag();
        let prev_best = best_before(&self.repo, t);
        let mut accs = Vec::new();
        let mut duplicates = 0;
        for ((parent, src, hp, _), o) in candidates.into_iter().zip(outcomes) {
            accs.extend(o.accuracy);
            let rec = CandidateRecord::new(t, src, hp, &dataset, o.verdict, o.accuracy, o.params, Some(parent), tag);
            duplicates += usize::from(!self.repo.append(rec)?.1);
        }
        let mut summary = summarize(t, self.cfg.candidates_per_epoch, &accs, prev_best);
        summary.proposer_failures = failures;
        summary.extraction_failures = extraction_failures;
        summary.duplicates = duplicates;
        self.repo.append_epoch(summary.clone())?;
        self.export_epoch_corpus(t)?;
        log::info!(
            "epoch {t}: {}/{} valid, max {:?}, best so far {:?}",
            summary.valid_count,
            summary.attempted,
            summary.max_accuracy,
            summary.best_so_far
        );
        Ok(summary)
    }

    /// Writes `corpus/epoch_XXX.jsonl` from improving pairs in the repository.
    fn export_epoch_corpus(&self, t: u32) -> Result<Option<PathBuf>, SearchError> {
        let filter = PairFilter { metric_name: Some(DEFAULT_METRIC.to_string()), dataset: Some(self.evaluator.dataset_tag()) };
        let pairs = extract_pairs(self.repo.records(), &filter, self.cfg.max_pairs, self.cfg.rng_seed ^ t as u64);
        if pairs.is_empty() {
            log::warn!("epoch {t}: no improving pairs yet; corpus not written");
            return Ok(None);
        }
        let path = self.out_dir.join(CORPUS_DIR).join(format!("epoch_{t:03}.jsonl"));
        fs::create_dir_all(path.parent().expect("corpus dir"))?;
        export_corpus(&pairs, &path)?;
        Ok(Some(path))
    }

    /// Last generation epoch in the epoch log.
    pub fn completed_epochs(&self) -> Option<u32> {
        self.repo.epochs().iter().filter(|e| !e.bootstrap).map(|e| e.epoch).max()
    }

    pub fn bootstrapped(&self) -> bool {
        self.repo.epochs().iter().any(|e| e.bootstrap)
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Every epoch summary in the log, including ones from earlier runs.
    pub summaries: Vec<EpochSummary>,
    pub manifest: PathBuf,
    pub report_dir: PathBuf,
    pub analysis: Option<stats::Analysis>,
}

/// Bootstrap population, then generation epochs `0..cfg.epochs`, resuming
/// after the last logged epoch when `out_dir` already holds a run, and
/// finally the analysis.
pub fn run_search(cfg: SearchConfig, seed_src: &str, out_dir: &Path) -> Result<SearchOutcome, SearchError> {
    let mut search = Search::open(cfg, out_dir)?;
    let manifest = search.write_manifest(seed_src)?;
    if !search.bootstrapped() {
        search.run_bootstrap(seed_src)?;
    }
    let start = match search.completed_epochs() {
        None => 0,
        Some(done) => {
            log::info!("resuming after epoch {done}");
            done + 1
        }
    };
    for t in start..search.cfg.epochs {
        search.run_epoch(t)?;
    }
    let report_dir = out_dir.join(REPORT_DIR);
    let snap = search.repo.snapshot();
    let analysis = match stats::analyze_snapshot(&snap, &search.cfg.analysis) {
        Ok(a) => {
            stats::write_report(&a, &snap, &report_dir)?;
            Some(a)
        }
        Err(e) => {
            log::warn!("analysis skipped: {e}");
            None
        }
    };
    Ok(SearchOutcome { summaries: search.repo.epochs().to_vec(), manifest, report_dir, analysis })
}
