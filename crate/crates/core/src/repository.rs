//! Append-only candidate store: one JSON record per line in `lemur.jsonl`,
//! epoch summaries in `epochs.jsonl`, and a lock file enforcing one writer.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ir::Hyperparams;
use crate::proposer::{build_prompt, completion_text, PromptError};

pub const RECORDS_FILE: &str = "lemur.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const LOCK_FILE: &str = "lemur.lock";
pub const DEFAULT_METRIC: &str = "accuracy";

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("repository io error: {0}")]
    Io(#[from] io::Error),
    #[error("repository at {0} is locked by another writer (remove {1} if that process is gone)")]
    Locked(PathBuf, PathBuf),
    #[error("{file}:{line}: corrupt record: {message}")]
    Corrupt { file: String, line: usize, message: String },
    #[error("record violates invariants: {0}")]
    InvalidRecord(String),
    #[error("no improving pairs to export")]
    NoPairs,
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposerTag {
    Bootstrap,
    Random,
    External,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RecordVerdict {
    Valid,
    Invalid { stage: u8, reason: String },
}

impl RecordVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, RecordVerdict::Valid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: String,
    pub epoch: u32,
    pub source: String,
    pub hp: Hyperparams,
    pub metric_name: String,
    pub dataset: String,
    pub accuracy: Option<f64>,
    pub params: Option<u64>,
    pub verdict: RecordVerdict,
    pub parent_id: Option<String>,
    pub proposer_kind: ProposerTag,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
}

/// Lowercase hex SHA-256 of the source bytes.
pub fn source_id(source: &str) -> String {
    hex::encode(Sha256::digest(source.as_bytes()))
}

pub fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl CandidateRecord {
    /// A record with the id derived from `source` and the current timestamp.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        epoch: u32,
        source: String,
        hp: Hyperparams,
        dataset: &str,
        verdict: RecordVerdict,
        accuracy: Option<f64>,
        params: Option<u64>,
        parent_id: Option<String>,
        proposer_kind: ProposerTag,
    ) -> Self {
        CandidateRecord {
            id: source_id(&source),
            epoch,
            source,
            hp,
            metric_name: DEFAULT_METRIC.to_string(),
            dataset: dataset.to_string(),
            accuracy,
            params,
            verdict,
            parent_id,
            proposer_kind,
            created_at: now_millis(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.verdict.is_valid()
    }

    /// Accuracy of a valid, evaluated record.
    pub fn score(&self) -> Option<f64> {
        self.accuracy.filter(|_| self.is_valid())
    }

    pub fn check(&self) -> Result<(), RepoError> {
        if self.id != source_id(&self.source) {
            return Err(RepoError::InvalidRecord(format!("id {} does not hash the source", self.id)));
        }
        match (&self.verdict, self.accuracy) {
            (RecordVerdict::Valid, None) | (RecordVerdict::Invalid { .. }, Some(_)) => {
                return Err(RepoError::InvalidRecord("accuracy must be present exactly for valid records".into()));
            }
            (_, Some(a)) if !(0.0..=1.0).contains(&a) => {
                return Err(RepoError::InvalidRecord(format!("accuracy {a} outside [0, 1]")));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Per-epoch accounting written by the search loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u32,
    pub attempted: usize,
    pub valid_count: usize,
    pub mean_accuracy: Option<f64>,
    pub max_accuracy: Option<f64>,
    pub best_so_far: Option<f64>,
    #[serde(default)]
    pub proposer_failures: usize,
    #[serde(default)]
    pub extraction_failures: usize,
    /// Candidates whose source was already stored.
    #[serde(default)]
    pub duplicates: usize,
    /// Summary of the bootstrap population rather than of a generation epoch.
    #[serde(default)]
    pub bootstrap: bool,
}

struct Lock {
    path: PathBuf,
}

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock, RepoError> {
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id())?;
                    return Ok(Lock { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    if lock_is_stale(&path) {
                        fs::remove_file(&path)?;
                        continue;
                    }
                    return Err(RepoError::Locked(dir.to_path_buf(), path));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(RepoError::Locked(dir.to_path_buf(), path))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A lock whose owner pid no longer exists. Only decidable where `/proc` exists.
fn lock_is_stale(path: &Path) -> bool {
    let Ok(text) = fs::read_to_string(path) else { return false };
    let Ok(pid) = text.trim().parse::<u32>() else { return false };
    let proc_root = Path::new("/proc");
    proc_root.is_dir() && pid != std::process::id() && !proc_root.join(pid.to_string()).exists()
}

/// Parses a JSON-lines file. A final line without a trailing newline that
/// fails to parse is a torn write: it is reported and its byte offset
/// returned so a writer can truncate it. Any other bad line is corruption.
fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Vec<T>, Option<u64>, Vec<String>), RepoError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), None, Vec::new())),
        Err(e) => return Err(e.into()),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    let mut offset = 0usize;
    let mut torn = None;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let complete = line.ends_with('\n');
        let body = line.trim_end_matches('\n');
        if !body.trim().is_empty() {
            match serde_json::from_str(body) {
                Ok(item) => items.push(item),
                Err(_) if !complete => {
                    warnings.push(format!("{name}:{}: ignoring torn final line ({} bytes)", lineno + 1, body.len()));
                    torn = Some(offset as u64);
                }
                Err(e) => {
                    return Err(RepoError::Corrupt { file: name, line: lineno + 1, message: e.to_string() });
                }
            }
        }
        offset += line.len();
    }
    Ok((items, torn, warnings))
}

fn open_append(path: &Path, torn_at: Option<u64>) -> Result<File, RepoError> {
    let file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
    if let Some(len) = torn_at {
        file.set_len(len)?;
    } else if file.metadata()?.len() > 0 {
        // A complete last line may still lack its newline if it parsed fine.
        let text = fs::read(path)?;
        if text.last() != Some(&b'\n') {
            (&file).write_all(b"\n")?;
        }
    }
    Ok(file)
}

/// Read-only view of a repository directory.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub records: Vec<CandidateRecord>,
    pub epochs: Vec<EpochSummary>,
    pub warnings: Vec<String>,
}

impl Snapshot {
    pub fn load(dir: &Path) -> Result<Snapshot, RepoError> {
        let (records, _, mut warnings) = read_lines(&dir.join(RECORDS_FILE))?;
        let (epochs, _, w2) = read_lines(&dir.join(EPOCHS_FILE))?;
        warnings.extend(w2);
        Ok(Snapshot { records, epochs, warnings })
    }

    pub fn valid(&self) -> impl Iterator<Item = &CandidateRecord> {
        self.records.iter().filter(|r| r.score().is_some())
    }
}

/// The single writer of a repository directory.
pub struct Repository {
    dir: PathBuf,
    records: Vec<CandidateRecord>,
    index: HashMap<String, usize>,
    epochs: Vec<EpochSummary>,
    records_out: BufWriter<File>,
    epochs_out: BufWriter<File>,
    warnings: Vec<String>,
    _lock: Lock,
}

impl Repository {
    pub fn open(dir: &Path) -> Result<Repository, RepoError> {
        fs::create_dir_all(dir)?;
        let lock = Lock::acquire(dir)?;
        let rec_path = dir.join(RECORDS_FILE);
        let ep_path = dir.join(EPOCHS_FILE);
        let (records, torn_r, mut warnings): (Vec<CandidateRecord>, _, _) = read_lines(&rec_path)?;
        let (epochs, torn_e, w2) = read_lines(&ep_path)?;
        warnings.extend(w2);
        for w in &warnings {
            log::warn!("{w}");
        }
        let mut index = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            index.entry(r.id.clone()).or_insert(i);
        }
        Ok(Repository {
            dir: dir.to_path_buf(),
            records,
            index,
            epochs,
            records_out: BufWriter::new(open_append(&rec_path, torn_r)?),
            epochs_out: BufWriter::new(open_append(&ep_path, torn_e)?),
            warnings,
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn records(&self) -> &[CandidateRecord] {
        &self.records
    }

    pub fn epochs(&self) -> &[EpochSummary] {
        &self.epochs
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn get(&self, id: &str) -> Option<&CandidateRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Durably appends `rec` unless a record with the same id exists.
    /// Returns the id and whether a line was written.
    pub fn append(&mut self, rec: CandidateRecord) -> Result<(String, bool), RepoError> {
        rec.check()?;
        if self.index.contains_key(&rec.id) {
            return Ok((rec.id, false));
        }
        let line = serde_json::to_string(&rec).map_err(|e| RepoError::InvalidRecord(e.to_string()))?;
        write_durable(&mut self.records_out, &line)?;
        self.index.insert(rec.id.clone(), self.records.len());
        let id = rec.id.clone();
        self.records.push(rec);
        Ok((id, true))
    }

    pub fn append_epoch(&mut self, summary: EpochSummary) -> Result<(), RepoError> {
        let line = serde_json::to_string(&summary).map_err(|e| RepoError::InvalidRecord(e.to_string()))?;
        write_durable(&mut self.epochs_out, &line)?;
        self.epochs.push(summary);
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { records: self.records.clone(), epochs: self.epochs.clone(), warnings: self.warnings.clone() }
    }
}

fn write_durable(out: &mut BufWriter<File>, line: &str) -> Result<(), RepoError> {
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    out.get_ref().sync_data()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub baseline: CandidateRecord,
    pub addon: CandidateRecord,
}

/// Pairs are only formed between records sharing both keys.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairFilter {
    pub metric_name: Option<String>,
    pub dataset: Option<String>,
}

impl PairFilter {
    pub fn metric(name: &str) -> Self {
        PairFilter { metric_name: Some(name.to_string()), dataset: None }
    }

    fn admits(&self, r: &CandidateRecord) -> bool {
        self.metric_name.as_ref().is_none_or(|m| *m == r.metric_name) && self.dataset.as_ref().is_none_or(|d| *d == r.dataset)
    }
}

/// Index space over all improving ordered pairs, partitioned by
/// (metric, dataset). Within a partition, valid records are sorted by
/// accuracy; the addons of baseline `i` are the suffix of strictly better
/// records.
struct PairSpace<'a> {
    /// `(records sorted by accuracy, first strictly-better index per record, cumulative pair counts)`.
    parts: Vec<(Vec<&'a CandidateRecord>, Vec<usize>, Vec<u64>)>,
    total: u64,
}

impl<'a> PairSpace<'a> {
    fn new(records: &'a [CandidateRecord], filter: &PairFilter) -> Self {
        let mut groups: BTreeMap<(&str, &str), Vec<&CandidateRecord>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.score().is_some() && filter.admits(r)) {
            groups.entry((r.metric_name.as_str(), r.dataset.as_str())).or_default().push(r);
        }
        let mut parts = Vec::new();
        let mut total = 0u64;
        for (_, mut rs) in groups {
            rs.sort_by(|a, b| a.score().unwrap().total_cmp(&b.score().unwrap()).then_with(|| a.id.cmp(&b.id)));
            let mut first_better = Vec::with_capacity(rs.len());
            let mut cumulative = Vec::with_capacity(rs.len() + 1);
            cumulative.push(total);
            for r in &rs {
                let y = r.score().unwrap();
                let j = rs.partition_point(|o| o.score().unwrap() <= y);
                first_better.push(j);
                total += (rs.len() - j) as u64;
                cumulative.push(total);
            }
            parts.push((rs, first_better, cumulative));
        }
        PairSpace { parts, total }
    }

    fn pair(&self, k: u64) -> (&'a CandidateRecord, &'a CandidateRecord) {
        let part = self.parts.iter().find(|(_, _, cum)| k < *cum.last().unwrap()).expect("pair index in range");
        let (rs, first_better, cum) = part;
        let i = cum.partition_point(|&c| c <= k) - 1;
        let j = first_better[i] + (k - cum[i]) as usize;
        (rs[i], rs[j])
    }
}

/// Number of improving ordered pairs admitted by `filter`.
pub fn count_pairs(records: &[CandidateRecord], filter: &PairFilter) -> u64 {
    PairSpace::new(records, filter).total
}

/// Draws up to `max_pairs` improving pairs uniformly without replacement.
pub fn extract_pairs(records: &[CandidateRecord], filter: &PairFilter, max_pairs: usize, seed: u64) -> Vec<TrainingPair> {
    let space = PairSpace::new(records, filter);
    let take = (max_pairs as u64).min(space.total);
    if take == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, space.total as usize, take as usize)
        .into_iter()
        .map(|k| {
            let (a, b) = space.pair(k as u64);
            TrainingPair { baseline: a.clone(), addon: b.clone() }
        })
        .collect()
}

/// One line of the fine-tuning corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub prompt: String,
    pub completion: String,
}

pub fn corpus_entry(pair: &TrainingPair) -> Result<CorpusEntry, RepoError> {
    let target = pair.addon.score().expect("pairs hold valid records");
    let prompt = build_prompt(&pair.baseline, target)?;
    Ok(CorpusEntry { prompt: prompt.text, completion: completion_text(&pair.addon.source, &pair.addon.hp) })
}

/// Writes one corpus line per pair and returns the count written.
pub fn export_corpus(pairs: &[TrainingPair], path: &Path) -> Result<usize, RepoError> {
    if pairs.is_empty() {
        return Err(RepoError::NoPairs);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    for pair in pairs {
        let line = serde_json::to_string(&corpus_entry(pair)?).map_err(|e| RepoError::InvalidRecord(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(pairs.len())
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusEntry>, RepoError> {
    Ok(read_lines(path)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn valid(source: &str, acc: f64) -> CandidateRecord {
        CandidateRecord::new(
            0,
            source.to_string(),
            Hyperparams::default(),
            "toy",
            RecordVerdict::Valid,
            Some(acc),
            Some(10),
            None,
            ProposerTag::Bootstrap,
        )
    }

    #[test]
    fn id_is_sha256_of_source() {
        assert_eq!(source_id(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn pair_counts() {
        let two = vec![valid("a", 0.2), valid("b", 0.3)];
        assert_eq!(count_pairs(&two, &PairFilter::default()), 1);
        let pairs = extract_pairs(&two, &PairFilter::default(), 10, 0);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].baseline.source.as_str(), pairs[0].addon.source.as_str()), ("a", "b"));
        let three = vec![valid("a", 0.2), valid("b", 0.3), valid("c", 0.5)];
        assert_eq!(count_pairs(&three, &PairFilter::default()), 3);
    }

    #[test]
    fn ties_and_datasets_do_not_pair() {
        let mut other = valid("c", 0.9);
        other.dataset = "elsewhere".into();
        let recs = vec![valid("a", 0.2), valid("b", 0.2), other];
        assert_eq!(count_pairs(&recs, &PairFilter::default()), 0);
    }

    #[test]
    fn record_invariants() {
        let mut r = valid("x", 0.5);
        r.accuracy = None;
        assert!(r.check().is_err());
        let mut r = valid("x", 0.5);
        r.source.push('!');
        assert!(r.check().is_err());
    }
}
