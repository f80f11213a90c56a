//! Candidate generation: prompt construction, response extraction, and the
//! random-mutation, external-service and replay proposers.

use std::fs;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{Hyperparams, Optimizer};
use crate::mutator::{mutate_once, MutateError, MutatorConfig};
use crate::netdsl;
use crate::repository::CandidateRecord;

pub const TEMPLATE_VERSION: u32 = 1;
pub const ROLE_LINE: &str = "You are a machine learning model designer.";

const NN_OPEN: &str = "<nn>";
const NN_CLOSE: &str = "</nn>";
const HP_OPEN: &str = "<hp>";
const HP_CLOSE: &str = "</hp>";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("target {target:.4} is not higher than the baseline {baseline:.4}")]
    TargetNotHigher { baseline: f64, target: f64 },
    #[error("baseline record {0} is not a valid evaluated candidate")]
    BaselineNotValid(String),
    #[error("baseline source contains a reserved tag")]
    ReservedTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
}

/// `<nn>` block with the source followed by an `<hp>` block.
pub fn completion_text(source: &str, hp: &Hyperparams) -> String {
    format!("{NN_OPEN}\n{}\n{NN_CLOSE}\n{HP_OPEN}\n{}\n{HP_CLOSE}\n", source.trim_end_matches('\n'), hp.to_kv())
}

/// Renders the versioned prompt template for improving on `baseline`.
pub fn build_prompt(baseline: &CandidateRecord, target: f64) -> Result<Prompt, PromptError> {
    let base = baseline.score().ok_or_else(|| PromptError::BaselineNotValid(baseline.id.clone()))?;
    if !(target > base) {
        return Err(PromptError::TargetNotHigher { baseline: base, target });
    }
    if [NN_OPEN, NN_CLOSE, HP_OPEN, HP_CLOSE].iter().any(|t| baseline.source.contains(t)) {
        return Err(PromptError::ReservedTag);
    }
    let metric = &baseline.metric_name;
    let text = format!(
        "{ROLE_LINE}\n\
         Write a new network definition in the netdsl language that increases the '{metric}' metric value to at least {target:.4}.\n\
         The baseline below reaches {metric} {base:.4} on dataset '{dataset}' (baseline id {id}).\n\
         Reply with the full definition wrapped in nn tags and its hyperparameters wrapped in hp tags, as below.\n\
         {body}",
        dataset = baseline.dataset,
        id = baseline.id,
        body = completion_text(&baseline.source, &baseline.hp),
    );
    Ok(Prompt { text })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { temperature: 0.8, top_k: 70, top_p: 0.9, max_tokens: 4096 }
    }
}

impl GenerationParams {
    pub fn is_valid(&self) -> bool {
        self.temperature > 0.0 && self.top_p > 0.0 && self.top_p <= 1.0 && self.top_k >= 1 && self.max_tokens >= 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProposerKind {
    RandomMutation(MutatorConfig),
    External { endpoint: String, params: GenerationParams, concurrency: usize },
    Replay(PathBuf),
}

#[derive(Debug, Error)]
pub enum ProposeError {
    #[error("external generator unreachable after {attempts} attempts: {last}")]
    ExternalUnreachable { attempts: u32, last: String },
    #[error("replay transcript exhausted after {0} responses")]
    ReplayExhausted(usize),
    #[error("replay transcript line {line}: {message}")]
    ReplayFormat { line: usize, message: String },
    #[error("invalid proposer configuration: {0}")]
    Config(String),
    #[error("random mutation failed: {0}")]
    Mutation(#[from] MutateError),
}

/// One generation request: the prompt plus what a non-LLM proposer needs.
#[derive(Debug, Clone)]
pub struct ProposalRequest {
    pub prompt: Prompt,
    pub baseline_source: String,
    pub baseline_hp: Hyperparams,
    /// Seed of the per-request random stream.
    pub seed: u64,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    request_id: u64,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    top_k: u32,
    top_p: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

pub const EXTERNAL_ATTEMPTS: u32 = 3;
pub const BACKOFF_BASE: Duration = Duration::from_millis(100);

pub struct Proposer {
    kind: ProposerKind,
    replay: Vec<String>,
    cursor: usize,
    client: Option<reqwest::blocking::Client>,
    next_request: u64,
}

impl Proposer {
    pub fn new(kind: ProposerKind) -> Result<Proposer, ProposeError> {
        let mut p = Proposer { kind: kind.clone(), replay: Vec::new(), cursor: 0, client: None, next_request: 0 };
        match kind {
            ProposerKind::RandomMutation(cfg) if !cfg.is_valid() => {
                return Err(ProposeError::Config("mutator config out of range".into()));
            }
            ProposerKind::RandomMutation(_) => {}
            ProposerKind::External { endpoint, params, concurrency } => {
                let url = reqwest::Url::parse(&endpoint).map_err(|e| ProposeError::Config(format!("endpoint `{endpoint}`: {e}")))?;
                if !matches!(url.scheme(), "http" | "https") {
                    return Err(ProposeError::Config(format!("endpoint `{endpoint}` is not http(s)")));
                }
                if !params.is_valid() || concurrency == 0 {
                    return Err(ProposeError::Config("generation params out of range".into()));
                }
                let client = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(120))
                    .build()
                    .map_err(|e| ProposeError::Config(e.to_string()))?;
                p.client = Some(client);
            }
            ProposerKind::Replay(path) => {
                let text = fs::read_to_string(&path)
                    .map_err(|e| ProposeError::Config(format!("replay file {}: {e}", path.display())))?;
                p.replay = parse_transcript(&text)?;
            }
        }
        Ok(p)
    }

    pub fn kind(&self) -> &ProposerKind {
        &self.kind
    }

    /// Continues after `served` responses of an earlier session: a replay
    /// transcript skips them and external request ids carry on from there.
    pub fn resume_after(&mut self, served: usize) {
        self.cursor = served.min(self.replay.len());
        self.next_request = served as u64;
    }

    /// Produces one raw response per request, in request order. Failures are
    /// per request and never abort the batch.
    pub fn propose_batch(&mut self, requests: &[ProposalRequest]) -> Vec<Result<String, ProposeError>> {
        match &self.kind {
            ProposerKind::RandomMutation(cfg) => requests.par_iter().map(|r| random_proposal(r, cfg)).collect(),
            ProposerKind::Replay(_) => requests
                .iter()
                .map(|_| {
                    let out = self.replay.get(self.cursor).cloned().ok_or(ProposeError::ReplayExhausted(self.replay.len()));
                    self.cursor += usize::from(out.is_ok());
                    out
                })
                .collect(),
            ProposerKind::External { endpoint, params, concurrency } => {
                let client = self.client.as_ref().expect("external client");
                let first = self.next_request;
                self.next_request += requests.len() as u64;
                let call = |(i, r): (usize, &ProposalRequest)| post_with_retry(client, endpoint, params, first + i as u64, &r.prompt.text);
                if *concurrency <= 1 {
                    requests.iter().enumerate().map(call).collect()
                } else {
                    match rayon::ThreadPoolBuilder::new().num_threads(*concurrency).build() {
                        Ok(pool) => pool.install(|| requests.par_iter().enumerate().map(call).collect()),
                        Err(_) => requests.iter().enumerate().map(call).collect(),
                    }
                }
            }
        }
    }
}

fn random_proposal(r: &ProposalRequest, cfg: &MutatorConfig) -> Result<String, ProposeError> {
    let net = netdsl::parse(&r.baseline_source).map_err(MutateError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let (mutated, _) = mutate_once(&net, &r.baseline_source, cfg, &mut rng)?;
    let text = netdsl::print(&mutated).map_err(|v| MutateError::InternalInconsistency(v.to_string()))?;
    Ok(completion_text(&text, &r.baseline_hp))
}

fn post_with_retry(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    params: &GenerationParams,
    request_id: u64,
    prompt: &str,
) -> Result<String, ProposeError> {
    let body = WireRequest {
        request_id,
        prompt,
        max_tokens: params.max_tokens,
        temperature: params.temperature,
        top_k: params.top_k,
        top_p: params.top_p,
    };
    let mut last = String::new();
    for attempt in 0..EXTERNAL_ATTEMPTS {
        if attempt > 0 {
            thread::sleep(BACKOFF_BASE * 2u32.pow(attempt - 1));
        }
        let result = client
            .post(endpoint)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json::<WireResponse>());
        match result {
            Ok(resp) => return Ok(resp.text),
            Err(e) => {
                log::debug!("request {request_id} attempt {} failed: {e}", attempt + 1);
                last = e.to_string();
            }
        }
    }
    Err(ProposeError::ExternalUnreachable { attempts: EXTERNAL_ATTEMPTS, last })
}

/// A transcript holds one JSON string literal per non-empty line.
pub fn parse_transcript(text: &str) -> Result<Vec<String>, ProposeError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<String>(l).map_err(|e| ProposeError::ReplayFormat { line: i + 1, message: e.to_string() })
        })
        .collect()
}

pub fn write_transcript(responses: &[String]) -> String {
    responses.iter().map(|r| serde_json::to_string(r).expect("string serializes") + "\n").collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub source: String,
    pub hp: Hyperparams,
    /// No usable `<hp>` block: `hp` holds the supplied defaults.
    pub hp_defaulted: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Extraction {
    Ok(Extracted),
    Failure { reason: String },
}

impl Extraction {
    pub fn ok(self) -> Option<Extracted> {
        match self {
            Extraction::Ok(e) => Some(e),
            Extraction::Failure { .. } => None,
        }
    }
}

/// Content of the first block to close; when blocks nest, the innermost
/// opening tag before that close is used.
fn first_block<'a>(raw: &'a str, open: &str, close: &str, warnings: &mut Vec<String>) -> Option<&'a str> {
    let end = raw.find(close)?;
    let start = raw[..end].rfind(open)? + open.len();
    let opens = raw.matches(open).count();
    if opens > 1 {
        warnings.push(format!("{opens} {open} blocks found; using the first complete one"));
    }
    Some(&raw[start..end])
}

fn parse_hp(block: &str, defaults: &Hyperparams) -> Result<(Hyperparams, bool), String> {
    let mut hp = defaults.clone();
    let mut seen = 0;
    for line in block.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line.split_once('=').ok_or_else(|| format!("hp line `{line}` is not key=value"))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |_| format!("bad value `{value}` for {key}");
        match key {
            "batch_size" => hp.batch_size = value.parse().map_err(bad)?,
            "optimizer" => hp.optimizer = value.parse::<Optimizer>()?,
            "learning_rate" | "lr" => hp.learning_rate = value.parse().map_err(|_| format!("bad value `{value}` for {key}"))?,
            "epochs" => hp.epochs = value.parse().map_err(bad)?,
            other => return Err(format!("unknown hyperparameter `{other}`")),
        }
        seen += 1;
    }
    if !hp.is_valid() {
        return Err("hyperparameters out of range".into());
    }
    Ok((hp, seen < 4))
}

/// Pulls the candidate source and hyperparameters out of a raw response.
pub fn extract_candidate(raw: &str, defaults: &Hyperparams) -> Extraction {
    let mut warnings = Vec::new();
    let Some(source) = first_block(raw, NN_OPEN, NN_CLOSE, &mut warnings) else {
        let reason = if raw.contains(NN_OPEN) { "unterminated <nn> block" } else { "no <nn> block" };
        return Extraction::Failure { reason: reason.into() };
    };
    let source = source.trim_matches('\n').to_string() + "\n";
    let (hp, hp_defaulted) = match first_block(raw, HP_OPEN, HP_CLOSE, &mut warnings) {
        None => {
            warnings.push("no <hp> block; using default hyperparameters".into());
            (defaults.clone(), true)
        }
        Some(block) => match parse_hp(block, defaults) {
            Ok(v) => v,
            Err(reason) => return Extraction::Failure { reason },
        },
    };
    Extraction::Ok(Extracted { source, hp, hp_defaulted, warnings })
}

pub mod mock {
    //! Minimal HTTP generator stand-in serving scripted responses in order.

    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{SocketAddr, TcpListener, TcpStream};
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};
    use std::thread::JoinHandle;

    pub struct MockServer {
        addr: SocketAddr,
        stop: Arc<AtomicBool>,
        served: Arc<AtomicUsize>,
        prompts: Arc<Mutex<Vec<String>>>,
        handle: Option<JoinHandle<()>>,
    }

    #[derive(Debug, Clone, Default)]
    pub struct MockScript {
        pub responses: Vec<String>,
        /// Requests answered with HTTP 503 before any scripted response.
        pub fail_first: usize,
        /// Start again from the first response once the script runs out.
        pub cycle: bool,
    }

    impl MockServer {
        pub fn start(script: MockScript) -> std::io::Result<MockServer> {
            Self::bind("127.0.0.1:0", script)
        }

        pub fn bind(addr: &str, script: MockScript) -> std::io::Result<MockServer> {
            let listener = TcpListener::bind(addr)?;
            let addr = listener.local_addr()?;
            let stop = Arc::new(AtomicBool::new(false));
            let served = Arc::new(AtomicUsize::new(0));
            let prompts = Arc::new(Mutex::new(Vec::new()));
            let (stop2, served2, prompts2) = (stop.clone(), served.clone(), prompts.clone());
            let handle = std::thread::spawn(move || {
                let mut requests = 0usize;
                for stream in listener.incoming() {
                    if stop2.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    requests += 1;
                    let reply = if requests <= script.fail_first {
                        None
                    } else {
                        let k = requests - script.fail_first - 1;
                        let n = script.responses.len();
                        match (n, script.cycle) {
                            (0, _) => None,
                            (_, true) => Some(script.responses[k % n].clone()),
                            (_, false) => script.responses.get(k).cloned(),
                        }
                    };
                    if let Ok(body) = handle_connection(stream, reply) {
                        served2.fetch_add(1, Ordering::SeqCst);
                        prompts2.lock().unwrap().push(body);
                    }
                }
            });
            Ok(MockServer { addr, stop, served, prompts, handle: Some(handle) })
        }

        pub fn url(&self) -> String {
            format!("http://{}/generate", self.addr)
        }

        pub fn addr(&self) -> SocketAddr {
            self.addr
        }

        /// Requests that were read completely, whatever the reply.
        pub fn served(&self) -> usize {
            self.served.load(Ordering::SeqCst)
        }

        /// Raw request bodies in arrival order.
        pub fn bodies(&self) -> Vec<String> {
            self.prompts.lock().unwrap().clone()
        }

        /// Serves until the process exits.
        pub fn join(mut self) {
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
    }

    impl Drop for MockServer {
        fn drop(&mut self) {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
    }

    fn handle_connection(stream: TcpStream, reply: Option<String>) -> std::io::Result<String> {
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut content_length = 0usize;
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.is_empty() {
            return Err(std::io::ErrorKind::UnexpectedEof.into());
        }
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.trim().eq_ignore_ascii_case("content-length") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body)?;
        let (status, payload) = match reply {
            Some(text) => ("200 OK", serde_json::json!({ "text": text }).to_string()),
            None => ("503 Service Unavailable", "{\"error\":\"unavailable\"}".to_string()),
        };
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
            payload.len()
        )?;
        stream.flush()?;
        Ok(String::from_utf8_lossy(&body).into_owned())
    }
}
