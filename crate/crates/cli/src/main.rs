use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use channel_forge::evaluator::{self, EvaluatorKind, SyntheticSpec};
use channel_forge::graph::{build_groups, infer_shapes, report};
use channel_forge::mutator::{bootstrap, MutatorConfig};
use channel_forge::orchestrator::{run_search, BaselinePolicy, ProposerChoice, Search, SearchConfig};
use channel_forge::proposer::mock::{MockScript, MockServer};
use channel_forge::proposer::parse_transcript;
use channel_forge::repository::{export_corpus, extract_pairs, PairFilter, Snapshot, DEFAULT_METRIC};
use channel_forge::stats::{self, AnalyzeConfig};
use channel_forge::{netdsl, verifier};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "channel-forge", version, about = "Constraint-aware channel-width mutation and architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and store the epoch-0 population.
    Bootstrap(RunArgs),
    /// Run (or resume) the full search loop.
    Search(RunArgs),
    /// Run the three-stage verification protocol on a network file.
    Verify { file: PathBuf },
    /// Write mutated variants of a network file.
    Mutate {
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value = "variants")]
        out_dir: PathBuf,
    },
    /// Print inferred shapes and mutation groups of a network file.
    Analyze { file: PathBuf },
    /// Compute trajectory statistics for a repository.
    Stats {
        #[arg(long)]
        repo: PathBuf,
        #[arg(long, value_parser = parse_range, default_value = "0,5")]
        early: (u32, u32),
        #[arg(long, value_parser = parse_range, default_value = "16,21")]
        late: (u32, u32),
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, default_value_t = 100_000)]
        n_perm: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<repo>/report`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Export improving pairs of a repository as a prompt/completion corpus.
    ExportCorpus {
        #[arg(long)]
        repo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        max_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value = DEFAULT_METRIC)]
        metric: String,
    },
    /// Write a synthetic dataset in the CFTD binary format.
    GenToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Toy100)]
        preset: Preset,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve scripted generator responses over HTTP until killed.
    MockServer {
        #[arg(long, default_value = "127.0.0.1:8765")]
        bind: String,
        /// One JSON string per line.
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value_t = 0)]
        fail_first: usize,
        #[arg(long)]
        cycle: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy100,
    Blobs,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvaluatorArg {
    Surrogate,
    Micro,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProposerArg {
    Random,
    External,
    Replay,
}

#[derive(Args)]
struct RunArgs {
    /// TOML file mirroring the search config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    bootstrap_count: Option<usize>,
    #[arg(long, value_enum)]
    proposer: Option<ProposerArg>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long, value_enum)]
    evaluator: Option<EvaluatorArg>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Sample baselines among the k best records instead of all valid ones.
    #[arg(long)]
    top_k: Option<usize>,
    /// Network to start from; the built-in AlexNet-style seed otherwise.
    #[arg(long)]
    seed_file: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

impl RunArgs {
    fn resolve(&self) -> Result<SearchConfig> {
        let mut cfg = match &self.config {
            Some(p) => SearchConfig::load(p)?,
            None => SearchConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.rng_seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(n) = self.candidates {
            cfg.candidates_per_epoch = n;
        }
        if let Some(n) = self.bootstrap_count {
            cfg.bootstrap_count = n;
        }
        if let Some(p) = self.proposer {
            cfg.proposer.kind = match p {
                ProposerArg::Random => ProposerChoice::Random,
                ProposerArg::External => ProposerChoice::External,
                ProposerArg::Replay => ProposerChoice::Replay,
            };
        }
        if self.endpoint.is_some() {
            cfg.proposer.endpoint = self.endpoint.clone();
        }
        if self.transcript.is_some() {
            cfg.proposer.transcript = self.transcript.clone();
        }
        if let Some(e) = self.evaluator {
            cfg.evaluator.kind = match e {
                EvaluatorArg::Surrogate => EvaluatorKind::Surrogate,
                EvaluatorArg::Micro => EvaluatorKind::Micro,
            };
        }
        if self.dataset.is_some() {
            cfg.evaluator.dataset = self.dataset.clone();
        }
        if let Some(k) = self.top_k {
            cfg.baseline_policy = BaselinePolicy::TopK(k);
        }
        if self.seed_file.is_some() {
            cfg.seed_file = self.seed_file.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_range(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once(',').ok_or("expected a,b")?;
    let a: u32 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: u32 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if a > b {
        return Err(format!("empty range {a},{b}"));
    }
    Ok((a, b))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_analysis(a: &stats::Analysis) {
    let t = &a.trajectory;
    println!("records: {}", a.records);
    println!("generated: {}, valid: {}, validity rate: {}", t.attempted, t.valid, fmt_opt(t.validity_rate));
    println!(
        "best initial: {}, global max: {}, relative improvement: {}",
        fmt_opt(t.best_initial),
        fmt_opt(t.global_max),
        fmt_opt(t.relative_improvement)
    );
    if let Some(r) = &t.regression {
        println!("epoch-max trend: slope {:.6}, p {:.4e}", r.slope, r.p_value);
    }
    if let Some(w) = &t.t_test {
        println!("welch t-test (late > early): t {:.4}, df {:.2}, p {:.4e}", w.t, w.df, w.p_value);
    }
    if let Some(p) = &t.permutation {
        println!("permutation test: delta {:.4}, p {:.4e} ({:?}, {})", p.delta, p.p_value, p.mode, p.permutations);
    }
    if let Some(c) = &a.channels {
        for pos in &c.positions {
            println!("spearman {}: {}", pos.layer, fmt_opt(pos.rho));
        }
        println!("non-power-of-two widths: {:.1}%", 100.0 * c.non_power_of_two_fraction);
    }
    println!("pareto frontier: {} models", a.pareto.len());
    for n in &t.notes {
        println!("note: {n}");
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Verify { file } => {
            let report = verifier::verify(&read(&file)?);
            print!("{}", report.to_text());
            return Ok(if report.is_valid() { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Analyze { file } => {
            let net = netdsl::parse(&read(&file)?)?;
            let shapes = infer_shapes(&net)?;
            let coupling = build_groups(&net, &shapes)?;
            print!("{}", report(&net, &shapes, &coupling));
        }
        Command::Mutate { file, seed, count, out_dir } => {
            let src = read(&file)?;
            let out = bootstrap(&src, count, &MutatorConfig::with_seed(seed))?;
            fs::create_dir_all(&out_dir)?;
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("variant");
            let mut manifest = Vec::new();
            for (i, v) in out.variants.iter().enumerate() {
                let name = format!("{stem}_{i:04}.netdsl");
                fs::write(out_dir.join(&name), &v.source)?;
                manifest.push(serde_json::json!({
                    "file": name,
                    "rounds": v.rounds,
                    "widths": v.net.width_vector(),
                }));
            }
            let manifest = serde_json::json!({
                "source": file.display().to_string(),
                "seed": seed,
                "draws": out.draws,
                "duplicate_draws": out.duplicate_draws,
                "verifier_rejections": out.verifier_rejections,
                "variants": manifest,
            });
            fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
            println!("wrote {} variants to {}", out.variants.len(), out_dir.display());
        }
        Command::Bootstrap(args) => {
            let cfg = args.resolve()?;
            let seed_src = cfg.seed_source()?;
            let mut search = Search::open(cfg, &args.out_dir)?;
            if search.bootstrapped() {
                bail!("{} already holds a bootstrapped run", args.out_dir.display());
            }
            search.write_manifest(&seed_src)?;
            let s = search.run_bootstrap(&seed_src)?;
            println!("bootstrap: {} variants, mean {}, max {}", s.valid_count, fmt_opt(s.mean_accuracy), fmt_opt(s.max_accuracy));
        }
        Command::Search(args) => {
            let cfg = args.resolve()?;
            let seed_src = cfg.seed_source()?;
            let out = run_search(cfg, &seed_src, &args.out_dir)?;
            for s in &out.summaries {
                let label = if s.bootstrap { "bootstrap".to_string() } else { format!("epoch {:>2}", s.epoch) };
                println!(
                    "{label:>9}: {:>3}/{:<3} valid  mean {}  max {}  best {}",
                    s.valid_count,
                    s.attempted,
                    fmt_opt(s.mean_accuracy),
                    fmt_opt(s.max_accuracy),
                    fmt_opt(s.best_so_far)
                );
            }
            if let Some(a) = &out.analysis {
                print_analysis(a);
            }
            println!("manifest: {}", out.manifest.display());
            println!("report: {}", out.report_dir.display());
        }
        Command::Stats { repo, early, late, window, n_perm, seed, out_dir } => {
            let cfg = AnalyzeConfig { early, late, window, n_perm, seed };
            let out_dir = out_dir.unwrap_or_else(|| repo.join("report"));
            let a = stats::analyze(&repo, &cfg, &out_dir)?;
            print_analysis(&a);
            println!("report: {}", out_dir.display());
        }
        Command::ExportCorpus { repo, out, max_pairs, seed, dataset, metric } => {
            let snap = Snapshot::load(&repo)?;
            let filter = PairFilter { metric_name: Some(metric), dataset };
            let pairs = extract_pairs(&snap.records, &filter, max_pairs, seed);
            let n = export_corpus(&pairs, &out)?;
            println!("wrote {n} pairs to {}", out.display());
        }
        Command::GenToyData { out, preset, seed } => {
            let mut spec = match preset {
                Preset::Toy100 => SyntheticSpec::toy100(),
                Preset::Blobs => SyntheticSpec::blobs(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = evaluator::synthetic(&spec);
            data.save(&out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::MockServer { bind, responses, fail_first, cycle } => {
            let responses = parse_transcript(&read(&responses)?)?;
            let server = MockServer::bind(&bind, MockScript { responses, fail_first, cycle })?;
            println!("serving on {}", server.url());
            server.join();
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
