//! Trajectory statistics over a repository: trend regression, population
//! tests, permutation test, rank correlations and the Pareto frontier.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::netdsl;
use crate::repository::{CandidateRecord, ProposerTag, RepoError, Snapshot};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("all x values are equal")]
    DegenerateInput,
    #[error("each group needs at least 2 values (got {early} and {late})")]
    GroupTooSmall { early: usize, late: usize },
    #[error("records do not share one layer schema: {0}")]
    SchemaMismatch(String),
    #[error("repository has no records")]
    EmptyRepository,
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (n - 1 denominator).
fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn student_t_sf(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    if t == f64::INFINITY {
        return 0.0;
    }
    if t == f64::NEG_INFINITY {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    dist.sf(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value of the slope.
    pub p_value: f64,
}

/// Ordinary least squares of y on x with a two-sided slope test.
pub fn regress_epoch_max(points: &[(f64, f64)]) -> Result<Regression, StatsError> {
    let n = points.len();
    if n < 3 {
        return Err(StatsError::TooFewPoints { need: 3, got: n });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(StatsError::DegenerateInput);
    }
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let df = (n - 2) as f64;
    let se = (sse / df / sxx).sqrt();
    let t = if se > 0.0 {
        slope / se
    } else if slope == 0.0 {
        0.0
    } else {
        slope.signum() * f64::INFINITY
    };
    let p_value = (2.0 * student_t_sf(t.abs(), df)).min(1.0);
    Ok(Regression { slope, intercept, t, df, p_value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// One-tailed p for the alternative mean(late) > mean(early).
    pub p_value: f64,
    pub mean_early: f64,
    pub mean_late: f64,
    pub n_early: usize,
    pub n_late: usize,
}

/// Welch's unequal-variance t-test, one-tailed toward a larger late mean.
pub fn t_test_one_tailed(early: &[f64], late: &[f64]) -> Result<WelchTest, StatsError> {
    if early.len() < 2 || late.len() < 2 {
        return Err(StatsError::GroupTooSmall { early: early.len(), late: late.len() });
    }
    let (m1, m2) = (mean(early), mean(late));
    let (q1, q2) = (variance(early) / early.len() as f64, variance(late) / late.len() as f64);
    let se = (q1 + q2).sqrt();
    let diff = m2 - m1;
    let (t, df) = if se > 0.0 {
        let df = (q1 + q2).powi(2)
            / (q1.powi(2) / (early.len() as f64 - 1.0) + q2.powi(2) / (late.len() as f64 - 1.0));
        (diff / se, df)
    } else {
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        (t, (early.len() + late.len() - 2) as f64)
    };
    Ok(WelchTest {
        t,
        df,
        p_value: student_t_sf(t, df),
        mean_early: m1,
        mean_late: m2,
        n_early: early.len(),
        n_late: late.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMode {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub delta: f64,
    pub p_value: f64,
    /// Assignments enumerated (exact) or random draws (Monte Carlo).
    pub permutations: u64,
    pub mode: PermutationMode,
}

/// `C(n, k)`, saturating at `u64::MAX`.
pub fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Advances `idx` to the next k-combination of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

const MC_CHUNK: u64 = 10_000;

/// Permutation test of mean(late) - mean(early) under exchangeability.
/// Enumerates every assignment when there are at most `n_perm` of them,
/// otherwise draws `n_perm` random assignments with the add-one estimator.
pub fn permutation_test(early: &[f64], late: &[f64], n_perm: u64, seed: u64) -> PermutationResult {
    let (ne, nl) = (early.len(), late.len());
    let pooled: Vec<f64> = early.iter().chain(late).copied().collect();
    let n = pooled.len();
    let delta = mean(late) - mean(early);
    if ne == 0 || nl == 0 {
        return PermutationResult { delta: f64::NAN, p_value: 1.0, permutations: 0, mode: PermutationMode::Exact };
    }
    // The statistic is increasing in the late-group sum, so compare sums with
    // a small tolerance that absorbs summation-order rounding.
    let observed: f64 = late.iter().sum();
    let tol = 1e-9 * (pooled.iter().map(|v| v.abs()).sum::<f64>() + 1.0);
    let at_least = |s: f64| s >= observed - tol;

    let assignments = binomial(n as u64, nl as u64);
    if assignments <= n_perm {
        let mut idx: Vec<usize> = (0..nl).collect();
        let mut hits = 0u64;
        loop {
            let s: f64 = idx.iter().map(|&i| pooled[i]).sum();
            hits += u64::from(at_least(s));
            if !next_combination(&mut idx, n) {
                break;
            }
        }
        return PermutationResult {
            delta,
            p_value: hits as f64 / assignments as f64,
            permutations: assignments,
            mode: PermutationMode::Exact,
        };
    }

    let chunks = n_perm.div_ceil(MC_CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let mut buf = pooled.clone();
            let draws = MC_CHUNK.min(n_perm - c * MC_CHUNK);
            let mut hits = 0u64;
            for _ in 0..draws {
                let (chosen, _) = buf.partial_shuffle(&mut rng, nl);
                hits += u64::from(at_least(chosen.iter().sum()));
            }
            hits
        })
        .sum();
    PermutationResult {
        delta,
        p_value: (hits + 1) as f64 / (n_perm + 1) as f64,
        permutations: n_perm,
        mode: PermutationMode::MonteCarlo,
    }
}

/// Ranks starting at 1 with ties given their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho; `None` when either variable is constant or n < 2.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "paired samples");
    if x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn is_power_of_two(w: u64) -> bool {
    w.count_ones() == 1
}

pub fn non_power_of_two_fraction(widths: &[u64]) -> f64 {
    if widths.is_empty() {
        return 0.0;
    }
    widths.iter().filter(|w| !is_power_of_two(**w)).count() as f64 / widths.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionCorrelation {
    pub layer: String,
    pub rho: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelCorrelations {
    pub positions: Vec<PositionCorrelation>,
    /// Over every width entry of every record.
    pub non_power_of_two_fraction: f64,
    pub top_configuration: Vec<(String, u64)>,
    pub top_accuracy: f64,
}

/// Width vector of a record's source.
pub fn record_widths(r: &CandidateRecord) -> Option<Vec<(String, u64)>> {
    netdsl::parse(&r.source).ok().map(|n| n.width_vector())
}

/// Spearman correlation of each width position with accuracy.
pub fn channel_correlations(records: &[CandidateRecord]) -> Result<ChannelCorrelations, StatsError> {
    let rows: Vec<(Vec<(String, u64)>, f64)> =
        records.iter().filter_map(|r| Some((record_widths(r)?, r.score()?))).collect();
    if rows.len() < 5 {
        return Err(StatsError::TooFewPoints { need: 5, got: rows.len() });
    }
    let schema: Vec<&str> = rows[0].0.iter().map(|(l, _)| l.as_str()).collect();
    for (widths, _) in &rows {
        let names: Vec<&str> = widths.iter().map(|(l, _)| l.as_str()).collect();
        if names != schema {
            return Err(StatsError::SchemaMismatch(format!("{names:?} vs {schema:?}")));
        }
    }
    let acc: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let positions = schema
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let w: Vec<f64> = rows.iter().map(|r| r.0[i].1 as f64).collect();
            PositionCorrelation { layer: layer.to_string(), rho: spearman(&w, &acc), n: rows.len() }
        })
        .collect();
    let all: Vec<u64> = rows.iter().flat_map(|r| r.0.iter().map(|(_, w)| *w)).collect();
    let best = rows.iter().enumerate().max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0))).expect("non-empty").1;
    Ok(ChannelCorrelations {
        positions,
        non_power_of_two_fraction: non_power_of_two_fraction(&all),
        top_configuration: best.0.clone(),
        top_accuracy: best.1,
    })
}

/// Indices of points not dominated under (min params, max accuracy), sorted
/// by params ascending then accuracy descending then index.
pub fn pareto_indices(points: &[(u64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.cmp(&points[b].0).then(points[b].1.total_cmp(&points[a].1)).then(a.cmp(&b)));
    let mut frontier = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let params = points[order[i]].0;
        let top = points[order[i]].1;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == params {
            if top > best && points[order[j]].1 == top {
                frontier.push(order[j]);
            }
            j += 1;
        }
        best = best.max(top);
        i = j;
    }
    frontier
}

pub fn pareto_frontier(records: &[CandidateRecord]) -> Vec<&CandidateRecord> {
    let scored: Vec<&CandidateRecord> = records.iter().filter(|r| r.score().is_some() && r.params.is_some()).collect();
    let points: Vec<(u64, f64)> = scored.iter().map(|r| (r.params.unwrap(), r.score().unwrap())).collect();
    pareto_indices(&points).into_iter().map(|i| scored[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub early: (u32, u32),
    pub late: (u32, u32),
    pub window: usize,
    pub n_perm: u64,
    pub seed: u64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig { early: (0, 5), late: (16, 21), window: 3, n_perm: 100_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: u32,
    pub attempted: usize,
    pub valid: usize,
    pub mean: Option<f64>,
    pub max: Option<f64>,
    pub rolling_mean: Option<f64>,
    pub best_so_far: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub regression: Option<Regression>,
    pub t_test: Option<WelchTest>,
    pub permutation: Option<PermutationResult>,
    pub attempted: usize,
    pub valid: usize,
    /// Over generated candidates; the bootstrap population is excluded.
    pub validity_rate: Option<f64>,
    /// Best bootstrap accuracy, or the first epoch's maximum without one.
    pub best_initial: Option<f64>,
    pub global_max: Option<f64>,
    pub relative_improvement: Option<f64>,
    pub epochs: Vec<EpochPoint>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub id: String,
    pub epoch: u32,
    pub params: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub config: AnalyzeConfig,
    pub records: usize,
    pub trajectory: TrajectoryStats,
    pub channels: Option<ChannelCorrelations>,
    pub pareto: Vec<FrontierPoint>,
}

fn in_range(e: u32, (a, b): (u32, u32)) -> bool {
    a <= e && e <= b
}

/// Computes every statistic from a repository snapshot.
pub fn analyze_snapshot(snap: &Snapshot, cfg: &AnalyzeConfig) -> Result<Analysis, StatsError> {
    if snap.records.is_empty() {
        return Err(StatsError::EmptyRepository);
    }
    let mut notes = Vec::new();
    let generated = |r: &&CandidateRecord| r.proposer_kind != ProposerTag::Bootstrap;
    let last_epoch = snap
        .records
        .iter()
        .filter(generated)
        .map(|r| r.epoch)
        .chain(snap.epochs.iter().filter(|e| !e.bootstrap).map(|e| e.epoch))
        .max();
    let mut by_epoch: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut attempted_records: BTreeMap<u32, usize> = BTreeMap::new();
    for r in snap.records.iter().filter(generated) {
        *attempted_records.entry(r.epoch).or_default() += 1;
        if let Some(a) = r.score() {
            by_epoch.entry(r.epoch).or_default().push(a);
        }
    }
    // The epoch log counts every attempt, including proposer failures and
    // duplicate sources the repository stores once, so it wins over record
    // counts when present.
    let logged: BTreeMap<u32, (usize, usize)> =
        snap.epochs.iter().filter(|e| !e.bootstrap).map(|e| (e.epoch, (e.attempted, e.valid_count))).collect();
    let best_initial = snap.records.iter().filter(|r| !generated(r)).filter_map(|r| r.score()).reduce(f64::max);

    let mut epochs = Vec::new();
    let mut best = best_initial;
    let mut means: Vec<Option<f64>> = Vec::new();
    for e in last_epoch.map(|l| 0..=l).into_iter().flatten() {
        let accs = by_epoch.get(&e).cloned().unwrap_or_default();
        let m = (!accs.is_empty()).then(|| mean(&accs));
        let mx = accs.iter().copied().reduce(f64::max);
        best = match (best, mx) {
            (Some(b), Some(x)) => Some(b.max(x)),
            (b, x) => b.or(x),
        };
        means.push(m);
        let window: Vec<f64> = means[means.len().saturating_sub(cfg.window.max(1))..].iter().flatten().copied().collect();
        epochs.push(EpochPoint {
            epoch: e,
            attempted: logged.get(&e).map(|l| l.0).unwrap_or_else(|| attempted_records.get(&e).copied().unwrap_or(0)),
            valid: logged.get(&e).map(|l| l.1).unwrap_or(accs.len()),
            mean: m,
            max: mx,
            rolling_mean: (!window.is_empty()).then(|| mean(&window)),
            best_so_far: best,
        });
    }

    let series: Vec<(f64, f64)> = epochs.iter().filter_map(|p| Some((p.epoch as f64, p.max?))).collect();
    let regression = match regress_epoch_max(&series) {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("regression skipped: {e}"));
            None
        }
    };
    let pop = |range| -> Vec<f64> {
        snap.valid().filter(generated).filter(|r| in_range(r.epoch, range)).filter_map(|r| r.score()).collect()
    };
    let (early, late) = (pop(cfg.early), pop(cfg.late));
    let t_test = match t_test_one_tailed(&early, &late) {
        Ok(t) => Some(t),
        Err(e) => {
            notes.push(format!("t-test skipped: {e}"));
            None
        }
    };
    let permutation = (!early.is_empty() && !late.is_empty()).then(|| permutation_test(&early, &late, cfg.n_perm, cfg.seed));
    if permutation.is_none() {
        notes.push("permutation test skipped: an empty phase".into());
    }

    let attempted: usize = epochs.iter().map(|p| p.attempted).sum();
    let valid_generated: usize = epochs.iter().map(|p| p.valid).sum();
    let stored = snap.valid().filter(generated).count();
    if stored != valid_generated {
        notes.push(format!("{valid_generated} valid generated candidates, {stored} stored as distinct records"));
    }
    let validity_rate = (attempted > 0).then(|| valid_generated as f64 / attempted as f64);
    let best_initial = best_initial.or_else(|| epochs.first().and_then(|p| p.max));
    let global_max = best;
    let relative_improvement = match (best_initial, global_max) {
        (Some(b), Some(g)) if b > 0.0 => Some((g - b) / b),
        _ => None,
    };

    let channels = match channel_correlations(&snap.records) {
        Ok(c) => Some(c),
        Err(e) => {
            notes.push(format!("channel correlations skipped: {e}"));
            None
        }
    };
    let pareto = pareto_frontier(&snap.records)
        .into_iter()
        .map(|r| FrontierPoint { id: r.id.clone(), epoch: r.epoch, params: r.params.unwrap(), accuracy: r.score().unwrap() })
        .collect();
    Ok(Analysis {
        config: cfg.clone(),
        records: snap.records.len(),
        trajectory: TrajectoryStats {
            regression,
            t_test,
            permutation,
            attempted,
            valid: valid_generated,
            validity_rate,
            best_initial,
            global_max,
            relative_improvement,
            epochs,
            notes,
        },
        channels,
        pareto,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub const REPORT_FILE: &str = "report.json";

/// Writes `report.json` and the per-figure CSV series into `out_dir`.
pub fn write_report(analysis: &Analysis, snap: &Snapshot, out_dir: &Path) -> Result<(), StatsError> {
    fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(analysis).expect("analysis serializes");
    fs::write(out_dir.join(REPORT_FILE), json + "\n")?;

    let ep = &analysis.trajectory.epochs;
    let mut mean_csv = String::from("epoch,valid,mean_accuracy,max_accuracy\n");
    let mut rolling_csv = format!("epoch,rolling_mean_w{}\n", analysis.config.window);
    let mut success_csv = String::from("epoch,attempted,valid,success_rate\n");
    let mut best_csv = String::from("epoch,best_so_far\n");
    for p in ep {
        let _ = writeln!(mean_csv, "{},{},{},{}", p.epoch, p.valid, opt(p.mean), opt(p.max));
        let _ = writeln!(rolling_csv, "{},{}", p.epoch, opt(p.rolling_mean));
        let rate = (p.attempted > 0).then(|| p.valid as f64 / p.attempted as f64);
        let _ = writeln!(success_csv, "{},{},{},{}", p.epoch, p.attempted, p.valid, opt(rate));
        let _ = writeln!(best_csv, "{},{}", p.epoch, opt(p.best_so_far));
    }
    let on_front: std::collections::BTreeSet<&str> = analysis.pareto.iter().map(|f| f.id.as_str()).collect();
    let mut scatter = String::from("id,epoch,params,accuracy,pareto\n");
    for r in snap.valid() {
        if let (Some(params), Some(acc)) = (r.params, r.score()) {
            let _ = writeln!(scatter, "{},{},{},{:.6},{}", r.id, r.epoch, params, acc, u8::from(on_front.contains(r.id.as_str())));
        }
    }
    fs::write(out_dir.join("mean_per_epoch.csv"), mean_csv)?;
    fs::write(out_dir.join("rolling_mean.csv"), rolling_csv)?;
    fs::write(out_dir.join("success_rate.csv"), success_csv)?;
    fs::write(out_dir.join("best_so_far.csv"), best_csv)?;
    fs::write(out_dir.join("accuracy_vs_params.csv"), scatter)?;
    Ok(())
}

/// Loads the repository at `repo_dir`, analyzes it and writes the report files.
pub fn analyze(repo_dir: &Path, cfg: &AnalyzeConfig, out_dir: &Path) -> Result<Analysis, StatsError> {
    let snap = Snapshot::load(repo_dir)?;
    let analysis = analyze_snapshot(&snap, cfg)?;
    write_report(&analysis, &snap, out_dir)?;
    Ok(analysis)
}
