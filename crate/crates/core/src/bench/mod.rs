//! Benchmark harness: datasets, answer matching, multi-seed runs, reports.

mod convert;
mod dataset;
mod matcher;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::ToolRegistry;
use crate::agent::{run_session, AgentBackend, AudioTask, SessionOptions, SessionOutcome, Turn};
use crate::tagparse::parse_turn;

pub use convert::{convert_dataset, ConvertError, SourceFormat};
pub use dataset::{
    load_dataset, parse_dataset, subsample, AudioField, Dataset, DatasetError, DatasetOptions, DatasetRecord,
};
pub use matcher::{match_answer, match_open, normalize, resolve_choice, MatchOutcome, MatchStage, OVERLAP_THRESHOLD};
pub use report::{emit_report, read_report, ReportError, REPORT_FILE, SEEDS_FILE, SUMMARY_FILE};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("at least one seed is required")]
    NoSeeds,
    #[error("seed {0} listed twice")]
    DuplicateSeed(u64),
    #[error("parallelism must be at least 1")]
    ZeroParallelism,
}

/// Scored outcome of one item under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub task_id: String,
    pub seed: u64,
    pub categories: Vec<String>,
    pub extracted: Option<String>,
    pub matched_choice: Option<usize>,
    pub match_stage: Option<MatchStage>,
    pub correct: bool,
    pub tool_call_count: usize,
    pub outcome: SessionOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub dataset: String,
    pub seeds: Vec<u64>,
    /// Item results across all seeds.
    pub n_items: usize,
    pub correct: usize,
    pub per_category: BTreeMap<String, CategoryScore>,
    /// Correct over all item results.
    pub micro_average: f64,
    /// Unweighted mean of the per-category accuracies.
    pub macro_average: f64,
    pub per_seed: Vec<SeedScore>,
    pub mean_across_seeds: f64,
    pub item_results: Vec<ItemResult>,
}

fn ratio(correct: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        correct as f64 / n as f64
    }
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Mean of `correct / n` ratios (empty `n` counts as 0), computed over a
/// common denominator so it is a single correctly rounded division.
pub fn mean_of_ratios(parts: &[(usize, usize)]) -> f64 {
    if parts.is_empty() {
        return 0.0;
    }
    let exact = || -> Option<f64> {
        let mut lcm: u128 = 1;
        for &(_, n) in parts.iter().filter(|p| p.1 > 0) {
            let n = n as u128;
            lcm = (lcm / gcd(lcm, n)).checked_mul(n)?;
        }
        let mut num: u128 = 0;
        for &(c, n) in parts.iter().filter(|p| p.1 > 0) {
            num = num.checked_add((c as u128).checked_mul(lcm / n as u128)?)?;
        }
        let den = lcm.checked_mul(parts.len() as u128)?;
        let g = gcd(num, den).max(1);
        let (num, den) = (num / g, den / g);
        // exact in f64 only below 2^53
        (num < 1 << 53 && den < 1 << 53).then(|| num as f64 / den as f64)
    };
    exact().unwrap_or_else(|| parts.iter().map(|&(c, n)| ratio(c, n)).sum::<f64>() / parts.len() as f64)
}

impl BenchmarkReport {
    /// Aggregate item results. Results are sorted by `(seed, task_id)` so
    /// the report does not depend on execution order.
    pub fn from_results(dataset: impl Into<String>, seeds: &[u64], mut results: Vec<ItemResult>) -> Self {
        results.sort_by(|a, b| (a.seed, &a.task_id).cmp(&(b.seed, &b.task_id)));
        let correct = results.iter().filter(|r| r.correct).count();

        let mut per_category: BTreeMap<String, CategoryScore> = BTreeMap::new();
        for r in &results {
            for c in r.categories.iter().collect::<BTreeSet<_>>() {
                let e = per_category.entry(c.clone()).or_insert(CategoryScore {
                    n: 0,
                    correct: 0,
                    accuracy: 0.0,
                });
                e.n += 1;
                e.correct += r.correct as usize;
            }
        }
        for s in per_category.values_mut() {
            s.accuracy = ratio(s.correct, s.n);
        }
        let macro_average = mean_of_ratios(&per_category.values().map(|s| (s.correct, s.n)).collect::<Vec<_>>());

        let per_seed: Vec<SeedScore> = seeds
            .iter()
            .map(|&seed| {
                let mine: Vec<_> = results.iter().filter(|r| r.seed == seed).collect();
                let c = mine.iter().filter(|r| r.correct).count();
                SeedScore {
                    seed,
                    n: mine.len(),
                    correct: c,
                    accuracy: ratio(c, mine.len()),
                }
            })
            .collect();
        let mean_across_seeds = mean_of_ratios(&per_seed.iter().map(|s| (s.correct, s.n)).collect::<Vec<_>>());

        Self {
            dataset: dataset.into(),
            seeds: seeds.to_vec(),
            n_items: results.len(),
            correct,
            per_category,
            micro_average: ratio(correct, results.len()),
            macro_average,
            per_seed,
            mean_across_seeds,
            item_results: results,
        }
    }
}

#[derive(Clone)]
pub struct BenchOptions {
    pub parallelism: usize,
    /// Template for every session; the seed is overwritten per run.
    pub session: SessionOptions,
    /// Grades open-ended items when set; the string matcher is used otherwise.
    pub judge: Option<Arc<dyn AgentBackend>>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            parallelism: 4,
            session: SessionOptions::default(),
            judge: None,
        }
    }
}

pub const JUDGE_PROMPT: &str = "You grade answers to audio questions. Given the question, the reference answer \
and a candidate answer, reply with <answer>yes</answer> if the candidate is correct and <answer>no</answer> otherwise.";

async fn judge_open(
    judge: &dyn AgentBackend,
    task: &AudioTask,
    extracted: &str,
    seed: u64,
    opts: &SessionOptions,
) -> bool {
    let gold = task.gold.as_deref().unwrap_or_default();
    let turns = [
        Turn::new(crate::agent::Role::System, JUDGE_PROMPT),
        Turn::new(
            crate::agent::Role::User,
            format!(
                "Question: {}\nReference answer: {gold}\nCandidate answer: {extracted}",
                task.question
            ),
        ),
    ];
    match judge.complete(&turns, seed, &opts.sampling).await {
        Ok(text) => {
            let verdict = parse_turn(&text).answer.unwrap_or(text);
            normalize(&verdict) == "yes"
        }
        Err(_) => false,
    }
}

/// Score a finished session against its task.
pub fn score_item(
    task: &AudioTask,
    seed: u64,
    outcome: SessionOutcome,
    tool_call_count: usize,
    extracted: Option<String>,
) -> ItemResult {
    let (matched_choice, match_stage, correct) = match (&extracted, &task.choices, &task.gold) {
        (Some(e), Some(choices), Some(gold)) => {
            let m = match_answer(e, choices, gold);
            (m.matched_choice, m.stage, m.correct)
        }
        (Some(e), None, Some(gold)) => (None, None, match_open(e, gold)),
        _ => (None, None, false),
    };
    ItemResult {
        task_id: task.id.clone(),
        seed,
        categories: task.categories.clone(),
        extracted,
        matched_choice,
        match_stage,
        correct,
        tool_call_count,
        outcome,
    }
}

async fn run_item(
    task: &AudioTask,
    seed: u64,
    backend: &dyn AgentBackend,
    registry: &ToolRegistry,
    opts: &BenchOptions,
) -> ItemResult {
    let session = SessionOptions {
        seed,
        ..opts.session.clone()
    };
    let trace = run_session(task, backend, registry, &session).await;
    let mut item = score_item(task, seed, trace.outcome, trace.tool_call_count, trace.answer.clone());
    if let (Some(judge), None, Some(extracted)) = (&opts.judge, &task.choices, &trace.answer) {
        item.correct = judge_open(judge.as_ref(), task, extracted, seed, &session).await;
    }
    item
}

/// Run every item under every seed and aggregate.
pub async fn run_benchmark(
    dataset: &Dataset,
    backend: &dyn AgentBackend,
    registry: &ToolRegistry,
    seeds: &[u64],
    opts: &BenchOptions,
) -> Result<BenchmarkReport, BenchError> {
    if seeds.is_empty() {
        return Err(BenchError::NoSeeds);
    }
    let mut seen = BTreeSet::new();
    for &s in seeds {
        if !seen.insert(s) {
            return Err(BenchError::DuplicateSeed(s));
        }
    }
    if opts.parallelism == 0 {
        return Err(BenchError::ZeroParallelism);
    }

    let jobs: Vec<_> = seeds
        .iter()
        .flat_map(|&seed| dataset.items.iter().map(move |task| (seed, task)))
        .map(|(seed, task)| run_item(task, seed, backend, registry, opts))
        .collect();
    let results: Vec<ItemResult> = stream::iter(jobs).buffer_unordered(opts.parallelism).collect().await;

    Ok(BenchmarkReport::from_results(dataset.name.clone(), seeds, results))
}
