//! Monte Carlo Shapley attribution of tools.
//!
//! Stage 1 draws random permutations of the tools. Stage 2 walks each
//! permutation and, for every position whose predecessor set `S` has at least
//! `min_predecessor_size` members, records the marginal contribution
//! `v(S ∪ {i}) − v(S)` of the tool `i` at that position. A tool's value is
//! the mean of its recorded contributions and its standard error is the
//! sample standard deviation over `√n`.
//!
//! Permutations come from [`crate::sampling`] seeded with the configured
//! seed. Coalition values go through a [`MemoCache`], so each distinct
//! coalition is evaluated once per run.

mod cache;
mod game;
mod plot;

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use async_trait::async_trait;
use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::{seeded_rng, shuffle};

pub use cache::{CacheError, MemoCache};
pub use game::{BenchmarkValue, GameError, TableGame};
pub use plot::{emit_attribution_plot_data, render_svg, PlotError};

pub const DEFAULT_MIN_PREDECESSOR_SIZE: usize = 2;
pub const MAX_EXACT_TOOLS: usize = 10;
const MAX_TOOLS: usize = 64;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{message}")]
pub struct ValueError {
    pub message: String,
}

impl ValueError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
        }
    }
}

/// The value `v(S)` of a coalition, in `[0, 1]`. Coalitions arrive as
/// sorted tool names.
#[async_trait]
pub trait CoalitionValue: Send + Sync {
    async fn evaluate(&self, coalition: &[String]) -> Result<f64, ValueError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    pub tool_name: String,
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub n_permutations: usize,
    pub min_predecessor_size: usize,
    pub seed: u64,
    pub cache_path: Option<PathBuf>,
    /// Coalition evaluations allowed in flight at once.
    pub concurrency: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            n_permutations: 100,
            min_predecessor_size: DEFAULT_MIN_PREDECESSOR_SIZE,
            seed: 0,
            cache_path: None,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum ShapleyError {
    #[error("at least {min} tools are required, got {got}")]
    TooFewTools { min: usize, got: usize },
    #[error("{got} tools exceed the limit of {max}")]
    TooManyTools { max: usize, got: usize },
    #[error("tool `{0}` listed twice")]
    DuplicateTool(String),
    #[error("n_permutations must be at least 1")]
    NoPermutations,
    #[error("evaluating coalition {{{}}} failed: {message}", coalition.join(", "))]
    Evaluation { coalition: Vec<String>, message: String },
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Estimates plus bookkeeping from one run.
#[derive(Debug, Clone)]
pub struct ShapleyRun {
    pub estimates: Vec<ShapleyEstimate>,
    /// Distinct coalitions whose value was needed.
    pub coalitions: usize,
    /// Calls made to the value function.
    pub evaluations: usize,
    /// Coalitions found in the cache file at start.
    pub loaded_from_cache: usize,
}

fn check_tools(tools: &[String], min: usize, max: usize) -> Result<(), ShapleyError> {
    if tools.len() < min {
        return Err(ShapleyError::TooFewTools { min, got: tools.len() });
    }
    if tools.len() > max {
        return Err(ShapleyError::TooManyTools { max, got: tools.len() });
    }
    let mut seen = HashSet::new();
    for t in tools {
        if !seen.insert(t) {
            return Err(ShapleyError::DuplicateTool(t.clone()));
        }
    }
    Ok(())
}

fn members(tools: &[String], mask: u64) -> Vec<String> {
    tools
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, t)| t.clone())
        .collect()
}

async fn evaluate_masks(
    tools: &[String],
    masks: HashSet<u64>,
    v: &dyn CoalitionValue,
    cache: &MemoCache,
    concurrency: usize,
) -> Result<HashMap<u64, f64>, ShapleyError> {
    let mut masks: Vec<u64> = masks.into_iter().collect();
    masks.sort_unstable();
    stream::iter(masks)
        .map(|mask| async move {
            let coalition = members(tools, mask);
            match cache.get_or_eval(&coalition, v).await {
                Ok(value) => Ok((mask, value)),
                Err(e) => Err(ShapleyError::Evaluation {
                    coalition,
                    message: e.message,
                }),
            }
        })
        .buffer_unordered(concurrency.max(1))
        .try_collect()
        .await
}

fn open_cache(cfg: &EstimatorConfig) -> Result<MemoCache, ShapleyError> {
    Ok(match &cfg.cache_path {
        Some(p) => MemoCache::persistent(p)?,
        None => MemoCache::in_memory(),
    })
}

/// Sampled estimate, using a cache opened from `cfg.cache_path`.
pub async fn estimate_shapley(
    tools: &[String],
    v: &dyn CoalitionValue,
    cfg: &EstimatorConfig,
) -> Result<ShapleyRun, ShapleyError> {
    let cache = open_cache(cfg)?;
    estimate_shapley_with_cache(tools, v, cfg, &cache).await
}

pub async fn estimate_shapley_with_cache(
    tools: &[String],
    v: &dyn CoalitionValue,
    cfg: &EstimatorConfig,
    cache: &MemoCache,
) -> Result<ShapleyRun, ShapleyError> {
    check_tools(tools, 2, MAX_TOOLS)?;
    if cfg.n_permutations == 0 {
        return Err(ShapleyError::NoPermutations);
    }
    let n = tools.len();

    // Stage 1: sample permutations and list qualifying marginals.
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut marginals: Vec<(usize, u64)> = Vec::new();
    let mut needed = HashSet::new();
    for _ in 0..cfg.n_permutations {
        shuffle(&mut order, &mut rng);
        let mut pred = 0u64;
        for (k, &i) in order.iter().enumerate() {
            if k >= cfg.min_predecessor_size {
                marginals.push((i, pred));
                needed.insert(pred);
                needed.insert(pred | 1 << i);
            }
            pred |= 1 << i;
        }
    }

    // Stage 2: evaluate and average.
    let coalitions = needed.len();
    let values = evaluate_masks(tools, needed, v, cache, cfg.concurrency).await?;
    let mut stats = vec![Welford::default(); n];
    for (i, pred) in marginals {
        stats[i].push(values[&(pred | 1 << i)] - values[&pred]);
    }
    let estimates = tools
        .iter()
        .zip(&stats)
        .filter(|(_, s)| s.n > 0)
        .map(|(t, s)| ShapleyEstimate {
            tool_name: t.clone(),
            value: s.mean,
            std_error: s.std_error(),
            n_samples: s.n,
        })
        .collect();
    Ok(ShapleyRun {
        estimates,
        coalitions,
        evaluations: cache.evaluations(),
        loaded_from_cache: cache.loaded(),
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn std_error(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let var = (self.m2 / (self.n - 1) as f64).max(0.0);
        (var / self.n as f64).sqrt()
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|x| x as f64).product()
}

/// Exact attribution under the same qualification rule, equivalent to
/// enumerating all permutations: a predecessor set of size `s` precedes tool
/// `i` in `s!·(n−1−s)!` of them. `std_error` is the population standard
/// deviation over all qualifying marginals divided by `√n`.
pub async fn exact_shapley(
    tools: &[String],
    v: &dyn CoalitionValue,
    min_predecessor_size: usize,
) -> Result<ShapleyRun, ShapleyError> {
    exact_shapley_with_cache(tools, v, min_predecessor_size, &MemoCache::in_memory(), 4).await
}

pub async fn exact_shapley_with_cache(
    tools: &[String],
    v: &dyn CoalitionValue,
    min_predecessor_size: usize,
    cache: &MemoCache,
    concurrency: usize,
) -> Result<ShapleyRun, ShapleyError> {
    check_tools(tools, 1, MAX_EXACT_TOOLS)?;
    let n = tools.len();
    let full = (1u64 << n) - 1;
    let needed: HashSet<u64> = (0..=full)
        .filter(|m| {
            let size = m.count_ones() as usize;
            size >= min_predecessor_size && (size > min_predecessor_size || size < n)
        })
        .collect();
    let coalitions = needed.len();
    let values = evaluate_masks(tools, needed, v, cache, concurrency).await?;

    let mut estimates = Vec::new();
    for (i, tool) in tools.iter().enumerate() {
        let bit = 1u64 << i;
        let mut terms: Vec<(f64, f64)> = (0..=full)
            .filter(|s| s & bit == 0 && s.count_ones() as usize >= min_predecessor_size)
            .map(|s| {
                let size = s.count_ones() as usize;
                (
                    values[&(s | bit)] - values[&s],
                    factorial(size) * factorial(n - 1 - size),
                )
            })
            .collect();
        if terms.is_empty() {
            continue;
        }
        // Fixed summation order makes symmetric tools bit-identical.
        terms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let total: f64 = terms.iter().map(|t| t.1).sum();
        let mean = terms.iter().map(|(d, w)| d * w).sum::<f64>() / total;
        let var = terms.iter().map(|(d, w)| w * (d - mean) * (d - mean)).sum::<f64>() / total;
        estimates.push(ShapleyEstimate {
            tool_name: tool.clone(),
            value: mean,
            std_error: (var / total).sqrt(),
            n_samples: total as usize,
        });
    }
    Ok(ShapleyRun {
        estimates,
        coalitions,
        evaluations: cache.evaluations(),
        loaded_from_cache: cache.loaded(),
    })
}
