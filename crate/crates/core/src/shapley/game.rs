//! Coalition value functions: declared tables and benchmark accuracy.
//!
//! A game file lists the tools and the value of each coalition:
//!
//! ```toml
//! tools = ["A", "B", "C"]
//! default = 0.0          # optional, for coalitions not listed
//!
//! [[values]]
//! coalition = ["A", "B"]
//! value = 0.6
//! ```

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use serde::Deserialize;
use thiserror::Error;

use super::{CoalitionValue, ValueError};
use crate::adapters::ToolRegistry;
use crate::agent::AgentBackend;
use crate::bench::{run_benchmark, BenchOptions, Dataset};

#[derive(Debug, Error)]
pub enum GameError {
    #[error("failed to read game file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGame {
    tools: Vec<String>,
    default: Option<f64>,
    #[serde(default)]
    values: Vec<RawValue>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawValue {
    coalition: Vec<String>,
    value: f64,
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

/// A value table over coalitions.
#[derive(Debug, Clone)]
pub struct TableGame {
    pub tools: Vec<String>,
    values: HashMap<Vec<String>, f64>,
    default: Option<f64>,
}

impl TableGame {
    pub fn from_pairs<'a>(
        tools: Vec<String>,
        pairs: impl IntoIterator<Item = (Vec<&'a str>, f64)>,
        default: Option<f64>,
    ) -> Self {
        let values = pairs
            .into_iter()
            .map(|(c, v)| (sorted(c.into_iter().map(str::to_string).collect()), v))
            .collect();
        Self { tools, values, default }
    }

    /// Tabulate `f` over every subset of `tools`.
    pub fn from_fn(tools: Vec<String>, f: impl Fn(&[String]) -> f64) -> Self {
        let n = tools.len();
        let values = (0u64..1 << n)
            .map(|mask| {
                let members: Vec<String> = (0..n)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| tools[i].clone())
                    .collect();
                let key = sorted(members);
                let v = f(&key);
                (key, v)
            })
            .collect();
        Self {
            tools,
            values,
            default: None,
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, GameError> {
        let invalid = |message: String| GameError::Invalid {
            path: path.to_path_buf(),
            message,
        };
        let raw: RawGame = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        let known: HashSet<&String> = raw.tools.iter().collect();
        if known.len() != raw.tools.len() {
            return Err(invalid("duplicate tool in `tools`".into()));
        }
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        if let Some(d) = raw.default {
            if !in_range(d) {
                return Err(invalid(format!("default {d} is outside [0, 1]")));
            }
        }
        let mut values = HashMap::new();
        for row in raw.values {
            if let Some(t) = row.coalition.iter().find(|t| !known.contains(t)) {
                return Err(invalid(format!("coalition names unknown tool `{t}`")));
            }
            if !in_range(row.value) {
                return Err(invalid(format!("value {} is outside [0, 1]", row.value)));
            }
            let key = sorted(row.coalition);
            if values.insert(key.clone(), row.value).is_some() {
                return Err(invalid(format!("coalition {{{}}} listed twice", key.join(", "))));
            }
        }
        Ok(Self {
            tools: raw.tools,
            values,
            default: raw.default,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GameError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GameError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn value(&self, coalition: &[String]) -> Option<f64> {
        self.values.get(&sorted(coalition.to_vec())).copied().or(self.default)
    }
}

#[async_trait]
impl CoalitionValue for TableGame {
    async fn evaluate(&self, coalition: &[String]) -> Result<f64, ValueError> {
        self.value(coalition)
            .ok_or_else(|| ValueError::new("no value declared for this coalition"))
    }
}

/// `v(S)` = micro accuracy of a benchmark run with only the tools in `S`.
pub struct BenchmarkValue {
    pub dataset: Dataset,
    pub backend: Arc<dyn AgentBackend>,
    pub registry: ToolRegistry,
    pub seeds: Vec<u64>,
    pub options: BenchOptions,
}

#[async_trait]
impl CoalitionValue for BenchmarkValue {
    async fn evaluate(&self, coalition: &[String]) -> Result<f64, ValueError> {
        let registry = self
            .registry
            .restrict(coalition)
            .map_err(|e| ValueError::new(e.to_string()))?;
        let report = run_benchmark(
            &self.dataset,
            self.backend.as_ref(),
            &registry,
            &self.seeds,
            &self.options,
        )
        .await
        .map_err(|e| ValueError::new(e.to_string()))?;
        Ok(report.micro_average)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_game_file() {
        let text = r#"
tools = ["A", "B", "C"]

[[values]]
coalition = ["B", "A"]
value = 0.6
"#;
        let g = TableGame::parse(text, Path::new("g.toml")).unwrap();
        assert_eq!(g.value(&["A".into(), "B".into()]), Some(0.6));
        assert_eq!(g.value(&["C".into()]), None);
    }

    #[test]
    fn bad_game_files() {
        for text in [
            "tools = [\"A\"]\n[[values]]\ncoalition = [\"Z\"]\nvalue = 0.1\n",
            "tools = [\"A\"]\n[[values]]\ncoalition = [\"A\"]\nvalue = 1.5\n",
            "tools = [\"A\", \"A\"]\n",
            "tools = [\"A\"]\n[[values]]\ncoalition = [\"A\"]\nvalue = 0.1\n[[values]]\ncoalition = [\"A\"]\nvalue = 0.2\n",
            "tools = [\"A\"]\nextra = 1\n",
        ] {
            assert!(TableGame::parse(text, Path::new("g.toml")).is_err(), "{text}");
        }
    }
}
