#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use async_trait::async_trait;
use audiotoolagent::shapley::{CoalitionValue, TableGame, ValueError};
use rand::Rng;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

pub fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub type Key = BTreeSet<String>;

/// A game as a plain table keyed by member set.
pub struct Game {
    pub tools: Vec<String>,
    pub table: HashMap<Vec<String>, f64>,
}

impl Game {
    pub fn from_fn(tools: Vec<String>, f: impl Fn(&Key) -> f64) -> Self {
        let n = tools.len();
        let mut table = HashMap::new();
        for mask in 0u32..1 << n {
            let key: Key = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| tools[i].clone())
                .collect();
            let v = f(&key);
            table.insert(key.into_iter().collect(), v);
        }
        Self { tools, table }
    }

    pub fn random(tools: Vec<String>, rng: &mut impl Rng) -> Self {
        let n = tools.len();
        let mut table = HashMap::new();
        for mask in 0u32..1 << n {
            let key: Key = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| tools[i].clone())
                .collect();
            table.insert(key.into_iter().collect(), rng.gen::<f64>());
        }
        Self { tools, table }
    }

    pub fn v(&self, key: &Key) -> f64 {
        self.table[&key.iter().cloned().collect::<Vec<_>>()]
    }

    pub fn to_table_game(&self) -> TableGame {
        let table = self.table.clone();
        TableGame::from_fn(self.tools.clone(), move |s| table[s])
    }
}

/// Counts calls into a table game.
pub struct Counting {
    pub inner: TableGame,
    pub calls: AtomicUsize,
}

impl Counting {
    pub fn new(inner: TableGame) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl CoalitionValue for Counting {
    async fn evaluate(&self, coalition: &[String]) -> Result<f64, ValueError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.evaluate(coalition).await
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, left: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..left.len() {
            let x = left.remove(k);
            prefix.push(x);
            go(prefix, left, out);
            prefix.pop();
            left.insert(k, x);
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}

pub struct OracleValue {
    pub mean: f64,
    pub pop_se: f64,
    pub n: usize,
}

/// Brute force: walk every permutation and average the qualifying marginals.
pub fn brute_force_shapley(game: &Game, min_pred: usize) -> BTreeMap<String, OracleValue> {
    let mut deltas: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for perm in permutations(game.tools.len()) {
        let mut pred = Key::new();
        for (k, &i) in perm.iter().enumerate() {
            let tool = &game.tools[i];
            if k >= min_pred {
                let mut with = pred.clone();
                with.insert(tool.clone());
                deltas
                    .entry(tool.clone())
                    .or_default()
                    .push(game.v(&with) - game.v(&pred));
            }
            pred.insert(tool.clone());
        }
    }
    deltas
        .into_iter()
        .map(|(t, ds)| {
            let n = ds.len() as f64;
            let mean = ds.iter().sum::<f64>() / n;
            let var = ds.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
            (
                t,
                OracleValue {
                    mean,
                    pop_se: (var / n).sqrt(),
                    n: ds.len(),
                },
            )
        })
        .collect()
}

/// Judge a tool reply against the gold answer without the library matcher:
/// a leading `(x)`, `x)` or `x.` label decides by position, otherwise the
/// reply must name the gold choice as whole words and no other choice.
pub fn oracle_reply_correct(reply: &str, choices: &[String], gold: &str) -> bool {
    let lower = reply.trim().to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let label = match chars.as_slice() {
        ['(', c, ')', ..] if c.is_ascii_lowercase() => Some(*c),
        [c, ')' | '.', rest @ ..] if c.is_ascii_lowercase() && (rest.is_empty() || rest[0] == ' ') => Some(*c),
        _ => None,
    };
    let gold_idx = choices.iter().position(|c| c == gold).unwrap();
    if let Some(c) = label {
        return (c as usize - 'a' as usize) == gold_idx;
    }
    let words: Vec<String> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    let named: Vec<usize> = choices
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let cw: Vec<String> = c.to_lowercase().split_whitespace().map(str::to_string).collect();
            words.windows(cw.len()).any(|w| w == cw.as_slice())
        })
        .map(|(i, _)| i)
        .collect();
    named == [gold_idx]
}

/// `(audio glob, reply)` rows for the `audio_qa` tool, final attempt only.
pub fn scripted_replies() -> Vec<(String, String)> {
    let text = std::fs::read_to_string(fixture("mock/tools.toml")).unwrap();
    let doc: toml::Table = toml::from_str(&text).unwrap();
    doc["responses"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r.get("tool").and_then(|t| t.as_str()) == Some("audio_qa") && r.get("attempt").is_none())
        .map(|r| {
            (
                r["audio"].as_str().unwrap().trim_start_matches('*').to_string(),
                r["text"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

pub struct FixtureItem {
    pub id: String,
    pub audio: String,
    pub choices: Vec<String>,
    pub gold: String,
}

pub fn fixture_items() -> Vec<FixtureItem> {
    std::fs::read_to_string(fixture("mock/dataset.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            FixtureItem {
                id: v["id"].as_str().unwrap().into(),
                audio: v["audio"].as_str().unwrap().into(),
                choices: v["choices"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|c| c.as_str().unwrap().to_string())
                    .collect(),
                gold: v["answer"].as_str().unwrap().into(),
            }
        })
        .collect()
}

/// Items the mock tool answers correctly, counted from the fixture files.
pub fn scripted_correct_count() -> usize {
    let replies = scripted_replies();
    fixture_items()
        .iter()
        .filter(|item| {
            let reply = &replies
                .iter()
                .find(|(suffix, _)| item.audio.ends_with(suffix.as_str()))
                .unwrap()
                .1;
            oracle_reply_correct(reply, &item.choices, &item.gold)
        })
        .count()
}
