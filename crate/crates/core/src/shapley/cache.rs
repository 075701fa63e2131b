//! Memoized coalition values.
//!
//! Each distinct coalition is evaluated at most once, also under concurrent
//! requests. With a cache file, every fresh value is appended as one JSON
//! line, `{"coalition": ["a", "b"], "value": 0.61, "timestamp": 1760000000}`
//! (timestamp in Unix seconds), and existing lines are loaded on open so an
//! interrupted run resumes. Later lines win; an unparsable line (a torn
//! write) is skipped with a warning.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::OnceCell;
use tracing::warn;

use super::{CoalitionValue, ValueError};

#[derive(Debug, Error)]
#[error("coalition cache {path}: {source}")]
pub struct CacheError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    coalition: Vec<String>,
    value: f64,
    timestamp: u64,
}

type Slot = Arc<OnceCell<f64>>;

#[derive(Default)]
pub struct MemoCache {
    slots: Mutex<HashMap<Vec<String>, Slot>>,
    evaluations: AtomicUsize,
    loaded: usize,
    file: Option<(PathBuf, Mutex<File>)>,
}

fn key(coalition: &[String]) -> Vec<String> {
    let mut k = coalition.to_vec();
    k.sort();
    k
}

impl MemoCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn persistent(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let err = |source| CacheError {
            path: path.clone(),
            source,
        };
        let mut slots = HashMap::new();
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    match serde_json::from_str::<CacheLine>(line) {
                        Ok(l) => {
                            slots.insert(key(&l.coalition), Arc::new(OnceCell::new_with(Some(l.value))));
                        }
                        Err(e) => warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), i + 1),
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(err(e)),
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(err)?;
        Ok(Self {
            loaded: slots.len(),
            slots: Mutex::new(slots),
            evaluations: AtomicUsize::new(0),
            file: Some((path, Mutex::new(file))),
        })
    }

    /// Number of calls made to the value function through this cache.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::SeqCst)
    }

    /// Number of coalitions read from the cache file.
    pub fn loaded(&self) -> usize {
        self.loaded
    }

    pub fn len(&self) -> usize {
        self.slots.lock().unwrap().values().filter(|s| s.initialized()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cached(&self, coalition: &[String]) -> Option<f64> {
        self.slots
            .lock()
            .unwrap()
            .get(&key(coalition))
            .and_then(|s| s.get().copied())
    }

    pub async fn get_or_eval(&self, coalition: &[String], v: &dyn CoalitionValue) -> Result<f64, ValueError> {
        let k = key(coalition);
        let slot = self.slots.lock().unwrap().entry(k.clone()).or_default().clone();
        slot.get_or_try_init(|| async {
            self.evaluations.fetch_add(1, Ordering::SeqCst);
            let value = v.evaluate(&k).await?;
            if !(0.0..=1.0).contains(&value) {
                return Err(ValueError::new(format!("value {value} is outside [0, 1]")));
            }
            self.append(&k, value);
            Ok(value)
        })
        .await
        .copied()
    }

    fn append(&self, coalition: &[String], value: f64) {
        let Some((path, file)) = &self.file else { return };
        let line = CacheLine {
            coalition: coalition.to_vec(),
            value,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or_default(),
        };
        let mut text = serde_json::to_string(&line).expect("serializable");
        text.push('\n');
        let mut f = file.lock().unwrap();
        if let Err(e) = f.write_all(text.as_bytes()).and_then(|_| f.flush()) {
            warn!("{}: failed to persist coalition value: {e}", path.display());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use async_trait::async_trait;

    struct Slow(AtomicUsize);

    #[async_trait]
    impl CoalitionValue for Slow {
        async fn evaluate(&self, coalition: &[String]) -> Result<f64, ValueError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            tokio::time::sleep(std::time::Duration::from_millis(20)).await;
            Ok(coalition.len() as f64 / 10.0)
        }
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[tokio::test]
    async fn concurrent_requests_share_one_evaluation() {
        let cache = MemoCache::in_memory();
        let v = Slow(AtomicUsize::new(0));
        let (a, b) = (names(&["x", "y"]), names(&["y", "x"]));
        let reqs = (0..8).map(|i| cache.get_or_eval(if i % 2 == 0 { &a } else { &b }, &v));
        let values = futures::future::join_all(reqs).await;
        assert!(values.iter().all(|r| *r.as_ref().unwrap() == 0.2));
        assert_eq!(v.0.load(Ordering::SeqCst), 1);
        assert_eq!(cache.evaluations(), 1);
    }

    #[tokio::test]
    async fn persisted_values_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let v = Slow(AtomicUsize::new(0));
        {
            let cache = MemoCache::persistent(&path).unwrap();
            cache.get_or_eval(&names(&["b", "a"]), &v).await.unwrap();
            cache.get_or_eval(&names(&["c"]), &v).await.unwrap();
        }
        // a torn trailing write
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"coalition\": [\"d\"")
            .unwrap();
        let cache = MemoCache::persistent(&path).unwrap();
        assert_eq!(cache.loaded(), 2);
        assert_eq!(cache.get_or_eval(&names(&["a", "b"]), &v).await.unwrap(), 0.2);
        assert_eq!(cache.evaluations(), 0);
        assert_eq!(v.0.load(Ordering::SeqCst), 2);
    }

    #[tokio::test]
    async fn failures_are_not_cached() {
        struct Flaky(AtomicUsize);
        #[async_trait]
        impl CoalitionValue for Flaky {
            async fn evaluate(&self, _: &[String]) -> Result<f64, ValueError> {
                if self.0.fetch_add(1, Ordering::SeqCst) == 0 {
                    Err(ValueError::new("boom"))
                } else {
                    Ok(0.5)
                }
            }
        }
        let cache = MemoCache::in_memory();
        let v = Flaky(AtomicUsize::new(0));
        assert!(cache.get_or_eval(&names(&["a"]), &v).await.is_err());
        assert_eq!(cache.get_or_eval(&names(&["a"]), &v).await.unwrap(), 0.5);
        assert!(cache.get_or_eval(&names(&["z"]), &ConstValue(1.5)).await.is_err());
    }

    struct ConstValue(f64);

    #[async_trait]
    impl CoalitionValue for ConstValue {
        async fn evaluate(&self, _: &[String]) -> Result<f64, ValueError> {
            Ok(self.0)
        }
    }
}
