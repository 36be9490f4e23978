//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use quadpipe::fixtures::seeded_corpus;
use quadpipe::gateway::{
    GatewayError, Handshake, MockWorker, Outgoing, Request, Response, Transport,
};
use quadpipe::pipeline::PipelineConfig;

pub const CONFIG: &str = r#"
seed = 11
[quality]
threshold_mode = "percentile"
p = 60.0
tau_abar = -0.2
[reference]
tau_atilde = 0.0
[dedup]
delta = 0.05
target_cluster_size = 256
[redist]
prior = { "cap-0" = 1, "cap-1" = 1, "cap-2" = 1, "cap-3" = 1, "cap-4" = 1, "cap-5" = 1, "cap-6" = 1, "cap-7" = 1, "cap-8" = 1, "cap-9" = 1 }
mode = "downsample_only"
"#;

pub fn config(overrides: &[(&str, &str)]) -> PipelineConfig {
    let owned: Vec<(String, String)> = overrides
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let cfg = PipelineConfig::from_toml_with(CONFIG, &owned).expect("test config parses");
    cfg.validate().expect("test config is valid");
    cfg
}

/// Writes a seeded corpus of `n` samples to `dir/D.jsonl`.
pub fn write_corpus(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let path = dir.join("D.jsonl");
    std::fs::write(&path, seeded_corpus(n, seed).to_jsonl()).expect("write corpus");
    path
}

/// A mock worker that answers with a `model-error` failure for requests whose
/// payload names one of the `failing` sample ids, and counts every batch.
pub struct FaultyTransport {
    pub worker: MockWorker,
    pub handshake: Handshake,
    pub failing: BTreeSet<String>,
    pub batches: AtomicU64,
    pub largest_batch: AtomicU64,
}

impl FaultyTransport {
    pub fn new(worker: MockWorker, failing: impl IntoIterator<Item = String>) -> Self {
        FaultyTransport {
            handshake: worker.handshake(),
            worker,
            failing: failing.into_iter().collect(),
            batches: AtomicU64::new(0),
            largest_batch: AtomicU64::new(0),
        }
    }
}

impl Transport for FaultyTransport {
    fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn exchange(
        &self,
        batch: &[Outgoing],
        _timeout: Duration,
    ) -> Result<Vec<String>, GatewayError> {
        self.batches.fetch_add(1, Ordering::Relaxed);
        self.largest_batch
            .fetch_max(batch.len() as u64, Ordering::Relaxed);
        Ok(batch
            .iter()
            .map(|o| {
                let req: Request =
                    serde_json::from_str(&o.line).expect("gateway sends valid requests");
                let id = req
                    .payload
                    .get("sample_id")
                    .and_then(|v| v.as_str())
                    .unwrap_or("");
                if self.failing.contains(id) {
                    serde_json::to_string(&Response::failure(&req.id, "model-error", "injected"))
                        .unwrap()
                } else {
                    self.worker.handle_line(&o.line)
                }
            })
            .collect())
    }
}
