//! One abstraction over every model call the pipeline makes.
//!
//! Reward scoring, answer generation, embedding and capability
//! classification all go through a [`Gateway`], which talks to a worker over
//! the line protocol in [`protocol`]. The gateway splits oversize batches to
//! the worker's advertised `batch_limit`, correlates responses by request id,
//! retries transport failures with jittered backoff, caches results, and
//! normalizes embeddings to unit length.

mod cache;
pub mod hash;
mod mock;
pub mod protocol;
mod transport;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use cache::{ScoreCache, CACHE_FILE};
pub use mock::MockWorker;
pub use protocol::{Handshake, Op, Request, Response, Variant};
pub use transport::{MockTransport, Outgoing, StreamTransport, Transport};

use crate::corpus::{CapabilityLabel, Sample};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("worker `{model_id}` does not advertise `{op}`")]
    Unsupported { model_id: String, op: Op },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Io(String),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("worker fault [{code}]: {message}")]
    WorkerFault { code: String, message: String },
    #[error("embedding dimension {got} does not match session dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        last: Box<GatewayError>,
    },
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Timeout(_) | GatewayError::Protocol(_) | GatewayError::Io(_)
        )
    }

    /// Short machine-readable code used in audit reasons.
    pub fn code(&self) -> &str {
        match self {
            GatewayError::Unsupported { .. } => "unsupported-op",
            GatewayError::InvalidRequest(_) => "invalid-request",
            GatewayError::Timeout(_) => "timeout",
            GatewayError::Protocol(_) => "protocol",
            GatewayError::Io(_) => "io",
            GatewayError::Handshake(_) => "handshake",
            GatewayError::WorkerFault { .. } => "worker-fault",
            GatewayError::DimMismatch { .. } => "dim-mismatch",
            GatewayError::Exhausted { .. } => "retries-exhausted",
        }
    }

    fn fault(message: impl Into<String>) -> Self {
        GatewayError::WorkerFault {
            code: "invalid-result".into(),
            message: message.into(),
        }
    }
}

/// Per-item outcome of a batched gateway call.
pub type Outcome<T> = Result<T, GatewayError>;

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            timeout: Duration::from_secs(120),
            retries: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

/// The `(media?, question, answer)` triple a worker sees.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleView {
    pub sample_id: String,
    pub media: Vec<String>,
    pub question: String,
    pub answer: String,
}

impl SampleView {
    pub fn of(sample: &Sample) -> Self {
        Self::with_answer(sample, &sample.answer)
    }

    pub fn with_answer(sample: &Sample, answer: &str) -> Self {
        SampleView {
            sample_id: sample.id.clone(),
            media: sample
                .media_uris()
                .into_iter()
                .map(str::to_string)
                .collect(),
            question: sample.question.clone(),
            answer: answer.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateContext {
    pub sample_id: String,
    pub media: Vec<String>,
    pub question: String,
    pub cues: Vec<String>,
}

impl GenerateContext {
    pub fn of(sample: &Sample) -> Self {
        GenerateContext {
            sample_id: sample.id.clone(),
            media: sample
                .media_uris()
                .into_iter()
                .map(str::to_string)
                .collect(),
            question: sample.question.clone(),
            cues: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenerateMode {
    /// Answer from the question alone; media is never sent.
    VisionAblated,
    /// The foundation model's own answer, with media.
    Reference,
    /// `count` sampled answers at `temperature`.
    Candidate { count: usize, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub variant: Variant,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedAnswer {
    pub sample_id: String,
    pub variant: Variant,
    pub text: String,
    pub temperature: f64,
    pub producer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub sample_id: String,
    pub dim: usize,
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Scales `v` to unit L2 norm in place. Returns false for a zero vector.
pub fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

pub struct Gateway {
    transport: Arc<dyn Transport>,
    handshake: Handshake,
    cache: Option<Arc<ScoreCache>>,
    policy: RetryPolicy,
    batch_limit: usize,
    worker_calls: AtomicU64,
    next_id: AtomicU64,
    transcript: Option<Mutex<Vec<String>>>,
    session_dim: Mutex<Option<usize>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("model_id", &self.handshake.model_id)
            .field("batch_limit", &self.batch_limit)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        let handshake = transport.handshake().clone();
        Gateway {
            batch_limit: handshake.batch_limit.max(1),
            transport,
            handshake,
            cache: None,
            policy: RetryPolicy::default(),
            worker_calls: AtomicU64::new(0),
            next_id: AtomicU64::new(0),
            transcript: None,
            session_dim: Mutex::new(None),
        }
    }

    /// A gateway over an in-process [`MockWorker`].
    pub fn mock(seed: u64, name: &str) -> Self {
        Gateway::new(Arc::new(MockTransport::new(MockWorker::new(seed, name))))
    }

    pub fn with_cache(mut self, cache: Arc<ScoreCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Caps the batch size below the advertised limit.
    pub fn with_batch_limit(mut self, limit: usize) -> Self {
        self.batch_limit = limit.clamp(1, self.handshake.batch_limit.max(1));
        self
    }

    /// Records every request and response line sent through this gateway.
    pub fn with_transcript(mut self) -> Self {
        self.transcript = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn model_id(&self) -> &str {
        &self.handshake.model_id
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    pub fn batch_limit(&self) -> usize {
        self.batch_limit
    }

    /// Requests actually dispatched to the worker (cache hits excluded).
    pub fn worker_calls(&self) -> u64 {
        self.worker_calls.load(Ordering::Relaxed)
    }

    /// Captured lines: requests prefixed `-> `, responses prefixed `<- `.
    pub fn transcript(&self) -> Vec<String> {
        self.transcript
            .as_ref()
            .map(|t| t.lock().expect("transcript lock").clone())
            .unwrap_or_default()
    }

    pub fn supports(&self, op: Op) -> bool {
        self.handshake.capabilities.contains(&op)
    }

    /// Sends one request per payload and returns per-item outcomes in
    /// payload order. Fails as a whole only if the worker lacks `op`.
    pub fn call_many(
        &self,
        op: Op,
        payloads: &[Value],
    ) -> Result<Vec<Outcome<Value>>, GatewayError> {
        if !self.supports(op) {
            return Err(GatewayError::Unsupported {
                model_id: self.handshake.model_id.clone(),
                op,
            });
        }
        let mut results: Vec<Option<Outcome<Value>>> = vec![None; payloads.len()];
        let mut keys: Vec<Option<String>> = vec![None; payloads.len()];
        let mut misses = Vec::new();
        for (i, payload) in payloads.iter().enumerate() {
            if let Some(cache) = &self.cache {
                let key = ScoreCache::key(&self.handshake.model_id, op, payload);
                if let Some(hit) = cache.get(&key) {
                    if protocol::validate_result(op, payload, &hit).is_ok() {
                        results[i] = Some(Ok(hit));
                        continue;
                    }
                }
                keys[i] = Some(key);
            }
            misses.push(i);
        }

        let chunks: Vec<&[usize]> = misses.chunks(self.batch_limit).collect();
        let answered: Vec<Vec<(usize, Outcome<Value>)>> = chunks
            .par_iter()
            .map(|chunk| self.dispatch_with_retry(op, chunk, payloads))
            .collect();
        for (i, outcome) in answered.into_iter().flatten() {
            if let (Ok(v), Some(cache), Some(key)) = (&outcome, &self.cache, keys[i].take()) {
                // A failed cache write only costs a recomputation later.
                let _ = cache.put(key, v.clone());
            }
            results[i] = Some(outcome);
        }
        Ok(results
            .into_iter()
            .map(|r| r.expect("every payload answered"))
            .collect())
    }

    fn dispatch_with_retry(
        &self,
        op: Op,
        idx: &[usize],
        payloads: &[Value],
    ) -> Vec<(usize, Outcome<Value>)> {
        let attempts = self.policy.retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let base =
                    self.policy.backoff.as_secs_f64() * f64::from(1u32 << (attempt - 1).min(16));
                let jitter = rand::rng().random_range(0.0..0.5);
                std::thread::sleep(Duration::from_secs_f64(base * (1.0 + jitter)));
            }
            match self.dispatch_once(op, idx, payloads) {
                Ok(out) => return out,
                Err(e) if e.is_retryable() => last = Some(e),
                Err(e) => return idx.iter().map(|&i| (i, Err(e.clone()))).collect(),
            }
        }
        let err = GatewayError::Exhausted {
            attempts,
            last: Box::new(last.expect("at least one attempt")),
        };
        idx.iter().map(|&i| (i, Err(err.clone()))).collect()
    }

    fn dispatch_once(
        &self,
        op: Op,
        idx: &[usize],
        payloads: &[Value],
    ) -> Result<Vec<(usize, Outcome<Value>)>, GatewayError> {
        let mut by_id: HashMap<String, usize> = HashMap::with_capacity(idx.len());
        let batch: Vec<Outgoing> = idx
            .iter()
            .map(|&i| {
                let id = format!("q{}", self.next_id.fetch_add(1, Ordering::Relaxed));
                let req = Request {
                    id: id.clone(),
                    op,
                    payload: payloads[i].clone(),
                };
                by_id.insert(id.clone(), i);
                Outgoing {
                    id,
                    line: serde_json::to_string(&req).expect("request serializes"),
                }
            })
            .collect();
        self.worker_calls
            .fetch_add(batch.len() as u64, Ordering::Relaxed);
        if let Some(t) = &self.transcript {
            t.lock()
                .expect("transcript lock")
                .extend(batch.iter().map(|o| format!("-> {}", o.line)));
        }
        let lines = self.transport.exchange(&batch, self.policy.timeout)?;
        if let Some(t) = &self.transcript {
            t.lock()
                .expect("transcript lock")
                .extend(lines.iter().map(|l| format!("<- {l}")));
        }

        let mut seen = HashSet::with_capacity(lines.len());
        let mut out = Vec::with_capacity(idx.len());
        for line in &lines {
            let resp: Response = serde_json::from_str(line).map_err(|e| {
                GatewayError::Protocol(format!("unparseable response `{line}`: {e}"))
            })?;
            let Some(&i) = by_id.get(&resp.id) else {
                return Err(GatewayError::Protocol(format!(
                    "response for unknown id `{}`",
                    resp.id
                )));
            };
            if !seen.insert(resp.id.clone()) {
                return Err(GatewayError::Protocol(format!(
                    "duplicate response for id `{}`",
                    resp.id
                )));
            }
            let outcome = if resp.ok {
                protocol::validate_result(op, &payloads[i], &resp.result)
                    .map(|_| resp.result)
                    .map_err(GatewayError::fault)
            } else {
                let err = resp.error.unwrap_or(protocol::WireError {
                    code: "unknown".into(),
                    message: "worker reported failure without detail".into(),
                });
                Err(GatewayError::WorkerFault {
                    code: err.code,
                    message: err.message,
                })
            };
            out.push((i, outcome));
        }
        if out.len() != idx.len() {
            return Err(GatewayError::Protocol(format!(
                "expected {} responses, got {}",
                idx.len(),
                out.len()
            )));
        }
        Ok(out)
    }

    pub fn score_many(
        &self,
        items: &[(SampleView, Variant)],
    ) -> Result<Vec<Outcome<ScoreRecord>>, GatewayError> {
        let mut slots: Vec<Option<Outcome<ScoreRecord>>> = vec![None; items.len()];
        let mut payloads = Vec::new();
        let mut at = Vec::new();
        for (i, (view, variant)) in items.iter().enumerate() {
            if view.answer.is_empty() {
                slots[i] = Some(Err(GatewayError::InvalidRequest(format!(
                    "empty answer for `{}`",
                    view.sample_id
                ))));
                continue;
            }
            payloads.push(json!({
                "sample_id": view.sample_id,
                "variant": variant,
                "question": view.question,
                "answer": view.answer,
                "media": view.media,
            }));
            at.push(i);
        }
        for (i, outcome) in at.into_iter().zip(self.call_many(Op::Reward, &payloads)?) {
            let (view, variant) = &items[i];
            slots[i] = Some(outcome.map(|v| ScoreRecord {
                sample_id: view.sample_id.clone(),
                variant: *variant,
                score: v["score"].as_f64().expect("validated score"),
            }));
        }
        Ok(slots.into_iter().map(Option::unwrap).collect())
    }

    pub fn score(&self, view: &SampleView, variant: Variant) -> Outcome<ScoreRecord> {
        self.score_many(&[(view.clone(), variant)])?.remove(0)
    }

    fn generate_payload(ctx: &GenerateContext, mode: &GenerateMode) -> Result<Value, GatewayError> {
        let mut payload = json!({
            "sample_id": ctx.sample_id,
            "question": ctx.question,
        });
        let obj = payload.as_object_mut().expect("object");
        match *mode {
            GenerateMode::VisionAblated => {
                obj.insert("mode".into(), json!(protocol::mode::VISION_ABLATED));
            }
            GenerateMode::Reference => {
                obj.insert("mode".into(), json!(protocol::mode::REFERENCE));
                obj.insert("media".into(), json!(ctx.media));
            }
            GenerateMode::Candidate { count, temperature } => {
                if count == 0 {
                    return Err(GatewayError::InvalidRequest(
                        "candidate count must be at least 1".into(),
                    ));
                }
                if !(temperature.is_finite() && temperature >= 0.0) {
                    return Err(GatewayError::InvalidRequest(
                        "temperature must be a nonnegative real".into(),
                    ));
                }
                obj.insert("mode".into(), json!(protocol::mode::CANDIDATE));
                obj.insert("media".into(), json!(ctx.media));
                obj.insert("count".into(), json!(count));
                obj.insert("temperature".into(), json!(temperature));
            }
        }
        if !ctx.cues.is_empty() {
            obj.insert("cues".into(), json!(ctx.cues));
        }
        Ok(payload)
    }

    pub fn generate_many(
        &self,
        items: &[(GenerateContext, GenerateMode)],
    ) -> Result<Vec<Outcome<Vec<GeneratedAnswer>>>, GatewayError> {
        let mut slots: Vec<Option<Outcome<Vec<GeneratedAnswer>>>> = vec![None; items.len()];
        let mut payloads = Vec::new();
        let mut at = Vec::new();
        for (i, (ctx, mode)) in items.iter().enumerate() {
            match Self::generate_payload(ctx, mode) {
                Ok(p) => {
                    payloads.push(p);
                    at.push(i);
                }
                Err(e) => slots[i] = Some(Err(e)),
            }
        }
        for (i, outcome) in at.into_iter().zip(self.call_many(Op::Generate, &payloads)?) {
            let (ctx, mode) = &items[i];
            slots[i] = Some(outcome.map(|v| {
                let texts = v["texts"].as_array().expect("validated texts");
                texts
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let (variant, temperature) = match *mode {
                            GenerateMode::VisionAblated => (Variant::VisionAblated, 0.0),
                            GenerateMode::Reference => (Variant::Reference, 0.0),
                            GenerateMode::Candidate { temperature, .. } => {
                                (Variant::Candidate(k), temperature)
                            }
                        };
                        GeneratedAnswer {
                            sample_id: ctx.sample_id.clone(),
                            variant,
                            text: t.as_str().expect("validated text").to_string(),
                            temperature,
                            producer: self.handshake.model_id.clone(),
                        }
                    })
                    .collect()
            }));
        }
        Ok(slots.into_iter().map(Option::unwrap).collect())
    }

    pub fn generate(
        &self,
        ctx: &GenerateContext,
        mode: GenerateMode,
    ) -> Outcome<Vec<GeneratedAnswer>> {
        self.generate_many(&[(ctx.clone(), mode)])?.remove(0)
    }

    /// Asks the generator for `count` new (question, answer) pairs anchored
    /// on the context's media and cues.
    pub fn synthesize_many(
        &self,
        items: &[(GenerateContext, usize)],
    ) -> Result<Vec<Outcome<Vec<SynthesizedPair>>>, GatewayError> {
        let payloads: Vec<Value> = items
            .iter()
            .map(|(ctx, count)| {
                json!({
                    "sample_id": ctx.sample_id,
                    "mode": protocol::mode::SYNTHESIS,
                    "question": ctx.question,
                    "media": ctx.media,
                    "cues": ctx.cues,
                    "count": count,
                })
            })
            .collect();
        Ok(self
            .call_many(Op::Generate, &payloads)?
            .into_iter()
            .map(|o| {
                o.and_then(|v| {
                    serde_json::from_value::<Vec<SynthesizedPair>>(v["pairs"].clone())
                        .map_err(|e| GatewayError::fault(e.to_string()))
                })
            })
            .collect())
    }

    pub fn embed_many(
        &self,
        views: &[SampleView],
    ) -> Result<Vec<Outcome<EmbeddingVector>>, GatewayError> {
        let payloads: Vec<Value> = views
            .iter()
            .map(|v| {
                json!({
                    "sample_id": v.sample_id,
                    "question": v.question,
                    "answer": v.answer,
                    "media": v.media,
                })
            })
            .collect();
        let outcomes = self.call_many(Op::Embed, &payloads)?;
        Ok(views
            .iter()
            .zip(outcomes)
            .map(|(view, o)| {
                let v = o?;
                let mut values: Vec<f64> = v["vector"]
                    .as_array()
                    .expect("validated vector")
                    .iter()
                    .map(|x| x.as_f64().expect("validated component"))
                    .collect();
                if !normalize(&mut values) {
                    return Err(GatewayError::fault("zero embedding"));
                }
                let dim = values.len();
                let mut session = self.session_dim.lock().expect("dim lock");
                match *session {
                    Some(expected) if expected != dim => {
                        return Err(GatewayError::DimMismatch { expected, got: dim })
                    }
                    None => *session = Some(dim),
                    _ => {}
                }
                Ok(EmbeddingVector {
                    sample_id: view.sample_id.clone(),
                    dim,
                    values,
                    model_id: self.handshake.model_id.clone(),
                })
            })
            .collect())
    }

    pub fn embed(&self, view: &SampleView) -> Outcome<EmbeddingVector> {
        self.embed_many(std::slice::from_ref(view))?.remove(0)
    }

    pub fn classify_many(
        &self,
        questions: &[(String, String)],
    ) -> Result<Vec<Outcome<CapabilityLabel>>, GatewayError> {
        let payloads: Vec<Value> = questions
            .iter()
            .map(|(id, q)| json!({ "sample_id": id, "question": q }))
            .collect();
        Ok(self
            .call_many(Op::Classify, &payloads)?
            .into_iter()
            .map(|o| {
                o.map(|v| {
                    let levels: Vec<String> = v["levels"]
                        .as_array()
                        .expect("validated levels")
                        .iter()
                        .map(|l| l.as_str().unwrap_or_default().to_string())
                        .collect();
                    CapabilityLabel::from_levels(&levels)
                })
            })
            .collect())
    }

    pub fn classify(&self, sample_id: &str, question: &str) -> Outcome<CapabilityLabel> {
        self.classify_many(&[(sample_id.to_string(), question.to_string())])?
            .remove(0)
    }
}

/// Where a worker lives: `mock[:name]`, `stdio:<command line>` or
/// `tcp:<host:port>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Mock { name: String },
    Stdio { command: String },
    Tcp { addr: String },
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "mock" {
            return Ok(Endpoint::Mock {
                name: "default".into(),
            });
        }
        match s.split_once(':') {
            Some(("mock", name)) if !name.is_empty() => Ok(Endpoint::Mock { name: name.into() }),
            Some(("stdio", cmd)) if !cmd.trim().is_empty() => Ok(Endpoint::Stdio { command: cmd.trim().into() }),
            Some(("tcp", addr)) if !addr.is_empty() => Ok(Endpoint::Tcp { addr: addr.into() }),
            _ => Err(format!(
                "bad worker endpoint `{s}` (expected mock[:name], stdio:<command> or tcp:<host:port>)"
            )),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Mock { name } => write!(f, "mock:{name}"),
            Endpoint::Stdio { command } => write!(f, "stdio:{command}"),
            Endpoint::Tcp { addr } => write!(f, "tcp:{addr}"),
        }
    }
}

/// Knobs shared by every gateway a run opens.
#[derive(Debug, Clone)]
pub struct GatewayOptions {
    pub seed: u64,
    pub policy: RetryPolicy,
    pub mock_taxonomy_size: u64,
    pub mock_dim: usize,
    pub batch_limit: Option<usize>,
    pub transcripts: bool,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        GatewayOptions {
            seed: 0,
            policy: RetryPolicy::default(),
            mock_taxonomy_size: 10,
            mock_dim: 32,
            batch_limit: None,
            transcripts: false,
        }
    }
}

pub fn connect(
    endpoint: &Endpoint,
    opts: &GatewayOptions,
) -> Result<Arc<dyn Transport>, GatewayError> {
    Ok(match endpoint {
        Endpoint::Mock { name } => {
            let mut worker = MockWorker::new(opts.seed, name.clone());
            worker.taxonomy_size = opts.mock_taxonomy_size;
            worker.dim = opts.mock_dim;
            Arc::new(MockTransport::new(worker))
        }
        Endpoint::Stdio { command } => {
            Arc::new(StreamTransport::spawn(command, opts.policy.timeout)?)
        }
        Endpoint::Tcp { addr } => Arc::new(StreamTransport::connect(addr, opts.policy.timeout)?),
    })
}

/// Role bindings: which endpoint serves each model role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkerBindings {
    pub reward: String,
    pub generator: String,
    pub reference: String,
    pub embedder: String,
    pub classifier: String,
    pub ocl_refs: Vec<String>,
}

impl Default for WorkerBindings {
    fn default() -> Self {
        WorkerBindings {
            reward: "mock:reward".into(),
            generator: "mock:generator".into(),
            reference: "mock:reference".into(),
            embedder: "mock:embedder".into(),
            classifier: "mock:classifier".into(),
            ocl_refs: vec![
                "mock:ref-1".into(),
                "mock:ref-2".into(),
                "mock:ref-3".into(),
            ],
        }
    }
}

/// Lazily connected gateways for every role of a run. Roles bound to the
/// same endpoint share one gateway.
pub struct Workers {
    bindings: WorkerBindings,
    opts: GatewayOptions,
    cache: Option<Arc<ScoreCache>>,
    pool: Mutex<BTreeMap<String, Arc<Gateway>>>,
}

impl Workers {
    pub fn new(
        bindings: WorkerBindings,
        opts: GatewayOptions,
        cache: Option<Arc<ScoreCache>>,
    ) -> Self {
        Workers {
            bindings,
            opts,
            cache,
            pool: Mutex::new(BTreeMap::new()),
        }
    }

    /// All-mock workers with default bindings.
    pub fn mock(seed: u64) -> Self {
        Workers::new(
            WorkerBindings::default(),
            GatewayOptions {
                seed,
                ..GatewayOptions::default()
            },
            None,
        )
    }

    pub fn bindings(&self) -> &WorkerBindings {
        &self.bindings
    }

    pub fn cache(&self) -> Option<&Arc<ScoreCache>> {
        self.cache.as_ref()
    }

    /// Pre-installs a gateway for an endpoint string (fault injection, custom
    /// transports).
    pub fn install(&self, endpoint: &str, gateway: Gateway) {
        self.pool
            .lock()
            .expect("worker pool lock")
            .insert(endpoint.to_string(), Arc::new(gateway));
    }

    pub fn get(&self, endpoint: &str) -> Result<Arc<Gateway>, GatewayError> {
        let mut pool = self.pool.lock().expect("worker pool lock");
        if let Some(g) = pool.get(endpoint) {
            return Ok(g.clone());
        }
        let parsed: Endpoint = endpoint.parse().map_err(GatewayError::Handshake)?;
        let mut gateway =
            Gateway::new(connect(&parsed, &self.opts)?).with_policy(self.opts.policy.clone());
        if let Some(limit) = self.opts.batch_limit {
            gateway = gateway.with_batch_limit(limit);
        }
        if let Some(cache) = &self.cache {
            gateway = gateway.with_cache(cache.clone());
        }
        if self.opts.transcripts {
            gateway = gateway.with_transcript();
        }
        let gateway = Arc::new(gateway);
        pool.insert(endpoint.to_string(), gateway.clone());
        Ok(gateway)
    }

    pub fn reward(&self) -> Result<Arc<Gateway>, GatewayError> {
        self.get(&self.bindings.reward)
    }

    pub fn generator(&self) -> Result<Arc<Gateway>, GatewayError> {
        self.get(&self.bindings.generator)
    }

    pub fn reference(&self) -> Result<Arc<Gateway>, GatewayError> {
        self.get(&self.bindings.reference)
    }

    pub fn embedder(&self) -> Result<Arc<Gateway>, GatewayError> {
        self.get(&self.bindings.embedder)
    }

    pub fn classifier(&self) -> Result<Arc<Gateway>, GatewayError> {
        self.get(&self.bindings.classifier)
    }

    pub fn ocl_refs(&self) -> Result<Vec<Arc<Gateway>>, GatewayError> {
        self.bindings.ocl_refs.iter().map(|e| self.get(e)).collect()
    }

    /// Requests dispatched to workers across all connected gateways.
    pub fn worker_calls(&self) -> u64 {
        self.pool
            .lock()
            .expect("worker pool lock")
            .values()
            .map(|g| g.worker_calls())
            .sum()
    }

    /// Calls per op across connected gateways, read from transcripts.
    pub fn transcripts(&self) -> BTreeMap<String, Vec<String>> {
        self.pool
            .lock()
            .expect("worker pool lock")
            .iter()
            .map(|(k, g)| (k.clone(), g.transcript()))
            .collect()
    }

    pub fn flush_cache(&self) -> std::io::Result<()> {
        match &self.cache {
            Some(c) => c.flush(),
            None => Ok(()),
        }
    }
}
