//! Deterministic built-in worker.
//!
//! Every output is a pure function of `(seed, name, request payload)` via
//! [`stable_hash`]. Field lists below are hashed in the order written:
//!
//! * reward: `[seed, name, "reward", variant, question, answer, uris]`, where
//!   `uris` is the media uris joined by `\n`; the score is `unit_interval(h)`.
//! * generate: `[seed, name, "generate", mode, question, uris, cues, index,
//!   temperature_bits]`; `cues` joined by `\n`, `index` the 0-based output
//!   position, `temperature_bits` the IEEE-754 bits as 16 lowercase hex digits.
//! * embed: bag of hashed tokens. Each lowercase alphanumeric token of the
//!   question and answer, and each whole media uri, seeds a [`HashStream`]
//!   from `[seed, name, "embed", token]`; component `j` adds
//!   `2 * unit_interval(stream.next()) - 1`. The raw sum is returned
//!   unnormalized.
//! * classify: bucket `[seed, name, "classify", question] mod taxonomy_size`;
//!   levels `["mock", "cap-<bucket>"]`.

use std::io::{self, BufRead, Write};

use serde_json::{json, Value};

use super::hash::{stable_hash, unit_interval, HashStream};
use super::protocol::{
    mode, ClassifyPayload, EmbedPayload, GeneratePayload, Handshake, Op, Request, Response,
    RewardPayload, PROTOCOL_VERSION,
};

const CHOICES: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone)]
pub struct MockWorker {
    pub seed: u64,
    pub name: String,
    pub taxonomy_size: u64,
    pub dim: usize,
    pub batch_limit: usize,
}

impl MockWorker {
    pub fn new(seed: u64, name: impl Into<String>) -> Self {
        MockWorker {
            seed,
            name: name.into(),
            taxonomy_size: 10,
            dim: 32,
            batch_limit: 64,
        }
    }

    pub fn model_id(&self) -> String {
        format!("mock:{}@{}", self.name, self.seed)
    }

    pub fn handshake(&self) -> Handshake {
        Handshake {
            protocol: PROTOCOL_VERSION,
            capabilities: vec![Op::Reward, Op::Generate, Op::Embed, Op::Classify],
            batch_limit: self.batch_limit,
            model_id: self.model_id(),
        }
    }

    fn hash(&self, fields: &[&str]) -> u64 {
        let seed = self.seed.to_string();
        let mut all: Vec<&str> = Vec::with_capacity(fields.len() + 2);
        all.push(&seed);
        all.push(&self.name);
        all.extend_from_slice(fields);
        stable_hash(&all)
    }

    pub fn reward(&self, p: &RewardPayload) -> f64 {
        let variant = p.variant.to_string();
        let uris = p.media.join("\n");
        unit_interval(self.hash(&["reward", &variant, &p.question, &p.answer, &uris]))
    }

    fn generation_hash(&self, p: &GeneratePayload, index: usize) -> u64 {
        let uris = p.media.join("\n");
        let cues = p.cues.join("\n");
        let index = index.to_string();
        let temp = format!("{:016x}", p.temperature.to_bits());
        self.hash(&[
            "generate",
            &p.mode,
            &p.question,
            &uris,
            &cues,
            &index,
            &temp,
        ])
    }

    pub fn generate(&self, p: &GeneratePayload) -> Result<Value, String> {
        match p.mode.as_str() {
            mode::VISION_ABLATED => {
                let h = self.generation_hash(p, 0);
                Ok(json!({ "texts": [format!("text-only answer {h:016x}")] }))
            }
            mode::REFERENCE => {
                let h = self.generation_hash(p, 0);
                Ok(json!({ "texts": [format!("reference answer {h:016x}")] }))
            }
            mode::CANDIDATE => {
                let texts: Vec<String> = (0..p.count)
                    .map(|i| {
                        let h = self.generation_hash(p, i);
                        let letter = CHOICES[(h % CHOICES.len() as u64) as usize];
                        format!("({letter}) candidate {i} {:016x}", h >> 8)
                    })
                    .collect();
                Ok(json!({ "texts": texts }))
            }
            mode::SYNTHESIS => {
                let pairs: Vec<Value> = (0..p.count)
                    .map(|i| {
                        let h = self.generation_hash(p, i);
                        json!({
                            "question": format!("synthesized question {i} {h:016x}"),
                            "answer": format!("synthesized answer {:016x}", h.rotate_left(17)),
                        })
                    })
                    .collect();
                Ok(json!({ "pairs": pairs }))
            }
            other => Err(format!("unknown generate mode `{other}`")),
        }
    }

    pub fn embed(&self, p: &EmbedPayload) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let words = p
            .question
            .split(|c: char| !c.is_alphanumeric())
            .chain(p.answer.split(|c: char| !c.is_alphanumeric()))
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase);
        let tokens: Vec<String> = words.chain(p.media.iter().cloned()).collect();
        for token in &tokens {
            let mut stream = HashStream::new(self.hash(&["embed", token]));
            for x in v.iter_mut() {
                *x += 2.0 * unit_interval(stream.next_u64()) - 1.0;
            }
        }
        if tokens.is_empty() {
            v[0] = 1.0;
        }
        v
    }

    pub fn classify(&self, p: &ClassifyPayload) -> Vec<String> {
        let bucket = self.hash(&["classify", &p.question]) % self.taxonomy_size.max(1);
        vec!["mock".to_string(), format!("cap-{bucket}")]
    }

    pub fn handle(&self, req: &Request) -> Response {
        fn parse<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, String> {
            serde_json::from_value(v.clone()).map_err(|e| e.to_string())
        }
        let result = match req.op {
            Op::Reward => {
                parse::<RewardPayload>(&req.payload).map(|p| json!({ "score": self.reward(&p) }))
            }
            Op::Generate => parse::<GeneratePayload>(&req.payload).and_then(|p| self.generate(&p)),
            Op::Embed => {
                parse::<EmbedPayload>(&req.payload).map(|p| json!({ "vector": self.embed(&p) }))
            }
            Op::Classify => parse::<ClassifyPayload>(&req.payload)
                .map(|p| json!({ "levels": self.classify(&p) })),
        };
        match result {
            Ok(v) => Response::success(&req.id, v),
            Err(msg) => Response::failure(&req.id, "bad-request", msg),
        }
    }

    /// Answers one request line. Lines that are not a valid request get a
    /// `bad-request` error response.
    pub fn handle_line(&self, line: &str) -> String {
        let response = match serde_json::from_str::<Request>(line) {
            Ok(req) => self.handle(&req),
            Err(e) => {
                let id = serde_json::from_str::<Value>(line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_str).map(str::to_string))
                    .unwrap_or_default();
                Response::failure(id, "bad-request", e.to_string())
            }
        };
        serde_json::to_string(&response).expect("response serializes")
    }

    /// Speaks the worker protocol over a line stream until EOF.
    pub fn serve<R: BufRead, W: Write>(&self, reader: R, mut writer: W) -> io::Result<()> {
        writeln!(
            writer,
            "{}",
            serde_json::to_string(&self.handshake()).expect("handshake serializes")
        )?;
        writer.flush()?;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            writeln!(writer, "{}", self.handle_line(&line))?;
            writer.flush()?;
        }
        Ok(())
    }
}
