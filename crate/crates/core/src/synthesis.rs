//! Stage 0: mint candidate (question, answer) samples from raw media.
//!
//! The generator is asked for `per_item_count` pairs per media item, with
//! the job's cues as anchors. No filtering happens here; the curation
//! stages downstream remove the noise.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{MediaRef, Sample};
use crate::error::{Error, Result};
use crate::gateway::hash::stable_hash;
use crate::gateway::{GenerateContext, Workers};

pub const SOURCE: &str = "synthesized";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisJob {
    pub media: Vec<MediaRef>,
    #[serde(default)]
    pub cues: Vec<String>,
    pub per_item_count: usize,
}

impl SynthesisJob {
    pub fn validate(&self) -> Result<()> {
        if self.per_item_count == 0 {
            return Err(Error::InvalidInput(
                "per_item_count must be at least 1".into(),
            ));
        }
        let mut seen = HashSet::new();
        for m in &self.media {
            m.validate().map_err(|(field, msg)| {
                Error::InvalidInput(format!("media `{}` {field}: {msg}", m.uri))
            })?;
            if !seen.insert(m.uri.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "media uri `{}` listed twice",
                    m.uri
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic id for the `index`-th pair minted from `uri`.
pub fn mint_id(uri: &str, index: usize) -> String {
    format!(
        "syn-{:016x}-{index}",
        stable_hash(&[uri, &index.to_string()])
    )
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisOutput {
    pub samples: Vec<Sample>,
    /// Media uris the generator failed on, with the error code.
    pub skipped: Vec<(String, String)>,
}

pub fn synthesize(job: &SynthesisJob, workers: &Workers) -> Result<SynthesisOutput> {
    job.validate()?;
    let generator = workers.generator()?;
    let items: Vec<(GenerateContext, usize)> = job
        .media
        .iter()
        .map(|m| {
            (
                GenerateContext {
                    sample_id: m.uri.clone(),
                    media: vec![m.uri.clone()],
                    question: String::new(),
                    cues: job.cues.clone(),
                },
                job.per_item_count,
            )
        })
        .collect();
    let mut out = SynthesisOutput::default();
    for (m, result) in job.media.iter().zip(generator.synthesize_many(&items)?) {
        match result {
            Ok(pairs) => {
                for (i, p) in pairs.into_iter().enumerate() {
                    if p.question.trim().is_empty() || p.answer.trim().is_empty() {
                        continue;
                    }
                    let mut s =
                        Sample::new(mint_id(&m.uri, i), p.question, p.answer).with_media(m.clone());
                    s.source = SOURCE.to_string();
                    out.samples.push(s);
                }
            }
            Err(e) => out.skipped.push((m.uri.clone(), e.code().to_string())),
        }
    }
    Ok(out)
}
