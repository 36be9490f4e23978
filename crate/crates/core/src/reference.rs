//! Stage 2: drop samples the foundation model has already mastered.
//!
//! The `reference` worker answers each question with the media present; the
//! reward model scores that answer, and a sample survives iff its own answer
//! beats the reference by at least `τ_ã`: `r_a - r_ã >= τ_ã`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{AuditEntry, CorpusSnapshot, Decision};
use crate::error::{Error, Result};
use crate::gateway::{GenerateContext, GenerateMode, SampleView, Variant, Workers};
use crate::stage::{require_eligible, sort_audit, Quarantine, StageOutput};

pub const STAGE: &str = "reference";
pub const OUTPUT: &str = "D2";

/// `reference.*` config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub tau_atilde: f64,
    /// Informational: the endpoint serving the reference role lives under
    /// `workers.reference`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<String>,
}

impl ReferenceConfig {
    pub fn new(tau_atilde: f64) -> Self {
        ReferenceConfig {
            tau_atilde,
            worker: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_atilde >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "reference.tau_atilde must be >= 0, got {}",
                self.tau_atilde
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub sample_id: String,
    pub r_a: f64,
    pub r_atilde: f64,
    pub delta: f64,
}

impl GapRecord {
    pub fn new(sample_id: &str, r_a: f64, r_atilde: f64) -> Self {
        GapRecord {
            sample_id: sample_id.to_string(),
            r_a,
            r_atilde,
            delta: reward_gap(r_a, r_atilde),
        }
    }
}

pub fn reward_gap(r_a: f64, r_atilde: f64) -> f64 {
    r_a - r_atilde
}

pub fn collect_gaps(
    input: &CorpusSnapshot,
    workers: &Workers,
) -> Result<(Vec<GapRecord>, Vec<Quarantine>)> {
    require_eligible(input, STAGE)?;
    let reward = workers.reward()?;
    let reference = workers.reference()?;
    let mut quarantined = Vec::new();

    let answer_items: Vec<_> = input
        .samples
        .iter()
        .map(|s| (SampleView::of(s), Variant::Answer))
        .collect();
    let r_a = reward.score_many(&answer_items)?;
    let ref_items: Vec<_> = input
        .samples
        .iter()
        .map(|s| (GenerateContext::of(s), GenerateMode::Reference))
        .collect();
    let refs = reference.generate_many(&ref_items)?;

    let mut pending = Vec::new();
    for ((s, ra), rt) in input.samples.iter().zip(r_a).zip(refs) {
        match (ra, rt) {
            (Ok(ra), Ok(mut answers)) => pending.push((s, ra.score, answers.remove(0).text)),
            (Err(e), _) | (_, Err(e)) => quarantined.push(Quarantine::new(&s.id, STAGE, &e)),
        }
    }
    let items: Vec<_> = pending
        .iter()
        .map(|(s, _, text)| (SampleView::with_answer(s, text), Variant::Reference))
        .collect();
    let r_atilde = reward.score_many(&items)?;
    let mut gaps = Vec::with_capacity(pending.len());
    for ((s, ra, _), rt) in pending.into_iter().zip(r_atilde) {
        match rt {
            Ok(rt) => gaps.push(GapRecord::new(&s.id, ra, rt.score)),
            Err(e) => quarantined.push(Quarantine::new(&s.id, STAGE, &e)),
        }
    }
    Ok((gaps, quarantined))
}

pub fn apply(
    input: &CorpusSnapshot,
    gaps: &[GapRecord],
    quarantined: Vec<Quarantine>,
    config: &ReferenceConfig,
) -> Result<StageOutput> {
    config.validate()?;
    let by_id: HashMap<&str, &GapRecord> = gaps.iter().map(|g| (g.sample_id.as_str(), g)).collect();
    let mut kept = Vec::new();
    let mut audit: Vec<AuditEntry> = quarantined.iter().map(Quarantine::audit).collect();
    for s in &input.samples {
        let Some(g) = by_id.get(s.id.as_str()) else {
            continue;
        };
        let (d, reason) = if g.delta >= config.tau_atilde {
            kept.push(s.clone());
            (Decision::Kept, "kept")
        } else {
            (Decision::Dropped, "mastered")
        };
        audit.push(
            AuditEntry::new(&s.id, STAGE, d, reason)
                .score("r_a", g.r_a)
                .score("r_atilde", g.r_atilde)
                .score("delta", g.delta),
        );
    }
    sort_audit(&mut audit);
    Ok(StageOutput {
        stage: STAGE.into(),
        input_count: input.len(),
        snapshot: CorpusSnapshot::derived(OUTPUT, input, kept),
        audit,
        quarantined,
    })
}

pub fn run_stage(
    input: &CorpusSnapshot,
    config: &ReferenceConfig,
    workers: &Workers,
) -> Result<StageOutput> {
    config.validate()?;
    let (gaps, quarantined) = collect_gaps(input, workers)?;
    apply(input, &gaps, quarantined, config)
}
