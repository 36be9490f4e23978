//! Stage 1: keep samples that score well under the reward model and whose
//! score depends on the image.
//!
//! For each sample the generator answers the question with no media, giving
//! the vision-ablated answer ā. Both the original answer and ā are scored
//! *with* the media, and the sample survives iff
//!
//! ```text
//! r_a >= τ   and   r_a - r_ā >= τ_ā
//! ```
//!
//! `τ` is either absolute or the nearest-rank top-`p`% cutoff of `r_a`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{AuditEntry, CorpusSnapshot, Decision};
use crate::error::{Error, Result};
use crate::gateway::{GenerateContext, GenerateMode, SampleView, Variant, Workers};
use crate::stage::{require_eligible, sort_audit, Quarantine, StageOutput};

pub const STAGE: &str = "quality";
pub const OUTPUT: &str = "D1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdKind {
    Absolute,
    Percentile,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Absolute(f64),
    /// Keep the top `p` percent, `0 < p < 100`.
    Percentile(f64),
}

/// `quality.*` config keys. There are no defaults for the thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityConfig {
    pub threshold_mode: ThresholdKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    pub tau_abar: f64,
}

impl QualityConfig {
    pub fn absolute(tau: f64, tau_abar: f64) -> Self {
        QualityConfig {
            threshold_mode: ThresholdKind::Absolute,
            tau: Some(tau),
            p: None,
            tau_abar,
        }
    }

    pub fn percentile(p: f64, tau_abar: f64) -> Self {
        QualityConfig {
            threshold_mode: ThresholdKind::Percentile,
            tau: None,
            p: Some(p),
            tau_abar,
        }
    }

    pub fn threshold(&self) -> Result<Threshold> {
        if self.tau_abar.is_nan() {
            return Err(Error::Config("quality.tau_abar must be a number".into()));
        }
        match self.threshold_mode {
            ThresholdKind::Absolute => match self.tau {
                Some(t) if !t.is_nan() => Ok(Threshold::Absolute(t)),
                _ => Err(Error::Config(
                    "quality.tau is required in absolute mode".into(),
                )),
            },
            ThresholdKind::Percentile => match self.p {
                Some(p) if p > 0.0 && p < 100.0 => Ok(Threshold::Percentile(p)),
                Some(p) => Err(Error::Config(format!(
                    "quality.p must lie strictly between 0 and 100, got {p}"
                ))),
                None => Err(Error::Config(
                    "quality.p is required in percentile mode".into(),
                )),
            },
        }
    }
}

/// Nearest-rank cutoff for keeping the top `p` percent under `r >= τ`.
///
/// At least `ceil(p% * N)` scores satisfy `r >= τ`; ties at `τ` are all kept.
pub fn percentile_threshold(scores: &[f64], p: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput(
            "percentile of an empty score set".into(),
        ));
    }
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::Config(format!(
            "percentile must lie strictly between 0 and 100, got {p}"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // The epsilon absorbs representation error in p/100 (0.3 * 10 = 3.0000000000000004).
    let rank = ((p / 100.0) * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropReason {
    LowReward,
    LowMargin { margin: f64 },
}

impl DropReason {
    pub fn code(&self) -> &'static str {
        match self {
            DropReason::LowReward => "low-reward",
            DropReason::LowMargin { .. } => "low-margin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QualityDecision {
    Keep,
    Drop(DropReason),
}

pub fn evaluate(r_a: f64, r_abar: f64, tau: f64, tau_abar: f64) -> QualityDecision {
    let margin = r_a - r_abar;
    if r_a < tau {
        QualityDecision::Drop(DropReason::LowReward)
    } else if margin < tau_abar {
        QualityDecision::Drop(DropReason::LowMargin { margin })
    } else {
        QualityDecision::Keep
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityScores {
    pub sample_id: String,
    pub r_a: f64,
    pub r_abar: f64,
    pub ablated_answer: String,
}

/// Scores every sample: `r_a`, the vision-ablated answer, and its score.
pub fn collect_scores(
    input: &CorpusSnapshot,
    workers: &Workers,
) -> Result<(Vec<QualityScores>, Vec<Quarantine>)> {
    require_eligible(input, STAGE)?;
    let reward = workers.reward()?;
    let generator = workers.generator()?;
    let mut quarantined = Vec::new();

    let answer_items: Vec<_> = input
        .samples
        .iter()
        .map(|s| (SampleView::of(s), Variant::Answer))
        .collect();
    let r_a = reward.score_many(&answer_items)?;

    let ablate_items: Vec<_> = input
        .samples
        .iter()
        .map(|s| (GenerateContext::of(s), GenerateMode::VisionAblated))
        .collect();
    let ablated = generator.generate_many(&ablate_items)?;

    let mut pending = Vec::new();
    for ((s, ra), abar) in input.samples.iter().zip(r_a).zip(ablated) {
        match (ra, abar) {
            (Ok(ra), Ok(mut answers)) => pending.push((s, ra.score, answers.remove(0).text)),
            (Err(e), _) | (_, Err(e)) => quarantined.push(Quarantine::new(&s.id, STAGE, &e)),
        }
    }
    let abar_items: Vec<_> = pending
        .iter()
        .map(|(s, _, text)| (SampleView::with_answer(s, text), Variant::VisionAblated))
        .collect();
    let r_abar = reward.score_many(&abar_items)?;

    let mut scores = Vec::with_capacity(pending.len());
    for ((s, ra, text), rb) in pending.into_iter().zip(r_abar) {
        match rb {
            Ok(rb) => scores.push(QualityScores {
                sample_id: s.id.clone(),
                r_a: ra,
                r_abar: rb.score,
                ablated_answer: text,
            }),
            Err(e) => quarantined.push(Quarantine::new(&s.id, STAGE, &e)),
        }
    }
    Ok((scores, quarantined))
}

/// Resolves the threshold over the collected scores and applies the filter.
pub fn apply(
    input: &CorpusSnapshot,
    scores: &[QualityScores],
    quarantined: Vec<Quarantine>,
    config: &QualityConfig,
) -> Result<StageOutput> {
    let tau = match config.threshold()? {
        Threshold::Absolute(t) => t,
        // Nothing survived scoring; any cutoff keeps nothing.
        Threshold::Percentile(_) if scores.is_empty() => f64::INFINITY,
        Threshold::Percentile(p) => {
            let r: Vec<f64> = scores.iter().map(|s| s.r_a).collect();
            percentile_threshold(&r, p)?
        }
    };
    let by_id: HashMap<&str, &QualityScores> =
        scores.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut kept = Vec::new();
    let mut audit: Vec<AuditEntry> = quarantined.iter().map(Quarantine::audit).collect();
    for s in &input.samples {
        let Some(sc) = by_id.get(s.id.as_str()) else {
            continue;
        };
        let decision = evaluate(sc.r_a, sc.r_abar, tau, config.tau_abar);
        let (d, reason) = match decision {
            QualityDecision::Keep => {
                kept.push(s.clone());
                (Decision::Kept, "kept")
            }
            QualityDecision::Drop(r) => (Decision::Dropped, r.code()),
        };
        audit.push(
            AuditEntry::new(&s.id, STAGE, d, reason)
                .score("r_a", sc.r_a)
                .score("r_abar", sc.r_abar)
                .score("margin", sc.r_a - sc.r_abar)
                .score("tau", tau),
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
    config: &QualityConfig,
    workers: &Workers,
) -> Result<StageOutput> {
    config.threshold()?;
    let (scores, quarantined) = collect_scores(input, workers)?;
    apply(input, &scores, quarantined, config)
}
