//! Preference pairs for MPO training, plus the reference loss calculator.
//!
//! Each prompt is answered `count` times at high temperature. A rule reward
//! splits the candidates into correct and incorrect; only prompts where the
//! model is inconsistent (both classes present) yield a pair. Within each
//! class the reward model picks the best candidate, so the rejected answer
//! is the most plausible wrong one.

mod loss;
mod rule;

pub use loss::{
    generation_loss, log_sigmoid, mpo_loss, preference_loss, quality_loss, softplus, MpoLoss,
    MpoWeights, PreferenceInputs, QualityInput, QualityLabel,
};
pub use rule::{extract_choice, extract_number, normalize_text, RuleKind, RuleReward};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSnapshot, Sample};
use crate::error::{Error, Result};
use crate::gateway::{GenerateContext, GenerateMode, GeneratedAnswer, SampleView, Workers};
use crate::stage::Quarantine;

pub const STAGE: &str = "mpo";

fn default_count() -> usize {
    8
}

fn default_temperature() -> f64 {
    1.2
}

/// `mpo.*` config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpoConfig {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub rule: RuleKind,
    #[serde(default)]
    pub weights: MpoWeights,
}

impl MpoConfig {
    pub fn new(rule: RuleKind) -> Self {
        MpoConfig {
            count: default_count(),
            temperature: default_temperature(),
            rule,
            weights: MpoWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::Config(format!(
                "mpo.count must be at least 2, got {}",
                self.count
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "mpo.temperature must be positive, got {}",
                self.temperature
            )));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub sample_id: String,
    pub media: Vec<String>,
    pub question: String,
    pub chosen: GeneratedAnswer,
    pub rejected: GeneratedAnswer,
    pub chosen_score: f64,
    pub rejected_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    UniformlyCorrect,
    UniformlyIncorrect,
    /// The ground-truth answer cannot be read by the configured rule.
    UnusableTarget,
}

impl SkipReason {
    pub fn code(self) -> &'static str {
        match self {
            SkipReason::UniformlyCorrect => "uniformly-correct",
            SkipReason::UniformlyIncorrect => "uniformly-incorrect",
            SkipReason::UnusableTarget => "unusable-target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairOutcome {
    Pair(Box<PreferencePair>),
    Skip(SkipReason),
}

/// Picks `(chosen, rejected)` indices: reward-argmax among correct and among
/// incorrect candidates, ties to the lowest index.
pub fn select_pair(
    correct: &[bool],
    scores: &[f64],
) -> std::result::Result<(usize, usize), SkipReason> {
    let best = |want: bool| {
        let mut best: Option<usize> = None;
        for (i, (&c, &s)) in correct.iter().zip(scores).enumerate() {
            if c == want && best.is_none_or(|b| s > scores[b]) {
                best = Some(i);
            }
        }
        best
    };
    match (best(true), best(false)) {
        (Some(c), Some(r)) => Ok((c, r)),
        (Some(_), None) => Err(SkipReason::UniformlyCorrect),
        _ => Err(SkipReason::UniformlyIncorrect),
    }
}

/// Samples `count` candidates at `temperature` from the generator.
pub fn sample_candidates(
    sample: &Sample,
    count: usize,
    temperature: f64,
    workers: &Workers,
) -> Result<Vec<GeneratedAnswer>> {
    if count < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 candidates, got {count}"
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(workers.generator()?.generate(
        &GenerateContext::of(sample),
        GenerateMode::Candidate { count, temperature },
    )?)
}

/// Labels candidates with `rule`, scores them with the reward worker and
/// builds the pair.
pub fn build_pair(
    sample: &Sample,
    candidates: &[GeneratedAnswer],
    rule: &RuleReward,
    workers: &Workers,
) -> Result<PairOutcome> {
    let items: Vec<_> = candidates
        .iter()
        .map(|c| (SampleView::with_answer(sample, &c.text), c.variant))
        .collect();
    let mut scores = Vec::with_capacity(items.len());
    for r in workers.reward()?.score_many(&items)? {
        scores.push(r?.score);
    }
    Ok(assemble(sample, candidates, rule, &scores))
}

fn assemble(
    sample: &Sample,
    candidates: &[GeneratedAnswer],
    rule: &RuleReward,
    scores: &[f64],
) -> PairOutcome {
    let correct: Vec<bool> = candidates
        .iter()
        .map(|c| rule.is_correct(&c.text))
        .collect();
    match select_pair(&correct, scores) {
        Ok((c, r)) => PairOutcome::Pair(Box::new(PreferencePair {
            sample_id: sample.id.clone(),
            media: sample.media_uris().into_iter().map(String::from).collect(),
            question: sample.question.clone(),
            chosen: candidates[c].clone(),
            rejected: candidates[r].clone(),
            chosen_score: scores[c],
            rejected_score: scores[r],
        })),
        Err(reason) => PairOutcome::Skip(reason),
    }
}

#[derive(Debug, Clone, Default)]
pub struct PairsOutput {
    pub pairs: Vec<PreferencePair>,
    pub skipped: Vec<(String, SkipReason)>,
    pub quarantined: Vec<Quarantine>,
}

impl PairsOutput {
    pub fn to_jsonl(&self) -> String {
        self.pairs
            .iter()
            .map(|p| serde_json::to_string(p).expect("pair serializes") + "\n")
            .collect()
    }
}

/// Builds pairs for every sample, batching generation and scoring.
pub fn run(input: &CorpusSnapshot, config: &MpoConfig, workers: &Workers) -> Result<PairsOutput> {
    config.validate()?;
    let generator = workers.generator()?;
    let reward = workers.reward()?;
    let mut out = PairsOutput::default();

    let mut usable = Vec::new();
    for s in &input.samples {
        match RuleReward::new(config.rule.clone(), &s.answer) {
            Ok(rule) => usable.push((s, rule)),
            Err(Error::InvalidInput(_)) => {
                out.skipped.push((s.id.clone(), SkipReason::UnusableTarget))
            }
            Err(e) => return Err(e),
        }
    }
    let mode = GenerateMode::Candidate {
        count: config.count,
        temperature: config.temperature,
    };
    let ctx: Vec<_> = usable
        .iter()
        .map(|(s, _)| (GenerateContext::of(s), mode))
        .collect();
    let generated = generator.generate_many(&ctx)?;

    let mut ready = Vec::new();
    for ((s, rule), g) in usable.into_iter().zip(generated) {
        match g {
            Ok(c) => ready.push((s, rule, c)),
            Err(e) => out.quarantined.push(Quarantine::new(&s.id, STAGE, &e)),
        }
    }
    let items: Vec<_> = ready
        .iter()
        .flat_map(|(s, _, cands)| {
            cands
                .iter()
                .map(move |c| (SampleView::with_answer(s, &c.text), c.variant))
        })
        .collect();
    let mut scores = reward.score_many(&items)?.into_iter();
    for (s, rule, cands) in ready {
        let mut sc = Vec::with_capacity(cands.len());
        let mut fault = None;
        for r in scores.by_ref().take(cands.len()) {
            match r {
                Ok(r) => sc.push(r.score),
                Err(e) => fault = fault.or(Some(e)),
            }
        }
        if let Some(e) = fault {
            out.quarantined.push(Quarantine::new(&s.id, STAGE, &e));
            continue;
        }
        match assemble(s, &cands, &rule, &sc) {
            PairOutcome::Pair(p) => out.pairs.push(*p),
            PairOutcome::Skip(reason) => out.skipped.push((s.id.clone(), reason)),
        }
    }
    out.skipped.sort();
    Ok(out)
}
