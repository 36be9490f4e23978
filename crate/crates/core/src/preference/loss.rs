//! Reference calculator for the three-term MPO objective.
//!
//! * preference (DPO form): `softplus(-β[(pc - rc) - (pr - rr)])`
//! * quality (BCO form with shift δ): a good response contributes
//!   `softplus(-(β(p - r) - δ))`, a bad one `softplus(β(p - r) - δ)`
//! * generation: negative mean token log-probability of the chosen response
//!
//! The total is `w1·L_pref + w2·L_quality + w3·L_gen`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(1 + e^x)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpoWeights {
    pub preference: f64,
    pub quality: f64,
    pub generation: f64,
}

impl Default for MpoWeights {
    fn default() -> Self {
        MpoWeights {
            preference: 0.8,
            quality: 0.1,
            generation: 0.1,
        }
    }
}

impl MpoWeights {
    pub fn new(preference: f64, quality: f64, generation: f64) -> Self {
        MpoWeights {
            preference,
            quality,
            generation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.preference, self.quality, self.generation];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config(format!(
                "MPO weights must be finite and >= 0, got {w:?}"
            )));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::Config(
                "at least one MPO weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferenceInputs {
    pub policy_chosen: f64,
    pub policy_rejected: f64,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
    pub beta: f64,
}

impl PreferenceInputs {
    pub fn margin(&self) -> f64 {
        (self.policy_chosen - self.ref_chosen) - (self.policy_rejected - self.ref_rejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QualityLabel {
    Good,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityInput {
    pub policy_logprob: f64,
    pub ref_logprob: f64,
    pub label: QualityLabel,
    /// Reward shift δ.
    pub shift: f64,
}

impl QualityInput {
    /// The chosen (good) and rejected (bad) responses of a pair, sharing `shift`.
    pub fn pair(p: &PreferenceInputs, shift: f64) -> [QualityInput; 2] {
        [
            QualityInput {
                policy_logprob: p.policy_chosen,
                ref_logprob: p.ref_chosen,
                label: QualityLabel::Good,
                shift,
            },
            QualityInput {
                policy_logprob: p.policy_rejected,
                ref_logprob: p.ref_rejected,
                label: QualityLabel::Bad,
                shift,
            },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpoLoss {
    pub total: f64,
    pub preference: f64,
    pub quality: f64,
    pub generation: f64,
}

pub fn preference_loss(p: &PreferenceInputs) -> f64 {
    softplus(-p.beta * p.margin())
}

pub fn quality_loss(items: &[QualityInput], beta: f64) -> f64 {
    items
        .iter()
        .map(|q| {
            let reward = beta * (q.policy_logprob - q.ref_logprob);
            match q.label {
                QualityLabel::Good => softplus(-(reward - q.shift)),
                QualityLabel::Bad => softplus(reward - q.shift),
            }
        })
        .sum()
}

pub fn generation_loss(token_logprobs: &[f64]) -> f64 {
    -token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64
}

fn finite(name: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} must be finite, got {x}"
        )))
    }
}

pub fn mpo_loss(
    pref: &PreferenceInputs,
    quality: &[QualityInput],
    chosen_token_logprobs: &[f64],
    weights: &MpoWeights,
) -> Result<MpoLoss> {
    weights.validate()?;
    finite("policy_chosen", pref.policy_chosen)?;
    finite("policy_rejected", pref.policy_rejected)?;
    finite("ref_chosen", pref.ref_chosen)?;
    finite("ref_rejected", pref.ref_rejected)?;
    if !(pref.beta.is_finite() && pref.beta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "beta must be positive, got {}",
            pref.beta
        )));
    }
    for q in quality {
        finite("quality policy_logprob", q.policy_logprob)?;
        finite("quality ref_logprob", q.ref_logprob)?;
        finite("quality shift", q.shift)?;
    }
    if chosen_token_logprobs.is_empty() {
        return Err(Error::InvalidInput(
            "chosen response has no token log-probabilities".into(),
        ));
    }
    for &t in chosen_token_logprobs {
        finite("token logprob", t)?;
    }
    let preference = preference_loss(pref);
    let quality = quality_loss(quality, pref.beta);
    let generation = generation_loss(chosen_token_logprobs);
    Ok(MpoLoss {
        total: weights.preference * preference
            + weights.quality * quality
            + weights.generation * generation,
        preference,
        quality,
        generation,
    })
}
