//! Rule rewards: deterministic correct/incorrect labels for candidate text.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleKind {
    /// Equal after trimming, lowercasing, collapsing whitespace and dropping
    /// a trailing period.
    ExactMatch,
    /// Same option letter, read from forms like `(B)`, `B.`, `B)` or
    /// `Answer: B`.
    ChoiceLetter,
    /// First number in the text within `epsilon` of the target's.
    NumericTolerance { epsilon: f64 },
    /// The first capture group (or the whole match) of `pattern` in the
    /// candidate, normalized, equals the normalized target.
    Regex { pattern: String },
}

#[derive(Debug, Clone)]
pub struct RuleReward {
    kind: RuleKind,
    target: String,
    compiled: Option<Regex>,
}

static ANSWER_LETTER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\banswer\s*(?:is)?\s*[:：]?\s*\(?([A-Z])\)?(?:[^A-Za-z]|$)").unwrap()
});
static LEADING_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*\(?([A-Z])(?:[.):,]|\s|$)").unwrap());
static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[-+]?(?:\d[\d,]*)?\.?\d+(?:[eE][-+]?\d+)?").unwrap());

pub fn normalize_text(s: &str) -> String {
    let collapsed = s
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .strip_suffix('.')
        .unwrap_or(&collapsed)
        .to_string()
}

pub fn extract_choice(s: &str) -> Option<char> {
    ANSWER_LETTER
        .captures(s)
        .or_else(|| LEADING_LETTER.captures(s))
        .and_then(|c| c[1].chars().next())
        .map(|c| c.to_ascii_uppercase())
}

pub fn extract_number(s: &str) -> Option<f64> {
    NUMBER
        .find(s)
        .and_then(|m| m.as_str().replace(',', "").parse().ok())
}

impl RuleReward {
    pub fn new(kind: RuleKind, target: &str) -> Result<Self> {
        let compiled = match &kind {
            RuleKind::Regex { pattern } => Some(
                Regex::new(pattern).map_err(|e| Error::Config(format!("bad rule pattern: {e}")))?,
            ),
            RuleKind::NumericTolerance { epsilon } => {
                if !(epsilon.is_finite() && *epsilon >= 0.0) {
                    return Err(Error::Config(format!(
                        "numeric tolerance must be >= 0, got {epsilon}"
                    )));
                }
                if extract_number(target).is_none() {
                    return Err(Error::InvalidInput(format!(
                        "no number in target `{target}`"
                    )));
                }
                None
            }
            RuleKind::ChoiceLetter => {
                if extract_choice(target).is_none() {
                    return Err(Error::InvalidInput(format!(
                        "no option letter in target `{target}`"
                    )));
                }
                None
            }
            RuleKind::ExactMatch => None,
        };
        Ok(RuleReward {
            kind,
            target: target.to_string(),
            compiled,
        })
    }

    pub fn kind(&self) -> &RuleKind {
        &self.kind
    }

    pub fn is_correct(&self, text: &str) -> bool {
        match &self.kind {
            RuleKind::ExactMatch => normalize_text(text) == normalize_text(&self.target),
            RuleKind::ChoiceLetter => {
                extract_choice(text).is_some()
                    && extract_choice(text) == extract_choice(&self.target)
            }
            RuleKind::NumericTolerance { epsilon } => {
                match (extract_number(text), extract_number(&self.target)) {
                    (Some(x), Some(y)) => (x - y).abs() <= *epsilon,
                    _ => false,
                }
            }
            RuleKind::Regex { .. } => {
                let re = self.compiled.as_ref().expect("compiled at construction");
                re.captures(text)
                    .and_then(|c| c.get(1).or_else(|| c.get(0)))
                    .is_some_and(|m| normalize_text(m.as_str()) == normalize_text(&self.target))
            }
        }
    }
}
