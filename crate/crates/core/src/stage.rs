//! Output shared by all curation stages.

use serde::{Deserialize, Serialize};

use crate::corpus::{AuditEntry, CorpusSnapshot, Decision, ManifestContext, StageManifest};
use crate::error::{Error, Result};
use crate::gateway::GatewayError;

/// A sample pulled out of the run because a worker call failed for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quarantine {
    pub sample_id: String,
    pub stage: String,
    pub code: String,
    pub message: String,
}

impl Quarantine {
    pub fn new(sample_id: &str, stage: &str, err: &GatewayError) -> Self {
        Quarantine {
            sample_id: sample_id.to_string(),
            stage: stage.to_string(),
            code: err.code().to_string(),
            message: err.to_string(),
        }
    }

    pub fn audit(&self) -> AuditEntry {
        AuditEntry::new(
            &self.sample_id,
            &self.stage,
            Decision::Dropped,
            &format!("quarantined:{}", self.code),
        )
    }
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub stage: String,
    pub input_count: usize,
    pub snapshot: CorpusSnapshot,
    /// One entry per input sample, plus entries for synthesized ids; sorted by id.
    pub audit: Vec<AuditEntry>,
    pub quarantined: Vec<Quarantine>,
}

impl StageOutput {
    pub fn manifest(
        &self,
        raw_count: usize,
        config_digest: &str,
        audit_path: &str,
    ) -> StageManifest {
        StageManifest::new(
            &self.stage,
            &self.snapshot,
            &ManifestContext {
                raw_count,
                input_count: self.input_count,
                quarantined: self.quarantined.len(),
                config_digest: config_digest.to_string(),
                audit_path: audit_path.to_string(),
            },
        )
    }
}

pub(crate) fn require_eligible(input: &CorpusSnapshot, stage: &str) -> Result<()> {
    if let Some(s) = input.samples.iter().find(|s| !s.is_curation_eligible()) {
        return Err(Error::InvalidInput(format!(
            "{stage}: sample `{}` lacks a nonempty question and answer",
            s.id
        )));
    }
    Ok(())
}

pub(crate) fn sort_audit(entries: &mut [AuditEntry]) {
    entries.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
}
