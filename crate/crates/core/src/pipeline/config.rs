//! Run configuration: one TOML document, with `key=value` overrides.

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::OclConfig;
use crate::dedup::DedupConfig;
use crate::error::{Error, Result};
use crate::gateway::{GatewayOptions, RetryPolicy, WorkerBindings};
use crate::preference::MpoConfig;
use crate::quality::QualityConfig;
use crate::redistribution::RedistConfig;
use crate::reference::ReferenceConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Quality,
    Reference,
    Dedup,
    Redist,
}

impl StageName {
    pub const ALL: [StageName; 4] = [
        StageName::Quality,
        StageName::Reference,
        StageName::Dedup,
        StageName::Redist,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Quality => crate::quality::STAGE,
            StageName::Reference => crate::reference::STAGE,
            StageName::Dedup => crate::dedup::STAGE,
            StageName::Redist => crate::redistribution::STAGE,
        }
    }

    /// Name of the snapshot the stage writes.
    pub fn output(self) -> &'static str {
        match self {
            StageName::Quality => crate::quality::OUTPUT,
            StageName::Reference => crate::reference::OUTPUT,
            StageName::Dedup => crate::dedup::OUTPUT,
            StageName::Redist => crate::redistribution::OUTPUT,
        }
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown stage `{s}` (expected quality, reference, dedup or redist)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// quality → reference → dedup → redist
    #[default]
    VqaFull,
    /// quality → dedup; caption corpora skip the reference filter and
    /// redistribution.
    Caption,
    /// The ordered `stages` list.
    Custom,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vqa_full" => Ok(Preset::VqaFull),
            "caption" => Ok(Preset::Caption),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> u64 {
    200
}

fn default_taxonomy() -> u64 {
    10
}

fn default_dim() -> usize {
    32
}

/// Gateway knobs. Timeouts and retries do not change results and are left
/// out of the config digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_taxonomy")]
    pub mock_taxonomy: u64,
    #[serde(default = "default_dim")]
    pub mock_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_limit: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            timeout_secs: default_timeout(),
            retries: default_retries(),
            backoff_ms: default_backoff(),
            mock_taxonomy: default_taxonomy(),
            mock_dim: default_dim(),
            batch_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<StageName>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dedup: Option<DedupConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redist: Option<RedistConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocl: Option<OclConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpo: Option<MpoConfig>,
    #[serde(default)]
    pub workers: WorkerBindings,
    #[serde(default)]
    pub options: RunOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override `{s}` is not key=value"))),
    }
}

fn override_value(raw: &str) -> toml::Value {
    // Try the text as a TOML value first (numbers, bools, arrays, inline
    // tables); anything else is a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("cannot set `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text` after applying dotted-key overrides such as
    /// `dedup.delta=0.2`. Stage sections are checked by [`validate`](Self::validate).
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut table, k, override_value(v))?;
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn stage_list(&self) -> Result<Vec<StageName>> {
        use StageName::*;
        match (self.preset, &self.stages) {
            (Preset::VqaFull, None) => Ok(vec![Quality, Reference, Dedup, Redist]),
            (Preset::Caption, None) => Ok(vec![Quality, Dedup]),
            (Preset::Custom, Some(list)) => {
                if list.is_empty() {
                    return Err(Error::Config(
                        "custom preset needs at least one stage".into(),
                    ));
                }
                if list.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(
                        "custom stages must follow quality, reference, dedup, redist order without repeats".into(),
                    ));
                }
                Ok(list.clone())
            }
            (Preset::Custom, None) => {
                Err(Error::Config("custom preset needs a `stages` list".into()))
            }
            (_, Some(_)) => Err(Error::Config(
                "`stages` is only read with preset = \"custom\"".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for stage in self.stage_list()? {
            let missing = match stage {
                StageName::Quality => self.quality.as_ref().map(|c| c.threshold().map(drop)),
                StageName::Reference => self.reference.as_ref().map(|c| c.validate()),
                StageName::Dedup => self.dedup.as_ref().map(|c| c.validate()),
                StageName::Redist => self.redist.as_ref().map(|c| c.validate()),
            };
            match missing {
                None => {
                    return Err(Error::Config(format!(
                        "stage `{}` needs a [{}] section",
                        stage.as_str(),
                        stage.as_str()
                    )))
                }
                Some(r) => r?,
            }
        }
        if self.options.mock_dim == 0 || self.options.mock_taxonomy == 0 {
            return Err(Error::Config(
                "options.mock_dim and options.mock_taxonomy must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn gateway_options(&self) -> GatewayOptions {
        GatewayOptions {
            seed: self.seed,
            policy: RetryPolicy {
                timeout: Duration::from_secs(self.options.timeout_secs),
                retries: self.options.retries,
                backoff: Duration::from_millis(self.options.backoff_ms),
            },
            mock_taxonomy_size: self.options.mock_taxonomy,
            mock_dim: self.options.mock_dim,
            batch_limit: self.options.batch_limit,
            transcripts: false,
        }
    }

    /// The parts of the config that determine outputs, as canonical JSON.
    fn digest_view(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("cache_dir");
        obj.remove("output_dir");
        if let Some(o) = obj.get_mut("options").and_then(|o| o.as_object_mut()) {
            o.remove("timeout_secs");
            o.remove("retries");
            o.remove("backoff_ms");
            o.remove("batch_limit");
        }
        v
    }

    pub fn digest(&self) -> String {
        let text = serde_json::to_string(&self.digest_view()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Top-level sections whose content differs from `other`.
    pub fn differing_sections(&self, other: &PipelineConfig) -> Vec<String> {
        let (a, b) = (self.digest_view(), other.digest_view());
        let (a, b) = (
            a.as_object().expect("object"),
            b.as_object().expect("object"),
        );
        let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| a.get(*k) != b.get(*k))
            .map(|k| k.to_string())
            .collect()
    }
}
