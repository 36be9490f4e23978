//! Stage orchestration: chains the curation stages over a run directory,
//! checkpointing after each stage so an interrupted run can resume.
//!
//! Run directory layout:
//!
//! ```text
//! config.json           resolved config
//! checkpoint.json       config digest and completed stages
//! snapshots/<name>.jsonl  D, D1, D2, D3, D3_dropped, D_final
//! manifests/<stage>.json
//! audit/<stage>.jsonl
//! reports/distribution.txt
//! quarantine.jsonl
//! summary.json
//! cache/gateway-cache.jsonl   unless the cache is moved or disabled
//! ```

mod config;

pub use config::{parse_override, PipelineConfig, Preset, RunOptions, StageName};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    load_snapshot, write_atomic, AuditLog, CorpusError, CorpusSnapshot, StageManifest,
};
use crate::diagnostics::{compression_report, CompressionRow};
use crate::error::{Error, Result};
use crate::gateway::{ScoreCache, Workers};
use crate::stage::{Quarantine, StageOutput};
use crate::{dedup, quality, redistribution, reference};

pub const INPUT_SNAPSHOT: &str = "D";
const CHECKPOINT: &str = "checkpoint.json";
const CONFIG: &str = "config.json";
const SUMMARY: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum CacheSetting {
    /// `<run_dir>/cache`
    #[default]
    RunDir,
    Off,
    Dir(PathBuf),
}

impl CacheSetting {
    pub fn parse(s: &str) -> Self {
        match s {
            "off" | "none" => CacheSetting::Off,
            dir => CacheSetting::Dir(PathBuf::from(dir)),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunSettings {
    pub cache: CacheSetting,
    /// Size of the worker thread pool; rayon's default when unset.
    pub threads: Option<usize>,
    /// Halt after this stage completes, leaving a resumable checkpoint.
    pub stop_after: Option<StageName>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageName,
    pub stage_digest: String,
    pub output_digest: String,
    #[serde(default)]
    pub quarantined: Vec<Quarantine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_digest: String,
    pub input_digest: String,
    pub completed: Vec<StageRecord>,
}

impl Checkpoint {
    fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(CHECKPOINT);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| {
                Error::Resume(format!("unreadable checkpoint {}: {e}", path.display()))
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CorpusError::io(&path, e).into()),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        Ok(write_atomic(
            &dir.join(CHECKPOINT),
            format!("{text}\n").as_bytes(),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub config_digest: String,
    pub stages: Vec<StageName>,
    /// Stages computed by this invocation.
    pub executed: Vec<StageName>,
    /// Stages taken from the checkpoint.
    pub reused: Vec<StageName>,
    pub finished: bool,
    pub raw_count: usize,
    pub manifests: Vec<StageManifest>,
    pub compression: Vec<CompressionRow>,
    pub final_snapshot: Option<PathBuf>,
    pub final_digest: Option<String>,
    pub quarantined: Vec<Quarantine>,
    pub worker_calls: u64,
}

pub fn snapshot_path(run_dir: &Path, name: &str) -> PathBuf {
    run_dir.join("snapshots").join(format!("{name}.jsonl"))
}

pub fn manifest_path(run_dir: &Path, stage: StageName) -> PathBuf {
    run_dir
        .join("manifests")
        .join(format!("{}.json", stage.as_str()))
}

pub fn audit_path(run_dir: &Path, stage: StageName) -> PathBuf {
    run_dir
        .join("audit")
        .join(format!("{}.jsonl", stage.as_str()))
}

fn stage_digest(config_digest: &str, stage: StageName, parent_digest: &str) -> String {
    let mut h = Sha256::new();
    for part in [config_digest, stage.as_str(), parent_digest] {
        h.update(part.as_bytes());
        h.update([0x1f]);
    }
    hex::encode(h.finalize())
}

fn load_named(path: &Path, name: &str) -> Result<CorpusSnapshot> {
    let mut snap = load_snapshot(path)?;
    snap.name = name.to_string();
    Ok(snap)
}

fn open_cache(
    run_dir: &Path,
    config: &PipelineConfig,
    setting: &CacheSetting,
) -> Result<Option<Arc<ScoreCache>>> {
    let dir = match setting {
        CacheSetting::Off => return Ok(None),
        CacheSetting::Dir(d) => d.clone(),
        CacheSetting::RunDir => config
            .cache_dir
            .clone()
            .unwrap_or_else(|| run_dir.join("cache")),
    };
    Ok(Some(Arc::new(ScoreCache::open(&dir)?)))
}

/// Starts a run over `input`, or continues one already present in `run_dir`
/// with the same config.
pub fn run(
    config: &PipelineConfig,
    input: &Path,
    run_dir: &Path,
    settings: &RunSettings,
) -> Result<RunSummary> {
    config.validate()?;
    let mut d = load_named(input, INPUT_SNAPSHOT)?;
    d.canonicalize();
    if let Some(cp) = Checkpoint::read(run_dir)? {
        if cp.config_digest != config.digest() {
            return Err(Error::Resume(format!(
                "{} already holds a run with a different config; choose a new output directory",
                run_dir.display()
            )));
        }
        if cp.input_digest != d.digest() {
            return Err(Error::Resume(format!(
                "{} already holds a run over a different input",
                run_dir.display()
            )));
        }
    }
    fs::create_dir_all(run_dir).map_err(|e| CorpusError::io(run_dir, e))?;
    let text = serde_json::to_string_pretty(config).expect("config serializes");
    write_atomic(&run_dir.join(CONFIG), format!("{text}\n").as_bytes())?;
    write_atomic(
        &snapshot_path(run_dir, INPUT_SNAPSHOT),
        d.to_jsonl().as_bytes(),
    )?;
    execute(config, d, run_dir, settings)
}

/// Reads the config stored in `run_dir`.
pub fn stored_config(run_dir: &Path) -> Result<PipelineConfig> {
    let path = run_dir.join(CONFIG);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Resume(format!("{} is not a run directory: {e}", run_dir.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Resume(format!("unreadable {}: {e}", path.display())))
}

/// Continues the run in `run_dir`. With `config`, refuses unless it matches
/// the stored config digest.
pub fn resume(
    run_dir: &Path,
    config: Option<&PipelineConfig>,
    settings: &RunSettings,
) -> Result<RunSummary> {
    let stored = stored_config(run_dir)?;
    let checkpoint = Checkpoint::read(run_dir)?
        .ok_or_else(|| Error::Resume(format!("{} has no checkpoint", run_dir.display())))?;
    if checkpoint.config_digest != stored.digest() {
        return Err(Error::Resume(
            "stored config does not match its checkpoint".into(),
        ));
    }
    if let Some(cfg) = config {
        if cfg.digest() != stored.digest() {
            return Err(Error::Resume(format!(
                "config digest {} differs from the run's {} (changed: {}); start a new run instead",
                &cfg.digest()[..12],
                &stored.digest()[..12],
                cfg.differing_sections(&stored).join(", ")
            )));
        }
    }
    let d = load_named(&snapshot_path(run_dir, INPUT_SNAPSHOT), INPUT_SNAPSHOT)?;
    if d.digest() != checkpoint.input_digest {
        return Err(Error::Resume(
            "input snapshot changed since the run started".into(),
        ));
    }
    execute(&stored, d, run_dir, settings)
}

fn execute(
    config: &PipelineConfig,
    d: CorpusSnapshot,
    run_dir: &Path,
    settings: &RunSettings,
) -> Result<RunSummary> {
    let pool = match settings.threads {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build a {n}-thread pool: {e}")))?,
        ),
        None => None,
    };
    match pool {
        Some(p) => p.install(|| execute_stages(config, d, run_dir, settings)),
        None => execute_stages(config, d, run_dir, settings),
    }
}

fn execute_stages(
    config: &PipelineConfig,
    d: CorpusSnapshot,
    run_dir: &Path,
    settings: &RunSettings,
) -> Result<RunSummary> {
    let stages = config.stage_list()?;
    let config_digest = config.digest();
    let cache = open_cache(run_dir, config, &settings.cache)?;
    let workers = Workers::new(config.workers.clone(), config.gateway_options(), cache);

    let mut checkpoint = Checkpoint::read(run_dir)?.unwrap_or_else(|| Checkpoint {
        config_digest: config_digest.clone(),
        input_digest: d.digest(),
        completed: Vec::new(),
    });
    let raw_count = d.len();
    let mut current = d;
    let mut dropped_pool = CorpusSnapshot::new(dedup::DROPPED_POOL, Vec::new());
    let mut executed = Vec::new();
    let mut reused = Vec::new();
    let mut halted = false;

    for (i, &stage) in stages.iter().enumerate() {
        let digest = stage_digest(&config_digest, stage, &current.digest());
        let out_path = snapshot_path(run_dir, stage.output());
        if let Some(rec) = checkpoint
            .completed
            .get(i)
            .filter(|r| r.stage == stage && r.stage_digest == digest)
        {
            if let Ok(snap) = load_named(&out_path, stage.output()) {
                if snap.digest() == rec.output_digest {
                    if stage == StageName::Dedup {
                        dropped_pool = load_named(
                            &snapshot_path(run_dir, dedup::DROPPED_POOL),
                            dedup::DROPPED_POOL,
                        )?;
                    }
                    current = snap;
                    reused.push(stage);
                    continue;
                }
            }
        }

        checkpoint.completed.truncate(i);
        let output = run_one(config, stage, &current, &dropped_pool, &workers, run_dir)?;
        let (out, pool) = output;
        if let Some(pool) = pool {
            write_atomic(
                &snapshot_path(run_dir, dedup::DROPPED_POOL),
                pool.to_jsonl().as_bytes(),
            )?;
            dropped_pool = pool;
        }
        persist_stage(run_dir, stage, &out, raw_count, &config_digest)?;
        checkpoint.completed.push(StageRecord {
            stage,
            stage_digest: digest,
            output_digest: out.snapshot.digest(),
            quarantined: out.quarantined.clone(),
        });
        checkpoint.write(run_dir)?;
        workers
            .flush_cache()
            .map_err(|e| CorpusError::io(run_dir, e))?;
        executed.push(stage);
        current = out.snapshot;
        if settings.stop_after == Some(stage) && i + 1 < stages.len() {
            halted = true;
            break;
        }
    }

    let done = checkpoint.completed.len().min(stages.len());
    let mut manifests = Vec::new();
    for &stage in &stages[..done] {
        manifests.push(StageManifest::read(&manifest_path(run_dir, stage))?);
    }
    let quarantined: Vec<Quarantine> = checkpoint
        .completed
        .iter()
        .flat_map(|r| r.quarantined.clone())
        .collect();
    let lines: String = quarantined
        .iter()
        .map(|q| serde_json::to_string(q).expect("quarantine serializes") + "\n")
        .collect();
    write_atomic(&run_dir.join("quarantine.jsonl"), lines.as_bytes())?;

    let counts: Vec<(String, f64)> = manifests
        .iter()
        .filter(|m| m.output_count > 0)
        .map(|m| (m.stage.clone(), m.output_count as f64))
        .collect();
    let compression = if raw_count > 0 {
        compression_report(&counts, raw_count as f64)?
    } else {
        Vec::new()
    };
    let finished = !halted && done == stages.len();
    let last = stages[..done].last().copied();
    let summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        config_digest,
        stages: stages.clone(),
        executed,
        reused,
        finished,
        raw_count,
        manifests,
        compression,
        final_snapshot: last
            .filter(|_| finished)
            .map(|s| snapshot_path(run_dir, s.output())),
        final_digest: last.filter(|_| finished).map(|_| current.digest()),
        quarantined,
        worker_calls: workers.worker_calls(),
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&run_dir.join(SUMMARY), format!("{text}\n").as_bytes())?;
    Ok(summary)
}

fn section<T>(section: &Option<T>, stage: StageName) -> Result<&T> {
    section.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "stage `{}` needs a [{}] section",
            stage.as_str(),
            stage.as_str()
        ))
    })
}

fn run_one(
    config: &PipelineConfig,
    stage: StageName,
    input: &CorpusSnapshot,
    dropped_pool: &CorpusSnapshot,
    workers: &Workers,
    run_dir: &Path,
) -> Result<(StageOutput, Option<CorpusSnapshot>)> {
    Ok(match stage {
        StageName::Quality => (
            quality::run_stage(input, section(&config.quality, stage)?, workers)?,
            None,
        ),
        StageName::Reference => (
            reference::run_stage(input, section(&config.reference, stage)?, workers)?,
            None,
        ),
        StageName::Dedup => {
            let out =
                dedup::run_stage(input, section(&config.dedup, stage)?, workers, config.seed)?;
            (out.stage, Some(out.dropped_pool))
        }
        StageName::Redist => {
            let out = redistribution::run_stage(
                input,
                dropped_pool,
                section(&config.redist, stage)?,
                workers,
                config.seed,
            )?;
            write_atomic(
                &run_dir.join("reports").join("distribution.txt"),
                out.report.render().as_bytes(),
            )?;
            (out.stage, None)
        }
    })
}

fn persist_stage(
    run_dir: &Path,
    stage: StageName,
    out: &StageOutput,
    raw: usize,
    config_digest: &str,
) -> Result<()> {
    let audit = audit_path(run_dir, stage);
    match fs::remove_file(&audit) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(CorpusError::io(&audit, e).into()),
    }
    AuditLog::open(&audit)?.append_all(&out.audit)?;
    write_atomic(
        &snapshot_path(run_dir, stage.output()),
        out.snapshot.to_jsonl().as_bytes(),
    )?;
    let rel = format!("audit/{}.jsonl", stage.as_str());
    out.manifest(raw, config_digest, &rel)
        .write(&manifest_path(run_dir, stage))?;
    Ok(())
}
