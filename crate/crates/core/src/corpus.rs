//! Corpus data model, the line-delimited snapshot format and the per-sample
//! audit trail.
//!
//! A snapshot file holds one JSON [`Sample`] per line. Media is referenced by
//! uri and never decoded. Every stage writes one [`AuditEntry`] per input
//! sample to an append-only log next to its [`StageManifest`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record{}: {message}", field.as_ref().map(|f| format!(" (field `{f}`)")).unwrap_or_default())]
    Malformed {
        line: usize,
        field: Option<String>,
        message: String,
    },
    #[error("line {line}: duplicate sample id `{id}`")]
    DuplicateId { id: String, line: usize },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Image,
    Video,
    None,
}

/// Frame rate as an exact rational, rendered `num/den` on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fps {
    pub num: u32,
    pub den: u32,
}

impl fmt::Display for Fps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fps {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (num, den) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        let num: u32 = num
            .parse()
            .map_err(|_| format!("bad fps numerator in `{s}`"))?;
        let den: u32 = den
            .parse()
            .map_err(|_| format!("bad fps denominator in `{s}`"))?;
        if num == 0 || den == 0 {
            return Err(format!("fps must be positive, got `{s}`"));
        }
        Ok(Fps { num, den })
    }
}

impl Serialize for Fps {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fps {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u32),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(n) => Fps::from_str(&n.to_string()),
            Raw::Text(s) => Fps::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MediaRef {
    pub kind: MediaKind,
    #[serde(default)]
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<Fps>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_frames: Option<u32>,
}

impl MediaRef {
    pub fn image(uri: impl Into<String>) -> Self {
        MediaRef {
            kind: MediaKind::Image,
            uri: uri.into(),
            fps: None,
            max_frames: None,
        }
    }

    pub fn video(uri: impl Into<String>, fps: Option<Fps>, max_frames: Option<u32>) -> Self {
        MediaRef {
            kind: MediaKind::Video,
            uri: uri.into(),
            fps,
            max_frames,
        }
    }

    /// Returns the offending field name and a message when an invariant fails.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if matches!(self.kind, MediaKind::Image | MediaKind::Video) && self.uri.is_empty() {
            return Err(("uri", "image and video media require a uri".into()));
        }
        if self.kind != MediaKind::Video && (self.fps.is_some() || self.max_frames.is_some()) {
            return Err(("fps", "frame policy is only allowed on video media".into()));
        }
        if self.max_frames == Some(0) {
            return Err(("max_frames", "max_frames must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hierarchical capability label, coarsest level first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CapabilityLabel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l3: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l4: Option<String>,
}

impl CapabilityLabel {
    /// Builds a label from up to four levels; extra levels are ignored.
    pub fn from_levels<S: AsRef<str>>(levels: &[S]) -> Self {
        let mut it = levels
            .iter()
            .map(|s| Some(s.as_ref().to_string()).filter(|s| !s.is_empty()));
        CapabilityLabel {
            l1: it.next().flatten(),
            l2: it.next().flatten(),
            l3: it.next().flatten(),
            l4: it.next().flatten(),
        }
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        [&self.l1, &self.l2, &self.l3, &self.l4]
            .into_iter()
            .filter_map(|l| l.as_deref())
    }

    /// The finest nonempty level.
    pub fn leaf(&self) -> Option<&str> {
        [&self.l4, &self.l3, &self.l2, &self.l1]
            .into_iter()
            .filter_map(|l| l.as_deref())
            .find(|l| !l.is_empty())
    }
}

/// Input modality of a sample, derived from its media list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    SingleImage,
    MultiImage,
    Video,
    PureText,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::SingleImage => "single-image",
            Modality::MultiImage => "multi-image",
            Modality::Video => "video",
            Modality::PureText => "pure-text",
        }
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single-image" => Ok(Modality::SingleImage),
            "multi-image" => Ok(Modality::MultiImage),
            "video" => Ok(Modality::Video),
            "pure-text" => Ok(Modality::PureText),
            other => Err(format!("unknown modality tag `{other}`")),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    #[serde(default)]
    pub media: Vec<MediaRef>,
    pub question: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<CapabilityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default)]
    pub source: String,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        Sample {
            id: id.into(),
            media: Vec::new(),
            question: question.into(),
            answer: answer.into(),
            capability: None,
            scenario: None,
            source: String::new(),
        }
    }

    pub fn with_media(mut self, media: MediaRef) -> Self {
        self.media.push(media);
        self
    }

    pub fn with_scenario(mut self, scenario: impl Into<String>) -> Self {
        self.scenario = Some(scenario.into());
        self
    }

    /// A sample the curation stages may consume.
    pub fn is_curation_eligible(&self) -> bool {
        !self.question.trim().is_empty() && !self.answer.trim().is_empty()
    }

    pub fn media_uris(&self) -> Vec<&str> {
        self.media
            .iter()
            .filter(|m| m.kind != MediaKind::None)
            .map(|m| m.uri.as_str())
            .collect()
    }

    pub fn modality(&self) -> Modality {
        let visual: Vec<_> = self
            .media
            .iter()
            .filter(|m| m.kind != MediaKind::None)
            .collect();
        if visual.iter().any(|m| m.kind == MediaKind::Video) {
            Modality::Video
        } else {
            match visual.len() {
                0 => Modality::PureText,
                1 => Modality::SingleImage,
                _ => Modality::MultiImage,
            }
        }
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.id.is_empty() {
            return Err(("id", "id must be nonempty".into()));
        }
        if self.question.is_empty() {
            return Err(("question", "question must be nonempty".into()));
        }
        for m in &self.media {
            m.validate()?;
        }
        Ok(())
    }
}

/// Id of a replicated copy of `origin`.
pub fn replica_id(origin: &str, k: usize) -> String {
    format!("{origin}#r{k}")
}

/// Id of a sample re-admitted from an upstream drop pool.
pub fn backfill_id(origin: &str) -> String {
    format!("{origin}#bf")
}

/// Strips a provenance suffix, returning the id the sample was derived from.
pub fn origin_id(id: &str) -> &str {
    match id.rfind('#') {
        Some(pos) => {
            let suffix = &id[pos + 1..];
            let is_replica = suffix
                .strip_prefix('r')
                .is_some_and(|k| !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()));
            if suffix == "bf" || is_replica {
                &id[..pos]
            } else {
                id
            }
        }
        None => id,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSnapshot {
    pub name: String,
    pub parent: Option<String>,
    pub samples: Vec<Sample>,
}

impl CorpusSnapshot {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Self {
        CorpusSnapshot {
            name: name.into(),
            parent: None,
            samples,
        }
    }

    pub fn derived(name: impl Into<String>, parent: &CorpusSnapshot, samples: Vec<Sample>) -> Self {
        let mut snap = CorpusSnapshot {
            name: name.into(),
            parent: Some(parent.name.clone()),
            samples,
        };
        snap.canonicalize();
        snap
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorts samples by id, the canonical order at stage boundaries.
    pub fn canonicalize(&mut self) {
        self.samples.sort_by(|a, b| a.id.cmp(&b.id));
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the serialized snapshot content, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    /// Checks that every id exists in `parent`, modulo provenance suffixes.
    pub fn check_lineage(&self, parent: &CorpusSnapshot) -> Result<(), String> {
        let ids: HashMap<&str, ()> = parent.samples.iter().map(|s| (s.id.as_str(), ())).collect();
        for s in &self.samples {
            if !ids.contains_key(s.id.as_str()) && origin_id(&s.id) == s.id {
                return Err(format!(
                    "sample `{}` is not in parent `{}`",
                    s.id, parent.name
                ));
            }
        }
        Ok(())
    }
}

pub fn parse_snapshot(name: &str, text: &str) -> Result<CorpusSnapshot, CorpusError> {
    let mut samples = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_sample_line(line, line_no)?;
        if seen.insert(sample.id.clone(), line_no).is_some() {
            return Err(CorpusError::DuplicateId {
                id: sample.id,
                line: line_no,
            });
        }
        samples.push(sample);
    }
    Ok(CorpusSnapshot::new(name, samples))
}

fn parse_sample_line(line: &str, line_no: usize) -> Result<Sample, CorpusError> {
    let malformed = |field: Option<&str>, message: String| CorpusError::Malformed {
        line: line_no,
        field: field.map(str::to_string),
        message,
    };
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| malformed(None, e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(None, "record is not an object".into()))?;
    for field in ["id", "question"] {
        match obj.get(field) {
            Some(serde_json::Value::String(_)) => {}
            Some(_) => return Err(malformed(Some(field), "expected a string".into())),
            None => return Err(malformed(Some(field), "missing required field".into())),
        }
    }
    let sample: Sample = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        let field = msg.split('`').nth(1).map(str::to_string).or_else(|| {
            (msg.contains("media") || msg.contains("fps")).then(|| "media".to_string())
        });
        CorpusError::Malformed {
            line: line_no,
            field,
            message: msg,
        }
    })?;
    sample
        .validate()
        .map_err(|(field, message)| malformed(Some(field), message))?;
    Ok(sample)
}

/// Loads a snapshot, preserving file order. The snapshot is named after the
/// file stem.
pub fn load_snapshot(path: &Path) -> Result<CorpusSnapshot, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_snapshot(&name, &text)
}

/// Counts and bookkeeping needed to render a manifest for a written snapshot.
#[derive(Debug, Clone, Default)]
pub struct ManifestContext {
    pub raw_count: usize,
    pub input_count: usize,
    pub quarantined: usize,
    pub config_digest: String,
    pub audit_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub input_count: usize,
    pub output_count: usize,
    pub raw_count: usize,
    /// `raw / output`, rounded half-up to one decimal. Absent for an empty output.
    pub compression_ratio_vs_raw: Option<f64>,
    #[serde(default)]
    pub quarantined: usize,
    pub config_digest: String,
    pub audit_path: String,
    #[serde(default)]
    pub output_digest: String,
}

impl StageManifest {
    pub fn new(stage: &str, output: &CorpusSnapshot, ctx: &ManifestContext) -> Self {
        StageManifest {
            stage: stage.to_string(),
            input_count: ctx.input_count,
            output_count: output.len(),
            raw_count: ctx.raw_count,
            compression_ratio_vs_raw: compression_ratio(ctx.raw_count as f64, output.len() as f64),
            quarantined: ctx.quarantined,
            config_digest: ctx.config_digest.clone(),
            audit_path: ctx.audit_path.clone(),
            output_digest: output.digest(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, format!("{text}\n").as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
            line: e.line(),
            field: None,
            message: e.to_string(),
        })
    }
}

/// `raw / current` rounded half-up to one decimal; `None` when `current` is 0.
pub fn compression_ratio(raw: f64, current: f64) -> Option<f64> {
    if current > 0.0 {
        Some(round_one_decimal(raw / current))
    } else {
        None
    }
}

pub fn round_one_decimal(x: f64) -> f64 {
    (x * 10.0 + 0.5).floor() / 10.0
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CorpusError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CorpusError::io(path, e))
}

/// Writes the snapshot atomically and returns its manifest.
pub fn write_snapshot(
    snapshot: &CorpusSnapshot,
    path: &Path,
    ctx: &ManifestContext,
) -> Result<StageManifest, CorpusError> {
    write_atomic(path, snapshot.to_jsonl().as_bytes())?;
    Ok(StageManifest::new(&snapshot.name, snapshot, ctx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Kept,
    Dropped,
    Replicated,
    Backfilled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub sample_id: String,
    pub stage: String,
    pub decision: Decision,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
    pub reason: String,
    /// Another sample the decision refers to (the kept twin of a dedup drop,
    /// the origin of a replica).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub related: Option<String>,
    /// Logical clock: position of the entry in its log.
    #[serde(default)]
    pub timestamp: u64,
}

impl AuditEntry {
    pub fn new(sample_id: &str, stage: &str, decision: Decision, reason: &str) -> Self {
        AuditEntry {
            sample_id: sample_id.to_string(),
            stage: stage.to_string(),
            decision,
            scores: BTreeMap::new(),
            reason: reason.to_string(),
            related: None,
            timestamp: 0,
        }
    }

    /// Adds a score; non-finite values are not representable in the log and
    /// are skipped.
    pub fn score(mut self, name: &str, value: f64) -> Self {
        if value.is_finite() {
            self.scores.insert(name.to_string(), value);
        }
        self
    }

    pub fn related(mut self, id: impl Into<String>) -> Self {
        self.related = Some(id.into());
        self
    }
}

/// Append-only audit log. Each entry is flushed before `append` returns.
pub struct AuditLog {
    path: PathBuf,
    writer: BufWriter<File>,
    next_tick: u64,
}

impl AuditLog {
    pub fn open(path: &Path) -> Result<Self, CorpusError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        }
        let existing = match File::open(path) {
            Ok(f) => BufReader::new(f).lines().count() as u64,
            Err(_) => 0,
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CorpusError::io(path, e))?;
        Ok(AuditLog {
            path: path.to_path_buf(),
            writer: BufWriter::new(file),
            next_tick: existing,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, entry: &AuditEntry) -> Result<(), CorpusError> {
        let mut entry = entry.clone();
        entry.timestamp = self.next_tick;
        self.next_tick += 1;
        let line = serde_json::to_string(&entry).expect("audit entry serializes");
        writeln!(self.writer, "{line}")
            .and_then(|_| self.writer.flush())
            .map_err(|e| CorpusError::io(&self.path, e))
    }

    pub fn append_all<'a>(
        &mut self,
        entries: impl IntoIterator<Item = &'a AuditEntry>,
    ) -> Result<(), CorpusError> {
        for entry in entries {
            let mut entry = entry.clone();
            entry.timestamp = self.next_tick;
            self.next_tick += 1;
            let line = serde_json::to_string(&entry).expect("audit entry serializes");
            writeln!(self.writer, "{line}").map_err(|e| CorpusError::io(&self.path, e))?;
        }
        self.writer
            .flush()
            .map_err(|e| CorpusError::io(&self.path, e))
    }
}

/// Opens `log` in append mode and writes one entry.
pub fn append_audit(entry: &AuditEntry, log: &Path) -> Result<(), CorpusError> {
    AuditLog::open(log)?.append(entry)
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditEntry>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: idx + 1,
                field: None,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Ids a stage emitted, replayed from its audit entries.
pub fn replay_output_ids(entries: &[AuditEntry]) -> BTreeSet<String> {
    entries
        .iter()
        .filter(|e| e.decision != Decision::Dropped)
        .map(|e| e.sample_id.clone())
        .collect()
}

/// Checks audit completeness for one stage: every input id has exactly one
/// kept-or-dropped entry, and replicated/backfilled ids are disjoint from the
/// input.
pub fn check_audit_complete(
    input: &BTreeSet<String>,
    entries: &[AuditEntry],
) -> Result<(), String> {
    let mut decided = BTreeSet::new();
    for e in entries {
        match e.decision {
            Decision::Kept | Decision::Dropped => {
                if !input.contains(&e.sample_id) {
                    return Err(format!("audit entry for unknown id `{}`", e.sample_id));
                }
                if !decided.insert(e.sample_id.clone()) {
                    return Err(format!(
                        "id `{}` has more than one audit entry",
                        e.sample_id
                    ));
                }
            }
            Decision::Replicated | Decision::Backfilled => {
                if input.contains(&e.sample_id) {
                    return Err(format!(
                        "synthetic id `{}` collides with an input id",
                        e.sample_id
                    ));
                }
            }
        }
    }
    if decided.len() != input.len() {
        let missing: Vec<_> = input.difference(&decided).take(3).cloned().collect();
        return Err(format!("input ids without audit entries: {missing:?}"));
    }
    Ok(())
}
