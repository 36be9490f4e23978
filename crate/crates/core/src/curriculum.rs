//! Offline curriculum: difficulty tiers from reference-model votes, and the
//! phased training schedule built on top of them.
//!
//! Each of `K` reference workers answers the question once; the reward model
//! scores those answers and the sample's own answer. The vote count `s` is
//! the number of workers whose gap `r^k_â - r_a` strictly exceeds `τ_cl`.
//! Samples many models beat are easy (tier 1); samples no model beats land
//! in the hardest tier `n`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{AuditEntry, CorpusSnapshot, Decision, Modality, Sample};
use crate::error::{Error, Result};
use crate::gateway::{GenerateContext, GenerateMode, SampleView, Variant, Workers};
use crate::stage::Quarantine;

pub const STAGE: &str = "ocl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteConfig {
    pub k: usize,
    pub tau_cl: f64,
    pub n: usize,
    /// Explicit tier per vote count, indexed by `s` in `0..=K`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<usize>>,
}

impl VoteConfig {
    pub fn new(k: usize, tau_cl: f64, n: usize) -> Self {
        VoteConfig {
            k,
            tau_cl,
            n,
            f: None,
        }
    }

    pub fn with_table(mut self, f: Vec<usize>) -> Self {
        self.f = Some(f);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("ocl.K must be at least 1".into()));
        }
        if self.n == 0 || self.n > self.k + 1 {
            return Err(Error::Config(format!(
                "ocl.n must lie in 1..={}, got {}",
                self.k + 1,
                self.n
            )));
        }
        if !self.tau_cl.is_finite() {
            return Err(Error::Config("ocl.tau_cl must be finite".into()));
        }
        if let Some(f) = &self.f {
            if f.len() != self.k + 1 {
                return Err(Error::Config(format!(
                    "ocl.f must list a tier for every vote count 0..={}, got {} entries",
                    self.k,
                    f.len()
                )));
            }
            if let Some(t) = f.iter().find(|&&t| t == 0 || t > self.n) {
                return Err(Error::Config(format!(
                    "ocl.f tier {t} outside 1..={}",
                    self.n
                )));
            }
            if f.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::Config(
                    "ocl.f must be non-increasing: more votes never means a harder tier".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Number of gaps strictly above `tau_cl`.
pub fn vote_count(gaps: &[f64], tau_cl: f64) -> usize {
    gaps.iter().filter(|&&g| g > tau_cl).count()
}

/// Equal-width binning of `K - s` into `n` tiers.
pub fn default_tier(s: usize, k: usize, n: usize) -> usize {
    1 + (k - s) * n / (k + 1)
}

pub fn assign_tier(s: usize, config: &VoteConfig) -> Result<usize> {
    if s > config.k {
        return Err(Error::InvalidInput(format!(
            "vote count {s} exceeds K={}",
            config.k
        )));
    }
    Ok(match &config.f {
        Some(f) => f[s],
        None => default_tier(s, config.k, config.n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierAssignment {
    pub sample_id: String,
    /// `r^k_â - r_a` per reference worker; `None` where the worker faulted,
    /// which counts as no vote.
    pub per_model_gaps: Vec<Option<f64>>,
    pub s: usize,
    pub tier: usize,
}

impl TierAssignment {
    pub fn new(sample_id: &str, gaps: Vec<Option<f64>>, config: &VoteConfig) -> Result<Self> {
        let finite: Vec<f64> = gaps
            .iter()
            .map(|g| g.unwrap_or(f64::NEG_INFINITY))
            .collect();
        let s = vote_count(&finite, config.tau_cl);
        Ok(TierAssignment {
            sample_id: sample_id.to_string(),
            per_model_gaps: gaps,
            s,
            tier: assign_tier(s, config)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePreset {
    /// Tiers 1..n-1 single-image, then a video-only stage, then tier n with
    /// multi-image and pure-text data mixed in.
    #[default]
    Phased,
    /// One stage per tier, every modality kept at its difficulty tier.
    TiersOnly,
}

fn default_tau_cl() -> f64 {
    0.0
}

/// `ocl.*` config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OclConfig {
    /// Defaults to the number of bound reference workers.
    #[serde(default, rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default = "default_tau_cl")]
    pub tau_cl: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<usize>>,
    #[serde(default)]
    pub schedule_preset: SchedulePreset,
}

impl OclConfig {
    pub fn vote_config(&self, workers: usize) -> Result<VoteConfig> {
        let k = self.k.unwrap_or(workers);
        if k != workers {
            return Err(Error::Config(format!(
                "ocl.K = {k} but {workers} reference workers are bound"
            )));
        }
        let cfg = VoteConfig {
            k,
            tau_cl: self.tau_cl,
            n: self.n,
            f: self.f.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStage {
    pub name: String,
    pub sample_ids: Vec<String>,
    pub volume: BTreeMap<Modality, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub preset: SchedulePreset,
    pub stages: Vec<ScheduleStage>,
}

impl Schedule {
    pub fn names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn volume_table(&self) -> VolumeTable {
        VolumeTable {
            rows: self
                .stages
                .iter()
                .map(|s| {
                    let v = MODALITY_COLUMNS.map(|m| s.volume.get(&m).copied().unwrap_or(0));
                    (s.name.clone(), v)
                })
                .collect(),
        }
    }
}

pub const MODALITY_COLUMNS: [Modality; 4] = [
    Modality::SingleImage,
    Modality::MultiImage,
    Modality::Video,
    Modality::PureText,
];

/// Stage-by-modality sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeTable {
    pub rows: Vec<(String, [usize; 4])>,
}

/// `--` for zero, thousands as `K` at or above 1000.
pub fn volume_label(n: usize) -> String {
    match n {
        0 => "--".into(),
        n if n >= 1000 => format!("{}K", (n + 500) / 1000),
        n => n.to_string(),
    }
}

impl VolumeTable {
    pub fn render(&self) -> String {
        let header = [
            "Data Volume",
            "Single Image",
            "MultiImg",
            "Video",
            "Pure Text",
        ];
        let mut cells: Vec<[String; 5]> = vec![header.map(String::from)];
        for (name, v) in &self.rows {
            cells.push([
                name.clone(),
                volume_label(v[0]),
                volume_label(v[1]),
                volume_label(v[2]),
                volume_label(v[3]),
            ]);
        }
        let widths: Vec<usize> = (0..5)
            .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Orders tiered samples into training stages. Items are `(id, tier, modality)`.
pub fn emit_schedule(
    items: &[(String, usize, Modality)],
    n: usize,
    preset: SchedulePreset,
) -> Result<Schedule> {
    if n == 0 {
        return Err(Error::Config("tier count must be positive".into()));
    }
    if let Some((id, t, _)) = items.iter().find(|(_, t, _)| *t == 0 || *t > n) {
        return Err(Error::InvalidInput(format!(
            "sample `{id}` has tier {t} outside 1..={n}"
        )));
    }
    let mut stages: Vec<ScheduleStage> = Vec::new();
    let mut push = |name: String, pick: &dyn Fn(usize, Modality) -> bool| {
        let mut ids = Vec::new();
        let mut volume = BTreeMap::new();
        for (id, t, m) in items {
            if pick(*t, *m) {
                ids.push(id.clone());
                *volume.entry(*m).or_insert(0) += 1;
            }
        }
        stages.push(ScheduleStage {
            name,
            sample_ids: ids,
            volume,
        });
    };
    match preset {
        SchedulePreset::TiersOnly => {
            for tier in 1..=n {
                push(format!("Tier{tier}"), &|t, _| t == tier);
            }
        }
        SchedulePreset::Phased => {
            for tier in 1..n {
                push(format!("Tier{tier}"), &|t, m| {
                    t == tier && m == Modality::SingleImage
                });
            }
            push("Video".into(), &|_, m| m == Modality::Video);
            push(format!("Tier{n}"), &|t, m| match m {
                Modality::SingleImage => t == n,
                Modality::MultiImage | Modality::PureText => true,
                Modality::Video => false,
            });
        }
    }
    Ok(Schedule { preset, stages })
}

#[derive(Debug, Clone)]
pub struct CurriculumOutput {
    pub assignments: Vec<TierAssignment>,
    /// Difficulty tiers 1..=n; a partition of the scored input.
    pub tiers: Vec<CorpusSnapshot>,
    pub schedule: Schedule,
    pub audit: Vec<AuditEntry>,
    pub quarantined: Vec<Quarantine>,
}

/// Per-sample gaps to each reference model; `None` where that reference
/// faulted.
pub type SampleGaps = (String, Vec<Option<f64>>);

/// Scores `r_a` once and every reference worker's answer, returning per
/// sample the gaps `r^k_â - r_a`.
pub fn collect_gaps(
    samples: &[Sample],
    workers: &Workers,
) -> Result<(Vec<SampleGaps>, Vec<Quarantine>)> {
    let reward = workers.reward()?;
    let refs = workers.ocl_refs()?;
    let mut quarantined = Vec::new();
    let items: Vec<_> = samples
        .iter()
        .map(|s| (SampleView::of(s), Variant::Answer))
        .collect();
    let r_a = reward.score_many(&items)?;

    let mut per_model: Vec<Vec<Option<f64>>> = Vec::with_capacity(refs.len());
    for gw in &refs {
        let ctx: Vec<_> = samples
            .iter()
            .map(|s| (GenerateContext::of(s), GenerateMode::Reference))
            .collect();
        let answers = gw.generate_many(&ctx)?;
        let mut scored_at = Vec::new();
        let mut views = Vec::new();
        for (i, (s, a)) in samples.iter().zip(answers).enumerate() {
            if let Ok(mut a) = a {
                views.push((
                    SampleView::with_answer(s, &a.remove(0).text),
                    Variant::Reference,
                ));
                scored_at.push(i);
            }
        }
        let mut col = vec![None; samples.len()];
        for (i, r) in scored_at.into_iter().zip(reward.score_many(&views)?) {
            col[i] = r.ok().map(|r| r.score);
        }
        per_model.push(col);
    }

    let mut out = Vec::new();
    for (i, (s, ra)) in samples.iter().zip(r_a).enumerate() {
        match ra {
            Ok(ra) => {
                let gaps = per_model
                    .iter()
                    .map(|col| col[i].map(|rk| rk - ra.score))
                    .collect();
                out.push((s.id.clone(), gaps));
            }
            Err(e) => quarantined.push(Quarantine::new(&s.id, STAGE, &e)),
        }
    }
    Ok((out, quarantined))
}

pub fn run(
    input: &CorpusSnapshot,
    config: &OclConfig,
    workers: &Workers,
) -> Result<CurriculumOutput> {
    let vote = config.vote_config(workers.bindings().ocl_refs.len())?;
    let (gaps, quarantined) = collect_gaps(&input.samples, workers)?;
    let mut assignments = Vec::with_capacity(gaps.len());
    let mut audit: Vec<AuditEntry> = quarantined.iter().map(Quarantine::audit).collect();
    for (id, g) in gaps {
        let a = TierAssignment::new(&id, g, &vote)?;
        let mut entry = AuditEntry::new(&id, STAGE, Decision::Kept, &format!("tier{}", a.tier))
            .score("s", a.s as f64)
            .score("tier", a.tier as f64);
        for (k, g) in a.per_model_gaps.iter().enumerate() {
            match g {
                Some(g) => entry = entry.score(&format!("gap_{k}"), *g),
                None => entry.reason.push_str(&format!(";fault:{k}")),
            }
        }
        audit.push(entry);
        assignments.push(a);
    }

    let mut buckets: Vec<Vec<Sample>> = vec![Vec::new(); vote.n];
    let mut items = Vec::with_capacity(assignments.len());
    for a in &assignments {
        let s = input.get(&a.sample_id).expect("assignment id is in input");
        buckets[a.tier - 1].push(s.clone());
        items.push((a.sample_id.clone(), a.tier, s.modality()));
    }
    let tiers = buckets
        .into_iter()
        .enumerate()
        .map(|(i, b)| CorpusSnapshot::derived(format!("tier{}", i + 1), input, b))
        .collect();
    let schedule = emit_schedule(&items, vote.n, config.schedule_preset)?;
    Ok(CurriculumOutput {
        assignments,
        tiers,
        schedule,
        audit,
        quarantined,
    })
}
