//! Stage 4: rebalance the corpus toward a target capability prior `π(c)`.
//!
//! Every sample is classified into a capability leaf (or grouped by its
//! scenario tag), integer quotas are apportioned with the largest-remainder
//! method, and each leaf is downsampled to its quota. In
//! `backfill_then_replicate` mode a leaf short of its quota first re-admits
//! its own dedup drops, then replicates survivors under `#r<k>` ids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    backfill_id, origin_id, replica_id, AuditEntry, CapabilityLabel, CorpusSnapshot, Decision,
    Sample,
};
use crate::error::{Error, Result};
use crate::gateway::hash::stable_hash;
use crate::gateway::Workers;
use crate::stage::{sort_audit, Quarantine, StageOutput};

pub const STAGE: &str = "redist";
pub const OUTPUT: &str = "D_final";
pub const UNGROUPED: &str = "(none)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedistMode {
    #[default]
    DownsampleOnly,
    BackfillThenReplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    /// Deepest capability label from the classifier.
    #[default]
    Leaf,
    /// The sample's own `scenario` tag.
    Scenario,
}

/// Normalized target proportions per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPrior {
    weights: BTreeMap<String, f64>,
}

impl TargetPrior {
    pub fn new(raw: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((k, v)) = raw.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Config(format!(
                "prior weight for `{k}` must be finite and >= 0, got {v}"
            )));
        }
        let total: f64 = raw.values().sum();
        if total <= 0.0 {
            return Err(Error::Config(
                "prior needs at least one positive weight".into(),
            ));
        }
        let weights = raw.into_iter().map(|(k, v)| (k, v / total)).collect();
        Ok(TargetPrior { weights })
    }

    pub fn weight(&self, leaf: &str) -> f64 {
        self.weights.get(leaf).copied().unwrap_or(0.0)
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }
}

/// `redist.prior`: an inline table or a path to a TOML/JSON map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSource {
    Inline(BTreeMap<String, f64>),
    File(PathBuf),
}

impl PriorSource {
    pub fn load(&self) -> Result<TargetPrior> {
        match self {
            PriorSource::Inline(m) => TargetPrior::new(m.clone()),
            PriorSource::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read prior file {}: {e}", path.display()))
                })?;
                let map: BTreeMap<String, f64> = if path.extension().is_some_and(|e| e == "json") {
                    serde_json::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                } else {
                    toml::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                };
                TargetPrior::new(map)
            }
        }
    }
}

/// `redist.*` config keys. The prior has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RedistConfig {
    pub prior: PriorSource,
    #[serde(default)]
    pub mode: RedistMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub group_by: GroupBy,
}

impl RedistConfig {
    pub fn new(prior: BTreeMap<String, f64>, mode: RedistMode) -> Self {
        RedistConfig {
            prior: PriorSource::Inline(prior),
            mode,
            total_target: None,
            seed: None,
            group_by: GroupBy::Leaf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.load()?;
        match (self.mode, self.total_target) {
            (RedistMode::BackfillThenReplicate, None) => Err(Error::Config(
                "redist.total_target is required in backfill_then_replicate mode".into(),
            )),
            (_, Some(0)) => Err(Error::Config("redist.total_target must be positive".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedistributionPlan {
    pub total_target: usize,
    pub quota: BTreeMap<String, usize>,
    pub mode: RedistMode,
    pub seed: u64,
}

/// Largest-remainder apportionment of `total` seats over `weights` (which
/// sum to one). Remainder ties go to the smaller key. With `caps`, no group
/// exceeds its cap and the excess moves to groups that still have room.
pub fn apportion(
    weights: &BTreeMap<String, f64>,
    total: usize,
    caps: Option<&BTreeMap<String, usize>>,
) -> BTreeMap<String, usize> {
    let cap = |k: &str| caps.map_or(usize::MAX, |c| c.get(k).copied().unwrap_or(0));
    let mut quota = BTreeMap::new();
    let mut rema = Vec::new();
    let mut assigned = 0;
    for (k, &w) in weights {
        let exact = total as f64 * w;
        let floor = (exact + 1e-9).floor();
        let q = (floor as usize).min(cap(k));
        quota.insert(k.clone(), q);
        assigned += q;
        rema.push((k.clone(), (exact - floor).max(0.0), w));
    }
    rema.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut left = total.saturating_sub(assigned);
    while left > 0 {
        let mut progressed = false;
        for (k, _, w) in &rema {
            if left == 0 {
                break;
            }
            let q = quota.get_mut(k).expect("key present");
            if *w > 0.0 && *q < cap(k) {
                *q += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quota
}

pub fn make_plan(
    counts: &BTreeMap<String, usize>,
    prior: &TargetPrior,
    mode: RedistMode,
    total_override: Option<usize>,
    seed: u64,
) -> Result<RedistributionPlan> {
    if counts.is_empty() {
        return Err(Error::InvalidInput(
            "redistribution over an empty corpus".into(),
        ));
    }
    let mut weights = prior.weights().clone();
    for leaf in counts.keys() {
        weights.entry(leaf.clone()).or_insert(0.0);
    }
    let quota = match mode {
        RedistMode::DownsampleOnly => {
            let mut t = f64::INFINITY;
            for (leaf, &w) in prior.weights() {
                if w <= 0.0 {
                    continue;
                }
                let n = counts.get(leaf).copied().unwrap_or(0);
                if n == 0 {
                    return Err(Error::InvalidInput(format!(
                        "leaf `{leaf}` has positive target weight but no samples"
                    )));
                }
                t = t.min(n as f64 / w);
            }
            let mut total = (t + 1e-9).floor() as usize;
            if let Some(o) = total_override {
                total = total.min(o);
            }
            apportion(&weights, total, Some(counts))
        }
        RedistMode::BackfillThenReplicate => {
            let total = total_override.ok_or_else(|| {
                Error::Config("backfill_then_replicate needs an explicit total target".into())
            })?;
            apportion(&weights, total, None)
        }
    };
    Ok(RedistributionPlan {
        total_target: quota.values().sum(),
        quota,
        mode,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafRow {
    pub leaf: String,
    pub before: usize,
    pub target: f64,
    pub after: usize,
    pub backfilled: usize,
    pub replicated: usize,
}

/// Per-leaf counts and proportions before and after rebalancing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub rows: Vec<LeafRow>,
    pub before_total: usize,
    pub after_total: usize,
}

fn share(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        n as f64 / total as f64
    }
}

impl DistributionReport {
    pub fn before_share(&self, leaf: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.leaf == leaf)
            .map(|r| share(r.before, self.before_total))
    }

    pub fn after_share(&self, leaf: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.leaf == leaf)
            .map(|r| share(r.after, self.after_total))
    }

    /// `max_c |p̂_c - π_c|` over the rendered output.
    pub fn max_deviation(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (share(r.after, self.after_total) - r.target).abs())
            .fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.leaf.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9} {:>7}  {:>7}  {:>9} {:>7}  {:>8} {:>8}",
            "leaf", "before", "%", "target%", "after", "%", "backfill", "replica"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9} {:>7.1}  {:>7.1}  {:>9} {:>7.1}  {:>8} {:>8}",
                r.leaf,
                r.before,
                100.0 * share(r.before, self.before_total),
                100.0 * r.target,
                r.after,
                100.0 * share(r.after, self.after_total),
                r.backfilled,
                r.replicated
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9} {:>7.1}  {:>7.1}  {:>9} {:>7.1}",
            "total", self.before_total, 100.0, 100.0, self.after_total, 100.0
        );
        out
    }
}

fn leaf_rng(seed: u64, leaf: &str, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(&[seed.to_string().as_str(), leaf, purpose]))
}

pub fn group_key(sample: &Sample, by: GroupBy) -> String {
    let key = match by {
        GroupBy::Leaf => sample.capability.as_ref().and_then(CapabilityLabel::leaf),
        GroupBy::Scenario => sample.scenario.as_deref(),
    };
    key.unwrap_or(UNGROUPED).to_string()
}

pub fn count_groups(samples: &[Sample], by: GroupBy) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        *counts.entry(group_key(s, by)).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone)]
pub struct Applied {
    pub snapshot: CorpusSnapshot,
    pub audit: Vec<AuditEntry>,
    pub report: DistributionReport,
}

/// Resamples `input` to the plan quotas. `pool` holds dedup drops that may be
/// re-admitted in backfill mode.
pub fn apply_plan(
    input: &CorpusSnapshot,
    pool: &[Sample],
    by: GroupBy,
    plan: &RedistributionPlan,
    prior: &TargetPrior,
) -> Result<Applied> {
    let mut groups: BTreeMap<String, Vec<&Sample>> = BTreeMap::new();
    for s in &input.samples {
        groups.entry(group_key(s, by)).or_default().push(s);
    }
    let mut pool_groups: BTreeMap<String, Vec<&Sample>> = BTreeMap::new();
    for s in pool {
        pool_groups.entry(group_key(s, by)).or_default().push(s);
    }
    for v in pool_groups.values_mut() {
        v.sort_by(|a, b| a.id.cmp(&b.id));
    }

    let mut leaves: Vec<&String> = groups.keys().chain(plan.quota.keys()).collect();
    leaves.sort();
    leaves.dedup();

    let mut out = Vec::new();
    let mut audit = Vec::new();
    let mut rows = Vec::new();
    for leaf in leaves {
        let members = groups.get(leaf).map(Vec::as_slice).unwrap_or(&[]);
        let q = plan.quota.get(leaf).copied().unwrap_or(0);
        let mut chosen: Vec<Sample> = if members.len() > q {
            let mut rng = leaf_rng(plan.seed, leaf, "downsample");
            let mut pick = index::sample(&mut rng, members.len(), q).into_vec();
            pick.sort_unstable();
            let keep: std::collections::HashSet<usize> = pick.iter().copied().collect();
            for (i, s) in members.iter().enumerate() {
                if !keep.contains(&i) {
                    audit.push(
                        AuditEntry::new(&s.id, STAGE, Decision::Dropped, "over-quota")
                            .score("quota", q as f64),
                    );
                }
            }
            pick.into_iter().map(|i| members[i].clone()).collect()
        } else {
            members.iter().map(|s| (*s).clone()).collect()
        };
        for s in &chosen {
            audit.push(
                AuditEntry::new(&s.id, STAGE, Decision::Kept, "kept").score("quota", q as f64),
            );
        }

        let mut backfilled = 0;
        let mut shortfall = q - chosen.len();
        if shortfall > 0 && plan.mode == RedistMode::BackfillThenReplicate {
            if let Some(candidates) = pool_groups.get(leaf) {
                let take = shortfall.min(candidates.len());
                let mut rng = leaf_rng(plan.seed, leaf, "backfill");
                let mut pick = index::sample(&mut rng, candidates.len(), take).into_vec();
                pick.sort_unstable();
                for i in pick {
                    let mut s = candidates[i].clone();
                    s.id = backfill_id(&s.id);
                    audit.push(
                        AuditEntry::new(&s.id, STAGE, Decision::Backfilled, "backfill")
                            .related(origin_id(&s.id)),
                    );
                    chosen.push(s);
                }
                backfilled = take;
                shortfall -= take;
            }
        }
        let mut replicated = 0;
        if shortfall > 0 {
            if plan.mode == RedistMode::DownsampleOnly {
                return Err(Error::InvalidInput(format!(
                    "plan asks more of leaf `{leaf}` than it holds"
                )));
            }
            if chosen.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "leaf `{leaf}` has quota {q} but no samples to backfill or replicate"
                )));
            }
            let mut base = chosen.clone();
            base.sort_by(|a, b| a.id.cmp(&b.id));
            base.shuffle(&mut leaf_rng(plan.seed, leaf, "replicate"));
            for j in 0..shortfall {
                let origin = &base[j % base.len()];
                let mut s = origin.clone();
                s.id = replica_id(origin_id(&origin.id), j / base.len() + 1);
                audit.push(
                    AuditEntry::new(&s.id, STAGE, Decision::Replicated, "replicate")
                        .related(origin.id.clone()),
                );
                chosen.push(s);
            }
            replicated = shortfall;
        }

        rows.push(LeafRow {
            leaf: leaf.clone(),
            before: members.len(),
            target: prior.weight(leaf),
            after: chosen.len(),
            backfilled,
            replicated,
        });
        out.extend(chosen);
    }
    sort_audit(&mut audit);
    let report = DistributionReport {
        before_total: input.len(),
        after_total: out.len(),
        rows,
    };
    Ok(Applied {
        snapshot: CorpusSnapshot::derived(OUTPUT, input, out),
        audit,
        report,
    })
}

/// Labels every sample through the classifier worker.
pub fn classify_all(
    samples: &[Sample],
    workers: &Workers,
    stage: &str,
) -> Result<(BTreeMap<String, CapabilityLabel>, Vec<Quarantine>)> {
    let classifier = workers.classifier()?;
    let questions: Vec<(String, String)> = samples
        .iter()
        .map(|s| (s.id.clone(), s.question.clone()))
        .collect();
    let mut labels = BTreeMap::new();
    let mut quarantined = Vec::new();
    for (s, outcome) in samples.iter().zip(classifier.classify_many(&questions)?) {
        match outcome {
            Ok(l) => {
                labels.insert(s.id.clone(), l);
            }
            Err(e) => quarantined.push(Quarantine::new(&s.id, stage, &e)),
        }
    }
    Ok((labels, quarantined))
}

#[derive(Debug, Clone)]
pub struct RedistOutput {
    pub stage: StageOutput,
    pub plan: Option<RedistributionPlan>,
    pub report: DistributionReport,
}

pub fn run_stage(
    input: &CorpusSnapshot,
    pool: &CorpusSnapshot,
    config: &RedistConfig,
    workers: &Workers,
    seed: u64,
) -> Result<RedistOutput> {
    config.validate()?;
    let prior = config.prior.load()?;
    let seed = config.seed.unwrap_or(seed);

    let (labels, quarantined) = classify_all(&input.samples, workers, STAGE)?;
    let labeled: Vec<Sample> = input
        .samples
        .iter()
        .filter_map(|s| {
            labels.get(&s.id).map(|l| {
                let mut s = s.clone();
                s.capability = Some(l.clone());
                s
            })
        })
        .collect();
    let labeled = CorpusSnapshot::derived(input.name.clone(), input, labeled);
    let pool_labeled: Vec<Sample> =
        if config.mode == RedistMode::BackfillThenReplicate && !pool.is_empty() {
            // A pool sample the classifier fails on is simply not offered.
            let (pool_labels, _) = classify_all(&pool.samples, workers, STAGE)?;
            pool.samples
                .iter()
                .filter_map(|s| {
                    pool_labels.get(&s.id).map(|l| {
                        let mut s = s.clone();
                        s.capability = Some(l.clone());
                        s
                    })
                })
                .collect()
        } else {
            Vec::new()
        };

    let mut audit: Vec<AuditEntry> = quarantined.iter().map(Quarantine::audit).collect();
    let (snapshot, plan, report) = if labeled.is_empty() {
        let report = DistributionReport {
            rows: Vec::new(),
            before_total: 0,
            after_total: 0,
        };
        (
            CorpusSnapshot::derived(OUTPUT, input, Vec::new()),
            None,
            report,
        )
    } else {
        let counts = count_groups(&labeled.samples, config.group_by);
        let plan = make_plan(&counts, &prior, config.mode, config.total_target, seed)?;
        let applied = apply_plan(&labeled, &pool_labeled, config.group_by, &plan, &prior)?;
        audit.extend(applied.audit);
        let mut snapshot = applied.snapshot;
        snapshot.parent = Some(input.name.clone());
        (snapshot, Some(plan), applied.report)
    };
    sort_audit(&mut audit);
    Ok(RedistOutput {
        stage: StageOutput {
            stage: STAGE.into(),
            input_count: input.len(),
            snapshot,
            audit,
            quarantined,
        },
        plan,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn uniform_downsample_quota() {
        let prior = TargetPrior::new(map(&[("A", 1.0), ("B", 1.0)])).unwrap();
        let plan = make_plan(
            &counts(&[("A", 8), ("B", 2)]),
            &prior,
            RedistMode::DownsampleOnly,
            None,
            0,
        )
        .unwrap();
        assert_eq!(plan.total_target, 4);
        assert_eq!(plan.quota, counts(&[("A", 2), ("B", 2)]));
    }

    #[test]
    fn empirical_prior_is_identity() {
        let c = counts(&[("A", 7), ("B", 3), ("C", 11)]);
        let prior = TargetPrior::new(map(&[("A", 7.0), ("B", 3.0), ("C", 11.0)])).unwrap();
        let plan = make_plan(&c, &prior, RedistMode::DownsampleOnly, None, 0).unwrap();
        assert_eq!(plan.quota, c);
    }

    #[test]
    fn starved_leaf_named() {
        let prior = TargetPrior::new(map(&[("A", 1.0), ("Z", 1.0)])).unwrap();
        let err = make_plan(
            &counts(&[("A", 5)]),
            &prior,
            RedistMode::DownsampleOnly,
            None,
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("`Z`"));
    }

    #[test]
    fn backfill_requires_total() {
        let prior = TargetPrior::new(map(&[("A", 1.0)])).unwrap();
        assert!(make_plan(
            &counts(&[("A", 5)]),
            &prior,
            RedistMode::BackfillThenReplicate,
            None,
            0
        )
        .is_err());
        let plan = make_plan(
            &counts(&[("A", 5)]),
            &prior,
            RedistMode::BackfillThenReplicate,
            Some(9),
            0,
        )
        .unwrap();
        assert_eq!(plan.quota["A"], 9);
    }

    #[test]
    fn hamilton_breaks_ties_by_name() {
        let w = map(&[("a", 1.0 / 3.0), ("b", 1.0 / 3.0), ("c", 1.0 / 3.0)]);
        assert_eq!(
            apportion(&w, 4, None),
            counts(&[("a", 2), ("b", 1), ("c", 1)])
        );
    }

    #[test]
    fn prior_rejects_all_zero() {
        assert!(TargetPrior::new(map(&[("a", 0.0)])).is_err());
        assert!(TargetPrior::new(map(&[("a", -1.0), ("b", 2.0)])).is_err());
    }
}
