//! Stage 3: semantic deduplication.
//!
//! Samples are embedded, partitioned with k-means (`k = round(N / size)`),
//! and inside each cluster a greedy k-center pass keeps a subset whose
//! members are pairwise at least `δ` apart in cosine distance. Near
//! duplicates that land in different clusters are not compared.

mod kcenter;
mod kmeans;

pub use kcenter::{cosine_distance, kcenter_prune, Dropped, Selection, DUPLICATE_EPSILON};
pub use kmeans::{kmeans, nearest_centroid, squared_distance, ClusterModel};

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AuditEntry, CorpusSnapshot, Decision};
use crate::error::{Error, Result};
use crate::gateway::{EmbeddingVector, SampleView, Workers};
use crate::stage::{require_eligible, sort_audit, Quarantine, StageOutput};

pub const STAGE: &str = "dedup";
pub const OUTPUT: &str = "D3";
pub const DROPPED_POOL: &str = "D3_dropped";

fn default_cluster_size() -> usize {
    1024
}

fn default_max_iter() -> usize {
    100
}

/// `dedup.*` config keys. `delta` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupConfig {
    #[serde(default = "default_cluster_size")]
    pub target_cluster_size: usize,
    pub delta: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Overrides the run seed for clustering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DedupConfig {
    pub fn new(delta: f64) -> Self {
        DedupConfig {
            target_cluster_size: default_cluster_size(),
            delta,
            max_iter: default_max_iter(),
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_cluster_size == 0 {
            return Err(Error::Config(
                "dedup.target_cluster_size must be positive".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("dedup.max_iter must be positive".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "dedup.delta must be a finite value >= 0, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    pub fn cluster_count(&self, n: usize) -> usize {
        ((n as f64 / self.target_cluster_size as f64).round() as usize).clamp(1, n.max(1))
    }
}

#[derive(Debug, Clone)]
pub struct DedupOutput {
    pub stage: StageOutput,
    /// Removed near-duplicates, available to redistribution backfill.
    pub dropped_pool: CorpusSnapshot,
    pub model: Option<ClusterModel>,
}

/// Clusters `embeddings` and prunes each cluster. Returns the model and the
/// per-cluster selections, in cluster order.
pub fn prune_embeddings(
    embeddings: &[EmbeddingVector],
    config: &DedupConfig,
    seed: u64,
) -> Result<(ClusterModel, Vec<Selection>)> {
    config.validate()?;
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.values.clone()).collect();
    let k = config.cluster_count(points.len());
    let model = kmeans(&points, k, seed, config.max_iter)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in model.assignments.iter().enumerate() {
        members[c].push(i);
    }
    let selections = members
        .par_iter()
        .enumerate()
        .map(|(c, idx)| {
            let m: Vec<(&str, &[f64])> = idx
                .iter()
                .map(|&i| {
                    (
                        embeddings[i].sample_id.as_str(),
                        embeddings[i].values.as_slice(),
                    )
                })
                .collect();
            kcenter_prune(&m, &model.centroids[c], config.delta)
        })
        .collect();
    Ok((model, selections))
}

pub fn run_stage(
    input: &CorpusSnapshot,
    config: &DedupConfig,
    workers: &Workers,
    seed: u64,
) -> Result<DedupOutput> {
    config.validate()?;
    require_eligible(input, STAGE)?;
    let embedder = workers.embedder()?;
    let views: Vec<SampleView> = input.samples.iter().map(SampleView::of).collect();
    let mut embeddings = Vec::with_capacity(views.len());
    let mut quarantined = Vec::new();
    for (s, outcome) in input.samples.iter().zip(embedder.embed_many(&views)?) {
        match outcome {
            Ok(e) => embeddings.push(e),
            Err(e) => quarantined.push(Quarantine::new(&s.id, STAGE, &e)),
        }
    }

    let mut audit: Vec<AuditEntry> = quarantined.iter().map(Quarantine::audit).collect();
    let mut kept = Vec::new();
    let mut pool = Vec::new();
    let model = if embeddings.is_empty() {
        None
    } else {
        let (model, selections) =
            prune_embeddings(&embeddings, config, config.seed.unwrap_or(seed))?;
        let cluster_of: HashMap<&str, usize> = embeddings
            .iter()
            .zip(&model.assignments)
            .map(|(e, &c)| (e.sample_id.as_str(), c))
            .collect();
        for (c, sel) in selections.iter().enumerate() {
            for id in &sel.kept {
                kept.push(input.get(id).expect("embedded id is in input").clone());
                audit.push(
                    AuditEntry::new(id, STAGE, Decision::Kept, "kept").score("cluster", c as f64),
                );
            }
            for d in &sel.dropped {
                pool.push(input.get(&d.id).expect("embedded id is in input").clone());
                audit.push(
                    AuditEntry::new(&d.id, STAGE, Decision::Dropped, "near-duplicate")
                        .score("cluster", cluster_of[d.id.as_str()] as f64)
                        .score("distance", d.distance)
                        .related(d.nearest.clone()),
                );
            }
        }
        Some(model)
    };
    sort_audit(&mut audit);
    Ok(DedupOutput {
        stage: StageOutput {
            stage: STAGE.into(),
            input_count: input.len(),
            snapshot: CorpusSnapshot::derived(OUTPUT, input, kept),
            audit,
            quarantined,
        },
        dropped_pool: CorpusSnapshot::derived(DROPPED_POOL, input, pool),
        model,
    })
}
