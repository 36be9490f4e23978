//! Quality and reference filters checked against a direct recomputation
//! from the mock workers, plus threshold monotonicity and order invariance.

use std::collections::BTreeSet;

use proptest::prelude::*;
use serde_json::json;

use quadpipe::corpus::{check_audit_complete, replay_output_ids, CorpusSnapshot, Decision, Sample};
use quadpipe::fixtures::seeded_corpus;
use quadpipe::gateway::protocol::{GeneratePayload, RewardPayload};
use quadpipe::gateway::{MockWorker, Workers};
use quadpipe::quality::{self, QualityConfig, QualityScores};
use quadpipe::reference::{self, ReferenceConfig};

fn reward(worker: &MockWorker, variant: &str, s: &Sample, answer: &str) -> f64 {
    let p: RewardPayload = serde_json::from_value(json!({
        "variant": variant,
        "question": s.question,
        "answer": answer,
        "media": s.media_uris(),
    }))
    .unwrap();
    worker.reward(&p)
}

fn generate(worker: &MockWorker, mode: &str, s: &Sample, with_media: bool) -> String {
    let media = if with_media {
        s.media_uris()
    } else {
        Vec::new()
    };
    let p: GeneratePayload = serde_json::from_value(json!({
        "mode": mode,
        "question": s.question,
        "media": media,
    }))
    .unwrap();
    worker.generate(&p).unwrap()["texts"][0]
        .as_str()
        .unwrap()
        .to_string()
}

/// Kept ids for the quality filter, computed from scratch.
fn quality_oracle(d: &CorpusSnapshot, seed: u64, p: f64, tau_abar: f64) -> BTreeSet<String> {
    let rw = MockWorker::new(seed, "reward");
    let gen = MockWorker::new(seed, "generator");
    let rows: Vec<(String, f64, f64)> = d
        .samples
        .iter()
        .map(|s| {
            let ra = reward(&rw, "answer", s, &s.answer);
            let abar = generate(&gen, "vision_ablated", s, false);
            (s.id.clone(), ra, reward(&rw, "vision_ablated", s, &abar))
        })
        .collect();
    // Smallest τ among the scores such that at least ceil(p% N) scores are >= τ.
    let need = ((p / 100.0) * rows.len() as f64 - 1e-9).ceil() as usize;
    let mut r: Vec<f64> = rows.iter().map(|x| x.1).collect();
    r.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let tau = r[need.max(1) - 1];
    rows.into_iter()
        .filter(|(_, ra, rb)| *ra >= tau && ra - rb >= tau_abar)
        .map(|(id, _, _)| id)
        .collect()
}

fn reference_oracle(d: &CorpusSnapshot, seed: u64, tau: f64) -> BTreeSet<String> {
    let rw = MockWorker::new(seed, "reward");
    let rf = MockWorker::new(seed, "reference");
    d.samples
        .iter()
        .filter(|s| {
            let atilde = generate(&rf, "reference", s, true);
            reward(&rw, "answer", s, &s.answer) - reward(&rw, "reference", s, &atilde) >= tau
        })
        .map(|s| s.id.clone())
        .collect()
}

#[test]
fn quality_matches_oracle() {
    let d = seeded_corpus(400, 3);
    for (p, tau_abar) in [(30.0, 0.0), (60.0, -0.2), (90.0, 0.1), (5.0, -1.0)] {
        let out = quality::run_stage(
            &d,
            &QualityConfig::percentile(p, tau_abar),
            &Workers::mock(3),
        )
        .unwrap();
        assert_eq!(
            out.snapshot.ids(),
            quality_oracle(&d, 3, p, tau_abar),
            "p={p} tau_abar={tau_abar}"
        );
        check_audit_complete(&d.ids(), &out.audit).unwrap();
        assert_eq!(replay_output_ids(&out.audit), out.snapshot.ids());
    }
}

#[test]
fn reference_matches_oracle() {
    let d = seeded_corpus(300, 8);
    for tau in [0.0, 0.1, 0.4] {
        let out = reference::run_stage(&d, &ReferenceConfig::new(tau), &Workers::mock(8)).unwrap();
        assert_eq!(
            out.snapshot.ids(),
            reference_oracle(&d, 8, tau),
            "tau={tau}"
        );
        check_audit_complete(&d.ids(), &out.audit).unwrap();
        for e in &out.audit {
            let expect = if e.decision == Decision::Kept {
                "kept"
            } else {
                "mastered"
            };
            assert_eq!(e.reason, expect);
        }
    }
}

#[test]
fn chained_filters_are_nested() {
    let d = seeded_corpus(500, 21);
    let workers = Workers::mock(21);
    let d1 = quality::run_stage(&d, &QualityConfig::percentile(50.0, 0.0), &workers)
        .unwrap()
        .snapshot;
    let d2 = reference::run_stage(&d1, &ReferenceConfig::new(0.0), &workers)
        .unwrap()
        .snapshot;
    assert!(d2.ids().is_subset(&d1.ids()));
    assert!(d1.ids().is_subset(&d.ids()));
    d2.check_lineage(&d1).unwrap();
    d1.check_lineage(&d).unwrap();
    assert!(!d2.is_empty() && d2.len() < d1.len() && d1.len() < d.len());
}

#[test]
fn input_order_does_not_matter() {
    let d = seeded_corpus(200, 5);
    let mut reversed = d.clone();
    reversed.samples.reverse();
    let cfg = QualityConfig::percentile(40.0, 0.0);
    let a = quality::run_stage(&d, &cfg, &Workers::mock(5)).unwrap();
    let b = quality::run_stage(&reversed, &cfg, &Workers::mock(5)).unwrap();
    assert_eq!(a.snapshot.ids(), b.snapshot.ids());
    assert_eq!(a.audit, b.audit);
    let ra = reference::run_stage(&d, &ReferenceConfig::new(0.05), &Workers::mock(5)).unwrap();
    let rb =
        reference::run_stage(&reversed, &ReferenceConfig::new(0.05), &Workers::mock(5)).unwrap();
    assert_eq!(ra.snapshot.ids(), rb.snapshot.ids());
}

#[test]
fn samples_without_an_answer_are_refused() {
    let mut d = seeded_corpus(30, 1);
    d.samples[4].answer = "  ".into();
    let err =
        quality::run_stage(&d, &QualityConfig::absolute(0.0, 0.0), &Workers::mock(1)).unwrap_err();
    assert!(err.to_string().contains("s000004"), "{err}");
    assert!(reference::run_stage(&d, &ReferenceConfig::new(0.0), &Workers::mock(1)).is_err());
}

fn snapshot_of(n: usize) -> CorpusSnapshot {
    let samples = (0..n)
        .map(|i| Sample::new(format!("x{i:03}"), "q", "a"))
        .collect();
    CorpusSnapshot::new("D", samples)
}

fn scores_from(table: &[(f64, f64)]) -> Vec<QualityScores> {
    table
        .iter()
        .enumerate()
        .map(|(i, &(ra, rb))| QualityScores {
            sample_id: format!("x{i:03}"),
            r_a: ra,
            r_abar: rb,
            ablated_answer: String::new(),
        })
        .collect()
}

fn kept(d: &CorpusSnapshot, scores: &[QualityScores], cfg: &QualityConfig) -> BTreeSet<String> {
    quality::apply(d, scores, Vec::new(), cfg)
        .unwrap()
        .snapshot
        .ids()
}

proptest! {
    #[test]
    fn raising_thresholds_never_adds_samples(
        table in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..60),
        t1 in -2.0f64..2.0, dt in 0.0f64..1.0,
        m1 in -2.0f64..2.0, dm in 0.0f64..1.0,
        p1 in 1.0f64..99.0, dp in 0.0f64..50.0,
    ) {
        let d = snapshot_of(table.len());
        let scores = scores_from(&table);
        let lo = kept(&d, &scores, &QualityConfig::absolute(t1, m1));
        let hi = kept(&d, &scores, &QualityConfig::absolute(t1 + dt, m1 + dm));
        prop_assert!(hi.is_subset(&lo));
        // A larger kept percentile never keeps fewer.
        let p2 = (p1 + dp).min(99.9);
        let narrow = kept(&d, &scores, &QualityConfig::percentile(p1, m1));
        let wide = kept(&d, &scores, &QualityConfig::percentile(p2, m1));
        prop_assert!(narrow.is_subset(&wide));
    }

    #[test]
    fn percentile_keeps_at_least_the_requested_share(
        table in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..80),
        p in 1.0f64..99.0,
    ) {
        let d = snapshot_of(table.len());
        let scores = scores_from(&table);
        // With τ_ā below every margin only the reward cutoff binds.
        let k = kept(&d, &scores, &QualityConfig::percentile(p, -10.0)).len();
        let need = ((p / 100.0) * table.len() as f64 - 1e-9).ceil() as usize;
        prop_assert!(k >= need.max(1));
        let mut distinct: Vec<f64> = table.iter().map(|x| x.0).collect();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        if distinct.len() == table.len() {
            prop_assert_eq!(k, need.max(1));
        }
    }
}
