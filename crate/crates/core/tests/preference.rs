//! Preference pairs and the three-term loss calculator.

use proptest::prelude::*;

use quadpipe::fixtures::seeded_corpus;
use quadpipe::gateway::Workers;
use quadpipe::preference::{
    self, generation_loss, mpo_loss, preference_loss, quality_loss, select_pair, softplus,
    MpoConfig, MpoWeights, PreferenceInputs, QualityInput, RuleKind, RuleReward, SkipReason,
};

/// `ln(1 + e^x)` written the textbook way; only used where it cannot overflow.
fn naive_softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn inputs(pc: f64, pr: f64, rc: f64, rr: f64, beta: f64) -> PreferenceInputs {
    PreferenceInputs {
        policy_chosen: pc,
        policy_rejected: pr,
        ref_chosen: rc,
        ref_rejected: rr,
        beta,
    }
}

#[test]
fn zero_margin_costs_ln_two() {
    let p = inputs(-3.0, -5.0, -3.0, -5.0, 0.1);
    assert!((preference_loss(&p) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn preference_loss_falls_as_margin_grows() {
    let mut prev = f64::INFINITY;
    for i in 0..100 {
        let m = -10.0 + 20.0 * i as f64 / 99.0;
        let l = preference_loss(&inputs(m, 0.0, 0.0, 0.0, 0.5));
        assert!(l < prev, "not strictly decreasing at margin {m}");
        prev = l;
    }
}

#[test]
fn softplus_is_stable() {
    assert_eq!(softplus(1000.0), 1000.0);
    assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    for x in [-30.0, -1.0, 0.0, 0.5, 20.0] {
        assert!((softplus(x) - naive_softplus(x)).abs() < 1e-12);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let p = inputs(-1.0, -2.0, -1.5, -1.5, 0.1);
    let q = QualityInput::pair(&p, 0.0);
    let w = MpoWeights::default();
    assert!(mpo_loss(&p, &q, &[], &w).is_err());
    assert!(mpo_loss(&p, &q, &[-0.1, f64::NAN], &w).is_err());
    assert!(mpo_loss(
        &inputs(f64::INFINITY, -2.0, -1.5, -1.5, 0.1),
        &q,
        &[-0.1],
        &w
    )
    .is_err());
    assert!(mpo_loss(&inputs(-1.0, -2.0, -1.5, -1.5, 0.0), &q, &[-0.1], &w).is_err());
    assert!(mpo_loss(&p, &q, &[-0.1], &MpoWeights::new(0.0, 0.0, 0.0)).is_err());
    assert!(mpo_loss(&p, &q, &[-0.1], &MpoWeights::new(-1.0, 1.0, 1.0)).is_err());
}

proptest! {
    #[test]
    fn total_is_the_weighted_sum(
        pc in -50.0f64..0.0, pr in -50.0f64..0.0, rc in -50.0f64..0.0, rr in -50.0f64..0.0,
        beta in 0.01f64..2.0, shift in -1.0f64..1.0,
        tokens in prop::collection::vec(-20.0f64..0.0, 1..40),
        w in (0.0f64..2.0, 0.0f64..2.0, 0.01f64..2.0),
    ) {
        let p = inputs(pc, pr, rc, rr, beta);
        let q = QualityInput::pair(&p, shift);
        let weights = MpoWeights::new(w.0, w.1, w.2);
        let l = mpo_loss(&p, &q, &tokens, &weights).unwrap();

        let margin = (pc - rc) - (pr - rr);
        let pref = softplus(-beta * margin);
        let good = softplus(-(beta * (pc - rc) - shift));
        let bad = softplus(beta * (pr - rr) - shift);
        let gen = -tokens.iter().sum::<f64>() / tokens.len() as f64;
        prop_assert!((l.preference - pref).abs() < 1e-12);
        prop_assert!((l.quality - (good + bad)).abs() < 1e-12);
        prop_assert!((l.generation - gen).abs() < 1e-12 * gen.abs().max(1.0));
        let total = w.0 * l.preference + w.1 * l.quality + w.2 * l.generation;
        prop_assert!((l.total - total).abs() < 1e-12 * total.abs().max(1.0));
        prop_assert!(l.total.is_finite() && l.total >= 0.0);
        if beta * margin.abs() < 30.0 {
            prop_assert!((pref - naive_softplus(-beta * margin)).abs() < 1e-9);
        }
        prop_assert!((quality_loss(&q, beta) - l.quality).abs() < 1e-15);
        prop_assert!((generation_loss(&tokens) - l.generation).abs() < 1e-15);
    }

    #[test]
    fn extreme_but_finite_inputs_stay_finite(
        pc in -1e6f64..1e6, pr in -1e6f64..1e6, rc in -1e6f64..1e6, rr in -1e6f64..1e6,
        beta in 1e-3f64..1e3,
    ) {
        let p = inputs(pc, pr, rc, rr, beta);
        let l = mpo_loss(&p, &QualityInput::pair(&p, 0.0), &[-1.0], &MpoWeights::default()).unwrap();
        prop_assert!(l.total.is_finite());
        prop_assert!(l.preference >= 0.0 && l.quality >= 0.0);
    }

    #[test]
    fn pair_selection_matches_oracle(cands in prop::collection::vec((any::<bool>(), 0u8..6), 1..12)) {
        let correct: Vec<bool> = cands.iter().map(|c| c.0).collect();
        let scores: Vec<f64> = cands.iter().map(|c| f64::from(c.1) / 5.0).collect();
        let pick = |want: bool| {
            let idx: Vec<usize> = (0..cands.len()).filter(|&i| correct[i] == want).collect();
            let best = idx.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
            idx.into_iter().find(|&i| scores[i] == best)
        };
        match (pick(true), pick(false)) {
            (Some(c), Some(r)) => prop_assert_eq!(select_pair(&correct, &scores), Ok((c, r))),
            (Some(_), None) => prop_assert_eq!(select_pair(&correct, &scores), Err(SkipReason::UniformlyCorrect)),
            _ => prop_assert_eq!(select_pair(&correct, &scores), Err(SkipReason::UniformlyIncorrect)),
        }
    }
}

#[test]
fn rules_label_candidates() {
    let letter = RuleReward::new(RuleKind::ChoiceLetter, "(C) the shelf").unwrap();
    assert!(letter.is_correct("Answer: C"));
    assert!(letter.is_correct("(C) something"));
    assert!(letter.is_correct("the answer is (c)"));
    // A lowercase leading article is not an option letter.
    let a = RuleReward::new(RuleKind::ChoiceLetter, "A").unwrap();
    assert!(!a.is_correct("a cat on the shelf"));
    assert!(!letter.is_correct("(D) candidate"));
    assert!(!letter.is_correct("no letter here"));
    assert!(RuleReward::new(RuleKind::ChoiceLetter, "seven").is_err());

    let num = RuleReward::new(
        RuleKind::NumericTolerance { epsilon: 0.5 },
        "about 1,200 items",
    )
    .unwrap();
    assert!(num.is_correct("1200.4"));
    assert!(!num.is_correct("1201"));

    let re = RuleReward::new(
        RuleKind::Regex {
            pattern: r"price:\s*(\S+)".into(),
        },
        "$3.99",
    )
    .unwrap();
    assert!(re.is_correct("the price: $3.99"));
    assert!(!re.is_correct("the price: $4.99"));
    assert!(RuleReward::new(
        RuleKind::Regex {
            pattern: "(".into()
        },
        "x"
    )
    .is_err());
}

#[test]
fn pairs_from_mock_workers() {
    let d = seeded_corpus(300, 17);
    let config = MpoConfig::new(RuleKind::ChoiceLetter);
    let out = preference::run(&d, &config, &Workers::mock(17)).unwrap();
    assert!(!out.pairs.is_empty());
    assert_eq!(
        out.pairs.len() + out.skipped.len() + out.quarantined.len(),
        d.len()
    );
    for p in &out.pairs {
        let target = &d.get(&p.sample_id).unwrap().answer;
        let rule = RuleReward::new(RuleKind::ChoiceLetter, target).unwrap();
        assert!(rule.is_correct(&p.chosen.text));
        assert!(!rule.is_correct(&p.rejected.text));
        assert_ne!(p.chosen.variant, p.rejected.variant);
    }
    let again = preference::run(&d, &config, &Workers::mock(17)).unwrap();
    assert_eq!(out.to_jsonl(), again.to_jsonl());

    let mut bad = config.clone();
    bad.count = 1;
    assert!(preference::run(&d, &bad, &Workers::mock(17)).is_err());
}

#[test]
fn unusable_targets_are_skipped() {
    let mut d = seeded_corpus(10, 1);
    d.samples[2].answer = "no option given".into();
    let out = preference::run(
        &d,
        &MpoConfig::new(RuleKind::ChoiceLetter),
        &Workers::mock(1),
    )
    .unwrap();
    assert!(out
        .skipped
        .contains(&("s000002".to_string(), SkipReason::UnusableTarget)));
}
