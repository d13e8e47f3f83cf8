mod common;

use std::collections::BTreeMap;

use ilitrack::classify::{hard_query_fraction, soft_query_fraction};
use ilitrack::corpus::{self, bucket_weeks, ili_date_range, ingest, read_ili};
use ilitrack::nowcast::{ili_series, nowcast, Nowcast};
use ilitrack::query::{count_matches, query_fraction, query_fraction_series, Query};
use ilitrack::regress::WeekRange;
use ilitrack::simulate::{
    build_spurious_pool, fit_method_models, inject, mse_vs_baseline, run_simulation,
    InjectionSchedule, Method, PoolRules,
};
use ilitrack::synth::{MessageKind, SynthConfig};

fn small(seed: u64) -> SynthConfig {
    let curve = vec![
        0.015, 0.02, 0.03, 0.045, 0.05, 0.04, 0.03, 0.025, 0.02, 0.018, 0.016, 0.015,
    ];
    SynthConfig {
        weeks: curve.len() as u32,
        messages_per_week: 2_000,
        ili_curve: curve,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn generator_counts_agree_with_recount() {
    let config = small(1);
    let c = common::build(&config);
    let kinds = c.truth.provenance_by_id();
    let gate = Query::gate();
    for (bucket, week) in c.buckets.iter().zip(&c.truth.weeks) {
        let mut by_kind: BTreeMap<MessageKind, usize> = BTreeMap::new();
        for m in &bucket.messages {
            *by_kind
                .entry(kinds[m.message.id.as_str()].kind)
                .or_default() += 1;
            let expect_match = kinds[m.message.id.as_str()].kind != MessageKind::Background;
            assert_eq!(gate.matches(m), expect_match, "{}", m.message.text);
        }
        assert_eq!(bucket.len(), config.messages_per_week);
        assert_eq!(count_matches(&gate, bucket), week.matches);
        assert_eq!(
            by_kind.get(&MessageKind::Positive).copied().unwrap_or(0),
            week.positives
        );
        assert_eq!(
            by_kind.get(&MessageKind::Spurious).copied().unwrap_or(0),
            week.spurious
        );
        assert_eq!(
            query_fraction(&gate, bucket).unwrap(),
            week.matches as f64 / week.total as f64
        );
    }
}

#[test]
fn files_round_trip_to_identical_buckets() {
    let config = small(2);
    let c = common::build(&config);
    let dir = tempfile::tempdir().unwrap();
    let msg_path = dir.path().join("messages.jsonl");
    let ili_path = dir.path().join("ili.csv");
    corpus::write_messages(std::fs::File::create(&msg_path).unwrap(), &c.messages).unwrap();
    corpus::write_ili(std::fs::File::create(&ili_path).unwrap(), &c.ili).unwrap();

    let ili = read_ili(&ili_path).unwrap();
    assert_eq!(ili.len(), c.ili.len());
    for (a, b) in ili.iter().zip(&c.ili) {
        assert_eq!(a.week_ending, b.week_ending);
        assert!((a.ili_pct - b.ili_pct).abs() <= 1e-12 * b.ili_pct);
    }
    let messages = ingest(&msg_path, ili_date_range(&ili).unwrap()).unwrap();
    assert_eq!(messages, c.messages);
    let buckets = bucket_weeks(&messages, ili[0].week_ending, ili.len() as u32).unwrap();
    assert_eq!(buckets, c.buckets);
}

#[test]
fn query_matching_nothing_is_degenerate() {
    let c = common::build(&small(3));
    let q = Query::parse("zyzzyva").unwrap();
    let series = query_fraction_series(&q, &c.buckets).unwrap();
    assert!(series.match_counts().iter().all(|&m| m == 0));
    let result = nowcast(
        &series,
        &c.ili,
        WeekRange::new(1, 6).unwrap(),
        WeekRange::new(7, 12).unwrap(),
    )
    .unwrap();
    assert!(matches!(result, Nowcast::Degenerate { .. }));
}

#[test]
fn short_split_still_recovers_coefficients() {
    let config = small(4);
    let c = common::build(&config);
    let series = query_fraction_series(&Query::gate(), &c.buckets).unwrap();
    let Nowcast::Fitted { model, evaluation } = nowcast(
        &series,
        &c.ili,
        WeekRange::new(1, 6).unwrap(),
        WeekRange::new(7, 12).unwrap(),
    )
    .unwrap() else {
        panic!("degenerate");
    };
    assert!((model.beta1 - config.true_beta1).abs() < 1e-9);
    assert!((model.beta2 - config.true_beta2).abs() < 1e-9);
    assert!(evaluation.eval.mse < 1e-12);
    assert_eq!(evaluation.rows.len(), 12);
}

#[test]
fn classified_fractions_match_direct_sums() {
    let config = small(5);
    let c = common::build(&config);
    let clf = common::trained_classifier(&config);
    let gate = Query::gate();
    for bucket in &c.buckets {
        let mut soft = 0.0;
        let mut hard = 0usize;
        let mut plain = 0usize;
        for m in &bucket.messages {
            if gate.matches(m) {
                let p = clf.predict_proba(m);
                soft += p;
                hard += usize::from(p > 0.5);
                plain += 1;
            }
        }
        let n = bucket.len() as f64;
        let s = soft_query_fraction(&gate, bucket, &clf).unwrap();
        let h = hard_query_fraction(&gate, bucket, &clf).unwrap();
        assert!((s - soft / n).abs() < 1e-12);
        assert_eq!(h, hard as f64 / n);
        assert!(s <= plain as f64 / n + 1e-12);
        assert!(h <= plain as f64 / n);
    }
}

#[test]
fn classifier_separates_spurious_from_positive() {
    let config = small(6);
    let c = common::build(&config);
    let clf = common::trained_classifier(&config);
    let kinds = c.truth.provenance_by_id();
    let (mut pos_ok, mut pos, mut spur_ok, mut spur) = (0, 0, 0, 0);
    for m in c.buckets.iter().flat_map(|b| &b.messages) {
        match kinds[m.message.id.as_str()].kind {
            MessageKind::Positive => {
                pos += 1;
                pos_ok += usize::from(clf.predict_proba(m) > 0.5);
            }
            MessageKind::Spurious => {
                spur += 1;
                spur_ok += usize::from(clf.predict_proba(m) <= 0.5);
            }
            _ => {}
        }
    }
    assert!(pos_ok as f64 >= 0.95 * pos as f64, "{pos_ok}/{pos}");
    assert!(spur_ok as f64 >= 0.95 * spur as f64, "{spur_ok}/{spur}");
}

#[test]
fn injection_leaves_other_weeks_untouched() {
    let c = common::build(&small(7));
    let pool = build_spurious_pool(&c.messages, &PoolRules::default()).unwrap();
    let gate = Query::gate();
    let injected = inject(&c.buckets, &pool, &InjectionSchedule::new(&[(5, 3_000)]), 9).unwrap();
    for (before, after) in c.buckets.iter().zip(&injected) {
        if before.week_index == 5 {
            assert_eq!(after.len(), before.len() + 3_000);
            assert_eq!(
                count_matches(&gate, after),
                count_matches(&gate, before) + 3_000
            );
        } else {
            assert_eq!(before, after);
        }
    }
}

#[test]
fn damage_grows_with_injection_volume() {
    let config = small(8);
    let c = common::build(&config);
    let clf = common::trained_classifier(&config);
    let gate = Query::gate();
    let pool = build_spurious_pool(&c.messages, &PoolRules::default()).unwrap();
    let models = fit_method_models(
        &c.buckets,
        &gate,
        &clf,
        &ili_series(&c.ili),
        WeekRange::new(1, 8).unwrap(),
        &Method::ALL,
    )
    .unwrap();
    let counts = [0usize, 100, 1_000, 10_000];
    let schedule = InjectionSchedule::new(
        &counts
            .iter()
            .enumerate()
            .map(|(i, &n)| (9 + i as u32, n))
            .collect::<Vec<_>>(),
    );
    let report = run_simulation(&c.buckets, &gate, &pool, &schedule, &models, &clf, 1).unwrap();

    let keywords = report.run(Method::Keywords).unwrap();
    let shifts: Vec<f64> = keywords
        .rows
        .iter()
        .map(|r| r.estimate - r.baseline)
        .collect();
    assert_eq!(shifts[0], 0.0);
    assert!(shifts.windows(2).all(|w| w[1] > w[0]), "{shifts:?}");
    for run in &report.runs {
        assert_eq!(run.rows[0].abs_error(), 0.0);
    }

    let zero = InjectionSchedule::new(&[(9, 0), (10, 0)]);
    let quiet = run_simulation(&c.buckets, &gate, &pool, &zero, &models, &clf, 1).unwrap();
    assert!(mse_vs_baseline(&quiet).values().all(|&v| v == 0.0));
}
