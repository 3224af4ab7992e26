use proptest::prelude::*;
use semppl_harness::checkpoint;
use semppl_harness::config::BASE_PRESET;
use semppl_harness::experiments::run_oracle;
use semppl_harness::metrics::{render_csv, report_from_counts, THRESHOLDS};
use semppl_harness::{TrainConfig, Trainer64};

fn tiny(extra: &[(&str, &str)]) -> TrainConfig {
    let mut overrides: Vec<(String, String)> = [
        ("dataset.samples_per_class", "16"),
        ("train.batch_size", "40"),
        ("train.epochs", "3"),
        ("train.test_samples_per_class", "4"),
        ("train.label_fraction", "0.25"),
        ("lars.warmup_epochs", "1"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    TrainConfig::load(BASE_PRESET, &overrides).unwrap()
}

fn trained(config: TrainConfig) -> Trainer64 {
    let mut t = Trainer64::new(config).unwrap();
    t.run().unwrap();
    t
}

#[test]
fn same_seed_same_metrics_bytes() {
    let a = render_csv(trained(tiny(&[])).metrics());
    let b = render_csv(trained(tiny(&[])).metrics());
    assert_eq!(a, b);
    let c = render_csv(trained(tiny(&[("train.seed", "9")])).metrics());
    assert_ne!(a, c);
}

#[test]
fn resume_matches_uninterrupted() {
    let full = trained(tiny(&[]));

    let mut first = Trainer64::new(tiny(&[])).unwrap();
    first.run_epoch().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.sppl");
    checkpoint::save(&first, &path).unwrap();
    drop(first);

    let mut resumed = checkpoint::load::<f64>(&path).unwrap();
    resumed.run().unwrap();
    assert_eq!(render_csv(resumed.metrics()), render_csv(full.metrics()));
    assert_eq!(checkpoint::encode(&resumed), checkpoint::encode(&full));
}

#[test]
fn extending_epochs_after_load() {
    let mut short = Trainer64::new(tiny(&[("train.epochs", "2")])).unwrap();
    short.run().unwrap();
    let mut extended = checkpoint::decode::<f64>(&checkpoint::encode(&short)).unwrap();
    extended.set_total_epochs(3).unwrap();
    extended.run().unwrap();
    assert_eq!(extended.metrics().len(), 3);
}

#[test]
fn zero_epochs_is_initialization() {
    let config = tiny(&[("train.epochs", "0"), ("lars.warmup_epochs", "0")]);
    let fresh = Trainer64::new(config.clone()).unwrap();
    let done = trained(config);
    assert!(done.metrics().is_empty());
    assert_eq!(checkpoint::encode(&done), checkpoint::encode(&fresh));
}

#[test]
fn queue_growth_counts_labeled_views_only() {
    let t = trained(tiny(&[]));
    for d in t.diagnostics() {
        assert!(d.labeled_seen > 0);
        assert_eq!(d.enqueued, 4 * d.labeled_seen, "epoch {}", d.epoch);
    }
}

#[test]
fn reported_rates_are_well_formed() {
    let t = trained(tiny(&[]));
    for row in t.metrics() {
        for v in row.precision.iter().chain(&row.recall) {
            assert!((0.0..=1.0).contains(v));
        }
        assert!(row.recall.windows(2).all(|w| w[1] <= w[0]));
        assert!((row.recall[0] - row.pl_accuracy).abs() < 1e-12);
    }
}

#[test]
fn single_view_voting_casts_one_vote() {
    let t = trained(tiny(&[("train.voting_enabled", "false")]));
    for row in t.metrics() {
        assert!((row.recall[1] - row.pl_accuracy).abs() < 1e-12);
        assert!(row.recall[2..].iter().all(|&r| r == 0.0));
    }
}

#[test]
fn oracle_pairs_share_views_and_labels_are_exact() {
    let report = run_oracle(&tiny(&[("train.epochs", "2")])).unwrap();
    assert!(report.views_match);
    assert_eq!(report.oracle.semantic_label_accuracy, 1.0);
    assert!(report.semppl.semantic_label_accuracy < 1.0);
}

proptest! {
    #[test]
    fn recall_never_grows_with_threshold(pairs in prop::collection::vec((0usize..=16, any::<bool>()), 0..64)) {
        let r = report_from_counts(pairs.iter().copied());
        for t in 1..THRESHOLDS {
            prop_assert!(r.recall[t] <= r.recall[t - 1]);
        }
        for t in 0..THRESHOLDS {
            prop_assert!((0.0..=1.0).contains(&r.precision[t]));
            prop_assert_eq!(r.empty[t], !pairs.iter().any(|&(c, _)| c >= t));
        }
        prop_assert!((r.recall[0] - r.accuracy()).abs() < 1e-12);
    }
}

#[test]
fn untrained_encoder_probe_is_in_sanity_band() {
    let config = TrainConfig::load(
        BASE_PRESET,
        &[
            ("dataset.modes_per_class".into(), "32".into()),
            ("dataset.within_class_noise".into(), "0.5".into()),
        ],
    )
    .unwrap();
    let t = Trainer64::new(config).unwrap();
    let acc = t.probe(semppl_harness::probe::ProbeMode::Linear).unwrap();
    assert!((0.05..=0.60).contains(&acc), "{acc}");
}
