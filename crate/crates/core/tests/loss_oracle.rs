mod support;

use semppl_core::objective::LossConfig;
use support::loss_gap as compare;

#[test]
fn default_config_matches_loop_reference() {
    let config = LossConfig::default();
    for seed in 0..20 {
        let err = compare(&config, seed, 8, 6);
        assert!(err < 1e-9, "seed {seed}: {err}");
    }
}

#[test]
fn variant_configs_match_loop_reference() {
    let variants = [
        LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        },
        LossConfig {
            num_negatives: 20,
            ..LossConfig::default()
        },
        LossConfig {
            num_large: 2,
            num_small: 0,
            num_semantic_positives: 1,
            temperature: 0.5,
            ..LossConfig::default()
        },
        LossConfig {
            num_large: 1,
            num_small: 1,
            num_semantic_positives: 0,
            ..LossConfig::default()
        },
    ];
    for (v, config) in variants.iter().enumerate() {
        for seed in 0..5 {
            let err = compare(config, 100 * v as u64 + seed, 8, 5);
            assert!(err < 1e-9, "variant {v} seed {seed}: {err}");
        }
    }
}
