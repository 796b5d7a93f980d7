//! End-to-end flows across dataset, network, trainer, classifier and metrics.

use ltlab::classifier::{ClassPriors, LaConfig};
use ltlab::dataset::{assign_groups, synth_gaussian_lt, GaussianSpec, GroupThresholds, LongTailProfile};
use ltlab::losses::head_norms;
use ltlab::metrics::{forgetting_scores, FeatureStats};
use ltlab::network::{Mode, NetSpec, Network};
use ltlab::rng::keys;
use ltlab::theory::amhm_ratio;
use ltlab::trainer::{run_preset, MethodPreset, PresetParams, SgdConfig, PRESET_NAMES};
use ltlab::RngStream;

fn setup(seed: u64) -> (ltlab::dataset::Splits, ltlab::dataset::GroupAssignment, RngStream) {
    let root = RngStream::new(seed);
    let profile = LongTailProfile::new(4, 60, 10.0).unwrap();
    let mut spec = GaussianSpec::new(6, 3.0, 1.0);
    spec.val_per_class = 8;
    spec.test_per_class = 12;
    let splits = synth_gaussian_lt(&profile, &spec, &mut root.substream(keys::DATA)).unwrap();
    let groups = assign_groups(&splits.train.class_counts, GroupThresholds::tertiles(&splits.train.class_counts)).unwrap();
    (splits, groups, root)
}

#[test]
fn every_method_and_adjustment_runs() {
    let (splits, groups, root) = setup(1);
    let net_spec = NetSpec::mlp(6, 8, 2, 4);
    let params = PresetParams { fixed_gamma_grid: vec![0.1, 0.2], ..PresetParams::default() };
    for base in PRESET_NAMES {
        for suffix in ["", "+add", "+mult"] {
            let name = format!("{base}{suffix}");
            let preset = MethodPreset::named(&name, &params, 4).unwrap();
            let sgd = vec![SgdConfig::new(0.05, 16, 2); preset.stages.len()];
            let out = run_preset(&preset, &net_spec, &splits, &sgd, &groups, &root).unwrap();
            assert_eq!(out.logs.len(), preset.stages.len(), "{name}");
            assert!(out.report.accuracy.average.is_finite(), "{name}");
            assert_eq!(out.la_search.is_some(), !suffix.is_empty(), "{name}");
            if base == "wd-fixed-bn" {
                let trials = out.gamma_search.as_ref().unwrap();
                assert_eq!(trials.iter().map(|t| t.gamma).collect::<Vec<_>>(), vec![0.1, 0.2]);
            }
            if name == "wb" {
                // multiplicative adjustment rescales columns after training, so only the bare preset is capped
                assert!(head_norms(&out.net).iter().all(|&n| n <= 1.0 + 1e-12), "{name}");
            }
        }
    }
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let (splits, groups, root) = setup(2);
    let preset = MethodPreset::named("wd+add", &PresetParams::default(), 4).unwrap();
    let out = run_preset(&preset, &NetSpec::res(6, 8, 1, 4), &splits, &[SgdConfig::new(0.05, 16, 3)], &groups, &root).unwrap();
    assert!(matches!(out.la, LaConfig::Additive { .. }));
    let dir = tempfile::tempdir().unwrap();
    out.net.save_checkpoint(dir.path(), "m").unwrap();
    let back = Network::load_checkpoint(dir.path(), "m").unwrap();
    let a = out.net.forward_pass(&splits.test.x, Mode::Eval).unwrap();
    let b = back.forward_pass(&splits.test.x, Mode::Eval).unwrap();
    assert_eq!(a.logits, b.logits, "logit offset and parameters survive the round trip");
    let again = ltlab::trainer::evaluate(&back, &splits.test, &groups, Some(&splits.train)).unwrap();
    assert_eq!(again, out.report);
}

#[test]
fn reruns_are_bit_identical_and_seeds_matter() {
    let preset = MethodPreset::named("wb+mult", &PresetParams::default(), 4).unwrap();
    let sgd = [SgdConfig::new(0.05, 16, 2), SgdConfig::new(0.05, 16, 2)];
    let run = |seed| {
        let (splits, groups, root) = setup(seed);
        run_preset(&preset, &NetSpec::mlp(6, 8, 2, 4), &splits, &sgd, &groups, &root).unwrap()
    };
    let (a, b, c) = (run(3), run(3), run(4));
    assert_eq!(a.net, b.net);
    assert_eq!(a.report, b.report);
    assert_ne!(a.net, c.net);
}

#[test]
fn training_history_feeds_forgetting_scores() {
    let (splits, groups, root) = setup(5);
    let preset = MethodPreset::named("ce", &PresetParams::default(), 4).unwrap();
    let out = run_preset(&preset, &NetSpec::mlp(6, 8, 2, 4), &splits, &[SgdConfig::new(0.1, 16, 4)], &groups, &root).unwrap();
    let history = out.logs[0].history();
    assert_eq!(history.len(), 4);
    let f = forgetting_scores(&history, &splits.train.y, 4).unwrap();
    assert_eq!(f.per_sample.len(), splits.train.len());
    assert!(f.per_class_mean.iter().all(|m| m.is_some_and(|v| (0.0..=3.0).contains(&v))));
}

#[test]
fn feature_statistics_of_trained_network() {
    let (splits, groups, root) = setup(6);
    let preset = MethodPreset::named("wd", &PresetParams::default(), 4).unwrap();
    let out = run_preset(&preset, &NetSpec::mlp(6, 8, 2, 4), &splits, &[SgdConfig::new(0.05, 16, 3)], &groups, &root).unwrap();
    let feats = out.net.features(&splits.train.x).unwrap();
    let stats = FeatureStats::compute(&feats, &splits.train.y, 4).unwrap();
    assert_eq!(stats.counts, splits.train.class_counts);
    assert!(stats.mean_norms.iter().all(|n| n.is_finite() && *n >= 0.0));
}

#[test]
fn priors_and_harmonic_ratio_agree_on_generated_profile() {
    // unrounded sizes would match the closed form exactly; rounding moves it slightly
    let profile = LongTailProfile::new(10, 5000, 100.0).unwrap();
    let counts = profile.class_sizes();
    let total: usize = counts.iter().sum();
    let ratio = ltlab::dataset::harmonic_mean(&counts) / total as f64;
    assert!(((ratio - amhm_ratio(100.0, 10)) / ratio).abs() < 5e-3);
    let priors = ClassPriors::from_counts(&counts).unwrap();
    assert_eq!(priors.len(), 10);
}
