use conjtta::checks::{run_all, synthetic_stream};
use conjtta::datagen::rng_for;
use conjtta::losses::LossSpec;
use conjtta::meta::random_logits;
use conjtta::models::{MaskMode, Model};
use conjtta::tensor::Tensor;
use conjtta::tta::{adapt_online, grid_search, tta_objective, tta_step, Method, TTAConfig};
use conjtta::Error;

fn shannon(h: &[f64]) -> f64 {
    let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = h.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    -e.iter().map(|v| v / s).map(|p| p * p.ln()).sum::<f64>()
}

#[test]
fn invariant_suite_is_green() {
    for o in run_all() {
        assert!(o.passed, "{}: {}", o.name, o.detail);
    }
}

#[test]
fn zero_lr_and_none_leave_model_bitwise_unchanged() {
    let spec = LossSpec::<f64>::cross_entropy(3).unwrap();
    let model = Model::mlp(6, &[8], 3, 1);
    let x = synthetic_stream(1, 1, 16, 6, 3).remove(0).x;
    for cfg in [
        TTAConfig::new(Method::Entropy, 0.0, 1.0),
        TTAConfig::new(Method::None, 0.5, 1.0),
    ] {
        let after = tta_step(&model, &x, &spec, &cfg).unwrap();
        assert_eq!(after.checksum(), model.checksum());
    }
}

#[test]
fn objectives_on_scaled_logits_match_shannon_entropy() {
    let spec = LossSpec::<f64>::cross_entropy(4).unwrap();
    let h = random_logits(&mut rng_for(2, 0), 8, 4, 2.0);
    for t in [1.0, 2.5] {
        let expected: f64 = (0..8)
            .map(|r| shannon(&h.row_slice(r).iter().map(|v| v / t).collect::<Vec<_>>()))
            .sum::<f64>()
            / 8.0;
        for m in [Method::Entropy, Method::ConjugatePl, Method::SoftPl] {
            let v = tta_objective(&spec, &TTAConfig::new(m, 0.1, t), &h.map(|v| v / t)).unwrap();
            assert!((v - expected).abs() < 1e-12, "{m} at T={t}: {v} vs {expected}");
        }
    }
}

#[test]
fn squared_conjugate_objective_is_negative_half_norm() {
    let spec = LossSpec::<f64>::squared(3).unwrap();
    let h = random_logits(&mut rng_for(3, 0), 5, 3, 1.0);
    let expected = -0.5 * h.data().iter().map(|v| v * v).sum::<f64>() / 5.0;
    let v = tta_objective(&spec, &TTAConfig::new(Method::ConjugatePl, 0.1, 1.0), &h).unwrap();
    assert!((v - expected).abs() < 1e-12);
}

#[test]
fn hard_pl_without_confident_samples_is_zero() {
    let spec = LossSpec::<f64>::cross_entropy(3).unwrap();
    let h = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
    let v = tta_objective(&spec, &TTAConfig::new(Method::HardPl, 0.1, 1.0), &h).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn method_parameters_are_validated() {
    let mut cfg = TTAConfig::new(Method::HardPl, 0.1, 1.0);
    cfg.confidence_threshold = None;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = TTAConfig::new(Method::Entropy, 0.1, 1.0);
    cfg.q = Some(0.5);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(TTAConfig::new(Method::Entropy, 0.1, 0.0).validate().is_err());
}

#[test]
fn online_report_is_consistent() {
    let spec = LossSpec::<f64>::cross_entropy(3).unwrap();
    let stream = synthetic_stream(4, 6, 20, 6, 3);
    let model = Model::mlp(6, &[8], 3, 4);
    let (_, r) = adapt_online(&model, &stream, &spec, &TTAConfig::new(Method::ConjugatePl, 0.05, 1.0)).unwrap();
    assert_eq!(r.per_batch.len(), 6);
    assert!((r.recompute_mean_error() - r.mean_online_error).abs() < 1e-12);
    assert!((r.mean_online_accuracy() + r.mean_online_error - 1.0).abs() < 1e-12);
    assert_eq!(r.trajectory_csv().lines().count(), 7);
}

#[test]
fn divergence_is_reported_with_location() {
    let spec = LossSpec::<f64>::squared(3).unwrap();
    let stream = synthetic_stream(5, 20, 16, 6, 3);
    let model = Model::mlp(6, &[8], 3, 5);
    // squared conjugate loss is unbounded below, so a huge step blows up
    let cfg = TTAConfig::new(Method::ConjugatePl, 1e12, 1.0);
    match adapt_online(&model, &stream, &spec, &cfg) {
        Err(Error::Divergence { location, .. }) => assert!(location.starts_with("batch ")),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn grid_cells_cover_and_divergent_cells_score_one() {
    let spec = LossSpec::<f64>::squared(3).unwrap();
    let val = vec![synthetic_stream(6, 20, 16, 6, 3)];
    let model = Model::mlp(6, &[8], 3, 6);
    let base = TTAConfig::new(Method::ConjugatePl, 0.0, 1.0).with_mask(MaskMode::All);
    let one = grid_search(&model, &spec, &val, &[1e-3], &[1.0], &base).unwrap();
    assert_eq!(one.table.len(), 1);
    assert_eq!((one.best_lr, one.best_temperature), (1e-3, 1.0));
    let g = grid_search(&model, &spec, &val, &[1e-3, 1e12], &[1.0, 2.0], &base).unwrap();
    assert_eq!(g.table.len(), 4);
    for c in g.table.iter().filter(|c| c.lr == 1e12) {
        assert!(c.diverged && c.error == 1.0);
    }
    assert_eq!(g.best_lr, 1e-3);
}

#[test]
fn single_precision_adaptation_runs() {
    let spec = LossSpec::<f32>::cross_entropy(3).unwrap();
    let stream: Vec<_> = synthetic_stream(7, 4, 16, 6, 3)
        .into_iter()
        .map(|b| conjtta::Batch::new(b.x.cast::<f32>(), b.classes).unwrap())
        .collect();
    let model = Model::<f32>::mlp(6, &[8], 3, 7);
    let (m, r) = adapt_online(&model, &stream, &spec, &TTAConfig::new(Method::Entropy, 0.05, 1.0).with_mask(MaskMode::BnOnly)).unwrap();
    assert!(m.all_finite());
    assert!(r.mean_online_error <= 1.0);
}
