use proptest::prelude::*;

use conjtta::losses::LossSpec;

fn logits(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, k)
}

proptest! {
    #[test]
    fn conjugate_loss_is_supervised_loss_at_pseudolabel(h in logits(4)) {
        for spec in [LossSpec::<f64>::cross_entropy(4).unwrap(), LossSpec::squared(4).unwrap()] {
            let y = spec.conjugate_pseudolabel(&h).unwrap();
            let a = spec.conjugate_loss(&h).unwrap();
            let b = spec.supervised_loss(&h, &y).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!(spec.fenchel_gap(&h).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn polyloss_pseudolabel_solves_stationarity(h in logits(3), eps in 0.1f64..6.0) {
        let spec = LossSpec::<f64>::polyloss(eps, 3).unwrap();
        prop_assert!(spec.fenchel_gap(&h).unwrap() <= 1e-8);
    }

    #[test]
    fn cross_entropy_pseudolabel_is_a_distribution(h in logits(5)) {
        let y = LossSpec::<f64>::cross_entropy(5).unwrap().conjugate_pseudolabel(&h).unwrap().0;
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(y.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn exponential_conjugate_loss_is_bounded(z in -30.0f64..30.0) {
        let v = LossSpec::<f64>::exponential().unwrap().conjugate_loss(&[z]).unwrap();
        prop_assert!(v > 0.0 && v <= 1.0 + 1e-15);
    }
}
