use proptest::prelude::*;
use shiftscope::baseline::{injected_recall_at, ranking_from_probs, train_mlp, MlpConfig};
use shiftscope::FeatureMatrix;

#[test]
fn loss_drops_over_first_epochs_on_separable_toy() {
    let x: Vec<Vec<f64>> = (0..300)
        .map(|i| vec![-1.0 - (i % 7) as f64 * 0.1, (i % 5) as f64 * 0.2])
        .collect();
    let y: Vec<Vec<f64>> = (0..300)
        .map(|i| vec![1.0 + (i % 7) as f64 * 0.1, (i % 5) as f64 * 0.2])
        .collect();
    let cfg = MlpConfig {
        max_iters: 10,
        ..Default::default()
    };
    let m = train_mlp(
        &FeatureMatrix::from_rows(&x).unwrap(),
        &FeatureMatrix::from_rows(&y).unwrap(),
        &cfg,
    )
    .unwrap();
    assert_eq!(m.loss_history.len(), 10);
    assert!(m.loss_history[9] < m.loss_history[0]);
}

proptest! {
    #[test]
    fn recall_nondecreasing_in_k(
        probs in prop::collection::vec(0.0f64..1.0, 5..80),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..10),
    ) {
        let r = ranking_from_probs(&probs);
        let mut inj: Vec<usize> = picks.iter().map(|i| i.index(probs.len())).collect();
        inj.sort_unstable();
        inj.dedup();
        let mut prev = 0.0;
        for k in 1..=probs.len() {
            let v = injected_recall_at(&r, &inj, k).unwrap();
            prop_assert!(v >= prev);
            prev = v;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn ranking_invariant_under_monotone_transform(probs in prop::collection::vec(0.001f64..0.999, 2..60)) {
        let order = |p: &[f64]| ranking_from_probs(p).entries.iter().map(|e| e.0).collect::<Vec<_>>();
        let sq: Vec<f64> = probs.iter().map(|p| p * p).collect();
        let rt: Vec<f64> = probs.iter().map(|p| p.sqrt()).collect();
        prop_assert_eq!(order(&probs), order(&sq));
        prop_assert_eq!(order(&probs), order(&rt));
    }
}
