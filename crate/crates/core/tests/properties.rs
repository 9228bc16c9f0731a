use proptest::prelude::*;

use klnorm::autograd::{ElementwiseOp, Tape};
use klnorm::data::{make_synthetic, subsample, SyntheticKind, SyntheticSpec};
use klnorm::experiment::{aggregate_seeds, mean_std, run_on_dataset, TrainConfig};
use klnorm::model::{Model, ModelSpec};
use klnorm::norm::{kl_diag_gauss, kl_to_standard_normal, KlNorm, NormKind};
use klnorm::optim::BetaSchedule;
use klnorm::rng::{SeedRng, Stream};
use klnorm::tensor::{broadcast_shape, broadcast_to, Tensor};

fn gaussian() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|k| {
        (
            prop::collection::vec(-5.0..5.0f64, k),
            prop::collection::vec(0.05..20.0f64, k),
            prop::collection::vec(-5.0..5.0f64, k),
            prop::collection::vec(0.05..20.0f64, k),
        )
    })
}

fn matrix(m: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0..10.0f64, m * d).prop_map(move |v| Tensor::new(vec![m, d], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative_and_zero_on_identity((mu0, var0, mu1, var1) in gaussian()) {
        prop_assert!(kl_diag_gauss(&mu0, &var0, &mu1, &var1).unwrap() >= 0.0);
        prop_assert_eq!(kl_diag_gauss(&mu0, &var0, &mu0, &var0).unwrap(), 0.0);
    }

    #[test]
    fn kl_term_value_is_mean_of_per_example(mu in matrix(4, 3), lv in matrix(4, 3)) {
        let mut tape = Tape::new();
        let (m, l) = (tape.constant(mu), tape.constant(lv.map(|v| v.clamp(-10.0, 10.0))));
        let term = kl_to_standard_normal(&mut tape, m, l).unwrap().to_term(&tape);
        let mean = term.per_example.data().iter().sum::<f64>() / 4.0;
        prop_assert!(term.value >= 0.0);
        prop_assert!((term.value - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
    }

    #[test]
    fn broadcasting_equals_pre_expanded(a in matrix(3, 4), b in prop::collection::vec(-3.0..3.0f64, 4), op in 0usize..4) {
        let b = Tensor::vector(b.into_iter().map(|v| if v.abs() < 0.1 { 0.5 } else { v }).collect());
        let kind = [ElementwiseOp::Add, ElementwiseOp::Sub, ElementwiseOp::Mul, ElementwiseOp::Div][op];
        let shape = broadcast_shape(a.shape(), b.shape()).unwrap();
        let expanded = broadcast_to(&b, &shape).unwrap();
        let mut tape = Tape::new();
        let (va, vb, ve) = (tape.constant(a.clone()), tape.constant(b), tape.constant(expanded));
        let x = tape.elementwise(kind, va, Some(vb)).unwrap();
        let y = tape.elementwise(kind, va, Some(ve)).unwrap();
        prop_assert!(tape.value(x).bit_eq(tape.value(y)));
    }

    #[test]
    fn tape_replay_is_deterministic(x in matrix(5, 3), seed in 0u64..1000) {
        let spec = ModelSpec::new(3, 4, NormKind::KlNorm, 2);
        let grads = || {
            let mut model = Model::build(&spec, seed).unwrap();
            let mut tape = Tape::new();
            let fwd = model.forward_train(&mut tape, &x, None).unwrap();
            let ce = tape.cross_entropy(fwd.logits, &[0, 1, 0, 1, 1]).unwrap();
            let kl = tape.scale(fwd.kl.unwrap().value, 0.3).unwrap();
            let loss = tape.add(ce, kl).unwrap();
            tape.backward(loss).unwrap();
            fwd.params.iter().map(|&p| tape.grad(p).unwrap().clone()).collect::<Vec<_>>()
        };
        let (a, b) = (grads(), grads());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn beta_schedule_is_monotone_and_capped(beta0 in 1e-4..5.0f64, epoch in 1usize..200) {
        let s = BetaSchedule::new(beta0).unwrap();
        prop_assert!(s.beta_at(epoch) <= s.beta_at(epoch + 1));
        prop_assert!(s.beta_at(epoch) <= 1.0);
    }

    #[test]
    fn moving_variance_stays_non_negative(batches in prop::collection::vec(matrix(3, 2), 1..10), alpha in 0.01..1.0f64) {
        let mut layer = KlNorm::pinned(2, alpha, 1e-5).unwrap();
        for b in &batches {
            layer.forward_train(b).unwrap();
        }
        prop_assert!(layer.stats.var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn aggregation_is_permutation_invariant(values in prop::collection::vec(0.0..1.0f64, 2..9), seed in any::<u64>()) {
        let mut shuffled = values.clone();
        SeedRng::new(seed, Stream::Check).shuffle(&mut shuffled);
        let (a, b) = (mean_std(&values), mean_std(&shuffled));
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    #[test]
    fn subsample_preserves_class_ratios(classes in 2usize..5, n_total in 60usize..300, frac in 0.05..1.0f64, seed in any::<u64>()) {
        let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::GaussMix, n_total, 2, classes, 1)).unwrap();
        let total = ds.train.len();
        let n = ((total as f64 * frac) as usize).max(1);
        let s = subsample(&ds, n, seed).unwrap();
        prop_assert_eq!(s.train.len(), n);
        let before = ds.class_counts(&ds.train);
        for (c, &k) in s.class_counts(&s.train).iter().enumerate() {
            let exact = before[c] as f64 * n as f64 / total as f64;
            prop_assert!((k as f64 - exact).abs() < 1.0);
        }
    }
}

#[test]
fn subsample_seeds_give_different_sets() {
    let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::GaussMix, 1000, 2, 2, 3)).unwrap();
    let n = 200;
    for seed in 0..20u64 {
        let a = subsample(&ds, n, seed).unwrap().train;
        let b = subsample(&ds, n, seed + 1000).unwrap().train;
        let overlap = a.iter().filter(|i| b.binary_search(i).is_ok()).count();
        assert!(overlap < n, "seed {seed}");
    }
}

#[test]
fn aggregation_order_does_not_change_the_summary() {
    let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::GaussMix, 90, 3, 2, 2)).unwrap();
    let cfg = TrainConfig {
        bottleneck: 3,
        epochs: 2,
        ..TrainConfig::default()
    };
    let mut results: Vec<_> = [1, 2, 3].iter().map(|&s| run_on_dataset(&cfg, &ds, s).unwrap().result).collect();
    let a = aggregate_seeds(&results).unwrap();
    results.reverse();
    let b = aggregate_seeds(&results).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gauss_mix_is_separable_with_batch_norm() {
    let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::GaussMix, 1000, 16, 2, 0)).unwrap();
    let cfg = TrainConfig {
        norm: NormKind::Batch,
        bottleneck: 8,
        epochs: 5,
        ..TrainConfig::default()
    };
    let r = run_on_dataset(&cfg, &ds, 13).unwrap().result;
    assert!(r.test.unwrap().accuracy > 0.95, "{:?}", r.test);
}
