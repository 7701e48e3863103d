use hazebridge::bridge::{
    bridge_posterior, markov_step_params, roll_chain, sub_bridge_posterior, BridgeSchedule,
};
use hazebridge::harness::oracle::{bridge_marginals, self_similarity};
use hazebridge::rng::SampleStreams;
use hazebridge_tensor::Tensor;
use proptest::prelude::*;

#[test]
fn chain_marginals_match_closed_form() {
    let checks = bridge_marginals(1_000_000, 5, 0.5, 11).unwrap();
    assert_eq!(checks.len(), 10);
    for c in &checks {
        assert!(c.passed, "{c}");
    }
}

#[test]
fn two_stage_sampling_matches_direct() {
    for (t_a, t) in [(0.2, 0.6), (0.5, 0.9), (0.1, 0.3)] {
        for c in self_similarity(100_000, t_a, t, 0.5, 3).unwrap() {
            assert!(c.passed, "t_a={t_a} t={t}: {c}");
        }
    }
}

#[test]
fn zero_tau_chain_is_deterministic_interpolation() {
    let s = BridgeSchedule::new(4, 0.0).unwrap();
    let x0 = Tensor::new(vec![0.0, 4.0], &[2, 1]).unwrap();
    let target = Tensor::new(vec![8.0, -4.0], &[2, 1]).unwrap();
    let mut noise = SampleStreams::new(0, 0, 0);
    let x = roll_chain(&x0, |_, _| Ok(target.clone()), 2, &s, &mut noise).unwrap();
    for (got, want) in x.data().iter().zip([4.0, 0.0]) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![v], &[1]).unwrap()
}

proptest! {
    #[test]
    fn posterior_variance_is_symmetric_and_bounded(t in 0.0f64..=1.0, tau in 0.0f64..4.0, a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let p = bridge_posterior(&scalar(a), &scalar(b), t, tau).unwrap();
        let q = bridge_posterior(&scalar(b), &scalar(a), 1.0 - t, tau).unwrap();
        prop_assert!((p.variance - q.variance).abs() <= 1e-12);
        prop_assert!(p.variance <= tau / 4.0 + 1e-15);
        prop_assert!((p.mean.data()[0] - q.mean.data()[0]).abs() <= 1e-12);
    }

    #[test]
    fn full_interval_sub_bridge_is_the_bridge(t in 0.0f64..=1.0, tau in 0.0f64..2.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let p = bridge_posterior(&scalar(a), &scalar(b), t, tau).unwrap();
        let q = sub_bridge_posterior(&scalar(a), &scalar(b), t, 0.0, 1.0, tau).unwrap();
        prop_assert!((p.variance - q.variance).abs() <= 1e-12);
        prop_assert!((p.mean.data()[0] - q.mean.data()[0]).abs() <= 1e-12);
    }

    #[test]
    fn markov_step_from_start_is_the_bridge_posterior(t in 0.01f64..=0.99, tau in 0.0f64..2.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let step = markov_step_params(&scalar(a), &scalar(b), 0.0, t, tau).unwrap();
        let p = bridge_posterior(&scalar(a), &scalar(b), t, tau).unwrap();
        prop_assert!((step.variance - p.variance).abs() <= 1e-12);
        prop_assert!((step.mean.data()[0] - p.mean.data()[0]).abs() <= 1e-12);
    }
}
