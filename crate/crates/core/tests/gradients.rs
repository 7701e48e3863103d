use hazebridge::harness::oracle::{loss_gradients, regularizer_identities, LossFixture};
use hazebridge::trainer::{total_loss, LossWeights};

#[test]
fn every_objective_term_matches_finite_differences() {
    let checks = loss_gradients(5, 21).unwrap();
    assert_eq!(checks.len(), 8);
    for c in &checks {
        assert!(c.passed, "{c}");
    }
}

#[test]
fn total_is_the_weighted_sum_of_its_parts() {
    let fx = LossFixture::new(4).unwrap();
    let c = fx.components(&fx.fake).unwrap();
    let w = LossWeights {
        lambda_sb: 0.3,
        lambda_p: 2.0,
        lambda_nce: 0.0,
        lambda_phy: 1.5,
        lambda_hfd: 0.25,
    };
    let total = total_loss(&c, &w).unwrap().item().unwrap();
    let v = |t: &hazebridge_tensor::Tensor| t.item().unwrap();
    let want = v(&c.adv) + 0.3 * v(&c.sb) + 2.0 * v(&c.prompt) + 1.5 * v(&c.phy) + 0.25 * v(&c.hfd);
    assert!((total - want).abs() < 1e-12 * want.abs().max(1.0));
}

#[test]
fn detail_losses_vanish_on_equal_inputs() {
    for c in regularizer_identities(2).unwrap() {
        assert!(c.passed, "{c}");
    }
}
