use hazebridge::harness::oracle::ot_against_brute_force;
use hazebridge::ot::{brute_force_ot, entropic_objective, sinkhorn, Matrix, SinkhornOptions};
use proptest::prelude::*;

#[test]
fn sinkhorn_tracks_exhaustive_search_at_small_epsilon() {
    for c in ot_against_brute_force(&[4, 5, 6], 2, 1e-3, 7).unwrap() {
        assert!(c.passed, "{c}");
    }
}

fn points(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-0.5f64..0.5, 2), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coupling_has_requested_marginals((xs, ys) in (2usize..6).prop_flat_map(|n| (points(n), points(n)))) {
        let n = xs.len();
        let cost = Matrix::sq_euclidean(&xs, &ys);
        let u = vec![1.0 / n as f64; n];
        let g = sinkhorn(&cost, &u, &u, SinkhornOptions { epsilon: 0.1, max_iter: 200_000, tol: 1e-10 }).unwrap();
        prop_assert!(g.marginal_violation() < 1e-9);
        prop_assert!(g.matrix.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn entropic_plan_costs_at_least_the_exact_optimum((xs, ys) in (2usize..6).prop_flat_map(|n| (points(n), points(n)))) {
        let n = xs.len();
        let cost = Matrix::sq_euclidean(&xs, &ys);
        let u = vec![1.0 / n as f64; n];
        let exact = brute_force_ot(&cost, &u, &u).unwrap();
        let g = sinkhorn(&cost, &u, &u, SinkhornOptions { epsilon: 0.05, max_iter: 200_000, tol: 1e-11 }).unwrap();
        prop_assert!(g.transport_cost(&cost) >= exact.transport_cost(&cost) - 1e-8);
        // epsilon = 2 tau: the Sinkhorn plan minimises the regularised objective
        prop_assert!(entropic_objective(&g, &cost, 0.025) <= entropic_objective(&exact, &cost, 0.025) + 1e-8);
    }
}
