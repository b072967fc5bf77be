use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ifkit::catalog::{get_entry, Bundle};
use ifkit::data::{Dataset, Matrix};
use ifkit::estimate::{
    crossfit_detailed, crossfit_with_plan, decompose_error, fold_weights, onestep_estimate, plugin_estimate, FoldPlan,
    LearnerSet,
};
use ifkit::nuisance::{LearnerSpec, Tuning};
use ifkit::simlab::get_dgp;

fn knn(k: f64) -> LearnerSet {
    LearnerSet::uniform(LearnerSpec::Knn(Tuning::Fixed(k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn crossfit_is_the_weighted_mean_of_fold_estimates(seed in any::<u64>(), k in 2..6usize) {
        let dgp = get_dgp("ate-smooth-1d").unwrap();
        let data = dgp.sample(300, seed).unwrap();
        let entry = get_entry("mean_treated").unwrap();
        let cf = crossfit_detailed(&entry, &knn(15.0), &data, k, seed, 0.95).unwrap();
        let w = fold_weights(&cf.plan);
        let agg: f64 = cf.estimate.per_fold.iter().zip(&w).map(|(f, w)| w * f.psi_k).sum();
        prop_assert!((agg - cf.estimate.psi_hat).abs() < 1e-12);
        let mean_if: f64 = cf.estimate.if_values.iter().sum::<f64>() / 300.0;
        prop_assert!(mean_if.abs() < 1e-12);
    }

    #[test]
    fn onestep_minus_plugin_is_the_mean_correction(seed in any::<u64>()) {
        let dgp = get_dgp("ate-smooth-1d").unwrap();
        let data = dgp.sample(200, seed).unwrap();
        let entry = get_entry("ate_contrast").unwrap();
        let bundle = Bundle::new()
            .with("pi", |x| 0.35 + 0.3 * x[0])
            .with("mu1", |x| x[0] * x[0] + 0.1)
            .with("mu0", |x| 0.4 * x[0]);
        let one = onestep_estimate(&entry, &bundle, &data, 0.95).unwrap();
        let plug = plugin_estimate(&entry, &bundle, &data).unwrap();
        let corr: f64 = (0..data.n())
            .map(|i| entry.uncentered(&bundle, &data.obs(i)).unwrap() - entry.plugin_term(&bundle, &data.obs(i)).unwrap())
            .sum::<f64>() / data.n() as f64;
        prop_assert!((one.psi_hat - plug.psi_hat - corr).abs() < 1e-12);
        let narrow = onestep_estimate(&entry, &bundle, &data, 0.90).unwrap().ci.unwrap();
        let wide = one.ci.unwrap();
        prop_assert!(wide.0 <= narrow.0 && narrow.1 <= wide.1);
    }

    #[test]
    fn estimate_is_invariant_to_row_order(seed in any::<u64>()) {
        let n = 120;
        let dgp = get_dgp("ate-smooth-1d").unwrap();
        let data = dgp.sample(n, seed).unwrap();
        let entry = get_entry("mean_treated").unwrap();
        let plan = FoldPlan::new(n, 3, seed).unwrap();
        let base = crossfit_with_plan(&entry, &knn(7.0), &data, plan.clone(), 0.95).unwrap().estimate;

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let shuffled = data.subset(&perm);
        let assignment = perm.iter().map(|&i| plan.assignment()[i]).collect();
        let moved = FoldPlan::from_assignment(3, assignment).unwrap();
        let other = crossfit_with_plan(&entry, &knn(7.0), &shuffled, moved, 0.95).unwrap().estimate;
        prop_assert!((base.psi_hat - other.psi_hat).abs() < 1e-12);
        prop_assert!((base.se.unwrap() - other.se.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn ratio_influence_values_solve_the_estimating_equation() {
    let dgp = get_dgp("late-binary").unwrap();
    let data = dgp.sample(4000, 3).unwrap();
    let entry = get_entry("late_ratio").unwrap();
    let est = crossfit_detailed(&entry, &knn(25.0), &data, 5, 3, 0.95).unwrap().estimate;
    let s: f64 = est.if_values.iter().sum();
    assert!(s.abs() < 1e-9, "{s}");
    let truth = dgp.truth(&entry).unwrap();
    assert!((est.psi_hat - truth).abs() < 5.0 * est.se.unwrap());
}

#[test]
fn late_ratio_with_exact_nuisances_is_consistent() {
    let dgp = get_dgp("late-binary").unwrap();
    let entry = get_entry("late_ratio").unwrap();
    let truth = dgp.truth_bundle(&entry).unwrap();
    let data = dgp.sample(40_000, 11).unwrap();
    let est = onestep_estimate(&entry, &truth, &data, 0.95).unwrap();
    let psi = dgp.truth(&entry).unwrap();
    assert!((est.psi_hat - psi).abs() < 4.0 * est.se.unwrap(), "{} vs {psi}", est.psi_hat);
}

#[test]
fn density_onestep_has_its_closed_form() {
    let z: Vec<f64> = (0..50).map(|i| (i as f64 / 7.0).sin()).collect();
    let data = Dataset::new(Matrix::column(z.clone()));
    let entry = get_entry("expected_density").unwrap();
    let p = |t: f64| (-(t * t) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let bundle = Bundle::new().with("p", move |x| p(x[0])).with_scalar("int_p2", 0.5 / std::f64::consts::PI.sqrt());
    let est = onestep_estimate(&entry, &bundle, &data, 0.95).unwrap();
    let by_hand = 2.0 * z.iter().map(|&t| p(t)).sum::<f64>() / 50.0 - 0.5 / std::f64::consts::PI.sqrt();
    assert!((est.psi_hat - by_hand).abs() < 1e-14);
}

#[test]
fn exact_nuisances_leave_no_remainder() {
    let dgp = get_dgp("ate-smooth-1d").unwrap();
    let entry = get_entry("mean_treated").unwrap();
    let truth = dgp.truth_bundle(&entry).unwrap();
    let data = dgp.sample(500, 2).unwrap();
    let est = onestep_estimate(&entry, &truth, &data, 0.95).unwrap();
    let d = decompose_error(&entry, &est, std::slice::from_ref(&truth), &[1.0], &data, &dgp, &truth).unwrap();
    assert!(d.t1.abs() < 1e-12 && d.t2.abs() < 1e-12);
    assert!((d.error - d.s_star).abs() < 1e-12);

    let pi = truth.get("pi").unwrap().clone();
    let off = Bundle::new().with("pi", move |x| pi(x)).with("mu", |x| x[0] * x[0] + 0.3);
    let d = decompose_error(&entry, &est, &[off], &[1.0], &data, &dgp, &truth).unwrap();
    assert!(d.t2.abs() < 1e-12);
}
