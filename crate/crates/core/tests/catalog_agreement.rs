//! The hand-coded catalog influence functions, truths and nuisances agree
//! with the symbolic engine and with brute-force sums.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use ifkit::catalog::{get_entry, list_entries, Bundle, CatalogEntry, IfValue};
use ifkit::dist::{DiscreteDist, Schema};
use ifkit::dsl::{derive_if, evaluate_functional, evaluate_if, parse_functional};
use ifkit::population::{DiscretePopulation, Population};

fn schema(entry: &CatalogEntry, rng: &mut ChaCha8Rng) -> Arc<Schema> {
    let mut lv = || rng.random_range(2..=3);
    let vars: Vec<(&str, usize)> = match entry.id.as_str() {
        "expected_density" => vec![("z", lv())],
        "late_num" | "late_den" | "late_ratio" => vec![("x", lv()), ("r", 2), ("a", 2), ("y", lv())],
        "gformula_2t" => vec![("x1", lv()), ("a1", 2), ("x2", lv()), ("a2", 2), ("y", 2)],
        _ => vec![("x", lv()), ("a", 2), ("y", lv())],
    };
    Arc::new(Schema::new(vars).unwrap())
}

#[test]
fn catalog_influence_functions_match_symbolic_derivation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for entry in list_entries() {
        let expr = parse_functional(&entry.dsl()).unwrap();
        for _ in 0..5 {
            let p = DiscreteDist::random_positive(schema(&entry, &mut rng), &mut rng);
            let (phi, _) = derive_if(&expr, p.schema()).unwrap();
            let psi = evaluate_functional(&expr, &p).unwrap();
            assert!((psi - entry.truth_discrete(&p).unwrap()).abs() < 1e-12, "{}", entry.id);
            let eta = entry.nuisances_discrete(&p).unwrap();
            let pop = DiscretePopulation::new(p.clone(), entry.roles()).unwrap();
            for (atom, _) in p.iter() {
                let o = pop.obs_of(&atom);
                let hand = match entry.eval_uncentered_if(&eta, &o.view()).unwrap() {
                    IfValue::Linear(v) => v - psi,
                    IfValue::Ratio { num, den } => {
                        let (n, d) = (eta.scalar("late_num").unwrap(), eta.scalar("late_den").unwrap());
                        (num - n - psi * (den - d)) / d
                    }
                };
                let symbolic = evaluate_if(&phi, &p, &atom).unwrap();
                assert!((hand - symbolic).abs() < 1e-10, "{} at {atom:?}: {hand} vs {symbolic}", entry.id);
            }
        }
    }
}

#[test]
fn exact_nuisances_give_zero_remainder() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for entry in list_entries() {
        let p = DiscreteDist::random_positive(schema(&entry, &mut rng), &mut rng);
        let eta = entry.nuisances_discrete(&p).unwrap();
        let pop = DiscretePopulation::new(p, entry.roles()).unwrap();
        assert!(entry.remainder(&eta, &eta, &pop).unwrap().abs() < 1e-14, "{}", entry.id);
    }
}

#[test]
fn mean_treated_remainder_matches_its_product_form() {
    // R2 = E[(pi/pi_hat - 1)(mu - mu_hat)] with pi, mu tabulated by hand
    let s = Arc::new(Schema::new([("x", 2), ("a", 2), ("y", 2)]).unwrap());
    let p = DiscreteDist::from_weights(s, vec![1.0, 2.0, 3.0, 4.0, 2.0, 2.0, 1.0, 5.0]).unwrap();
    let e = get_entry("mean_treated").unwrap();
    let eta = e.nuisances_discrete(&p).unwrap();
    let hat = Bundle::new().with("pi", |_| 0.5).with("mu", |_| 0.3);
    let pop = DiscretePopulation::new(p.clone(), e.roles()).unwrap();
    let total = 20.0;
    let px = [10.0 / total, 10.0 / total];
    let pi = [7.0 / 10.0, 6.0 / 10.0];
    let mu = [4.0 / 7.0, 5.0 / 6.0];
    let by_hand: f64 = (0..2).map(|x| px[x] * (pi[x] / 0.5 - 1.0) * (mu[x] - 0.3)).sum();
    assert!((e.remainder(&hat, &eta, &pop).unwrap() - by_hand).abs() < 1e-14);
    let drift = pop.expect(&|o| e.uncentered(&hat, o).unwrap()).unwrap() - e.truth_discrete(&p).unwrap();
    assert!((drift - by_hand).abs() < 1e-14);
}
