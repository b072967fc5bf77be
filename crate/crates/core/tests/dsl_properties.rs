use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ifkit::dist::{gateaux_derivative, DiscreteDist, Schema, DEFAULT_STEP};
use ifkit::dsl::{check_if, derive_if, evaluate_functional, evaluate_if, parse_functional, replay, simplify, Node};
use ifkit::dsl::InfluenceExpr;

const BASES: [&str; 4] = [
    "sum_x { E[y | x=x, a=1] * p(x=x) }",
    "sum_x { (E[a * y | x=x] - E[a | x=x] * E[y | x=x]) * p(x=x) }",
    "E[y]",
    "p(x=1, a=0) * E[y | a=1]",
];

fn dist(levels: (usize, usize), seed: u64) -> DiscreteDist {
    let s = Arc::new(Schema::new([("x", levels.0), ("a", 2), ("y", levels.1)]).unwrap());
    DiscreteDist::random_positive(s, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn if_values(text: &str, p: &DiscreteDist) -> Vec<f64> {
    let e = parse_functional(text).unwrap();
    let (phi, _) = derive_if(&e, p.schema()).unwrap();
    p.iter().map(|(atom, _)| evaluate_if(&phi, p, &atom).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn derived_influence_functions_have_mean_zero(base in 0..4usize, lx in 2..5usize, ly in 2..4usize, seed in any::<u64>()) {
        let p = dist((lx, ly), seed);
        let v = if_values(BASES[base], &p);
        let m: f64 = v.iter().zip(p.masses()).map(|(a, b)| a * b).sum();
        prop_assert!(m.abs() < 1e-12, "mean {m}");
    }

    #[test]
    fn influence_function_is_linear(i in 0..4usize, j in 0..4usize, c in -3.0f64..3.0, seed in any::<u64>()) {
        let p = dist((3, 2), seed);
        let combo = format!("{c} * ({}) + ({})", BASES[i], BASES[j]);
        let (vi, vj, vc) = (if_values(BASES[i], &p), if_values(BASES[j], &p), if_values(&combo, &p));
        for k in 0..vc.len() {
            prop_assert!((vc[k] - (c * vi[k] + vj[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn chain_rule_for_log_and_square(base in 0..4usize, seed in any::<u64>()) {
        let p = dist((2, 2), seed);
        let e = parse_functional(BASES[base]).unwrap();
        let psi = evaluate_functional(&e, &p).unwrap();
        prop_assume!(psi > 1e-3);
        let v = if_values(BASES[base], &p);
        let logs = if_values(&format!("log({})", BASES[base]), &p);
        let squares = if_values(&format!("sq({})", BASES[base]), &p);
        for k in 0..v.len() {
            prop_assert!((logs[k] - v[k] / psi).abs() < 1e-10);
            prop_assert!((squares[k] - 2.0 * psi * v[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn simplify_preserves_values(base in 0..4usize, seed in any::<u64>()) {
        let p = dist((3, 3), seed);
        let e = parse_functional(BASES[base]).unwrap();
        let (phi, _) = derive_if(&e, p.schema()).unwrap();
        let padded = InfluenceExpr {
            node: Node::add(
                Node::mul(Node::Const(1.0), phi.node.clone()),
                Node::mul(Node::Const(0.0), Node::Psi),
            ),
            functional: phi.functional.clone(),
        };
        let (simpler, _) = simplify(&padded, p.schema()).unwrap();
        for (atom, _) in p.iter() {
            let a = evaluate_if(&phi, &p, &atom).unwrap();
            let b = evaluate_if(&simpler, &p, &atom).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gateaux_matches_symbolic(base in 0..4usize, seed in any::<u64>()) {
        let p = dist((2, 3), seed);
        let e = parse_functional(BASES[base]).unwrap();
        prop_assert!(check_if(&e, &p, 1e-6).unwrap().pass);
    }
}

#[test]
fn trace_replays_to_the_result() {
    let s = Schema::new([("x", 3), ("a", 2), ("y", 2)]).unwrap();
    for text in BASES {
        let (phi, trace) = derive_if(&parse_functional(text).unwrap(), &s).unwrap();
        assert_eq!(replay(&trace).unwrap(), phi.node, "{text}");
    }
}

#[test]
fn richardson_is_exact_for_cubic_functionals() {
    let p = dist((2, 2), 17);
    let e = parse_functional("p(x=0) * p(x=0) * p(a=1)").unwrap();
    let (phi, _) = derive_if(&e, p.schema()).unwrap();
    for (atom, _) in p.iter() {
        let oracle = gateaux_derivative(|q: &DiscreteDist| evaluate_functional(&e, q), &p, &atom, DEFAULT_STEP).unwrap();
        assert!((oracle.value - evaluate_if(&phi, &p, &atom).unwrap()).abs() < 1e-9);
    }
}
