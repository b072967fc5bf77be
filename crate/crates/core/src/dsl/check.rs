use serde::Serialize;

use super::eval::{evaluate_functional, evaluate_if_with_psi};
use super::{derive_if, FunctionalExpr, InfluenceExpr};
use crate::dist::{gateaux_derivative, DiscreteDist, DEFAULT_STEP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub atom: Vec<usize>,
    pub symbolic: f64,
    pub oracle: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub influence_function: String,
    pub psi: f64,
    pub rows: Vec<CheckRow>,
    pub max_gap: f64,
    /// `|sum_z P(z) phi(z)|`
    pub mean_zero_residual: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Derive the influence function of `expr` and compare it atom by atom with
/// the numerical Gateaux derivative at `p`.
pub fn check_if(expr: &FunctionalExpr, p: &DiscreteDist, tol: f64) -> Result<CheckReport> {
    let (phi, _) = derive_if(expr, p.schema())?;
    check_influence(&phi, p, tol)
}

/// Oracle step for `p`: the default step, capped at a fiftieth of the
/// smallest atom mass.
pub fn oracle_step(p: &DiscreteDist) -> f64 {
    let smallest = p.masses().iter().cloned().fold(1.0, f64::min);
    DEFAULT_STEP.min(smallest / 50.0)
}

/// Compare a candidate influence function with the Gateaux oracle for its
/// functional.
pub fn check_influence(phi: &InfluenceExpr, p: &DiscreteDist, tol: f64) -> Result<CheckReport> {
    if !p.is_strictly_positive() {
        return Err(Error::InvalidData("check requires a strictly positive distribution".into()));
    }
    let psi = evaluate_functional(&phi.functional, p)?;
    let step = oracle_step(p);
    let functional = |q: &DiscreteDist| evaluate_functional(&phi.functional, q);
    let mut rows = Vec::with_capacity(p.masses().len());
    let mut residual = 0.0;
    for (atom, mass) in p.iter() {
        let symbolic = evaluate_if_with_psi(&phi.node, p, &atom, Some(psi))?;
        let oracle = gateaux_derivative(functional, p, &atom, step)
            .map_err(|e| e.at_atom(&atom))?
            .value;
        residual += mass * symbolic;
        rows.push(CheckRow {
            gap: (symbolic - oracle).abs(),
            atom,
            symbolic,
            oracle,
        });
    }
    let max_gap = rows.iter().map(|r| r.gap).fold(0.0, f64::max);
    let mean_zero_residual = residual.abs();
    Ok(CheckReport {
        influence_function: phi.to_string(),
        psi,
        pass: max_gap <= tol && mean_zero_residual <= tol,
        rows,
        max_gap,
        mean_zero_residual,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dist::Schema;
    use crate::dsl::{parse_functional, Node};

    #[test]
    fn ate_passes_on_random_distribution() {
        let s = Arc::new(Schema::new([("x", 2), ("a", 2), ("y", 2)]).unwrap());
        let p = DiscreteDist::random_positive(s, &mut ChaCha8Rng::seed_from_u64(11));
        let e = parse_functional("sum_x { E[y | x=x, a=1] * p(x=x) }").unwrap();
        let report = check_if(&e, &p, 1e-6).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.rows.len(), 8);
    }

    #[test]
    fn density_gap_is_tiny() {
        let s = Arc::new(Schema::new([("z", 2)]).unwrap());
        let p = DiscreteDist::from_vec(s, vec![0.25, 0.75]).unwrap();
        let e = parse_functional("sum_z { p(z=z) * p(z=z) }").unwrap();
        let report = check_if(&e, &p, 1e-6).unwrap();
        assert!(report.pass);
        assert!(report.max_gap <= 1e-9);
        assert!((report.rows[0].symbolic + 0.75).abs() < 1e-15);
    }

    #[test]
    fn corrupted_influence_function_fails() {
        let s = Arc::new(Schema::new([("x", 2), ("a", 2), ("y", 2)]).unwrap());
        let p = DiscreteDist::random_positive(s.clone(), &mut ChaCha8Rng::seed_from_u64(5));
        let e = parse_functional("sum_x { E[y | x=x, a=1] * p(x=x) }").unwrap();
        let (phi, _) = derive_if(&e, &s).unwrap();
        // phi = weighted residual + (mu(X) - psi); drop mu(X)
        let Node::Add(residual, _) = phi.node.clone() else { panic!("{phi}") };
        let broken = InfluenceExpr {
            node: Node::sub(*residual, Node::Psi),
            functional: phi.functional.clone(),
        };
        let report = check_influence(&broken, &p, 1e-6).unwrap();
        assert!(!report.pass);
        assert!(report.rows.iter().any(|r| r.gap > 1e-3));
    }

    #[test]
    fn zero_mass_is_rejected() {
        let s = Arc::new(Schema::new([("z", 2)]).unwrap());
        let p = DiscreteDist::from_vec(s, vec![0.0, 1.0]).unwrap();
        let e = parse_functional("sum_z { p(z=z) * p(z=z) }").unwrap();
        assert!(check_if(&e, &p, 1e-6).is_err());
    }
}
