//! Finite discrete joint distributions.
//!
//! A [`DiscreteDist`] stores one mass per atom of the full product support of
//! its [`Schema`]; zero masses are kept explicitly. Atoms are enumerated in
//! lexicographic order of level indices under the schema's variable order
//! (the last variable varies fastest), so every reduction is deterministic.
//!
//! The Gateaux oracle differentiates a functional along the point-mass
//! contamination path `(1 - eps) P + eps * delta_z`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub levels: usize,
}

/// Ordered list of named discrete variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    vars: Vec<Variable>,
    strides: Vec<usize>,
    size: usize,
}

impl Schema {
    pub fn new<S: Into<String>>(vars: impl IntoIterator<Item = (S, usize)>) -> Result<Schema> {
        let vars: Vec<Variable> = vars
            .into_iter()
            .map(|(name, levels)| Variable {
                name: name.into(),
                levels,
            })
            .collect();
        if vars.is_empty() {
            return Err(Error::InvalidSchema("no variables".into()));
        }
        for (i, v) in vars.iter().enumerate() {
            if v.levels == 0 {
                return Err(Error::InvalidSchema(format!("`{}` has zero levels", v.name)));
            }
            if !is_identifier(&v.name) {
                return Err(Error::InvalidSchema(format!("`{}` is not an identifier", v.name)));
            }
            if vars[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::InvalidSchema(format!("duplicate variable `{}`", v.name)));
            }
        }
        let mut strides = vec![1; vars.len()];
        for i in (0..vars.len() - 1).rev() {
            strides[i] = strides[i + 1] * vars[i + 1].levels;
        }
        let size = strides[0] * vars[0].levels;
        Ok(Schema {
            vars,
            strides,
            size,
        })
    }

    pub fn vars(&self) -> &[Variable] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Number of atoms in the product support.
    pub fn n_atoms(&self) -> usize {
        self.size
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.vars
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn levels_of(&self, name: &str) -> Result<usize> {
        Ok(self.vars[self.index_of(name)?].levels)
    }

    pub fn atom_index(&self, atom: &[usize]) -> Result<usize> {
        if atom.len() != self.vars.len() || atom.iter().zip(&self.vars).any(|(&l, v)| l >= v.levels)
        {
            return Err(Error::AtomOutOfRange(atom.to_vec()));
        }
        Ok(atom.iter().zip(&self.strides).map(|(l, s)| l * s).sum())
    }

    pub fn atom_at(&self, mut index: usize) -> Vec<usize> {
        let mut atom = vec![0; self.vars.len()];
        for (slot, stride) in atom.iter_mut().zip(&self.strides) {
            *slot = index / stride;
            index %= stride;
        }
        atom
    }

    /// All atoms in enumeration order.
    pub fn atoms(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.size).map(|i| self.atom_at(i))
    }

    /// Resolve a named partial assignment into (variable index, level) pairs.
    pub fn resolve(&self, partial: &[(&str, usize)]) -> Result<Vec<(usize, usize)>> {
        partial
            .iter()
            .map(|&(name, level)| {
                let i = self.index_of(name)?;
                if level >= self.vars[i].levels {
                    return Err(Error::AtomOutOfRange(vec![level]));
                }
                Ok((i, level))
            })
            .collect()
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A strictly validated distribution over the product support of a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    schema: Arc<Schema>,
    masses: Vec<f64>,
}

impl DiscreteDist {
    /// Build from explicit (atom, mass) pairs; unlisted atoms get mass 0.
    pub fn new(schema: Arc<Schema>, masses: &[(Vec<usize>, f64)]) -> Result<DiscreteDist> {
        let mut full = vec![0.0; schema.n_atoms()];
        let mut seen = vec![false; schema.n_atoms()];
        for (atom, mass) in masses {
            let i = schema.atom_index(atom)?;
            if seen[i] {
                return Err(Error::DuplicateAtom(atom.clone()));
            }
            seen[i] = true;
            full[i] = *mass;
        }
        Self::from_vec(schema, full)
    }

    /// Build from a dense mass vector in enumeration order.
    pub fn from_vec(schema: Arc<Schema>, masses: Vec<f64>) -> Result<DiscreteDist> {
        if masses.len() != schema.n_atoms() {
            return Err(Error::InvalidSchema(format!(
                "{} masses for {} atoms",
                masses.len(),
                schema.n_atoms()
            )));
        }
        for (i, &m) in masses.iter().enumerate() {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(Error::NegativeMass {
                    atom: schema.atom_at(i),
                    mass: m,
                });
            }
        }
        let sum: f64 = masses.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::SumNotOne { sum });
        }
        Ok(DiscreteDist { schema, masses })
    }

    /// Normalize arbitrary positive weights into a distribution.
    pub fn from_weights(schema: Arc<Schema>, weights: Vec<f64>) -> Result<DiscreteDist> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::SumNotOne { sum: total });
        }
        Self::from_vec(schema, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(schema: Arc<Schema>) -> DiscreteDist {
        let n = schema.n_atoms();
        DiscreteDist {
            schema,
            masses: vec![1.0 / n as f64; n],
        }
    }

    /// A random distribution with every mass at least `floor / n_atoms`-ish.
    pub fn random_positive<R: Rng + ?Sized>(schema: Arc<Schema>, rng: &mut R) -> DiscreteDist {
        let w: Vec<f64> = (0..schema.n_atoms()).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = w.iter().sum();
        DiscreteDist {
            schema,
            masses: w.into_iter().map(|x| x / total).collect(),
        }
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn mass(&self, atom: &[usize]) -> Result<f64> {
        Ok(self.masses[self.schema.atom_index(atom)?])
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.masses.iter().all(|&m| m > 0.0)
    }

    /// Iterate (atom, mass) in enumeration order.
    pub fn iter(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        self.masses
            .iter()
            .enumerate()
            .map(|(i, &m)| (self.schema.atom_at(i), m))
    }

    /// `(1 - eps) P + eps * delta_z` for `eps` in [0, 1].
    pub fn contaminate(&self, z: &[usize], eps: f64) -> Result<DiscreteDist> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::EpsOutOfRange(eps));
        }
        Ok(self.signed_mix(self.schema.atom_index(z)?, eps))
    }

    fn signed_mix(&self, zi: usize, eps: f64) -> DiscreteDist {
        let mut masses: Vec<f64> = self.masses.iter().map(|m| (1.0 - eps) * m).collect();
        masses[zi] += eps;
        DiscreteDist {
            schema: Arc::clone(&self.schema),
            masses,
        }
    }

    /// Mass of all atoms consistent with a named partial assignment.
    pub fn marginal_mass(&self, partial: &[(&str, usize)]) -> Result<f64> {
        let resolved = self.schema.resolve(partial)?;
        Ok(self.marginal_mass_resolved(&resolved))
    }

    pub(crate) fn marginal_mass_resolved(&self, resolved: &[(usize, usize)]) -> f64 {
        self.iter()
            .filter(|(a, _)| resolved.iter().all(|&(i, l)| a[i] == l))
            .map(|(_, m)| m)
            .sum()
    }

    /// `E[g(Z) | given]` for a function of the atom's level indices.
    pub fn conditional_mean<F>(&self, target: F, given: &[(&str, usize)]) -> Result<f64>
    where
        F: Fn(&[usize]) -> f64,
    {
        let resolved = self.schema.resolve(given)?;
        self.conditional_mean_resolved(target, &resolved)
            .map_err(|_| Error::ZeroConditioningMass(render_partial(given)))
    }

    pub(crate) fn conditional_mean_resolved<F>(
        &self,
        mut target: F,
        resolved: &[(usize, usize)],
    ) -> Result<f64>
    where
        F: FnMut(&[usize]) -> f64,
    {
        let mut num = 0.0;
        let mut den = 0.0;
        for (atom, m) in self.iter() {
            if resolved.iter().all(|&(i, l)| atom[i] == l) {
                den += m;
                num += m * target(&atom);
            }
        }
        if den <= 0.0 {
            let desc: Vec<String> = resolved
                .iter()
                .map(|&(i, l)| format!("{}={}", self.schema.vars[i].name, l))
                .collect();
            return Err(Error::ZeroConditioningMass(desc.join(", ")));
        }
        Ok(num / den)
    }

    /// Expectation of a function of the atom under this distribution.
    pub fn expect<F>(&self, f: F) -> f64
    where
        F: Fn(&[usize]) -> f64,
    {
        self.iter().map(|(a, m)| m * f(&a)).sum()
    }

    pub fn to_json(&self) -> DistJson {
        DistJson {
            schema: self
                .schema
                .vars
                .iter()
                .map(|v| (v.name.clone(), v.levels))
                .collect(),
            masses: self.iter().collect(),
        }
    }

    pub fn from_json(doc: &DistJson) -> Result<DiscreteDist> {
        let schema = Arc::new(Schema::new(doc.schema.iter().map(|(n, l)| (n.clone(), *l)))?);
        DiscreteDist::new(schema, &doc.masses)
    }
}

fn render_partial(partial: &[(&str, usize)]) -> String {
    partial
        .iter()
        .map(|(n, l)| format!("{n}={l}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// On-disk form: `{"schema":[["x",2],...],"masses":[[[0,1],0.25],...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistJson {
    pub schema: Vec<(String, usize)>,
    pub masses: Vec<(Vec<usize>, f64)>,
}

/// How a Gateaux derivative was differenced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffScheme {
    /// Two-sided central difference with one Richardson step.
    CentralRichardson,
    /// Second-order one-sided forward difference; the negative side left the simplex.
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Gateaux {
    pub value: f64,
    pub scheme: DiffScheme,
}

pub const DEFAULT_STEP: f64 = 1e-4;

/// Numerical derivative of `psi` along `(1 - eps) P + eps * delta_z` at `eps = 0`.
///
/// The negative side uses the signed mixture `(1 + h) P - h * delta_z`, which
/// stays a distribution only while `P(z) >= h (1 - P(z))`; otherwise a one-sided
/// second-order forward difference is used and flagged.
pub fn gateaux_derivative<F>(psi: F, p: &DiscreteDist, z: &[usize], step: f64) -> Result<Gateaux>
where
    F: Fn(&DiscreteDist) -> Result<f64>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::EvalFailure(format!("step {step} outside (0, 1e-2]")));
    }
    let zi = p.schema.atom_index(z)?;
    let eval = |eps: f64| -> Result<f64> {
        psi(&p.signed_mix(zi, eps)).map_err(|e| Error::EvalFailure(format!("eps={eps}: {e}")))
    };
    let pz = p.masses[zi];
    if pz - step * (1.0 - pz) >= 0.0 {
        let central = |h: f64| -> Result<f64> { Ok((eval(h)? - eval(-h)?) / (2.0 * h)) };
        let coarse = central(step)?;
        let fine = central(step / 2.0)?;
        Ok(Gateaux {
            value: (4.0 * fine - coarse) / 3.0,
            scheme: DiffScheme::CentralRichardson,
        })
    } else {
        let f0 = eval(0.0)?;
        let f1 = eval(step)?;
        let f2 = eval(2.0 * step)?;
        Ok(Gateaux {
            value: (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * step),
            scheme: DiffScheme::Forward,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn binary(name: &str) -> Arc<Schema> {
        Arc::new(Schema::new([(name, 2)]).unwrap())
    }

    fn two_point(p0: f64) -> DiscreteDist {
        DiscreteDist::new(binary("z"), &[(vec![0], p0), (vec![1], 1.0 - p0)]).unwrap()
    }

    fn expected_density(p: &DiscreteDist) -> Result<f64> {
        Ok(p.masses().iter().map(|m| m * m).sum())
    }

    #[test]
    fn make_discrete_examples() {
        let u = DiscreteDist::new(binary("z"), &[(vec![0], 0.5), (vec![1], 0.5)]).unwrap();
        assert_eq!(u.masses(), &[0.5, 0.5]);
        let v = DiscreteDist::new(binary("z"), &[(vec![0], 0.25), (vec![1], 0.75)]).unwrap();
        assert_eq!(v.mass(&[1]).unwrap(), 0.75);
        let err = DiscreteDist::new(binary("z"), &[(vec![0], 0.6), (vec![1], 0.6)]).unwrap_err();
        assert!(matches!(err, Error::SumNotOne { .. }));
    }

    #[test]
    fn make_discrete_rejects_bad_input() {
        let s = binary("z");
        assert!(matches!(
            DiscreteDist::new(s.clone(), &[(vec![0], -0.5), (vec![1], 1.5)]),
            Err(Error::NegativeMass { .. })
        ));
        assert!(matches!(
            DiscreteDist::new(s.clone(), &[(vec![0], 0.5), (vec![0], 0.5)]),
            Err(Error::DuplicateAtom(_))
        ));
        // missing atoms are filled with zero mass
        let d = DiscreteDist::new(s, &[(vec![1], 1.0)]).unwrap();
        assert_eq!(d.masses(), &[0.0, 1.0]);
    }

    #[test]
    fn schema_enumeration_is_lexicographic() {
        let s = Schema::new([("x", 2), ("y", 3)]).unwrap();
        let atoms: Vec<_> = s.atoms().collect();
        assert_eq!(atoms[0], vec![0, 0]);
        assert_eq!(atoms[1], vec![0, 1]);
        assert_eq!(atoms[3], vec![1, 0]);
        assert_eq!(s.atom_index(&[1, 2]).unwrap(), 5);
        assert!(Schema::new([("x", 2), ("x", 2)]).is_err());
        assert!(Schema::new([("x", 0)]).is_err());
    }

    #[test]
    fn contaminate_examples() {
        let p = two_point(0.5);
        let c = p.contaminate(&[0], 0.1).unwrap();
        assert!((c.masses()[0] - 0.55).abs() < 1e-15);
        assert!((c.masses()[1] - 0.45).abs() < 1e-15);
        assert_eq!(p.contaminate(&[1], 0.0).unwrap(), p);
        assert_eq!(p.contaminate(&[1], 1.0).unwrap().masses(), &[0.0, 1.0]);
        assert!(matches!(p.contaminate(&[0], 1.5), Err(Error::EpsOutOfRange(_))));
        assert!(matches!(p.contaminate(&[0], -0.1), Err(Error::EpsOutOfRange(_))));
    }

    #[test]
    fn gateaux_examples() {
        let p = two_point(0.25);
        let g = gateaux_derivative(expected_density, &p, &[1], DEFAULT_STEP).unwrap();
        assert!((g.value - 0.25).abs() < 1e-9, "{}", g.value);
        assert_eq!(g.scheme, DiffScheme::CentralRichardson);

        let u = two_point(0.5);
        for z in 0..2 {
            let g = gateaux_derivative(expected_density, &u, &[z], DEFAULT_STEP).unwrap();
            assert!(g.value.abs() < 1e-9);
        }

        let mean = |d: &DiscreteDist| Ok(d.expect(|a| a[0] as f64));
        let g = gateaux_derivative(mean, &p, &[1], DEFAULT_STEP).unwrap();
        assert!((g.value - 0.25).abs() < 1e-9);
    }

    #[test]
    fn gateaux_falls_back_to_forward_difference() {
        let s = binary("z");
        let p = DiscreteDist::from_vec(s, vec![1e-6, 1.0 - 1e-6]).unwrap();
        let g = gateaux_derivative(expected_density, &p, &[0], 1e-2).unwrap();
        assert_eq!(g.scheme, DiffScheme::Forward);
        // analytic: 2 (p(z) - psi)
        let psi = expected_density(&p).unwrap();
        assert!((g.value - 2.0 * (1e-6 - psi)).abs() < 1e-9);
    }

    #[test]
    fn gateaux_reports_eval_failure() {
        let p = two_point(0.5);
        let bad = |_: &DiscreteDist| -> Result<f64> { Err(Error::ZeroConditioningMass("x=0".into())) };
        assert!(matches!(
            gateaux_derivative(bad, &p, &[0], 1e-4),
            Err(Error::EvalFailure(_))
        ));
    }

    #[test]
    fn marginal_and_conditional_examples() {
        let s = Arc::new(Schema::new([("x", 2), ("y", 2)]).unwrap());
        let u = DiscreteDist::uniform(s.clone());
        assert_eq!(u.marginal_mass(&[("x", 1)]).unwrap(), 0.5);
        assert_eq!(u.marginal_mass(&[]).unwrap(), 1.0);
        assert!(matches!(u.marginal_mass(&[("w", 0)]), Err(Error::UnknownVariable(_))));
        assert_eq!(u.conditional_mean(|a| a[1] as f64, &[("x", 0)]).unwrap(), 0.5);
        assert_eq!(u.conditional_mean(|_| 3.0, &[("x", 1)]).unwrap(), 3.0);

        // p(x=1) = 0.4 with p(y=1 | x=1) = 0.75, built by hand
        let p = DiscreteDist::from_vec(s.clone(), vec![0.3, 0.3, 0.1, 0.3]).unwrap();
        let by_hand = 0.3 / (0.1 + 0.3);
        assert!((p.conditional_mean(|a| a[1] as f64, &[("x", 1)]).unwrap() - by_hand).abs() < 1e-15);

        let zero = DiscreteDist::from_vec(s, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(matches!(
            zero.conditional_mean(|a| a[1] as f64, &[("x", 1)]),
            Err(Error::ZeroConditioningMass(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let s = Arc::new(Schema::new([("x", 2), ("a", 2), ("y", 2)]).unwrap());
        let p = DiscreteDist::random_positive(s, &mut ChaCha8Rng::seed_from_u64(3));
        let text = serde_json::to_string(&p.to_json()).unwrap();
        assert!(text.starts_with(r#"{"schema":[["x",2],["a",2],["y",2]],"masses":[[[0,0,0],"#));
        let back = DiscreteDist::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    proptest::proptest! {
        #[test]
        fn gateaux_is_mean_zero(seed in 0u64..500) {
            let s = Arc::new(Schema::new([("x", 3), ("y", 2)]).unwrap());
            let p = DiscreteDist::random_positive(s.clone(), &mut ChaCha8Rng::seed_from_u64(seed));
            // cubic in the masses: sum of cubes plus a ratio term
            let psi = |d: &DiscreteDist| -> Result<f64> {
                let cubes: f64 = d.masses().iter().map(|m| m * m * m).sum();
                let ey = d.conditional_mean_resolved(|a| a[1] as f64, &[(0, 1)])?;
                Ok(cubes + ey)
            };
            let total: f64 = p
                .iter()
                .map(|(a, m)| m * gateaux_derivative(psi, &p, &a, DEFAULT_STEP).unwrap().value)
                .sum();
            proptest::prop_assert!(total.abs() < 1e-8, "residual {}", total);
        }

        #[test]
        fn contamination_is_affine(seed in 0u64..500, e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
            let s = Arc::new(Schema::new([("x", 2), ("y", 3)]).unwrap());
            let p = DiscreteDist::random_positive(s, &mut ChaCha8Rng::seed_from_u64(seed));
            let z = [1, 2];
            let mid = p.contaminate(&z, (e1 + e2) / 2.0).unwrap();
            let a = p.contaminate(&z, e1).unwrap();
            let b = p.contaminate(&z, e2).unwrap();
            for i in 0..mid.masses().len() {
                let avg = (a.masses()[i] + b.masses()[i]) / 2.0;
                proptest::prop_assert!((mid.masses()[i] - avg).abs() < 1e-15);
            }
        }

        #[test]
        fn richardson_matches_analytic_cubic(seed in 0u64..500) {
            let s = Arc::new(Schema::new([("z", 4)]).unwrap());
            let p = DiscreteDist::random_positive(s, &mut ChaCha8Rng::seed_from_u64(seed));
            let psi = |d: &DiscreteDist| -> Result<f64> { Ok(d.masses().iter().map(|m| m * m * m).sum()) };
            let s3: f64 = p.masses().iter().map(|m| m * m * m).sum();
            for (a, m) in p.iter() {
                // d/de sum((1-e)p + e 1(z))^3 = 3 p(z)^2 - 3 sum p^3
                let exact = 3.0 * m * m - 3.0 * s3;
                let got = gateaux_derivative(psi, &p, &a, DEFAULT_STEP).unwrap().value;
                proptest::prop_assert!((got - exact).abs() < 1e-9);
            }
        }
    }
}
