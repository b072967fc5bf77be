//! Registered functionals with hand-coded influence functions.
//!
//! Every entry works with the *uncentered* influence function
//! `phi_u = phi + psi`, so a one-step estimate is a plain average of
//! `phi_u` over the evaluation rows.
//!
//! | id | psi | nuisances |
//! |----|-----|-----------|
//! | `mean_treated` | `E[E(Y \| X, A=1)]` | `pi`, `mu` |
//! | `ate_contrast` | `E[mu1(X) - mu0(X)]` | `pi`, `mu1`, `mu0` |
//! | `expected_cond_cov` | `E[cov(A, Y \| X)]` | `pi`, `mu` |
//! | `expected_density` | `int p(z)^2 dz` | `p` |
//! | `stochastic_intervention` | `E[q mu1(X) + (1-q) mu0(X)]` | `pi`, `mu1`, `mu0` |
//! | `late_num`, `late_den`, `late_ratio` | instrument contrasts and their ratio | `varpi`, `mu1`, `mu0`, `eta1`, `eta0` |
//! | `gformula_2t` | `E[E{mu11(X1, X2) \| X1, A1=1}]` | `pi1`, `pi2`, `mu11`, `nu` |

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::data::Obs;
use crate::dist::DiscreteDist;
use crate::error::{Error, Result};
use crate::nuisance::NuisanceFn;
use crate::population::{Population, Roles};

/// Default positivity floor for propensity-type nuisances.
pub const PROPENSITY_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    ConditionalMean,
    ConditionalProbability,
    Density,
}

/// Covariates a nuisance is a function of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    /// First covariate block.
    X,
    /// First block followed by the second-time-point block.
    XX2,
}

/// What a nuisance regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Column(&'static str),
    /// Fitted values of an earlier nuisance in the manifest.
    Fitted(&'static str),
    /// Density of the first covariate.
    Density,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceSpec {
    pub name: &'static str,
    pub kind: NuisanceKind,
    pub target: Target,
    pub features: Features,
    /// Rows used for fitting, as (column, required value).
    pub subset: &'static [(&'static str, f64)],
    /// Output range; propensities carry a positivity floor.
    pub range: (f64, f64),
    pub description: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    MeanTreated,
    AteContrast,
    ExpectedCondCov,
    ExpectedDensity,
    /// Treat with probability `q` regardless of covariates.
    Stochastic { q: f64 },
    LateNum,
    LateDen,
    LateRatio,
    Gformula2t,
}

/// Value of an uncentered influence function at one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IfValue {
    Linear(f64),
    Ratio { num: f64, den: f64 },
}

/// Named nuisance functions plus scalar summaries (e.g. `int_p2`).
#[derive(Clone, Default)]
pub struct Bundle {
    fns: BTreeMap<String, NuisanceFn>,
    scalars: BTreeMap<String, f64>,
}

impl fmt::Debug for Bundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bundle")
            .field("fns", &self.fns.keys().collect::<Vec<_>>())
            .field("scalars", &self.scalars)
            .finish()
    }
}

impl Bundle {
    pub fn new() -> Bundle {
        Bundle::default()
    }

    pub fn with(mut self, name: &str, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Bundle {
        self.insert(name, Arc::new(f));
        self
    }

    pub fn with_scalar(mut self, name: &str, v: f64) -> Bundle {
        self.scalars.insert(name.into(), v);
        self
    }

    pub fn insert(&mut self, name: &str, f: NuisanceFn) {
        self.fns.insert(name.into(), f);
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) {
        self.scalars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<&NuisanceFn> {
        self.fns.get(name).ok_or_else(|| Error::MissingNuisance(name.into()))
    }

    pub fn eval(&self, name: &str, x: &[f64]) -> Result<f64> {
        Ok(self.get(name)?(x))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars.get(name).copied().ok_or_else(|| Error::MissingNuisance(name.into()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fns.keys().map(String::as_str)
    }

    /// `self + t * direction` for every function named in `direction`.
    pub fn perturbed(&self, direction: &Bundle, t: f64) -> Bundle {
        let mut out = self.clone();
        for (name, h) in &direction.fns {
            if let Some(base) = self.fns.get(name) {
                let (base, h) = (base.clone(), h.clone());
                out.fns.insert(name.clone(), Arc::new(move |x: &[f64]| base(x) + t * h(x)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogEntry {
    pub id: String,
    pub functional: Functional,
    pub manifest: Vec<NuisanceSpec>,
    pub floor: f64,
}

const ALL: &[(&str, f64)] = &[];
const TREATED: &[(&str, f64)] = &[("a", 1.0)];
const CONTROL: &[(&str, f64)] = &[("a", 0.0)];
const INSTRUMENT_ON: &[(&str, f64)] = &[("r", 1.0)];
const INSTRUMENT_OFF: &[(&str, f64)] = &[("r", 0.0)];
const BOTH_TREATED: &[(&str, f64)] = &[("a", 1.0), ("a2", 1.0)];

fn spec(
    name: &'static str,
    kind: NuisanceKind,
    target: Target,
    features: Features,
    subset: &'static [(&'static str, f64)],
    description: &'static str,
) -> NuisanceSpec {
    let range = match kind {
        NuisanceKind::ConditionalProbability => (PROPENSITY_FLOOR, 1.0 - PROPENSITY_FLOOR),
        NuisanceKind::ConditionalMean => (f64::NEG_INFINITY, f64::INFINITY),
        NuisanceKind::Density => (0.0, f64::INFINITY),
    };
    NuisanceSpec {
        name,
        kind,
        target,
        features,
        subset,
        range,
        description,
    }
}

fn manifest(f: Functional) -> Vec<NuisanceSpec> {
    use Features::*;
    use NuisanceKind::{ConditionalMean, ConditionalProbability};
    use Target::*;
    let pi = || spec("pi", ConditionalProbability, Column("a"), X, ALL, "P(A=1 | X)");
    let arms = || {
        vec![
            pi(),
            spec("mu1", ConditionalMean, Column("y"), X, TREATED, "E(Y | X, A=1)"),
            spec("mu0", ConditionalMean, Column("y"), X, CONTROL, "E(Y | X, A=0)"),
        ]
    };
    let varpi = || spec("varpi", ConditionalProbability, Column("r"), X, ALL, "P(R=1 | X)");
    let outcome = || {
        vec![
            spec("mu1", ConditionalMean, Column("y"), X, INSTRUMENT_ON, "E(Y | X, R=1)"),
            spec("mu0", ConditionalMean, Column("y"), X, INSTRUMENT_OFF, "E(Y | X, R=0)"),
        ]
    };
    let uptake = || {
        vec![
            spec("eta1", ConditionalMean, Column("a"), X, INSTRUMENT_ON, "E(A | X, R=1)"),
            spec("eta0", ConditionalMean, Column("a"), X, INSTRUMENT_OFF, "E(A | X, R=0)"),
        ]
    };
    match f {
        Functional::MeanTreated => vec![pi(), spec("mu", ConditionalMean, Column("y"), X, TREATED, "E(Y | X, A=1)")],
        Functional::AteContrast | Functional::Stochastic { .. } => arms(),
        Functional::ExpectedCondCov => vec![pi(), spec("mu", ConditionalMean, Column("y"), X, ALL, "E(Y | X)")],
        Functional::ExpectedDensity => vec![spec("p", NuisanceKind::Density, Target::Density, X, ALL, "density of Z (first covariate)")],
        Functional::LateNum => [vec![varpi()], outcome()].concat(),
        Functional::LateDen => [vec![varpi()], uptake()].concat(),
        Functional::LateRatio => [vec![varpi()], outcome(), uptake()].concat(),
        Functional::Gformula2t => vec![
            spec("pi1", ConditionalProbability, Column("a"), X, ALL, "P(A1=1 | X1)"),
            spec("pi2", ConditionalProbability, Column("a2"), XX2, TREATED, "P(A2=1 | X1, A1=1, X2)"),
            spec("mu11", ConditionalMean, Column("y"), XX2, BOTH_TREATED, "E(Y | X1, A1=1, X2, A2=1)"),
            spec("nu", ConditionalMean, Fitted("mu11"), X, TREATED, "E{mu11(X1, X2) | X1, A1=1}"),
        ],
    }
}

impl CatalogEntry {
    pub fn new(id: &str, functional: Functional) -> CatalogEntry {
        CatalogEntry {
            id: id.to_string(),
            functional,
            manifest: manifest(functional),
            floor: PROPENSITY_FLOOR,
        }
    }

    pub fn is_ratio(&self) -> bool {
        self.functional == Functional::LateRatio
    }

    /// Numerator and denominator entries of a ratio functional.
    pub fn components(&self) -> Option<(CatalogEntry, CatalogEntry)> {
        self.is_ratio()
            .then(|| (CatalogEntry::new("late_num", Functional::LateNum), CatalogEntry::new("late_den", Functional::LateDen)))
    }

    /// Variable names the DSL form and discrete helpers expect.
    pub fn roles(&self) -> Roles {
        match self.functional {
            Functional::ExpectedDensity => Roles::density(),
            Functional::LateNum | Functional::LateDen | Functional::LateRatio => Roles::instrument(),
            Functional::Gformula2t => Roles::two_time_points(),
            _ => Roles::treatment(),
        }
    }

    pub fn required_columns(&self) -> &'static [&'static str] {
        match self.functional {
            Functional::ExpectedDensity => &[],
            Functional::LateNum => &["r", "y"],
            Functional::LateDen => &["r", "a"],
            Functional::LateRatio => &["r", "a", "y"],
            Functional::Gformula2t => &["a", "a2", "y"],
            _ => &["a", "y"],
        }
    }

    /// The functional in the text DSL, over the variables of [`Self::roles`].
    pub fn dsl(&self) -> String {
        let contrast = |t: &str| format!("sum_x {{ (E[{t} | x=x, r=1] - E[{t} | x=x, r=0]) * p(x=x) }}");
        match self.functional {
            Functional::MeanTreated => "sum_x { E[y | x=x, a=1] * p(x=x) }".into(),
            Functional::AteContrast => "sum_x { (E[y | x=x, a=1] - E[y | x=x, a=0]) * p(x=x) }".into(),
            Functional::ExpectedCondCov => {
                "sum_x { (E[a * y | x=x] - E[a | x=x] * E[y | x=x]) * p(x=x) }".into()
            }
            Functional::ExpectedDensity => "sum_z { p(z=z) * p(z=z) }".into(),
            Functional::Stochastic { q } => {
                format!("sum_x {{ ({q} * E[y | x=x, a=1] + {} * E[y | x=x, a=0]) * p(x=x) }}", 1.0 - q)
            }
            Functional::LateNum => contrast("y"),
            Functional::LateDen => contrast("a"),
            Functional::LateRatio => format!("({}) / ({})", contrast("y"), contrast("a")),
            Functional::Gformula2t => "sum_x1 { sum_x2 { E[y | x1=x1, a1=1, x2=x2, a2=1] * p(x2=x2, x1=x1, a1=1) \
                                       / p(x1=x1, a1=1) } * p(x1=x1) }"
                .into(),
        }
    }

    fn propensity(&self, b: &Bundle, name: &str, x: &[f64], two_sided: bool) -> Result<f64> {
        let v = b.eval(name, x)?;
        let slack = self.floor * 1e-9;
        if v.is_nan() || v < self.floor - slack || (two_sided && v > 1.0 - self.floor + slack) {
            return Err(Error::PositivityViolation {
                name: name.into(),
                value: v,
                floor: self.floor,
            });
        }
        Ok(v)
    }

    fn check_columns(&self, o: &Obs) -> Result<()> {
        for &c in self.required_columns() {
            let v = match c {
                "a" => o.a,
                "y" => o.y,
                "r" => o.r,
                _ => o.a2,
            };
            if v.is_nan() {
                return Err(Error::MissingColumn(c.into()));
            }
        }
        Ok(())
    }

    /// Augmented contrast `T/w (V - m1) - (1-T)/(1-w) (V - m0) + m1 - m0`.
    fn contrast_if(&self, b: &Bundle, o: &Obs, w: &str, t: f64, v: f64, m1: &str, m0: &str) -> Result<f64> {
        let w = self.propensity(b, w, o.x, true)?;
        let (m1, m0) = (b.eval(m1, o.x)?, b.eval(m0, o.x)?);
        Ok(t / w * (v - m1) - (1.0 - t) / (1.0 - w) * (v - m0) + m1 - m0)
    }

    pub fn eval_uncentered_if(&self, b: &Bundle, o: &Obs) -> Result<IfValue> {
        self.check_columns(o)?;
        let x = o.x;
        Ok(IfValue::Linear(match self.functional {
            Functional::MeanTreated => {
                let pi = self.propensity(b, "pi", x, false)?;
                let mu = b.eval("mu", x)?;
                o.a / pi * (o.y - mu) + mu
            }
            Functional::AteContrast => self.contrast_if(b, o, "pi", o.a, o.y, "mu1", "mu0")?,
            Functional::ExpectedCondCov => (o.a - b.eval("pi", x)?) * (o.y - b.eval("mu", x)?),
            Functional::ExpectedDensity => 2.0 * b.eval("p", x)? - b.scalar("int_p2")?,
            Functional::Stochastic { q } => {
                let pi = self.propensity(b, "pi", x, true)?;
                let (m1, m0) = (b.eval("mu1", x)?, b.eval("mu0", x)?);
                let (g, p, m) = if o.a == 1.0 { (q, pi, m1) } else { (1.0 - q, 1.0 - pi, m0) };
                g / p * (o.y - m) + q * m1 + (1.0 - q) * m0
            }
            Functional::LateNum => self.contrast_if(b, o, "varpi", o.r, o.y, "mu1", "mu0")?,
            Functional::LateDen => self.contrast_if(b, o, "varpi", o.r, o.a, "eta1", "eta0")?,
            Functional::LateRatio => {
                return Ok(IfValue::Ratio {
                    num: self.contrast_if(b, o, "varpi", o.r, o.y, "mu1", "mu0")?,
                    den: self.contrast_if(b, o, "varpi", o.r, o.a, "eta1", "eta0")?,
                })
            }
            Functional::Gformula2t => {
                let xx2 = [o.x, o.x2].concat();
                let pi1 = self.propensity(b, "pi1", x, false)?;
                let pi2 = self.propensity(b, "pi2", &xx2, false)?;
                let mu11 = b.eval("mu11", &xx2)?;
                let nu = b.eval("nu", x)?;
                o.a * o.a2 / (pi1 * pi2) * (o.y - mu11) + o.a / pi1 * (mu11 - nu) + nu
            }
        }))
    }

    /// Uncentered influence function of a linear entry.
    pub fn uncentered(&self, b: &Bundle, o: &Obs) -> Result<f64> {
        match self.eval_uncentered_if(b, o)? {
            IfValue::Linear(v) => Ok(v),
            IfValue::Ratio { .. } => Err(Error::InvalidConfig(format!("`{}` is a ratio functional", self.id))),
        }
    }

    /// Per-row plug-in term for averaged-regression entries.
    pub fn plugin_term(&self, b: &Bundle, o: &Obs) -> Result<f64> {
        let x = o.x;
        match self.functional {
            Functional::MeanTreated => b.eval("mu", x),
            Functional::AteContrast | Functional::LateNum => Ok(b.eval("mu1", x)? - b.eval("mu0", x)?),
            Functional::Stochastic { q } => Ok(q * b.eval("mu1", x)? + (1.0 - q) * b.eval("mu0", x)?),
            Functional::LateDen => Ok(b.eval("eta1", x)? - b.eval("eta0", x)?),
            Functional::Gformula2t => b.eval("nu", x),
            Functional::ExpectedDensity | Functional::ExpectedCondCov | Functional::LateRatio => {
                Err(Error::PluginUnavailable(self.id.clone()))
            }
        }
    }

    /// `psi` at a known population with exact nuisances `truth`.
    pub fn truth(&self, pop: &dyn Population, truth: &Bundle) -> Result<f64> {
        match self.components() {
            Some((num, den)) => {
                let n = num.truth(pop, truth)?;
                let d = den.truth(pop, truth)?;
                Ok(n / d)
            }
            None => {
                let failed = std::cell::Cell::new(false);
                let v = pop.expect(&|o| {
                    self.uncentered(truth, o).unwrap_or_else(|_| {
                        failed.set(true);
                        f64::NAN
                    })
                })?;
                if failed.get() || !v.is_finite() {
                    return Err(Error::QuadratureFailure(format!("`{}` truth is undefined", self.id)));
                }
                Ok(v)
            }
        }
    }

    /// `psi(P)` by direct summation over a discrete distribution laid out in
    /// [`Self::roles`].
    pub fn truth_discrete(&self, p: &DiscreteDist) -> Result<f64> {
        let cm = |target: &str, given: &[(&str, usize)]| -> Result<f64> {
            let t = p.schema().index_of(target)?;
            p.conditional_mean(|atom| atom[t] as f64, given)
        };
        let lv = |v: &str| p.schema().levels_of(v);
        let sum_x = |f: &dyn Fn(usize) -> Result<f64>| -> Result<f64> {
            (0..lv("x")?).map(|x| Ok(f(x)? * p.marginal_mass(&[("x", x)])?)).sum()
        };
        match self.functional {
            Functional::MeanTreated => sum_x(&|x| cm("y", &[("x", x), ("a", 1)])),
            Functional::AteContrast => sum_x(&|x| Ok(cm("y", &[("x", x), ("a", 1)])? - cm("y", &[("x", x), ("a", 0)])?)),
            Functional::ExpectedCondCov => sum_x(&|x| {
                let (ia, iy) = (p.schema().index_of("a")?, p.schema().index_of("y")?);
                let ay = p.conditional_mean(|t| (t[ia] * t[iy]) as f64, &[("x", x)])?;
                Ok(ay - cm("a", &[("x", x)])? * cm("y", &[("x", x)])?)
            }),
            Functional::ExpectedDensity => Ok(p.masses().iter().map(|m| m * m).sum()),
            Functional::Stochastic { q } => {
                sum_x(&|x| Ok(q * cm("y", &[("x", x), ("a", 1)])? + (1.0 - q) * cm("y", &[("x", x), ("a", 0)])?))
            }
            Functional::LateNum => sum_x(&|x| Ok(cm("y", &[("x", x), ("r", 1)])? - cm("y", &[("x", x), ("r", 0)])?)),
            Functional::LateDen => sum_x(&|x| Ok(cm("a", &[("x", x), ("r", 1)])? - cm("a", &[("x", x), ("r", 0)])?)),
            Functional::LateRatio => {
                let (num, den) = self.components().expect("ratio");
                Ok(num.truth_discrete(p)? / den.truth_discrete(p)?)
            }
            Functional::Gformula2t => {
                let mut total = 0.0;
                for x1 in 0..lv("x1")? {
                    let mut inner = 0.0;
                    let base = p.marginal_mass(&[("x1", x1), ("a1", 1)])?;
                    for x2 in 0..lv("x2")? {
                        let mu = cm("y", &[("x1", x1), ("a1", 1), ("x2", x2), ("a2", 1)])?;
                        inner += mu * p.marginal_mass(&[("x1", x1), ("a1", 1), ("x2", x2)])? / base;
                    }
                    total += inner * p.marginal_mass(&[("x1", x1)])?;
                }
                Ok(total)
            }
        }
    }

    /// Exact nuisances of a discrete distribution laid out in [`Self::roles`].
    /// Features are level indices; anything off the grid evaluates to NaN.
    pub fn nuisances_discrete(&self, p: &DiscreteDist) -> Result<Bundle> {
        let s = p.schema();
        let idx = |v: &str| s.index_of(v);
        let cm = |target: usize, given: &[(&str, usize)]| p.conditional_mean(|atom| atom[target] as f64, given);
        let mut b = Bundle::new();
        match self.functional {
            Functional::ExpectedDensity => {
                let masses = p.masses().to_vec();
                b.insert_scalar("int_p2", masses.iter().map(|m| m * m).sum());
                b.insert("p", table_fn(vec![masses.len()], masses));
            }
            Functional::Gformula2t => {
                let (l1, l2) = (s.levels_of("x1")?, s.levels_of("x2")?);
                let (ia1, ia2, iy) = (idx("a1")?, idx("a2")?, idx("y")?);
                let mut pi1 = Vec::new();
                let mut nu = Vec::new();
                let (mut pi2, mut mu11) = (Vec::new(), Vec::new());
                for x1 in 0..l1 {
                    pi1.push(cm(ia1, &[("x1", x1)])?);
                    let base = p.marginal_mass(&[("x1", x1), ("a1", 1)])?;
                    let mut acc = 0.0;
                    for x2 in 0..l2 {
                        pi2.push(cm(ia2, &[("x1", x1), ("a1", 1), ("x2", x2)])?);
                        let m = cm(iy, &[("x1", x1), ("a1", 1), ("x2", x2), ("a2", 1)])?;
                        mu11.push(m);
                        acc += m * p.marginal_mass(&[("x1", x1), ("a1", 1), ("x2", x2)])? / base;
                    }
                    nu.push(acc);
                }
                b.insert("pi1", table_fn(vec![l1], pi1));
                b.insert("pi2", table_fn(vec![l1, l2], pi2));
                b.insert("mu11", table_fn(vec![l1, l2], mu11));
                b.insert("nu", table_fn(vec![l1], nu));
            }
            _ => {
                let lx = s.levels_of("x")?;
                let over_x = |f: &dyn Fn(usize) -> Result<f64>| -> Result<NuisanceFn> {
                    Ok(table_fn(vec![lx], (0..lx).map(f).collect::<Result<Vec<_>>>()?))
                };
                let instrument = matches!(self.functional, Functional::LateNum | Functional::LateDen | Functional::LateRatio);
                if instrument {
                    let (ir, ia, iy) = (idx("r")?, idx("a")?, idx("y")?);
                    b.insert("varpi", over_x(&|x| cm(ir, &[("x", x)]))?);
                    b.insert("mu1", over_x(&|x| cm(iy, &[("x", x), ("r", 1)]))?);
                    b.insert("mu0", over_x(&|x| cm(iy, &[("x", x), ("r", 0)]))?);
                    b.insert("eta1", over_x(&|x| cm(ia, &[("x", x), ("r", 1)]))?);
                    b.insert("eta0", over_x(&|x| cm(ia, &[("x", x), ("r", 0)]))?);
                    b.insert_scalar("late_num", CatalogEntry::new("late_num", Functional::LateNum).truth_discrete(p)?);
                    b.insert_scalar("late_den", CatalogEntry::new("late_den", Functional::LateDen).truth_discrete(p)?);
                } else {
                    let (ia, iy) = (idx("a")?, idx("y")?);
                    b.insert("pi", over_x(&|x| cm(ia, &[("x", x)]))?);
                    if self.functional == Functional::ExpectedCondCov {
                        b.insert("mu", over_x(&|x| cm(iy, &[("x", x)]))?);
                    } else {
                        b.insert("mu", over_x(&|x| cm(iy, &[("x", x), ("a", 1)]))?);
                        b.insert("mu1", over_x(&|x| cm(iy, &[("x", x), ("a", 1)]))?);
                        b.insert("mu0", over_x(&|x| cm(iy, &[("x", x), ("a", 0)]))?);
                    }
                }
            }
        }
        Ok(b)
    }

    /// Second-order remainder `R2 = E_P phi_u(.; hat) - psi(P)`.
    ///
    /// Closed forms for the treatment, covariance and density entries; the
    /// g-formula uses the defining expectation directly and the ratio uses
    /// its numerator/denominator remainders plus the scalars `late_num` and
    /// `late_den` of `hat`.
    pub fn remainder(&self, hat: &Bundle, truth: &Bundle, pop: &dyn Population) -> Result<f64> {
        let failure = std::cell::RefCell::new(None);
        let guard = |r: Result<f64>| match r {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        };
        let ev = |b: &Bundle, name: &str, x: &[f64]| guard(b.eval(name, x));
        let arm = |w: &str, m: &str, treated: bool| -> Result<f64> {
            pop.expect(&|o| {
                let (wh, wt) = (ev(hat, w, o.x), ev(truth, w, o.x));
                let (wh, wt) = if treated { (wh, wt) } else { (1.0 - wh, 1.0 - wt) };
                (wt / wh - 1.0) * (ev(truth, m, o.x) - ev(hat, m, o.x))
            })
        };
        let value = match self.functional {
            Functional::MeanTreated => arm("pi", "mu", true)?,
            Functional::AteContrast => arm("pi", "mu1", true)? - arm("pi", "mu0", false)?,
            Functional::Stochastic { q } => q * arm("pi", "mu1", true)? + (1.0 - q) * arm("pi", "mu0", false)?,
            Functional::LateNum => arm("varpi", "mu1", true)? - arm("varpi", "mu0", false)?,
            Functional::LateDen => arm("varpi", "eta1", true)? - arm("varpi", "eta0", false)?,
            Functional::ExpectedCondCov => pop.expect(&|o| {
                (ev(hat, "pi", o.x) - ev(truth, "pi", o.x)) * (ev(hat, "mu", o.x) - ev(truth, "mu", o.x))
            })?,
            Functional::ExpectedDensity => -pop.integrate_x(&|x| (ev(hat, "p", x) - ev(truth, "p", x)).powi(2))?,
            Functional::Gformula2t => pop.expect(&|o| {
                guard(self.uncentered(hat, o)) - guard(self.uncentered(truth, o))
            })?,
            Functional::LateRatio => {
                let (num, den) = self.components().expect("ratio");
                let rn = num.remainder(hat, truth, pop)?;
                let rd = den.remainder(hat, truth, pop)?;
                let (nt, dt) = (num.truth(pop, truth)?, den.truth(pop, truth)?);
                let psi = nt / dt;
                let (nh, dh) = (hat.scalar("late_num")?, hat.scalar("late_den")?);
                let psi_hat = nh / dh;
                (rn - psi_hat * rd - (psi_hat - psi) * (dt - dh)) / dh
            }
        };
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        if !value.is_finite() {
            return Err(Error::QuadratureFailure(format!("non-finite remainder for `{}`", self.id)));
        }
        Ok(value)
    }
}

/// Lookup table over integer-valued features, row-major in `dims`.
pub fn table_fn(dims: Vec<usize>, values: Vec<f64>) -> NuisanceFn {
    Arc::new(move |x: &[f64]| {
        let mut k = 0usize;
        for (v, &d) in x.iter().zip(&dims) {
            if v.fract() != 0.0 || *v < 0.0 || *v >= d as f64 {
                return f64::NAN;
            }
            k = k * d + *v as usize;
        }
        values[k]
    })
}

pub const ENTRY_IDS: [&str; 9] = [
    "mean_treated",
    "ate_contrast",
    "expected_cond_cov",
    "expected_density",
    "stochastic_intervention",
    "late_num",
    "late_den",
    "late_ratio",
    "gformula_2t",
];

/// Default treatment probability for `stochastic_intervention`.
pub const DEFAULT_POLICY_Q: f64 = 0.5;

/// Look up an entry. `stochastic_intervention` takes its policy from
/// [`get_entry_with_policy`]; here it uses [`DEFAULT_POLICY_Q`].
pub fn get_entry(id: &str) -> Result<CatalogEntry> {
    get_entry_with_policy(id, DEFAULT_POLICY_Q)
}

pub fn get_entry_with_policy(id: &str, q: f64) -> Result<CatalogEntry> {
    let f = match id {
        "mean_treated" => Functional::MeanTreated,
        "ate_contrast" => Functional::AteContrast,
        "expected_cond_cov" => Functional::ExpectedCondCov,
        "expected_density" => Functional::ExpectedDensity,
        "stochastic_intervention" => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidConfig(format!("policy probability {q} outside [0, 1]")));
            }
            Functional::Stochastic { q }
        }
        "late_num" => Functional::LateNum,
        "late_den" => Functional::LateDen,
        "late_ratio" => Functional::LateRatio,
        "gformula_2t" => Functional::Gformula2t,
        other => return Err(Error::UnknownFunctional(other.into())),
    };
    Ok(CatalogEntry::new(id, f))
}

pub fn list_entries() -> Vec<CatalogEntry> {
    ENTRY_IDS.iter().map(|id| get_entry(id).expect("registered")).collect()
}
