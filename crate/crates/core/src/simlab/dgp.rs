//! Registered data-generating processes with known truth.

use std::num::NonZeroUsize;
use std::sync::{Arc, OnceLock};

use gauss_quad::{GaussHermite, GaussLegendre};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::catalog::{Bundle, CatalogEntry, Functional};
use crate::data::{Dataset, Matrix, Obs};
use crate::dist::{DiscreteDist, Schema};
use crate::error::{Error, Result};
use crate::population::{DiscretePopulation, Population, Roles};

pub const DGP_IDS: [&str; 5] = ["ate-smooth-1d", "ecc-randomized", "density-gauss-mix", "late-binary", "gf-2t-binary"];

const PANELS: usize = 256;
const NODES_PER_PANEL: usize = 8;
const HERMITE_NODES: usize = 24;
const DENSITY_HALF_WIDTH: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpKind {
    AteSmooth1d,
    EccRandomized,
    DensityGaussMix,
    LateBinary,
    Gf2tBinary,
}

/// A data-generating process: sampler, exact nuisances and truth.
#[derive(Debug, Clone)]
pub struct Dgp {
    pub id: &'static str,
    pub kind: DgpKind,
    /// Functional the process was designed for.
    pub default_functional: &'static str,
    pub provenance: &'static str,
    /// Range of the true propensities.
    pub positivity: (f64, f64),
    discrete: Option<DiscretePopulation>,
}

fn legendre() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(NonZeroUsize::new(NODES_PER_PANEL).expect("nonzero")))
}

fn hermite() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(NonZeroUsize::new(HERMITE_NODES).expect("nonzero")))
}

/// Composite Gauss-Legendre over `[lo, hi]`.
pub fn integrate(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let w = (hi - lo) / PANELS as f64;
    (0..PANELS)
        .map(|i| {
            let a = lo + i as f64 * w;
            legendre().integrate(a, a + w, &f)
        })
        .sum()
}

/// `E f(m + sd * N(0, 1))` by Gauss-Hermite.
fn gaussian_expect(m: f64, sd: f64, f: impl Fn(f64) -> f64) -> f64 {
    hermite().integrate(|t| f(m + std::f64::consts::SQRT_2 * sd * t)) / std::f64::consts::PI.sqrt()
}

fn normal_pdf(z: f64, m: f64) -> f64 {
    (-(z - m) * (z - m) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Two-component Gaussian mixture density `0.5 N(-1, 1) + 0.5 N(1, 1)`.
pub fn mixture_pdf(z: f64) -> f64 {
    0.5 * normal_pdf(z, -1.0) + 0.5 * normal_pdf(z, 1.0)
}

/// Closed form of `int p^2` for the mixture.
pub fn mixture_int_p2() -> f64 {
    (1.0 + (-1.0f64).exp()) / (4.0 * std::f64::consts::PI.sqrt())
}

fn ate_pi(x: f64) -> f64 {
    0.3 + 0.4 * x
}

fn ate_m1(x: f64) -> f64 {
    x * x
}

fn ate_m0(x: f64) -> f64 {
    x / 2.0
}

fn bern(p: f64) -> impl Fn(usize) -> f64 {
    move |v| if v == 1 { p } else { 1.0 - p }
}

fn late_dist() -> DiscreteDist {
    let schema = Arc::new(Schema::new([("x", 2), ("r", 2), ("a", 2), ("y", 2)]).expect("valid schema"));
    // classes: always-taker, never-taker, complier; treatment raises P(Y=1) by 0.4
    let masses = schema
        .atoms()
        .map(|atom| {
            let (x, r, a, y) = (atom[0], atom[1], atom[2], atom[3]);
            let xf = x as f64;
            let classes = [(0.15, 0.3), (0.25, 0.2), (0.6, 0.1 + 0.1 * xf)];
            let mut m = 0.0;
            for (c, &(share, base)) in classes.iter().enumerate() {
                let takes = match c {
                    0 => 1,
                    1 => 0,
                    _ => r,
                };
                if takes == a {
                    m += share * bern(base + 0.4 * a as f64)(y);
                }
            }
            0.5 * bern(0.4 + 0.2 * xf)(r) * m
        })
        .collect();
    DiscreteDist::from_vec(schema, masses).expect("valid distribution")
}

fn gf_dist() -> DiscreteDist {
    let schema = Arc::new(Schema::new([("x1", 2), ("a1", 2), ("x2", 2), ("a2", 2), ("y", 2)]).expect("valid schema"));
    let masses = schema
        .atoms()
        .map(|v| {
            let f: Vec<f64> = v.iter().map(|&t| t as f64).collect();
            0.5 * bern(0.4 + 0.2 * f[0])(v[1])
                * bern(0.3 + 0.2 * f[0] + 0.3 * f[1])(v[2])
                * bern(0.3 + 0.2 * f[2] + 0.2 * f[1])(v[3])
                * bern(0.1 + 0.2 * f[0] + 0.2 * f[2] + 0.3 * f[3] + 0.1 * f[1])(v[4])
        })
        .collect();
    DiscreteDist::from_vec(schema, masses).expect("valid distribution")
}

/// Look up a registered process.
pub fn get_dgp(id: &str) -> Result<Dgp> {
    let (kind, default_functional, provenance, positivity, discrete) = match id {
        "ate-smooth-1d" => (
            DgpKind::AteSmooth1d,
            "mean_treated",
            "psi = int_0^1 x^2 dx = 1/3",
            (0.3, 0.7),
            None,
        ),
        "ecc-randomized" => (
            DgpKind::EccRandomized,
            "expected_cond_cov",
            "psi = E{pi (1 - pi) tau} = 0.5 * 0.5 * 1 = 0.25",
            (0.5, 0.5),
            None,
        ),
        "density-gauss-mix" => (
            DgpKind::DensityGaussMix,
            "expected_density",
            "psi = int p^2 by composite Gauss-Legendre on [-12, 12]; closed form (1 + e^-1) / (4 sqrt(pi))",
            (0.0, 1.0),
            None,
        ),
        "late-binary" => (
            DgpKind::LateBinary,
            "late_ratio",
            "exact summation over the 16-atom support; compliers have effect 0.4",
            (0.4, 0.6),
            Some(DiscretePopulation::new(late_dist(), Roles::instrument())?),
        ),
        "gf-2t-binary" => (
            DgpKind::Gf2tBinary,
            "gformula_2t",
            "exact g-formula summation over the 32-atom support",
            (0.3, 0.7),
            Some(DiscretePopulation::new(gf_dist(), Roles::two_time_points())?),
        ),
        other => return Err(Error::UnknownDgp(other.into())),
    };
    Ok(Dgp {
        id: DGP_IDS.iter().find(|d| **d == id).copied().expect("registered"),
        kind,
        default_functional,
        provenance,
        positivity,
        discrete,
    })
}

impl Dgp {
    pub fn discrete(&self) -> Option<&DiscretePopulation> {
        self.discrete.as_ref()
    }

    pub fn supports(&self, entry: &CatalogEntry) -> bool {
        use Functional::*;
        match self.kind {
            DgpKind::AteSmooth1d | DgpKind::EccRandomized => {
                matches!(entry.functional, MeanTreated | AteContrast | ExpectedCondCov | Stochastic { .. })
            }
            DgpKind::DensityGaussMix => entry.functional == ExpectedDensity,
            DgpKind::LateBinary => matches!(entry.functional, LateNum | LateDen | LateRatio),
            DgpKind::Gf2tBinary => entry.functional == Gformula2t,
        }
    }

    fn require(&self, entry: &CatalogEntry) -> Result<()> {
        if self.supports(entry) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("process `{}` does not support `{}`", self.id, entry.id)))
        }
    }

    /// Exact nuisances of `entry` under this process.
    pub fn truth_bundle(&self, entry: &CatalogEntry) -> Result<Bundle> {
        self.require(entry)?;
        if let Some(d) = &self.discrete {
            return entry.nuisances_discrete(d.dist());
        }
        let ecc = entry.functional == Functional::ExpectedCondCov;
        Ok(match self.kind {
            DgpKind::AteSmooth1d => Bundle::new()
                .with("pi", |x| ate_pi(x[0]))
                .with("mu1", |x| ate_m1(x[0]))
                .with("mu0", |x| ate_m0(x[0]))
                .with("mu", move |x| {
                    let x = x[0];
                    if ecc {
                        ate_pi(x) * ate_m1(x) + (1.0 - ate_pi(x)) * ate_m0(x)
                    } else {
                        ate_m1(x)
                    }
                }),
            DgpKind::EccRandomized => Bundle::new()
                .with("pi", |_| 0.5)
                .with("mu1", |_| 1.0)
                .with("mu0", |_| 0.0)
                .with("mu", move |_| if ecc { 0.5 } else { 1.0 }),
            DgpKind::DensityGaussMix => Bundle::new()
                .with("p", |x| mixture_pdf(x[0]))
                .with_scalar("int_p2", integrate(-DENSITY_HALF_WIDTH, DENSITY_HALF_WIDTH, |z| mixture_pdf(z).powi(2))),
            _ => unreachable!("discrete processes handled above"),
        })
    }

    /// `psi` under this process.
    pub fn truth(&self, entry: &CatalogEntry) -> Result<f64> {
        if let Some(d) = &self.discrete {
            self.require(entry)?;
            return entry.truth_discrete(d.dist());
        }
        if entry.functional == Functional::ExpectedDensity {
            return self.truth_bundle(entry)?.scalar("int_p2");
        }
        entry.truth(self, &self.truth_bundle(entry)?)
    }

    /// `var phi(O; P)`, the efficiency bound, for linear entries.
    pub fn efficient_variance(&self, entry: &CatalogEntry) -> Result<f64> {
        if entry.is_ratio() {
            return Err(Error::TruthUnavailable(format!("`{}` is a ratio", entry.id)));
        }
        let truth = self.truth_bundle(entry)?;
        let psi = self.truth(entry)?;
        self.expect(&|o| (entry.uncentered(&truth, o).unwrap_or(f64::NAN) - psi).powi(2))
    }

    /// Draw `n` observations; deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::EmptyData);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let coin = |rng: &mut ChaCha8Rng, p: f64| if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        if let Some(d) = &self.discrete {
            let idx = WeightedIndex::new(d.dist().masses()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let s = d.dist().schema();
            let rows: Vec<_> = (0..n).map(|_| d.obs_of(&s.atom_at(idx.sample(&mut rng)))).collect();
            let x = Matrix::from_rows(&rows.iter().map(|o| o.x.clone()).collect::<Vec<_>>())?;
            let col = |f: fn(&crate::population::OwnedObs) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
            let data = Dataset::new(x).with_a(col(|o| o.a)).with_y(col(|o| o.y));
            return Ok(match self.kind {
                DgpKind::LateBinary => data.with_r(col(|o| o.r)),
                _ => {
                    let x2 = Matrix::from_rows(&rows.iter().map(|o| o.x2.clone()).collect::<Vec<_>>())?;
                    data.with_second_stage(x2, col(|o| o.a2))
                }
            });
        }
        let mut x = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        match self.kind {
            DgpKind::DensityGaussMix => {
                for _ in 0..n {
                    let m = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
                    let e: f64 = rng.sample(StandardNormal);
                    x.push(m + e);
                }
                return Ok(Dataset::new(Matrix::column(x)));
            }
            DgpKind::AteSmooth1d => {
                for _ in 0..n {
                    let xi: f64 = rng.random();
                    let ai = coin(&mut rng, ate_pi(xi));
                    let m = if ai == 1.0 { ate_m1(xi) } else { ate_m0(xi) };
                    y.push(coin(&mut rng, m));
                    x.push(xi);
                    a.push(ai);
                }
            }
            DgpKind::EccRandomized => {
                for _ in 0..n {
                    let xi: f64 = rng.random();
                    let ai = coin(&mut rng, 0.5);
                    let e: f64 = rng.sample(StandardNormal);
                    x.push(xi);
                    a.push(ai);
                    y.push(ai + e);
                }
            }
            _ => unreachable!("discrete processes handled above"),
        }
        Ok(Dataset::new(Matrix::column(x)).with_a(a).with_y(y))
    }
}

impl Population for Dgp {
    fn expect(&self, f: &dyn Fn(&Obs) -> f64) -> Result<f64> {
        if let Some(d) = &self.discrete {
            return d.expect(f);
        }
        let nan = f64::NAN;
        let obs = |x: &[f64], a: f64, y: f64| -> f64 {
            f(&Obs {
                x,
                a,
                y,
                r: nan,
                x2: &[],
                a2: nan,
            })
        };
        let v = match self.kind {
            DgpKind::AteSmooth1d => integrate(0.0, 1.0, |x| {
                let xs = [x];
                let (pi, m1, m0) = (ate_pi(x), ate_m1(x), ate_m0(x));
                pi * (m1 * obs(&xs, 1.0, 1.0) + (1.0 - m1) * obs(&xs, 1.0, 0.0))
                    + (1.0 - pi) * (m0 * obs(&xs, 0.0, 1.0) + (1.0 - m0) * obs(&xs, 0.0, 0.0))
            }),
            DgpKind::EccRandomized => integrate(0.0, 1.0, |x| {
                let xs = [x];
                0.5 * gaussian_expect(1.0, 1.0, |y| obs(&xs, 1.0, y)) + 0.5 * gaussian_expect(0.0, 1.0, |y| obs(&xs, 0.0, y))
            }),
            DgpKind::DensityGaussMix => {
                integrate(-DENSITY_HALF_WIDTH, DENSITY_HALF_WIDTH, |z| mixture_pdf(z) * obs(&[z], nan, nan))
            }
            _ => unreachable!("discrete processes handled above"),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::QuadratureFailure(format!("non-finite expectation under `{}`", self.id)))
        }
    }

    fn integrate_x(&self, f: &dyn Fn(&[f64]) -> f64) -> Result<f64> {
        if let Some(d) = &self.discrete {
            return d.integrate_x(f);
        }
        Ok(match self.kind {
            DgpKind::DensityGaussMix => integrate(-DENSITY_HALF_WIDTH, DENSITY_HALF_WIDTH, |z| f(&[z])),
            _ => integrate(0.0, 1.0, |x| f(&[x])),
        })
    }
}
