//! Known data-generating distributions that expectations can be taken under.

use std::sync::Arc;

use crate::data::Obs;
use crate::dist::DiscreteDist;
use crate::error::{Error, Result};

/// A distribution of observations with exact (or quadrature) expectations.
pub trait Population: Send + Sync {
    /// `E[f(O)]`.
    fn expect(&self, f: &dyn Fn(&Obs) -> f64) -> Result<f64>;

    /// Integral of `f` over the first covariate block with respect to Lebesgue
    /// measure (continuous) or counting measure (discrete).
    fn integrate_x(&self, f: &dyn Fn(&[f64]) -> f64) -> Result<f64>;
}

/// Which schema variables play which observation role.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Roles {
    pub x: Vec<String>,
    pub a: Option<String>,
    pub y: Option<String>,
    pub r: Option<String>,
    pub x2: Vec<String>,
    pub a2: Option<String>,
}

impl Roles {
    pub fn treatment() -> Roles {
        Roles {
            x: vec!["x".into()],
            a: Some("a".into()),
            y: Some("y".into()),
            ..Default::default()
        }
    }

    pub fn density() -> Roles {
        Roles {
            x: vec!["z".into()],
            ..Default::default()
        }
    }

    pub fn instrument() -> Roles {
        Roles {
            r: Some("r".into()),
            ..Roles::treatment()
        }
    }

    pub fn two_time_points() -> Roles {
        Roles {
            x: vec!["x1".into()],
            a: Some("a1".into()),
            y: Some("y".into()),
            x2: vec!["x2".into()],
            a2: Some("a2".into()),
            r: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    x: Vec<usize>,
    a: Option<usize>,
    y: Option<usize>,
    r: Option<usize>,
    x2: Vec<usize>,
    a2: Option<usize>,
}

/// A discrete distribution read through a role layout; level indices are the
/// numeric values of the variables.
#[derive(Debug, Clone)]
pub struct DiscretePopulation {
    dist: Arc<DiscreteDist>,
    roles: Roles,
    layout: Layout,
}

/// Owned observation built from an atom.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedObs {
    pub x: Vec<f64>,
    pub a: f64,
    pub y: f64,
    pub r: f64,
    pub x2: Vec<f64>,
    pub a2: f64,
}

impl OwnedObs {
    pub fn view(&self) -> Obs<'_> {
        Obs {
            x: &self.x,
            a: self.a,
            y: self.y,
            r: self.r,
            x2: &self.x2,
            a2: self.a2,
        }
    }
}

impl DiscretePopulation {
    pub fn new(dist: DiscreteDist, roles: Roles) -> Result<DiscretePopulation> {
        let s = dist.schema().clone();
        let one = |v: &Option<String>| v.as_ref().map(|n| s.index_of(n)).transpose();
        let many = |v: &[String]| v.iter().map(|n| s.index_of(n)).collect::<Result<Vec<_>>>();
        let layout = Layout {
            x: many(&roles.x)?,
            a: one(&roles.a)?,
            y: one(&roles.y)?,
            r: one(&roles.r)?,
            x2: many(&roles.x2)?,
            a2: one(&roles.a2)?,
        };
        if layout.x.is_empty() {
            return Err(Error::InvalidSchema("population needs at least one covariate".into()));
        }
        Ok(DiscretePopulation {
            dist: Arc::new(dist),
            roles,
            layout,
        })
    }

    pub fn dist(&self) -> &DiscreteDist {
        &self.dist
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn obs_of(&self, atom: &[usize]) -> OwnedObs {
        let l = &self.layout;
        let get = |i: Option<usize>| i.map_or(f64::NAN, |i| atom[i] as f64);
        OwnedObs {
            x: l.x.iter().map(|&i| atom[i] as f64).collect(),
            a: get(l.a),
            y: get(l.y),
            r: get(l.r),
            x2: l.x2.iter().map(|&i| atom[i] as f64).collect(),
            a2: get(l.a2),
        }
    }
}

impl Population for DiscretePopulation {
    fn expect(&self, f: &dyn Fn(&Obs) -> f64) -> Result<f64> {
        let mut total = 0.0;
        for (atom, m) in self.dist.iter() {
            if m > 0.0 {
                total += m * f(&self.obs_of(&atom).view());
            }
        }
        Ok(total)
    }

    fn integrate_x(&self, f: &dyn Fn(&[f64]) -> f64) -> Result<f64> {
        let s = self.dist.schema();
        let mut total = 0.0;
        let levels: Vec<usize> = self.layout.x.iter().map(|&i| s.vars()[i].levels).collect();
        let count: usize = levels.iter().product();
        for mut k in 0..count {
            let mut x = vec![0.0; levels.len()];
            for (slot, &l) in x.iter_mut().zip(&levels).rev() {
                *slot = (k % l) as f64;
                k /= l;
            }
            total += f(&x);
        }
        Ok(total)
    }
}
