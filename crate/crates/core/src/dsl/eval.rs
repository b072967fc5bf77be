use super::{Assign, DataExpr, FunctionalExpr, InfluenceExpr, Node, Value};
use crate::dist::{DiscreteDist, Schema};
use crate::error::{Error, Result};

pub(crate) struct Ctx<'a> {
    pub p: &'a DiscreteDist,
    pub z: Option<&'a [usize]>,
    pub psi: Option<f64>,
    env: Vec<(String, usize)>,
}

impl<'a> Ctx<'a> {
    pub fn new(p: &'a DiscreteDist, z: Option<&'a [usize]>, psi: Option<f64>) -> Self {
        Ctx {
            p,
            z,
            psi,
            env: Vec::new(),
        }
    }

    fn schema(&self) -> &Schema {
        self.p.schema()
    }

    fn value(&self, v: &Value) -> Result<usize> {
        match v {
            Value::Level(l) => Ok(*l),
            Value::Bound(name) => self
                .env
                .iter()
                .rev()
                .find(|(n, _)| n == name)
                .map(|&(_, l)| l)
                .ok_or_else(|| Error::UnboundVariable {
                    name: name.clone(),
                    line: 0,
                    column: 0,
                }),
            Value::Observed(var) => {
                let z = self
                    .z
                    .ok_or_else(|| Error::EvalFailure(format!("`{}` needs an observation", var.to_uppercase())))?;
                Ok(z[self.schema().index_of(var)?])
            }
        }
    }

    fn resolve(&self, assigns: &[Assign]) -> Result<Vec<(usize, usize)>> {
        assigns
            .iter()
            .map(|a| {
                let i = self.schema().index_of(&a.var)?;
                let l = self.value(&a.value)?;
                if l >= self.schema().vars()[i].levels {
                    return Err(Error::AtomOutOfRange(vec![l]));
                }
                Ok((i, l))
            })
            .collect()
    }
}

/// Number of levels a bound variable ranges over: the schema variable of the
/// same name, else the variable it is first assigned to inside `body`.
pub(crate) fn bound_range(v: &str, body: &Node, schema: &Schema) -> Result<usize> {
    if let Ok(l) = schema.levels_of(v) {
        return Ok(l);
    }
    fn find(n: &Node, v: &str) -> Option<String> {
        let assigns: &[Assign] = match n {
            Node::Mass(a) | Node::CondExp(_, a) | Node::Indicator(a) => a,
            _ => &[],
        };
        if let Some(a) = assigns.iter().find(|a| matches!(&a.value, Value::Bound(b) if b == v)) {
            return Some(a.var.clone());
        }
        n.children().into_iter().find_map(|c| find(c, v))
    }
    let var = find(body, v).ok_or_else(|| Error::UnresolvedRange(v.to_string()))?;
    schema.levels_of(&var)
}

/// Compile a data expression into variable indices of `schema`.
pub(crate) fn data_eval(g: &DataExpr, schema: &Schema, atom: &[usize]) -> Result<f64> {
    Ok(match g {
        DataExpr::Num(x) => *x,
        DataExpr::Var(v) => atom[schema.index_of(v)?] as f64,
        DataExpr::Add(l, r) => data_eval(l, schema, atom)? + data_eval(r, schema, atom)?,
        DataExpr::Sub(l, r) => data_eval(l, schema, atom)? - data_eval(r, schema, atom)?,
        DataExpr::Mul(l, r) => data_eval(l, schema, atom)? * data_eval(r, schema, atom)?,
        DataExpr::Div(l, r) => {
            let d = data_eval(r, schema, atom)?;
            if d == 0.0 {
                return Err(Error::DivideByZero(g.to_string()));
            }
            data_eval(l, schema, atom)? / d
        }
    })
}

fn check_vars(g: &DataExpr, schema: &Schema) -> Result<()> {
    match g {
        DataExpr::Num(_) => Ok(()),
        DataExpr::Var(v) => schema.index_of(v).map(|_| ()),
        DataExpr::Add(l, r) | DataExpr::Sub(l, r) | DataExpr::Mul(l, r) | DataExpr::Div(l, r) => {
            check_vars(l, schema)?;
            check_vars(r, schema)
        }
    }
}

pub(crate) fn eval(node: &Node, ctx: &mut Ctx<'_>) -> Result<f64> {
    Ok(match node {
        Node::Const(x) => *x,
        Node::Level(v) => ctx.value(v)? as f64,
        Node::Mass(a) => {
            let r = ctx.resolve(a)?;
            ctx.p.marginal_mass_resolved(&r)
        }
        Node::CondExp(g, a) => {
            check_vars(g, ctx.schema())?;
            let r = ctx.resolve(a)?;
            let schema = ctx.schema();
            let mut failure = None;
            let v = ctx
                .p
                .conditional_mean_resolved(
                    |atom| match data_eval(g, schema, atom) {
                        Ok(x) => x,
                        Err(e) => {
                            failure.get_or_insert(e);
                            f64::NAN
                        }
                    },
                    &r,
                )
                .map_err(|_| Error::ZeroConditioningMass(node.to_string()))?;
            if let Some(e) = failure {
                return Err(e);
            }
            v
        }
        Node::Sum(v, body) => {
            let n = bound_range(v, body, ctx.schema())?;
            let mut total = 0.0;
            for level in 0..n {
                ctx.env.push((v.clone(), level));
                let term = eval(body, ctx);
                ctx.env.pop();
                total += term?;
            }
            total
        }
        Node::Add(l, r) => eval(l, ctx)? + eval(r, ctx)?,
        Node::Sub(l, r) => eval(l, ctx)? - eval(r, ctx)?,
        Node::Mul(l, r) => eval(l, ctx)? * eval(r, ctx)?,
        Node::Div(l, r) => {
            let d = eval(r, ctx)?;
            if d == 0.0 {
                return Err(Error::DivideByZero(node.to_string()));
            }
            eval(l, ctx)? / d
        }
        Node::Apply(f, x) => {
            let y = f.apply(eval(x, ctx)?);
            if !y.is_finite() {
                return Err(Error::EvalFailure(format!("{node} is not finite")));
            }
            y
        }
        Node::Data(g) => {
            let z = ctx
                .z
                .ok_or_else(|| Error::EvalFailure(format!("`{node}` needs an observation")))?;
            data_eval(g, ctx.schema(), z)?
        }
        Node::Indicator(a) => {
            let z = ctx
                .z
                .ok_or_else(|| Error::EvalFailure(format!("`{node}` needs an observation")))?;
            let r = ctx.resolve(a)?;
            if r.iter().all(|&(i, l)| z[i] == l) {
                1.0
            } else {
                0.0
            }
        }
        Node::Psi => ctx
            .psi
            .ok_or_else(|| Error::EvalFailure("psi is not available here".into()))?,
        Node::IfOf(_) => return Err(Error::EvalFailure(format!("unexpanded operator in {node}"))),
    })
}

/// Value of the functional at `p`.
pub fn evaluate_functional(expr: &FunctionalExpr, p: &DiscreteDist) -> Result<f64> {
    eval(&expr.0, &mut Ctx::new(p, None, None))
}

/// Value of the influence function at observation `z` under `p`.
pub fn evaluate_if(phi: &InfluenceExpr, p: &DiscreteDist, z: &[usize]) -> Result<f64> {
    let psi = if phi.node.contains_psi() {
        Some(evaluate_functional(&phi.functional, p)?)
    } else {
        None
    };
    evaluate_if_with_psi(&phi.node, p, z, psi)
}

pub(crate) fn evaluate_if_with_psi(
    node: &Node,
    p: &DiscreteDist,
    z: &[usize],
    psi: Option<f64>,
) -> Result<f64> {
    p.schema().atom_index(z)?;
    eval(node, &mut Ctx::new(p, Some(z), psi)).map_err(|e| e.at_atom(z))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dsl::parse_functional;

    fn z_dist(p0: f64) -> DiscreteDist {
        let s = Arc::new(Schema::new([("z", 2)]).unwrap());
        DiscreteDist::from_vec(s, vec![p0, 1.0 - p0]).unwrap()
    }

    #[test]
    fn functional_examples() {
        let dens = parse_functional("sum_z { p(z=z) * p(z=z) }").unwrap();
        assert_eq!(evaluate_functional(&dens, &z_dist(0.5)).unwrap(), 0.5);
        // brute force: 0.25^2 + 0.75^2
        let brute = 0.25f64.powi(2) + 0.75f64.powi(2);
        assert!((evaluate_functional(&dens, &z_dist(0.25)).unwrap() - brute).abs() < 1e-15);

        let s = Arc::new(Schema::new([("y", 2)]).unwrap());
        let p = DiscreteDist::from_vec(s, vec![0.25, 0.75]).unwrap();
        let mean = parse_functional("sum_y { y * p(y=y) }").unwrap();
        assert_eq!(evaluate_functional(&mean, &p).unwrap(), 0.75);
        assert_eq!(evaluate_functional(&parse_functional("E[y]").unwrap(), &p).unwrap(), 0.75);
    }

    #[test]
    fn zero_conditioning_mass_is_reported() {
        let s = Arc::new(Schema::new([("x", 2), ("y", 2)]).unwrap());
        let p = DiscreteDist::from_vec(s, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let e = parse_functional("E[y | x=1]").unwrap();
        assert!(matches!(evaluate_functional(&e, &p), Err(Error::ZeroConditioningMass(_))));
        let e = parse_functional("p(x=0) / p(x=1)").unwrap();
        assert!(matches!(evaluate_functional(&e, &p), Err(Error::DivideByZero(_))));
    }

    #[test]
    fn unknown_variable_is_reported() {
        let e = parse_functional("p(w=0)").unwrap();
        assert!(matches!(
            evaluate_functional(&e, &z_dist(0.5)),
            Err(Error::UnknownVariable(_))
        ));
    }

    #[test]
    fn bound_range_from_usage() {
        let s = Arc::new(Schema::new([("x", 3)]).unwrap());
        let p = DiscreteDist::uniform(s);
        let e = parse_functional("sum_v { v * p(x=v) }").unwrap();
        assert!((evaluate_functional(&e, &p).unwrap() - 1.0).abs() < 1e-15);
        let e = parse_functional("sum_v { v }").unwrap();
        assert!(matches!(evaluate_functional(&e, &p), Err(Error::UnresolvedRange(_))));
    }
}
