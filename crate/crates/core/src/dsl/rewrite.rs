//! Term rewriting for influence-function derivation.
//!
//! Derivation starts from `IF[expr]` and pushes the operator down with the
//! differentiation rules (sum, product, quotient, chain) until it reaches the
//! two building blocks, `IF[p(v)] = 1(v) - p(v)` and
//! `IF[E[g | v]] = 1(v) / p(v) * (g - E[g | v])`. Simplification then
//! collapses indicator sums, folds constants and recognizes `psi`.
//!
//! Every step rewrites the first matching node in pre-order (outside-in, left
//! to right), so traces are canonical and can be replayed node by node.

use std::collections::BTreeSet;

use serde::Serialize;

use super::eval::bound_range;
use super::{b, Assign, DataExpr, Func, FunctionalExpr, InfluenceExpr, Node, Value};
use crate::dist::Schema;
use crate::error::{Error, Result};

const MAX_STEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub rule: &'static str,
    /// Child indices from the root to the rewritten node.
    pub path: Vec<usize>,
    pub before: Node,
    pub after: Node,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DerivationTrace {
    pub input: Option<Node>,
    pub steps: Vec<TraceStep>,
    /// Places where a rewrite was withheld, e.g. an indicator collapse whose
    /// level ranges disagree.
    pub notes: Vec<String>,
}

#[derive(Serialize)]
struct StepView<'a> {
    rule: &'a str,
    path: &'a [usize],
    before: String,
    after: String,
}

#[derive(Serialize)]
struct TraceView<'a> {
    input: String,
    steps: Vec<StepView<'a>>,
    notes: &'a [String],
}

impl DerivationTrace {
    /// JSON document with rendered subexpressions.
    pub fn to_json(&self) -> serde_json::Value {
        let view = TraceView {
            input: self.input.as_ref().map(Node::to_string).unwrap_or_default(),
            steps: self
                .steps
                .iter()
                .map(|s| StepView {
                    rule: s.rule,
                    path: &s.path,
                    before: s.before.to_string(),
                    after: s.after.to_string(),
                })
                .collect(),
            notes: &self.notes,
        };
        serde_json::to_value(view).expect("trace serializes")
    }
}

/// Re-apply every recorded step to the trace input and return the result.
pub fn replay(trace: &DerivationTrace) -> Result<Node> {
    let mut node = trace
        .input
        .clone()
        .ok_or_else(|| Error::EvalFailure("trace has no input".into()))?;
    for (i, step) in trace.steps.iter().enumerate() {
        let target = node_at_mut(&mut node, &step.path)
            .ok_or_else(|| Error::EvalFailure(format!("step {i}: path {:?} missing", step.path)))?;
        if *target != step.before {
            return Err(Error::EvalFailure(format!(
                "step {i} ({}): expected `{}`, found `{}`",
                step.rule, step.before, target
            )));
        }
        *target = step.after.clone();
    }
    Ok(node)
}

fn node_at_mut<'a>(node: &'a mut Node, path: &[usize]) -> Option<&'a mut Node> {
    match path.split_first() {
        None => Some(node),
        Some((&i, rest)) => node.children_mut().into_iter().nth(i).and_then(|c| node_at_mut(c, rest)),
    }
}

struct Rules<'a> {
    schema: &'a Schema,
    root: Option<&'a Node>,
    notes: BTreeSet<String>,
}

type Fired = Option<(&'static str, Node)>;

impl Rules<'_> {
    fn derive(&mut self, node: &Node) -> Result<Fired> {
        let Node::IfOf(inner) = node else { return Ok(None) };
        let if_of = |n: &Node| Node::IfOf(b(n.clone()));
        Ok(Some(match inner.as_ref() {
            Node::Const(_) | Node::Level(_) => ("constant", Node::Const(0.0)),
            Node::Add(l, r) => ("sum-rule", Node::add(if_of(l), if_of(r))),
            Node::Sub(l, r) => ("sum-rule", Node::sub(if_of(l), if_of(r))),
            Node::Mul(l, r) => (
                "product-rule",
                Node::add(
                    Node::mul(if_of(l), (**r).clone()),
                    Node::mul((**l).clone(), if_of(r)),
                ),
            ),
            Node::Div(l, r) => (
                "quotient-rule",
                Node::sub(
                    Node::div(if_of(l), (**r).clone()),
                    Node::mul(
                        Node::div((**l).clone(), (**r).clone()),
                        Node::div(if_of(r), (**r).clone()),
                    ),
                ),
            ),
            Node::Apply(f, e) => {
                let e = (**e).clone();
                let d = if_of(&e);
                let out = match f {
                    Func::Log => Node::div(d, e),
                    Func::Exp => Node::mul(Node::Apply(Func::Exp, b(e)), d),
                    Func::Sq => Node::mul(Node::mul(Node::Const(2.0), e), d),
                    Func::Inv => Node::mul(Node::Const(-1.0), Node::div(d, Node::mul(e.clone(), e))),
                    Func::Sqrt => Node::div(d, Node::mul(Node::Const(2.0), Node::Apply(Func::Sqrt, b(e)))),
                    Func::Abs => return Err(Error::UnsupportedNode(f.name().into())),
                };
                ("chain-rule", out)
            }
            Node::Sum(v, body) => ("sum-over", Node::Sum(v.clone(), b(if_of(body)))),
            Node::Mass(a) => (
                "mass-building-block",
                Node::sub(Node::Indicator(a.clone()), Node::Mass(a.clone())),
            ),
            Node::CondExp(g, a) if a.is_empty() => (
                "mean-building-block",
                Node::sub(Node::Data(g.clone()), inner.as_ref().clone()),
            ),
            Node::CondExp(g, a) => (
                "conditional-mean-building-block",
                Node::mul(
                    Node::div(Node::Indicator(a.clone()), Node::Mass(a.clone())),
                    Node::sub(Node::Data(g.clone()), inner.as_ref().clone()),
                ),
            ),
            other => {
                return Err(Error::EvalFailure(format!("cannot differentiate `{other}`")));
            }
        }))
    }

    fn simplify(&mut self, node: &Node) -> Fired {
        use Node::*;
        let c = |x: f64| Const(x);
        match node {
            Add(l, r) => match (l.as_ref(), r.as_ref()) {
                (Const(a), Const(b)) => return Some(("fold-constants", c(a + b))),
                (Const(z), x) | (x, Const(z)) if *z == 0.0 => return Some(("drop-zero", x.clone())),
                (x, y) if x == y => return Some(("combine-like-terms", Node::mul(c(2.0), x.clone()))),
                _ => {}
            },
            Sub(l, r) => match (l.as_ref(), r.as_ref()) {
                (Const(a), Const(b)) => return Some(("fold-constants", c(a - b))),
                (x, Const(z)) if *z == 0.0 => return Some(("drop-zero", x.clone())),
                (x, y) if x == y => return Some(("combine-like-terms", c(0.0))),
                _ => {}
            },
            Mul(l, r) => match (l.as_ref(), r.as_ref()) {
                (Const(a), Const(b)) => return Some(("fold-constants", c(a * b))),
                (Const(z), _) | (_, Const(z)) if *z == 0.0 => return Some(("drop-zero", c(0.0))),
                (Const(o), x) | (x, Const(o)) if *o == 1.0 => return Some(("drop-one", x.clone())),
                (Const(a), Mul(inner_l, inner_r)) if matches!(inner_l.as_ref(), Const(_)) => {
                    let Const(b) = inner_l.as_ref() else { unreachable!() };
                    return Some(("fold-constants", Node::mul(c(a * b), (**inner_r).clone())));
                }
                (Div(x, m), n) | (n, Div(x, m)) if m.as_ref() == n && matches!(n, Mass(_)) => {
                    return Some(("cancel-mass", (**x).clone()));
                }
                _ => {}
            },
            Div(l, r) => match (l.as_ref(), r.as_ref()) {
                (Const(a), Const(b)) if *b != 0.0 => return Some(("fold-constants", c(a / b))),
                (Const(z), _) if *z == 0.0 => return Some(("drop-zero", c(0.0))),
                (x, Const(o)) if *o == 1.0 => return Some(("drop-one", x.clone())),
                (x, m @ Mass(_)) if x == m => return Some(("cancel-mass", c(1.0))),
                (Mul(x, y), m @ Mass(_)) if y.as_ref() == m => return Some(("cancel-mass", (**x).clone())),
                (Mul(x, y), m @ Mass(_)) if x.as_ref() == m => return Some(("cancel-mass", (**y).clone())),
                _ => {}
            },
            Apply(f, x) => {
                if let Const(a) = x.as_ref() {
                    let y = f.apply(*a);
                    if y.is_finite() {
                        return Some(("fold-constants", c(y)));
                    }
                }
            }
            Indicator(a) => {
                let kept: Vec<Assign> = a
                    .iter()
                    .filter(|x| !matches!(&x.value, Value::Observed(v) if *v == x.var))
                    .cloned()
                    .collect();
                if kept.len() < a.len() {
                    return Some((
                        "trivial-indicator",
                        if kept.is_empty() { c(1.0) } else { Indicator(kept) },
                    ));
                }
            }
            Sum(v, body) => {
                if let Some(f) = self.simplify_sum(v, body) {
                    return Some(f);
                }
            }
            _ => {}
        }
        if let Some(root) = self.root {
            if node == root && !matches!(node, Const(_)) && node.is_data_free() {
                return Some(("recognize-psi", Psi));
            }
        }
        None
    }

    fn simplify_sum(&mut self, v: &str, body: &Node) -> Fired {
        use Node::*;
        let sum = |n: Node| Sum(v.to_string(), b(n));
        if !body.mentions_bound(v) {
            if let Ok(n) = bound_range(v, body, self.schema) {
                return Some(("sum-of-constant", Node::mul(Const(n as f64), body.clone())));
            }
        }
        match body {
            Add(l, r) => return Some(("split-sum", Node::add(sum((**l).clone()), sum((**r).clone())))),
            Sub(l, r) => return Some(("split-sum", Node::sub(sum((**l).clone()), sum((**r).clone())))),
            _ => {}
        }
        if let Some(out) = self.collapse_indicator(v, body) {
            return Some(("collapse-indicator", out));
        }
        match body {
            Mul(l, r) if !l.mentions_bound(v) => {
                return Some(("pull-out-factor", Node::mul((**l).clone(), sum((**r).clone()))));
            }
            Mul(l, r) if !r.mentions_bound(v) => {
                return Some(("pull-out-factor", Node::mul(sum((**l).clone()), (**r).clone())));
            }
            Div(l, r) if !r.mentions_bound(v) => {
                return Some(("pull-out-factor", Node::div(sum((**l).clone()), (**r).clone())));
            }
            _ => {}
        }
        distribute(body, v).map(|d| ("distribute", sum(d)))
    }

    /// `sum_v f(v) * 1(W=v)` becomes `f(W)` when `v` ranges over `W`'s levels.
    fn collapse_indicator(&mut self, v: &str, body: &Node) -> Option<Node> {
        let mut factors = Vec::new();
        multiplicative_factors(body, &mut factors);
        let var = factors.iter().find_map(|f| match f {
            Node::Indicator(a) => a
                .iter()
                .find(|x| matches!(&x.value, Value::Bound(name) if name == v))
                .map(|x| x.var.clone()),
            _ => None,
        })?;
        let range = bound_range(v, body, self.schema).ok()?;
        let levels = self.schema.levels_of(&var).ok()?;
        if range != levels {
            self.notes.insert(format!(
                "left sum_{v} unsimplified: it ranges over {range} levels but the indicator binds `{var}` with {levels}"
            ));
            return None;
        }
        let mut out = body.clone();
        out.substitute(v, &Value::Observed(var));
        Some(out)
    }
}

fn multiplicative_factors<'a>(n: &'a Node, out: &mut Vec<&'a Node>) {
    match n {
        Node::Mul(l, r) => {
            multiplicative_factors(l, out);
            multiplicative_factors(r, out);
        }
        Node::Div(l, _) => multiplicative_factors(l, out),
        other => out.push(other),
    }
}

fn has_indicator_on(n: &Node, v: &str) -> bool {
    match n {
        Node::Indicator(a) => a.iter().any(|x| matches!(&x.value, Value::Bound(name) if name == v)),
        _ => n.children().into_iter().any(|c| has_indicator_on(c, v)),
    }
}

/// Expand one additive factor holding an indicator on `v` across its product.
fn distribute(n: &Node, v: &str) -> Option<Node> {
    use Node::*;
    let additive = |x: &Node| matches!(x, Add(..) | Sub(..)) && has_indicator_on(x, v);
    let rebuild = |x: &Node, f: &dyn Fn(Node) -> Node| match x {
        Add(p, q) => Node::add(f((**p).clone()), f((**q).clone())),
        Sub(p, q) => Node::sub(f((**p).clone()), f((**q).clone())),
        _ => unreachable!(),
    };
    match n {
        Mul(l, r) if additive(r) => Some(rebuild(r, &|t| Node::mul((**l).clone(), t))),
        Mul(l, r) if additive(l) => Some(rebuild(l, &|t| Node::mul(t, (**r).clone()))),
        Div(l, r) if additive(l) => Some(rebuild(l, &|t| Node::div(t, (**r).clone()))),
        Mul(l, r) => distribute(l, v)
            .map(|d| Node::mul(d, (**r).clone()))
            .or_else(|| distribute(r, v).map(|d| Node::mul((**l).clone(), d))),
        Div(l, r) => distribute(l, v).map(|d| Node::div(d, (**r).clone())),
        _ => None,
    }
}

enum Phase {
    Derive,
    Simplify,
}

fn find_step(
    node: &Node,
    rules: &mut Rules<'_>,
    phase: &Phase,
    path: &mut Vec<usize>,
) -> Result<Option<(Vec<usize>, &'static str, Node)>> {
    let fired = match phase {
        Phase::Derive => rules.derive(node)?,
        Phase::Simplify => rules.simplify(node),
    };
    if let Some((rule, out)) = fired {
        return Ok(Some((path.clone(), rule, out)));
    }
    for (i, c) in node.children().into_iter().enumerate() {
        path.push(i);
        let found = find_step(c, rules, phase, path)?;
        path.pop();
        if found.is_some() {
            return Ok(found);
        }
    }
    Ok(None)
}

fn run(node: &mut Node, rules: &mut Rules<'_>, phase: Phase, trace: &mut DerivationTrace) -> Result<()> {
    for _ in 0..MAX_STEPS {
        let Some((path, rule, after)) = find_step(node, rules, &phase, &mut Vec::new())? else {
            return Ok(());
        };
        let target = node_at_mut(node, &path).expect("path from search");
        let before = std::mem::replace(target, after.clone());
        trace.steps.push(TraceStep {
            rule,
            path,
            before,
            after,
        });
    }
    Err(Error::EvalFailure("rewriting did not terminate".into()))
}

/// Check variables, level literals and bound-variable ranges against `schema`.
pub(crate) fn validate(node: &Node, schema: &Schema) -> Result<()> {
    fn data_vars(g: &DataExpr, schema: &Schema) -> Result<()> {
        match g {
            DataExpr::Num(_) => Ok(()),
            DataExpr::Var(v) => schema.index_of(v).map(|_| ()),
            DataExpr::Add(l, r) | DataExpr::Sub(l, r) | DataExpr::Mul(l, r) | DataExpr::Div(l, r) => {
                data_vars(l, schema)?;
                data_vars(r, schema)
            }
        }
    }
    let assigns: &[Assign] = match node {
        Node::Mass(a) | Node::Indicator(a) => a,
        Node::CondExp(g, a) => {
            data_vars(g, schema)?;
            a
        }
        Node::Data(g) => {
            data_vars(g, schema)?;
            &[]
        }
        Node::Sum(v, body) => {
            bound_range(v, body, schema)?;
            &[]
        }
        _ => &[],
    };
    for a in assigns {
        let levels = schema.levels_of(&a.var)?;
        if let Value::Level(l) = a.value {
            if l >= levels {
                return Err(Error::AtomOutOfRange(vec![l]));
            }
        }
    }
    node.children().into_iter().try_for_each(|c| validate(c, schema))
}

/// Derive and simplify the influence function of `expr` under `schema`.
pub fn derive_if(expr: &FunctionalExpr, schema: &Schema) -> Result<(InfluenceExpr, DerivationTrace)> {
    validate(&expr.0, schema)?;
    let mut node = Node::IfOf(b(expr.0.clone()));
    let mut trace = DerivationTrace {
        input: Some(node.clone()),
        ..Default::default()
    };
    let mut rules = Rules {
        schema,
        root: Some(&expr.0),
        notes: BTreeSet::new(),
    };
    run(&mut node, &mut rules, Phase::Derive, &mut trace)?;
    run(&mut node, &mut rules, Phase::Simplify, &mut trace)?;
    trace.notes = rules.notes.into_iter().collect();
    Ok((
        InfluenceExpr {
            node,
            functional: expr.clone(),
        },
        trace,
    ))
}

/// Apply the simplification rules until none fires.
pub fn simplify(phi: &InfluenceExpr, schema: &Schema) -> Result<(InfluenceExpr, DerivationTrace)> {
    let mut node = phi.node.clone();
    let mut trace = DerivationTrace {
        input: Some(node.clone()),
        ..Default::default()
    };
    let mut rules = Rules {
        schema,
        root: Some(&phi.functional.0),
        notes: BTreeSet::new(),
    };
    run(&mut node, &mut rules, Phase::Simplify, &mut trace)?;
    trace.notes = rules.notes.into_iter().collect();
    Ok((
        InfluenceExpr {
            node,
            functional: phi.functional.clone(),
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dist::DiscreteDist;
    use crate::dsl::{evaluate_if, parse_functional};

    fn schema(vars: &[(&str, usize)]) -> Arc<Schema> {
        Arc::new(Schema::new(vars.iter().map(|&(n, l)| (n, l))).unwrap())
    }

    #[test]
    fn mean_of_y() {
        let s = schema(&[("y", 3)]);
        let e = parse_functional("sum_y { y * p(y=y) }").unwrap();
        let (phi, trace) = derive_if(&e, &s).unwrap();
        assert_eq!(phi.to_string(), "Y - psi");
        assert_eq!(replay(&trace).unwrap(), phi.node);
    }

    #[test]
    fn expected_density() {
        let s = schema(&[("z", 4)]);
        let e = parse_functional("sum_z { p(z=z) * p(z=z) }").unwrap();
        let (phi, _) = derive_if(&e, &s).unwrap();
        assert_eq!(phi.to_string(), "2 * (p(z=Z) - psi)");
    }

    #[test]
    fn ate_collapses_to_weighted_residual() {
        let s = schema(&[("x", 3), ("a", 2), ("y", 2)]);
        let e = parse_functional("sum_x { E[y | x=x, a=1] * p(x=x) }").unwrap();
        let (phi, trace) = derive_if(&e, &s).unwrap();
        assert_eq!(
            phi.to_string(),
            "1(a=1) / p(x=X, a=1) * (Y - E[y | x=X, a=1]) * p(x=X) + (E[y | x=X, a=1] - psi)"
        );
        assert_eq!(replay(&trace).unwrap(), phi.node);
        assert!(trace.steps.iter().any(|s| s.rule == "product-rule"));
        assert!(trace.steps.iter().any(|s| s.rule == "collapse-indicator"));
        assert!(trace.notes.is_empty());
    }

    #[test]
    fn simplify_examples() {
        let s = schema(&[("x", 2), ("a", 2), ("y", 2)]);
        let functional = parse_functional("E[y]").unwrap();
        let mu = |v: Value| Node::CondExp(DataExpr::Var("y".into()), vec![Assign::new("x", v)]);
        let collapse = InfluenceExpr {
            node: Node::Sum(
                "x".into(),
                b(Node::mul(
                    mu(Value::Bound("x".into())),
                    Node::Indicator(vec![Assign::new("x", Value::Bound("x".into()))]),
                )),
            ),
            functional: functional.clone(),
        };
        let (out, _) = simplify(&collapse, &s).unwrap();
        assert_eq!(out.node, mu(Value::Observed("x".into())));

        let folded = InfluenceExpr {
            node: Node::mul(Node::Const(2.0), Node::Const(3.0)),
            functional: functional.clone(),
        };
        assert_eq!(simplify(&folded, &s).unwrap().0.node, Node::Const(6.0));

        let (again, trace) = simplify(&out, &s).unwrap();
        assert_eq!(again, out);
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn mismatched_ranges_are_left_alone_and_noted() {
        let s = schema(&[("x", 2), ("w", 3)]);
        let e = parse_functional("sum_x { p(x=x) * p(w=x) }").unwrap();
        let (phi, trace) = derive_if(&e, &s).unwrap();
        assert!(!trace.notes.is_empty());
        assert!(phi.to_string().contains("sum_x"));
        let p = DiscreteDist::random_positive(s.clone(), &mut ChaCha8Rng::seed_from_u64(1));
        // still a valid influence function where it is defined
        let total: f64 = p.iter().map(|(a, m)| m * evaluate_if(&phi, &p, &a).unwrap()).sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn unsupported_function() {
        let s = schema(&[("y", 2)]);
        let e = parse_functional("abs(E[y] - 0.5)").unwrap();
        assert!(matches!(derive_if(&e, &s), Err(Error::UnsupportedNode(_))));
    }

    #[test]
    fn validation_catches_schema_mismatch() {
        let s = schema(&[("y", 2)]);
        assert!(matches!(
            derive_if(&parse_functional("p(x=0)").unwrap(), &s),
            Err(Error::UnknownVariable(_))
        ));
        assert!(matches!(
            derive_if(&parse_functional("p(y=2)").unwrap(), &s),
            Err(Error::AtomOutOfRange(_))
        ));
    }
}
