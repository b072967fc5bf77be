//! A small text DSL for functionals of discrete distributions, with symbolic
//! influence-function derivation.
//!
//! ```text
//! sum_x { E[y | x=x, a=1] * p(x=x) }
//! ```
//!
//! Both functionals and their influence functions share one node type. A
//! [`FunctionalExpr`] never mentions the observation; an [`InfluenceExpr`] may
//! refer to observed components (rendered in upper case, e.g. `X`), to
//! indicators `1(a=1)`, and to the functional value `psi`.

mod check;
mod eval;
mod parse;
mod rewrite;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use check::{check_if, check_influence, oracle_step, CheckReport, CheckRow};
pub use eval::{evaluate_functional, evaluate_if};
pub use parse::parse_functional;
pub use rewrite::{derive_if, replay, simplify, DerivationTrace, TraceStep};

/// Right-hand side of an assignment such as `x=1`, `x=x` or (after indicator
/// collapse) `x=X`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Level(usize),
    Bound(String),
    Observed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assign {
    pub var: String,
    pub value: Value,
}

impl Assign {
    pub fn new(var: impl Into<String>, value: Value) -> Self {
        Assign {
            var: var.into(),
            value,
        }
    }
}

/// Arithmetic over data variables, the `g(Z)` inside `E[g(Z) | ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataExpr {
    Num(f64),
    Var(String),
    Add(Box<DataExpr>, Box<DataExpr>),
    Sub(Box<DataExpr>, Box<DataExpr>),
    Mul(Box<DataExpr>, Box<DataExpr>),
    Div(Box<DataExpr>, Box<DataExpr>),
}

/// Scalar functions the parser knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Func {
    Log,
    Exp,
    Sq,
    Inv,
    Sqrt,
    /// Parses and evaluates, but has no registered derivative.
    Abs,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Log => "log",
            Func::Exp => "exp",
            Func::Sq => "sq",
            Func::Inv => "inv",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "log" => Func::Log,
            "exp" => Func::Exp,
            "sq" => Func::Sq,
            "inv" => Func::Inv,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Func::Log => x.ln(),
            Func::Exp => x.exp(),
            Func::Sq => x * x,
            Func::Inv => 1.0 / x,
            Func::Sqrt => x.sqrt(),
            Func::Abs => x.abs(),
        }
    }
}

/// Expression node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Const(f64),
    /// Numeric value of a level (literal, bound variable, or observed component).
    Level(Value),
    /// `p(v)`: marginal mass of a partial assignment.
    Mass(Vec<Assign>),
    /// `E[g | v]`; an empty assignment is an unconditional mean.
    CondExp(DataExpr, Vec<Assign>),
    Sum(String, Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Apply(Func, Box<Node>),
    /// `g(Z)` at the observation.
    Data(DataExpr),
    /// `1(v)` at the observation.
    Indicator(Vec<Assign>),
    /// The functional value being differentiated.
    Psi,
    /// Unexpanded influence-function operator.
    IfOf(Box<Node>),
}

/// A parsed functional `psi(P)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionalExpr(pub Node);

/// A derived influence function `phi(z; P)`, together with the functional
/// that `psi` refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceExpr {
    pub node: Node,
    pub functional: FunctionalExpr,
}

impl fmt::Display for FunctionalExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for InfluenceExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.node.fmt(f)
    }
}

pub(crate) fn b(n: Node) -> Box<Node> {
    Box::new(n)
}

impl Node {
    pub fn add(l: Node, r: Node) -> Node {
        Node::Add(b(l), b(r))
    }
    pub fn sub(l: Node, r: Node) -> Node {
        Node::Sub(b(l), b(r))
    }
    pub fn mul(l: Node, r: Node) -> Node {
        Node::Mul(b(l), b(r))
    }
    pub fn div(l: Node, r: Node) -> Node {
        Node::Div(b(l), b(r))
    }

    /// Immediate children, left to right.
    pub fn children(&self) -> Vec<&Node> {
        match self {
            Node::Sum(_, x) | Node::Apply(_, x) | Node::IfOf(x) => vec![x],
            Node::Add(l, r) | Node::Sub(l, r) | Node::Mul(l, r) | Node::Div(l, r) => vec![l, r],
            _ => vec![],
        }
    }

    pub(crate) fn children_mut(&mut self) -> Vec<&mut Node> {
        match self {
            Node::Sum(_, x) | Node::Apply(_, x) | Node::IfOf(x) => vec![x],
            Node::Add(l, r) | Node::Sub(l, r) | Node::Mul(l, r) | Node::Div(l, r) => vec![l, r],
            _ => vec![],
        }
    }

    fn assigns(&self) -> &[Assign] {
        match self {
            Node::Mass(a) | Node::CondExp(_, a) | Node::Indicator(a) => a,
            _ => &[],
        }
    }

    fn any(&self, pred: &dyn Fn(&Node) -> bool) -> bool {
        pred(self) || self.children().into_iter().any(|c| c.any(pred))
    }

    /// True when the node does not depend on the observation.
    pub fn is_data_free(&self) -> bool {
        !self.any(&|n| {
            matches!(n, Node::Data(_) | Node::Indicator(_))
                || matches!(n, Node::Level(Value::Observed(_)))
                || n.assigns().iter().any(|a| matches!(a.value, Value::Observed(_)))
        })
    }

    /// True when the bound variable `v` occurs anywhere below.
    pub fn mentions_bound(&self, v: &str) -> bool {
        let is_v = |val: &Value| matches!(val, Value::Bound(name) if name == v);
        self.any(&|n| match n {
            Node::Level(val) => is_v(val),
            Node::Sum(name, _) => name == v,
            _ => n.assigns().iter().any(|a| is_v(&a.value)),
        })
    }

    pub fn contains_if_operator(&self) -> bool {
        self.any(&|n| matches!(n, Node::IfOf(_)))
    }

    pub fn contains_psi(&self) -> bool {
        self.any(&|n| matches!(n, Node::Psi))
    }

    /// Replace every `Bound(v)` by `value`.
    pub(crate) fn substitute(&mut self, v: &str, value: &Value) {
        let fix = |val: &mut Value| {
            if matches!(val, Value::Bound(name) if name == v) {
                *val = value.clone();
            }
        };
        match self {
            Node::Level(val) => fix(val),
            Node::Mass(a) | Node::CondExp(_, a) | Node::Indicator(a) => {
                a.iter_mut().for_each(|x| fix(&mut x.value))
            }
            _ => {}
        }
        for c in self.children_mut() {
            c.substitute(v, value);
        }
    }

    pub fn size(&self) -> usize {
        1 + self.children().into_iter().map(Node::size).sum::<usize>()
    }
}

fn observed_name(var: &str) -> String {
    var.to_uppercase()
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Level(l) => write!(f, "{l}"),
            Value::Bound(v) => write!(f, "{v}"),
            Value::Observed(v) => write!(f, "{}", observed_name(v)),
        }
    }
}

fn write_assigns(f: &mut fmt::Formatter<'_>, assigns: &[Assign]) -> fmt::Result {
    for (i, a) in assigns.iter().enumerate() {
        if i > 0 {
            write!(f, ", ")?;
        }
        write!(f, "{}={}", a.var, a.value)?;
    }
    Ok(())
}

fn fmt_num(f: &mut fmt::Formatter<'_>, x: f64) -> fmt::Result {
    if x == x.trunc() && x.abs() < 1e15 {
        write!(f, "{}", x as i64)
    } else {
        write!(f, "{x}")
    }
}

impl DataExpr {
    fn prec(&self) -> u8 {
        match self {
            DataExpr::Add(..) | DataExpr::Sub(..) => 1,
            DataExpr::Mul(..) | DataExpr::Div(..) => 2,
            _ => 3,
        }
    }

    fn fmt_in(&self, f: &mut fmt::Formatter<'_>, observed: bool) -> fmt::Result {
        let child = |f: &mut fmt::Formatter<'_>, c: &DataExpr, min: u8| {
            if c.prec() < min {
                write!(f, "(")?;
                c.fmt_in(f, observed)?;
                write!(f, ")")
            } else {
                c.fmt_in(f, observed)
            }
        };
        let bin = |f: &mut fmt::Formatter<'_>, l: &DataExpr, op: &str, r: &DataExpr, p: u8| {
            child(f, l, p)?;
            write!(f, " {op} ")?;
            child(f, r, p + 1)
        };
        match self {
            DataExpr::Num(x) => fmt_num(f, *x),
            DataExpr::Var(v) if observed => write!(f, "{}", observed_name(v)),
            DataExpr::Var(v) => write!(f, "{v}"),
            DataExpr::Add(l, r) => bin(f, l, "+", r, 1),
            DataExpr::Sub(l, r) => bin(f, l, "-", r, 1),
            DataExpr::Mul(l, r) => bin(f, l, "*", r, 2),
            DataExpr::Div(l, r) => bin(f, l, "/", r, 2),
        }
    }
}

impl fmt::Display for DataExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_in(f, false)
    }
}

impl Node {
    fn prec(&self) -> u8 {
        match self {
            Node::Add(..) | Node::Sub(..) => 1,
            Node::Mul(..) | Node::Div(..) => 2,
            Node::Const(x) if *x < 0.0 => 1,
            Node::Data(d) if d.prec() < 3 => 1,
            _ => 3,
        }
    }

    fn fmt_child(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        if self.prec() < min {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Const(x) => fmt_num(f, *x),
            Node::Level(v) => write!(f, "{v}"),
            Node::Mass(a) => {
                write!(f, "p(")?;
                write_assigns(f, a)?;
                write!(f, ")")
            }
            Node::CondExp(g, a) => {
                write!(f, "E[{g}")?;
                if !a.is_empty() {
                    write!(f, " | ")?;
                    write_assigns(f, a)?;
                }
                write!(f, "]")
            }
            Node::Sum(v, body) => write!(f, "sum_{v} {{ {body} }}"),
            Node::Add(l, r) => {
                l.fmt_child(f, 1)?;
                write!(f, " + ")?;
                r.fmt_child(f, 2)
            }
            Node::Sub(l, r) => {
                l.fmt_child(f, 1)?;
                write!(f, " - ")?;
                r.fmt_child(f, 2)
            }
            Node::Mul(l, r) => {
                l.fmt_child(f, 2)?;
                write!(f, " * ")?;
                r.fmt_child(f, 3)
            }
            Node::Div(l, r) => {
                l.fmt_child(f, 2)?;
                write!(f, " / ")?;
                r.fmt_child(f, 3)
            }
            Node::Apply(func, x) => write!(f, "{}({x})", func.name()),
            Node::Data(g) => g.fmt_in(f, true),
            Node::Indicator(a) => {
                write!(f, "1(")?;
                write_assigns(f, a)?;
                write!(f, ")")
            }
            Node::Psi => write!(f, "psi"),
            Node::IfOf(x) => write!(f, "IF[{x}]"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_round_trips_through_parser() {
        for text in [
            "sum_x { E[y | x=x, a=1] * p(x=x) }",
            "sum_z { p(z=z) * p(z=z) }",
            "sum_x { (E[a * y | x=x] - E[a | x=x] * E[y | x=x]) * p(x=x) }",
            "log(E[y]) - 2 / (1 + p(a=1))",
        ] {
            let e = parse_functional(text).unwrap();
            assert_eq!(e.to_string(), text);
            assert_eq!(parse_functional(&e.to_string()).unwrap(), e);
        }
    }

    #[test]
    fn observed_values_render_upper_case() {
        let n = Node::mul(
            Node::Indicator(vec![Assign::new("a", Value::Level(1))]),
            Node::CondExp(
                DataExpr::Var("y".into()),
                vec![Assign::new("x", Value::Observed("x".into()))],
            ),
        );
        assert_eq!(n.to_string(), "1(a=1) * E[y | x=X]");
        assert!(!n.is_data_free());
        assert_eq!(Node::sub(Node::Data(DataExpr::Var("y".into())), Node::Psi).to_string(), "Y - psi");
    }
}
