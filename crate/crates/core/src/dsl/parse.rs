//! Recursive-descent parser for the functional DSL.
//!
//! ```text
//! expr    := term (('+'|'-') term)*
//! term    := factor (('*'|'/') factor)*
//! factor  := NUMBER | '-' factor | 'p(' assigns ')' | 'E[' data ('|' assigns)? ']'
//!          | 'sum_' VAR '{' expr '}' | FUNC '(' expr ')' | '(' expr ')' | BOUNDVAR
//! assigns := VAR '=' (LEVEL | BOUNDVAR) (',' assigns)?
//! data    := arithmetic over data variables and numbers
//! ```

use super::{b, Assign, DataExpr, Func, FunctionalExpr, Node, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64, String),
    Ident(String),
    Sum(String),
    Sym(char),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let start = i;
        let tok = if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v: f64 = s.parse().map_err(|_| Error::SyntaxError {
                line: tl,
                column: tc,
                message: format!("malformed number `{s}`"),
            })?;
            Tok::Num(v, s)
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            match s.strip_prefix("sum_") {
                Some(v) if !v.is_empty() => Tok::Sum(v.to_string()),
                _ => Tok::Ident(s),
            }
        } else if "+-*/()[]{}|=,".contains(c) {
            i += 1;
            Tok::Sym(c)
        } else {
            return Err(Error::SyntaxError {
                line: tl,
                column: tc,
                message: format!("unexpected character `{c}`"),
            });
        };
        col += i - start;
        out.push(Token {
            tok,
            line: tl,
            column: tc,
        });
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    scope: Vec<String>,
}

/// Parse DSL text into a functional expression.
pub fn parse_functional(text: &str) -> Result<FunctionalExpr> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
        scope: Vec::new(),
    };
    let node = p.expr()?;
    if p.peek() != &Tok::Eof {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(FunctionalExpr(node))
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: &str) -> Error {
        let t = &self.toks[self.pos];
        let found = match &t.tok {
            Tok::Num(_, s) => format!("`{s}`"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Sum(v) => format!("`sum_{v}`"),
            Tok::Sym(c) => format!("`{c}`"),
            Tok::Eof => "end of input".to_string(),
        };
        Error::SyntaxError {
            line: t.line,
            column: t.column,
            message: format!("{message}, found {found}"),
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek() == &Tok::Sym(c) {
            self.next();
            Ok(())
        } else {
            Err(self.error(&format!("expected `{c}`")))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Tok::Sym('+') => {
                    self.next();
                    lhs = Node::Add(b(lhs), b(self.term()?));
                }
                Tok::Sym('-') => {
                    self.next();
                    lhs = Node::Sub(b(lhs), b(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Tok::Sym('*') => {
                    self.next();
                    lhs = Node::Mul(b(lhs), b(self.factor()?));
                }
                Tok::Sym('/') => {
                    self.next();
                    lhs = Node::Div(b(lhs), b(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Node> {
        match self.peek().clone() {
            Tok::Num(v, _) => {
                self.next();
                Ok(Node::Const(v))
            }
            Tok::Sym('-') => {
                self.next();
                if let Tok::Num(v, _) = self.peek().clone() {
                    self.next();
                    Ok(Node::Const(-v))
                } else {
                    Ok(Node::Mul(b(Node::Const(-1.0)), b(self.factor()?)))
                }
            }
            Tok::Sym('(') => {
                self.next();
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Sum(v) => {
                let t = self.next();
                if self.scope.contains(&v) {
                    return Err(Error::RedeclaredBoundVariable {
                        name: v,
                        line: t.line,
                        column: t.column,
                    });
                }
                self.expect('{')?;
                self.scope.push(v.clone());
                let body = self.expr();
                self.scope.pop();
                let body = body?;
                self.expect('}')?;
                Ok(Node::Sum(v, b(body)))
            }
            Tok::Ident(name) => {
                if name == "p" && self.peek_at(1) == &Tok::Sym('(') {
                    self.next();
                    self.next();
                    let a = self.assigns()?;
                    self.expect(')')?;
                    Ok(Node::Mass(a))
                } else if name == "E" && self.peek_at(1) == &Tok::Sym('[') {
                    self.next();
                    self.next();
                    let g = self.data_expr()?;
                    let a = if self.peek() == &Tok::Sym('|') {
                        self.next();
                        self.assigns()?
                    } else {
                        Vec::new()
                    };
                    self.expect(']')?;
                    Ok(Node::CondExp(g, a))
                } else if self.peek_at(1) == &Tok::Sym('(') {
                    let func = Func::from_name(&name)
                        .ok_or_else(|| self.error(&format!("unknown function `{name}`")))?;
                    self.next();
                    self.next();
                    let e = self.expr()?;
                    self.expect(')')?;
                    Ok(Node::Apply(func, b(e)))
                } else {
                    let t = self.next();
                    if self.scope.contains(&name) {
                        Ok(Node::Level(Value::Bound(name)))
                    } else {
                        Err(Error::UnboundVariable {
                            name,
                            line: t.line,
                            column: t.column,
                        })
                    }
                }
            }
            _ => Err(self.error("expected an expression")),
        }
    }

    fn assigns(&mut self) -> Result<Vec<Assign>> {
        let mut out: Vec<Assign> = Vec::new();
        loop {
            let var = match self.peek().clone() {
                Tok::Ident(v) => v,
                _ => return Err(self.error("expected a variable name")),
            };
            if out.iter().any(|a| a.var == var) {
                return Err(self.error(&format!("variable `{var}` assigned twice")));
            }
            self.next();
            self.expect('=')?;
            let value = match self.peek().clone() {
                Tok::Num(v, s) => {
                    if v.fract() != 0.0 || v < 0.0 || s.contains(['.', 'e', 'E']) {
                        return Err(self.error("level must be a non-negative integer"));
                    }
                    self.next();
                    Value::Level(v as usize)
                }
                Tok::Ident(name) => {
                    let t = self.next();
                    if !self.scope.contains(&name) {
                        return Err(Error::UnboundVariable {
                            name,
                            line: t.line,
                            column: t.column,
                        });
                    }
                    Value::Bound(name)
                }
                _ => return Err(self.error("expected a level or bound variable")),
            };
            out.push(Assign { var, value });
            if self.peek() == &Tok::Sym(',') {
                self.next();
            } else {
                return Ok(out);
            }
        }
    }

    fn data_expr(&mut self) -> Result<DataExpr> {
        let mut lhs = self.data_term()?;
        loop {
            match self.peek() {
                Tok::Sym('+') => {
                    self.next();
                    lhs = DataExpr::Add(Box::new(lhs), Box::new(self.data_term()?));
                }
                Tok::Sym('-') => {
                    self.next();
                    lhs = DataExpr::Sub(Box::new(lhs), Box::new(self.data_term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn data_term(&mut self) -> Result<DataExpr> {
        let mut lhs = self.data_factor()?;
        loop {
            match self.peek() {
                Tok::Sym('*') => {
                    self.next();
                    lhs = DataExpr::Mul(Box::new(lhs), Box::new(self.data_factor()?));
                }
                Tok::Sym('/') => {
                    self.next();
                    lhs = DataExpr::Div(Box::new(lhs), Box::new(self.data_factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn data_factor(&mut self) -> Result<DataExpr> {
        match self.peek().clone() {
            Tok::Num(v, _) => {
                self.next();
                Ok(DataExpr::Num(v))
            }
            Tok::Sym('-') => {
                self.next();
                Ok(DataExpr::Sub(
                    Box::new(DataExpr::Num(0.0)),
                    Box::new(self.data_factor()?),
                ))
            }
            Tok::Ident(v) => {
                self.next();
                Ok(DataExpr::Var(v))
            }
            Tok::Sym('(') => {
                self.next();
                let e = self.data_expr()?;
                self.expect(')')?;
                Ok(e)
            }
            _ => Err(self.error("expected a data expression")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_ate_expression() {
        let e = parse_functional("sum_x { E[y | x=x, a=1] * p(x=x) }").unwrap();
        let Node::Sum(v, body) = &e.0 else { panic!("{e:?}") };
        assert_eq!(v, "x");
        let Node::Mul(l, r) = body.as_ref() else { panic!() };
        assert_eq!(
            **l,
            Node::CondExp(
                DataExpr::Var("y".into()),
                vec![
                    Assign::new("x", Value::Bound("x".into())),
                    Assign::new("a", Value::Level(1))
                ]
            )
        );
        assert_eq!(**r, Node::Mass(vec![Assign::new("x", Value::Bound("x".into()))]));
    }

    #[test]
    fn parses_expected_density() {
        let e = parse_functional("sum_z { p(z=z) * p(z=z) }").unwrap();
        let mass = Node::Mass(vec![Assign::new("z", Value::Bound("z".into()))]);
        assert_eq!(e.0, Node::Sum("z".into(), b(Node::mul(mass.clone(), mass))));
    }

    #[test]
    fn missing_bracket_is_a_syntax_error() {
        match parse_functional("sum_x { E[y | x=x") {
            Err(Error::SyntaxError { line, column, message }) => {
                assert_eq!((line, column), (1, 18));
                assert!(message.contains("end of input"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reports_line_and_column() {
        match parse_functional("sum_x {\n  p(x=x) * $ }") {
            Err(Error::SyntaxError { line, column, .. }) => assert_eq!((line, column), (2, 12)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scope_errors() {
        assert!(matches!(
            parse_functional("p(x=x)"),
            Err(Error::UnboundVariable { ref name, .. }) if name == "x"
        ));
        assert!(matches!(
            parse_functional("sum_x { sum_x { p(x=x) } }"),
            Err(Error::RedeclaredBoundVariable { .. })
        ));
        assert!(matches!(parse_functional("sum_x { p(x=x) } + x"), Err(Error::UnboundVariable { .. })));
        assert!(matches!(parse_functional("p(x=1.5)"), Err(Error::SyntaxError { .. })));
        assert!(matches!(parse_functional("p(x=1, x=0)"), Err(Error::SyntaxError { .. })));
        assert!(matches!(parse_functional("foo(p(x=1))"), Err(Error::SyntaxError { .. })));
    }

    #[test]
    fn bound_value_and_functions() {
        let e = parse_functional("sum_y { y * p(y=y) }").unwrap();
        assert!(matches!(&e.0, Node::Sum(_, body) if matches!(body.as_ref(), Node::Mul(l, _) if **l == Node::Level(Value::Bound("y".into())))));
        let e = parse_functional("log(E[y]) + -2 * sq(p(a=1))").unwrap();
        assert_eq!(e.to_string(), "log(E[y]) + (-2) * sq(p(a=1))");
    }
}
