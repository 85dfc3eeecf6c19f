//! A small complex-valued expression language for coefficient functions.
//!
//! Grammar (highest precedence first):
//!
//! ```text
//! primary := number | "i" | "pi" | "x" | "xi" | ident | func "(" expr ")" | "(" expr ")"
//! power   := primary ("^" unary)?          right associative
//! unary   := "-" unary | power
//! term    := unary (("*" | "/") unary)*
//! expr    := term (("+" | "-") term)*
//! ```
//!
//! Identifiers other than the reserved names are parameters; they are bound
//! to real values at evaluation time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

/// Parameter environment: name to real value.
pub type Params = BTreeMap<String, f64>;

const FUNCTIONS: [&str; 6] = ["sin", "cos", "exp", "sqrt", "tanh", "sech"];
const RESERVED: [&str; 4] = ["i", "pi", "x", "xi"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Tanh,
    Sech,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            "sech" => Func::Sech,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
            Func::Sech => "sech",
        }
    }

    fn apply(self, z: C64) -> C64 {
        match self {
            Func::Sin => z.sin(),
            Func::Cos => z.cos(),
            Func::Exp => z.exp(),
            Func::Sqrt => z.sqrt(),
            Func::Tanh => z.tanh(),
            Func::Sech => C64::new(1.0, 0.0) / z.cosh(),
        }
    }
}

/// Expression tree. Literals are non-negative; negation is explicit.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Imag,
    Pi,
    X,
    Xi,
    Param(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("coeffexpr::parse: syntax error at byte {offset}: found {found}, expected one of {expected:?}")]
    Syntax {
        offset: usize,
        found: String,
        expected: Vec<String>,
    },
    #[error("coeffexpr::parse: unknown identifier `{name}` at byte {offset}; allowed names: {allowed:?}")]
    UnknownIdentifier {
        name: String,
        offset: usize,
        allowed: Vec<String>,
    },
    #[error("coeffexpr::eval: division by zero in `{0}`")]
    DivisionByZero(String),
    #[error("coeffexpr::eval: non-integer power of negative real base in `{0}`")]
    NegativeBasePower(String),
    #[error("coeffexpr::eval: unbound parameter `{0}`")]
    Unbound(String),
    #[error("coeffexpr::eval_grid: at grid index ({a}, {b}): {source}")]
    Grid {
        a: usize,
        b: usize,
        #[source]
        source: Box<ExprError>,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn syntax(offset: usize, found: &Tok, expected: &[&str]) -> ExprError {
    ExprError::Syntax {
        offset,
        found: found.describe(),
        expected: expected.iter().map(|s| s.to_string()).collect(),
    }
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut k = 0;
    while k < bytes.len() {
        let c = bytes[k] as char;
        if c.is_ascii_whitespace() {
            k += 1;
            continue;
        }
        let start = k;
        if c.is_ascii_digit() || c == '.' {
            while k < bytes.len() && (bytes[k].is_ascii_digit() || bytes[k] == b'.') {
                k += 1;
            }
            if k < bytes.len() && (bytes[k] == b'e' || bytes[k] == b'E') {
                let mut j = k + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    k = j;
                }
            }
            let text = &src[start..k];
            let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                offset: start,
                found: format!("malformed number `{text}`"),
                expected: vec!["number".into()],
            })?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            while k < bytes.len() && (bytes[k].is_ascii_alphanumeric() || bytes[k] == b'_') {
                k += 1;
            }
            out.push((start, Tok::Ident(src[start..k].to_string())));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                _ => {
                    let ch = src[start..].chars().next().unwrap_or(c);
                    return Err(ExprError::Syntax {
                        offset: start,
                        found: format!("character `{ch}`"),
                        expected: vec![
                            "number".into(),
                            "identifier".into(),
                            "operator".into(),
                            "`(`".into(),
                            "`)`".into(),
                        ],
                    });
                }
            };
            out.push((start, tok));
            k += c.len_utf8();
        }
    }
    out.push((src.len(), Tok::End));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    declared: Option<&'a BTreeSet<String>>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn bump(&mut self) -> (usize, Tok) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if let Tok::Op('-') = self.peek() {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if let Tok::Op('^') = self.peek() {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let (offset, tok) = self.bump();
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Tok::Ident(name) => self.identifier(name, offset),
            other => Err(syntax(offset, &other, &["number", "identifier", "`(`", "`-`"])),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ExprError> {
        let (offset, tok) = self.bump();
        match tok {
            Tok::RParen => Ok(()),
            other => Err(syntax(offset, &other, &["`)`", "operator"])),
        }
    }

    fn identifier(&mut self, name: String, offset: usize) -> Result<Expr, ExprError> {
        match name.as_str() {
            "i" => return Ok(Expr::Imag),
            "pi" => return Ok(Expr::Pi),
            "x" => return Ok(Expr::X),
            "xi" => return Ok(Expr::Xi),
            _ => {}
        }
        if let Some(f) = Func::from_name(&name) {
            let (off, tok) = self.bump();
            if tok != Tok::LParen {
                return Err(syntax(off, &tok, &["`(`"]));
            }
            let arg = self.expr()?;
            self.expect_rparen()?;
            return Ok(Expr::Call(f, Box::new(arg)));
        }
        if *self.peek() == Tok::LParen {
            return Err(ExprError::UnknownIdentifier {
                name,
                offset,
                allowed: FUNCTIONS.iter().map(|s| s.to_string()).collect(),
            });
        }
        if let Some(declared) = self.declared {
            if !declared.contains(&name) {
                let mut allowed: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
                allowed.extend(declared.iter().cloned());
                return Err(ExprError::UnknownIdentifier {
                    name,
                    offset,
                    allowed,
                });
            }
        }
        Ok(Expr::Param(name))
    }
}

fn parse_impl(src: &str, declared: Option<&BTreeSet<String>>) -> Result<Expr, ExprError> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        declared,
    };
    if *p.peek() == Tok::End {
        return Err(syntax(0, &Tok::End, &["expression"]));
    }
    let e = p.expr()?;
    let (offset, tok) = p.bump();
    if tok != Tok::End {
        return Err(syntax(offset, &tok, &["operator", "end of input"]));
    }
    Ok(e)
}

/// Parses `src`, treating any non-reserved identifier as a parameter.
pub fn parse(src: &str) -> Result<Expr, ExprError> {
    parse_impl(src, None)
}

/// Parses `src`, rejecting identifiers that are neither reserved nor in `params`.
pub fn parse_with_params(src: &str, params: &BTreeSet<String>) -> Result<Expr, ExprError> {
    parse_impl(src, Some(params))
}

/// Evaluation point: tangential coordinate, transverse coordinate and parameters.
#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub x: f64,
    pub xi: f64,
    pub params: &'a Params,
}

impl Expr {
    pub fn eval(&self, env: &Env<'_>) -> Result<C64, ExprError> {
        Ok(match self {
            Expr::Num(v) => C64::new(*v, 0.0),
            Expr::Imag => C64::new(0.0, 1.0),
            Expr::Pi => C64::new(std::f64::consts::PI, 0.0),
            Expr::X => C64::new(env.x, 0.0),
            Expr::Xi => C64::new(env.xi, 0.0),
            Expr::Param(name) => match env.params.get(name) {
                Some(v) => C64::new(*v, 0.0),
                None => return Err(ExprError::Unbound(name.clone())),
            },
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Call(f, a) => f.apply(a.eval(env)?),
            Expr::Bin(op, a, b) => {
                let u = a.eval(env)?;
                let v = b.eval(env)?;
                match op {
                    BinOp::Add => u + v,
                    BinOp::Sub => u - v,
                    BinOp::Mul => u * v,
                    BinOp::Div => {
                        if v == C64::new(0.0, 0.0) {
                            return Err(ExprError::DivisionByZero(self.to_string()));
                        }
                        u / v
                    }
                    BinOp::Pow => power(u, v).ok_or_else(|| ExprError::NegativeBasePower(self.to_string()))?,
                }
            }
        })
    }

    /// Evaluates on the tensor grid `xs × xis`; entry `(a, b)` is the value at `(xs[a], xis[b])`.
    pub fn eval_grid(&self, xs: &[f64], xis: &[f64], params: &Params) -> Result<DMatrix<C64>, ExprError> {
        let mut out = DMatrix::zeros(xs.len(), xis.len());
        for (a, &x) in xs.iter().enumerate() {
            for (b, &xi) in xis.iter().enumerate() {
                let env = Env { x, xi, params };
                out[(a, b)] = self.eval(&env).map_err(|e| ExprError::Grid {
                    a,
                    b,
                    source: Box::new(e),
                })?;
            }
        }
        Ok(out)
    }

    /// True if the tree references the transverse variable.
    pub fn uses_xi(&self) -> bool {
        match self {
            Expr::Xi => true,
            Expr::Neg(a) | Expr::Call(_, a) => a.uses_xi(),
            Expr::Bin(_, a, b) => a.uses_xi() || b.uses_xi(),
            _ => false,
        }
    }

    /// Names of all parameters referenced by the tree.
    pub fn params(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_params(&mut out);
        out
    }

    fn collect_params(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Param(n) => {
                out.insert(n.clone());
            }
            Expr::Neg(a) | Expr::Call(_, a) => a.collect_params(out),
            Expr::Bin(_, a, b) => {
                a.collect_params(out);
                b.collect_params(out);
            }
            _ => {}
        }
    }
}

fn power(base: C64, exp: C64) -> Option<C64> {
    if exp.im == 0.0 && exp.re.fract() == 0.0 && exp.re.abs() <= i32::MAX as f64 {
        let n = exp.re as i32;
        if base == C64::new(0.0, 0.0) && n < 0 {
            return None;
        }
        return Some(base.powi(n));
    }
    if base.im == 0.0 && exp.im == 0.0 {
        if base.re < 0.0 {
            return None;
        }
        return Some(C64::new(base.re.powf(exp.re), 0.0));
    }
    if base.im == 0.0 && base.re < 0.0 {
        return None;
    }
    Some(base.powc(exp))
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Imag => f.write_str("i"),
            Expr::Pi => f.write_str("pi"),
            Expr::X => f.write_str("x"),
            Expr::Xi => f.write_str("xi"),
            Expr::Param(n) => f.write_str(n),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(src: &str, x: f64, xi: f64) -> C64 {
        let p = Params::new();
        parse(src).unwrap().eval(&Env { x, xi, params: &p }).unwrap()
    }

    #[test]
    fn literal_parses() {
        assert_eq!(parse("1").unwrap(), Expr::Num(1.0));
    }

    #[test]
    fn grammar_structure() {
        let e = parse("2*cos(pi*xi)").unwrap();
        let want = Expr::Bin(
            BinOp::Mul,
            Box::new(Expr::Num(2.0)),
            Box::new(Expr::Call(
                Func::Cos,
                Box::new(Expr::Bin(BinOp::Mul, Box::new(Expr::Pi), Box::new(Expr::Xi))),
            )),
        );
        assert_eq!(e, want);
        let declared: BTreeSet<String> = ["alpha0".to_string()].into();
        let e = parse_with_params("i*alpha0*xi", &declared).unwrap();
        match e {
            Expr::Bin(BinOp::Mul, l, _) => match *l {
                Expr::Bin(BinOp::Mul, ll, _) => assert_eq!(*ll, Expr::Imag),
                other => panic!("unexpected {other:?}"),
            },
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("2^3^2", 0.0, 0.0), C64::new(512.0, 0.0));
        assert_eq!(ev("-2^2", 0.0, 0.0), C64::new(-4.0, 0.0));
        assert_eq!(ev("8/4/2", 0.0, 0.0), C64::new(1.0, 0.0));
        assert_eq!(ev("1-2-3", 0.0, 0.0), C64::new(-4.0, 0.0));
        assert_eq!(ev("2^-1", 0.0, 0.0), C64::new(0.5, 0.0));
        assert_eq!(ev("1+2*3", 0.0, 0.0), C64::new(7.0, 0.0));
    }

    #[test]
    fn evaluation_examples() {
        assert_eq!(ev("2*cos(pi*xi)", 0.0, 0.0), C64::new(2.0, 0.0));
        assert_eq!(ev("i*xi", 0.0, 0.25), C64::new(0.0, 0.25));
        assert_eq!(ev("sech(x)^2", 0.0, 0.0), C64::new(1.0, 0.0));
        let v = ev("sech(x)", 1.3, 0.0);
        assert!((v.re - 1.0 / 1.3f64.cosh()).abs() < 1e-15);
        assert_eq!(ev("1.5e-1 + 2E1", 0.0, 0.0), C64::new(20.15, 0.0));
    }

    #[test]
    fn syntax_errors_carry_offset() {
        match parse("1 + * 2") {
            Err(ExprError::Syntax { offset, expected, .. }) => {
                assert_eq!(offset, 4);
                assert!(expected.iter().any(|s| s == "number"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("(1 + 2"), Err(ExprError::Syntax { offset: 6, .. })));
        assert!(matches!(parse(""), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse("1 $ 2"), Err(ExprError::Syntax { offset: 2, .. })));
    }

    #[test]
    fn unknown_identifiers() {
        match parse("foo(1)") {
            Err(ExprError::UnknownIdentifier { name, allowed, .. }) => {
                assert_eq!(name, "foo");
                assert!(allowed.contains(&"sech".to_string()));
            }
            other => panic!("{other:?}"),
        }
        let declared: BTreeSet<String> = ["c12".to_string()].into();
        match parse_with_params("c13*xi", &declared) {
            Err(ExprError::UnknownIdentifier { name, allowed, offset }) => {
                assert_eq!(name, "c13");
                assert_eq!(offset, 0);
                assert!(allowed.contains(&"c12".to_string()));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn evaluation_errors() {
        let p = Params::new();
        let env = Env { x: 0.0, xi: 0.0, params: &p };
        assert!(matches!(parse("1/xi").unwrap().eval(&env), Err(ExprError::DivisionByZero(s)) if s.contains("xi")));
        assert!(matches!(parse("(-2)^0.5").unwrap().eval(&env), Err(ExprError::NegativeBasePower(_))));
        assert!(matches!(parse("a0").unwrap().eval(&env), Err(ExprError::Unbound(n)) if n == "a0"));
        assert_eq!(parse("(-2)^3").unwrap().eval(&env).unwrap(), C64::new(-8.0, 0.0));
    }

    #[test]
    fn grid_examples() {
        let p = Params::new();
        let g = parse("xi").unwrap().eval_grid(&[0.0], &[-0.5, 0.0, 0.5], &p).unwrap();
        assert_eq!(g.shape(), (1, 3));
        assert_eq!(g[(0, 0)].re, -0.5);
        assert_eq!(g[(0, 2)].re, 0.5);
        let g = parse("x").unwrap().eval_grid(&[1.0, 2.0], &[0.0], &p).unwrap();
        assert_eq!((g[(0, 0)].re, g[(1, 0)].re), (1.0, 2.0));
        let g = parse("x*xi").unwrap().eval_grid(&[2.0], &[0.5], &p).unwrap();
        assert_eq!(g[(0, 0)], C64::new(1.0, 0.0));
        let err = parse("1/x").unwrap().eval_grid(&[1.0, 0.0], &[0.0, 0.1], &p).unwrap_err();
        assert!(matches!(err, ExprError::Grid { a: 1, b: 0, .. }));
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..10.0).prop_map(Expr::Num),
            Just(Expr::Imag),
            Just(Expr::Pi),
            Just(Expr::X),
            Just(Expr::Xi),
            Just(Expr::Param("k".into())),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone(), 0usize..4).prop_map(|(a, b, k)| {
                    let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][k];
                    Expr::Bin(op, Box::new(a), Box::new(b))
                }),
                (inner.clone(), 0u8..4).prop_map(|(a, n)| Expr::Bin(
                    BinOp::Pow,
                    Box::new(a),
                    Box::new(Expr::Num(n as f64))
                )),
                (inner, 0usize..6).prop_map(|(a, k)| {
                    let f = [Func::Sin, Func::Cos, Func::Exp, Func::Sqrt, Func::Tanh, Func::Sech][k];
                    Expr::Call(f, Box::new(a))
                }),
            ]
        })
    }

    fn same(a: &Result<C64, ExprError>, b: &Result<C64, ExprError>) -> bool {
        match (a, b) {
            (Ok(u), Ok(v)) => u.re.to_bits() == v.re.to_bits() && u.im.to_bits() == v.im.to_bits(),
            (Err(_), Err(_)) => true,
            _ => false,
        }
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr(), x in -3.0f64..3.0, xi in -0.5f64..0.5) {
            let printed = e.to_string();
            let back = parse(&printed).unwrap();
            prop_assert_eq!(&back, &e);
            let mut p = Params::new();
            p.insert("k".into(), 0.7);
            let env = Env { x, xi, params: &p };
            prop_assert!(same(&back.eval(&env), &e.eval(&env)));
        }

        #[test]
        fn grid_matches_pointwise(e in arb_expr()) {
            let mut p = Params::new();
            p.insert("k".into(), -1.25);
            let xs = [-1.0, 0.3, 2.0];
            let xis = [-0.5, 0.1, 0.5];
            if let Ok(g) = e.eval_grid(&xs, &xis, &p) {
                for (a, &x) in xs.iter().enumerate() {
                    for (b, &xi) in xis.iter().enumerate() {
                        let v = e.eval(&Env { x, xi, params: &p }).unwrap();
                        prop_assert!(same(&Ok(g[(a, b)]), &Ok(v)));
                    }
                }
            }
        }
    }
}
