//! A tiny arithmetic-expression language for level-set functions.
//!
//! Grammar (usual precedence, `^` binds tighter than unary minus and is
//! right-associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | 'pi' | 'x1' | 'x2' | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Expressions are evaluated with forward-mode dual numbers so the gradient
//! is exact wherever the expression is differentiable.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: [f64; 2],
}

impl Dual {
    fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; 2] }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Dual {
            v,
            d: [self.d[0] * dv, self.d[1] * dv],
        }
    }

    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1]],
        }
    }

    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1]],
        }
    }

    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: [self.d[0] * o.v + self.v * o.d[0], self.d[1] * o.v + self.v * o.d[1]],
        }
    }

    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual {
            v: self.v * inv,
            d: [
                (self.d[0] - self.v * inv * o.d[0]) * inv,
                (self.d[1] - self.v * inv * o.d[1]) * inv,
            ],
        }
    }

    fn powd(self, o: Dual) -> Dual {
        if o.d == [0.0, 0.0] {
            let v = self.v.powf(o.v);
            // d(a^b) = b a^(b-1) da; guard a = 0 with b >= 1
            let dv = if o.v == 0.0 { 0.0 } else { o.v * self.v.powf(o.v - 1.0) };
            return self.chain(v, dv);
        }
        let v = self.v.powf(o.v);
        let ln = self.v.ln();
        Dual {
            v,
            d: [
                v * (o.d[0] * ln + o.v * self.d[0] / self.v),
                v * (o.d[1] * ln + o.v * self.d[1] / self.v),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Tan,
    Atan,
    Exp,
    Sqrt,
    Abs,
    Max,
    Min,
}

impl Func {
    fn from_name(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "sin" => (Func::Sin, 1),
            "cos" => (Func::Cos, 1),
            "tan" => (Func::Tan, 1),
            "atan" => (Func::Atan, 1),
            "exp" => (Func::Exp, 1),
            "sqrt" => (Func::Sqrt, 1),
            "abs" => (Func::Abs, 1),
            "max" => (Func::Max, 2),
            "min" => (Func::Min, 2),
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// A parsed level-set expression in the variables `x1`, `x2`.
#[derive(Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tokens = tokenize(source)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expression(format!("unexpected trailing input in {source:?}")));
        }
        Ok(Expr {
            source: source.to_string(),
            root,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        eval_f64(&self.root, x)
    }

    pub(crate) fn eval_dual(&self, x: [f64; 2]) -> Dual {
        eval_dual(&self.root, x)
    }
}

fn eval_f64(n: &Node, x: [f64; 2]) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Var(i) => x[*i],
        Node::Neg(a) => -eval_f64(a, x),
        Node::Add(a, b) => eval_f64(a, x) + eval_f64(b, x),
        Node::Sub(a, b) => eval_f64(a, x) - eval_f64(b, x),
        Node::Mul(a, b) => eval_f64(a, x) * eval_f64(b, x),
        Node::Div(a, b) => eval_f64(a, x) / eval_f64(b, x),
        Node::Pow(a, b) => eval_f64(a, x).powf(eval_f64(b, x)),
        Node::Call(f, args) => {
            let a = eval_f64(&args[0], x);
            match f {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Tan => a.tan(),
                Func::Atan => a.atan(),
                Func::Exp => a.exp(),
                Func::Sqrt => a.sqrt(),
                Func::Abs => a.abs(),
                Func::Max => a.max(eval_f64(&args[1], x)),
                Func::Min => a.min(eval_f64(&args[1], x)),
            }
        }
    }
}

fn eval_dual(n: &Node, x: [f64; 2]) -> Dual {
    match n {
        Node::Num(v) => Dual::constant(*v),
        Node::Var(i) => {
            let mut d = [0.0; 2];
            d[*i] = 1.0;
            Dual { v: x[*i], d }
        }
        Node::Neg(a) => {
            let a = eval_dual(a, x);
            Dual {
                v: -a.v,
                d: [-a.d[0], -a.d[1]],
            }
        }
        Node::Add(a, b) => eval_dual(a, x).add(eval_dual(b, x)),
        Node::Sub(a, b) => eval_dual(a, x).sub(eval_dual(b, x)),
        Node::Mul(a, b) => eval_dual(a, x).mul(eval_dual(b, x)),
        Node::Div(a, b) => eval_dual(a, x).div(eval_dual(b, x)),
        Node::Pow(a, b) => eval_dual(a, x).powd(eval_dual(b, x)),
        Node::Call(f, args) => {
            let a = eval_dual(&args[0], x);
            match f {
                Func::Sin => a.chain(a.v.sin(), a.v.cos()),
                Func::Cos => a.chain(a.v.cos(), -a.v.sin()),
                Func::Tan => {
                    let t = a.v.tan();
                    a.chain(t, 1.0 + t * t)
                }
                Func::Atan => a.chain(a.v.atan(), 1.0 / (1.0 + a.v * a.v)),
                Func::Exp => {
                    let e = a.v.exp();
                    a.chain(e, e)
                }
                Func::Sqrt => {
                    let s = a.v.sqrt();
                    a.chain(s, 0.5 / s)
                }
                Func::Abs => a.chain(a.v.abs(), if a.v < 0.0 { -1.0 } else { 1.0 }),
                Func::Max => {
                    let b = eval_dual(&args[1], x);
                    if a.v >= b.v {
                        a
                    } else {
                        b
                    }
                }
                Func::Min => {
                    let b = eval_dual(&args[1], x);
                    if a.v <= b.v {
                        a
                    } else {
                        b
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(s: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part
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
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text
                .parse()
                .map_err(|_| Error::Expression(format!("bad number {text:?}")))?;
            out.push(Token::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^(),".contains(c) {
            out.push(Token::Op(c));
            i += 1;
        } else {
            return Err(Error::Expression(format!("unexpected character {c:?} in {s:?}")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek_op(&self) -> Option<char> {
        match self.tokens.get(self.pos) {
            Some(Token::Op(c)) => Some(*c),
            _ => None,
        }
    }

    fn expect(&mut self, op: char) -> Result<()> {
        if self.peek_op() == Some(op) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Expression(format!("expected {op:?} at token {}", self.pos)))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Node::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(op @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Node::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek_op() {
            Some('-') => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let tok = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or_else(|| Error::Expression("unexpected end of expression".into()))?;
        self.pos += 1;
        match tok {
            Token::Num(v) => Ok(Node::Num(v)),
            Token::Op('(') => {
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Token::Op(c) => Err(Error::Expression(format!("unexpected {c:?}"))),
            Token::Ident(name) => match name.as_str() {
                "x1" | "x" => Ok(Node::Var(0)),
                "x2" | "y" => Ok(Node::Var(1)),
                "pi" => Ok(Node::Num(std::f64::consts::PI)),
                _ => {
                    let (func, arity) = Func::from_name(&name)
                        .ok_or_else(|| Error::Expression(format!("unknown identifier {name:?}")))?;
                    self.expect('(')?;
                    let mut args = vec![self.expr()?];
                    while self.peek_op() == Some(',') {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    if args.len() != arity {
                        return Err(Error::Expression(format!(
                            "{name} takes {arity} argument(s), got {}",
                            args.len()
                        )));
                    }
                    Ok(Node::Call(func, args))
                }
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_associativity() {
        let e = Expr::parse("1 + 2*3 - 4/2").unwrap();
        assert_eq!(e.eval([0.0, 0.0]), 5.0);
        let e = Expr::parse("-x1^2").unwrap();
        assert_eq!(e.eval([3.0, 0.0]), -9.0);
        let e = Expr::parse("2^3^2").unwrap();
        assert_eq!(e.eval([0.0, 0.0]), 512.0);
        let e = Expr::parse("1.5e-1 * 2E1").unwrap();
        assert!((e.eval([0.0, 0.0]) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn functions_and_variables() {
        let e = Expr::parse("cos(2*pi*x1)*cos(2*pi*x2) - 1/8").unwrap();
        assert!((e.eval([0.0, 0.0]) - 0.875).abs() < 1e-15);
        let e = Expr::parse("max(x, y) + min(x, y) + abs(-x)").unwrap();
        assert_eq!(e.eval([1.0, 2.0]), 4.0);
        let e = Expr::parse("atan(1) * 4").unwrap();
        assert!((e.eval([0.0, 0.0]) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn dual_gradient_matches_finite_differences() {
        let e = Expr::parse("sin(x1*x2) + x1^3/ (1 + x2^2) - sqrt(x1 + 2) * exp(-x2)").unwrap();
        let x = [0.37, -0.81];
        let d = e.eval_dual(x);
        assert!((d.v - e.eval(x)).abs() < 1e-15);
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (e.eval(xp) - e.eval(xm)) / (2.0 * h);
            assert!((fd - d.d[k]).abs() < 1e-8, "k={k} fd={fd} ad={}", d.d[k]);
        }
    }

    #[test]
    fn parse_errors() {
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("foo(1)").is_err());
        assert!(Expr::parse("max(1)").is_err());
        assert!(Expr::parse("(1 + 2").is_err());
        assert!(Expr::parse("1 $ 2").is_err());
        assert!(Expr::parse("1 2").is_err());
    }
}
