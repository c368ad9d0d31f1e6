//! Parser and evaluator for the scalar formulas that define `k(x)`,
//! `sigma(x)` and `r(x)` in configuration files.
//!
//! Grammar (highest precedence first): parentheses and function calls,
//! `^` (right-associative), unary `-`, `*` `/`, `+` `-`. Functions are
//! `exp`, `log`, `sqrt`, `abs`. Identifiers are either the state variable
//! `x` or one of the parameter names declared alongside the formula;
//! anything else is rejected at parse time.
//!
//! Expressions are immutable after parsing and evaluation is pure, so they
//! can be shared freely across threads. Evaluation is strict about domains:
//! `log` of a non-positive number, `sqrt` of a negative number, `0^y` with
//! `y < 0`, fractional powers of negative bases and any non-finite
//! intermediate all surface as errors instead of silently producing NaN.

use std::fmt;

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var,
    Param(usize),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Exp(Box<Node>),
    Log(Box<Node>),
    Sqrt(Box<Node>),
    Abs(Box<Node>),
}

/// A parsed formula together with the parameter names it may reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    ast: Node,
    params: Vec<String>,
}

/// An expression with parameter values substituted, flattened to a postfix
/// program. This is the hot-path form used inside the ODE right-hand side.
#[derive(Debug, Clone)]
pub struct BoundExpr {
    ops: Vec<Op>,
    /// Stack depth needed by `ops`; sized once so eval never reallocates.
    depth: usize,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Push(f64),
    X,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Expression {
    /// Parse `source` against the declared parameter names.
    pub fn parse(source: &str, params: &[String]) -> Result<Expression> {
        if source.trim().is_empty() {
            return Err(Error::Syntax {
                offset: 0,
                message: "empty expression".into(),
            });
        }
        let ast = parse_with_names(source, params)?;
        Ok(Expression {
            ast,
            params: params.to_vec(),
        })
    }

    pub fn ast(&self) -> &Node {
        &self.ast
    }

    pub fn params(&self) -> &[String] {
        &self.params
    }

    /// Evaluate at `x` with parameter values given in declaration order.
    pub fn eval(&self, x: f64, values: &[f64]) -> Result<f64> {
        if values.len() != self.params.len() {
            return Err(Error::Precondition(format!(
                "expected {} parameter values, got {}",
                self.params.len(),
                values.len()
            )));
        }
        eval_node(&self.ast, x, values)
    }

    /// Substitute parameter values and compile to the postfix form.
    pub fn bind(&self, values: &[f64]) -> Result<BoundExpr> {
        if values.len() != self.params.len() {
            return Err(Error::Precondition(format!(
                "expected {} parameter values, got {}",
                self.params.len(),
                values.len()
            )));
        }
        let mut ops = Vec::new();
        compile(&self.ast, values, &mut ops);
        let mut depth = 0usize;
        let mut cur = 0usize;
        for op in &ops {
            match op {
                Op::Push(_) | Op::X => cur += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => cur -= 1,
                _ => {}
            }
            depth = depth.max(cur);
        }
        Ok(BoundExpr { ops, depth })
    }
}

impl BoundExpr {
    pub fn eval(&self, x: f64) -> Result<f64> {
        let mut stack: [f64; 32] = [0.0; 32];
        debug_assert!(self.depth <= 32);
        let mut top = 0usize;
        for op in &self.ops {
            match op {
                Op::Push(v) => {
                    stack[top] = *v;
                    top += 1;
                }
                Op::X => {
                    stack[top] = x;
                    top += 1;
                }
                Op::Add => {
                    top -= 1;
                    stack[top - 1] += stack[top];
                }
                Op::Sub => {
                    top -= 1;
                    stack[top - 1] -= stack[top];
                }
                Op::Mul => {
                    top -= 1;
                    stack[top - 1] *= stack[top];
                }
                Op::Div => {
                    top -= 1;
                    let v = stack[top - 1] / stack[top];
                    if !v.is_finite() {
                        return Err(Error::Domain { node: "division", x });
                    }
                    stack[top - 1] = v;
                }
                Op::Pow => {
                    top -= 1;
                    stack[top - 1] = checked_pow(stack[top - 1], stack[top], x)?;
                }
                Op::Neg => stack[top - 1] = -stack[top - 1],
                Op::Exp => {
                    let v = stack[top - 1].exp();
                    if !v.is_finite() {
                        return Err(Error::Domain { node: "exp", x });
                    }
                    stack[top - 1] = v;
                }
                Op::Log => {
                    if stack[top - 1] <= 0.0 {
                        return Err(Error::Domain { node: "log", x });
                    }
                    stack[top - 1] = stack[top - 1].ln();
                }
                Op::Sqrt => {
                    if stack[top - 1] < 0.0 {
                        return Err(Error::Domain { node: "sqrt", x });
                    }
                    stack[top - 1] = stack[top - 1].sqrt();
                }
                Op::Abs => stack[top - 1] = stack[top - 1].abs(),
            }
        }
        let v = stack[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Domain { node: "result", x })
        }
    }
}

fn checked_pow(base: f64, exponent: f64, x: f64) -> Result<f64> {
    if base == 0.0 && exponent < 0.0 {
        return Err(Error::Domain { node: "power", x });
    }
    if base < 0.0 && exponent.fract() != 0.0 {
        return Err(Error::Domain { node: "power", x });
    }
    let v = base.powf(exponent);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Domain { node: "power", x })
    }
}

fn eval_node(node: &Node, x: f64, values: &[f64]) -> Result<f64> {
    let v = match node {
        Node::Const(c) => *c,
        Node::Var => x,
        Node::Param(i) => values[*i],
        Node::Add(a, b) => eval_node(a, x, values)? + eval_node(b, x, values)?,
        Node::Sub(a, b) => eval_node(a, x, values)? - eval_node(b, x, values)?,
        Node::Mul(a, b) => eval_node(a, x, values)? * eval_node(b, x, values)?,
        Node::Div(a, b) => {
            let v = eval_node(a, x, values)? / eval_node(b, x, values)?;
            if !v.is_finite() {
                return Err(Error::Domain { node: "division", x });
            }
            v
        }
        Node::Pow(a, b) => checked_pow(eval_node(a, x, values)?, eval_node(b, x, values)?, x)?,
        Node::Neg(a) => -eval_node(a, x, values)?,
        Node::Exp(a) => {
            let v = eval_node(a, x, values)?.exp();
            if !v.is_finite() {
                return Err(Error::Domain { node: "exp", x });
            }
            v
        }
        Node::Log(a) => {
            let v = eval_node(a, x, values)?;
            if v <= 0.0 {
                return Err(Error::Domain { node: "log", x });
            }
            v.ln()
        }
        Node::Sqrt(a) => {
            let v = eval_node(a, x, values)?;
            if v < 0.0 {
                return Err(Error::Domain { node: "sqrt", x });
            }
            v.sqrt()
        }
        Node::Abs(a) => eval_node(a, x, values)?.abs(),
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Domain { node: "result", x })
    }
}

fn compile(node: &Node, values: &[f64], out: &mut Vec<Op>) {
    match node {
        Node::Const(c) => out.push(Op::Push(*c)),
        Node::Var => out.push(Op::X),
        Node::Param(i) => out.push(Op::Push(values[*i])),
        Node::Add(a, b) => {
            compile(a, values, out);
            compile(b, values, out);
            out.push(Op::Add);
        }
        Node::Sub(a, b) => {
            compile(a, values, out);
            compile(b, values, out);
            out.push(Op::Sub);
        }
        Node::Mul(a, b) => {
            compile(a, values, out);
            compile(b, values, out);
            out.push(Op::Mul);
        }
        Node::Div(a, b) => {
            compile(a, values, out);
            compile(b, values, out);
            out.push(Op::Div);
        }
        Node::Pow(a, b) => {
            compile(a, values, out);
            compile(b, values, out);
            out.push(Op::Pow);
        }
        Node::Neg(a) => {
            compile(a, values, out);
            out.push(Op::Neg);
        }
        Node::Exp(a) => {
            compile(a, values, out);
            out.push(Op::Exp);
        }
        Node::Log(a) => {
            compile(a, values, out);
            out.push(Op::Log);
        }
        Node::Sqrt(a) => {
            compile(a, values, out);
            out.push(Op::Sqrt);
        }
        Node::Abs(a) => {
            compile(a, values, out);
            out.push(Op::Abs);
        }
    }
}

// ---------------------------------------------------------------------------
// Tokenizer and recursive-descent parser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

#[derive(Debug, Clone, Copy)]
struct Token {
    kind: TokenKind,
    offset: usize,
    len: usize,
}

impl Token {
    fn text<'s>(&self, source: &'s str) -> &'s str {
        &source[self.offset..self.offset + self.len]
    }
}

fn tokenize(source: &str) -> Result<Vec<Token>> {
    let bytes = source.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        let kind = match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
                continue;
            }
            '+' => TokenKind::Plus,
            '-' => TokenKind::Minus,
            '*' => TokenKind::Star,
            '/' => TokenKind::Slash,
            '^' => TokenKind::Caret,
            '(' => TokenKind::LParen,
            ')' => TokenKind::RParen,
            '0'..='9' | '.' => {
                i += 1;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                // scientific notation suffix
                if i < bytes.len() && matches!(bytes[i] as char, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j] as char, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j + 1;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &source[start..i];
                let value: f64 = text.parse().map_err(|_| Error::Syntax {
                    offset: start,
                    message: format!("malformed number `{text}`"),
                })?;
                out.push(Token {
                    kind: TokenKind::Number(value),
                    offset: start,
                    len: i - start,
                });
                continue;
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                i += 1;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                out.push(Token {
                    kind: TokenKind::Ident,
                    offset: start,
                    len: i - start,
                });
                continue;
            }
            other => {
                return Err(Error::Syntax {
                    offset: start,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        out.push(Token {
            kind,
            offset: start,
            len: 1,
        });
        i += 1;
    }
    Ok(out)
}

fn parse_with_names(source: &str, params: &[String]) -> Result<Node> {
    let tokens = tokenize(source)?;
    // Identifier text is resolved through a side table so the parser does
    // not need to carry the source lifetime through every production.
    let texts: Vec<Option<String>> = tokens
        .iter()
        .map(|t| match t.kind {
            TokenKind::Ident => Some(t.text(source).to_string()),
            _ => None,
        })
        .collect();
    let mut p = NamedParser {
        tokens: &tokens,
        texts: &texts,
        pos: 0,
        params,
        source_len: source.len(),
    };
    let ast = p.expression()?;
    match p.peek() {
        None => Ok(ast),
        Some(tok) => Err(Error::Syntax {
            offset: tok.offset,
            message: format!("unexpected `{}`", tok.text(source)),
        }),
    }
}

struct NamedParser<'a> {
    tokens: &'a [Token],
    texts: &'a [Option<String>],
    pos: usize,
    params: &'a [String],
    source_len: usize,
}

impl<'a> NamedParser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<(usize, Token)> {
        let t = self.tokens.get(self.pos).copied();
        t.map(|tok| {
            let idx = self.pos;
            self.pos += 1;
            (idx, tok)
        })
    }

    fn eof_error(&self) -> Error {
        Error::Syntax {
            offset: self.source_len,
            message: "unexpected end of expression".into(),
        }
    }

    fn expression(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(tok) = self.peek() {
            match tok.kind {
                TokenKind::Plus => {
                    self.bump();
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                TokenKind::Minus => {
                    self.bump();
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(tok) = self.peek() {
            match tok.kind {
                TokenKind::Star => {
                    self.bump();
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                TokenKind::Slash => {
                    self.bump();
                    lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        if let Some(tok) = self.peek() {
            if tok.kind == TokenKind::Minus {
                self.bump();
                return Ok(Node::Neg(Box::new(self.unary()?)));
            }
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if let Some(tok) = self.peek() {
            if tok.kind == TokenKind::Caret {
                self.bump();
                let exponent = self.unary_exponent()?;
                return Ok(Node::Pow(Box::new(base), Box::new(exponent)));
            }
        }
        Ok(base)
    }

    fn unary_exponent(&mut self) -> Result<Node> {
        if let Some(tok) = self.peek() {
            if tok.kind == TokenKind::Minus {
                self.bump();
                return Ok(Node::Neg(Box::new(self.unary_exponent()?)));
            }
        }
        self.power()
    }

    fn atom(&mut self) -> Result<Node> {
        let (idx, tok) = self.bump().ok_or_else(|| self.eof_error())?;
        match tok.kind {
            TokenKind::Number(v) => Ok(Node::Const(v)),
            TokenKind::LParen => {
                let inner = self.expression()?;
                match self.bump() {
                    Some((_, t)) if t.kind == TokenKind::RParen => Ok(inner),
                    Some((_, t)) => Err(Error::Syntax {
                        offset: t.offset,
                        message: "expected `)`".into(),
                    }),
                    None => Err(self.eof_error()),
                }
            }
            TokenKind::Ident => {
                let name = self.texts[idx].as_deref().unwrap();
                match name {
                    "exp" | "log" | "sqrt" | "abs" => {
                        let open = self.bump();
                        match open {
                            Some((_, t)) if t.kind == TokenKind::LParen => {}
                            Some((_, t)) => {
                                return Err(Error::Syntax {
                                    offset: t.offset,
                                    message: format!("expected `(` after `{name}`"),
                                })
                            }
                            None => return Err(self.eof_error()),
                        }
                        let arg = Box::new(self.expression()?);
                        match self.bump() {
                            Some((_, t)) if t.kind == TokenKind::RParen => {}
                            Some((_, t)) => {
                                return Err(Error::Syntax {
                                    offset: t.offset,
                                    message: "expected `)`".into(),
                                })
                            }
                            None => return Err(self.eof_error()),
                        }
                        Ok(match name {
                            "exp" => Node::Exp(arg),
                            "log" => Node::Log(arg),
                            "sqrt" => Node::Sqrt(arg),
                            _ => Node::Abs(arg),
                        })
                    }
                    "x" => Ok(Node::Var),
                    _ => match self.params.iter().position(|p| p == name) {
                        Some(i) => Ok(Node::Param(i)),
                        None => Err(Error::UnknownIdentifier {
                            name: name.to_string(),
                            offset: tok.offset,
                        }),
                    },
                }
            }
            _ => Err(Error::Syntax {
                offset: tok.offset,
                message: "expected a value".into(),
            }),
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.ast, &self.params, 0)
    }
}

// Precedence levels for printing: 0 add, 1 mul, 2 unary, 3 power, 4 atom.
fn write_node(f: &mut fmt::Formatter<'_>, node: &Node, params: &[String], parent: u8) -> fmt::Result {
    let prec = match node {
        Node::Add(..) | Node::Sub(..) => 0,
        Node::Mul(..) | Node::Div(..) => 1,
        Node::Neg(..) => 2,
        Node::Pow(..) => 3,
        _ => 4,
    };
    let need_paren = prec < parent;
    if need_paren {
        write!(f, "(")?;
    }
    match node {
        Node::Const(c) => write!(f, "{c}")?,
        Node::Var => write!(f, "x")?,
        Node::Param(i) => write!(f, "{}", params[*i])?,
        Node::Add(a, b) => {
            write_node(f, a, params, 0)?;
            write!(f, " + ")?;
            write_node(f, b, params, 1)?;
        }
        Node::Sub(a, b) => {
            write_node(f, a, params, 0)?;
            write!(f, " - ")?;
            write_node(f, b, params, 1)?;
        }
        Node::Mul(a, b) => {
            write_node(f, a, params, 1)?;
            write!(f, " * ")?;
            write_node(f, b, params, 2)?;
        }
        Node::Div(a, b) => {
            write_node(f, a, params, 1)?;
            write!(f, " / ")?;
            write_node(f, b, params, 2)?;
        }
        Node::Neg(a) => {
            write!(f, "-")?;
            write_node(f, a, params, 2)?;
        }
        Node::Pow(a, b) => {
            write_node(f, a, params, 4)?;
            write!(f, "^")?;
            write_node(f, b, params, 3)?;
        }
        Node::Exp(a) => {
            write!(f, "exp(")?;
            write_node(f, a, params, 0)?;
            write!(f, ")")?;
        }
        Node::Log(a) => {
            write!(f, "log(")?;
            write_node(f, a, params, 0)?;
            write!(f, ")")?;
        }
        Node::Sqrt(a) => {
            write!(f, "sqrt(")?;
            write_node(f, a, params, 0)?;
            write!(f, ")")?;
        }
        Node::Abs(a) => {
            write!(f, "abs(")?;
            write_node(f, a, params, 0)?;
            write!(f, ")")?;
        }
    }
    if need_paren {
        write!(f, ")")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_product_of_param_and_var() {
        let e = Expression::parse("r*x", &params(&["r"])).unwrap();
        assert_eq!(
            *e.ast(),
            Node::Mul(Box::new(Node::Param(0)), Box::new(Node::Var))
        );
    }

    #[test]
    fn parses_power_solution_shape() {
        let e = Expression::parse("x^(-2*r/(v*v))", &params(&["r", "v"])).unwrap();
        // h_0 shape of the lognormal fixture: x to a negative rational power
        assert_relative_eq!(e.eval(2.0, &[0.05, 0.2]).unwrap(), 2.0f64.powf(-2.5), max_relative = 1e-15);
    }

    #[test]
    fn incomplete_expression_reports_offset() {
        let err = Expression::parse("x +", &params(&[])).unwrap_err();
        match err {
            Error::Syntax { offset, .. } => assert_eq!(offset, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_identifier_is_rejected() {
        let err = Expression::parse("a*x", &params(&["r"])).unwrap_err();
        match err {
            Error::UnknownIdentifier { name, offset } => {
                assert_eq!(name, "a");
                assert_eq!(offset, 0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn eval_examples() {
        let e = Expression::parse("r*x", &params(&["r"])).unwrap();
        assert_relative_eq!(e.eval(2.0, &[0.05]).unwrap(), 0.10, max_relative = 1e-15);

        let e = Expression::parse("x^(-2.5)", &params(&[])).unwrap();
        assert_relative_eq!(e.eval(1.0, &[]).unwrap(), 1.0, max_relative = 1e-15);

        let e = Expression::parse("log(x)", &params(&[])).unwrap();
        assert!(matches!(e.eval(0.0, &[]), Err(Error::Domain { node: "log", .. })));
    }

    #[test]
    fn precedence_power_binds_tighter_than_unary_minus() {
        let e = Expression::parse("-x^2", &params(&[])).unwrap();
        assert_relative_eq!(e.eval(3.0, &[]).unwrap(), -9.0, max_relative = 1e-15);
    }

    #[test]
    fn power_of_negative_base_with_fractional_exponent_errors() {
        let e = Expression::parse("x^0.5", &params(&[])).unwrap();
        assert!(e.eval(-1.0, &[]).is_err());
        // integer exponents of negative bases are fine
        let e = Expression::parse("x^2", &params(&[])).unwrap();
        assert_relative_eq!(e.eval(-3.0, &[]).unwrap(), 9.0, max_relative = 1e-15);
    }

    #[test]
    fn zero_to_negative_power_errors() {
        let e = Expression::parse("x^(-1)", &params(&[])).unwrap();
        assert!(matches!(e.eval(0.0, &[]), Err(Error::Domain { node: "power", .. })));
    }

    #[test]
    fn bound_eval_matches_tree_eval() {
        let e = Expression::parse("exp(-a*x) + sqrt(x)*b/x - 1.5", &params(&["a", "b"])).unwrap();
        let bound = e.bind(&[0.3, 2.0]).unwrap();
        for i in 1..50 {
            let x = 0.1 * i as f64;
            assert_eq!(bound.eval(x).unwrap(), e.eval(x, &[0.3, 2.0]).unwrap());
        }
    }

    #[test]
    fn display_round_trips_structurally() {
        let sources = [
            "r*x",
            "x^(-2*r/(v*v))",
            "-x^2 + 3*x - 1/(x + 2)",
            "abs(x - 1)*sqrt(x)/exp(r*x)",
            "x^-2.5",
            "2^3^2",
        ];
        let names = params(&["r", "v"]);
        for src in sources {
            let e = Expression::parse(src, &names).unwrap();
            let printed = e.to_string();
            let re = Expression::parse(&printed, &names).unwrap();
            assert_eq!(e.ast(), re.ast(), "round trip failed for `{src}` -> `{printed}`");
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_node(depth: u32) -> BoxedStrategy<Node> {
            let leaf = prop_oneof![
                (0.1f64..10.0).prop_map(Node::Const),
                Just(Node::Var),
                Just(Node::Param(0)),
            ];
            if depth == 0 {
                return leaf.boxed();
            }
            let sub = arb_node(depth - 1);
            prop_oneof![
                leaf,
                (arb_node(depth - 1), arb_node(depth - 1))
                    .prop_map(|(a, b)| Node::Add(Box::new(a), Box::new(b))),
                (arb_node(depth - 1), arb_node(depth - 1))
                    .prop_map(|(a, b)| Node::Sub(Box::new(a), Box::new(b))),
                (arb_node(depth - 1), arb_node(depth - 1))
                    .prop_map(|(a, b)| Node::Mul(Box::new(a), Box::new(b))),
                (arb_node(depth - 1), arb_node(depth - 1))
                    .prop_map(|(a, b)| Node::Div(Box::new(a), Box::new(b))),
                sub.clone().prop_map(|a| Node::Neg(Box::new(a))),
                sub.clone().prop_map(|a| Node::Sqrt(Box::new(a))),
                sub.clone().prop_map(|a| Node::Log(Box::new(a))),
                sub.prop_map(|a| Node::Abs(Box::new(a))),
            ]
            .boxed()
        }

        proptest! {
            #[test]
            fn printed_ast_reparses_identically(ast in arb_node(4)) {
                let names = vec!["p".to_string()];
                let e = Expression { ast, params: names.clone() };
                let printed = e.to_string();
                let re = Expression::parse(&printed, &names).unwrap();
                prop_assert_eq!(e.ast(), re.ast());
            }

            // Compiled postfix evaluation against the reference tree walker,
            // on a randomized corpus of expressions and points.
            #[test]
            fn compiled_eval_agrees_with_tree_eval(
                ast in arb_node(4),
                xs in proptest::collection::vec(0.01f64..50.0, 8),
                p in 0.1f64..5.0,
            ) {
                let names = vec!["p".to_string()];
                let e = Expression { ast, params: names };
                if let Ok(bound) = e.bind(&[p]) {
                    for x in xs {
                        match (e.eval(x, &[p]), bound.eval(x)) {
                            (Ok(a), Ok(b)) => {
                                let tol = 1e-14 * a.abs().max(1.0);
                                prop_assert!((a - b).abs() <= tol, "a={a} b={b}");
                            }
                            (Err(_), Err(_)) => {}
                            (a, b) => prop_assert!(false, "divergent outcomes {a:?} vs {b:?}"),
                        }
                    }
                }
            }
        }
    }
}
