//! Expression language for scenario files.
//!
//! Grammar, loosest binding first: `+ -`, then `* /`, then unary `-`, then
//! `^`; every binary level is left associative. Atoms are numbers, the
//! variables `t`, `x1..xd`, `w1..wd1`, parenthesized expressions and calls
//! of `sin cos exp abs relu` (one argument) or `min max` (two arguments).

use std::fmt;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::scenario::{CoefficientField, FieldKind, WienerHistory};

/// Byte range into the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    fn join(self, other: Span) -> Span {
        Span {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    Time,
    /// Zero-based spatial coordinate.
    X(usize),
    /// Zero-based Wiener component.
    W(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Abs,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Number(f64),
    Variable(Variable),
    Unary(UnaryOp, Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub span: Span,
}

/// Parsed expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionAst {
    pub root: Node,
    pub text: String,
}

/// 1-based line and column (in characters) of a byte offset.
pub fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let mut line = 1;
    let mut col = 1;
    for (i, ch) in text.char_indices() {
        if i >= offset {
            break;
        }
        if ch == '\n' {
            line += 1;
            col = 1;
        } else {
            col += 1;
        }
    }
    (line, col)
}

fn parse_error(text: &str, offset: usize, message: impl Into<String>) -> Error {
    let (line, column) = line_column(text, offset);
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(text: &str) -> Result<Vec<(Tok, Span)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit())) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let lit = &text[start..i];
            let v: f64 = lit
                .parse()
                .map_err(|_| parse_error(text, start, format!("malformed number '{lit}'")))?;
            out.push((Tok::Num(v), Span { start, end: i }));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(text[start..i].to_string()), Span { start, end: i }));
        } else if "+-*/^(),".contains(c) {
            out.push((Tok::Sym(c), Span { start: i, end: i + 1 }));
            i += 1;
        } else {
            let ch = text[i..].chars().next().unwrap_or(c);
            return Err(parse_error(text, i, format!("unexpected character '{ch}'")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    text: &'a str,
    toks: Vec<(Tok, Span)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek_sym(&self) -> Option<char> {
        match self.toks.get(self.pos) {
            Some((Tok::Sym(c), _)) => Some(*c),
            _ => None,
        }
    }

    fn end_offset(&self) -> usize {
        self.text.len()
    }

    fn expect_sym(&mut self, c: char, open: Option<Span>) -> Result<Span> {
        match self.toks.get(self.pos) {
            Some((Tok::Sym(s), span)) if *s == c => {
                self.pos += 1;
                Ok(*span)
            }
            Some((_, span)) => Err(parse_error(self.text, span.start, format!("expected '{c}'"))),
            None if c == ')' => {
                let at = open.map_or(self.end_offset(), |s| s.start);
                Err(parse_error(self.text, at, "unbalanced parentheses"))
            }
            None => Err(parse_error(self.text, self.end_offset(), format!("expected '{c}'"))),
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek_sym() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == '+' { BinaryOp::Add } else { BinaryOp::Sub };
            lhs = binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek_sym() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == '*' { BinaryOp::Mul } else { BinaryOp::Div };
            lhs = binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek_sym() == Some('-') {
            let span = self.toks[self.pos].1;
            self.pos += 1;
            let arg = self.unary()?;
            return Ok(Node {
                span: span.join(arg.span),
                kind: NodeKind::Unary(UnaryOp::Neg, Box::new(arg)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let mut lhs = self.atom()?;
        while self.peek_sym() == Some('^') {
            self.pos += 1;
            let rhs = self.exponent()?;
            lhs = binary(BinaryOp::Pow, lhs, rhs);
        }
        Ok(lhs)
    }

    fn exponent(&mut self) -> Result<Node> {
        if self.peek_sym() == Some('-') {
            let span = self.toks[self.pos].1;
            self.pos += 1;
            let arg = self.exponent()?;
            return Ok(Node {
                span: span.join(arg.span),
                kind: NodeKind::Unary(UnaryOp::Neg, Box::new(arg)),
            });
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Node> {
        let Some((tok, span)) = self.toks.get(self.pos).cloned() else {
            return Err(parse_error(
                self.text,
                self.end_offset(),
                "unexpected end of expression",
            ));
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Node {
                kind: NodeKind::Number(v),
                span,
            }),
            Tok::Sym('(') => {
                let inner = self.expr()?;
                let close = self.expect_sym(')', Some(span))?;
                Ok(Node {
                    kind: inner.kind,
                    span: span.join(close),
                })
            }
            Tok::Sym(')') => Err(parse_error(self.text, span.start, "unbalanced parentheses")),
            Tok::Sym(c) => Err(parse_error(self.text, span.start, format!("unexpected '{c}'"))),
            Tok::Ident(name) => {
                if let Some(op) = unary_function(&name) {
                    let open = self.expect_sym('(', None)?;
                    let arg = self.expr()?;
                    let close = self.expect_sym(')', Some(open))?;
                    return Ok(Node {
                        kind: NodeKind::Unary(op, Box::new(arg)),
                        span: span.join(close),
                    });
                }
                if let Some(op) = binary_function(&name) {
                    let open = self.expect_sym('(', None)?;
                    let a = self.expr()?;
                    self.expect_sym(',', None)?;
                    let b = self.expr()?;
                    let close = self.expect_sym(')', Some(open))?;
                    return Ok(Node {
                        kind: NodeKind::Binary(op, Box::new(a), Box::new(b)),
                        span: span.join(close),
                    });
                }
                match variable(&name) {
                    Some(v) => Ok(Node {
                        kind: NodeKind::Variable(v),
                        span,
                    }),
                    None => Err(parse_error(
                        self.text,
                        span.start,
                        format!("unknown identifier '{name}'"),
                    )),
                }
            }
        }
    }
}

fn binary(op: BinaryOp, lhs: Node, rhs: Node) -> Node {
    Node {
        span: lhs.span.join(rhs.span),
        kind: NodeKind::Binary(op, Box::new(lhs), Box::new(rhs)),
    }
}

fn unary_function(name: &str) -> Option<UnaryOp> {
    Some(match name {
        "sin" => UnaryOp::Sin,
        "cos" => UnaryOp::Cos,
        "exp" => UnaryOp::Exp,
        "abs" => UnaryOp::Abs,
        "relu" => UnaryOp::Relu,
        _ => return None,
    })
}

fn binary_function(name: &str) -> Option<BinaryOp> {
    match name {
        "min" => Some(BinaryOp::Min),
        "max" => Some(BinaryOp::Max),
        _ => None,
    }
}

fn variable(name: &str) -> Option<Variable> {
    if name == "t" {
        return Some(Variable::Time);
    }
    let (head, digits) = name.split_at(1);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    let index: usize = digits.parse().ok()?;
    match head {
        "x" => Some(Variable::X(index - 1)),
        "w" => Some(Variable::W(index - 1)),
        _ => None,
    }
}

/// Parses `text` with any `x<i>` and `w<i>` accepted; see
/// [`parse_expression_for`] to enforce dimensions.
pub fn parse_expression(text: &str) -> Result<ExpressionAst> {
    let toks = tokenize(text)?;
    if toks.is_empty() {
        return Err(parse_error(text, 0, "empty expression"));
    }
    let mut p = Parser { text, toks, pos: 0 };
    let root = p.expr()?;
    if let Some((tok, span)) = p.toks.get(p.pos) {
        let message = match tok {
            Tok::Sym(')') => "unbalanced parentheses".to_string(),
            _ => "unexpected trailing input".to_string(),
        };
        return Err(parse_error(text, span.start, message));
    }
    Ok(ExpressionAst {
        root,
        text: text.to_string(),
    })
}

/// Parses `text` and rejects variables outside `x1..x{dim_x}`, `w1..w{dim_w}`.
pub fn parse_expression_for(text: &str, dim_x: usize, dim_w: usize) -> Result<ExpressionAst> {
    let ast = parse_expression(text)?;
    let mut bad = None;
    ast.root.visit(&mut |node| {
        if bad.is_some() {
            return;
        }
        if let NodeKind::Variable(v) = node.kind {
            let out = match v {
                Variable::Time => false,
                Variable::X(i) => i >= dim_x,
                Variable::W(k) => k >= dim_w,
            };
            if out {
                bad = Some(node.span);
            }
        }
    });
    if let Some(span) = bad {
        return Err(parse_error(
            text,
            span.start,
            format!("unknown identifier '{}'", &text[span.start..span.end]),
        ));
    }
    Ok(ast)
}

impl Node {
    fn visit(&self, f: &mut dyn FnMut(&Node)) {
        f(self);
        match &self.kind {
            NodeKind::Unary(_, a) => a.visit(f),
            NodeKind::Binary(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
            _ => {}
        }
    }

    fn eval(&self, t: f64, x: &[f64], w: &dyn Fn(usize) -> f64) -> Result<f64> {
        Ok(match &self.kind {
            NodeKind::Number(v) => *v,
            NodeKind::Variable(Variable::Time) => t,
            NodeKind::Variable(Variable::X(i)) => x[*i],
            NodeKind::Variable(Variable::W(k)) => w(*k),
            NodeKind::Unary(op, a) => {
                let v = a.eval(t, x, w)?;
                match op {
                    UnaryOp::Neg => -v,
                    UnaryOp::Sin => v.sin(),
                    UnaryOp::Cos => v.cos(),
                    UnaryOp::Exp => v.exp(),
                    UnaryOp::Abs => v.abs(),
                    UnaryOp::Relu => v.max(0.0),
                }
            }
            NodeKind::Binary(op, a, b) => {
                let (u, v) = (a.eval(t, x, w)?, b.eval(t, x, w)?);
                match op {
                    BinaryOp::Add => u + v,
                    BinaryOp::Sub => u - v,
                    BinaryOp::Mul => u * v,
                    BinaryOp::Div => {
                        if v == 0.0 {
                            return Err(Error::Eval {
                                start: self.span.start,
                                end: self.span.end,
                                message: "division by zero".into(),
                            });
                        }
                        u / v
                    }
                    BinaryOp::Pow => u.powf(v),
                    BinaryOp::Min => u.min(v),
                    BinaryOp::Max => u.max(v),
                }
            }
        })
    }
}

impl ExpressionAst {
    /// Evaluates at `(t, x)` with `w(k)` the value of `W^k_t`.
    pub fn eval(&self, t: f64, x: &[f64], w: &dyn Fn(usize) -> f64) -> Result<f64> {
        self.root.eval(t, x, w)
    }

    pub fn uses_time(&self) -> bool {
        self.any_variable(|v| v == Variable::Time)
    }

    pub fn uses_space(&self) -> bool {
        self.any_variable(|v| matches!(v, Variable::X(_)))
    }

    pub fn uses_wiener(&self) -> bool {
        self.any_variable(|v| matches!(v, Variable::W(_)))
    }

    fn any_variable(&self, pred: impl Fn(Variable) -> bool) -> bool {
        let mut found = false;
        self.root.visit(&mut |n| {
            if let NodeKind::Variable(v) = n.kind {
                found |= pred(v);
            }
        });
        found
    }

    /// Compiles into a coefficient field. Evaluation failures inside the
    /// solver yield `NaN` and are recorded in `sink` under `label`.
    pub fn compile(&self, label: &str, sink: &EvalSink) -> Result<CoefficientField> {
        if !self.uses_time() && !self.uses_space() && !self.uses_wiener() {
            let v = self
                .eval(0.0, &[], &|_| 0.0)
                .map_err(|e| sink.wrap(label, &self.text, e))?;
            return Ok(CoefficientField::constant(v).with_source(self.text.clone()));
        }
        let kind = if self.uses_wiener() {
            FieldKind::AdaptedFnOfTxW
        } else {
            FieldKind::DeterministicFnOfTx
        };
        let ast = Arc::new(self.root.clone());
        let sink = sink.clone();
        let label = label.to_string();
        let text = self.text.clone();
        let field = CoefficientField::from_evaluator(
            kind,
            Arc::new(move |t, x, h: &WienerHistory| match ast.eval(t, x, &|k| h.w(k)) {
                Ok(v) => v,
                Err(e) => {
                    sink.record(&label, &text, e);
                    f64::NAN
                }
            }),
        );
        Ok(field.with_source(self.text.clone()))
    }
}

impl fmt::Display for ExpressionAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// First evaluation failure seen by any compiled field.
#[derive(Debug, Clone, Default)]
pub struct EvalSink(Arc<OnceLock<(usize, usize, String)>>);

impl EvalSink {
    fn wrap(&self, label: &str, text: &str, e: Error) -> Error {
        match e {
            Error::Eval { start, end, message } => Error::Eval {
                start,
                end,
                message: format!("{message} in {label} = {text} (at '{}')", &text[start..end]),
            },
            other => other,
        }
    }

    fn record(&self, label: &str, text: &str, e: Error) {
        if let Error::Eval { start, end, message } = self.wrap(label, text, e) {
            let _ = self.0.set((start, end, message));
        }
    }

    /// The recorded failure, if any.
    pub fn check(&self) -> Result<()> {
        match self.0.get() {
            Some((start, end, message)) => Err(Error::Eval {
                start: *start,
                end: *end,
                message: message.clone(),
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(text: &str) -> f64 {
        parse_expression(text).unwrap().eval(0.0, &[], &|_| 0.0).unwrap()
    }

    fn parse_err(text: &str) -> (usize, usize, String) {
        match parse_expression(text) {
            Err(Error::Parse { line, column, message }) => (line, column, message),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("0.5"), 0.5);
        assert_eq!(ev("1+2*3"), 7.0);
        assert_eq!(ev("10-4-3"), 3.0);
        assert_eq!(ev("8/4/2"), 1.0);
        assert_eq!(ev("-2^2"), -4.0);
        assert_eq!(ev("2^3^2"), 64.0);
        assert_eq!(ev("2^-1"), 0.5);
        assert_eq!(ev("--3"), 3.0);
        assert_eq!(ev("-3*-2"), 6.0);
        assert_eq!(ev("2*(3+4)"), 14.0);
        assert_eq!(ev("1e-2*100"), 1.0);
        assert_eq!(ev("min(3, max(1, 2)) + relu(-5) + abs(-1)"), 3.0);
    }

    #[test]
    fn root_of_sum_is_addition() {
        let ast = parse_expression("sin(3.14159*x1/2)+t").unwrap();
        assert!(matches!(ast.root.kind, NodeKind::Binary(BinaryOp::Add, _, _)));
        let v = ast.eval(0.25, &[1.0], &|_| 0.0).unwrap();
        assert!((v - ((3.14159f64 / 2.0).sin() + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn variables_and_dimensions() {
        let ast = parse_expression_for("x2 * w1 + t", 2, 1).unwrap();
        assert!(ast.uses_wiener() && ast.uses_space() && ast.uses_time());
        assert_eq!(ast.eval(1.0, &[0.0, 3.0], &|_| 2.0).unwrap(), 7.0);
        match parse_expression_for("1 + x3", 2, 1) {
            Err(Error::Parse {
                line: 1,
                column: 5,
                message,
            }) => assert!(message.contains("x3")),
            other => panic!("{other:?}"),
        }
        assert!(parse_expression_for("w2", 1, 1).is_err());
        assert!(parse_expression("x0").is_err());
    }

    #[test]
    fn error_positions() {
        assert_eq!(parse_err("").2, "empty expression");
        assert_eq!(parse_err("   ").2, "empty expression");
        let (l, c, m) = parse_err("(1 + 2");
        assert_eq!((l, c, m.as_str()), (1, 1, "unbalanced parentheses"));
        let (_, c, m) = parse_err("1 + 2)");
        assert_eq!((c, m.as_str()), (6, "unbalanced parentheses"));
        let (_, c, m) = parse_err("1 + foo");
        assert_eq!(c, 5);
        assert!(m.contains("unknown identifier 'foo'"));
        let (l, c, _) = parse_err("1 +\n  2 $");
        assert_eq!((l, c), (2, 5));
        let (_, c, _) = parse_err("sin(1, 2)");
        assert_eq!(c, 6);
    }

    #[test]
    fn division_by_zero_reports_span() {
        let ast = parse_expression("1 + 2 / (x1 - 1)").unwrap();
        assert!(ast.eval(0.0, &[0.0], &|_| 0.0).is_ok());
        match ast.eval(0.0, &[1.0], &|_| 0.0) {
            Err(Error::Eval { start, end, .. }) => {
                assert_eq!(&ast.text[start..end], "2 / (x1 - 1)")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn compiled_field_kinds() {
        let sink = EvalSink::default();
        let c = parse_expression("2*3").unwrap().compile("c", &sink).unwrap();
        assert_eq!(c.as_constant(), Some(6.0));
        assert_eq!(c.source(), Some("2*3"));
        let d = parse_expression("x1 + t").unwrap().compile("c", &sink).unwrap();
        assert_eq!(d.kind(), FieldKind::DeterministicFnOfTx);
        let a = parse_expression("w1").unwrap().compile("phi", &sink).unwrap();
        assert_eq!(a.kind(), FieldKind::AdaptedFnOfTxW);
        let h = WienerHistory::from_increments(1, 0.5, vec![0.3, -0.1]).unwrap();
        assert!((a.eval(1.0, &[0.0], &h) - 0.2).abs() < 1e-15);
        sink.check().unwrap();
        let z = parse_expression("1/x1").unwrap().compile("b", &sink).unwrap();
        assert!(z.eval(0.0, &[0.0], &h).is_nan());
        assert!(matches!(sink.check(), Err(Error::Eval { start: 0, end: 4, .. })));
    }

    #[test]
    fn constant_division_by_zero_fails_at_compile() {
        let sink = EvalSink::default();
        assert!(matches!(
            parse_expression("1/(2-2)").unwrap().compile("c", &sink),
            Err(Error::Eval { .. })
        ));
    }
}
