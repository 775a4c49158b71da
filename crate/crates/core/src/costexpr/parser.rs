use std::fmt;

use thiserror::Error;

use super::{Expr, ExprKind, Span};

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ParseError {
    /// Byte offset of the offending token.
    pub offset: usize,
    pub expected: Vec<String>,
    pub found: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "syntax error at byte {}: expected one of [{}], found {}",
            self.offset,
            self.expected.join(", "),
            self.found
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "number {v}"),
            Tok::Ident(s) => write!(f, "identifier '{s}'"),
            Tok::Sym(c) => write!(f, "'{c}'"),
            Tok::End => write!(f, "end of input"),
        }
    }
}

struct Lexed {
    tok: Tok,
    span: Span,
}

fn lex(src: &str) -> Result<Vec<Lexed>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| ParseError {
                offset: start,
                expected: vec!["number".into()],
                found: format!("malformed literal '{text}'"),
            })?;
            if !v.is_finite() {
                return Err(ParseError {
                    offset: start,
                    expected: vec!["finite number".into()],
                    found: format!("'{text}'"),
                });
            }
            out.push(Lexed { tok: Tok::Num(v), span: Span::new(start, i) });
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Lexed { tok: Tok::Ident(src[start..i].to_string()), span: Span::new(start, i) });
        } else if b"+-*/^(),".contains(&c) {
            i += 1;
            out.push(Lexed { tok: Tok::Sym(c as char), span: Span::new(start, i) });
        } else {
            let ch = src[start..].chars().next().unwrap_or('?');
            return Err(ParseError {
                offset: start,
                expected: vec!["number".into(), "identifier".into(), "operator".into(), "'('".into()],
                found: format!("'{ch}'"),
            });
        }
    }
    out.push(Lexed { tok: Tok::End, span: Span::new(src.len(), src.len()) });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Lexed>,
    pos: usize,
    vars: &'a [&'a str],
    seen_var: Option<(String, usize)>,
}

const PRIMARY_START: [&str; 4] = ["number", "variable", "function", "'('"];

impl<'a> Parser<'a> {
    fn peek(&self) -> &Lexed {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> &Lexed {
        let i = self.pos;
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        &self.toks[i]
    }

    fn fail(&self, expected: &[&str]) -> ParseError {
        let t = self.peek();
        ParseError {
            offset: t.span.start,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: t.tok.to_string(),
        }
    }

    fn expect_sym(&mut self, c: char) -> Result<Span, ParseError> {
        if self.peek().tok == Tok::Sym(c) {
            Ok(self.bump().span)
        } else {
            Err(self.fail(&[&format!("'{c}'")]))
        }
    }

    fn is_sym(&self, c: char) -> bool {
        self.peek().tok == Tok::Sym(c)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let kind: fn(Box<Expr>, Box<Expr>) -> ExprKind = if self.is_sym('+') {
                ExprKind::Add
            } else if self.is_sym('-') {
                ExprKind::Sub
            } else {
                return Ok(lhs);
            };
            self.bump();
            let rhs = self.term()?;
            let span = Span::new(lhs.span.start, rhs.span.end);
            lhs = Expr::with(kind(Box::new(lhs), Box::new(rhs)), span);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.power()?;
        loop {
            let kind: fn(Box<Expr>, Box<Expr>) -> ExprKind = if self.is_sym('*') {
                ExprKind::Mul
            } else if self.is_sym('/') {
                ExprKind::Div
            } else {
                return Ok(lhs);
            };
            self.bump();
            let rhs = self.power()?;
            let span = Span::new(lhs.span.start, rhs.span.end);
            lhs = Expr::with(kind(Box::new(lhs), Box::new(rhs)), span);
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.unary()?;
        if self.is_sym('^') {
            self.bump();
            let exp = self.power()?;
            let span = Span::new(base.span.start, exp.span.end);
            return Ok(Expr::with(ExprKind::Pow(Box::new(base), Box::new(exp)), span));
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.is_sym('-') {
            let start = self.bump().span.start;
            let inner = self.unary()?;
            let span = Span::new(start, inner.span.end);
            return Ok(Expr::with(ExprKind::Neg(Box::new(inner)), span));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let Lexed { tok, span } = {
            let t = self.peek();
            Lexed { tok: t.tok.clone(), span: t.span }
        };
        match tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::with(ExprKind::Num(v), span))
            }
            Tok::Sym('(') => {
                self.bump();
                let inner = self.expr()?;
                let close = self.expect_sym(')')?;
                Ok(Expr { kind: inner.kind, span: Span::new(span.start, close.end) })
            }
            Tok::Ident(name) => {
                self.bump();
                match name.as_str() {
                    "exp" | "log" => {
                        self.expect_sym('(')?;
                        let arg = self.expr()?;
                        let close = self.expect_sym(')')?;
                        let span = Span::new(span.start, close.end);
                        let kind = if name == "exp" {
                            ExprKind::Exp(Box::new(arg))
                        } else {
                            ExprKind::Log(Box::new(arg))
                        };
                        Ok(Expr::with(kind, span))
                    }
                    "pow" => {
                        self.expect_sym('(')?;
                        let base = self.expr()?;
                        self.expect_sym(',')?;
                        let exp = self.expr()?;
                        let close = self.expect_sym(')')?;
                        let span = Span::new(span.start, close.end);
                        Ok(Expr::with(ExprKind::Pow(Box::new(base), Box::new(exp)), span))
                    }
                    _ if self.vars.contains(&name.as_str()) => {
                        if let Some((prev, _)) = &self.seen_var {
                            if *prev != name {
                                return Err(ParseError {
                                    offset: span.start,
                                    expected: vec![format!("variable '{prev}'")],
                                    found: format!("second variable '{name}'"),
                                });
                            }
                        } else {
                            self.seen_var = Some((name.clone(), span.start));
                        }
                        Ok(Expr::with(ExprKind::Var(name), span))
                    }
                    _ => {
                        let mut expected: Vec<String> =
                            self.vars.iter().map(|v| format!("variable '{v}'")).collect();
                        expected.extend(["exp", "log", "pow"].map(String::from));
                        Err(ParseError {
                            offset: span.start,
                            expected,
                            found: format!("identifier '{name}'"),
                        })
                    }
                }
            }
            _ => Err(self.fail(&PRIMARY_START)),
        }
    }
}

fn parse_with(src: &str, vars: &[&str]) -> Result<Expr, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0, vars, seen_var: None };
    let e = p.expr()?;
    if p.peek().tok != Tok::End {
        return Err(p.fail(&["operator", "end of input"]));
    }
    Ok(e)
}

/// Parse an expression in either `t` or `rho` (but not both).
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    parse_with(src, &["t", "rho"])
}

/// Parse an expression whose only admissible variable is `var`.
pub fn parse_in(src: &str, var: &str) -> Result<Expr, ParseError> {
    parse_with(src, &[var])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_offset_and_expected_set() {
        let err = parse("exp(t - )").unwrap_err();
        assert_eq!(err.offset, 8);
        assert!(err.expected.iter().any(|s| s == "'('"));
        let err = parse("2 * (t + 1").unwrap_err();
        assert_eq!(err.offset, 10);
        assert_eq!(err.expected, vec!["')'".to_string()]);
        let err = parse("t t").unwrap_err();
        assert_eq!(err.offset, 2);
        let err = parse("t $ 1").unwrap_err();
        assert_eq!(err.offset, 2);
    }

    #[test]
    fn single_variable_rule() {
        assert!(parse("t + rho").is_err());
        assert!(parse_in("rho", "t").is_err());
        assert!(parse_in("2 - rho", "rho").is_ok());
    }

    #[test]
    fn literals() {
        assert_eq!(parse("1e-3").unwrap().eval(0.0).unwrap(), 1e-3);
        assert_eq!(parse("2.5E2").unwrap().eval(0.0).unwrap(), 250.0);
        assert!(parse("1e999").is_err());
        assert!(parse("1.2.3").is_err());
    }

    #[test]
    fn spans_cover_source() {
        let e = parse("  exp(t-4) ").unwrap();
        assert_eq!(e.span, Span::new(2, 10));
        let e = parse("(t)").unwrap();
        assert_eq!(e.span, Span::new(0, 3));
    }
}
