use super::{BinaryOp, ExprNode, FormulaError, UnaryOp};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Pow,
    LParen,
    RParen,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    offset: usize,
}

fn syntax(offset: usize, message: impl Into<String>) -> FormulaError {
    FormulaError::Syntax {
        offset,
        message: message.into(),
    }
}

fn tokenize(text: &str) -> Result<Vec<Token>, FormulaError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let tok = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' if bytes.get(i + 1) == Some(&b'*') => {
                i += 1;
                Tok::Pow
            }
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Pow,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'0'..=b'9' | b'.' => {
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
                let lit = &text[start..i];
                let value: f64 = lit
                    .parse()
                    .map_err(|_| syntax(start, format!("malformed number `{lit}`")))?;
                out.push(Token {
                    tok: Tok::Num(value),
                    offset: start,
                });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(text[start..i].to_string()),
                    offset: start,
                });
                continue;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap();
                return Err(syntax(i, format!("unexpected character `{ch}`")));
            }
        };
        i += 1;
        out.push(Token { tok, offset: start });
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.tokens.get(self.pos + k).map(|t| &t.tok)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map(|t| t.offset).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), FormulaError> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(syntax(self.offset(), format!("expected {what}")))
        }
    }

    fn expr(&mut self) -> Result<ExprNode, FormulaError> {
        let mut left = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinaryOp::Add,
                Some(Tok::Minus) => BinaryOp::Sub,
                _ => return Ok(left),
            };
            self.pos += 1;
            let right = self.term()?;
            left = ExprNode::binary(op, left, right);
        }
    }

    fn term(&mut self) -> Result<ExprNode, FormulaError> {
        let mut left = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Star) => BinaryOp::Mul,
                Some(Tok::Slash) => BinaryOp::Div,
                _ => return Ok(left),
            };
            self.pos += 1;
            let right = self.unary()?;
            left = ExprNode::binary(op, left, right);
        }
    }

    fn unary(&mut self) -> Result<ExprNode, FormulaError> {
        match self.peek() {
            Some(Tok::Minus) => {
                // A minus directly on a literal that is not a power base folds
                // into a negative constant.
                if let Some(Tok::Num(v)) = self.peek_at(1) {
                    let v = *v;
                    if self.peek_at(2) != Some(&Tok::Pow) {
                        self.pos += 2;
                        return Ok(ExprNode::Constant(-v));
                    }
                }
                self.pos += 1;
                let child = self.unary()?;
                Ok(ExprNode::unary(UnaryOp::Neg, child))
            }
            Some(Tok::Plus) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<ExprNode, FormulaError> {
        let base = self.primary()?;
        if self.peek() == Some(&Tok::Pow) {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(ExprNode::binary(BinaryOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<ExprNode, FormulaError> {
        let offset = self.offset();
        match self.bump().map(|t| t.tok) {
            Some(Tok::Num(v)) => Ok(ExprNode::Constant(v)),
            Some(Tok::Ident(name)) => {
                if self.peek() == Some(&Tok::LParen) {
                    let op = UnaryOp::from_function_name(&name)
                        .ok_or(FormulaError::UnknownFunction { name, offset })?;
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen, "`)` closing function call")?;
                    Ok(ExprNode::unary(op, arg))
                } else {
                    Ok(ExprNode::Variable(name))
                }
            }
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some(other) => Err(syntax(offset, format!("unexpected token {other:?}"))),
            None => Err(syntax(offset, "unexpected end of input")),
        }
    }
}

/// Parses a plain formula string.
///
/// Precedence from loosest: `+ -`, `* /`, unary minus, power. Power (`^` or
/// `**`) is right-associative.
pub fn parse_formula(text: &str) -> Result<ExprNode, FormulaError> {
    let tokens = tokenize(text)?;
    if tokens.is_empty() {
        return Err(syntax(0, "empty formula"));
    }
    let mut p = Parser {
        tokens,
        pos: 0,
        end: text.len(),
    };
    let expr = p.expr()?;
    if p.pos < p.tokens.len() {
        return Err(syntax(p.offset(), "unexpected trailing input"));
    }
    Ok(expr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::evaluate_f64;
    use std::collections::HashMap;

    fn v(name: &str) -> ExprNode {
        ExprNode::var(name)
    }

    fn c(x: f64) -> ExprNode {
        ExprNode::Constant(x)
    }

    #[test]
    fn investment_rate_formula() {
        let e = parse_formula("(qa - 1)/kappa").unwrap();
        let want = ExprNode::binary(
            BinaryOp::Div,
            ExprNode::binary(BinaryOp::Sub, v("qa"), c(1.0)),
            v("kappa"),
        );
        assert_eq!(e, want);
    }

    #[test]
    fn single_identifier() {
        assert_eq!(parse_formula("x").unwrap(), v("x"));
        assert_eq!(parse_formula("  x \n").unwrap(), v("x"));
    }

    #[test]
    fn arithmetic_examples() {
        let empty = HashMap::new();
        let e = parse_formula("2**3 + sin(0)").unwrap();
        assert_eq!(evaluate_f64(&e, &empty).unwrap(), 8.0);
        assert_eq!(evaluate_f64(&parse_formula("2^3^2").unwrap(), &empty).unwrap(), 512.0);
        assert_eq!(evaluate_f64(&parse_formula("-2^2").unwrap(), &empty).unwrap(), -4.0);
        assert_eq!(evaluate_f64(&parse_formula("2^-1").unwrap(), &empty).unwrap(), 0.5);
        assert_eq!(evaluate_f64(&parse_formula("1.5e2 - .5").unwrap(), &empty).unwrap(), 149.5);
        assert_eq!(evaluate_f64(&parse_formula("8/4/2").unwrap(), &empty).unwrap(), 1.0);
        assert_eq!(evaluate_f64(&parse_formula("10-4-3").unwrap(), &empty).unwrap(), 3.0);
    }

    #[test]
    fn precedence_matches_explicit_grouping() {
        assert_eq!(parse_formula("a+b*c").unwrap(), parse_formula("a+(b*c)").unwrap());
        assert_eq!(parse_formula("a*b^c").unwrap(), parse_formula("a*(b^c)").unwrap());
        assert_eq!(parse_formula("-a^b").unwrap(), parse_formula("-(a^b)").unwrap());
        assert_eq!(parse_formula("a**b").unwrap(), parse_formula("a^b").unwrap());
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse_formula("(a + b").unwrap_err() {
            FormulaError::Syntax { offset, .. } => assert_eq!(offset, 6),
            e => panic!("unexpected {e:?}"),
        }
        match parse_formula("a + $").unwrap_err() {
            FormulaError::Syntax { offset, .. } => assert_eq!(offset, 4),
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(parse_formula("a b"), Err(FormulaError::Syntax { offset: 2, .. })));
        assert!(matches!(parse_formula(""), Err(FormulaError::Syntax { .. })));
        assert!(matches!(parse_formula("1.2.3"), Err(FormulaError::Syntax { offset: 0, .. })));
    }

    #[test]
    fn unknown_function_is_rejected() {
        assert_eq!(
            parse_formula("x + floor(y)").unwrap_err(),
            FormulaError::UnknownFunction {
                name: "floor".into(),
                offset: 4
            }
        );
    }
}
