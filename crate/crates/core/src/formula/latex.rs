//! Textual rewrite of a LaTeX math subset into plain formula syntax.
//!
//! Default symbol naming:
//!
//! | LaTeX                                   | name          |
//! |-----------------------------------------|---------------|
//! | `\eta`, `\Phi`                          | `eta`, `Phi`  |
//! | `q_t`                                   | `q` (time subscript dropped) |
//! | `\sigma_t^{qa}`, `w_t^{ia}`             | `sigma_qa`, `w_ia` |
//! | `\mu_t^{\xi i}`, `\sigma_{x,1}`         | `mu_xii`, `sigma_x1` |
//! | `\hat{e}`, `\tilde{\sigma_n}`, `\bar{v}`, `\underline{a}` | `e_hat`, `sigma_n_tilde`, `v_bar`, `a_under` |
//! | `\mathrm{word}`                         | `word`        |
//! | `\frac{\partial q}{\partial \eta}`      | `q_eta`       |
//! | `\frac{\partial^2 q}{\partial \eta^2}`  | `q_etaeta`    |
//! | `\frac{\partial^2 p}{\partial v \partial x}` | `p_xv` (innermost derivative first) |
//!
//! A superscript made only of letters or Greek commands extends the name;
//! any other superscript is a power. `e^{...}` becomes `exp(...)`. Single
//! letters next to each other multiply, as in LaTeX: `\kappa\iota` is
//! `kappa*iota`. Supported commands: the Greek letters, `\frac`, `\dfrac`,
//! `\sqrt`, `\log`, `\ln`, `\exp`, `\sin`, `\cos`, `\tanh`, `\left`,
//! `\right`, `\cdot`, `\times`, `\partial` (inside `\frac` only), the accents
//! above, `\mathrm` and the spacing commands `\,` `\;` `\:` `\!`.

use std::collections::BTreeMap;

use super::{parse_formula, ExprNode, FormulaError};

/// Explicit symbol names. Keys are either the LaTeX source of a symbol with
/// whitespace removed (`q_t^a`) or its default name (`q_a`).
pub type NameMap = BTreeMap<String, String>;

pub const GREEK_LETTERS: [&str; 40] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "varepsilon", "zeta", "eta", "theta", "vartheta", "iota", "kappa",
    "lambda", "mu", "nu", "xi", "pi", "varpi", "rho", "varrho", "sigma", "varsigma", "tau", "upsilon", "phi",
    "varphi", "chi", "psi", "omega", "Gamma", "Delta", "Theta", "Lambda", "Xi", "Pi", "Sigma", "Upsilon", "Phi",
    "Psi", "Omega",
];

const ACCENTS: [(&str, &str); 5] = [
    ("hat", "hat"),
    ("tilde", "tilde"),
    ("bar", "bar"),
    ("underline", "under"),
    ("overline", "bar"),
];

const FUNCTIONS: [(&str, &str); 7] = [
    ("log", "log"),
    ("ln", "log"),
    ("exp", "exp"),
    ("sin", "sin"),
    ("cos", "cos"),
    ("tanh", "tanh"),
    ("sqrt", "sqrt"),
];

fn is_greek(cmd: &str) -> bool {
    GREEK_LETTERS.contains(&cmd)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Cmd(String),
    Letter(char),
    Digit(char),
    Dot,
    Op(char),
    LBrace,
    RBrace,
    LParen,
    RParen,
    Caret,
    Underscore,
    Comma,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    start: usize,
    end: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, FormulaError> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut depth: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        let end_of = |j: usize| chars.get(j).map(|&(o, _)| o).unwrap_or(text.len());
        let tok = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '\\' => {
                let mut j = i + 1;
                while j < chars.len() && chars[j].1.is_ascii_alphabetic() {
                    j += 1;
                }
                if j == i + 1 {
                    // control symbol: spacing or escaped brace
                    let Some(&(_, sym)) = chars.get(i + 1) else {
                        return Err(FormulaError::Syntax {
                            offset: start,
                            message: "dangling backslash".into(),
                        });
                    };
                    i += 2;
                    match sym {
                        ',' | ';' | ':' | '!' | ' ' => continue,
                        _ => {
                            return Err(FormulaError::UnsupportedCommand {
                                command: sym.to_string(),
                                offset: start,
                            })
                        }
                    }
                }
                let name: String = chars[i + 1..j].iter().map(|&(_, c)| c).collect();
                let end = end_of(j);
                i = j;
                out.push(Token {
                    tok: Tok::Cmd(name),
                    start,
                    end,
                });
                continue;
            }
            c if c.is_ascii_alphabetic() => Tok::Letter(c),
            c if c.is_ascii_digit() => Tok::Digit(c),
            '.' => Tok::Dot,
            '+' | '-' | '*' | '/' => Tok::Op(c),
            '{' => {
                depth.push(start);
                Tok::LBrace
            }
            '}' => {
                if depth.pop().is_none() {
                    return Err(FormulaError::UnbalancedBraces { offset: start });
                }
                Tok::RBrace
            }
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '^' => Tok::Caret,
            '_' => Tok::Underscore,
            ',' => Tok::Comma,
            other => {
                return Err(FormulaError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        i += 1;
        out.push(Token {
            tok,
            start,
            end: end_of(i),
        });
    }
    if let Some(offset) = depth.pop() {
        return Err(FormulaError::UnbalancedBraces { offset });
    }
    Ok(out)
}

/// Symbol read from the input: its name and any trailing non-name superscript.
struct Symbol {
    name: String,
    power: Option<Vec<Token>>,
}

struct Emitter<'a> {
    text: &'a str,
    tokens: Vec<Token>,
    pos: usize,
    names: &'a NameMap,
}

#[derive(PartialEq, Clone, Copy)]
enum Stop {
    End,
    Brace,
    Paren,
}

impl<'a> Emitter<'a> {
    fn sub(&self, tokens: Vec<Token>) -> Emitter<'a> {
        Emitter {
            text: self.text,
            tokens,
            pos: 0,
            names: self.names,
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|t| t.start)
            .or_else(|| self.tokens.last().map(|t| t.end))
            .unwrap_or(0)
    }

    fn err(&self, message: impl Into<String>) -> FormulaError {
        FormulaError::Syntax {
            offset: self.offset(),
            message: message.into(),
        }
    }

    fn is_cmd(&self, name: &str) -> bool {
        matches!(self.peek(), Some(Tok::Cmd(c)) if c == name)
    }

    /// Tokens of a `{...}` group (braces stripped) or a single token.
    fn argument(&mut self) -> Result<Vec<Token>, FormulaError> {
        match self.peek() {
            Some(Tok::LBrace) => {
                let mut depth = 0usize;
                let start = self.pos;
                loop {
                    match self.peek() {
                        Some(Tok::LBrace) => depth += 1,
                        Some(Tok::RBrace) => {
                            depth -= 1;
                            if depth == 0 {
                                let inner = self.tokens[start + 1..self.pos].to_vec();
                                self.pos += 1;
                                return Ok(inner);
                            }
                        }
                        Some(_) => {}
                        None => return Err(FormulaError::UnbalancedBraces { offset: self.tokens[start].start }),
                    }
                    self.pos += 1;
                }
            }
            Some(_) => {
                let t = self.tokens[self.pos].clone();
                self.pos += 1;
                Ok(vec![t])
            }
            None => Err(self.err("expected an argument")),
        }
    }

    fn seq(&mut self, stop: Stop) -> Result<String, FormulaError> {
        let mut out = String::new();
        let mut last_operand = false;
        loop {
            let Some(tok) = self.peek().cloned() else {
                if stop == Stop::End {
                    return Ok(out);
                }
                return Err(self.err("unexpected end of input"));
            };
            match tok {
                Tok::RBrace if stop == Stop::Brace => {
                    self.pos += 1;
                    return Ok(out);
                }
                Tok::RParen if stop == Stop::Paren => {
                    self.pos += 1;
                    return Ok(out);
                }
                Tok::Cmd(ref c) if c == "right" => {
                    if stop != Stop::Paren {
                        return Err(self.err("`\\right` without matching `\\left`"));
                    }
                    self.pos += 1;
                    if self.peek() != Some(&Tok::RParen) {
                        return Err(self.err("only `\\right)` is supported"));
                    }
                    self.pos += 1;
                    return Ok(out);
                }
                Tok::Op(c) => {
                    self.pos += 1;
                    out.push(c);
                    last_operand = false;
                }
                Tok::Cmd(ref c) if c == "cdot" || c == "times" => {
                    self.pos += 1;
                    out.push('*');
                    last_operand = false;
                }
                Tok::RBrace | Tok::RParen | Tok::Caret | Tok::Underscore | Tok::Comma => {
                    return Err(self.err(format!("unexpected {tok:?}")));
                }
                _ => {
                    let operand = self.operand()?;
                    if last_operand {
                        out.push('*');
                    }
                    out.push_str(&operand);
                    last_operand = true;
                }
            }
        }
    }

    /// One operand with any power applied to it.
    fn operand(&mut self) -> Result<String, FormulaError> {
        let start = self.offset();
        let tok = self.peek().cloned().ok_or_else(|| self.err("expected operand"))?;
        let base = match tok {
            Tok::Digit(_) | Tok::Dot => {
                let mut lit = String::new();
                while let Some(Tok::Digit(d)) = self.peek() {
                    lit.push(*d);
                    self.pos += 1;
                    if self.peek() == Some(&Tok::Dot) {
                        lit.push('.');
                        self.pos += 1;
                    }
                }
                if lit.is_empty() {
                    // leading dot
                    self.pos += 1;
                    lit.push('.');
                    while let Some(Tok::Digit(d)) = self.peek() {
                        lit.push(*d);
                        self.pos += 1;
                    }
                }
                lit
            }
            Tok::LParen => {
                self.pos += 1;
                format!("({})", self.seq(Stop::Paren)?)
            }
            Tok::LBrace => {
                self.pos += 1;
                format!("({})", self.seq(Stop::Brace)?)
            }
            Tok::Cmd(ref c) if c == "left" => {
                self.pos += 1;
                if self.peek() != Some(&Tok::LParen) {
                    return Err(self.err("only `\\left(` is supported"));
                }
                self.pos += 1;
                format!("({})", self.seq(Stop::Paren)?)
            }
            Tok::Cmd(ref c) if c == "frac" || c == "dfrac" => {
                self.pos += 1;
                let num = self.argument()?;
                let den = self.argument()?;
                if matches!(num.first().map(|t| &t.tok), Some(Tok::Cmd(p)) if p == "partial") {
                    self.partial_derivative(num, den, start)?
                } else {
                    let n = self.sub(num).seq(Stop::End)?;
                    let d = self.sub(den).seq(Stop::End)?;
                    format!("(({n})/({d}))")
                }
            }
            Tok::Cmd(ref c) if FUNCTIONS.iter().any(|(f, _)| f == c) => {
                let fname = FUNCTIONS.iter().find(|(f, _)| f == c).unwrap().1;
                self.pos += 1;
                let arg = match self.peek() {
                    Some(Tok::LBrace) => {
                        self.pos += 1;
                        self.seq(Stop::Brace)?
                    }
                    Some(Tok::LParen) => {
                        self.pos += 1;
                        self.seq(Stop::Paren)?
                    }
                    Some(Tok::Cmd(l)) if l == "left" => {
                        self.pos += 1;
                        if self.peek() != Some(&Tok::LParen) {
                            return Err(self.err("only `\\left(` is supported"));
                        }
                        self.pos += 1;
                        self.seq(Stop::Paren)?
                    }
                    _ => self.operand()?,
                };
                format!("{fname}({arg})")
            }
            Tok::Cmd(ref c) if c == "partial" => {
                return Err(self.err("`\\partial` is only supported inside `\\frac`"));
            }
            Tok::Letter(_) | Tok::Cmd(_) => {
                let sym = self.symbol()?;
                return match sym.power {
                    None => Ok(sym.name),
                    Some(p) => {
                        let exponent = self.sub(p).seq(Stop::End)?;
                        if sym.name == "e" {
                            Ok(format!("exp({exponent})"))
                        } else {
                            Ok(format!("({})^({exponent})", sym.name))
                        }
                    }
                };
            }
            other => return Err(self.err(format!("unexpected {other:?}"))),
        };
        if self.peek() == Some(&Tok::Caret) {
            self.pos += 1;
            let p = self.argument()?;
            let exponent = self.sub(p).seq(Stop::End)?;
            return Ok(format!("({base})^({exponent})"));
        }
        Ok(base)
    }

    /// Reads a symbol and its sub/superscripts.
    fn symbol(&mut self) -> Result<Symbol, FormulaError> {
        let start_tok = self.pos;
        let base = match self.peek().cloned() {
            Some(Tok::Letter(c)) => {
                self.pos += 1;
                c.to_string()
            }
            Some(Tok::Cmd(c)) if is_greek(&c) => {
                self.pos += 1;
                c
            }
            Some(Tok::Cmd(c)) if c == "mathrm" || c == "text" => {
                self.pos += 1;
                let arg = self.argument()?;
                let mut word = String::new();
                for t in &arg {
                    match &t.tok {
                        Tok::Letter(c) | Tok::Digit(c) => word.push(*c),
                        _ => return Err(self.err("`\\mathrm` accepts letters and digits only")),
                    }
                }
                word
            }
            Some(Tok::Cmd(c)) if ACCENTS.iter().any(|(a, _)| *a == c) => {
                let suffix = ACCENTS.iter().find(|(a, _)| *a == c).unwrap().1;
                self.pos += 1;
                let arg = self.argument()?;
                let mut inner = self.sub(arg);
                let sym = inner.symbol()?;
                if sym.power.is_some() || inner.pos < inner.tokens.len() {
                    return Err(self.err(format!("`\\{c}` must wrap a single symbol")));
                }
                format!("{}_{suffix}", sym.name)
            }
            Some(Tok::Cmd(c)) => {
                return Err(FormulaError::UnsupportedCommand {
                    command: c,
                    offset: self.offset(),
                })
            }
            _ => return Err(self.err("expected a symbol")),
        };

        let mut parts = String::new();
        let mut power = None;
        let mut end_tok = self.pos;
        loop {
            match self.peek() {
                Some(Tok::Underscore) => {
                    self.pos += 1;
                    let arg = self.argument()?;
                    let text = self.script_name(&arg, true)?;
                    if text != "t" {
                        parts.push_str(&text);
                    }
                    end_tok = self.pos;
                }
                Some(Tok::Caret) if power.is_none() => {
                    let save = self.pos;
                    self.pos += 1;
                    let arg = self.argument()?;
                    if arg.iter().all(|t| matches!(&t.tok, Tok::Letter(_)) || matches!(&t.tok, Tok::Cmd(c) if is_greek(c))) {
                        parts.push_str(&self.script_name(&arg, false)?);
                        end_tok = self.pos;
                    } else {
                        let _ = save;
                        power = Some(arg);
                        // a subscript may still follow (x^2_t is unusual; stop here)
                        break;
                    }
                }
                _ => break,
            }
        }
        let default = if parts.is_empty() { base } else { format!("{base}_{parts}") };
        let raw: String = self.tokens[start_tok..end_tok]
            .iter()
            .map(|t| &self.text[t.start..t.end])
            .collect::<String>()
            .split_whitespace()
            .collect();
        let name = self
            .names
            .get(&raw)
            .or_else(|| self.names.get(&default))
            .cloned()
            .unwrap_or(default);
        Ok(Symbol { name, power })
    }

    fn script_name(&self, tokens: &[Token], allow_digits: bool) -> Result<String, FormulaError> {
        let mut out = String::new();
        for t in tokens {
            match &t.tok {
                Tok::Letter(c) => out.push(*c),
                Tok::Digit(c) if allow_digits => out.push(*c),
                Tok::Comma => {}
                Tok::Cmd(c) if is_greek(c) => out.push_str(c),
                Tok::Cmd(c) => {
                    return Err(FormulaError::UnsupportedCommand {
                        command: c.clone(),
                        offset: t.start,
                    })
                }
                other => {
                    return Err(FormulaError::Syntax {
                        offset: t.start,
                        message: format!("unsupported token {other:?} in subscript"),
                    })
                }
            }
        }
        Ok(out)
    }

    fn partial_derivative(&self, num: Vec<Token>, den: Vec<Token>, offset: usize) -> Result<String, FormulaError> {
        let mut n = self.sub(num);
        n.pos = 1; // skip \partial
        let mut declared = None;
        if n.peek() == Some(&Tok::Caret) {
            n.pos += 1;
            let arg = n.argument()?;
            declared = Some(parse_count(&arg, offset)?);
        }
        let var = n.symbol()?;
        if var.power.is_some() || n.pos < n.tokens.len() {
            return Err(FormulaError::Syntax {
                offset,
                message: "numerator of a partial derivative must be `\\partial` and one symbol".into(),
            });
        }

        let mut d = self.sub(den);
        let mut wrt: Vec<String> = Vec::new();
        while d.pos < d.tokens.len() {
            if !d.is_cmd("partial") {
                return Err(d.err("expected `\\partial` in derivative denominator"));
            }
            d.pos += 1;
            let sym = d.symbol()?;
            let count = match sym.power {
                Some(p) => parse_count(&p, offset)?,
                None => 1,
            };
            for _ in 0..count {
                wrt.push(sym.name.clone());
            }
        }
        if wrt.is_empty() {
            return Err(FormulaError::Syntax {
                offset,
                message: "empty derivative denominator".into(),
            });
        }
        if let Some(k) = declared {
            if k != wrt.len() {
                return Err(FormulaError::Syntax {
                    offset,
                    message: format!("derivative order {k} does not match {} differentials", wrt.len()),
                });
            }
        }
        // innermost differential is written last
        wrt.reverse();
        Ok(format!("{}_{}", var.name, wrt.concat()))
    }
}

fn parse_count(tokens: &[Token], offset: usize) -> Result<usize, FormulaError> {
    let digits: String = tokens
        .iter()
        .map(|t| match t.tok {
            Tok::Digit(c) => Ok(c),
            _ => Err(FormulaError::Syntax {
                offset,
                message: "derivative order must be a positive integer".into(),
            }),
        })
        .collect::<Result<_, _>>()?;
    digits.parse().map_err(|_| FormulaError::Syntax {
        offset,
        message: "derivative order must be a positive integer".into(),
    })
}

/// Rewrites LaTeX into a plain formula string.
pub fn normalize_latex(text: &str, names: &NameMap) -> Result<String, FormulaError> {
    let tokens = tokenize(text)?;
    if tokens.is_empty() {
        return Err(FormulaError::Syntax {
            offset: 0,
            message: "empty formula".into(),
        });
    }
    let mut e = Emitter {
        text,
        tokens,
        pos: 0,
        names,
    };
    e.seq(Stop::End)
}

/// Parses LaTeX by normalising it and delegating to [`parse_formula`].
pub fn parse_latex(text: &str, names: &NameMap) -> Result<ExprNode, FormulaError> {
    let plain = normalize_latex(text, names)?;
    parse_formula(&plain)
}
