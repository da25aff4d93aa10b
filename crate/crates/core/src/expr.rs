//! Small scalar expression language for the rate functions b(x, y), θ(x) and
//! the mutation scale s(x).

use std::fmt;

use thiserror::Error;

/// Value substituted for `a / 0` (times the sign of `a`).
pub const DIV_GUARD: f64 = 1e300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {msg}")]
    Syntax { offset: usize, msg: String },
    #[error("unknown identifier '{name}' at offset {offset}")]
    UnknownIdent { name: String, offset: usize },
    #[error("function '{name}' expects {expected} argument(s), got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("validation failed: minimum {min} minus margin {margin} is not positive")]
    ValidationFailed { min: f64, margin: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Y => "y",
        }
    }
}

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
    Tanh,
    Exp,
    Sin,
    Cos,
    Abs,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Guarded division: `a / 0 = sign(a) * DIV_GUARD`, `0 / 0 = 0`.
pub fn guarded_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a > 0.0 {
            DIV_GUARD
        } else if a < 0.0 {
            -DIV_GUARD
        } else {
            0.0
        }
    } else {
        a / b
    }
}

/// Guarded power with `0^0 = 1`.
pub fn guarded_pow(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        1.0
    } else {
        a.powf(b)
    }
}

impl Expr {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(Var::X) => x,
            Expr::Var(Var::Y) => y,
            Expr::Neg(e) => -e.eval(x, y),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(x, y), b.eval(x, y));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => guarded_div(a, b),
                    BinOp::Pow => guarded_pow(a, b),
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(x, y);
                match f {
                    Func::Tanh => a.tanh(),
                    Func::Exp => a.exp(),
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Abs => a.abs(),
                    Func::Min => a.min(args[1].eval(x, y)),
                    Func::Max => a.max(args[1].eval(x, y)),
                }
            }
        }
    }

    pub fn eval1(&self, x: f64) -> f64 {
        self.eval(x, 0.0)
    }

    pub fn uses(&self, v: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(e) => e.uses(v),
            Expr::Bin(_, a, b) => a.uses(v) || b.uses(v),
            Expr::Call(_, args) => args.iter().any(|a| a.uses(v)),
        }
    }

    /// True when the expression contains no variable.
    pub fn is_constant(&self) -> bool {
        !self.uses(Var::X) && !self.uses(Var::Y)
    }
}

/// Canonical printer: every compound node is parenthesized.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let mut k = 0;
    while k < chars.len() {
        let (off, c) = chars[k];
        if c.is_whitespace() {
            k += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = k;
            while k < chars.len() && (chars[k].1.is_ascii_digit() || chars[k].1 == '.') {
                k += 1;
            }
            if k < chars.len() && (chars[k].1 == 'e' || chars[k].1 == 'E') {
                let mut j = k + 1;
                if j < chars.len() && (chars[j].1 == '+' || chars[j].1 == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].1.is_ascii_digit() {
                    k = j;
                    while k < chars.len() && chars[k].1.is_ascii_digit() {
                        k += 1;
                    }
                }
            }
            let end = if k < chars.len() { chars[k].0 } else { src.len() };
            let text = &src[off..end];
            let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                offset: chars[start].0,
                msg: format!("bad number '{text}'"),
            })?;
            if !v.is_finite() {
                return Err(ExprError::Syntax { offset: off, msg: format!("number '{text}' overflows") });
            }
            out.push((Tok::Num(v), off));
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let mut end = src.len();
            while k < chars.len() && (chars[k].1.is_alphanumeric() || chars[k].1 == '_') {
                k += 1;
            }
            if k < chars.len() {
                end = chars[k].0;
            }
            out.push((Tok::Ident(src[off..end].to_string()), off));
            continue;
        }
        let tok = match c {
            '+' => Tok::Op('+'),
            '-' | '−' => Tok::Op('-'),
            '*' | '×' => Tok::Op('*'),
            '/' | '÷' => Tok::Op('/'),
            '^' => Tok::Op('^'),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            _ => {
                return Err(ExprError::Syntax { offset: off, msg: format!("unexpected character '{c}'") })
            }
        };
        out.push((tok, off));
        k += 1;
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    vars: &'a [Var],
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, msg: &str) -> Result<T, ExprError> {
        Err(ExprError::Syntax { offset: self.offset(), msg: msg.to_string() })
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
        match self.peek() {
            Tok::Op('-') => {
                self.bump();
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Tok::Op('+') => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    // `^` binds tighter than unary minus on its left and is right-associative.
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
        let off = self.offset();
        match self.bump() {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let e = self.expr()?;
                if *self.peek() != Tok::RParen {
                    return self.err("expected ')'");
                }
                self.bump();
                Ok(e)
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    let func = Func::lookup(&name)
                        .ok_or(ExprError::UnknownIdent { name: name.clone(), offset: off })?;
                    self.bump();
                    let mut args = vec![self.expr()?];
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    if *self.peek() != Tok::RParen {
                        return self.err("expected ')' or ','");
                    }
                    self.bump();
                    if args.len() != func.arity() {
                        return Err(ExprError::Arity {
                            name,
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                let var = match name.as_str() {
                    "x" => Var::X,
                    "y" => Var::Y,
                    _ => return Err(ExprError::UnknownIdent { name, offset: off }),
                };
                if !self.vars.contains(&var) {
                    return Err(ExprError::UnknownIdent { name, offset: off });
                }
                Ok(Expr::Var(var))
            }
            Tok::End => Err(ExprError::Syntax { offset: off, msg: "unexpected end of input".into() }),
            t => Err(ExprError::Syntax { offset: off, msg: format!("unexpected token {t:?}") }),
        }
    }
}

/// Parse `src` allowing only the variables in `vars`.
pub fn parse_with(src: &str, vars: &[Var]) -> Result<Expr, ExprError> {
    let toks = tokenize(src)?;
    let mut p = Parser { toks, pos: 0, vars };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return p.err("trailing input");
    }
    Ok(e)
}

/// Parse an expression over `{x, y}`.
pub fn parse(src: &str) -> Result<Expr, ExprError> {
    parse_with(src, &[Var::X, Var::Y])
}

/// Parse an expression over `{x}` only.
pub fn parse_x(src: &str) -> Result<Expr, ExprError> {
    parse_with(src, &[Var::X])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Rect {
    pub fn square(lo: f64, hi: f64) -> Self {
        Rect { x: (lo, hi), y: (lo, hi) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BoundsReport {
    pub min_observed: f64,
    pub max_observed: f64,
    pub grid_step: f64,
    pub margin: f64,
}

/// Scan `e` on a `grid_n × grid_n` grid (a single axis when `y` is unused).
/// Non-finite values count as a failure.
pub fn scan_bounds(e: &Expr, domain: Rect, grid_n: usize, margin: f64) -> BoundsReport {
    assert!(grid_n >= 2, "grid_n must be at least 2");
    let step_x = (domain.x.1 - domain.x.0) / (grid_n - 1) as f64;
    let step_y = (domain.y.1 - domain.y.0) / (grid_n - 1) as f64;
    let ny = if e.uses(Var::Y) { grid_n } else { 1 };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..grid_n {
        let x = domain.x.0 + i as f64 * step_x;
        for j in 0..ny {
            let y = domain.y.0 + j as f64 * step_y;
            let v = e.eval(x, y);
            if v.is_nan() {
                lo = f64::NEG_INFINITY;
                continue;
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    BoundsReport { min_observed: lo, max_observed: hi, grid_step: step_x.max(step_y), margin }
}

/// Like [`scan_bounds`] but fails when `min - margin <= 0` or a value is not finite.
pub fn check_bounds(e: &Expr, domain: Rect, grid_n: usize, margin: f64) -> Result<BoundsReport, ExprError> {
    let r = scan_bounds(e, domain, grid_n, margin);
    if !(r.min_observed - margin > 0.0) || !r.max_observed.is_finite() {
        return Err(ExprError::ValidationFailed { min: r.min_observed, margin });
    }
    Ok(r)
}
