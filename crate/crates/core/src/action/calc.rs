//! Arithmetic for `calc_eval`: decimal literals, `+ - * /`, unary sign and
//! parentheses, evaluated in `f64`.

use alloc::format;
use alloc::string::String;

const MAX_DEPTH: usize = 64;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CalcError {
    #[error("syntax error at byte {0}")]
    Syntax(usize),
    #[error("division by zero")]
    DivisionByZero,
    #[error("result is not finite")]
    NonFinite,
    #[error("expression nests too deeply")]
    TooDeep,
}

pub fn evaluate(expr: &str) -> Result<f64, CalcError> {
    let mut p = Calc {
        src: expr.as_bytes(),
        pos: 0,
        depth: 0,
    };
    let value = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(CalcError::Syntax(p.pos));
    }
    if !value.is_finite() {
        return Err(CalcError::NonFinite);
    }
    Ok(value)
}

/// Integral values print without a fractional part; others use the
/// shortest round-tripping decimal.
pub fn format_number(value: f64) -> String {
    if value == libm::trunc(value) && libm::fabs(value) < 1e15 {
        format!("{}", value as i64)
    } else {
        format!("{value}")
    }
}

struct Calc<'a> {
    src: &'a [u8],
    pos: usize,
    depth: usize,
}

impl Calc<'_> {
    fn skip_ws(&mut self) {
        while self.src.get(self.pos).is_some_and(|b| b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<f64, CalcError> {
        let mut acc = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            acc = if op == b'+' { acc + rhs } else { acc - rhs };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<f64, CalcError> {
        let mut acc = self.factor()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.factor()?;
            if op == b'*' {
                acc *= rhs;
            } else {
                if rhs == 0.0 {
                    return Err(CalcError::DivisionByZero);
                }
                acc /= rhs;
            }
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<f64, CalcError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(CalcError::TooDeep);
        }
        let value = match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                -self.factor()?
            }
            Some(b'+') => {
                self.pos += 1;
                self.factor()?
            }
            Some(b'(') => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(CalcError::Syntax(self.pos));
                }
                self.pos += 1;
                v
            }
            Some(b'0'..=b'9' | b'.') => self.number()?,
            _ => return Err(CalcError::Syntax(self.pos)),
        };
        self.depth -= 1;
        Ok(value)
    }

    fn number(&mut self) -> Result<f64, CalcError> {
        let start = self.pos;
        let mut digits = 0;
        let mut dot = false;
        while let Some(&b) = self.src.get(self.pos) {
            match b {
                b'0'..=b'9' => digits += 1,
                b'.' if !dot => dot = true,
                _ => break,
            }
            self.pos += 1;
        }
        if digits == 0 {
            return Err(CalcError::Syntax(start));
        }
        let text = core::str::from_utf8(&self.src[start..self.pos]).map_err(|_| CalcError::Syntax(start))?;
        text.parse().map_err(|_| CalcError::Syntax(start))
    }
}
