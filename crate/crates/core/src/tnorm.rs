//! T-norms (fuzzy conjunction) and their dual t-conorms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TNormKind {
    Godel,
    Product,
    Lukasiewicz,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TNormError {
    #[error("degree {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("unknown t-norm `{0}` (expected godel, product or lukasiewicz)")]
    UnknownKind(String),
    #[error("unknown t-norm id {0}")]
    UnknownId(u8),
}

impl TNormKind {
    pub const ALL: [TNormKind; 3] = [TNormKind::Godel, TNormKind::Product, TNormKind::Lukasiewicz];

    pub fn id(self) -> u8 {
        match self {
            TNormKind::Godel => 0,
            TNormKind::Product => 1,
            TNormKind::Lukasiewicz => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self, TNormError> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or(TNormError::UnknownId(id))
    }

    #[inline]
    pub fn tnorm(self, x: f64, y: f64) -> f64 {
        match self {
            TNormKind::Godel => x.min(y),
            TNormKind::Product => x * y,
            TNormKind::Lukasiewicz => (x + y - 1.0).max(0.0),
        }
    }

    #[inline]
    pub fn tconorm(self, x: f64, y: f64) -> f64 {
        match self {
            TNormKind::Godel => x.max(y),
            TNormKind::Product => x + y - x * y,
            TNormKind::Lukasiewicz => (x + y).min(1.0),
        }
    }

    /// Partial derivatives of [`tnorm`](Self::tnorm). Ties of the Gödel
    /// minimum route the whole gradient to `x`.
    #[inline]
    pub fn tnorm_grad(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            TNormKind::Godel => {
                if x <= y {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            TNormKind::Product => (y, x),
            TNormKind::Lukasiewicz => {
                if x + y - 1.0 > 0.0 {
                    (1.0, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }

    /// Partial derivatives of [`tconorm`](Self::tconorm); Gödel ties go to `x`.
    #[inline]
    pub fn tconorm_grad(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            TNormKind::Godel => {
                if x >= y {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            TNormKind::Product => (1.0 - y, 1.0 - x),
            TNormKind::Lukasiewicz => {
                if x + y < 1.0 {
                    (1.0, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }

    /// N-ary conjunction, folded left from the first operand; the empty
    /// fold is 1.
    pub fn tnorm_fold(self, xs: impl IntoIterator<Item = f64>) -> f64 {
        let mut it = xs.into_iter();
        match it.next() {
            None => 1.0,
            Some(first) => it.fold(first, |acc, x| self.tnorm(acc, x)),
        }
    }

    /// N-ary disjunction, folded left from the first operand; the empty
    /// fold is 0.
    pub fn tconorm_fold(self, xs: impl IntoIterator<Item = f64>) -> f64 {
        let mut it = xs.into_iter();
        match it.next() {
            None => 0.0,
            Some(first) => it.fold(first, |acc, x| self.tconorm(acc, x)),
        }
    }

    pub fn checked_tnorm(self, x: f64, y: f64) -> Result<f64, TNormError> {
        check(x)?;
        check(y)?;
        Ok(self.tnorm(x, y))
    }

    pub fn checked_tconorm(self, x: f64, y: f64) -> Result<f64, TNormError> {
        check(x)?;
        check(y)?;
        Ok(self.tconorm(x, y))
    }
}

fn check(x: f64) -> Result<(), TNormError> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(TNormError::OutOfRange(x))
    }
}

impl fmt::Display for TNormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TNormKind::Godel => "godel",
            TNormKind::Product => "product",
            TNormKind::Lukasiewicz => "lukasiewicz",
        })
    }
}

impl FromStr for TNormKind {
    type Err = TNormError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "godel" | "goedel" | "gödel" | "min" => Ok(TNormKind::Godel),
            "product" | "prod" => Ok(TNormKind::Product),
            "lukasiewicz" | "luk" | "łukasiewicz" => Ok(TNormKind::Lukasiewicz),
            _ => Err(TNormError::UnknownKind(s.to_string())),
        }
    }
}
