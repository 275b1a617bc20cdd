//! Right-continuous piecewise-constant functions of time, used for a(t) and σ(t).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TermError {
    #[error("piecewise-constant function needs {expected} values for {breaks} breaks, got {got}")]
    Shape {
        expected: usize,
        breaks: usize,
        got: usize,
    },
    #[error("breaks must be finite and strictly increasing")]
    Breaks,
    #[error("non-finite value in piecewise-constant function")]
    NonFinite,
}

/// `values[i]` holds on `[breaks[i-1], breaks[i])`, with `breaks[-1] = -inf`
/// and `breaks[len] = +inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstant {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseConstant {
    pub fn constant(v: f64) -> Self {
        Self {
            breaks: Vec::new(),
            values: vec![v],
        }
    }

    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self, TermError> {
        if values.len() != breaks.len() + 1 {
            return Err(TermError::Shape {
                expected: breaks.len() + 1,
                breaks: breaks.len(),
                got: values.len(),
            });
        }
        if breaks.iter().any(|x| !x.is_finite()) || breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TermError::Breaks);
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(TermError::NonFinite);
        }
        Ok(Self { breaks, values })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.breaks.partition_point(|&x| x <= t);
        self.values[i]
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn as_constant(&self) -> Option<f64> {
        if self.values.len() == 1 {
            Some(self.values[0])
        } else {
            None
        }
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
