//! Cholesky factorization with deterministic jitter escalation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Base jitter as a fraction of the average diagonal.
pub const JITTER_FRACTION: f64 = 1e-10;
const MAX_ESCALATIONS: usize = 3;

pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    /// Jitter actually added to the diagonal.
    pub jitter: f64,
}

impl Factor {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }
}

/// Factor `c + jitter·I` with jitter `fraction·trace(c)/n`, escalating ×10 up
/// to three times before giving up.
pub fn factor_with_jitter(c: &DMatrix<f64>, fraction: f64) -> Result<Factor> {
    escalate(c, fraction, false)
}

/// Factor `c` as is when it is numerically positive definite; otherwise fall
/// back to [`factor_with_jitter`] at the default fraction.
pub fn factor(c: &DMatrix<f64>) -> Result<Factor> {
    escalate(c, JITTER_FRACTION, true)
}

fn escalate(c: &DMatrix<f64>, fraction: f64, try_plain: bool) -> Result<Factor> {
    let n = c.nrows();
    if n == 0 {
        return Err(Error::EmptyPositions);
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    if try_plain {
        if let Some(chol) = Cholesky::new(c.clone()) {
            return Ok(Factor { chol, jitter: 0.0 });
        }
    }
    let avg_diag = c.trace() / n as f64;
    let mut jitter = fraction * avg_diag.abs();
    for _ in 0..=MAX_ESCALATIONS {
        let mut m = c.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(Factor { chol, jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite)
}
