//! Log-domain scalar arithmetic.
//!
//! Every score in this crate lives in the log domain: probabilities and
//! unnormalized path scores are combined with `logadd` (sum semiring) or
//! `max` (tropical semiring), never by exponentiating back to linear space.
//! `f64::NEG_INFINITY` plays the role of log(0) and is absorbed by `logadd`.

use crate::error::CoreError;

/// A score in the log domain. `NEG_INF` encodes log(0).
pub type LogScore = f64;

/// log(0): the additive identity of `logadd`.
pub const NEG_INF: LogScore = f64::NEG_INFINITY;

/// Absolute log-domain tolerance below which `logsubexp` treats its
/// arguments as exactly cancelling.
pub const CANCEL_TOL: f64 = 1e-9;

/// `log(e^a + e^b)`, stable for large magnitudes.
#[inline]
pub fn logadd(a: LogScore, b: LogScore) -> LogScore {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log Σ e^{x_i}` over a sequence; empty input yields `NEG_INF`.
pub fn logadd_many(xs: impl IntoIterator<Item = LogScore> + Clone) -> LogScore {
    let mut hi = NEG_INF;
    for x in xs.clone() {
        if x > hi {
            hi = x;
        }
    }
    if hi == NEG_INF {
        return NEG_INF;
    }
    let mut sum = 0.0;
    for x in xs {
        sum += (x - hi).exp();
    }
    hi + sum.ln()
}

/// `log(e^a − e^b)` for `a ≥ b`.
///
/// Differences within [`CANCEL_TOL`] collapse to `NEG_INF`; `b` exceeding
/// `a` by more than the tolerance signals a broken invariant upstream.
pub fn logsubexp(a: LogScore, b: LogScore) -> Result<LogScore, CoreError> {
    if b == NEG_INF {
        return Ok(a);
    }
    if b - a > CANCEL_TOL {
        return Err(CoreError::Numeric(format!(
            "logsubexp: subtrahend exceeds minuend ({b} > {a})"
        )));
    }
    if a - b < CANCEL_TOL {
        return Ok(NEG_INF);
    }
    Ok(a + (-(b - a).exp()).ln_1p())
}

/// Gradient of [`logadd_many`]: the softmax of its inputs.
///
/// `NEG_INF` entries get weight exactly 0. All-`NEG_INF` input is an error
/// since the softmax is undefined there.
pub fn dlogadd(xs: &[LogScore]) -> Result<Vec<f64>, CoreError> {
    let hi = xs.iter().copied().fold(NEG_INF, f64::max);
    if hi == NEG_INF {
        return Err(CoreError::Numeric(
            "dlogadd: all inputs are log(0)".to_string(),
        ));
    }
    let mut w: Vec<f64> = xs.iter().map(|&x| (x - hi).exp()).collect();
    let z: f64 = w.iter().sum();
    for wi in &mut w {
        *wi /= z;
    }
    Ok(w)
}
