//! Core domain constants: the volatility band with its sublinear generator,
//! time partitions for cylindrical payoffs, and the Riemann-series constants
//! entering the maximal-inequality bounds.

mod payoff;

pub use payoff::{ExprNode, PayoffExpr};

use serde::Serialize;

use crate::error::{Error, Result};

/// Volatility uncertainty interval `[sigma_min, sigma_max]` (per sqrt time unit).
///
/// The squared band `[sigma_min^2, sigma_max^2]` is the variance interval of the
/// one-dimensional sublinear normal distribution; `g` below is its generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VolatilityBand {
    sigma_min: f64,
    sigma_max: f64,
}

impl VolatilityBand {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min.is_finite() && sigma_max.is_finite()) {
            return Err(Error::InvalidInput("band endpoints must be finite".into()));
        }
        if sigma_min <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "sigma_min must be positive, got {sigma_min}"
            )));
        }
        if sigma_max < sigma_min {
            return Err(Error::InvalidInput(format!(
                "band requires sigma_min <= sigma_max, got [{sigma_min}, {sigma_max}]"
            )));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
        })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    /// Lower variance endpoint.
    pub fn var_min(&self) -> f64 {
        self.sigma_min * self.sigma_min
    }

    /// Upper variance endpoint.
    pub fn var_max(&self) -> f64 {
        self.sigma_max * self.sigma_max
    }

    /// Single volatility value (no uncertainty, classical Brownian motion).
    pub fn is_degenerate(&self) -> bool {
        self.sigma_min == self.sigma_max
    }

    /// The generator `g(a) = (sigma_max^2 a^+ - sigma_min^2 a^-) / 2`.
    ///
    /// Monotone, positively homogeneous and subadditive in the curvature
    /// argument `a`; it drives the nonlinear heat equation in [`crate::gpde`].
    pub fn g(&self, a: f64) -> f64 {
        0.5 * (self.var_max() * a.max(0.0) - self.var_min() * (-a).max(0.0))
    }

    /// Non-degeneracy constant `sigma_min^2 / 2`.
    ///
    /// Satisfies `g(a) - g(b) >= nondegeneracy() * (a - b)` for all `a >= b`.
    pub fn nondegeneracy(&self) -> f64 {
        0.5 * self.var_min()
    }

    pub fn contains_sigma(&self, sigma: f64) -> bool {
        sigma >= self.sigma_min && sigma <= self.sigma_max
    }
}

/// Ordered time points `0 = t_0 < t_1 < ... < t_n = T` carrying a cylindrical payoff.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimePartition {
    times: Vec<f64>,
}

/// Relative tolerance used when matching user-supplied times to partition points.
const TIME_MATCH_TOL: f64 = 1e-9;

impl TimePartition {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidInput(
                "partition needs at least {0, T}".into(),
            ));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidInput(format!(
                "partition must start at 0, got {}",
                times[0]
            )));
        }
        for w in times.windows(2) {
            if !(w[1].is_finite() && w[1] > w[0]) {
                return Err(Error::InvalidInput(format!(
                    "partition times must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Number of increments `n`.
    pub fn n_increments(&self) -> usize {
        self.times.len() - 1
    }

    /// Duration of increment `i` (1-based): `t_i - t_{i-1}`.
    pub fn increment_duration(&self, i: usize) -> f64 {
        self.times[i] - self.times[i - 1]
    }

    /// Index of the partition point matching `t`, if any.
    pub fn index_of_time(&self, t: f64) -> Option<usize> {
        let scale = self.horizon().max(1.0);
        self.times
            .iter()
            .position(|&p| (p - t).abs() <= TIME_MATCH_TOL * scale)
    }

    /// Largest stage index `i < n` with `t_i <= t`, i.e. the interval holding `t`.
    pub fn interval_of(&self, t: f64) -> usize {
        let n = self.n_increments();
        let mut i = 0;
        while i + 1 < n && t >= self.times[i + 1] {
            i += 1;
        }
        i
    }
}

/// A bracketed value of the series `sum_{i>=1} i^{-r}` for `r > 1`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeriesConstant {
    exponent: f64,
    value: f64,
    partial_sum: f64,
    tail_bound: f64,
    terms: u64,
}

impl SeriesConstant {
    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    /// Midpoint of the rigorous bracket `[partial_sum + lower tail, partial_sum + upper tail]`.
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn partial_sum(&self) -> f64 {
        self.partial_sum
    }

    /// Upper integral-test tail `N^{1-r} / (r-1)`; the true value lies within
    /// `[partial_sum, partial_sum + tail_bound]`.
    pub fn tail_bound(&self) -> f64 {
        self.tail_bound
    }

    pub fn terms(&self) -> u64 {
        self.terms
    }

    /// Width of the bracket around the true value.
    pub fn bracket_width(&self) -> f64 {
        let r = self.exponent;
        let n = self.terms as f64;
        (n.powf(1.0 - r) - (n + 1.0).powf(1.0 - r)) / (r - 1.0)
    }
}

/// The conjugate exponent `gamma / (gamma - 1)`.
pub fn conjugate_exponent(gamma: f64) -> Result<f64> {
    if gamma <= 1.0 {
        return Err(Error::ExponentConstraint(format!(
            "conjugate exponent needs gamma > 1, got {gamma}"
        )));
    }
    Ok(gamma / (gamma - 1.0))
}

/// Evaluate `sum_{i>=1} i^{-r}` with a rigorous integral-test bracket.
///
/// Terms are summed directly until the bracket width relative to the value is
/// at most `rel_tol`; the bracket is `[S_N + (N+1)^{1-r}/(r-1), S_N + N^{1-r}/(r-1)]`
/// by comparison with the integral. The reported value is the bracket midpoint.
pub fn series_constant(r: f64, rel_tol: f64) -> Result<SeriesConstant> {
    if !r.is_finite() || r <= 1.0 {
        return Err(Error::DivergentSeries(r));
    }
    if rel_tol.is_nan() || rel_tol <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "rel_tol must be positive, got {rel_tol}"
        )));
    }

    // Kahan-compensated forward sum; the bracket check runs on power-of-two
    // term counts so the loop stays O(N).
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    let mut n: u64 = 0;
    let mut next_check: u64 = 16;
    const MAX_TERMS: u64 = 200_000_000;

    loop {
        n += 1;
        let term = (n as f64).powf(-r);
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;

        if n == next_check || n == MAX_TERMS {
            let nf = n as f64;
            let upper_tail = nf.powf(1.0 - r) / (r - 1.0);
            let lower_tail = (nf + 1.0).powf(1.0 - r) / (r - 1.0);
            let value = sum + 0.5 * (upper_tail + lower_tail);
            let width = upper_tail - lower_tail;
            if width <= rel_tol * value {
                return Ok(SeriesConstant {
                    exponent: r,
                    value,
                    partial_sum: sum,
                    tail_bound: upper_tail,
                    terms: n,
                });
            }
            if n == MAX_TERMS {
                return Err(Error::InvalidInput(format!(
                    "series with exponent {r} did not reach rel_tol {rel_tol} within {MAX_TERMS} terms"
                )));
            }
            next_check *= 2;
        }
    }
}
