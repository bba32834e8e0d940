//! Payoff functionals for the stopping game and the exponential price transform.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{ensure_finite, Error, Result};
use crate::rng::stream_rng;

/// Read-only view of a path `x_0, ..., x_n` stored contiguously.
#[derive(Debug, Clone, Copy)]
pub struct PathRef<'a> {
    dim: usize,
    flat: &'a [f64],
}

impl<'a> PathRef<'a> {
    pub fn new(dim: usize, flat: &'a [f64]) -> Self {
        debug_assert!(dim > 0 && !flat.is_empty() && flat.len().is_multiple_of(dim));
        Self { dim, flat }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of states, `n + 1`.
    pub fn len(&self) -> usize {
        self.flat.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn state(&self, k: usize) -> &'a [f64] {
        &self.flat[k * self.dim..(k + 1) * self.dim]
    }

    pub fn current(&self) -> &'a [f64] {
        &self.flat[self.flat.len() - self.dim..]
    }

    pub fn states(&self) -> impl Iterator<Item = &'a [f64]> {
        self.flat.chunks_exact(self.dim)
    }
}

pub type StateFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type PathFn = Arc<dyn for<'a> Fn(f64, PathRef<'a>) -> f64 + Send + Sync>;

/// A payoff process `t -> F_t(path up to t)`.
#[derive(Clone)]
pub enum PayoffFn {
    /// Depends only on `(t, current state)`.
    Markov(StateFn),
    /// Depends on the whole path observed so far.
    Path(PathFn),
}

impl std::fmt::Debug for PayoffFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(if self.is_markov() { "PayoffFn::Markov" } else { "PayoffFn::Path" })
    }
}

impl PayoffFn {
    pub fn markov(f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        PayoffFn::Markov(Arc::new(f))
    }

    pub fn path(f: impl for<'a> Fn(f64, PathRef<'a>) -> f64 + Send + Sync + 'static) -> Self {
        PayoffFn::Path(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        Self::markov(move |_, _| c)
    }

    pub fn is_markov(&self) -> bool {
        matches!(self, PayoffFn::Markov(_))
    }

    #[inline]
    pub fn eval(&self, t: f64, path: PathRef<'_>) -> f64 {
        match self {
            PayoffFn::Markov(f) => f(t, path.current()),
            PayoffFn::Path(f) => f(t, path),
        }
    }

    /// Evaluates a Markov payoff at a bare state.
    #[inline]
    pub fn eval_state(&self, t: f64, x: &[f64]) -> Result<f64> {
        match self {
            PayoffFn::Markov(f) => Ok(f(t, x)),
            PayoffFn::Path(_) => Err(Error::Unsupported("path-dependent payoff evaluated at a bare state".into())),
        }
    }

    /// `t -> F_t + c`.
    pub fn shifted(&self, c: f64) -> Self {
        match self {
            PayoffFn::Markov(f) => {
                let f = f.clone();
                Self::markov(move |t, x| f(t, x) + c)
            }
            PayoffFn::Path(f) => {
                let f = f.clone();
                Self::path(move |t, p| f(t, p) + c)
            }
        }
    }
}

/// Lower payoff `F` (received by the maximizer when it stops, and at expiry) and upper payoff
/// `G >= F` (paid by the minimizer when it stops first). Without `G` the game is a one-player
/// optimal stopping problem.
#[derive(Clone, Debug)]
pub struct PayoffPair {
    pub lower: PayoffFn,
    pub upper: Option<PayoffFn>,
    /// Lipschitz constant of both payoffs in the sup norm on paths.
    pub lipschitz: f64,
}

impl PayoffPair {
    pub fn new(lower: PayoffFn, upper: PayoffFn, lipschitz: f64) -> Result<Self> {
        check_lipschitz(lipschitz)?;
        Ok(Self { lower, upper: Some(upper), lipschitz })
    }

    pub fn american(lower: PayoffFn, lipschitz: f64) -> Result<Self> {
        check_lipschitz(lipschitz)?;
        Ok(Self { lower, upper: None, lipschitz })
    }

    /// `F = G = c`.
    pub fn constant(c: f64) -> Self {
        Self { lower: PayoffFn::constant(c), upper: Some(PayoffFn::constant(c)), lipschitz: 0.0 }
    }

    /// True when both payoffs depend only on `(t, current state)`.
    pub fn is_markov(&self) -> bool {
        self.lower.is_markov() && self.upper.as_ref().is_none_or(PayoffFn::is_markov)
    }

    /// The same `F` with the minimizer's stopping option removed.
    pub fn without_upper(&self) -> Self {
        Self { lower: self.lower.clone(), upper: None, lipschitz: self.lipschitz }
    }

    /// Replaces `G` by `F + gap`.
    pub fn with_gap(&self, gap: f64) -> Self {
        Self { lower: self.lower.clone(), upper: Some(self.lower.shifted(gap)), lipschitz: self.lipschitz }
    }

    pub fn shift_lower(&self, c: f64) -> Self {
        Self { lower: self.lower.shifted(c), upper: self.upper.clone(), lipschitz: self.lipschitz }
    }

    pub fn shift_upper(&self, c: f64) -> Self {
        Self { lower: self.lower.clone(), upper: self.upper.as_ref().map(|g| g.shifted(c)), lipschitz: self.lipschitz }
    }
}

fn check_lipschitz(k: f64) -> Result<()> {
    if !(k.is_finite() && k >= 0.0) {
        return Err(Error::InvalidParameter(format!("Lipschitz constant must be finite and >= 0, got {k}")));
    }
    Ok(())
}

/// Componentwise exponential of a state.
pub fn exp_transform(x: &[f64]) -> Result<Vec<f64>> {
    ensure_finite(x, || "exp_transform input".into())?;
    let out: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    ensure_finite(&out, || "exp_transform (overflow)".into())?;
    Ok(out)
}

/// Componentwise exponential of every state of a path.
pub fn exp_transform_path(path: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    path.iter().map(|x| exp_transform(x)).collect()
}

fn check_put(strike: f64, rate: f64) -> Result<()> {
    if !(strike.is_finite() && strike > 0.0) {
        return Err(Error::InvalidParameter(format!("strike must be positive, got {strike}")));
    }
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(Error::InvalidParameter(format!("rate must be >= 0, got {rate}")));
    }
    Ok(())
}

/// Discounted put on the price `exp(x_0)`: `e^{-rt} (K - e^{x_0})^+`.
pub fn put_lower(strike: f64, rate: f64) -> PayoffFn {
    PayoffFn::markov(move |t, x| (-rate * t).exp() * (strike - x[0].exp()).max(0.0))
}

/// Game (cancellable) put: `F_t = e^{-rt}(K - e^{x_t})^+`, `G_t = F_t + delta e^{-rt}`.
/// The state is the log price in its first coordinate.
pub fn game_put_payoff(strike: f64, rate: f64, penalty: f64) -> Result<PayoffPair> {
    check_put(strike, rate)?;
    if !(penalty.is_finite() && penalty >= 0.0) {
        return Err(Error::InvalidParameter(format!("penalty must be >= 0, got {penalty}")));
    }
    let upper = PayoffFn::markov(move |t, x| (-rate * t).exp() * ((strike - x[0].exp()).max(0.0) + penalty));
    PayoffPair::new(put_lower(strike, rate), upper, strike)
}

/// American put on the log price: only the holder's stopping option.
pub fn american_put_payoff(strike: f64, rate: f64) -> Result<PayoffPair> {
    check_put(strike, rate)?;
    PayoffPair::american(put_lower(strike, rate), strike)
}

/// Result of probing `|F_t(u) - F_t(v)| <= K sup |u - v|` on random path pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzAudit {
    pub trials: usize,
    pub max_ratio: f64,
    pub violations: usize,
}

/// Random-walk path pairs of `steps` steps of size `scale`, compared at `t = horizon`.
pub fn lipschitz_audit(
    pair: &PayoffPair,
    dim: usize,
    steps: usize,
    horizon: f64,
    scale: f64,
    trials: usize,
    seed: u64,
) -> LipschitzAudit {
    let mut rng = stream_rng(seed, 0);
    let len = (steps + 1) * dim;
    let mut u = vec![0.0; len];
    let mut v = vec![0.0; len];
    let mut max_ratio: f64 = 0.0;
    let mut violations = 0;
    for _ in 0..trials {
        for k in dim..len {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            u[k] = u[k - dim] + scale * a;
            v[k] = u[k] + scale * b;
        }
        let dist = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if dist == 0.0 {
            continue;
        }
        let (pu, pv) = (PathRef::new(dim, &u), PathRef::new(dim, &v));
        let mut fns = vec![&pair.lower];
        fns.extend(pair.upper.as_ref());
        for f in fns {
            let gap = (f.eval(horizon, pu) - f.eval(horizon, pv)).abs();
            let ratio = gap / dist;
            max_ratio = max_ratio.max(ratio);
            if gap > pair.lipschitz * dist * (1.0 + 1e-12) + 1e-15 {
                violations += 1;
            }
        }
    }
    LipschitzAudit { trials, max_ratio, violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_transform_examples() {
        assert_eq!(exp_transform(&[0.0, 0.0]).unwrap(), vec![1.0, 1.0]);
        let k: f64 = 1.7;
        let p = exp_transform_path(&[vec![k.ln()], vec![k.ln()]]).unwrap();
        assert!(p.iter().all(|x| (x[0] - k).abs() < 1e-15));
        assert!(matches!(exp_transform(&[1000.0]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn game_put_at_the_money_of_log_zero() {
        let pair = game_put_payoff(2.0, 0.0, 0.3).unwrap();
        for t in [0.0, 0.5, 3.0] {
            assert_eq!(pair.lower.eval_state(t, &[0.0]).unwrap(), 1.0);
            assert_eq!(pair.upper.as_ref().unwrap().eval_state(t, &[0.0]).unwrap(), 1.3);
        }
        assert!(pair.is_markov());
        assert!(game_put_payoff(0.0, 0.0, 0.1).is_err());
        assert!(game_put_payoff(1.0, 0.0, -0.1).is_err());
    }

    #[test]
    fn path_views() {
        let flat = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let p = PathRef::new(2, &flat);
        assert_eq!(p.len(), 3);
        assert_eq!(p.state(1), &[3.0, 4.0]);
        assert_eq!(p.current(), &[5.0, 6.0]);
        let running_max = PayoffFn::path(|_, p| p.states().map(|s| s[0]).fold(f64::MIN, f64::max));
        assert_eq!(running_max.eval(0.0, p), 5.0);
        assert!(running_max.eval_state(0.0, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn shifts_and_gaps() {
        let pair = PayoffPair::american(PayoffFn::markov(|_, x| x[0]), 1.0).unwrap();
        let g = pair.with_gap(0.5);
        assert_eq!(g.upper.unwrap().eval_state(0.0, &[1.0]).unwrap(), 1.5);
        assert_eq!(pair.shift_lower(0.1).lower.eval_state(0.0, &[1.0]).unwrap(), 1.1);
    }

    #[test]
    fn put_lipschitz_constant_holds() {
        let pair = game_put_payoff(1.1, 0.02, 0.05).unwrap();
        let audit = lipschitz_audit(&pair, 1, 20, 1.0, 0.1, 2000, 3);
        assert_eq!(audit.violations, 0);
        assert!(audit.max_ratio > 0.1);
        let bad = PayoffPair::american(PayoffFn::markov(|_, x| 3.0 * x[0]), 1.0).unwrap();
        assert!(lipschitz_audit(&bad, 1, 5, 1.0, 0.1, 100, 3).violations > 0);
    }
}
