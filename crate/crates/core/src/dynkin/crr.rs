//! Cox–Ross–Rubinstein binomial lattice for vanilla puts, independent of the scheme machinery.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrrModel {
    pub spot: f64,
    pub strike: f64,
    pub rate: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub steps: usize,
}

impl CrrModel {
    fn params(&self) -> Result<(f64, f64, f64, f64)> {
        let CrrModel { spot, strike, rate, sigma, horizon, steps } = *self;
        let ok = spot > 0.0 && strike > 0.0 && rate >= 0.0 && sigma > 0.0 && horizon > 0.0 && steps > 0;
        if !ok || ![spot, strike, rate, sigma, horizon].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid CRR model {self:?}")));
        }
        let dt = horizon / steps as f64;
        let up = (sigma * dt.sqrt()).exp();
        let down = 1.0 / up;
        let q = ((rate * dt).exp() - down) / (up - down);
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidParameter(format!("risk-neutral probability {q} outside [0, 1]")));
        }
        Ok((up, down, q, (-rate * dt).exp()))
    }

    fn put(&self, early_exercise: bool) -> Result<f64> {
        let (up, down, q, disc) = self.params()?;
        let n = self.steps;
        let price = |i: usize, j: usize| self.spot * up.powi(j as i32) * down.powi((i - j) as i32);
        let mut v: Vec<f64> = (0..=n).map(|j| (self.strike - price(n, j)).max(0.0)).collect();
        for i in (0..n).rev() {
            for j in 0..=i {
                let hold = disc * (q * v[j + 1] + (1.0 - q) * v[j]);
                v[j] = if early_exercise { hold.max(self.strike - price(i, j)) } else { hold };
            }
        }
        Ok(v[0])
    }

    pub fn american_put(&self) -> Result<f64> {
        self.put(true)
    }

    pub fn european_put(&self) -> Result<f64> {
        self.put(false)
    }
}
