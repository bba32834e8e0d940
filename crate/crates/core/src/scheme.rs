//! The discrete slow motion `x_{n+1} = x_n + eps B(x_n, xi(n)) + eps^2 b(x_n, xi(n))`
//! on the time grid `t_n = n eps^2`, `n = 0..=floor(T / eps^2)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::field::{check_dim, FieldSpec};
use crate::noise::NoiseModel;
use crate::rng::streams;

/// Absorbs rounding in `T / eps^2` so that, e.g., `eps = 0.05, T = 1` yields 400 steps.
const GRID_SLACK: f64 = 1e-9;

/// Number of steps `floor(T / eps^2)`.
pub fn step_count(eps: f64, horizon: f64) -> Result<usize> {
    check_eps(eps)?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
    }
    Ok((horizon / (eps * eps) + GRID_SLACK).floor() as usize)
}

/// `eps = 1 / sqrt(N)`, the step scale that puts `N` steps on `[0, 1]`.
pub fn eps_from_steps(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter("step count must be >= 1".into()));
    }
    Ok(1.0 / (n as f64).sqrt())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

/// Reusable buffers for [`step_into`].
#[derive(Debug, Clone)]
pub struct StepBuffers {
    fast: Vec<f64>,
    slow: Vec<f64>,
}

impl StepBuffers {
    pub fn new(d: usize) -> Self {
        Self { fast: vec![0.0; d], slow: vec![0.0; d] }
    }
}

/// Advances `x` in place by one step.
#[inline]
pub fn step_into(field: &FieldSpec, x: &mut [f64], xi: &[f64], eps: f64, buf: &mut StepBuffers) -> Result<()> {
    field.fast_into(x, xi, &mut buf.fast);
    field.slow_into(x, xi, &mut buf.slow);
    let e2 = eps * eps;
    for ((xv, f), s) in x.iter_mut().zip(&buf.fast).zip(&buf.slow) {
        *xv += eps * f + e2 * s;
    }
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { location: "scheme step (overflow)".into() })
    }
}

/// `x + eps B(x, xi) + eps^2 b(x, xi)`.
pub fn step(x: &[f64], xi: &[f64], eps: f64, field: &FieldSpec) -> Result<Vec<f64>> {
    check_eps(eps)?;
    check_dim(x, field.state_dim(), "x")?;
    check_dim(xi, field.noise_dim(), "xi")?;
    let mut out = x.to_vec();
    step_into(field, &mut out, xi, eps, &mut StepBuffers::new(field.state_dim()))?;
    Ok(out)
}

/// Continuous-time reading of a discrete path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extension {
    /// `X(t) = X(n eps^2)` on `[n eps^2, (n+1) eps^2)`.
    #[default]
    PiecewiseConstant,
    /// Linear interpolation between neighbouring grid values.
    Linear,
}

/// One realization of the slow motion together with the noise that drove it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    pub eps: f64,
    pub horizon: f64,
    pub states: Vec<Vec<f64>>,
    /// `xi(0..N)`.
    pub noise: Vec<Vec<f64>>,
}

impl DiscretePath {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.eps * self.eps
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("path has at least the initial state")
    }

    /// Value of the continuous-time extension at `t`; the residual interval
    /// `[N eps^2, T]` holds the last grid value.
    pub fn sample_at(&self, t: f64, mode: Extension) -> Result<Vec<f64>> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::OutOfRange { t, horizon: self.horizon });
        }
        let e2 = self.eps * self.eps;
        let n = ((t / e2 + GRID_SLACK).floor() as usize).min(self.steps());
        if n == self.steps() || mode == Extension::PiecewiseConstant {
            return Ok(self.states[n].clone());
        }
        let w = ((t - n as f64 * e2) / e2).clamp(0.0, 1.0);
        Ok(self.states[n]
            .iter()
            .zip(&self.states[n + 1])
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect())
    }
}

/// Simulates one path on stream 0 of `seed`.
pub fn simulate_path(x0: &[f64], eps: f64, horizon: f64, field: &FieldSpec, noise: &NoiseModel, seed: u64) -> Result<DiscretePath> {
    simulate_path_stream(x0, eps, horizon, field, noise, seed, 0)
}

/// Simulates the path with index `path` of the ensemble keyed by `seed`.
pub fn simulate_path_stream(
    x0: &[f64],
    eps: f64,
    horizon: f64,
    field: &FieldSpec,
    noise: &NoiseModel,
    seed: u64,
    path: u64,
) -> Result<DiscretePath> {
    check_scheme_inputs(x0, eps, field, noise)?;
    let n = step_count(eps, horizon)?;
    let d = field.state_dim();
    let mut sampler = noise.sampler(seed, streams::SCHEME + path);
    let mut buf = StepBuffers::new(d);
    let mut states = Vec::with_capacity(n + 1);
    let mut record = Vec::with_capacity(n);
    let mut x = x0.to_vec();
    states.push(x.clone());
    for k in 0..n {
        let xi = sampler.next_atom();
        step_into(field, &mut x, xi, eps, &mut buf).map_err(|_| Error::NonFinite {
            location: format!("scheme step {k}"),
        })?;
        record.push(xi.to_vec());
        states.push(x.clone());
    }
    Ok(DiscretePath { eps, horizon, states, noise: record })
}

fn check_scheme_inputs(x0: &[f64], eps: f64, field: &FieldSpec, noise: &NoiseModel) -> Result<()> {
    check_eps(eps)?;
    if eps > 1.0 {
        return Err(Error::InvalidParameter(format!("eps must be <= 1, got {eps}")));
    }
    check_dim(x0, field.state_dim(), "x0")?;
    ensure_finite(x0, || "x0".into())?;
    if noise.dim() != field.noise_dim() {
        return Err(Error::InvalidDimension(format!(
            "noise dimension {} does not match field noise dimension {}",
            noise.dim(),
            field.noise_dim()
        )));
    }
    Ok(())
}

/// Terminal states `X(T)` of `paths` independent realizations (path `i` uses stream `i`).
pub fn terminal_ensemble(
    x0: &[f64],
    eps: f64,
    horizon: f64,
    field: &FieldSpec,
    noise: &NoiseModel,
    seed: u64,
    paths: usize,
) -> Result<Vec<Vec<f64>>> {
    check_scheme_inputs(x0, eps, field, noise)?;
    let n = step_count(eps, horizon)?;
    let d = field.state_dim();
    (0..paths)
        .into_par_iter()
        .map_init(
            || StepBuffers::new(d),
            |buf, i| {
                let mut sampler = noise.sampler(seed, streams::SCHEME + i as u64);
                let mut x = x0.to_vec();
                for k in 0..n {
                    let xi = sampler.next_atom();
                    step_into(field, &mut x, xi, eps, buf).map_err(|_| Error::NonFinite {
                        location: format!("path {i}, scheme step {k}"),
                    })?;
                }
                Ok(x)
            },
        )
        .collect()
}

/// Per-time, per-coordinate ensemble statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub step: usize,
    pub t: f64,
    pub coord: usize,
    pub mean: f64,
    pub variance: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Mean, variance and 5/50/95% quantiles across `paths` realizations at every grid time.
pub fn ensemble_summary(
    x0: &[f64],
    eps: f64,
    horizon: f64,
    field: &FieldSpec,
    noise: &NoiseModel,
    seed: u64,
    paths: usize,
) -> Result<Vec<SummaryRow>> {
    if paths == 0 {
        return Err(Error::InvalidParameter("paths must be >= 1".into()));
    }
    let all: Vec<DiscretePath> = (0..paths as u64)
        .into_par_iter()
        .map(|i| simulate_path_stream(x0, eps, horizon, field, noise, seed, i))
        .collect::<Result<_>>()?;
    let n = all[0].steps();
    let d = field.state_dim();
    let mut rows = Vec::with_capacity((n + 1) * d);
    let mut column = vec![0.0; paths];
    for step in 0..=n {
        for coord in 0..d {
            for (c, p) in column.iter_mut().zip(&all) {
                *c = p.states[step][coord];
            }
            let (mean, variance) = mean_variance(&column);
            column.sort_by(f64::total_cmp);
            rows.push(SummaryRow {
                step,
                t: step as f64 * eps * eps,
                coord,
                mean,
                variance,
                q05: quantile_sorted(&column, 0.05),
                q50: quantile_sorted(&column, 0.5),
                q95: quantile_sorted(&column, 0.95),
            });
        }
    }
    Ok(rows)
}

/// Sample mean and unbiased variance.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Expr, FieldConfig, NoiseMap};
    use std::sync::Arc;

    fn scalar(fast: fn(f64, f64) -> f64, slow: fn(f64, f64) -> f64, bound: f64) -> FieldSpec {
        let f: NoiseMap = Arc::new(move |x, xi, out| out[0] = fast(x[0], xi[0]));
        let s: NoiseMap = Arc::new(move |x, xi, out| out[0] = slow(x[0], xi[0]));
        FieldSpec::new(1, 1, f, s, bound).unwrap()
    }

    #[test]
    fn zero_field_leaves_state() {
        let f = scalar(|_, _| 0.0, |_, _| 0.0, 0.0);
        assert_eq!(step(&[1.25], &[1.0], 0.3, &f).unwrap(), vec![1.25]);
    }

    #[test]
    fn step_arithmetic() {
        let f = scalar(|_, xi| xi, |_, _| 0.0, 1.0);
        assert!((step(&[0.0], &[1.0], 0.1, &f).unwrap()[0] - 0.1).abs() < 1e-15);
        let g = scalar(|x, xi| x * xi, |_, _| 1.0, 3.0);
        assert!((step(&[2.0], &[-1.0], 0.1, &g).unwrap()[0] - 1.81).abs() < 1e-14);
    }

    #[test]
    fn overflow_is_reported() {
        let f = scalar(|_, _| f64::MAX, |_, _| 0.0, 1.0);
        assert!(matches!(step(&[f64::MAX], &[1.0], 1.0, &f), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn deterministic_euler_reaches_horizon() {
        let f = scalar(|_, _| 0.0, |_, _| 1.0, 1.0);
        let noise = NoiseModel::rademacher_iid(1).unwrap();
        let p = simulate_path(&[0.0], 0.1, 1.0, &f, &noise, 1).unwrap();
        assert_eq!(p.steps(), 100);
        assert!((p.terminal()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_count_absorbs_rounding() {
        assert_eq!(step_count(0.05, 1.0).unwrap(), 400);
        assert_eq!(step_count(0.1, 1.0).unwrap(), 100);
        assert_eq!(step_count(0.141, 1.0).unwrap(), 50);
        assert_eq!(step_count(0.0707, 1.0).unwrap(), 200);
        assert_eq!(step_count(eps_from_steps(2000).unwrap(), 1.0).unwrap(), 2000);
    }

    #[test]
    fn replay_is_bitwise_identical_and_increments_match() {
        let noise = NoiseModel::two_state_markov(0.3).unwrap();
        let f = FieldConfig::SigmaXi {
            sigma: vec![vec![Expr::Sin { base: 1.0, amp: 0.3, freq: 1.0, phase: 0.0, coord: 0 }]],
            drift: vec![Expr::Sin { base: 0.0, amp: 0.5, freq: 2.0, phase: 0.0, coord: 0 }],
        }
        .build(&noise)
        .unwrap();
        let eps = 0.2;
        let a = simulate_path(&[0.1], eps, 2.0, &f, &noise, 42).unwrap();
        let b = simulate_path(&[0.1], eps, 2.0, &f, &noise, 42).unwrap();
        assert_eq!(a, b);
        let bound = eps * f.bound() * (1.0 + eps);
        for n in 0..a.steps() {
            let x = &a.states[n];
            let xi = &a.noise[n];
            let expected = x[0] + (eps * f.fast(x, xi)[0] + eps * eps * f.slow(x, xi)[0]);
            assert_eq!(a.states[n + 1][0], expected);
            assert!((a.states[n + 1][0] - x[0]).abs() <= bound + 1e-15);
        }
    }

    #[test]
    fn sample_at_modes() {
        let p = DiscretePath {
            eps: 0.5,
            horizon: 1.1,
            states: vec![vec![0.0], vec![1.0], vec![3.0], vec![2.0], vec![5.0]],
            noise: vec![vec![1.0]; 4],
        };
        assert_eq!(p.sample_at(0.5, Extension::PiecewiseConstant).unwrap(), vec![3.0]);
        assert_eq!(p.sample_at(0.6, Extension::PiecewiseConstant).unwrap(), vec![3.0]);
        assert_eq!(p.sample_at(0.375, Extension::Linear).unwrap(), vec![2.0]);
        assert_eq!(p.sample_at(1.05, Extension::Linear).unwrap(), vec![5.0]);
        assert!(matches!(p.sample_at(1.2, Extension::Linear), Err(Error::OutOfRange { .. })));
        assert!(matches!(p.sample_at(-0.1, Extension::Linear), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn ensemble_path_matches_single_path_stream() {
        let noise = NoiseModel::rademacher_iid(1).unwrap();
        let f = scalar(|_, xi| xi, |_, _| 0.0, 1.0);
        let ens = terminal_ensemble(&[0.0], 0.2, 1.0, &f, &noise, 9, 8).unwrap();
        for (i, t) in ens.iter().enumerate() {
            let p = simulate_path_stream(&[0.0], 0.2, 1.0, &f, &noise, 9, i as u64).unwrap();
            assert_eq!(p.terminal(), t.as_slice());
        }
    }

    #[test]
    fn eps_above_one_rejected() {
        let noise = NoiseModel::rademacher_iid(1).unwrap();
        let f = scalar(|_, xi| xi, |_, _| 0.0, 1.0);
        assert!(simulate_path(&[0.0], 1.5, 1.0, &f, &noise, 0).is_err());
    }
}
