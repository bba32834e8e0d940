//! Coefficients of the limiting diffusion: mean drift, correlation drift correction,
//! diffusion matrix and its symmetric square root.
//!
//! The correction and diffusion matrix are evaluated in their one-sided stationary form
//!
//! ```text
//! c(x) = sum_{r >= 1} E[ grad_x B(x, xi(r)) B(x, xi(0)) ]
//! A(x) = E[B B^T](x) + sum_{r >= 1} ( E[B(x, xi(r)) B(x, xi(0))^T] + transpose )
//! ```
//!
//! truncated at lag `n_max`. The tail is bounded through the mixing profile by
//! `2 L^2 sum_{r > n_max} phi(r)` per lag-sum (twice that for `A`, which carries both
//! orientations of each lag).

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::field::{check_dim, FieldAudit, FieldSpec, StateMap};
use crate::noise::NoiseModel;
use crate::rng::streams;

/// Target for the default truncation lag's tail bound.
pub const DEFAULT_TRUNCATION_TARGET: f64 = 1e-8;
/// Eigenvalues down to `-PSD_TOLERANCE` are clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-10;
/// Largest tolerated `|A - A^T|` entry.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
const MAX_TRUNCATION_LAG: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum EstimatorMode {
    /// Exact expectations over the noise atoms and joint laws.
    Analytic,
    /// Monte Carlo over independent stationary windows.
    Empirical { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorEstimate {
    pub value: Vec<f64>,
    pub std_error: Option<Vec<f64>>,
    pub truncation_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixEstimate {
    /// Symmetric estimate.
    pub value: DMatrix<f64>,
    /// One-sided estimate `E[B B^T] + 2 sum_r E[B(xi(r)) B(xi(0))^T]` before symmetrization.
    pub raw: DMatrix<f64>,
    pub std_error: Option<DMatrix<f64>>,
    /// Standard error of `raw - raw^T` (empirical mode).
    pub asymmetry_std_error: Option<DMatrix<f64>>,
    pub truncation_bound: f64,
}

/// `2 L^2 sum_{r > n_max} phi(r)`.
pub fn correction_truncation_bound(noise: &NoiseModel, bound: f64, n_max: usize) -> f64 {
    2.0 * bound * bound * noise.mixing_profile().tail_sum(n_max)
}

/// Bound for the diffusion matrix tail; both orientations of every lag contribute.
pub fn diffusion_truncation_bound(noise: &NoiseModel, bound: f64, n_max: usize) -> f64 {
    2.0 * correction_truncation_bound(noise, bound, n_max)
}

/// Smallest `n_max >= 1` whose diffusion-matrix tail bound falls below `1e-8`.
pub fn default_truncation_lag(field: &FieldSpec, noise: &NoiseModel) -> usize {
    (1..MAX_TRUNCATION_LAG)
        .find(|&n| diffusion_truncation_bound(noise, field.bound(), n) < DEFAULT_TRUNCATION_TARGET)
        .unwrap_or(MAX_TRUNCATION_LAG)
}

fn check_inputs(field: &FieldSpec, noise: &NoiseModel, x: &[f64], n_samples: usize) -> Result<()> {
    check_dim(x, field.state_dim(), "x")?;
    if noise.dim() != field.noise_dim() {
        return Err(Error::InvalidDimension(format!(
            "noise dimension {} does not match field noise dimension {}",
            noise.dim(),
            field.noise_dim()
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
    }
    Ok(())
}

fn check_analytic(noise: &NoiseModel) -> Result<()> {
    if noise.atoms().is_empty() {
        return Err(Error::Unsupported("analytic mode requires finite-support noise".into()));
    }
    Ok(())
}

/// `E b(x, xi(0))`.
pub fn drift_mean(field: &FieldSpec, noise: &NoiseModel, x: &[f64], mode: EstimatorMode, n_samples: usize) -> Result<VectorEstimate> {
    check_inputs(field, noise, x, n_samples)?;
    let d = field.state_dim();
    let mut buf = vec![0.0; d];
    match mode {
        EstimatorMode::Analytic => {
            check_analytic(noise)?;
            let mut value = vec![0.0; d];
            for (atom, &p) in noise.atoms().iter().zip(noise.probabilities()) {
                field.slow_into(x, atom, &mut buf);
                ensure_finite(&buf, || format!("b at x = {x:?}"))?;
                for (v, b) in value.iter_mut().zip(&buf) {
                    *v += p * b;
                }
            }
            Ok(VectorEstimate { value, std_error: None, truncation_bound: 0.0 })
        }
        EstimatorMode::Empirical { seed } => {
            let mut acc = Moments::new(d);
            for s in 0..n_samples {
                let mut sampler = noise.sampler(seed, streams::ESTIMATOR + s as u64);
                field.slow_into(x, sampler.next_atom(), &mut buf);
                ensure_finite(&buf, || format!("b at x = {x:?}"))?;
                acc.push(&buf);
            }
            let (value, se) = acc.finish();
            Ok(VectorEstimate { value, std_error: Some(se), truncation_bound: 0.0 })
        }
    }
}

/// Truncated drift correction `c(x)`.
pub fn drift_correction(
    field: &FieldSpec,
    noise: &NoiseModel,
    x: &[f64],
    n_max: usize,
    mode: EstimatorMode,
    n_samples: usize,
) -> Result<VectorEstimate> {
    check_inputs(field, noise, x, n_samples)?;
    check_lag(n_max)?;
    let truncation_bound = correction_truncation_bound(noise, field.bound(), n_max);
    match mode {
        EstimatorMode::Analytic => {
            check_analytic(noise)?;
            let kernel = AnalyticKernel::new(noise, n_max);
            let mut scratch = Scratch::default();
            kernel.evaluate(field, noise, x, &mut scratch)?;
            Ok(VectorEstimate { value: scratch.c.clone(), std_error: None, truncation_bound })
        }
        EstimatorMode::Empirical { seed } => {
            let est = empirical_windows(field, noise, x, n_max, seed, n_samples)?;
            Ok(VectorEstimate { value: est.c.0, std_error: Some(est.c.1), truncation_bound })
        }
    }
}

/// Truncated, symmetrized diffusion matrix `A(x)`.
pub fn diffusion_matrix(
    field: &FieldSpec,
    noise: &NoiseModel,
    x: &[f64],
    n_max: usize,
    mode: EstimatorMode,
    n_samples: usize,
) -> Result<MatrixEstimate> {
    check_inputs(field, noise, x, n_samples)?;
    check_lag(n_max)?;
    let d = field.state_dim();
    let truncation_bound = diffusion_truncation_bound(noise, field.bound(), n_max);
    match mode {
        EstimatorMode::Analytic => {
            check_analytic(noise)?;
            let kernel = AnalyticKernel::new(noise, n_max);
            let mut scratch = Scratch::default();
            kernel.evaluate(field, noise, x, &mut scratch)?;
            let value = DMatrix::from_row_slice(d, d, &scratch.a);
            let raw = DMatrix::from_row_slice(d, d, &scratch.a_raw);
            Ok(MatrixEstimate { value, raw, std_error: None, asymmetry_std_error: None, truncation_bound })
        }
        EstimatorMode::Empirical { seed } => {
            let est = empirical_windows(field, noise, x, n_max, seed, n_samples)?;
            Ok(MatrixEstimate {
                value: DMatrix::from_row_slice(d, d, &est.a.0),
                raw: DMatrix::from_row_slice(d, d, &est.raw.0),
                std_error: Some(DMatrix::from_row_slice(d, d, &est.a.1)),
                asymmetry_std_error: Some(DMatrix::from_row_slice(d, d, &est.asym.1)),
                truncation_bound,
            })
        }
    }
}

fn check_lag(n_max: usize) -> Result<()> {
    if n_max == 0 {
        return Err(Error::InvalidParameter("truncation lag n_max must be >= 1".into()));
    }
    Ok(())
}

/// Unique symmetric PSD square root via eigendecomposition.
pub fn symmetric_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::InvalidInput(format!("matrix is {}x{}, expected square", a.nrows(), a.ncols())));
    }
    ensure_finite(a.as_slice(), || "symmetric_sqrt input".into())?;
    let asym = (a - a.transpose()).amax();
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::InvalidInput(format!("matrix asymmetric by {asym:e}")));
    }
    let n = a.nrows();
    if n == 1 {
        let v = a[(0, 0)];
        if v < -PSD_TOLERANCE {
            return Err(Error::NotPsd { min_eigenvalue: v });
        }
        return Ok(DMatrix::from_element(1, 1, v.max(0.0).sqrt()));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let root = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&root + root.transpose()) * 0.5)
}

/// Brute-force Cesàro averages of the lagged correlations at a finite horizon `n`, with
/// a priori bounds on their distance from the limits.
#[derive(Debug, Clone, PartialEq)]
pub struct CesaroEstimate {
    pub n: usize,
    /// `(1/n) sum_{l=0..=n} sum_{m=-n..l-1} E[grad B(xi(l)) B(xi(m))]`.
    pub c: Vec<f64>,
    /// `(1/n) sum_{l,m=0..=n} E[B(xi(l)) B(xi(m))^T]`.
    pub a: DMatrix<f64>,
    pub c_bias_bound: f64,
    pub a_bias_bound: f64,
}

/// Evaluates the finite-`n` double sums term by term from exact joint laws of `(xi(m), xi(l))`.
///
/// With `|E[g(xi(r)) B(xi(0))]| <= 2 L^2 phi(r)` for `r >= 1`, the averages differ from the
/// limits by at most `(1/n) sum_{r>=1} 2L^2 phi(r) + ((n+1)/n) 2L^2 sum_{r>n} phi(r)` for `c`
/// and `(1/n) (L^2 + 2 sum_{r<=n} (r-1) 2L^2 phi(r)) + 4 L^2 sum_{r>n} phi(r)` for `A`.
pub fn cesaro_oracle(field: &FieldSpec, noise: &NoiseModel, x: &[f64], n: usize) -> Result<CesaroEstimate> {
    check_inputs(field, noise, x, 1)?;
    check_analytic(noise)?;
    if n == 0 {
        return Err(Error::InvalidParameter("Cesàro horizon must be >= 1".into()));
    }
    let d = field.state_dim();
    let k = noise.atoms().len();
    let b: Vec<Vec<f64>> = noise.atoms().iter().map(|a| field.fast(x, a)).collect();
    let jb: Vec<Vec<f64>> = noise.atoms().iter().map(|a| field.jacobian(x, a)).collect();
    for v in b.iter().chain(&jb) {
        ensure_finite(v, || format!("Cesàro oracle at x = {x:?}"))?;
    }
    let probs = nalgebra::DVector::from_column_slice(noise.probabilities());
    let pi = DMatrix::from_diagonal(&probs);
    let independent = &probs * probs.transpose();

    // lag terms from the joint law W_r(a, b) = P(xi(0) = a, xi(r) = b)
    let mut fc = vec![vec![0.0; d]; 2 * n + 1];
    let mut fa = vec![DMatrix::<f64>::zeros(d, d); n + 1];
    let mut w = pi;
    for r in 0..=2 * n {
        if r > 0 {
            w = match noise.transition() {
                Some(p) => &w * p,
                None => independent.clone(),
            };
        }
        for a in 0..k {
            for c in 0..k {
                let weight = w[(a, c)];
                if weight == 0.0 {
                    continue;
                }
                if r >= 1 {
                    for i in 0..d {
                        let grad_b: f64 = (0..d).map(|j| jb[c][i * d + j] * b[a][j]).sum();
                        fc[r][i] += weight * grad_b;
                    }
                }
                if r <= n {
                    for i in 0..d {
                        for j in 0..d {
                            fa[r][(i, j)] += weight * b[c][i] * b[a][j];
                        }
                    }
                }
            }
        }
    }

    let n_i = n as isize;
    let mut c = vec![0.0; d];
    for l in 0..=n_i {
        for m in -n_i..l {
            let term = &fc[(l - m) as usize];
            for i in 0..d {
                c[i] += term[i];
            }
        }
    }
    let fa: Vec<Vec<f64>> = fa.iter().map(|m| m.transpose().as_slice().to_vec()).collect();
    let mut acc = vec![0.0; d * d];
    for l in 0..=n {
        for m in 0..=n {
            if l >= m {
                acc.iter_mut().zip(&fa[l - m]).for_each(|(s, v)| *s += v);
            } else {
                let term = &fa[m - l];
                for i in 0..d {
                    for j in 0..d {
                        acc[i * d + j] += term[j * d + i];
                    }
                }
            }
        }
    }
    let mut a = DMatrix::from_row_slice(d, d, &acc);
    let scale = 1.0 / n as f64;
    c.iter_mut().for_each(|v| *v *= scale);
    a *= scale;

    let profile = noise.mixing_profile();
    let l2 = field.bound() * field.bound();
    let tail = profile.tail_sum(n);
    let head: f64 = (1..=2 * n).map(|r| profile.phi(r)).sum::<f64>() + profile.tail_sum(2 * n);
    let weighted: f64 = (1..=n).map(|r| (r - 1) as f64 * profile.phi(r)).sum();
    let c_bias_bound = scale * 2.0 * l2 * head + (n + 1) as f64 * scale * 2.0 * l2 * tail;
    let a_bias_bound = scale * (l2 + 4.0 * l2 * weighted) + 4.0 * l2 * tail;
    Ok(CesaroEstimate { n, c, a, c_bias_bound, a_bias_bound })
}

/// Precomputed joint-law weights for exact evaluation.
#[derive(Debug, Clone)]
struct AnalyticKernel {
    n_max: usize,
    /// `sum_{r=1..n_max} P(xi(0) = a, xi(r) = b)`; `None` for i.i.d. noise, whose lag terms
    /// factor through `E B = 0` and vanish.
    lag_sum: Option<DMatrix<f64>>,
    /// `sum_a p_a a a^T + 2 sum_{a,b} w_ab b a^T` (row-major), for fields `sigma(x) xi`.
    moment: Vec<f64>,
    /// `sum_{a,b} w_ab b a^T` (row-major).
    lag_moment: Option<Vec<f64>>,
}

/// Per-call buffers for [`AnalyticKernel::evaluate`].
#[derive(Debug, Default, Clone)]
pub(crate) struct Scratch {
    fast: Vec<f64>,
    jac: Vec<f64>,
    slow: Vec<f64>,
    b_bar: Vec<f64>,
    c: Vec<f64>,
    a: Vec<f64>,
    a_raw: Vec<f64>,
    sigma: Vec<f64>,
    grad: Vec<f64>,
    drift: Vec<f64>,
    work: Vec<f64>,
}

impl AnalyticKernel {
    fn new(noise: &NoiseModel, n_max: usize) -> Self {
        let lag_sum = if noise.is_iid() { None } else { Some(noise.lag_weight_sum(n_max)) };
        let d = noise.dim();
        let atoms = noise.atoms();
        let mut moment = vec![0.0; d * d];
        for (a, &p) in atoms.iter().zip(noise.probabilities()) {
            for j in 0..d {
                for l in 0..d {
                    moment[j * d + l] += p * a[j] * a[l];
                }
            }
        }
        let lag_moment = lag_sum.as_ref().map(|w| {
            let mut m = vec![0.0; d * d];
            for (ia, a) in atoms.iter().enumerate() {
                for (ib, b) in atoms.iter().enumerate() {
                    for j in 0..d {
                        for l in 0..d {
                            m[j * d + l] += w[(ia, ib)] * b[j] * a[l];
                        }
                    }
                }
            }
            for (t, v) in moment.iter_mut().zip(&m) {
                *t += 2.0 * v;
            }
            m
        });
        Self { n_max, lag_sum, moment, lag_moment }
    }

    /// Bilinear form of the kernel for `B = sigma(x) xi`: `A_raw = sigma M sigma^T` and
    /// `c_r = sum_{j,k} d_k sigma_rj (sigma L^T)_kj`, independent of the number of atoms.
    fn evaluate_sigma(&self, parts: (&StateMap, &StateMap, &StateMap), d: usize, x: &[f64], s: &mut Scratch) -> Result<()> {
        let (sigma, grad, drift) = parts;
        s.sigma.resize(d * d, 0.0);
        s.drift.resize(d, 0.0);
        s.grad.resize(d * d * d, 0.0);
        s.work.resize(d * d, 0.0);
        sigma(x, &mut s.sigma);
        drift(x, &mut s.drift);
        ensure_finite(&s.sigma, || format!("sigma at x = {x:?}"))?;
        ensure_finite(&s.drift, || format!("b at x = {x:?}"))?;
        s.b_bar.copy_from_slice(&s.drift);
        // work = sigma M, a_raw = work sigma^T
        for r in 0..d {
            for l in 0..d {
                s.work[r * d + l] = (0..d).map(|j| s.sigma[r * d + j] * self.moment[j * d + l]).sum();
            }
        }
        for r in 0..d {
            for c in 0..d {
                s.a_raw[r * d + c] = (0..d).map(|l| s.work[r * d + l] * s.sigma[c * d + l]).sum();
            }
        }
        if let Some(lag) = &self.lag_moment {
            grad(x, &mut s.grad);
            ensure_finite(&s.grad, || format!("grad sigma at x = {x:?}"))?;
            // work[k][j] = (sigma L^T)_kj
            for k in 0..d {
                for j in 0..d {
                    s.work[k * d + j] = (0..d).map(|l| s.sigma[k * d + l] * lag[j * d + l]).sum();
                }
            }
            for r in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    for k in 0..d {
                        acc += s.grad[(r * d + j) * d + k] * s.work[k * d + j];
                    }
                }
                s.c[r] = acc;
            }
        }
        Ok(())
    }

    fn evaluate(&self, field: &FieldSpec, noise: &NoiseModel, x: &[f64], s: &mut Scratch) -> Result<()> {
        let d = field.state_dim();
        for buf in [&mut s.b_bar, &mut s.c] {
            buf.clear();
            buf.resize(d, 0.0);
        }
        for buf in [&mut s.a, &mut s.a_raw] {
            buf.clear();
            buf.resize(d * d, 0.0);
        }
        match field.sigma_parts() {
            Some(parts) => self.evaluate_sigma(parts, d, x, s)?,
            None => self.evaluate_atoms(field, noise, d, x, s)?,
        }
        for r in 0..d {
            for c in 0..d {
                s.a[r * d + c] = 0.5 * (s.a_raw[r * d + c] + s.a_raw[c * d + r]);
            }
        }
        Ok(())
    }

    /// Sums over atom pairs with the field evaluated at every atom.
    fn evaluate_atoms(&self, field: &FieldSpec, noise: &NoiseModel, d: usize, x: &[f64], s: &mut Scratch) -> Result<()> {
        let atoms = noise.atoms();
        let k = atoms.len();
        let probs = noise.probabilities();
        s.fast.resize(k * d, 0.0);
        s.slow.resize(k * d, 0.0);
        s.jac.resize(k * d * d, 0.0);
        let need_jac = self.lag_sum.is_some();
        for (i, atom) in atoms.iter().enumerate() {
            field.fast_into(x, atom, &mut s.fast[i * d..(i + 1) * d]);
            field.slow_into(x, atom, &mut s.slow[i * d..(i + 1) * d]);
            if need_jac {
                field.jacobian_into(x, atom, &mut s.jac[i * d * d..(i + 1) * d * d]);
            }
        }
        ensure_finite(&s.fast, || format!("B at x = {x:?}"))?;
        ensure_finite(&s.slow, || format!("b at x = {x:?}"))?;
        if need_jac {
            ensure_finite(&s.jac, || format!("grad B at x = {x:?}"))?;
        }
        for (i, &p) in probs.iter().enumerate() {
            let bi = &s.fast[i * d..(i + 1) * d];
            for r in 0..d {
                s.b_bar[r] += p * s.slow[i * d + r];
                for c in 0..d {
                    s.a_raw[r * d + c] += p * bi[r] * bi[c];
                }
            }
        }
        if let Some(w) = &self.lag_sum {
            for a in 0..k {
                let ba = &s.fast[a * d..(a + 1) * d];
                for b in 0..k {
                    let weight = w[(a, b)];
                    if weight == 0.0 {
                        continue;
                    }
                    let bb = &s.fast[b * d..(b + 1) * d];
                    let jb = &s.jac[b * d * d..(b + 1) * d * d];
                    for r in 0..d {
                        // grad B(xi(r)) acting on B(xi(0))
                        let mut acc = 0.0;
                        for c in 0..d {
                            acc += jb[r * d + c] * ba[c];
                        }
                        s.c[r] += weight * acc;
                        for c in 0..d {
                            s.a_raw[r * d + c] += 2.0 * weight * bb[r] * ba[c];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Running first and second moments for per-window samples.
struct Moments {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self { n: 0, sum: vec![0.0; len], sum_sq: vec![0.0; len] }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1;
        for ((s, q), x) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(v) {
            *s += x;
            *q += x * x;
        }
    }

    /// Mean and standard error of the mean.
    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let se = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                if self.n < 2 {
                    return f64::INFINITY;
                }
                let var = ((q - n * m * m) / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            })
            .collect();
        (mean, se)
    }
}

struct WindowEstimates {
    c: (Vec<f64>, Vec<f64>),
    a: (Vec<f64>, Vec<f64>),
    raw: (Vec<f64>, Vec<f64>),
    asym: (Vec<f64>, Vec<f64>),
}

/// Monte Carlo over `n_samples` independent stationary windows `xi(0..=n_max)`.
fn empirical_windows(
    field: &FieldSpec,
    noise: &NoiseModel,
    x: &[f64],
    n_max: usize,
    seed: u64,
    n_samples: usize,
) -> Result<WindowEstimates> {
    let d = field.state_dim();
    let mut c_m = Moments::new(d);
    let mut a_m = Moments::new(d * d);
    let mut raw_m = Moments::new(d * d);
    let mut asym_m = Moments::new(d * d);
    let mut b0 = vec![0.0; d];
    let mut br = vec![0.0; d];
    let mut jr = vec![0.0; d * d];
    let mut c = vec![0.0; d];
    let mut raw = vec![0.0; d * d];
    let mut sym = vec![0.0; d * d];
    let mut asym = vec![0.0; d * d];
    for s in 0..n_samples {
        let mut sampler = noise.sampler(seed, streams::ESTIMATOR + s as u64);
        field.fast_into(x, sampler.next_atom(), &mut b0);
        ensure_finite(&b0, || format!("B at x = {x:?}"))?;
        c.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..d {
            for k in 0..d {
                raw[r * d + k] = b0[r] * b0[k];
            }
        }
        for _lag in 1..=n_max {
            let atom = sampler.next_atom();
            field.fast_into(x, atom, &mut br);
            field.jacobian_into(x, atom, &mut jr);
            ensure_finite(&br, || format!("B at x = {x:?}"))?;
            ensure_finite(&jr, || format!("grad B at x = {x:?}"))?;
            for r in 0..d {
                c[r] += (0..d).map(|k| jr[r * d + k] * b0[k]).sum::<f64>();
                for k in 0..d {
                    raw[r * d + k] += 2.0 * br[r] * b0[k];
                }
            }
        }
        for r in 0..d {
            for k in 0..d {
                sym[r * d + k] = 0.5 * (raw[r * d + k] + raw[k * d + r]);
                asym[r * d + k] = raw[r * d + k] - raw[k * d + r];
            }
        }
        c_m.push(&c);
        a_m.push(&sym);
        raw_m.push(&raw);
        asym_m.push(&asym);
    }
    Ok(WindowEstimates { c: c_m.finish(), a: a_m.finish(), raw: raw_m.finish(), asym: asym_m.finish() })
}

/// Limit coefficients at a single point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCoefficients {
    pub x: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
    pub a: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub correction_truncation_bound: f64,
    pub diffusion_truncation_bound: f64,
    pub b_bar_std_error: Option<Vec<f64>>,
    pub c_std_error: Option<Vec<f64>>,
    pub a_std_error: Option<DMatrix<f64>>,
}

impl PointCoefficients {
    /// `b_bar + c`, the drift of the limiting equation.
    pub fn drift(&self) -> Vec<f64> {
        self.b_bar.iter().zip(&self.c).map(|(a, b)| a + b).collect()
    }
}

/// Invariant checks at one probe point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeAudit {
    pub x: Vec<f64>,
    pub asymmetry: f64,
    pub min_eigenvalue: f64,
    pub sqrt_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientAudit {
    pub field: FieldAudit,
    pub probes: Vec<ProbeAudit>,
}

impl CoefficientAudit {
    pub fn passed(&self) -> bool {
        self.field.within_bound
            && self.probes.iter().all(|p| {
                p.asymmetry <= 1e-12 && p.min_eigenvalue >= -PSD_TOLERANCE && p.sqrt_residual <= 1e-10
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientOptions {
    pub mode: EstimatorMode,
    /// `None` picks [`default_truncation_lag`].
    pub n_max: Option<usize>,
    pub n_samples: usize,
}

impl Default for CoefficientOptions {
    fn default() -> Self {
        Self { mode: EstimatorMode::Analytic, n_max: None, n_samples: 10_000 }
    }
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

/// `b_bar`, `c`, `A` and `sigma` as lazily evaluated maps, with a per-point cache.
pub struct LimitCoefficients {
    field: FieldSpec,
    noise: NoiseModel,
    options: CoefficientOptions,
    n_max: usize,
    kernel: AnalyticKernel,
    cache: RwLock<HashMap<Vec<u64>, Arc<PointCoefficients>>>,
    audit: CoefficientAudit,
}

impl std::fmt::Debug for LimitCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LimitCoefficients")
            .field("field", &self.field)
            .field("noise", self.noise.spec())
            .field("n_max", &self.n_max)
            .field("mode", &self.options.mode)
            .finish()
    }
}

impl LimitCoefficients {
    /// Bundles the coefficient maps and audits their invariants at `probes`.
    pub fn build(field: FieldSpec, noise: NoiseModel, probes: &[Vec<f64>], options: CoefficientOptions) -> Result<Self> {
        if probes.is_empty() {
            return Err(Error::InvalidInput("at least one probe point is required".into()));
        }
        let n_max = options.n_max.unwrap_or_else(|| default_truncation_lag(&field, &noise));
        check_lag(n_max)?;
        if options.n_samples == 0 {
            return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
        }
        let kernel = AnalyticKernel::new(&noise, n_max);
        let field_audit = field.audit(&noise, probes)?;
        let mut built = Self {
            field,
            noise,
            options,
            n_max,
            kernel,
            cache: RwLock::new(HashMap::new()),
            audit: CoefficientAudit { field: field_audit, probes: Vec::new() },
        };
        let mut probe_audits = Vec::with_capacity(probes.len());
        for x in probes {
            let pc = built.at(x)?;
            let asymmetry = (&pc.a - pc.a.transpose()).amax();
            let min_eigenvalue = SymmetricEigen::new(pc.a.clone()).eigenvalues.min();
            let sqrt_residual = (&pc.sigma * &pc.sigma - &pc.a).norm();
            probe_audits.push(ProbeAudit { x: x.clone(), asymmetry, min_eigenvalue, sqrt_residual });
        }
        built.audit.probes = probe_audits;
        Ok(built)
    }

    pub fn field(&self) -> &FieldSpec {
        &self.field
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn mode(&self) -> EstimatorMode {
        self.options.mode
    }

    pub fn audit(&self) -> &CoefficientAudit {
        &self.audit
    }

    pub fn dim(&self) -> usize {
        self.field.state_dim()
    }

    /// Cached evaluation.
    pub fn at(&self, x: &[f64]) -> Result<Arc<PointCoefficients>> {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = self.cache.read().expect("coefficient cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let pc = Arc::new(self.evaluate(x)?);
        let mut cache = self.cache.write().expect("coefficient cache poisoned");
        Ok(cache.entry(key).or_insert(pc).clone())
    }

    pub fn cached_points(&self) -> usize {
        self.cache.read().expect("coefficient cache poisoned").len()
    }

    /// Uncached evaluation.
    pub fn evaluate(&self, x: &[f64]) -> Result<PointCoefficients> {
        check_dim(x, self.dim(), "x")?;
        let d = self.dim();
        let n = self.options.n_samples;
        let (b_bar, c, a, b_se, c_se, a_se) = match self.options.mode {
            EstimatorMode::Analytic => {
                let mut s = Scratch::default();
                self.kernel.evaluate(&self.field, &self.noise, x, &mut s)?;
                (s.b_bar, s.c, DMatrix::from_row_slice(d, d, &s.a), None, None, None)
            }
            mode @ EstimatorMode::Empirical { .. } => {
                let b = drift_mean(&self.field, &self.noise, x, mode, n)?;
                let c = drift_correction(&self.field, &self.noise, x, self.n_max, mode, n)?;
                let a = diffusion_matrix(&self.field, &self.noise, x, self.n_max, mode, n)?;
                (b.value, c.value, a.value, b.std_error, c.std_error, a.std_error)
            }
        };
        let sigma = symmetric_sqrt(&a)?;
        Ok(PointCoefficients {
            x: x.to_vec(),
            b_bar,
            c,
            a,
            sigma,
            correction_truncation_bound: correction_truncation_bound(&self.noise, self.field.bound(), self.n_max),
            diffusion_truncation_bound: diffusion_truncation_bound(&self.noise, self.field.bound(), self.n_max),
            b_bar_std_error: b_se,
            c_std_error: c_se,
            a_std_error: a_se,
        })
    }

    /// Writes `b_bar + c` and row-major `sigma` at `x` without touching the cache.
    pub fn drift_and_sigma_into(&self, x: &[f64], drift: &mut [f64], sigma: &mut [f64]) -> Result<()> {
        let d = self.dim();
        match self.options.mode {
            EstimatorMode::Analytic => SCRATCH.with(|cell| {
                let mut s = cell.borrow_mut();
                self.kernel.evaluate(&self.field, &self.noise, x, &mut s)?;
                for i in 0..d {
                    drift[i] = s.b_bar[i] + s.c[i];
                }
                if d == 1 {
                    let a = s.a[0];
                    if a < -PSD_TOLERANCE {
                        return Err(Error::NotPsd { min_eigenvalue: a });
                    }
                    sigma[0] = a.max(0.0).sqrt();
                } else {
                    let root = symmetric_sqrt(&DMatrix::from_row_slice(d, d, &s.a))?;
                    for i in 0..d {
                        for j in 0..d {
                            sigma[i * d + j] = root[(i, j)];
                        }
                    }
                }
                Ok(())
            }),
            EstimatorMode::Empirical { .. } => {
                let pc = self.evaluate(x)?;
                drift.copy_from_slice(&pc.drift());
                for i in 0..d {
                    for j in 0..d {
                        sigma[i * d + j] = pc.sigma[(i, j)];
                    }
                }
                Ok(())
            }
        }
    }

    /// Analytic kernel's truncation lag; equals [`Self::n_max`].
    pub fn kernel_lag(&self) -> usize {
        self.kernel.n_max
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Expr, FieldConfig, NoiseMap};
    use std::sync::Arc;

    fn sine_markov(p: f64) -> (FieldSpec, NoiseModel) {
        let noise = NoiseModel::two_state_markov(p).unwrap();
        let field = FieldConfig::SigmaXi {
            sigma: vec![vec![Expr::Sin { base: 1.0, amp: 0.1, freq: 1.0, phase: 0.0, coord: 0 }]],
            drift: vec![Expr::Const(0.0)],
        }
        .build(&noise)
        .unwrap();
        (field, noise)
    }

    fn scalar_field(fast: impl Fn(f64, f64) -> f64 + Send + Sync + 'static, slow: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> FieldSpec {
        let fast: NoiseMap = Arc::new(move |x, xi, out| out[0] = fast(x[0], xi[0]));
        let slow: NoiseMap = Arc::new(move |x, xi, out| out[0] = slow(x[0], xi[0]));
        FieldSpec::new(1, 1, fast, slow, 2.0).unwrap()
    }

    #[test]
    fn drift_mean_constant_integrand() {
        let noise = NoiseModel::rademacher_iid(1).unwrap();
        let f = scalar_field(|_, xi| xi, |_, _| 0.75);
        let m = drift_mean(&f, &noise, &[0.3], EstimatorMode::Analytic, 1).unwrap();
        assert_eq!(m.value, vec![0.75]);
    }

    #[test]
    fn drift_mean_mean_zero_integrand_is_exact_zero() {
        let noise = NoiseModel::rademacher_iid(1).unwrap();
        let f = scalar_field(|_, xi| xi, |x, xi| x * xi);
        let m = drift_mean(&f, &noise, &[1.7], EstimatorMode::Analytic, 1).unwrap();
        assert_eq!(m.value, vec![0.0]);
    }

    #[test]
    fn drift_mean_atom_sum() {
        let noise = NoiseModel::rademacher_iid(1).unwrap();
        let f = scalar_field(|_, xi| xi, |x, xi| x.sin() + xi * xi);
        let x = 0.9f64;
        let m = drift_mean(&f, &noise, &[x], EstimatorMode::Analytic, 1).unwrap();
        let oracle = 0.5 * (x.sin() + 1.0) + 0.5 * (x.sin() + 1.0);
        assert!((m.value[0] - oracle).abs() < 1e-15);
        assert!((m.value[0] - (x.sin() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn drift_mean_empirical_reports_standard_error() {
        let noise = NoiseModel::rademacher_iid(1).unwrap();
        let f = scalar_field(|_, xi| xi, |_, xi| 1.0 + xi);
        let m = drift_mean(&f, &noise, &[0.0], EstimatorMode::Empirical { seed: 3 }, 20_000).unwrap();
        let se = m.std_error.unwrap()[0];
        assert!(se > 0.0 && (m.value[0] - 1.0).abs() < 4.0 * se);
    }

    #[test]
    fn iid_correction_vanishes() {
        let noise = NoiseModel::rademacher_iid(1).unwrap();
        let f = scalar_field(|x, xi| x.sin() * xi, |_, _| 0.0);
        let c = drift_correction(&f, &noise, &[0.4], 5, EstimatorMode::Analytic, 1).unwrap();
        assert_eq!(c.value, vec![0.0]);
        assert_eq!(c.truncation_bound, 0.0);
    }

    #[test]
    fn x_independent_field_has_no_correction() {
        let noise = NoiseModel::two_state_markov(0.3).unwrap();
        let f = scalar_field(|_, xi| 0.5 * xi, |_, _| 0.0);
        let c = drift_correction(&f, &noise, &[1.1], 40, EstimatorMode::Analytic, 1).unwrap();
        assert!(c.value[0].abs() < 1e-12);
    }

    #[test]
    fn markov_correction_closed_form() {
        let p = 0.3;
        let (f, noise) = sine_markov(p);
        for x in [-1.3f64, 0.0, 0.4, 2.2] {
            let c = drift_correction(&f, &noise, &[x], 60, EstimatorMode::Analytic, 1).unwrap();
            let s = 1.0 + 0.1 * x.sin();
            let ds = 0.1 * x.cos();
            let expected = ds * s * (1.0 - 2.0 * p) / (2.0 * p);
            assert!((c.value[0] - expected).abs() < 1e-10 + c.truncation_bound);
        }
    }

    #[test]
    fn cesaro_average_within_bias_bound_of_series() {
        let p = 0.3;
        let (f, noise) = sine_markov(p);
        let x = [0.7];
        let n = 300;
        let ces = cesaro_oracle(&f, &noise, &x, n).unwrap();
        let c = drift_correction(&f, &noise, &x, 80, EstimatorMode::Analytic, 1).unwrap();
        let a = diffusion_matrix(&f, &noise, &x, 80, EstimatorMode::Analytic, 1).unwrap();
        let c_gap = (ces.c[0] - c.value[0]).abs();
        let a_gap = (ces.a[(0, 0)] - a.value[(0, 0)]).abs();
        assert!(c_gap <= ces.c_bias_bound + c.truncation_bound, "{c_gap} > {}", ces.c_bias_bound);
        assert!(a_gap <= ces.a_bias_bound + a.truncation_bound, "{a_gap} > {}", ces.a_bias_bound);
        // the average approaches the series at rate 1/n
        let finer = cesaro_oracle(&f, &noise, &x, 4 * n).unwrap();
        assert!((finer.a[(0, 0)] - a.value[(0, 0)]).abs() < a_gap);
    }

    #[test]
    fn cesaro_iid_correction_vanishes() {
        let noise = NoiseModel::rademacher_iid(1).unwrap();
        let f = FieldConfig::SigmaXi {
            sigma: vec![vec![Expr::Sin { base: 1.0, amp: 0.4, freq: 1.0, phase: 0.0, coord: 0 }]],
            drift: vec![Expr::Const(0.0)],
        }
        .build(&noise)
        .unwrap();
        let ces = cesaro_oracle(&f, &noise, &[0.3], 50).unwrap();
        assert_eq!(ces.c[0], 0.0);
        let s = 1.0 + 0.4 * 0.3f64.sin();
        // n + 1 diagonal terms over n
        assert!((ces.a[(0, 0)] - s * s * 51.0 / 50.0).abs() < 1e-12);
        assert_eq!(ces.c_bias_bound, 0.0);
    }

    #[test]
    fn iid_diffusion_matrix_is_sigma_sigma_t() {
        let noise = NoiseModel::rademacher_iid(2).unwrap();
        let s = [[0.9, 0.3], [-0.2, 1.4]];
        let field = FieldConfig::SigmaXi {
            sigma: s.iter().map(|r| r.iter().map(|&v| Expr::Const(v)).collect()).collect(),
            drift: vec![Expr::Const(0.0); 2],
        }
        .build(&noise)
        .unwrap();
        let a = diffusion_matrix(&field, &noise, &[0.0, 0.0], 3, EstimatorMode::Analytic, 1).unwrap();
        let sm = DMatrix::from_row_slice(2, 2, &[0.9, 0.3, -0.2, 1.4]);
        assert!((a.value - &sm * sm.transpose()).amax() < 1e-14);
    }

    #[test]
    fn markov_diffusion_closed_form() {
        let p = 0.25;
        let (f, noise) = sine_markov(p);
        let x = 0.8f64;
        let a = diffusion_matrix(&f, &noise, &[x], 60, EstimatorMode::Analytic, 1).unwrap();
        let s = 1.0 + 0.1 * x.sin();
        assert!((a.value[(0, 0)] - s * s * (1.0 - p) / p).abs() < 1e-12);
    }

    fn opaque(f: &FieldSpec) -> FieldSpec {
        let (a, b, c) = (f.clone(), f.clone(), f.clone());
        let fast: NoiseMap = Arc::new(move |x, xi, out| a.fast_into(x, xi, out));
        let slow: NoiseMap = Arc::new(move |x, xi, out| b.slow_into(x, xi, out));
        let jac: NoiseMap = Arc::new(move |x, xi, out| c.jacobian_into(x, xi, out));
        FieldSpec::new(f.state_dim(), f.noise_dim(), fast, slow, f.bound()).unwrap().with_jacobian(jac)
    }

    #[test]
    fn sigma_form_kernel_matches_atom_sums() {
        let (markov_field, markov) = sine_markov(0.25);
        let iid = NoiseModel::rademacher_iid(2).unwrap();
        let sin = |base, amp, coord| Expr::Sin { base, amp, freq: 1.3, phase: 0.2, coord };
        let iid_field = FieldConfig::SigmaXi {
            sigma: vec![vec![sin(1.0, 0.3, 0), sin(0.2, 0.1, 1)], vec![sin(-0.4, 0.2, 1), sin(0.8, 0.3, 0)]],
            drift: vec![Expr::Const(0.1), sin(0.0, 0.5, 1)],
        }
        .build(&iid)
        .unwrap();
        for (field, noise, x) in [(markov_field, markov, vec![0.9]), (iid_field, iid, vec![0.4, -1.1])] {
            assert!(field.sigma_parts().is_some());
            let plain = opaque(&field);
            assert!(plain.sigma_parts().is_none());
            let kernel = AnalyticKernel::new(&noise, 40);
            let (mut s1, mut s2) = (Scratch::default(), Scratch::default());
            kernel.evaluate(&field, &noise, &x, &mut s1).unwrap();
            kernel.evaluate(&plain, &noise, &x, &mut s2).unwrap();
            for (u, v) in s1.b_bar.iter().chain(&s1.c).chain(&s1.a).zip(s2.b_bar.iter().chain(&s2.c).chain(&s2.a)) {
                assert!((u - v).abs() < 1e-13, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn zero_field_zero_matrix() {
        let noise = NoiseModel::two_state_markov(0.4).unwrap();
        let f = scalar_field(|_, _| 0.0, |_, _| 0.0);
        let a = diffusion_matrix(&f, &noise, &[0.0], 10, EstimatorMode::Analytic, 1).unwrap();
        assert_eq!(a.value, DMatrix::zeros(1, 1));
    }

    #[test]
    fn empirical_matches_analytic_within_standard_errors() {
        let p = 0.25;
        let (f, noise) = sine_markov(p);
        let x = [0.5];
        let n_max = 25;
        let mode = EstimatorMode::Empirical { seed: 17 };
        let c_a = drift_correction(&f, &noise, &x, n_max, EstimatorMode::Analytic, 1).unwrap();
        let c_e = drift_correction(&f, &noise, &x, n_max, mode, 40_000).unwrap();
        let a_a = diffusion_matrix(&f, &noise, &x, n_max, EstimatorMode::Analytic, 1).unwrap();
        let a_e = diffusion_matrix(&f, &noise, &x, n_max, mode, 40_000).unwrap();
        let c_se = c_e.std_error.as_ref().unwrap()[0];
        let a_se = a_e.std_error.as_ref().unwrap()[(0, 0)];
        assert!((c_e.value[0] - c_a.value[0]).abs() < 4.0 * c_se, "{c_e:?} vs {c_a:?}");
        assert!((a_e.value[(0, 0)] - a_a.value[(0, 0)]).abs() < 4.0 * a_se);
    }

    #[test]
    fn empirical_raw_estimate_is_symmetric_within_noise() {
        let noise = NoiseModel::rademacher_iid(2).unwrap();
        let field = FieldConfig::SigmaXi {
            sigma: vec![
                vec![Expr::Const(1.0), Expr::Const(0.4)],
                vec![Expr::Const(-0.3), Expr::Const(0.7)],
            ],
            drift: vec![Expr::Const(0.0); 2],
        }
        .build(&noise)
        .unwrap();
        let est = diffusion_matrix(&field, &noise, &[0.0, 0.0], 4, EstimatorMode::Empirical { seed: 5 }, 20_000).unwrap();
        assert_eq!(est.value, est.value.transpose());
        let se = est.asymmetry_std_error.unwrap();
        let gap = (&est.raw - est.raw.transpose())[(0, 1)].abs();
        assert!(gap < 3.0 * se[(0, 1)] + 1e-12, "gap {gap} se {}", se[(0, 1)]);
    }

    #[test]
    fn sqrt_examples() {
        assert_eq!(symmetric_sqrt(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3));
        let r = symmetric_sqrt(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert!((r - DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-14);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = symmetric_sqrt(&a).unwrap();
        assert!((&s * &s - &a).norm() < 1e-12);
        // eigenvalues 3 and 1 along (1,1) and (1,-1)
        let h = (3f64.sqrt() + 1.0) / 2.0;
        let o = (3f64.sqrt() - 1.0) / 2.0;
        assert!((s - DMatrix::from_row_slice(2, 2, &[h, o, o, h])).amax() < 1e-12);
    }

    #[test]
    fn sqrt_rejects_bad_input() {
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(symmetric_sqrt(&indefinite), Err(Error::NotPsd { .. })));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(symmetric_sqrt(&asym), Err(Error::InvalidInput(_))));
        let slightly = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let s = symmetric_sqrt(&slightly).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
    }

    #[test]
    fn default_lag_meets_target() {
        let (f, noise) = sine_markov(0.25);
        let n = default_truncation_lag(&f, &noise);
        assert!(diffusion_truncation_bound(&noise, f.bound(), n) < 1e-8);
        assert!(diffusion_truncation_bound(&noise, f.bound(), n - 1) >= 1e-8);
        let iid = NoiseModel::rademacher_iid(1).unwrap();
        assert_eq!(default_truncation_lag(&f, &iid), 1);
    }

    #[test]
    fn limit_coefficients_cache_and_audit() {
        let (f, noise) = sine_markov(0.25);
        let probes: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.7 - 1.0]).collect();
        let lc = LimitCoefficients::build(f, noise, &probes, CoefficientOptions::default()).unwrap();
        assert!(lc.audit().passed(), "{:?}", lc.audit());
        assert_eq!(lc.cached_points(), 5);
        let a = lc.at(&[0.3]).unwrap();
        let b = lc.at(&[0.3]).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let mut drift = [0.0];
        let mut sigma = [0.0];
        lc.drift_and_sigma_into(&[0.3], &mut drift, &mut sigma).unwrap();
        assert_eq!(drift[0], a.drift()[0]);
        assert!((sigma[0] - a.sigma[(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn empty_probes_rejected() {
        let (f, noise) = sine_markov(0.25);
        assert!(LimitCoefficients::build(f, noise, &[], CoefficientOptions::default()).is_err());
    }

    #[test]
    fn non_finite_field_reports_location() {
        let noise = NoiseModel::rademacher_iid(1).unwrap();
        let f = scalar_field(|x, xi| xi / x, |_, _| 0.0);
        let err = diffusion_matrix(&f, &noise, &[0.0], 2, EstimatorMode::Analytic, 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
