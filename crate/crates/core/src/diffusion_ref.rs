//! Euler–Maruyama reference for the limiting diffusion and Kolmogorov–Smirnov distances
//! between ensembles.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::coefficients::LimitCoefficients;
use crate::error::{ensure_finite, Error, Result};
use crate::field::check_dim;
use crate::rng::{stream_rng, streams};

/// Drift and dispersion of a diffusion `dX = drift(X) dt + sigma(X) dW`.
pub trait DiffusionCoefficients: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `drift(x)` and row-major `sigma(x)`.
    fn eval(&self, x: &[f64], drift: &mut [f64], sigma: &mut [f64]) -> Result<()>;

    /// True when neither coefficient depends on `x`; Euler–Maruyama is then exact in law.
    fn is_constant(&self) -> bool {
        false
    }
}

/// State-independent coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantCoefficients {
    drift: Vec<f64>,
    sigma: Vec<f64>,
}

impl ConstantCoefficients {
    /// `sigma` is row-major `d x d`.
    pub fn new(drift: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let d = drift.len();
        if d == 0 || sigma.len() != d * d {
            return Err(Error::InvalidDimension(format!(
                "drift of length {d} needs a {d}x{d} sigma, got {} entries",
                sigma.len()
            )));
        }
        Ok(Self { drift, sigma })
    }
}

impl DiffusionCoefficients for ConstantCoefficients {
    fn dim(&self) -> usize {
        self.drift.len()
    }

    fn eval(&self, _x: &[f64], drift: &mut [f64], sigma: &mut [f64]) -> Result<()> {
        drift.copy_from_slice(&self.drift);
        sigma.copy_from_slice(&self.sigma);
        Ok(())
    }

    fn is_constant(&self) -> bool {
        true
    }
}

type CoefficientFn = dyn Fn(&[f64], &mut [f64], &mut [f64]) + Send + Sync;

/// Coefficients supplied as a closure.
#[derive(Clone)]
pub struct FnCoefficients {
    dim: usize,
    f: Arc<CoefficientFn>,
}

impl FnCoefficients {
    pub fn new(dim: usize, f: impl Fn(&[f64], &mut [f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { dim, f: Arc::new(f) }
    }
}

impl DiffusionCoefficients for FnCoefficients {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], drift: &mut [f64], sigma: &mut [f64]) -> Result<()> {
        (self.f)(x, drift, sigma);
        Ok(())
    }
}

/// Drift `b_bar + c` and dispersion `sigma = A^{1/2}`.
impl DiffusionCoefficients for LimitCoefficients {
    fn dim(&self) -> usize {
        LimitCoefficients::dim(self)
    }

    fn eval(&self, x: &[f64], drift: &mut [f64], sigma: &mut [f64]) -> Result<()> {
        self.drift_and_sigma_into(x, drift, sigma)
    }

    fn is_constant(&self) -> bool {
        self.field().is_constant()
    }
}

/// A diffusion started at `x0` on `[0, horizon]`.
#[derive(Clone)]
pub struct DiffusionSpec {
    pub coefficients: Arc<dyn DiffusionCoefficients>,
    pub x0: Vec<f64>,
    pub horizon: f64,
}

impl DiffusionSpec {
    pub fn new(coefficients: Arc<dyn DiffusionCoefficients>, x0: Vec<f64>, horizon: f64) -> Result<Self> {
        check_dim(&x0, coefficients.dim(), "x0")?;
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { coefficients, x0, horizon })
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }
}

/// Reference step paired with scheme scale `eps`: `eps^2 min(1, eps)`.
pub fn reference_dt(eps: f64) -> f64 {
    eps * eps * eps.min(1.0)
}

/// Grid record of one Euler–Maruyama path.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl ContinuousPath {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("path has at least the initial state")
    }

    /// Linear interpolation between grid points.
    pub fn at(&self, t: f64) -> Result<Vec<f64>> {
        let horizon = *self.times.last().expect("non-empty grid");
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::OutOfRange { t, horizon });
        }
        let k = self.times.partition_point(|&s| s <= t).saturating_sub(1);
        if k + 1 >= self.times.len() {
            return Ok(self.states[k].clone());
        }
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        Ok(self.states[k]
            .iter()
            .zip(&self.states[k + 1])
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect())
    }
}

/// Step sizes covering `[0, T]`: full steps of `dt` and a shorter final step if needed.
fn step_plan(dt: f64, horizon: f64) -> Result<(usize, f64)> {
    if !(dt.is_finite() && dt > 0.0) || dt > horizon * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!("dt must lie in (0, T], got {dt}")));
    }
    let full = (horizon / dt + 1e-9).floor() as usize;
    let rest = horizon - full as f64 * dt;
    Ok((full, if rest > dt * 1e-9 { rest } else { 0.0 }))
}

struct EmState {
    drift: Vec<f64>,
    sigma: Vec<f64>,
    z: Vec<f64>,
}

impl EmState {
    fn new(d: usize) -> Self {
        Self { drift: vec![0.0; d], sigma: vec![0.0; d * d], z: vec![0.0; d] }
    }
}

#[inline]
fn em_step<R: rand::Rng>(
    coeffs: &dyn DiffusionCoefficients,
    x: &mut [f64],
    h: f64,
    rng: &mut R,
    st: &mut EmState,
    index: usize,
) -> Result<()> {
    let d = x.len();
    coeffs.eval(x, &mut st.drift, &mut st.sigma)?;
    for z in st.z.iter_mut() {
        *z = StandardNormal.sample(rng);
    }
    let sq = h.sqrt();
    for i in 0..d {
        let mut noise = 0.0;
        for j in 0..d {
            noise += st.sigma[i * d + j] * st.z[j];
        }
        x[i] += sq * noise + st.drift[i] * h;
    }
    ensure_finite(x, || format!("Euler-Maruyama step {index}"))
}

/// One Euler–Maruyama path on stream 0 of `seed`.
pub fn euler_maruyama(spec: &DiffusionSpec, dt: f64, seed: u64) -> Result<ContinuousPath> {
    let (full, rest) = step_plan(dt, spec.horizon)?;
    let d = spec.dim();
    let coeffs = spec.coefficients.as_ref();
    let mut rng = stream_rng(seed, streams::REFERENCE);
    let mut st = EmState::new(d);
    let mut x = spec.x0.clone();
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    for k in 0..full {
        em_step(coeffs, &mut x, dt, &mut rng, &mut st, k)?;
        times.push((k + 1) as f64 * dt);
        states.push(x.clone());
    }
    if rest > 0.0 {
        em_step(coeffs, &mut x, rest, &mut rng, &mut st, full)?;
        times.push(spec.horizon);
        states.push(x.clone());
    }
    Ok(ContinuousPath { times, states })
}

/// Terminal values of `paths` independent Euler–Maruyama paths (path `i` on stream `i`).
pub fn euler_maruyama_terminal(spec: &DiffusionSpec, dt: f64, seed: u64, paths: usize) -> Result<Vec<Vec<f64>>> {
    let (full, rest) = step_plan(dt, spec.horizon)?;
    let d = spec.dim();
    let coeffs = spec.coefficients.as_ref();
    (0..paths)
        .into_par_iter()
        .map_init(
            || EmState::new(d),
            |st, i| {
                let mut rng = stream_rng(seed, streams::REFERENCE + i as u64);
                let mut x = spec.x0.clone();
                for k in 0..full {
                    em_step(coeffs, &mut x, dt, &mut rng, st, k)?;
                }
                if rest > 0.0 {
                    em_step(coeffs, &mut x, rest, &mut rng, st, full)?;
                }
                Ok(x)
            },
        )
        .collect()
}

/// Two-sample Kolmogorov–Smirnov statistic `sup_x |F_a(x) - F_b(x)|`.
pub fn ks_distance(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::InvalidInput("KS distance needs non-empty samples".into()));
    }
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    ensure_finite(&a, || "KS sample a".into())?;
    ensure_finite(&b, || "KS sample b".into())?;
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut sup: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(sup)
}

/// One-sample statistic `sup_x |F_n(x) - cdf(x)|` against a continuous law.
pub fn ks_to_cdf(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("KS distance needs non-empty samples".into()));
    }
    let mut s = samples.to_vec();
    ensure_finite(&s, || "KS sample".into())?;
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut sup: f64 = 0.0;
    let mut i = 0;
    while i < s.len() {
        let x = s[i];
        let below = i as f64 / n;
        while i < s.len() && s[i] == x {
            i += 1;
        }
        let f = cdf(x);
        sup = sup.max((f - below).abs()).max((i as f64 / n - f).abs());
    }
    Ok(sup)
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * erfc(-(x - mean) / (sd * std::f64::consts::SQRT_2))
}

/// KS statistics per coordinate and for the Euclidean norm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalKs {
    pub per_coord: Vec<f64>,
    pub norm: f64,
}

pub fn ks_marginals(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MarginalKs> {
    let d = a.first().map(Vec::len).ok_or_else(|| Error::InvalidInput("empty ensemble".into()))?;
    if b.first().map(Vec::len) != Some(d) {
        return Err(Error::InvalidInput("ensembles differ in dimension or are empty".into()));
    }
    let per_coord = (0..d)
        .map(|i| {
            let xa: Vec<f64> = a.iter().map(|v| v[i]).collect();
            let xb: Vec<f64> = b.iter().map(|v| v[i]).collect();
            ks_distance(&xa, &xb)
        })
        .collect::<Result<Vec<_>>>()?;
    let na: Vec<f64> = a.iter().map(|v| crate::field::norm(v)).collect();
    let nb: Vec<f64> = b.iter().map(|v| crate::field::norm(v)).collect();
    Ok(MarginalKs { per_coord, norm: ks_distance(&na, &nb)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn constant(drift: f64, sigma: f64) -> DiffusionSpec {
        DiffusionSpec::new(Arc::new(ConstantCoefficients::new(vec![drift], vec![sigma]).unwrap()), vec![0.0], 1.0).unwrap()
    }

    #[test]
    fn deterministic_drift() {
        let p = euler_maruyama(&constant(1.0, 0.0), 0.01, 3).unwrap();
        assert!((p.terminal()[0] - 1.0).abs() < 1e-12);
        assert!((p.at(0.505).unwrap()[0] - 0.505).abs() < 1e-12);
    }

    #[test]
    fn partial_last_step_lands_on_horizon() {
        let spec = DiffusionSpec::new(Arc::new(ConstantCoefficients::new(vec![2.0], vec![0.0]).unwrap()), vec![1.0], 1.0).unwrap();
        let p = euler_maruyama(&spec, 0.3, 0).unwrap();
        assert_eq!(p.times.len(), 5);
        assert!((p.terminal()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn bad_dt_rejected() {
        assert!(euler_maruyama(&constant(0.0, 1.0), 0.0, 0).is_err());
        assert!(euler_maruyama(&constant(0.0, 1.0), 2.0, 0).is_err());
    }

    #[test]
    fn gaussian_law_of_constant_coefficients() {
        let s = 0.7;
        let xs = euler_maruyama_terminal(&constant(0.0, s), 0.05, 5, 100_000).unwrap();
        let v: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        let (mean, var) = crate::scheme::mean_variance(&v);
        let n = v.len() as f64;
        assert!(mean.abs() < 3.0 * s / n.sqrt());
        // Var of the sample variance of a normal: 2 sigma^4 / (n - 1)
        assert!((var - s * s).abs() < 3.0 * (2.0f64).sqrt() * s * s / (n - 1.0).sqrt());
    }

    #[test]
    fn independent_components() {
        let spec = DiffusionSpec::new(
            Arc::new(ConstantCoefficients::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
            vec![0.0, 0.0],
            1.0,
        )
        .unwrap();
        let xs = euler_maruyama_terminal(&spec, 0.1, 8, 50_000).unwrap();
        let n = xs.len() as f64;
        let corr = xs.iter().map(|x| x[0] * x[1]).sum::<f64>() / n;
        assert!(corr.abs() < 3.0 / n.sqrt());
    }

    #[test]
    fn ks_identical_is_zero() {
        let a = [0.3, -1.0, 2.0, 2.0, 5.5];
        assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ks_disjoint_is_one() {
        assert_eq!(ks_distance(&[0.0, 1.0], &[2.0, 3.0, 4.0]).unwrap(), 1.0);
    }

    #[test]
    fn ks_empty_rejected() {
        assert!(matches!(ks_distance(&[], &[1.0]), Err(Error::InvalidInput(_))));
        assert!(ks_to_cdf(&[], |x| x).is_err());
    }

    fn normals(seed: u64, n: usize, shift: f64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0);
        (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); shift + z }).collect()
    }

    #[test]
    fn ks_null_and_shifted_normals() {
        let n = 100_000;
        let a = normals(1, n, 0.0);
        let b = normals(2, n, 0.0);
        assert!(ks_distance(&a, &b).unwrap() < 0.02);
        // sup |Phi(x) - Phi(x - 1)| is attained at x = 1/2
        let oracle = (0..=20_000)
            .map(|i| {
                let x = -5.0 + i as f64 * 5e-4;
                (normal_cdf(x, 0.0, 1.0) - normal_cdf(x, 1.0, 1.0)).abs()
            })
            .fold(0.0, f64::max);
        assert!((oracle - 0.3829).abs() < 1e-4);
        let c = normals(3, n, 1.0);
        assert!((ks_distance(&a, &c).unwrap() - oracle).abs() < 0.01);
    }

    #[test]
    fn ks_to_cdf_matches_two_sample_on_large_reference() {
        let a = normals(4, 20_000, 0.0);
        let d = ks_to_cdf(&a, |x| normal_cdf(x, 0.0, 1.0)).unwrap();
        assert!(d < 0.02 && d > 0.0);
    }

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0, 0.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.96, 0.0, 1.0) - 0.975_002_104_851_779_5).abs() < 1e-11);
    }

    #[test]
    fn marginals_include_norm() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let m = ks_marginals(&a, &a).unwrap();
        assert_eq!(m.per_coord, vec![0.0, 0.0]);
        assert_eq!(m.norm, 0.0);
    }
}
