//! Coefficient maps `B(x, xi)` and `b(x, xi)` of the slow motion.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::noise::NoiseModel;

/// `(x, xi, out)`: writes a vector (or row-major matrix) depending on state and noise.
pub type NoiseMap = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(x, out)`: writes a vector or row-major matrix depending on state only.
pub type StateMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Relative central-difference step used when no analytic Jacobian is supplied.
pub const FD_STEP: f64 = 1e-5;

/// The fast field `B`, slow field `b`, and their uniform bound `L`.
#[derive(Clone)]
pub struct FieldSpec {
    state_dim: usize,
    noise_dim: usize,
    fast: NoiseMap,
    slow: NoiseMap,
    fast_jacobian: Option<NoiseMap>,
    bound: f64,
    sigma: Option<StateMap>,
    sigma_grad: Option<StateMap>,
    drift: Option<StateMap>,
    constant: bool,
}

impl fmt::Debug for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FieldSpec")
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("bound", &self.bound)
            .field("analytic_jacobian", &self.fast_jacobian.is_some())
            .field("sigma_times_xi", &self.sigma.is_some())
            .field("constant", &self.constant)
            .finish()
    }
}

impl FieldSpec {
    pub fn new(state_dim: usize, noise_dim: usize, fast: NoiseMap, slow: NoiseMap, bound: f64) -> Result<Self> {
        if state_dim == 0 || noise_dim == 0 {
            return Err(Error::InvalidDimension("field dimensions must be >= 1".into()));
        }
        if !(bound.is_finite() && bound >= 0.0) {
            return Err(Error::InvalidParameter(format!("bound L must be finite and >= 0, got {bound}")));
        }
        Ok(Self {
            state_dim,
            noise_dim,
            fast,
            slow,
            fast_jacobian: None,
            bound,
            sigma: None,
            sigma_grad: None,
            drift: None,
            constant: false,
        })
    }

    /// Attach an analytic `dB_i/dx_j` (row-major `d x d`).
    pub fn with_jacobian(mut self, jacobian: NoiseMap) -> Self {
        self.fast_jacobian = Some(jacobian);
        self
    }

    /// `B(x, xi) = sigma(x) xi`, `b(x, xi) = drift(x)`.
    ///
    /// `sigma_grad` writes `d sigma_ij / d x_k` at index `(i * d + j) * d + k`.
    pub fn sigma_xi(d: usize, sigma: StateMap, sigma_grad: Option<StateMap>, drift: StateMap, bound: f64) -> Result<Self> {
        let s = sigma.clone();
        let fast: NoiseMap = Arc::new(move |x, xi, out| {
            let mut m = [0.0; 36];
            let mut heap;
            let buf: &mut [f64] = if d * d <= 36 {
                &mut m[..d * d]
            } else {
                heap = vec![0.0; d * d];
                &mut heap
            };
            s(x, buf);
            for i in 0..d {
                out[i] = (0..d).map(|j| buf[i * d + j] * xi[j]).sum();
            }
        });
        let dm = drift.clone();
        let slow: NoiseMap = Arc::new(move |x, _xi, out| dm(x, out));
        let mut field = Self::new(d, d, fast, slow, bound)?;
        field.sigma_grad = sigma_grad.clone();
        field.drift = Some(drift);
        if let Some(g) = sigma_grad {
            let jac: NoiseMap = Arc::new(move |x, xi, out| {
                let mut stack = [0.0; 64];
                let mut heap;
                let t: &mut [f64] = if d * d * d <= 64 {
                    &mut stack[..d * d * d]
                } else {
                    heap = vec![0.0; d * d * d];
                    &mut heap
                };
                g(x, t);
                for i in 0..d {
                    for k in 0..d {
                        out[i * d + k] = (0..d).map(|j| t[(i * d + j) * d + k] * xi[j]).sum();
                    }
                }
            });
            field.fast_jacobian = Some(jac);
        }
        field.sigma = Some(sigma);
        Ok(field)
    }

    /// Marks the coefficients as independent of `x`.
    pub fn mark_constant(mut self) -> Self {
        self.constant = true;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.fast_jacobian.is_some()
    }

    /// The stored `sigma` map when the field has the `sigma(x) xi` form.
    pub fn sigma_map(&self) -> Option<&StateMap> {
        self.sigma.as_ref()
    }

    /// `sigma`, `d sigma_ij / dx_k` (index `(i d + j) d + k`) and the drift, when the field
    /// has the `sigma(x) xi` form with an analytic gradient.
    pub fn sigma_parts(&self) -> Option<(&StateMap, &StateMap, &StateMap)> {
        Some((self.sigma.as_ref()?, self.sigma_grad.as_ref()?, self.drift.as_ref()?))
    }

    #[inline]
    pub fn fast_into(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        (self.fast)(x, xi, out)
    }

    #[inline]
    pub fn slow_into(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        (self.slow)(x, xi, out)
    }

    pub fn fast(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        self.fast_into(x, xi, &mut out);
        out
    }

    pub fn slow(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        self.slow_into(x, xi, &mut out);
        out
    }

    /// `dB_i/dx_j` at `(x, xi)`, row-major; analytic when supplied.
    pub fn jacobian_into(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        match &self.fast_jacobian {
            Some(j) => j(x, xi, out),
            None => self.fd_jacobian_into(x, xi, out),
        }
    }

    pub fn jacobian(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim * self.state_dim];
        self.jacobian_into(x, xi, &mut out);
        out
    }

    /// Central differences with step `1e-5 (1 + |x|)`.
    pub fn fd_jacobian_into(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        let d = self.state_dim;
        let h = FD_STEP * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt());
        let mut xp = x.to_vec();
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        for j in 0..d {
            xp[j] = x[j] + h;
            self.fast_into(&xp, xi, &mut plus);
            xp[j] = x[j] - h;
            self.fast_into(&xp, xi, &mut minus);
            xp[j] = x[j];
            for i in 0..d {
                out[i * d + j] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
    }

    /// Checks the field's sup bounds, the mean-zero condition and the Jacobian at `probes`,
    /// over every atom of a finite-support noise.
    pub fn audit(&self, noise: &NoiseModel, probes: &[Vec<f64>]) -> Result<FieldAudit> {
        let d = self.state_dim;
        let mut audit = FieldAudit::default();
        let mut fast = vec![0.0; d];
        let mut slow = vec![0.0; d];
        let mut jac = vec![0.0; d * d];
        let mut fd = vec![0.0; d * d];
        for x in probes {
            check_dim(x, d, "probe point")?;
            let mut mean = vec![0.0; d];
            for (atom, &p) in noise.atoms().iter().zip(noise.probabilities()) {
                self.fast_into(x, atom, &mut fast);
                self.slow_into(x, atom, &mut slow);
                self.jacobian_into(x, atom, &mut jac);
                ensure_finite(&fast, || format!("B at x = {x:?}"))?;
                ensure_finite(&slow, || format!("b at x = {x:?}"))?;
                ensure_finite(&jac, || format!("grad B at x = {x:?}"))?;
                audit.max_fast = audit.max_fast.max(norm(&fast));
                audit.max_slow = audit.max_slow.max(norm(&slow));
                audit.max_jacobian = audit.max_jacobian.max(norm(&jac));
                for i in 0..d {
                    mean[i] += p * fast[i];
                }
                if self.fast_jacobian.is_some() {
                    self.fd_jacobian_into(x, atom, &mut fd);
                    for (a, b) in jac.iter().zip(&fd) {
                        let rel = (a - b).abs() / (1.0 + a.abs().max(b.abs()));
                        audit.jacobian_mismatch = audit.jacobian_mismatch.max(rel);
                    }
                }
            }
            audit.mean_zero_residual = audit.mean_zero_residual.max(norm(&mean));
        }
        audit.within_bound = audit.max_fast <= self.bound * (1.0 + 1e-12)
            && audit.max_slow <= self.bound * (1.0 + 1e-12)
            && audit.max_jacobian <= self.bound * (1.0 + 1e-12);
        Ok(audit)
    }
}

/// Result of [`FieldSpec::audit`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FieldAudit {
    pub max_fast: f64,
    pub max_slow: f64,
    pub max_jacobian: f64,
    pub within_bound: bool,
    /// `max_x |E B(x, xi(0))|` over the probes.
    pub mean_zero_residual: f64,
    /// Largest relative gap between the analytic Jacobian and central differences.
    pub jacobian_mismatch: f64,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn check_dim(x: &[f64], d: usize, what: &str) -> Result<()> {
    if x.len() != d {
        return Err(Error::InvalidDimension(format!("{what} has length {}, expected {d}", x.len())));
    }
    Ok(())
}

/// Scalar function of the state used by config-declared fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expr {
    Const(f64),
    /// `base + amp * sin(freq * x[coord] + phase)`
    Sin {
        base: f64,
        amp: f64,
        #[serde(default = "one")]
        freq: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        coord: usize,
    },
}

fn one() -> f64 {
    1.0
}

impl Expr {
    pub fn value(&self, x: &[f64]) -> f64 {
        match *self {
            Expr::Const(c) => c,
            Expr::Sin { base, amp, freq, phase, coord } => base + amp * (freq * x[coord] + phase).sin(),
        }
    }

    pub fn partial(&self, x: &[f64], k: usize) -> f64 {
        match *self {
            Expr::Const(_) => 0.0,
            Expr::Sin { amp, freq, phase, coord, .. } => {
                if k == coord {
                    amp * freq * (freq * x[coord] + phase).cos()
                } else {
                    0.0
                }
            }
        }
    }

    fn sup(&self) -> f64 {
        match *self {
            Expr::Const(c) => c.abs(),
            Expr::Sin { base, amp, .. } => base.abs() + amp.abs(),
        }
    }

    /// Sup of the first and second derivatives.
    fn derivative_sups(&self) -> (f64, f64) {
        match *self {
            Expr::Const(_) => (0.0, 0.0),
            Expr::Sin { amp, freq, .. } => ((amp * freq).abs(), (amp * freq * freq).abs()),
        }
    }

    fn is_constant(&self) -> bool {
        matches!(self, Expr::Const(_))
    }

    fn coord(&self) -> Option<usize> {
        match *self {
            Expr::Const(_) => None,
            Expr::Sin { coord, .. } => Some(coord),
        }
    }
}

/// Declarative field, as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldConfig {
    /// `B = sigma(x) xi`, `b = drift(x)`.
    SigmaXi { sigma: Vec<Vec<Expr>>, drift: Vec<Expr> },
    /// Log-price of an asset: `B = sigma xi`, `b = rate - sigma^2 / 2` (d = 1).
    LogPrice { sigma: f64, rate: f64 },
}

impl FieldConfig {
    pub fn dim(&self) -> usize {
        match self {
            FieldConfig::SigmaXi { drift, .. } => drift.len(),
            FieldConfig::LogPrice { .. } => 1,
        }
    }

    /// Materializes the field; `L` is computed from the expression sups and the largest atom.
    pub fn build(&self, noise: &NoiseModel) -> Result<FieldSpec> {
        let (sigma, drift) = match self {
            FieldConfig::SigmaXi { sigma, drift } => (sigma.clone(), drift.clone()),
            FieldConfig::LogPrice { sigma, rate } => (
                vec![vec![Expr::Const(*sigma)]],
                vec![Expr::Const(rate - 0.5 * sigma * sigma)],
            ),
        };
        let d = drift.len();
        if d == 0 || sigma.len() != d || sigma.iter().any(|row| row.len() != d) {
            return Err(Error::Config(format!("sigma must be {d} x {d} and drift of length {d}")));
        }
        if noise.dim() != d {
            return Err(Error::Config(format!(
                "noise dimension {} does not match field dimension {d}",
                noise.dim()
            )));
        }
        if sigma.iter().flatten().chain(&drift).any(|e| e.coord().is_some_and(|c| c >= d)) {
            return Err(Error::Config("expression coordinate out of range".into()));
        }
        let xi_max = noise.atoms().iter().map(|a| norm(a)).fold(0.0, f64::max);
        let fro = |vals: Vec<f64>| vals.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sig_sup = fro(sigma.iter().flatten().map(Expr::sup).collect());
        let sig_d1 = fro(sigma.iter().flatten().map(|e| e.derivative_sups().0).collect());
        let sig_d2 = fro(sigma.iter().flatten().map(|e| e.derivative_sups().1).collect());
        let drift_sup = fro(drift.iter().map(Expr::sup).collect());
        let drift_d1 = fro(drift.iter().map(|e| e.derivative_sups().0).collect());
        let bound = [sig_sup * xi_max, sig_d1 * xi_max, sig_d2 * xi_max, drift_sup, drift_d1]
            .into_iter()
            .fold(0.0, f64::max);
        let constant = sigma.iter().flatten().chain(&drift).all(Expr::is_constant);

        let s = sigma.clone();
        let sigma_map: StateMap = Arc::new(move |x, out| {
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = s[i][j].value(x);
                }
            }
        });
        let s = sigma;
        let sigma_grad: StateMap = Arc::new(move |x, out| {
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        out[(i * d + j) * d + k] = s[i][j].partial(x, k);
                    }
                }
            }
        });
        let drift_map: StateMap = Arc::new(move |x, out| {
            for (o, e) in out.iter_mut().zip(&drift) {
                *o = e.value(x);
            }
        });
        let field = FieldSpec::sigma_xi(d, sigma_map, Some(sigma_grad), drift_map, bound)?;
        Ok(if constant { field.mark_constant() } else { field })
    }
}
