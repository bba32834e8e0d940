//! Stationary mean-zero noise sequences with finite support and declared mixing profiles.

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Largest Rademacher dimension whose `2^d` atoms are enumerated.
pub const MAX_RADEMACHER_DIM: usize = 16;

/// Declarative form of a noise model, as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSpec {
    /// i.i.d. vectors with independent `±scale` components.
    Rademacher {
        d: usize,
        #[serde(default = "unit_scale")]
        scale: f64,
    },
    /// Symmetric two-state chain on `{+1, -1}` with flip probability `p`.
    Markov2 { p: f64 },
}

fn unit_scale() -> f64 {
    1.0
}

impl NoiseSpec {
    pub fn build(&self) -> Result<NoiseModel> {
        match *self {
            NoiseSpec::Rademacher { d, scale } => NoiseModel::rademacher_scaled(d, scale),
            NoiseSpec::Markov2 { p } => NoiseModel::two_state_markov(p),
        }
    }
}

/// Upper bound `u -> phi(u)` on the phi-mixing coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixingProfile {
    /// Independent sequence: `phi(0) = at_zero`, zero at every positive lag.
    Independent { at_zero: f64 },
    /// `phi(u) = min(rate^u, 1/2)` for `u >= 1`.
    Geometric { rate: f64, at_zero: f64 },
}

impl MixingProfile {
    pub fn phi(&self, u: usize) -> f64 {
        match *self {
            MixingProfile::Independent { at_zero } => {
                if u == 0 {
                    at_zero
                } else {
                    0.0
                }
            }
            MixingProfile::Geometric { rate, at_zero } => {
                if u == 0 {
                    at_zero
                } else {
                    rate.powi(u as i32).min(0.5)
                }
            }
        }
    }

    /// `sum_{r > n} phi(r)`.
    pub fn tail_sum(&self, n: usize) -> f64 {
        match *self {
            MixingProfile::Independent { .. } => 0.0,
            MixingProfile::Geometric { rate, .. } => {
                if rate <= 0.0 {
                    return 0.0;
                }
                // lags where the 1/2 cap is active contribute 1/2 each
                let mut first = n + 1;
                let mut capped = 0.0;
                while rate.powi(first as i32) > 0.5 {
                    capped += 0.5;
                    first += 1;
                }
                capped + rate.powi(first as i32) / (1.0 - rate)
            }
        }
    }

    /// `D = sup_{u >= 0} phi(u) (u^{2M} + u^4)`.
    pub fn moment_constant(&self, m: u32) -> f64 {
        let term = |u: usize| {
            let phi = self.phi(u);
            if phi == 0.0 {
                return 0.0;
            }
            let uf = u as f64;
            phi * (uf.powi(2 * m as i32) + uf.powi(4))
        };
        match *self {
            MixingProfile::Independent { .. } => term(0),
            MixingProfile::Geometric { rate, .. } => {
                if rate <= 0.0 {
                    return term(0);
                }
                // u^{2M} rate^u peaks near 2M / ln(1/rate); scan well past it
                let peak = (2 * m.max(2)) as f64 / (-rate.ln());
                let horizon = (4.0 * peak).ceil() as usize + 64;
                (0..=horizon).map(term).fold(0.0, f64::max)
            }
        }
    }
}

/// A stationary, mean-zero, finite-support noise sequence.
///
/// The atoms, their stationary probabilities and (for dependent noise) the transition
/// matrix are stored explicitly, so joint laws of `(xi(0), xi(r))` are exact.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    spec: NoiseSpec,
    dim: usize,
    atoms: Vec<Vec<f64>>,
    probs: Vec<f64>,
    transition: Option<DMatrix<f64>>,
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    profile: MixingProfile,
}

impl NoiseModel {
    /// i.i.d. noise with independent `±1` components.
    pub fn rademacher_iid(d: usize) -> Result<Self> {
        Self::rademacher_scaled(d, 1.0)
    }

    /// i.i.d. noise with independent `±scale` components (covariance `scale^2 I`).
    pub fn rademacher_scaled(d: usize, scale: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidDimension("noise dimension must be >= 1".into()));
        }
        if d > MAX_RADEMACHER_DIM {
            return Err(Error::InvalidDimension(format!(
                "rademacher support enumerates 2^d atoms; d = {d} exceeds {MAX_RADEMACHER_DIM}"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
        }
        let k = 1usize << d;
        let atoms = (0..k)
            .map(|i| {
                (0..d)
                    .map(|j| if (i >> j) & 1 == 0 { scale } else { -scale })
                    .collect()
            })
            .collect();
        Ok(Self {
            spec: NoiseSpec::Rademacher { d, scale },
            dim: d,
            atoms,
            probs: vec![1.0 / k as f64; k],
            transition: None,
            mean: vec![0.0; d],
            covariance: DMatrix::identity(d, d) * (scale * scale),
            profile: MixingProfile::Independent {
                at_zero: 1.0 - 1.0 / k as f64,
            },
        })
    }

    /// Symmetric two-state Markov chain on `{+1, -1}`, started from its uniform stationary law.
    pub fn two_state_markov(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "flip probability must lie in (0, 1), got {p}"
            )));
        }
        let transition = DMatrix::from_row_slice(2, 2, &[1.0 - p, p, p, 1.0 - p]);
        Ok(Self {
            spec: NoiseSpec::Markov2 { p },
            dim: 1,
            atoms: vec![vec![1.0], vec![-1.0]],
            probs: vec![0.5, 0.5],
            transition: Some(transition),
            mean: vec![0.0],
            covariance: DMatrix::identity(1, 1),
            profile: MixingProfile::Geometric {
                rate: (1.0 - 2.0 * p).abs(),
                at_zero: 0.5,
            },
        })
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn atom(&self, index: usize) -> &[f64] {
        &self.atoms[index]
    }

    /// Stationary atom probabilities.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_iid(&self) -> bool {
        self.transition.is_none()
    }

    pub fn transition(&self) -> Option<&DMatrix<f64>> {
        self.transition.as_ref()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn mixing_profile(&self) -> MixingProfile {
        self.profile
    }

    /// Declared upper bound on `phi(u)`.
    pub fn phi_bound(&self, u: usize) -> f64 {
        self.profile.phi(u)
    }

    /// `P(xi(0) = atom a, xi(r) = atom b)` as a `k x k` matrix.
    pub fn joint_weights(&self, lag: usize) -> DMatrix<f64> {
        let k = self.atoms.len();
        let pi = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.probs));
        if lag == 0 {
            return pi;
        }
        match &self.transition {
            None => {
                let p = nalgebra::DVector::from_column_slice(&self.probs);
                &p * p.transpose()
            }
            Some(t) => {
                let mut power = DMatrix::identity(k, k);
                for _ in 0..lag {
                    power = &power * t;
                }
                pi * power
            }
        }
    }

    /// `sum_{r=1..=n} P(xi(0) = a, xi(r) = b)`.
    pub fn lag_weight_sum(&self, n: usize) -> DMatrix<f64> {
        let k = self.atoms.len();
        match &self.transition {
            None => {
                let p = nalgebra::DVector::from_column_slice(&self.probs);
                (&p * p.transpose()) * n as f64
            }
            Some(t) => {
                let pi = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.probs));
                let mut power = DMatrix::identity(k, k);
                let mut acc = DMatrix::zeros(k, k);
                for _ in 0..n {
                    power = &power * t;
                    acc += &power;
                }
                pi * acc
            }
        }
    }

    /// Exact `E xi(r) xi(0)^T`.
    pub fn autocovariance(&self, lag: usize) -> DMatrix<f64> {
        let w = self.joint_weights(lag);
        let d = self.dim;
        let mut out = DMatrix::zeros(d, d);
        for (a, xa) in self.atoms.iter().enumerate() {
            for (b, xb) in self.atoms.iter().enumerate() {
                let weight = w[(a, b)];
                if weight == 0.0 {
                    continue;
                }
                for i in 0..d {
                    for j in 0..d {
                        out[(i, j)] += weight * xb[i] * xa[j];
                    }
                }
            }
        }
        out
    }

    /// Per-stream sampler; `stream` selects an independent counter-based substream of `seed`.
    pub fn sampler(&self, seed: u64, stream: u64) -> NoiseSampler<'_> {
        NoiseSampler {
            model: self,
            rng: stream_rng(seed, stream),
            current: None,
        }
    }
}

/// Stateful draw of `xi(0), xi(1), ...` for one path.
pub struct NoiseSampler<'a> {
    model: &'a NoiseModel,
    rng: ChaCha8Rng,
    current: Option<usize>,
}

impl NoiseSampler<'_> {
    /// Index of the next atom in the sequence.
    pub fn next_index(&mut self) -> usize {
        let next = match (&self.model.spec, self.current) {
            (NoiseSpec::Rademacher { d, .. }, _) => (self.rng.next_u32() as usize) & ((1 << d) - 1),
            (NoiseSpec::Markov2 { .. }, None) => (self.rng.random::<f64>() < 0.5) as usize,
            (NoiseSpec::Markov2 { p }, Some(s)) => {
                if self.rng.random::<f64>() < *p {
                    1 - s
                } else {
                    s
                }
            }
        };
        self.current = Some(next);
        next
    }

    pub fn next_atom(&mut self) -> &[f64] {
        let i = self.next_index();
        &self.model.atoms[i]
    }

    pub fn model(&self) -> &NoiseModel {
        self.model
    }
}
