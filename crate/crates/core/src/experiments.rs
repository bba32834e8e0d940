//! Convergence studies of game values, law comparisons against the limiting diffusion, and the
//! theoretical constants of the diffusion approximation.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, PayoffConfig, ReferenceConfig};
use crate::diffusion_ref::{
    euler_maruyama_terminal, ks_marginals, ks_to_cdf, normal_cdf, reference_dt, DiffusionCoefficients, DiffusionSpec,
};
use crate::dynkin::{self, crr::CrrModel};
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::scheme::{step_count, terminal_ensemble};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub steps: Option<usize>,
    pub value: Option<f64>,
    /// `|V(eps) - V_ref|`.
    pub diff_to_reference: Option<f64>,
    /// `|V(eps) - V(previous eps)|`.
    pub successive_diff: Option<f64>,
    pub node_count: Option<u64>,
    pub sandwich_violations: Option<u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceStudy {
    pub reference: String,
    pub reference_value: Option<f64>,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log |V(eps) - V_ref|` against `log eps`.
    pub fitted_rate: Option<f64>,
    /// Every difference is exactly zero; no rate is defined.
    pub exact: bool,
}

impl ConvergenceStudy {
    /// Successive differences strictly decrease along the schedule.
    pub fn successive_strictly_decreasing(&self) -> bool {
        let d: Vec<f64> = self.rows.iter().filter_map(|r| r.successive_diff).collect();
        d.len() + 1 == self.rows.len() && d.windows(2).all(|w| w[1] < w[0])
    }
}

/// Values the configured game along the schedule and fits the rate of approach to the reference.
pub fn convergence_study(config: &ExperimentConfig) -> Result<ConvergenceStudy> {
    let schedule = config.eps_schedule()?;
    if schedule.len() < 3 {
        return Err(Error::Config("a convergence study needs at least 3 step scales".into()));
    }
    let (noise, field) = config.build_model()?;
    let payoffs = config.payoff_pair()?;
    let engine = config.engine();

    let results: Vec<Result<dynkin::ValuationResult>> = schedule
        .par_iter()
        .map(|&eps| dynkin::value(&payoffs, &field, &noise, &config.x0, eps, config.horizon, &engine))
        .collect();

    let (reference, reference_value) = match &config.reference {
        ReferenceConfig::Finest => {
            let v = results.last().and_then(|r| r.as_ref().ok()).map(|r| r.value);
            ("finest".to_string(), v)
        }
        ReferenceConfig::Crr { steps } => (format!("crr:{steps}"), Some(crr_reference(config, *steps)?)),
    };

    let mut rows = Vec::with_capacity(schedule.len());
    let mut previous: Option<f64> = None;
    for (&eps, r) in schedule.iter().zip(&results) {
        let mut row = ConvergenceRow {
            eps,
            steps: step_count(eps, config.horizon).ok(),
            value: None,
            diff_to_reference: None,
            successive_diff: None,
            node_count: None,
            sandwich_violations: None,
            error: None,
        };
        match r {
            Ok(v) => {
                row.value = Some(v.value);
                row.node_count = Some(v.node_count);
                row.sandwich_violations = Some(v.sandwich_violations);
                row.diff_to_reference = reference_value.map(|rv| (v.value - rv).abs());
                row.successive_diff = previous.map(|p| (v.value - p).abs());
                previous = Some(v.value);
            }
            Err(e) => {
                row.error = Some(e.to_string());
                previous = None;
            }
        }
        rows.push(row);
    }

    // the self-reference row carries no information about the rate
    let fit_rows = match config.reference {
        ReferenceConfig::Finest => &rows[..rows.len() - 1],
        ReferenceConfig::Crr { .. } => &rows[..],
    };
    let diffs: Vec<(f64, f64)> = fit_rows.iter().filter_map(|r| r.diff_to_reference.map(|d| (r.eps, d))).collect();
    let exact = !diffs.is_empty() && diffs.iter().all(|&(_, d)| d == 0.0);
    let points: Vec<(f64, f64)> = diffs.iter().filter(|(_, d)| *d > 0.0).map(|&(e, d)| (e.ln(), d.ln())).collect();
    let fitted_rate = if exact { None } else { least_squares_slope(&points) };
    Ok(ConvergenceStudy { reference, reference_value, rows, fitted_rate, exact })
}

fn crr_reference(config: &ExperimentConfig, steps: usize) -> Result<f64> {
    let (sigma, model_rate) = match config.model.field {
        FieldConfig::LogPrice { sigma, rate } => (sigma, rate),
        _ => return Err(Error::Config("a lattice reference needs the log_price field".into())),
    };
    let (strike, rate) = match config.payoff {
        Some(PayoffConfig::AmericanPut { strike, rate }) => (strike, rate),
        _ => return Err(Error::Config("a lattice reference needs the american_put payoff".into())),
    };
    if (rate - model_rate).abs() > 0.0 {
        return Err(Error::Config("payoff and model rates differ".into()));
    }
    CrrModel { spot: config.x0[0].exp(), strike, rate, sigma, horizon: config.horizon, steps }.american_put()
}

/// Slope of the least-squares line through `points`; `None` with fewer than two distinct abscissae.
pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawRow {
    pub eps: f64,
    pub steps: usize,
    pub dt: f64,
    pub ks_per_coord: Vec<f64>,
    pub ks_norm: f64,
    /// Against the exact Gaussian law, when the coefficients are constant and `d = 1`.
    pub ks_exact: Option<f64>,
    pub error: Option<String>,
}

/// Matched ensembles of the scheme at `T` and Euler–Maruyama for the limiting equation.
pub fn law_comparison(config: &ExperimentConfig, seed: u64) -> Result<Vec<LawRow>> {
    let schedule = config.eps_schedule()?;
    let coefficients = Arc::new(config.limit_coefficients()?);
    if !coefficients.audit().passed() {
        return Err(Error::InvalidInput("coefficient audit failed at the configured probes".into()));
    }
    let constant = coefficients.field().is_constant();
    let spec = DiffusionSpec::new(coefficients.clone(), config.x0.clone(), config.horizon)?;
    let d = config.x0.len();
    let exact = if constant && d == 1 {
        let (mut drift, mut sigma) = (vec![0.0], vec![0.0]);
        coefficients.eval(&config.x0, &mut drift, &mut sigma)?;
        Some((config.x0[0] + drift[0] * config.horizon, sigma[0].abs() * config.horizon.sqrt()))
    } else {
        None
    };

    let row = |eps: f64| -> Result<LawRow> {
        let steps = step_count(eps, config.horizon)?;
        let dt = config.dt.unwrap_or(if constant { config.horizon } else { reference_dt(eps) });
        let scheme: Vec<Vec<f64>> = terminal_ensemble(
            &config.x0,
            eps,
            config.horizon,
            coefficients.field(),
            coefficients.noise(),
            seed,
            config.paths,
        )?;
        let reference = euler_maruyama_terminal(&spec, dt, seed, config.paths)?;
        let ks = ks_marginals(&scheme, &reference)?;
        let ks_exact = match exact {
            Some((mean, sd)) if sd > 0.0 => {
                let xs: Vec<f64> = scheme.iter().map(|x| x[0]).collect();
                Some(ks_to_cdf(&xs, |x| normal_cdf(x, mean, sd))?)
            }
            _ => None,
        };
        Ok(LawRow { eps, steps, dt, ks_per_coord: ks.per_coord, ks_norm: ks.norm, ks_exact, error: None })
    };
    Ok(schedule
        .iter()
        .map(|&eps| {
            row(eps).unwrap_or_else(|e| LawRow {
                eps,
                steps: step_count(eps, config.horizon).unwrap_or(0),
                dt: f64::NAN,
                ks_per_coord: Vec::new(),
                ks_norm: f64::NAN,
                ks_exact: None,
                error: Some(e.to_string()),
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoreticalBounds {
    pub d: usize,
    pub m: usize,
    pub delta: f64,
    pub log10_epsilon0: f64,
    pub note: &'static str,
}

pub const BOUNDS_NOTE: &str =
    "theoretical constants of the diffusion approximation; not used as runtime thresholds (eps0 is far below any usable step)";

/// `delta = 1 / (500 d)` and `log10 eps0` for `eps0 = (2 * 10^(640 d) * d^(80 d))^(-5/2)`.
pub fn theoretical_bounds(d: usize, m: usize) -> Result<TheoreticalBounds> {
    if d == 0 || m == 0 {
        return Err(Error::InvalidParameter(format!("dimension and moment order must be >= 1, got d = {d}, M = {m}")));
    }
    let df = d as f64;
    let log10_epsilon0 = -2.5 * (2f64.log10() + 640.0 * df + 80.0 * df * df.log10());
    Ok(TheoreticalBounds { d, m, delta: 1.0 / (500.0 * df), log10_epsilon0, note: BOUNDS_NOTE })
}
