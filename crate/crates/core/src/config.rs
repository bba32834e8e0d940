//! JSON experiment configuration.

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientOptions, EstimatorMode, LimitCoefficients};
use crate::dynkin::{american_put_payoff, game_put_payoff, EngineConfig, PayoffPair, TreeOptions};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldSpec};
use crate::noise::{NoiseModel, NoiseSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub noise: NoiseSpec,
    pub field: FieldConfig,
}

/// Either step scales or step counts on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Eps(Vec<f64>),
    Steps(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    /// Cancellable put on the log price `x_0`.
    GamePut { strike: f64, rate: f64, penalty: f64 },
    AmericanPut { strike: f64, rate: f64 },
    /// `F = G = value`.
    Constant { value: f64 },
}

impl PayoffConfig {
    pub fn build(&self) -> Result<PayoffPair> {
        match *self {
            PayoffConfig::GamePut { strike, rate, penalty } => game_put_payoff(strike, rate, penalty),
            PayoffConfig::AmericanPut { strike, rate } => american_put_payoff(strike, rate),
            PayoffConfig::Constant { value } => Ok(PayoffPair::constant(value)),
        }
    }
}

/// Reference value for convergence studies.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceConfig {
    /// The value at the smallest `eps` of the schedule.
    #[default]
    Finest,
    /// Binomial lattice price of the configured American put (log-price model only).
    Crr { steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    #[default]
    Analytic,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    #[serde(default)]
    pub mode: ModeName,
    /// Seed of the empirical estimator.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub n_max: Option<usize>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Audit points; defaults to `x0`.
    #[serde(default)]
    pub probes: Option<Vec<Vec<f64>>>,
}

fn default_samples() -> usize {
    10_000
}

fn default_paths() -> usize {
    10_000
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self { mode: ModeName::Analytic, seed: 0, n_max: None, n_samples: default_samples(), probes: None }
    }
}

impl CoefficientConfig {
    pub fn estimator(&self) -> EstimatorMode {
        match self.mode {
            ModeName::Analytic => EstimatorMode::Analytic,
            ModeName::Empirical => EstimatorMode::Empirical { seed: self.seed },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub x0: Vec<f64>,
    pub horizon: f64,
    /// Step scale for single-run commands; `steps` is the alternative.
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub schedule: Option<Schedule>,
    #[serde(default)]
    pub payoff: Option<PayoffConfig>,
    #[serde(default)]
    pub engine: Option<EngineConfig>,
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Euler–Maruyama step; defaults to `eps^2 min(1, eps)`, or `T` for constant coefficients.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub coefficients: CoefficientConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.x0.len() != self.model.field.dim() {
            return Err(Error::Config(format!(
                "x0 has {} coordinates, field has dimension {}",
                self.x0.len(),
                self.model.field.dim()
            )));
        }
        if self.eps.is_some() && self.steps.is_some() {
            return Err(Error::Config("give at most one of eps and steps".into()));
        }
        if self.paths == 0 {
            return Err(Error::Config("paths must be >= 1".into()));
        }
        if self.schedule.is_some() {
            self.eps_schedule()?;
        }
        Ok(())
    }

    fn eps_for_steps(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::Config("step counts must be >= 1".into()));
        }
        Ok((self.horizon / n as f64).sqrt())
    }

    /// The step scale of single-run commands.
    pub fn single_eps(&self) -> Result<f64> {
        match (self.eps, self.steps) {
            (Some(e), None) => Ok(e),
            (None, Some(n)) => self.eps_for_steps(n),
            _ => Err(Error::Config("this command needs eps or steps".into())),
        }
    }

    /// Step scales of the schedule, checked to be strictly decreasing.
    pub fn eps_schedule(&self) -> Result<Vec<f64>> {
        let eps = match &self.schedule {
            Some(Schedule::Eps(e)) => e.clone(),
            Some(Schedule::Steps(s)) => s.iter().map(|&n| self.eps_for_steps(n)).collect::<Result<_>>()?,
            None => return Err(Error::Config("this command needs a schedule".into())),
        };
        if eps.is_empty() || eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::Config("schedule must contain positive step scales".into()));
        }
        if eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("schedule must be strictly decreasing in eps".into()));
        }
        Ok(eps)
    }

    pub fn build_model(&self) -> Result<(NoiseModel, FieldSpec)> {
        let noise = self.model.noise.build()?;
        let field = self.model.field.build(&noise)?;
        Ok((noise, field))
    }

    pub fn payoff_pair(&self) -> Result<PayoffPair> {
        self.payoff.as_ref().ok_or_else(|| Error::Config("this command needs a payoff".into()))?.build()
    }

    pub fn engine(&self) -> EngineConfig {
        self.engine.clone().unwrap_or(EngineConfig::Tree(TreeOptions::default()))
    }

    pub fn probes(&self) -> Vec<Vec<f64>> {
        self.coefficients.probes.clone().unwrap_or_else(|| vec![self.x0.clone()])
    }

    pub fn limit_coefficients(&self) -> Result<LimitCoefficients> {
        let (noise, field) = self.build_model()?;
        let options = CoefficientOptions {
            mode: self.coefficients.estimator(),
            n_max: self.coefficients.n_max,
            n_samples: self.coefficients.n_samples,
        };
        LimitCoefficients::build(field, noise, &self.probes(), options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GAME: &str = r#"{
        "model": {"noise": {"kind": "rademacher", "d": 1}, "field": {"kind": "log_price", "sigma": 0.2, "rate": 0.02}},
        "x0": [0.0],
        "horizon": 1.0,
        "schedule": {"eps": [0.2, 0.1, 0.05]},
        "payoff": {"kind": "game_put", "strike": 1.1, "rate": 0.02, "penalty": 0.05},
        "engine": {"kind": "grid", "spacing": [0.2], "scale_with_eps": true}
    }"#;

    #[test]
    fn parses_game_config() {
        let c = ExperimentConfig::from_json(GAME).unwrap();
        assert_eq!(c.eps_schedule().unwrap(), vec![0.2, 0.1, 0.05]);
        assert_eq!(c.paths, 10_000);
        assert_eq!(c.reference, ReferenceConfig::Finest);
        assert!(matches!(c.engine(), EngineConfig::Grid(_)));
        assert!(c.payoff_pair().unwrap().upper.is_some());
        assert!(c.single_eps().is_err());
    }

    #[test]
    fn rejects_bad_schedules_and_fields() {
        let bad = GAME.replace("[0.2, 0.1, 0.05]", "[0.1, 0.2]");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config(_))));
        let bad = GAME.replace("\"horizon\"", "\"horizonn\"");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn step_schedule_converts_to_eps() {
        let c = ExperimentConfig::from_json(&GAME.replace(r#"{"eps": [0.2, 0.1, 0.05]}"#, r#"{"steps": [4, 16]}"#))
            .unwrap();
        assert_eq!(c.eps_schedule().unwrap(), vec![0.5, 0.25]);
    }

    #[test]
    fn empirical_coefficients_config() {
        let text = GAME.replace(
            r#""engine""#,
            r#""coefficients": {"mode": "empirical", "seed": 3, "n_samples": 500}, "engine""#,
        );
        let c = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(c.coefficients.estimator(), EstimatorMode::Empirical { seed: 3 });
        assert_eq!(c.coefficients.n_samples, 500);
    }
}
