//! Dynkin stopping games valued on the discrete slow motion by backward recursion
//! `V_n = min(G_n, max(F_n, E[V_{n+1} | F_n]))`, `V_N = F_N`.
//!
//! Player 1 (the minimizer) pays `G` when it stops first; player 2 (the maximizer) receives
//! `F` when it stops no later than player 1; at the final grid time the game ends with `F`.

pub mod crr;
pub mod grid;
pub mod oracle;
pub mod payoff;
pub mod tree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_dim, FieldSpec};
use crate::noise::NoiseModel;

pub use grid::{value_markov_grid, GridOptions};
pub use oracle::value_bruteforce_oracle;
pub use payoff::{
    american_put_payoff, exp_transform, exp_transform_path, game_put_payoff, PathRef, PayoffFn, PayoffPair,
};
pub use tree::{value_exact_tree, TreeOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Tree,
    Grid,
}

/// Classification of a node by the optimal action there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Continue,
    Player1Stop,
    Player2Stop,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Continue => "continue",
            Region::Player1Stop => "player1-stop",
            Region::Player2Stop => "player2-stop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopRecord {
    pub step: usize,
    pub state: Vec<f64>,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValuationResult {
    pub value: f64,
    pub engine: Engine,
    pub eps: f64,
    pub steps: usize,
    pub node_count: u64,
    /// Nodes where the computed value left `[F, G]`; zero unless arithmetic misbehaves.
    pub sandwich_violations: u64,
    /// Accumulated interpolation error bound `K h N` of the grid engine.
    pub interpolation_bound: Option<f64>,
    #[serde(skip)]
    pub stop_regions: Option<Vec<StopRecord>>,
}

/// Engine selection for [`value`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EngineConfig {
    Tree(TreeOptions),
    Grid(GridOptions),
}

/// Values the game with the chosen engine.
pub fn value(
    payoffs: &PayoffPair,
    field: &FieldSpec,
    noise: &NoiseModel,
    x0: &[f64],
    eps: f64,
    horizon: f64,
    engine: &EngineConfig,
) -> Result<ValuationResult> {
    match engine {
        EngineConfig::Tree(o) => value_exact_tree(payoffs, field, noise, x0, eps, horizon, o),
        EngineConfig::Grid(o) => value_markov_grid(payoffs, field, noise, x0, eps, horizon, o),
    }
}

/// One-player optimal stopping of `F`: the game with the minimizer's option removed.
#[allow(clippy::too_many_arguments)]
pub fn american_value(
    lower: PayoffFn,
    lipschitz: f64,
    field: &FieldSpec,
    noise: &NoiseModel,
    x0: &[f64],
    eps: f64,
    horizon: f64,
    engine: &EngineConfig,
) -> Result<ValuationResult> {
    value(&PayoffPair::american(lower, lipschitz)?, field, noise, x0, eps, horizon, engine)
}

/// One recursion step at a node: returns the node value and region, checking `F <= G`.
#[inline]
pub(crate) fn resolve(step: usize, f: f64, g: Option<f64>, cont: f64) -> Result<(f64, Region)> {
    if !(f.is_finite() && cont.is_finite() && g.is_none_or(f64::is_finite)) {
        return Err(Error::NonFinite { location: format!("valuation at step {step}") });
    }
    let m = f.max(cont);
    match g {
        Some(g) if g < f => Err(Error::PayoffOrdering { step, lower: f, upper: g }),
        Some(g) if g < m => Ok((g, Region::Player1Stop)),
        _ if f > cont => Ok((f, Region::Player2Stop)),
        _ => Ok((cont, Region::Continue)),
    }
}

/// True when `v` lies outside `[f, g]`.
#[inline]
pub(crate) fn outside(v: f64, f: f64, g: Option<f64>) -> bool {
    v < f || g.is_some_and(|g| v > g)
}

pub(crate) fn check_instance(field: &FieldSpec, noise: &NoiseModel, x0: &[f64], engine: &str) -> Result<()> {
    check_dim(x0, field.state_dim(), "x0")?;
    if field.noise_dim() != noise.dim() {
        return Err(Error::InvalidDimension(format!(
            "field expects noise of dimension {}, noise has {}",
            field.noise_dim(),
            noise.dim()
        )));
    }
    if !noise.is_iid() {
        return Err(Error::Unsupported(format!(
            "{engine} engine needs i.i.d. noise; conditional expectations under dependent noise are not product-form"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_branches() {
        assert_eq!(resolve(0, 0.0, Some(1.0), 0.5).unwrap(), (0.5, Region::Continue));
        assert_eq!(resolve(0, 0.0, Some(1.0), 2.0).unwrap(), (1.0, Region::Player1Stop));
        assert_eq!(resolve(0, 0.7, Some(1.0), 0.5).unwrap(), (0.7, Region::Player2Stop));
        assert_eq!(resolve(0, 0.7, None, 5.0).unwrap(), (5.0, Region::Continue));
        // F = G collapses both branches to the common value
        assert_eq!(resolve(0, 0.3, Some(0.3), 9.0).unwrap().0, 0.3);
        assert_eq!(resolve(0, 0.3, Some(0.3), -9.0).unwrap().0, 0.3);
        assert!(matches!(resolve(4, 1.0, Some(0.5), 0.0), Err(Error::PayoffOrdering { step: 4, .. })));
        assert!(resolve(0, f64::NAN, None, 0.0).is_err());
    }

    #[test]
    fn engine_config_json() {
        let e: EngineConfig = serde_json::from_str(r#"{"kind":"tree"}"#).unwrap();
        assert!(matches!(e, EngineConfig::Tree(_)));
        let e: EngineConfig = serde_json::from_str(r#"{"kind":"grid","spacing":[0.01]}"#).unwrap();
        assert!(matches!(e, EngineConfig::Grid(_)));
    }
}
