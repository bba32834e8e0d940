//! Exact valuation on the full tree of noise outcomes.

use serde::{Deserialize, Serialize};

use super::{check_instance, outside, resolve, Engine, PathRef, PayoffPair, StopRecord, ValuationResult};
use crate::error::{Error, Result};
use crate::field::FieldSpec;
use crate::noise::NoiseModel;
use crate::scheme::{step_count, step_into, StepBuffers};

pub const DEFAULT_NODE_BUDGET: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeOptions {
    pub node_budget: u64,
    pub record_regions: bool,
}

impl Default for TreeOptions {
    fn default() -> Self {
        Self { node_budget: DEFAULT_NODE_BUDGET, record_regions: false }
    }
}

/// `1 + k + ... + k^depth`, saturating.
pub fn tree_size(atoms: usize, depth: usize) -> u128 {
    let k = atoms as u128;
    let mut level: u128 = 1;
    let mut total: u128 = 1;
    for _ in 0..depth {
        level = level.saturating_mul(k);
        total = total.saturating_add(level);
    }
    total
}

struct Walker<'a> {
    payoffs: &'a PayoffPair,
    field: &'a FieldSpec,
    noise: &'a NoiseModel,
    eps: f64,
    depth: usize,
    dim: usize,
    path: Vec<f64>,
    buf: StepBuffers,
    regions: Option<Vec<StopRecord>>,
    nodes: u64,
    violations: u64,
}

impl Walker<'_> {
    fn value(&mut self, n: usize) -> Result<f64> {
        self.nodes += 1;
        let d = self.dim;
        let t = n as f64 * self.eps * self.eps;
        if n == self.depth {
            let v = self.payoffs.lower.eval(t, PathRef::new(d, &self.path[..(n + 1) * d]));
            if !v.is_finite() {
                return Err(Error::NonFinite { location: format!("terminal payoff at step {n}") });
            }
            return Ok(v);
        }
        let mut cont = 0.0;
        for a in 0..self.noise.atoms().len() {
            {
                let (head, tail) = self.path.split_at_mut((n + 1) * d);
                let child = &mut tail[..d];
                child.copy_from_slice(&head[n * d..]);
                step_into(self.field, child, self.noise.atom(a), self.eps, &mut self.buf)?;
            }
            cont += self.noise.probabilities()[a] * self.value(n + 1)?;
        }
        let view = PathRef::new(d, &self.path[..(n + 1) * d]);
        let f = self.payoffs.lower.eval(t, view);
        let g = self.payoffs.upper.as_ref().map(|g| g.eval(t, view));
        let (v, region) = resolve(n, f, g, cont)?;
        if outside(v, f, g) {
            self.violations += 1;
        }
        if let Some(r) = self.regions.as_mut() {
            r.push(StopRecord { step: n, state: view.current().to_vec(), region });
        }
        Ok(v)
    }
}

/// Backward recursion over every noise path of length `floor(T / eps^2)`; path-dependent
/// payoffs see the full path at each node.
pub fn value_exact_tree(
    payoffs: &PayoffPair,
    field: &FieldSpec,
    noise: &NoiseModel,
    x0: &[f64],
    eps: f64,
    horizon: f64,
    options: &TreeOptions,
) -> Result<ValuationResult> {
    check_instance(field, noise, x0, "tree")?;
    let depth = step_count(eps, horizon)?;
    let nodes = tree_size(noise.atoms().len(), depth);
    if nodes > options.node_budget as u128 {
        return Err(Error::TreeTooDeep { nodes, budget: options.node_budget as u128 });
    }
    let d = x0.len();
    let mut path = vec![0.0; (depth + 1) * d];
    path[..d].copy_from_slice(x0);
    let mut walker = Walker {
        payoffs,
        field,
        noise,
        eps,
        depth,
        dim: d,
        path,
        buf: StepBuffers::new(d),
        regions: options.record_regions.then(Vec::new),
        nodes: 0,
        violations: 0,
    };
    let value = walker.value(0)?;
    let mut stop_regions = walker.regions.take();
    if let Some(r) = stop_regions.as_mut() {
        r.sort_by_key(|s| s.step);
    }
    Ok(ValuationResult {
        value,
        engine: Engine::Tree,
        eps,
        steps: depth,
        node_count: walker.nodes,
        sandwich_violations: walker.violations,
        interpolation_bound: None,
        stop_regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynkin::{PayoffFn, Region};
    use crate::field::{Expr, FieldConfig};

    fn walk(sigma: f64, drift: f64) -> (FieldSpec, NoiseModel) {
        let noise = NoiseModel::rademacher_iid(1).unwrap();
        let field = FieldConfig::SigmaXi { sigma: vec![vec![Expr::Const(sigma)]], drift: vec![Expr::Const(drift)] }
            .build(&noise)
            .unwrap();
        (field, noise)
    }

    #[test]
    fn constant_game_has_constant_value() {
        let (f, n) = walk(1.0, 0.3);
        let r = value_exact_tree(&PayoffPair::constant(2.5), &f, &n, &[0.0], 0.5, 1.0, &TreeOptions::default()).unwrap();
        assert_eq!(r.value, 2.5);
        assert_eq!(r.steps, 4);
        assert_eq!(r.node_count, 31);
    }

    #[test]
    fn one_step_hand_evaluation() {
        let (f, n) = walk(1.0, 0.0);
        let lower = PayoffFn::markov(|_, x| x[0]);
        let pair = PayoffPair::new(lower.clone(), lower.shifted(10.0), 1.0).unwrap();
        let opts = TreeOptions { record_regions: true, ..Default::default() };
        let r = value_exact_tree(&pair, &f, &n, &[0.0], 0.5, 0.25, &opts).unwrap();
        assert_eq!(r.steps, 1);
        assert_eq!(r.value, 0.0);
        assert_eq!(r.stop_regions.unwrap()[0].region, Region::Continue);
    }

    #[test]
    fn martingale_state_has_value_x0() {
        let (f, n) = walk(1.0, 0.0);
        let pair = PayoffPair::american(PayoffFn::markov(|_, x| x[0]), 1.0).unwrap();
        let r = value_exact_tree(&pair, &f, &n, &[0.7], 0.5, 2.0, &TreeOptions::default()).unwrap();
        assert!((r.value - 0.7).abs() < 1e-12);
    }

    #[test]
    fn budget_and_noise_checks() {
        let (f, n) = walk(1.0, 0.0);
        let small = TreeOptions { node_budget: 10, ..Default::default() };
        let err = value_exact_tree(&PayoffPair::constant(0.0), &f, &n, &[0.0], 0.1, 1.0, &small).unwrap_err();
        assert!(matches!(err, Error::TreeTooDeep { .. }));
        let markov = NoiseModel::two_state_markov(0.3).unwrap();
        let err = value_exact_tree(&PayoffPair::constant(0.0), &f, &markov, &[0.0], 0.5, 1.0, &TreeOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn ordering_violation_reported() {
        let (f, n) = walk(1.0, 0.0);
        let pair = PayoffPair::new(PayoffFn::constant(1.0), PayoffFn::constant(0.0), 0.0).unwrap();
        let err = value_exact_tree(&pair, &f, &n, &[0.0], 0.5, 1.0, &TreeOptions::default()).unwrap_err();
        assert!(matches!(err, Error::PayoffOrdering { .. }));
    }

    #[test]
    fn tree_size_counts_levels() {
        assert_eq!(tree_size(2, 3), 15);
        assert_eq!(tree_size(4, 0), 1);
        assert_eq!(tree_size(2, 200), u128::MAX);
    }
}
