//! Backward recursion on a tensor grid of states with multilinear interpolation, for payoffs
//! that depend only on `(t, current state)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_instance, outside, resolve, Engine, PayoffPair, Region, StopRecord, ValuationResult};
use crate::error::{Error, Result};
use crate::field::FieldSpec;
use crate::noise::NoiseModel;
use crate::scheme::{step_count, step_into, StepBuffers};

pub const MAX_GRID_DIM: usize = 4;
pub const DEFAULT_NODE_LIMIT: usize = 20_000_000;

/// Relative distance to a grid node below which a point is treated as lying on it.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Node spacing per coordinate.
    pub spacing: Vec<f64>,
    /// When set, `spacing` is in units of `eps`.
    #[serde(default)]
    pub scale_with_eps: bool,
    /// Explicit bounds; when absent the grid is anchored at `x0` and sized so that no state
    /// reachable from `x0` can leave it.
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
    #[serde(default)]
    pub record_regions: bool,
    #[serde(default = "default_node_limit")]
    pub node_limit: usize,
}

fn default_node_limit() -> usize {
    DEFAULT_NODE_LIMIT
}

impl GridOptions {
    pub fn with_spacing(spacing: Vec<f64>) -> Self {
        Self { spacing, scale_with_eps: false, lower: None, upper: None, record_regions: false, node_limit: DEFAULT_NODE_LIMIT }
    }
}

struct Lattice {
    origin: Vec<f64>,
    h: Vec<f64>,
    size: Vec<usize>,
    strides: Vec<usize>,
}

impl Lattice {
    fn new(options: &GridOptions, x0: &[f64], eps: f64, steps: usize, max_move: f64) -> Result<Self> {
        let d = x0.len();
        if options.spacing.len() != d {
            return Err(Error::InvalidDimension(format!("grid spacing has {} entries, state has {d}", options.spacing.len())));
        }
        let h: Vec<f64> = options.spacing.iter().map(|s| if options.scale_with_eps { s * eps } else { *s }).collect();
        if h.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParameter(format!("grid spacing must be positive, got {h:?}")));
        }
        let (origin, size) = match (&options.lower, &options.upper) {
            (Some(lo), Some(hi)) => {
                if lo.len() != d || hi.len() != d {
                    return Err(Error::InvalidDimension("grid bounds must match the state dimension".into()));
                }
                let mut size = Vec::with_capacity(d);
                for i in 0..d {
                    if !(hi[i] > lo[i]) {
                        return Err(Error::InvalidParameter(format!("grid bounds empty on axis {i}")));
                    }
                    size.push(((hi[i] - lo[i]) / h[i] + SNAP).floor() as usize + 1);
                }
                (lo.clone(), size)
            }
            (None, None) => {
                let mut origin = Vec::with_capacity(d);
                let mut size = Vec::with_capacity(d);
                for i in 0..d {
                    let half = steps * widening(max_move, h[i]) + 2;
                    origin.push(x0[i] - half as f64 * h[i]);
                    size.push(2 * half + 1);
                }
                (origin, size)
            }
            _ => return Err(Error::InvalidParameter("grid needs both lower and upper bounds, or neither".into())),
        };
        let total = size.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s));
        match total {
            Some(t) if t <= options.node_limit => {}
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "grid of {size:?} nodes exceeds the limit of {}",
                    options.node_limit
                )))
            }
        }
        let mut strides = vec![1; d];
        for i in (0..d.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * size[i + 1];
        }
        Ok(Self { origin, h, size, strides })
    }

    fn total(&self) -> usize {
        self.size.iter().product()
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + i as f64 * self.h[axis]
    }

    /// Lower cell index and weight of the upper neighbour; `None` outside the grid.
    #[inline]
    fn locate(&self, axis: usize, x: f64) -> Option<(usize, f64)> {
        let n = self.size[axis];
        let u = (x - self.origin[axis]) / self.h[axis];
        if !(u >= -SNAP && u <= (n - 1) as f64 + SNAP) {
            return None;
        }
        if n == 1 {
            return Some((0, 0.0));
        }
        let i = (u.floor().max(0.0) as usize).min(n - 2);
        let mut w = (u - i as f64).clamp(0.0, 1.0);
        if w < SNAP {
            w = 0.0;
        } else if w > 1.0 - SNAP {
            w = 1.0;
        }
        Some((i, w))
    }

    /// Multilinear interpolation of `values` at `x`.
    #[inline]
    fn interpolate(&self, values: &[f64], x: &[f64]) -> Option<f64> {
        let d = x.len();
        let mut base = [0usize; MAX_GRID_DIM];
        let mut w = [0.0; MAX_GRID_DIM];
        for axis in 0..d {
            let (i, wi) = self.locate(axis, x[axis])?;
            base[axis] = i;
            w[axis] = wi;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut idx = 0;
            for axis in 0..d {
                let up = corner >> axis & 1 == 1;
                let wa = if up { w[axis] } else { 1.0 - w[axis] };
                if wa == 0.0 {
                    weight = 0.0;
                    break;
                }
                weight *= wa;
                idx += (base[axis] + up as usize) * self.strides[axis];
            }
            if weight != 0.0 {
                acc += weight * values[idx];
            }
        }
        Some(acc)
    }
}

/// Nodes added on each side of the active box per step: the corners of every child cell of
/// the current box stay inside the next one.
fn widening(max_move: f64, h: f64) -> usize {
    (max_move / h).ceil() as usize + 1
}

/// Index box `[lo, hi]` per axis.
#[derive(Clone)]
struct IndexBox {
    lo: Vec<usize>,
    hi: Vec<usize>,
}

impl IndexBox {
    fn count(&self) -> usize {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l + 1).product()
    }

    /// Multi-index of the `j`-th node in row-major order.
    #[inline]
    fn node(&self, mut j: usize, out: &mut [usize]) {
        for axis in (0..self.lo.len()).rev() {
            let len = self.hi[axis] - self.lo[axis] + 1;
            out[axis] = self.lo[axis] + j % len;
            j /= len;
        }
    }
}

struct NodeOut {
    value: f64,
    region: Region,
    violation: bool,
}

/// Dynamic programme `V_n(x) = min(G, max(F, sum_a p_a V_{n+1}(x + eps B(x,a) + eps^2 b(x,a))))`
/// over grid nodes, with `V_{n+1}` read by multilinear interpolation. Only nodes reachable
/// from `x0` by step `n` are updated at level `n`.
pub fn value_markov_grid(
    payoffs: &PayoffPair,
    field: &FieldSpec,
    noise: &NoiseModel,
    x0: &[f64],
    eps: f64,
    horizon: f64,
    options: &GridOptions,
) -> Result<ValuationResult> {
    check_instance(field, noise, x0, "grid")?;
    if !payoffs.is_markov() {
        return Err(Error::Unsupported("path-dependent payoffs need the tree engine".into()));
    }
    let d = x0.len();
    if d > MAX_GRID_DIM {
        return Err(Error::Unsupported(format!("grid engine supports dimension <= {MAX_GRID_DIM}, got {d}")));
    }
    let steps = step_count(eps, horizon)?;
    let max_move = eps * field.bound() + eps * eps * field.bound();
    let lattice = Lattice::new(options, x0, eps, steps, max_move)?;

    // active boxes: the cell around x0 widened by the per-step reach
    let mut start = IndexBox { lo: vec![0; d], hi: vec![0; d] };
    let mut widen = vec![0usize; d];
    for axis in 0..d {
        let (i, w) = lattice.locate(axis, x0[axis]).ok_or_else(|| Error::GridEscape { step: 0, state: x0.to_vec() })?;
        start.lo[axis] = i;
        start.hi[axis] = if w > 0.0 { i + 1 } else { i };
        widen[axis] = widening(max_move, lattice.h[axis]);
    }
    let active = |n: usize| IndexBox {
        lo: (0..d).map(|a| start.lo[a].saturating_sub(n * widen[a])).collect(),
        hi: (0..d).map(|a| (start.hi[a] + n * widen[a]).min(lattice.size[a] - 1)).collect(),
    };

    let total = lattice.total();
    let mut next = vec![0.0; total];
    let mut current = vec![0.0; total];
    let mut regions = options.record_regions.then(Vec::new);
    let mut node_count: u64 = 0;
    let mut violations: u64 = 0;
    let probs = noise.probabilities();
    let atoms = noise.atoms();

    for n in (0..=steps).rev() {
        let t = n as f64 * eps * eps;
        let boxed = active(n);
        let count = boxed.count();
        node_count += count as u64;
        let level: Vec<NodeOut> = (0..count)
            .into_par_iter()
            .map_init(
                || (vec![0usize; d], vec![0.0; d], vec![0.0; d], StepBuffers::new(d)),
                |(idx, x, child, buf), j| -> Result<NodeOut> {
                    boxed.node(j, idx);
                    for axis in 0..d {
                        x[axis] = lattice.coord(axis, idx[axis]);
                    }
                    let f = payoffs.lower.eval_state(t, x)?;
                    if n == steps {
                        if !f.is_finite() {
                            return Err(Error::NonFinite { location: format!("terminal payoff at step {n}") });
                        }
                        return Ok(NodeOut { value: f, region: Region::Player2Stop, violation: false });
                    }
                    let mut cont = 0.0;
                    for (atom, p) in atoms.iter().zip(probs) {
                        child.copy_from_slice(x);
                        step_into(field, child, atom, eps, buf)?;
                        let v = lattice
                            .interpolate(&next, child)
                            .ok_or_else(|| Error::GridEscape { step: n + 1, state: child.clone() })?;
                        cont += p * v;
                    }
                    let g = match &payoffs.upper {
                        Some(g) => Some(g.eval_state(t, x)?),
                        None => None,
                    };
                    let (value, region) = resolve(n, f, g, cont)?;
                    Ok(NodeOut { value, region, violation: outside(value, f, g) })
                },
            )
            .collect::<Result<_>>()?;

        let mut idx = vec![0usize; d];
        for (j, out) in level.iter().enumerate() {
            boxed.node(j, &mut idx);
            let flat: usize = idx.iter().zip(&lattice.strides).map(|(i, s)| i * s).sum();
            current[flat] = out.value;
            violations += out.violation as u64;
            if let Some(r) = regions.as_mut() {
                if n < steps {
                    let state = (0..d).map(|a| lattice.coord(a, idx[a])).collect();
                    r.push(StopRecord { step: n, state, region: out.region });
                }
            }
        }
        std::mem::swap(&mut current, &mut next);
    }

    let value = lattice.interpolate(&next, x0).ok_or_else(|| Error::GridEscape { step: 0, state: x0.to_vec() })?;
    let h_max = lattice.h.iter().cloned().fold(0.0, f64::max);
    if let Some(r) = regions.as_mut() {
        r.reverse();
        r.sort_by_key(|s| s.step);
    }
    Ok(ValuationResult {
        value,
        engine: Engine::Grid,
        eps,
        steps,
        node_count,
        sandwich_violations: violations,
        interpolation_bound: Some(payoffs.lipschitz * h_max * (steps + 1) as f64),
        stop_regions: regions,
    })
}
