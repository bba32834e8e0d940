//! Exhaustive inf-sup over pairs of adapted stopping times on small trees.
//!
//! A stopping time is a set of non-terminal nodes; along each noise path it stops at the first
//! node in the set, or at the final step if none. Every such map is adapted by construction.

use super::{check_instance, PathRef, PayoffPair};
use crate::error::{Error, Result};
use crate::field::FieldSpec;
use crate::noise::NoiseModel;
use crate::scheme::{step, step_count};

/// Upper limit on `strategy pairs x leaves`.
pub const ENUMERATION_LIMIT: u128 = 1 << 28;

/// `min over zeta max over eta E R(zeta, eta)` with `R = G_zeta` if `zeta < eta`, else `F_eta`.
pub fn value_bruteforce_oracle(
    payoffs: &PayoffPair,
    field: &FieldSpec,
    noise: &NoiseModel,
    x0: &[f64],
    eps: f64,
    horizon: f64,
) -> Result<f64> {
    check_instance(field, noise, x0, "oracle")?;
    let depth = step_count(eps, horizon)?;
    let k = noise.atoms().len();
    let d = x0.len();

    // level n holds k^n nodes; node j's children are j*k + a
    let inner: usize = (0..depth).map(|n| k.pow(n as u32)).sum();
    let leaves = k.pow(depth as u32);
    let strategies_min: u128 = if payoffs.upper.is_some() { 1u128 << inner.min(127) } else { 1 };
    let strategies_max: u128 = 1u128 << inner.min(127);
    if inner >= 64 || strategies_min.saturating_mul(strategies_max).saturating_mul(leaves as u128) > ENUMERATION_LIMIT {
        return Err(Error::EnumerationLimit(format!(
            "{inner} decision nodes and {leaves} leaves exceed the exhaustive-search limit"
        )));
    }

    // paths[n][j] is the flattened path to node j of level n
    let mut paths: Vec<Vec<Vec<f64>>> = vec![vec![x0.to_vec()]];
    for n in 0..depth {
        let mut next = Vec::with_capacity(paths[n].len() * k);
        for p in &paths[n] {
            for a in 0..k {
                let child = step(&p[n * d..], noise.atom(a), eps, field)?;
                let mut q = p.clone();
                q.extend_from_slice(&child);
                next.push(q);
            }
        }
        paths.push(next);
    }

    let mut lower = Vec::with_capacity(inner + leaves);
    let mut upper = Vec::with_capacity(inner);
    for (n, level) in paths.iter().enumerate() {
        let t = n as f64 * eps * eps;
        for p in level {
            let view = PathRef::new(d, p);
            let f = payoffs.lower.eval(t, view);
            if n < depth {
                let g = payoffs.upper.as_ref().map_or(f64::INFINITY, |g| g.eval(t, view));
                if g < f {
                    return Err(Error::PayoffOrdering { step: n, lower: f, upper: g });
                }
                upper.push(g);
            }
            lower.push(f);
        }
    }

    // node ids along each leaf's path and its probability
    let probs = noise.probabilities();
    let mut route = vec![0usize; leaves * (depth + 1)];
    let mut weight = vec![1.0; leaves];
    for leaf in 0..leaves {
        let mut offset = 0;
        for n in 0..=depth {
            let j = leaf / k.pow((depth - n) as u32);
            route[leaf * (depth + 1) + n] = offset + j;
            offset += k.pow(n as u32);
            if n < depth {
                let atom = (leaf / k.pow((depth - n - 1) as u32)) % k;
                weight[leaf] *= probs[atom];
            }
        }
    }

    let stop_time = |mask: u64, leaf: usize| -> usize {
        (0..depth).find(|&n| mask >> route[leaf * (depth + 1) + n] & 1 == 1).unwrap_or(depth)
    };
    let mut best = f64::INFINITY;
    for zeta in 0..strategies_min as u64 {
        let s: Vec<usize> = (0..leaves).map(|l| if payoffs.upper.is_some() { stop_time(zeta, l) } else { depth }).collect();
        let mut worst = f64::NEG_INFINITY;
        for eta in 0..strategies_max as u64 {
            let mut total = 0.0;
            for leaf in 0..leaves {
                let t = stop_time(eta, leaf);
                let r = if s[leaf] < t {
                    upper[route[leaf * (depth + 1) + s[leaf]]]
                } else {
                    lower[route[leaf * (depth + 1) + t]]
                };
                total += weight[leaf] * r;
            }
            worst = worst.max(total);
            if worst >= best {
                break;
            }
        }
        best = best.min(worst);
    }
    Ok(best)
}
