// Exact prize-collecting TSP under a linear scalarization, by Held-Karp
// dynamic programming.
//
// best[S][e] is the cheapest scalarized path leaving the depot, visiting
// exactly the non-depot nodes in S and ending at e. Every subset S whose
// collected prize meets the quota closes into a candidate tour:
//
//     cost(S) = min_e best[S][e] + c(e, 0) + w_pen * (total penalty - penalty(S))
//
// plus the depot-only tour for S = {}. Edge costs may be negative (learned
// weights are unconstrained); the DP stays exact because it only ever
// extends simple paths.

use crate::error::{check_dim, Error, Result};
use crate::problems::tsp::{TspInstance, Tour, CHANNELS, TSP_FEATURES};
use crate::types::WeightVector;

pub const DEFAULT_EXACT_CAP: usize = 16;

#[derive(Clone, Copy, Debug)]
pub struct ExactConfig {
    /// Largest node count the solver accepts.
    pub node_cap: usize,
}

impl Default for ExactConfig {
    fn default() -> Self {
        Self { node_cap: DEFAULT_EXACT_CAP }
    }
}

const NO_PARENT: u8 = u8::MAX;

/// Feasible tour maximizing `<w, tsp_features(tour)>`.
///
/// Ties resolve to the smallest visit-set bitmask, then the smallest last
/// node, so the result is deterministic.
pub fn tsp_solve_exact(inst: &TspInstance, w: &WeightVector, config: &ExactConfig) -> Result<Tour> {
    check_dim(TSP_FEATURES, w.dim())?;
    let v = inst.node_count;
    if v > config.node_cap || v > 24 {
        return Err(Error::SolverCap { nodes: v, cap: config.node_cap.min(24) });
    }
    let w = w.values();
    let cost = |i: usize, j: usize| -> f64 { (0..CHANNELS).map(|l| w[l] * inst.edge_values[l][i][j]).sum() };
    // Non-depot nodes are renumbered 0..m-1 (node = bit + 1).
    let m = v - 1;
    let full = 1usize << m;
    let c: Vec<Vec<f64>> = (0..v).map(|i| (0..v).map(|j| cost(i, j)).collect()).collect();

    let mut best = vec![f64::INFINITY; full * m];
    let mut parent = vec![NO_PARENT; full * m];
    for e in 0..m {
        best[(1 << e) * m + e] = c[0][e + 1];
    }
    for s in 1..full {
        for e in 0..m {
            if s & (1 << e) == 0 {
                continue;
            }
            let here = best[s * m + e];
            if !here.is_finite() {
                continue;
            }
            for n in 0..m {
                if s & (1 << n) != 0 {
                    continue;
                }
                let t = s | (1 << n);
                let cand = here + c[e + 1][n + 1];
                let slot = t * m + n;
                if cand < best[slot] {
                    best[slot] = cand;
                    parent[slot] = e as u8;
                }
            }
        }
    }

    let total_penalty: f64 = inst.penalties.iter().sum();
    let w_pen = w[CHANNELS];
    let mut visited = vec![false; v];
    visited[0] = true;
    let mut choice: Option<(f64, usize, Option<usize>)> = None;
    for s in 0..full {
        for b in 0..m {
            visited[b + 1] = s & (1 << b) != 0;
        }
        if inst.prize_of_mask(&visited) < inst.prize_quota {
            continue;
        }
        let collected_penalty: f64 = (0..m).filter(|b| s & (1 << b) != 0).map(|b| inst.penalties[b + 1]).sum();
        let pen = w_pen * (total_penalty - collected_penalty);
        if s == 0 {
            if choice.is_none_or(|(best_cost, _, _)| pen < best_cost) {
                choice = Some((pen, 0, None));
            }
            continue;
        }
        for e in 0..m {
            if s & (1 << e) == 0 {
                continue;
            }
            let total = best[s * m + e] + c[e + 1][0] + pen;
            if choice.is_none_or(|(best_cost, _, _)| total < best_cost) {
                choice = Some((total, s, Some(e)));
            }
        }
    }

    let (_, mut s, last) = choice.ok_or_else(|| {
        Error::Infeasible(format!(
            "prize quota {} exceeds the collectable prize {}",
            inst.prize_quota,
            inst.total_prize()
        ))
    })?;
    let mut rev = Vec::with_capacity(m);
    let mut cur = last;
    while let Some(e) = cur {
        rev.push(e + 1);
        let p = parent[s * m + e];
        s &= !(1 << e);
        cur = if p == NO_PARENT { None } else { Some(p as usize) };
    }
    let mut order = vec![0];
    order.extend(rev.into_iter().rev());
    Ok(Tour::new(order))
}
