//! Best-bound branch-and-bound over SOS1 catalog groups.
//!
//! Nodes restrict each group to a subset of still-allowed candidates;
//! branching splits the ordered candidate list of the most fractional group
//! at its weighted median, so 5-way tap groups resolve in a few levels. Node
//! relaxations are continuous SOCP solves. Incumbent upper bounds come
//! exclusively from the caller's recovery callback (true nonconvex-feasible
//! points), so the reported gap is honest against the original problem;
//! integral relaxation values additionally fathom the search for the
//! relaxation optimum itself.
//!
//! Processing is single-threaded with deterministic tie-breaking (bound,
//! then insertion order; group index ascending), which pins the node count
//! for a fixed parameter set.

use crate::conic::{solve_socp, SolveStatus, SolverParams};
use crate::formulation::relax_integrality;
use crate::program::{Col, ConicProgram};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::time::{Duration, Instant};
use thiserror::Error;

/// Map group index -> selected candidate position.
pub type Assignment = BTreeMap<usize, usize>;

#[derive(Clone, Debug)]
pub struct BnbParams {
    /// Relative gap below which the search stops as optimal.
    pub mip_gap_tol: f64,
    pub node_limit: usize,
    pub time_limit: Option<Duration>,
    /// A group counts as resolved when its top weight reaches `1 - int_tol`.
    pub int_tol: f64,
    pub solver: SolverParams,
    /// Emit a progress log line every this many nodes.
    pub log_every: usize,
}

impl Default for BnbParams {
    fn default() -> Self {
        Self {
            mip_gap_tol: 1e-6,
            node_limit: 100_000,
            time_limit: None,
            int_tol: 1e-6,
            solver: SolverParams::pipeline(),
            log_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MisocpStatus {
    Optimal,
    GapLimit,
    NodeLimit,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct MisocpResult {
    /// Valid lower bound on the mixed-integer relaxation optimum.
    pub lower_bound: f64,
    pub status: MisocpStatus,
    /// Best integral assignment found, if any.
    pub best_assignment: Option<Assignment>,
    /// Relaxation objective of the best integral node.
    pub best_misocp_objective: Option<f64>,
    /// Best true upper bound returned by the recovery callback.
    pub incumbent_ub: Option<f64>,
    /// Assignment that produced `incumbent_ub`.
    pub incumbent_assignment: Option<Assignment>,
    pub node_count: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Error)]
pub enum BnbError {
    #[error("select_branch called with an integral solution")]
    IntegralSolution,
    #[error("solver error: {0}")]
    Solver(String),
}

/// A search node: per-group allowed candidate subsets plus the parent bound.
#[derive(Clone, Debug)]
pub struct BnbNode {
    pub allowed: Vec<Vec<bool>>,
    pub bound: f64,
    pub depth: usize,
}

struct HeapItem {
    bound: f64,
    seq: usize,
    node: BnbNode,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.seq == other.seq
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    // BinaryHeap is a max-heap; invert so the smallest bound pops first,
    // ties broken by insertion order.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .partial_cmp(&self.bound)
            .unwrap_or(Ordering::Equal)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Pick the branching group and partition its candidates.
///
/// `weights` holds, per group, the relaxation weight of every allowed
/// candidate in catalog order (ascending physical value). The group whose
/// maximum weight is closest to 0.5 is selected; its candidates split at the
/// weighted median (the prefix strictly below half the mass forms the left
/// child, never empty).
pub fn select_branch(
    weights: &[Vec<(usize, f64)>],
) -> Result<(usize, (Vec<usize>, Vec<usize>)), BnbError> {
    let mut best: Option<(f64, usize)> = None;
    for (gi, group) in weights.iter().enumerate() {
        if group.len() < 2 {
            continue;
        }
        let max_w = group.iter().map(|&(_, w)| w).fold(f64::NEG_INFINITY, f64::max);
        if max_w >= 1.0 - 1e-6 {
            continue;
        }
        let frac = (max_w - 0.5).abs();
        if best.map_or(true, |(bf, _)| frac < bf) {
            best = Some((frac, gi));
        }
    }
    let (_, gi) = best.ok_or(BnbError::IntegralSolution)?;
    let group = &weights[gi];
    let total: f64 = group.iter().map(|&(_, w)| w).sum();
    let half = 0.5 * total.max(1e-12);
    let mut cum = 0.0;
    let mut split = 0;
    for (pos, &(_, w)) in group.iter().enumerate() {
        cum += w;
        if cum >= half {
            split = pos;
            break;
        }
    }
    let split = split.max(1).min(group.len() - 1);
    let left: Vec<usize> = group[..split].iter().map(|&(c, _)| c).collect();
    let right: Vec<usize> = group[split..].iter().map(|&(c, _)| c).collect();
    Ok((gi, (left, right)))
}

/// Translate a full assignment into binary-column values for `fix_binaries`.
pub fn assignment_to_columns(program: &ConicProgram, assignment: &Assignment) -> BTreeMap<Col, bool> {
    let mut cols = BTreeMap::new();
    for (gi, group) in program.sos1_groups.iter().enumerate() {
        let sel = assignment[&gi];
        for (pos, &c) in group.iter().enumerate() {
            cols.insert(c, pos == sel);
        }
    }
    cols
}

fn prune_threshold(best: f64) -> f64 {
    best - 1e-9 * best.abs().max(1.0)
}

fn apply_restriction(base: &ConicProgram, node: &BnbNode) -> ConicProgram {
    let mut prog = relax_integrality(base);
    for (gi, group) in base.sos1_groups.iter().enumerate() {
        let allowed = &node.allowed[gi];
        let n_allowed = allowed.iter().filter(|&&a| a).count();
        for (pos, &c) in group.iter().enumerate() {
            if !allowed[pos] {
                prog.upper[c] = 0.0;
            } else if n_allowed == 1 {
                prog.lower[c] = 1.0;
            }
        }
    }
    prog
}

/// Solve the mixed-integer relaxation to (relaxation-)global optimality by
/// best-bound search.
///
/// `incumbent_eval` receives each integral assignment once and returns a
/// true upper bound for it when recovery succeeds. The returned
/// `lower_bound` is the minimum over all open and fathomed node bounds, a
/// valid bound on the MISOCP optimum regardless of how the search stopped.
pub fn solve_misocp(
    program: &ConicProgram,
    incumbent_eval: &mut dyn FnMut(&Assignment) -> Option<f64>,
    params: &BnbParams,
) -> Result<MisocpResult, BnbError> {
    let start = Instant::now();
    let groups = &program.sos1_groups;

    // Continuous case: one solve, no branching.
    if groups.is_empty() {
        let relaxed = relax_integrality(program);
        let sol = solve_socp(&relaxed, &params.solver).map_err(|e| BnbError::Solver(e.to_string()))?;
        return Ok(match sol.status {
            SolveStatus::Optimal => {
                let ub = incumbent_eval(&Assignment::new());
                MisocpResult {
                    lower_bound: sol.objective,
                    status: MisocpStatus::Optimal,
                    best_assignment: Some(Assignment::new()),
                    best_misocp_objective: Some(sol.objective),
                    incumbent_ub: ub,
                    incumbent_assignment: ub.map(|_| Assignment::new()),
                    node_count: 1,
                    wall_time_s: start.elapsed().as_secs_f64(),
                }
            }
            SolveStatus::Infeasible => MisocpResult {
                lower_bound: f64::INFINITY,
                status: MisocpStatus::Infeasible,
                best_assignment: None,
                best_misocp_objective: None,
                incumbent_ub: None,
                incumbent_assignment: None,
                node_count: 1,
                wall_time_s: start.elapsed().as_secs_f64(),
            },
            other => {
                return Err(BnbError::Solver(format!("root relaxation returned {other:?}")));
            }
        });
    }

    let root = BnbNode {
        allowed: groups.iter().map(|g| vec![true; g.len()]).collect(),
        bound: f64::NEG_INFINITY,
        depth: 0,
    };
    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    heap.push(HeapItem { bound: root.bound, seq, node: root });

    let mut node_count = 0usize;
    let mut best_misocp: Option<f64> = None;
    let mut best_assignment: Option<Assignment> = None;
    let mut incumbent_ub: Option<f64> = None;
    let mut incumbent_assignment: Option<Assignment> = None;
    let mut evaluated: HashSet<Vec<usize>> = HashSet::new();
    // Bounds of nodes closed without full resolution (solver failures).
    let mut unresolved_floor = f64::INFINITY;
    let mut status = MisocpStatus::Optimal;

    let best_known = |best_misocp: &Option<f64>, incumbent_ub: &Option<f64>| -> f64 {
        match (best_misocp, incumbent_ub) {
            (Some(a), Some(b)) => a.min(*b),
            (Some(a), None) => *a,
            (None, Some(b)) => *b,
            (None, None) => f64::INFINITY,
        }
    };

    while let Some(HeapItem { node, .. }) = {
        // Early termination by gap: the heap top is the global open bound.
        let open_lb = heap.peek().map(|h: &HeapItem| h.bound).unwrap_or(f64::INFINITY);
        let best = best_known(&best_misocp, &incumbent_ub);
        if best.is_finite()
            && open_lb.is_finite()
            && best - open_lb <= params.mip_gap_tol * best.abs().max(1.0)
        {
            None
        } else if node_count >= params.node_limit {
            status = MisocpStatus::NodeLimit;
            None
        } else if params.time_limit.map_or(false, |t| start.elapsed() > t) {
            status = MisocpStatus::GapLimit;
            None
        } else {
            heap.pop()
        }
    } {
        let cutoff = prune_threshold(best_known(&best_misocp, &incumbent_ub));
        if node.bound >= cutoff {
            // Fathomed by bound; its bound only exceeds the incumbent.
            continue;
        }
        node_count += 1;
        if params.log_every > 0 && node_count % params.log_every == 0 {
            let open_lb = heap.peek().map(|h| h.bound).unwrap_or(f64::INFINITY);
            log::info!(
                "bnb: {} nodes, {} open, lb={:.6e}, ub={:.6e}",
                node_count,
                heap.len(),
                open_lb.min(node.bound),
                best_known(&best_misocp, &incumbent_ub)
            );
        }

        let prog = apply_restriction(program, &node);
        let sol = match solve_socp(&prog, &params.solver) {
            Ok(s) => s,
            Err(e) => return Err(BnbError::Solver(e.to_string())),
        };
        match sol.status {
            SolveStatus::Infeasible => continue,
            SolveStatus::Optimal => {}
            _ => {
                // Unresolved node: branch blindly if possible, otherwise keep
                // its parent bound as an unresolved floor.
                if let Some((gi, pos)) = node
                    .allowed
                    .iter()
                    .enumerate()
                    .find_map(|(gi, a)| {
                        let n = a.iter().filter(|&&x| x).count();
                        if n >= 2 {
                            Some((gi, a.iter().position(|&x| x).unwrap()))
                        } else {
                            None
                        }
                    })
                {
                    for half in 0..2 {
                        let mut child = node.clone();
                        for (p, flag) in child.allowed[gi].iter_mut().enumerate() {
                            if half == 0 {
                                *flag = *flag && p == pos;
                            } else {
                                *flag = *flag && p != pos;
                            }
                        }
                        child.depth += 1;
                        seq += 1;
                        heap.push(HeapItem { bound: child.bound, seq, node: child });
                    }
                } else {
                    unresolved_floor = unresolved_floor.min(node.bound.max(f64::NEG_INFINITY));
                    log::warn!("bnb: leaf node solver status {:?}; bound floor kept", sol.status);
                }
                continue;
            }
        }
        let node_lb = sol.objective.max(node.bound);
        if node_lb >= cutoff {
            continue;
        }

        // Collect per-group allowed weights in catalog order.
        let mut weights: Vec<Vec<(usize, f64)>> = Vec::with_capacity(groups.len());
        for (gi, group) in groups.iter().enumerate() {
            let w: Vec<(usize, f64)> = group
                .iter()
                .enumerate()
                .filter(|(pos, _)| node.allowed[gi][*pos])
                .map(|(pos, &c)| (pos, sol.primal[c]))
                .collect();
            weights.push(w);
        }
        let integral = weights.iter().all(|g| {
            g.len() == 1 || g.iter().map(|&(_, w)| w).fold(f64::NEG_INFINITY, f64::max) >= 1.0 - params.int_tol
        });

        if integral {
            let assignment: Assignment = weights
                .iter()
                .enumerate()
                .map(|(gi, g)| {
                    let (pos, _) = g
                        .iter()
                        .cloned()
                        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
                        .unwrap();
                    (gi, pos)
                })
                .collect();
            if best_misocp.map_or(true, |b| node_lb < b) {
                best_misocp = Some(node_lb);
                best_assignment = Some(assignment.clone());
            }
            let key: Vec<usize> = assignment.values().copied().collect();
            if evaluated.insert(key) {
                if let Some(ub) = incumbent_eval(&assignment) {
                    if incumbent_ub.map_or(true, |b| ub < b) {
                        incumbent_ub = Some(ub);
                        incumbent_assignment = Some(assignment);
                    }
                }
            }
            continue;
        }

        let (gi, (left, right)) = select_branch(&weights)?;
        for part in [left, right] {
            let mut child = node.clone();
            for (pos, flag) in child.allowed[gi].iter_mut().enumerate() {
                *flag = *flag && part.contains(&pos);
            }
            child.bound = node_lb;
            child.depth = node.depth + 1;
            seq += 1;
            heap.push(HeapItem { bound: child.bound, seq, node: child });
        }
    }

    let open_lb = heap.iter().map(|h| h.bound).fold(f64::INFINITY, f64::min);
    let mut lower_bound = open_lb.min(unresolved_floor);
    if let Some(b) = best_misocp {
        lower_bound = lower_bound.min(b);
    }
    if !lower_bound.is_finite() && best_misocp.is_none() {
        // Every node was infeasible.
        return Ok(MisocpResult {
            lower_bound: f64::INFINITY,
            status: MisocpStatus::Infeasible,
            best_assignment: None,
            best_misocp_objective: None,
            incumbent_ub: None,
            incumbent_assignment: None,
            node_count,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }

    Ok(MisocpResult {
        lower_bound,
        status,
        best_assignment,
        best_misocp_objective: best_misocp,
        incumbent_ub,
        incumbent_assignment,
        node_count,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_selection_rules() {
        // Two-candidate group at (0.5, 0.5): chosen, split {first}/{second}.
        let w = vec![vec![(0usize, 0.5), (1usize, 0.5)]];
        let (g, (l, r)) = select_branch(&w).unwrap();
        assert_eq!(g, 0);
        assert_eq!(l, vec![0]);
        assert_eq!(r, vec![1]);

        // Fractionality ordering: (1,0,...) loses to (0.6,0.4,...).
        let w = vec![
            vec![(0, 1.0), (1, 0.0), (2, 0.0), (3, 0.0), (4, 0.0)],
            vec![(0, 0.6), (1, 0.4), (2, 0.0), (3, 0.0), (4, 0.0)],
        ];
        let (g, _) = select_branch(&w).unwrap();
        assert_eq!(g, 1);

        // Uniform 5-candidate group splits {0,1} / {2,3,4}.
        let w = vec![vec![(0, 0.2), (1, 0.2), (2, 0.2), (3, 0.2), (4, 0.2)]];
        let (_, (l, r)) = select_branch(&w).unwrap();
        assert_eq!(l, vec![0, 1]);
        assert_eq!(r, vec![2, 3, 4]);

        // Integral solution: error.
        let w = vec![vec![(0, 1.0), (1, 0.0)]];
        assert!(matches!(select_branch(&w), Err(BnbError::IntegralSolution)));
    }
}
