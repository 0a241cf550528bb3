//! Cycle-based cutting planes separating a relaxation point from the set of
//! voltage-product vectors admitting a PSD Hermitian completion.
//!
//! Every physical voltage profile `V` lifts to `X = V V^H` with
//! `X_ij = c_ij - j s_ij`, so the restriction of a feasible `(c, s)` point to
//! any cycle admits a PSD completion. Separation works per fundamental cycle:
//! 3-cycles are fully specified, so a negative eigenvalue of the sampled 3x3
//! Hermitian matrix yields a closed-form cut `v^H X v >= 0`; longer cycles
//! have free entries and are separated by projecting the sampled entries onto
//! the PSD-completable set with Dykstra's alternating projections, emitting
//! the supporting hyperplane at the projection.
//!
//! Complex Hermitian k x k matrices are handled through the real symmetric
//! 2k x 2k embedding `[[A, -B], [B, A]]` for `X = A + jB`, which commutes
//! with eigenvalue clipping and keeps everything in `nalgebra` real algebra.

use crate::case_io::NetworkModel;
use crate::conic::{solve_socp, ConicSolution, SolveStatus, SolverParams};
use crate::formulation::{
    BoundsTable, CutProvenance, LinearCut, RelaxationMode, VarKey, VariableMap,
};
use crate::program::{ConicProgram, Sense};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Default PSD tolerance for the 3-cycle eigenvalue test.
pub const TOL_PSD: f64 = 1e-7;
/// Default projection distance threshold for Dykstra separation.
pub const TOL_DYKSTRA: f64 = 1e-5;
/// Default iteration cap for Dykstra's alternating projections.
pub const DYKSTRA_MAX_ITER: usize = 2000;
/// Cuts with smaller normalized violation at generation are discarded.
const MIN_VIOLATION: f64 = 1e-6;
/// Cosine-similarity threshold above which two cuts are duplicates.
const DEDUP_COSINE: f64 = 1.0 - 1e-9;

/// One traversal step of a cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleEdge {
    pub line: usize,
    /// Whether the traversal matches the stored from->to direction.
    pub forward: bool,
}

/// A simple cycle: bus indices `b_0 .. b_{k-1}` with edge `t` joining
/// `b_t` to `b_{(t+1) % k}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cycle {
    pub buses: Vec<usize>,
    pub edges: Vec<CycleEdge>,
}

impl Cycle {
    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }
}

/// Sampled voltage products on a cycle, traversal-oriented: `s_edge[t]` is
/// the sine product in the direction `b_t -> b_{t+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CyclePoint {
    pub c_diag: Vec<f64>,
    pub c_edge: Vec<f64>,
    pub s_edge: Vec<f64>,
}

/// Fundamental cycle basis from a breadth-first (minimum-depth) spanning
/// tree rooted at the slack bus. Each non-tree edge contributes one cycle;
/// parallel duplicates of a tree edge would form 2-cycles and are skipped
/// (their consistency is already enforced by the shared-product rows of the
/// formulation). Tree networks return an empty list.
pub fn cycle_basis(network: &NetworkModel) -> Vec<Cycle> {
    let nb = network.buses.len();
    let root = network.slack_index();
    let mut parent_edge: Vec<Option<usize>> = vec![None; nb];
    let mut parent_bus: Vec<usize> = (0..nb).collect();
    let mut depth = vec![usize::MAX; nb];
    let mut tree_edge = vec![false; network.branches.len()];

    let mut queue = VecDeque::new();
    depth[root] = 0;
    queue.push_back(root);
    while let Some(u) = queue.pop_front() {
        for &k in &network.adjacency[u] {
            let (fi, ti) = network.branch_endpoints(k);
            let other = if fi == u { ti } else { fi };
            if depth[other] == usize::MAX {
                depth[other] = depth[u] + 1;
                parent_edge[other] = Some(k);
                parent_bus[other] = u;
                tree_edge[k] = true;
                queue.push_back(other);
            }
        }
    }

    let mut cycles = Vec::new();
    for k in 0..network.branches.len() {
        if tree_edge[k] {
            continue;
        }
        let (fi, ti) = network.branch_endpoints(k);
        if fi == ti {
            continue;
        }
        // Tree paths from both endpoints to their lowest common ancestor.
        let (mut a, mut b) = (fi, ti);
        let mut up_a: Vec<(usize, usize)> = Vec::new(); // (bus, via edge)
        let mut up_b: Vec<(usize, usize)> = Vec::new();
        while depth[a] > depth[b] {
            up_a.push((a, parent_edge[a].unwrap()));
            a = parent_bus[a];
        }
        while depth[b] > depth[a] {
            up_b.push((b, parent_edge[b].unwrap()));
            b = parent_bus[b];
        }
        while a != b {
            up_a.push((a, parent_edge[a].unwrap()));
            a = parent_bus[a];
            up_b.push((b, parent_edge[b].unwrap()));
            b = parent_bus[b];
        }
        let lca = a;
        if up_a.is_empty() && up_b.is_empty() {
            continue; // parallel edge: 2-cycle
        }
        // Bus sequence: fi -> ... -> lca -> ... -> ti, closed by edge k.
        let mut buses = Vec::with_capacity(up_a.len() + up_b.len() + 1);
        let mut edges = Vec::with_capacity(up_a.len() + up_b.len() + 1);
        for &(bus, edge) in &up_a {
            buses.push(bus);
            let (efi, _) = network.branch_endpoints(edge);
            edges.push(CycleEdge { line: edge, forward: efi == bus });
        }
        buses.push(lca);
        let mut down = up_b.clone();
        down.reverse();
        for (idx, &(bus, edge)) in down.iter().enumerate() {
            // Traversal goes parent -> child here.
            let (efi, _) = network.branch_endpoints(edge);
            let from_bus = if idx == 0 { lca } else { down[idx - 1].0 };
            edges.push(CycleEdge { line: edge, forward: efi == from_bus });
            buses.push(bus);
        }
        // Closing edge traverses ti -> fi.
        edges.push(CycleEdge { line: k, forward: false });
        debug_assert_eq!(buses.len(), edges.len());
        debug_assert!(buses.len() >= 3);
        cycles.push(Cycle { buses, edges });
    }
    cycles
}

/// Separation family: the fundamental basis plus the sums (symmetric edge
/// differences) of edge-sharing basis pairs that form a single simple cycle.
///
/// Basis-only separation can saturate well short of the per-cycle-consistent
/// hull on meshed networks; folding in pairwise sums recovers most of the
/// missing strength while keeping the family finite and every cut valid.
pub fn separation_cycles(network: &NetworkModel) -> Vec<Cycle> {
    let basis = cycle_basis(network);
    let mut family = basis.clone();
    let mut seen: std::collections::HashSet<Vec<usize>> = basis
        .iter()
        .map(|c| {
            let mut lines: Vec<usize> = c.edges.iter().map(|e| e.line).collect();
            lines.sort_unstable();
            lines
        })
        .collect();
    const MAX_LEN: usize = 12;
    const MAX_EXTRA: usize = 4;
    let mut extra = 0;
    'pairs: for i in 0..basis.len() {
        for j in i + 1..basis.len() {
            let a: std::collections::HashSet<usize> =
                basis[i].edges.iter().map(|e| e.line).collect();
            let b: std::collections::HashSet<usize> =
                basis[j].edges.iter().map(|e| e.line).collect();
            if a.is_disjoint(&b) {
                continue;
            }
            let sym: Vec<usize> = a.symmetric_difference(&b).copied().collect();
            if sym.len() < 3 || sym.len() > MAX_LEN {
                continue;
            }
            if let Some(cycle) = cycle_from_lines(network, &sym) {
                let mut key: Vec<usize> = sym.clone();
                key.sort_unstable();
                if seen.insert(key) {
                    family.push(cycle);
                    extra += 1;
                    if extra >= MAX_EXTRA * basis.len().max(8) {
                        break 'pairs;
                    }
                }
            }
        }
    }
    family
}

/// Assemble a simple cycle from an (unordered) edge set, if it is one.
fn cycle_from_lines(network: &NetworkModel, lines: &[usize]) -> Option<Cycle> {
    use std::collections::HashMap;
    let mut incident: HashMap<usize, Vec<usize>> = HashMap::new();
    for &k in lines {
        let (f, t) = network.branch_endpoints(k);
        if f == t {
            return None;
        }
        incident.entry(f).or_default().push(k);
        incident.entry(t).or_default().push(k);
    }
    if incident.values().any(|v| v.len() != 2) || incident.len() != lines.len() {
        return None;
    }
    let start = *incident.keys().min().unwrap();
    let mut buses = vec![start];
    let mut edges = Vec::with_capacity(lines.len());
    let mut cur = start;
    let mut prev_line = usize::MAX;
    loop {
        let &line = incident[&cur].iter().find(|&&k| k != prev_line)?;
        let (f, t) = network.branch_endpoints(line);
        let next = if f == cur { t } else { f };
        edges.push(CycleEdge { line, forward: f == cur });
        prev_line = line;
        cur = next;
        if cur == start {
            break;
        }
        buses.push(cur);
        if buses.len() > lines.len() {
            return None;
        }
    }
    if buses.len() != lines.len() {
        return None;
    }
    Some(Cycle { buses, edges })
}

/// Extract the traversal-oriented cycle point from a relaxation solution,
/// clamped into the variable boxes.
pub fn cycle_point(
    cycle: &Cycle,
    solution: &ConicSolution,
    vmap: &VariableMap,
    bounds: &BoundsTable,
) -> CyclePoint {
    let x = &solution.primal;
    let c_diag: Vec<f64> = cycle
        .buses
        .iter()
        .map(|&i| {
            let (lo, up) = bounds.c_diag[i];
            x[vmap.col(VarKey::VoltSq(i))].clamp(lo, up)
        })
        .collect();
    let mut c_edge = Vec::with_capacity(cycle.edges.len());
    let mut s_edge = Vec::with_capacity(cycle.edges.len());
    for e in &cycle.edges {
        let (clo, cup) = bounds.c_off[e.line];
        let (slo, sup) = bounds.s_off[e.line];
        c_edge.push(x[vmap.col(VarKey::WCos(e.line))].clamp(clo, cup));
        let s = x[vmap.col(VarKey::WSin(e.line))].clamp(slo, sup);
        s_edge.push(if e.forward { s } else { -s });
    }
    CyclePoint { c_diag, c_edge, s_edge }
}

/// Real symmetric embedding `[[A, -B], [B, A]]` of the Hermitian matrix with
/// fixed diagonal `c_diag` and fixed traversal-edge entries
/// `X[t][t+1] = c_edge[t] - j s_edge[t]`; free entries are zero.
fn embed_cycle_matrix(point: &CyclePoint) -> DMatrix<f64> {
    let k = point.c_diag.len();
    let mut m = DMatrix::zeros(2 * k, 2 * k);
    for (i, &c) in point.c_diag.iter().enumerate() {
        m[(i, i)] = c;
        m[(k + i, k + i)] = c;
    }
    for t in 0..point.c_edge.len() {
        let (a, b) = (t, (t + 1) % k);
        set_embedded_entry(&mut m, k, a, b, point.c_edge[t], point.s_edge[t]);
    }
    m
}

/// Write `X[a][b] = c - j s` (and its conjugate) into the embedding.
fn set_embedded_entry(m: &mut DMatrix<f64>, k: usize, a: usize, b: usize, c: f64, s: f64) {
    // A blocks (real part, symmetric).
    m[(a, b)] = c;
    m[(b, a)] = c;
    m[(k + a, k + b)] = c;
    m[(k + b, k + a)] = c;
    // B = Im(X): B[a][b] = -s, B[b][a] = +s. Layout [[A, -B], [B, A]].
    m[(a, k + b)] = s;
    m[(b, k + a)] = -s;
    m[(k + a, b)] = -s;
    m[(k + b, a)] = s;
}

/// Gradient extraction: coefficients of each cycle coordinate in
/// `<G, M(Z)>` for an embedded-Hermitian direction `G`.
fn unembed_gradient(g: &DMatrix<f64>, k: usize) -> CyclePoint {
    let c_diag: Vec<f64> = (0..k).map(|i| g[(i, i)] + g[(k + i, k + i)]).collect();
    let mut c_edge = Vec::with_capacity(k);
    let mut s_edge = Vec::with_capacity(k);
    for t in 0..k {
        let (a, b) = (t, (t + 1) % k);
        c_edge.push(g[(a, b)] + g[(b, a)] + g[(k + a, k + b)] + g[(k + b, k + a)]);
        s_edge.push(g[(a, k + b)] - g[(b, k + a)] - g[(k + a, b)] + g[(k + b, a)]);
    }
    CyclePoint { c_diag, c_edge, s_edge }
}

/// Map cycle-coordinate coefficients to program columns, folding the
/// traversal orientation into the sine coefficients.
fn cut_from_gradient(
    cycle: &Cycle,
    grad: &CyclePoint,
    sense: Sense,
    rhs: f64,
    provenance: CutProvenance,
    vmap: &VariableMap,
) -> LinearCut {
    let mut coeffs = Vec::new();
    for (pos, &bus) in cycle.buses.iter().enumerate() {
        if grad.c_diag[pos] != 0.0 {
            coeffs.push((vmap.col(VarKey::VoltSq(bus)), grad.c_diag[pos]));
        }
    }
    for (t, e) in cycle.edges.iter().enumerate() {
        if grad.c_edge[t] != 0.0 {
            coeffs.push((vmap.col(VarKey::WCos(e.line)), grad.c_edge[t]));
        }
        if grad.s_edge[t] != 0.0 {
            let sign = if e.forward { 1.0 } else { -1.0 };
            coeffs.push((vmap.col(VarKey::WSin(e.line)), sign * grad.s_edge[t]));
        }
    }
    // Merge duplicates (parallel lines can repeat a column).
    coeffs.sort_by_key(|&(c, _)| c);
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(coeffs.len());
    for (c, v) in coeffs {
        match merged.last_mut() {
            Some(last) if last.0 == c => last.1 += v,
            _ => merged.push((c, v)),
        }
    }
    LinearCut { coeffs: merged, sense, rhs, provenance }
}

/// Eigenvalue cut for a fully specified 3-cycle.
///
/// Builds the 3x3 Hermitian sample; if its minimum eigenvalue is below
/// `-tol_psd` the cut `v^H X v >= 0` (expanded over the cycle coordinates,
/// `v` the corresponding unit eigenvector) separates the point from every
/// PSD-completable vector. Returns the cut in cycle coordinates together
/// with the violation `-lambda_min`.
pub fn eig_cut_3cycle(point: &CyclePoint, tol_psd: f64) -> Option<(CyclePoint, f64)> {
    assert_eq!(point.c_diag.len(), 3, "eigenvalue cut requires a 3-cycle");
    let m = embed_cycle_matrix(point);
    let eig = m.symmetric_eigen();
    let (mut arg, mut lam) = (0usize, f64::INFINITY);
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v < lam {
            lam = v;
            arg = i;
        }
    }
    if lam >= -tol_psd {
        return None;
    }
    let v = eig.eigenvectors.column(arg).into_owned();
    // Outer product v v' is the gradient of v' M v; normalize v to unit.
    let v = &v / v.norm();
    let g = &v * v.transpose();
    let grad = unembed_gradient(&g, 3);
    Some((grad, -lam))
}

/// Outcome of a Dykstra projection run.
pub struct DykstraOutcome {
    /// Supporting-hyperplane gradient in cycle coordinates (points away from
    /// the PSD-completable set). Certified negative semidefinite as an
    /// embedded matrix, so `<gradient, b> <= 0` holds for every completable
    /// `b` unconditionally.
    pub gradient: CyclePoint,
    /// Right-hand side of the cut `<gradient, b> <= rhs` (always 0).
    pub rhs: f64,
    /// Violation of the cut at the sample; approaches the squared projection
    /// distance as the alternating projections converge.
    pub violation: f64,
    /// Squared embedded distance between sample and projection.
    pub distance_sq: f64,
    /// Coordinates of the projection.
    pub projection: CyclePoint,
}

/// Dykstra separation for cycles of length >= 4.
///
/// Alternates projections between the PSD cone (eigenvalue clipping in the
/// real embedding) and the affine set fixing the sampled entries. On empty
/// intersection the iterates approach the closest pair `(y in PSD, x in
/// affine)` and the gap direction `g = x - y` converges to a normal of the
/// PSD cone at the projection, giving the supporting-hyperplane cut
/// `<g, Z> <= 0`. To make the cut valid independently of how far the
/// iteration actually converged, `g` is shifted by `-lambda_max(g) I` (a
/// masked, diagonal correction) so that it is negative semidefinite; then
/// `<g, Z> <= 0` holds for every PSD `Z` by inspection. Returns `None` when
/// the point is (numerically) completable, the shift destroys the violation,
/// or the iteration budget is exhausted before the gap stabilizes - never an
/// unproven cut.
pub fn dykstra_separate(
    cycle: &Cycle,
    point: &CyclePoint,
    tol: f64,
    max_iter: usize,
) -> Option<DykstraOutcome> {
    let k = cycle.len();
    assert!(k >= 4, "Dykstra separation applies to cycles of length >= 4");
    let target = embed_cycle_matrix(point);
    let dim = 2 * k;

    let mut x = target.clone();
    let mut p = DMatrix::zeros(dim, dim);
    let mut q = DMatrix::zeros(dim, dim);
    let mut y = DMatrix::zeros(dim, dim);
    let mut prev_gap = f64::INFINITY;
    let mut stable_count = 0;
    let mut converged = false;

    for _ in 0..max_iter {
        // PSD projection of x + p.
        let xp = &x + &p;
        y = psd_clip(&xp);
        p = xp - &y;
        // Affine projection of y + q: reset masked entries to the sample.
        let yq = &y + &q;
        x = yq.clone();
        overwrite_masked(&mut x, point);
        q = yq - &x;

        let gap = (&x - &y).norm();
        if gap < tol * 0.1 {
            // Sample is completable; no cut.
            return None;
        }
        if (gap - prev_gap).abs() <= 1e-3 * gap.max(1e-12) {
            stable_count += 1;
            if stable_count >= 3 {
                converged = true;
                break;
            }
        } else {
            stable_count = 0;
        }
        prev_gap = gap;
    }
    if !converged {
        return None;
    }

    let gap_mat = &x - &y;
    let dist = gap_mat.norm();
    if dist <= tol {
        return None;
    }
    // Membership audit of the projection: it must be PSD to tol/10.
    let eig_y = y.clone().symmetric_eigen();
    let min_eig = eig_y.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -tol * 0.1 {
        return None;
    }

    // Certify: shift the gradient into the negative-semidefinite cone. The
    // shift is a multiple of the identity, i.e. purely diagonal, hence stays
    // supported on the masked entries.
    let eig_g = gap_mat.clone().symmetric_eigen();
    let max_eig = eig_g.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shift = max_eig.max(0.0);
    let mut certified = gap_mat.clone();
    for i in 0..dim {
        certified[(i, i)] -= shift;
    }

    // Violation at the sample: <g', x>.
    let mut violation = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            violation += certified[(i, j)] * target[(i, j)];
        }
    }
    if violation <= 0.0 {
        return None;
    }

    let gradient = unembed_gradient(&certified, k);
    let projection = CyclePoint {
        c_diag: (0..k).map(|i| y[(i, i)]).collect(),
        c_edge: (0..k).map(|t| y[(t, (t + 1) % k)]).collect(),
        s_edge: (0..k).map(|t| y[(t, k + (t + 1) % k)]).collect(),
    };
    Some(DykstraOutcome {
        gradient,
        rhs: 0.0,
        violation,
        distance_sq: dist * dist,
        projection,
    })
}

fn psd_clip(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let dim = m.nrows();
    let mut out = DMatrix::zeros(dim, dim);
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 0.0 {
            let v = eig.eigenvectors.column(i);
            out += lam * &v * v.transpose();
        }
    }
    out
}

fn overwrite_masked(m: &mut DMatrix<f64>, point: &CyclePoint) {
    let k = point.c_diag.len();
    for (i, &c) in point.c_diag.iter().enumerate() {
        m[(i, i)] = c;
        m[(k + i, k + i)] = c;
    }
    for t in 0..k {
        let (a, b) = (t, (t + 1) % k);
        set_embedded_entry(m, k, a, b, point.c_edge[t], point.s_edge[t]);
    }
}

/// Per-cut audit record from the root separation loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CutLogEntry {
    pub round: usize,
    pub cycle: usize,
    pub provenance: CutProvenance,
    pub violation: f64,
    pub nnz: usize,
}

impl CutLogEntry {
    pub fn audit_line(&self, cut: &LinearCut, program: &ConicProgram) -> String {
        let coeffs: Vec<String> = cut
            .coeffs
            .iter()
            .map(|&(c, v)| format!("{}:{:.6e}", program.col_names[c], v))
            .collect();
        format!(
            "round={} cycle={} kind={} violation={:.3e} coeffs=[{}] rhs={:.6e}",
            self.round,
            self.cycle,
            self.provenance.label(),
            self.violation,
            coeffs.join(","),
            cut.rhs
        )
    }
}

pub struct CutLoopResult {
    pub program: ConicProgram,
    pub cuts: Vec<LinearCut>,
    pub log: Vec<CutLogEntry>,
    pub rounds_run: usize,
    /// Objective of the final relaxation solve, when available.
    pub final_bound: Option<f64>,
}

/// Root strengthening loop: repeatedly solve the integrality-relaxed
/// program, separate all basis cycles in parallel, and add every surviving
/// cut. Stops early when a round adds nothing; a relaxation failure aborts
/// the loop and returns the cuts gathered so far. The added cuts are valid
/// for the mixed-integer problem since their validity does not depend on
/// integrality.
pub fn root_cut_loop(
    program: &ConicProgram,
    vmap: &VariableMap,
    instance: &crate::case_io::RopfInstance,
    bounds: &BoundsTable,
    rounds: usize,
    params: &SolverParams,
) -> CutLoopResult {
    let cycles = separation_cycles(&instance.network);
    let mut augmented = crate::formulation::relax_integrality(program);
    let mut all_cuts: Vec<LinearCut> = Vec::new();
    let mut normalized: Vec<Vec<f64>> = Vec::new(); // for dedup
    let mut log = Vec::new();
    let mut rounds_run = 0;
    let mut final_bound = None;

    if cycles.is_empty() || rounds == 0 {
        return CutLoopResult { program: augmented, cuts: all_cuts, log, rounds_run, final_bound };
    }

    for round in 0..rounds {
        let sol = match solve_socp(&augmented, params) {
            Ok(s) if s.status == SolveStatus::Optimal => s,
            Ok(s) => {
                log::warn!("cut loop round {round}: relaxation returned {:?}; stopping", s.status);
                break;
            }
            Err(e) => {
                log::warn!("cut loop round {round}: {e}; stopping");
                break;
            }
        };
        rounds_run = round + 1;
        final_bound = Some(sol.objective);

        let candidates: Vec<(usize, LinearCut, f64)> = cycles
            .par_iter()
            .enumerate()
            .filter_map(|(ci, cycle)| {
                let pt = cycle_point(cycle, &sol, vmap, bounds);
                if cycle.len() == 3 {
                    eig_cut_3cycle(&pt, TOL_PSD).map(|(grad, viol)| {
                        let cut =
                            cut_from_gradient(cycle, &grad, Sense::Ge, 0.0, CutProvenance::Eig3, vmap);
                        (ci, cut, viol)
                    })
                } else {
                    dykstra_separate(cycle, &pt, TOL_DYKSTRA, DYKSTRA_MAX_ITER).map(|out| {
                        let cut = cut_from_gradient(
                            cycle,
                            &out.gradient,
                            Sense::Le,
                            out.rhs,
                            CutProvenance::Dykstra,
                            vmap,
                        );
                        (ci, cut, out.violation)
                    })
                }
            })
            .collect();

        let mut added = 0;
        for (ci, cut, viol) in candidates {
            let norm: f64 = cut.coeffs.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || cut.violation(&sol.primal) / norm < MIN_VIOLATION {
                continue;
            }
            // Deduplicate on the normalized (coeffs, rhs) direction.
            let mut dense = vec![0.0; program.num_cols() + 1];
            let flip = if cut.sense == Sense::Ge { -1.0 } else { 1.0 };
            for &(c, v) in &cut.coeffs {
                dense[c] = flip * v / norm;
            }
            dense[program.num_cols()] = flip * cut.rhs / norm;
            let dup = normalized.iter().any(|old| {
                let dot: f64 = old.iter().zip(&dense).map(|(a, b)| a * b).sum();
                dot > DEDUP_COSINE
            });
            if dup {
                continue;
            }
            normalized.push(dense);
            log.push(CutLogEntry {
                round,
                cycle: ci,
                provenance: cut.provenance,
                violation: viol,
                nnz: cut.coeffs.len(),
            });
            cut.add_to(
                &mut augmented,
                format!("cut:{}[{}#{}]", cut.provenance.label(), ci, round),
            );
            all_cuts.push(cut);
            added += 1;
        }
        log::info!("cut loop round {round}: {added} cuts added");
        if added == 0 {
            break;
        }
    }

    CutLoopResult { program: augmented, cuts: all_cuts, log, rounds_run, final_bound }
}

/// Apply the accumulated cut rows to another program over the same columns
/// (e.g. the unrelaxed mixed-integer program).
pub fn apply_cuts(program: &ConicProgram, cuts: &[LinearCut]) -> ConicProgram {
    let mut out = program.clone();
    for (i, cut) in cuts.iter().enumerate() {
        cut.add_to(&mut out, format!("cut:{}[{i}]", cut.provenance.label()));
    }
    out
}

/// Used by `RelaxationMode` consumers: only `MisocpaPlus` runs the loop.
pub fn rounds_for_mode(mode: RelaxationMode, requested: usize) -> usize {
    match mode {
        RelaxationMode::MisocpaPlus => requested,
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_matpower;

    const CASE3: &str = include_str!("../fixtures/nesta_case3_lmbd.m");

    fn triangle_point(c: f64) -> CyclePoint {
        CyclePoint {
            c_diag: vec![1.0, 1.0, 1.0],
            c_edge: vec![c, c, c],
            s_edge: vec![0.0, 0.0, 0.0],
        }
    }

    #[test]
    fn triangle_graph_has_one_cycle() {
        let net = parse_matpower(CASE3).unwrap();
        let cycles = cycle_basis(&net);
        assert_eq!(cycles.len(), 1);
        assert_eq!(cycles[0].len(), 3);
        // Closed, adjacent, no repeats.
        let c = &cycles[0];
        let mut sorted = c.buses.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
    }

    #[test]
    fn tree_network_has_no_cycles() {
        let txt = "function mpc = tree\nmpc.baseMVA = 100;\n\
            mpc.bus = [\n1 3 0 0 0 0 1 1 0 240 1 1.1 0.9;\n2 1 10 2 0 0 1 1 0 240 1 1.1 0.9;\n\
            3 1 10 2 0 0 1 1 0 240 1 1.1 0.9;\n];\n\
            mpc.gen = [\n1 0 0 100 -100 1 100 1 100 0;\n];\n\
            mpc.branch = [\n1 2 0.01 0.1 0 0 0 0 0 0 1 -30 30;\n2 3 0.01 0.1 0 0 0 0 0 0 1 -30 30;\n];\n";
        let net = parse_matpower(txt).unwrap();
        assert!(cycle_basis(&net).is_empty());
    }

    #[test]
    fn rank_one_point_gives_no_cut() {
        // All-ones pattern comes from the flat voltage profile: PSD.
        let pt = triangle_point(1.0);
        assert!(eig_cut_3cycle(&pt, TOL_PSD).is_none());
    }

    #[test]
    fn eigenvalue_cut_separates_infeasible_triangle() {
        // c = -0.6 on all edges of a unit-diagonal triangle: the circulant
        // eigenvalues are 1 + 2c = -0.2 and 1 - c = 1.6 (twice), so the
        // matrix is not PSD and the cut must exist, be violated by the
        // sample by exactly -lambda_min, and hold at the all-ones point.
        let pt = triangle_point(-0.6);
        let (grad, viol) = eig_cut_3cycle(&pt, TOL_PSD).expect("cut exists");
        approx::assert_relative_eq!(viol, 0.2, epsilon = 1e-9);

        let eval = |p: &CyclePoint| -> f64 {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += grad.c_diag[i] * p.c_diag[i];
            }
            for t in 0..3 {
                acc += grad.c_edge[t] * p.c_edge[t] + grad.s_edge[t] * p.s_edge[t];
            }
            acc
        };
        // Cut is `eval >= 0`; sample violates by viol, feasible point holds.
        approx::assert_relative_eq!(eval(&pt), -viol, epsilon = 1e-9);
        assert!(eval(&triangle_point(1.0)) >= -1e-12);

        // Borderline PSD triangle (c = -0.5 has lambda_min = 0): no cut.
        assert!(eig_cut_3cycle(&triangle_point(-0.5), TOL_PSD).is_none());
    }

    #[test]
    fn eig_cut_valid_on_sampled_profiles() {
        let pt = triangle_point(-0.6);
        let (grad, _) = eig_cut_3cycle(&pt, TOL_PSD).unwrap();
        // 1000 voltage profiles: lifted triangle restrictions satisfy the cut.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut rand = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64)
        };
        for _ in 0..1000 {
            let vm: Vec<f64> = (0..3).map(|_| 0.9 + 0.2 * rand()).collect();
            let th: Vec<f64> = (0..3).map(|_| -0.5 + 1.0 * rand()).collect();
            let mut acc = 0.0;
            for i in 0..3 {
                acc += grad.c_diag[i] * vm[i] * vm[i];
            }
            for t in 0..3 {
                let (a, b) = (t, (t + 1) % 3);
                let d = th[a] - th[b];
                let m = vm[a] * vm[b];
                acc += grad.c_edge[t] * m * d.cos() + grad.s_edge[t] * (-m * d.sin());
            }
            assert!(acc >= -1e-10, "cut violated by feasible lift: {acc}");
        }
    }

    #[test]
    fn dykstra_fixed_point_on_completable_sample() {
        // All-ones pattern on a 4-cycle extends to the all-ones PSD matrix.
        let cycle = Cycle {
            buses: vec![0, 1, 2, 3],
            edges: (0..4).map(|t| CycleEdge { line: t, forward: true }).collect(),
        };
        let pt = CyclePoint {
            c_diag: vec![1.0; 4],
            c_edge: vec![1.0; 4],
            s_edge: vec![0.0; 4],
        };
        assert!(dykstra_separate(&cycle, &pt, TOL_DYKSTRA, DYKSTRA_MAX_ITER).is_none());
    }

    #[test]
    fn dykstra_separates_inconsistent_four_cycle() {
        // Angle differences 0.9 + 0.9 + 0.9 around the cycle force the
        // closing edge to -2.7, but the sampled closing edge claims +0.9:
        // no PSD completion exists (cone-tight entries with inconsistent
        // angles), so a cut must be emitted and satisfied by true lifts.
        let cycle = Cycle {
            buses: vec![0, 1, 2, 3],
            edges: (0..4).map(|t| CycleEdge { line: t, forward: true }).collect(),
        };
        let d = 0.9f64;
        let pt = CyclePoint {
            c_diag: vec![1.0; 4],
            c_edge: vec![d.cos(); 4],
            s_edge: vec![-d.sin(); 4],
        };
        let out = dykstra_separate(&cycle, &pt, TOL_DYKSTRA, DYKSTRA_MAX_ITER)
            .expect("sample is not completable");
        assert!(out.violation > 0.0);

        // The violation approaches the squared projection distance as the
        // alternating projections converge.
        assert!(out.violation <= 4.0 * out.distance_sq);
        assert!(out.violation >= 0.25 * out.distance_sq);

        let eval = |p: &CyclePoint| -> f64 {
            let mut acc = 0.0;
            for i in 0..4 {
                acc += out.gradient.c_diag[i] * p.c_diag[i];
            }
            for t in 0..4 {
                acc += out.gradient.c_edge[t] * p.c_edge[t]
                    + out.gradient.s_edge[t] * p.s_edge[t];
            }
            acc
        };
        let lhs_at_sample = eval(&pt);
        approx::assert_relative_eq!(lhs_at_sample - out.rhs, out.violation, max_relative = 1e-9);

        // Valid at sampled true lifts.
        let mut state = 0xdeadbeefcafef00du64;
        let mut rand = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64)
        };
        for _ in 0..1000 {
            let vm: Vec<f64> = (0..4).map(|_| 0.9 + 0.2 * rand()).collect();
            let th: Vec<f64> = (0..4).map(|_| -0.6 + 1.2 * rand()).collect();
            let mut p = CyclePoint { c_diag: vec![0.0; 4], c_edge: vec![0.0; 4], s_edge: vec![0.0; 4] };
            for i in 0..4 {
                p.c_diag[i] = vm[i] * vm[i];
            }
            for t in 0..4 {
                let (a, b) = (t, (t + 1) % 4);
                let dd = th[a] - th[b];
                p.c_edge[t] = vm[a] * vm[b] * dd.cos();
                p.s_edge[t] = -vm[a] * vm[b] * dd.sin();
            }
            assert!(eval(&p) <= out.rhs + 1e-8, "cut violated by feasible lift");
        }
    }
}
