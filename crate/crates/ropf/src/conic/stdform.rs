//! Lowering of a [`ConicProgram`] to the solver's standard form
//!
//! ```text
//! min c'x   s.t.  A x = b,   G x + s = h,   s in K
//! ```
//!
//! with `K = R+^l x SOC(q_1) x ... x SOC(q_k)`.
//!
//! Presolve runs to a fixpoint before emission:
//! - fixed columns (`lower == upper`) are substituted out;
//! - single-column rows are absorbed into bounds;
//! - two-column equality rows become column aliases `y = coef x + const`;
//! - cones whose quadratic members are all pinned to zero degrade into
//!   plain nonnegativity rows;
//! - textually identical cone blocks are deduplicated.
//!
//! The alias and dedup steps matter for solver robustness: fixing the
//! catalog binaries leaves product columns equal to their base quantities
//! and duplicate consistency cones, a combination degenerate enough to stall
//! an interior-point endgame. Remaining bounds become nonnegative rows, `Ge`
//! rows are negated, and rotated cones map to standard second-order cones by
//! the orthogonal transformation `(u, v, w) -> ((u+v)/sqrt2, (u-v)/sqrt2,
//! sqrt2 w)`.

use super::sparse::CscMat;
use crate::program::{Col, ConeBlock, ConicProgram, LinExpr, ProgramError, Sense};
use std::collections::HashMap;

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;
const PRESOLVE_TOL: f64 = 1e-9;

/// Where an inequality (nonnegative-cone) row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IneqOrigin {
    Row(usize),
    LowerBound(Col),
    UpperBound(Col),
    /// Nonnegativity of cone `ci` member `idx` left over after the cone's
    /// quadratic members were all pinned to zero.
    ConeMember(usize, usize),
}

#[derive(Clone, Debug, Default)]
pub struct ConeDims {
    pub nonneg: usize,
    pub socs: Vec<usize>,
}

impl ConeDims {
    pub fn total(&self) -> usize {
        self.nonneg + self.socs.iter().sum::<usize>()
    }

    /// Barrier degree: one per nonnegative coordinate, one per SOC block.
    pub fn degree(&self) -> usize {
        self.nonneg + self.socs.len()
    }
}

/// Standard-form problem data plus the bookkeeping to map solutions back.
pub struct StdForm {
    pub n: usize,
    pub c: Vec<f64>,
    pub obj_const: f64,
    pub a: CscMat,
    pub b: Vec<f64>,
    pub g: CscMat,
    pub h: Vec<f64>,
    pub dims: ConeDims,
    /// Original column index of each live (non-fixed) solver column.
    pub live_cols: Vec<Col>,
    /// Fixed original columns and their values.
    pub fixed_cols: Vec<(Col, f64)>,
    /// Aliased original columns: `col = coef * root + const`, root-resolved.
    pub alias_cols: Vec<(Col, f64, Col, f64)>,
    /// Original row index of each equality row.
    pub eq_origin: Vec<usize>,
    /// Provenance of each nonnegative-cone row.
    pub ineq_origin: Vec<IneqOrigin>,
    /// Original cone index per SOC block, with `rotated` flag.
    pub cone_origin: Vec<(usize, bool)>,
    /// Presolve proof of infeasibility: row multipliers deriving an
    /// inconsistent constant inequality (best effort).
    pub infeasible_ray: Option<Vec<(usize, f64)>>,
}

impl StdForm {
    /// Reassemble a full original-space primal vector from solver `x`.
    pub fn expand_primal(&self, x: &[f64], num_cols: usize) -> Vec<f64> {
        let mut full = vec![0.0; num_cols];
        for (k, &col) in self.live_cols.iter().enumerate() {
            full[col] = x[k];
        }
        for &(col, v) in &self.fixed_cols {
            full[col] = v;
        }
        for &(col, coef, root, cst) in &self.alias_cols {
            full[col] = coef * full[root] + cst;
        }
        full
    }
}

/// Column state during presolve.
#[derive(Clone, Copy)]
enum ColState {
    Live,
    Fixed(f64),
    /// `self = coef * other + const`
    Alias { coef: f64, of: Col, constant: f64 },
}

struct Presolve {
    state: Vec<ColState>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    dropped: Vec<bool>,
    infeasible_ray: Option<Vec<(usize, f64)>>,
}

impl Presolve {
    /// Resolve a column through alias chains: `(coef, root, const)` with the
    /// root either live or fixed; fixed roots collapse to constants
    /// (`coef = 0`).
    fn resolve(&self, col: Col) -> (f64, Col, f64) {
        let mut coef = 1.0;
        let mut cst = 0.0;
        let mut cur = col;
        loop {
            match self.state[cur] {
                ColState::Live => return (coef, cur, cst),
                ColState::Fixed(v) => return (0.0, cur, cst + coef * v),
                ColState::Alias { coef: a, of, constant } => {
                    cst += coef * constant;
                    coef *= a;
                    cur = of;
                }
            }
        }
    }

    /// Resolve a whole expression into root-column terms plus a constant.
    fn resolve_expr(&self, expr: &LinExpr) -> LinExpr {
        let mut out = LinExpr::new();
        out.constant = expr.constant;
        for &(c, v) in &expr.terms {
            let (coef, root, cst) = self.resolve(c);
            out.constant += v * cst;
            if coef != 0.0 {
                out.add_term(root, v * coef);
            }
        }
        out.normalize();
        out
    }

    fn mark_fixed(&mut self, col: Col, value: f64) {
        self.state[col] = ColState::Fixed(value);
    }

    fn tighten(&mut self, col: Col, lo: Option<f64>, up: Option<f64>, row: usize) -> bool {
        if let Some(l) = lo {
            if l > self.lb[col] {
                self.lb[col] = l;
            }
        }
        if let Some(u) = up {
            if u < self.ub[col] {
                self.ub[col] = u;
            }
        }
        if self.lb[col] > self.ub[col] + PRESOLVE_TOL * (1.0 + self.ub[col].abs()) {
            self.infeasible_ray = Some(vec![(row, 1.0)]);
            return false;
        }
        if matches!(self.state[col], ColState::Live) && self.lb[col] >= self.ub[col] {
            let v = 0.5 * (self.lb[col] + self.ub[col]);
            self.mark_fixed(col, v);
        }
        true
    }

    fn run(prog: &ConicProgram) -> Self {
        let n = prog.num_cols();
        let mut st = Presolve {
            state: vec![ColState::Live; n],
            lb: prog.lower.clone(),
            ub: prog.upper.clone(),
            dropped: vec![false; prog.rows.len()],
            infeasible_ray: None,
        };
        for c in 0..n {
            if st.lb[c] == st.ub[c] {
                st.state[c] = ColState::Fixed(st.lb[c]);
            }
        }
        for _pass in 0..64 {
            let mut changed = false;
            for (ri, row) in prog.rows.iter().enumerate() {
                if st.dropped[ri] || st.infeasible_ray.is_some() {
                    continue;
                }
                let e = st.resolve_expr(&row.expr);
                let rhs = row.rhs - e.constant;
                match e.terms.len() {
                    0 => {
                        let bad = match row.sense {
                            Sense::Eq => rhs.abs() > PRESOLVE_TOL,
                            Sense::Le => rhs < -PRESOLVE_TOL,
                            Sense::Ge => rhs > PRESOLVE_TOL,
                        };
                        if bad {
                            let w = if row.sense == Sense::Ge { -1.0 } else { 1.0 };
                            st.infeasible_ray = Some(vec![(ri, w)]);
                        }
                        st.dropped[ri] = true;
                        changed = true;
                    }
                    1 => {
                        let (c, coef) = e.terms[0];
                        let r = rhs / coef;
                        let (lo, up) = match (row.sense, coef > 0.0) {
                            (Sense::Eq, _) => (Some(r), Some(r)),
                            (Sense::Le, true) | (Sense::Ge, false) => (None, Some(r)),
                            (Sense::Le, false) | (Sense::Ge, true) => (Some(r), None),
                        };
                        st.dropped[ri] = true;
                        changed = true;
                        if !st.tighten(c, lo, up, ri) {
                            break;
                        }
                    }
                    2 if row.sense == Sense::Eq => {
                        // Alias: eliminate the higher-index root.
                        let (c1, a1) = e.terms[0];
                        let (c2, a2) = e.terms[1];
                        let ((keep, ak), (drop, ad)) =
                            if c1 < c2 { ((c1, a1), (c2, a2)) } else { ((c2, a2), (c1, a1)) };
                        // Avoid wild coefficient ratios.
                        if ad.abs() < 1e-8 * ak.abs() {
                            continue;
                        }
                        // drop = (rhs - ak * keep) / ad
                        let coef = -ak / ad;
                        let cst = rhs / ad;
                        // Fold drop's bounds into keep.
                        let (dl, du) = (st.lb[drop], st.ub[drop]);
                        let (implied_lo, implied_up) = if coef > 0.0 {
                            ((dl - cst) / coef, (du - cst) / coef)
                        } else {
                            ((du - cst) / coef, (dl - cst) / coef)
                        };
                        st.state[drop] = ColState::Alias { coef, of: keep, constant: cst };
                        st.dropped[ri] = true;
                        changed = true;
                        let lo = implied_lo.is_finite().then_some(implied_lo);
                        let up = implied_up.is_finite().then_some(implied_up);
                        if !st.tighten(keep, lo, up, ri) {
                            break;
                        }
                    }
                    _ => {}
                }
            }
            if !changed || st.infeasible_ray.is_some() {
                break;
            }
        }
        st
    }
}

/// Lower `prog` (which must have no active binary columns) to standard form.
pub fn lower(prog: &ConicProgram) -> Result<StdForm, ProgramError> {
    prog.validate()?;
    if prog.has_binaries() {
        return Err(ProgramError::Invalid(
            "program has active binary columns; relax or fix them first".into(),
        ));
    }
    let ncols = prog.num_cols();
    let pre = Presolve::run(prog);

    let mut col_map: Vec<Option<usize>> = vec![None; ncols];
    let mut live_cols = Vec::new();
    let mut fixed_cols = Vec::new();
    let mut alias_cols = Vec::new();
    for c in 0..ncols {
        match pre.state[c] {
            ColState::Live => {
                col_map[c] = Some(live_cols.len());
                live_cols.push(c);
            }
            ColState::Fixed(v) => fixed_cols.push((c, v)),
            ColState::Alias { .. } => {
                let (coef, root, cst) = pre.resolve(c);
                alias_cols.push((c, coef, root, cst));
            }
        }
    }
    let n = live_cols.len();

    let to_solver = |e: &LinExpr| -> LinExpr {
        let resolved = pre.resolve_expr(e);
        let mut out = LinExpr::new();
        out.constant = resolved.constant;
        for &(c, v) in &resolved.terms {
            out.add_term(col_map[c].expect("resolved root is live"), v);
        }
        out.normalize();
        out
    };

    let obj = to_solver(&prog.objective);
    let mut c = vec![0.0; n];
    for &(k, v) in &obj.terms {
        c[k] += v;
    }
    let obj_const = obj.constant;

    let mut a_trip = Vec::new();
    let mut b = Vec::new();
    let mut eq_origin = Vec::new();
    let mut g_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut h = Vec::new();
    let mut ineq_origin = Vec::new();

    for (ri, row) in prog.rows.iter().enumerate() {
        if pre.dropped[ri] {
            continue;
        }
        let e = to_solver(&row.expr);
        let rhs = row.rhs - e.constant;
        if e.terms.is_empty() {
            continue;
        }
        match row.sense {
            Sense::Eq => {
                let r = b.len();
                for &(k, v) in &e.terms {
                    a_trip.push((r, k, v));
                }
                b.push(rhs);
                eq_origin.push(ri);
            }
            Sense::Le => {
                let r = h.len();
                for &(k, v) in &e.terms {
                    g_trip.push((r, k, v));
                }
                h.push(rhs);
                ineq_origin.push(IneqOrigin::Row(ri));
            }
            Sense::Ge => {
                let r = h.len();
                for &(k, v) in &e.terms {
                    g_trip.push((r, k, -v));
                }
                h.push(-rhs);
                ineq_origin.push(IneqOrigin::Row(ri));
            }
        }
    }

    // Bounds on live columns (post-tightening).
    for (k, &col) in live_cols.iter().enumerate() {
        let lo = pre.lb[col];
        let up = pre.ub[col];
        if lo.is_finite() {
            let r = h.len();
            g_trip.push((r, k, -1.0));
            h.push(-lo);
            ineq_origin.push(IneqOrigin::LowerBound(col));
        }
        if up.is_finite() {
            let r = h.len();
            g_trip.push((r, k, 1.0));
            h.push(up);
            ineq_origin.push(IneqOrigin::UpperBound(col));
        }
    }

    // Cones: substitute members, degrade boundary-pinned blocks to
    // nonnegativity rows, deduplicate identical blocks.
    let is_zero = |e: &LinExpr| e.terms.is_empty() && e.constant == 0.0;
    let mut pending: Vec<(usize, bool, Vec<LinExpr>)> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut push_member_row = |expr: &LinExpr,
                               origin: IneqOrigin,
                               g_trip: &mut Vec<(usize, usize, f64)>,
                               h: &mut Vec<f64>,
                               ineq_origin: &mut Vec<IneqOrigin>| {
        // member(x) >= 0 in G-form.
        let r = h.len();
        for &(k, v) in &expr.terms {
            g_trip.push((r, k, -v));
        }
        h.push(expr.constant);
        ineq_origin.push(origin);
    };
    for (ci, cone) in prog.cones.iter().enumerate() {
        let subs: Vec<LinExpr> = cone.members().iter().map(&to_solver).collect();
        let rotated = matches!(cone, ConeBlock::Rotated { .. });
        let quad_start = if rotated { 2 } else { 1 };
        if subs[quad_start..].iter().all(&is_zero) {
            for (idx, m) in subs[..quad_start].iter().enumerate() {
                if !is_zero(m) {
                    push_member_row(
                        m,
                        IneqOrigin::ConeMember(ci, idx),
                        &mut g_trip,
                        &mut h,
                        &mut ineq_origin,
                    );
                }
            }
            continue;
        }
        let key = format!("{}:{subs:?}", rotated as u8);
        if seen.contains_key(&key) {
            continue;
        }
        seen.insert(key, ci);
        let members = if rotated {
            let mut out = Vec::with_capacity(subs.len());
            let mut top = LinExpr::new();
            top.constant = (subs[0].constant + subs[1].constant) * SQRT_HALF;
            for &(k, v) in subs[0].terms.iter().chain(&subs[1].terms) {
                top.add_term(k, v * SQRT_HALF);
            }
            top.normalize();
            let mut second = LinExpr::new();
            second.constant = (subs[0].constant - subs[1].constant) * SQRT_HALF;
            for &(k, v) in &subs[0].terms {
                second.add_term(k, v * SQRT_HALF);
            }
            for &(k, v) in &subs[1].terms {
                second.add_term(k, -v * SQRT_HALF);
            }
            second.normalize();
            out.push(top);
            out.push(second);
            for m in &subs[2..] {
                let mut scaled = LinExpr::new();
                scaled.constant = m.constant * std::f64::consts::SQRT_2;
                for &(k, v) in &m.terms {
                    scaled.add_term(k, v * std::f64::consts::SQRT_2);
                }
                out.push(scaled);
            }
            out
        } else {
            subs
        };
        pending.push((ci, rotated, members));
    }

    let nonneg = h.len();
    let mut socs = Vec::new();
    let mut cone_origin = Vec::new();
    for (ci, rotated, members) in pending {
        socs.push(members.len());
        cone_origin.push((ci, rotated));
        for m in &members {
            let r = h.len();
            for &(k, v) in &m.terms {
                g_trip.push((r, k, -v));
            }
            h.push(m.constant);
        }
    }

    let m = h.len();
    let p = b.len();
    Ok(StdForm {
        n,
        c,
        obj_const,
        a: CscMat::from_triplets(p, n, &a_trip),
        b,
        g: CscMat::from_triplets(m, n, &g_trip),
        h,
        dims: ConeDims { nonneg, socs },
        live_cols,
        fixed_cols,
        alias_cols,
        eq_origin,
        ineq_origin,
        cone_origin,
        infeasible_ray: pre.infeasible_ray,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_columns_are_substituted() {
        let mut p = ConicProgram::new();
        let x = p.add_col("x", 0.0, 10.0);
        let y = p.add_col("y", 3.0, 3.0);
        let mut e = LinExpr::new();
        e.add_term(x, 1.0).add_term(y, 2.0);
        p.add_row("r", e, Sense::Eq, 10.0);
        let sf = lower(&p).unwrap();
        // x + 2*3 = 10 pins x = 4 and the whole program presolves away.
        assert_eq!(sf.n, 0);
        assert!(sf.fixed_cols.contains(&(x, 4.0)));
        assert!(sf.fixed_cols.contains(&(y, 3.0)));
        assert!(sf.infeasible_ray.is_none());
        let full = sf.expand_primal(&[], 2);
        assert_eq!(full, vec![4.0, 3.0]);
    }

    #[test]
    fn alias_elimination_collapses_pairs() {
        let mut p = ConicProgram::new();
        let x = p.add_col("x", 0.0, 4.0);
        let y = p.add_col("y", 1.0, 10.0);
        let z = p.add_col("z", f64::NEG_INFINITY, f64::INFINITY);
        // y = 2x + 1, z free, z + x + y <= 7.
        let mut link = LinExpr::new();
        link.add_term(y, 1.0).add_term(x, -2.0);
        p.add_row("link", link, Sense::Eq, 1.0);
        let mut cap = LinExpr::new();
        cap.add_term(z, 1.0).add_term(x, 1.0).add_term(y, 1.0);
        p.add_row("cap", cap, Sense::Le, 7.0);
        let sf = lower(&p).unwrap();
        // y eliminated; its bounds fold into x: y >= 1 -> x >= 0.
        assert_eq!(sf.n, 2);
        assert_eq!(sf.alias_cols.len(), 1);
        assert_eq!(sf.alias_cols[0].0, y);
        // Reconstruction honors the alias.
        let full = sf.expand_primal(&[1.5, 0.0], 3);
        assert_eq!(full[y], 4.0);
        // The cap row resolved to z + 3x <= 6.
        assert_eq!(sf.b.len(), 0);
    }

    #[test]
    fn crossing_bounds_yield_a_ray() {
        let mut p = ConicProgram::new();
        let x = p.add_col("x", f64::NEG_INFINITY, f64::INFINITY);
        p.add_row("ge2", LinExpr::single(x, 1.0), Sense::Ge, 2.0);
        p.add_row("le1", LinExpr::single(x, 1.0), Sense::Le, 1.0);
        let sf = lower(&p).unwrap();
        assert!(sf.infeasible_ray.is_some());
    }

    #[test]
    fn duplicate_cones_are_merged() {
        let mut p = ConicProgram::new();
        let t = p.add_col("t", f64::NEG_INFINITY, f64::INFINITY);
        let u = p.add_col("u", f64::NEG_INFINITY, f64::INFINITY);
        let v = p.add_col("v", f64::NEG_INFINITY, f64::INFINITY);
        // v aliases to u, making the second cone a duplicate of the first.
        let mut link = LinExpr::new();
        link.add_term(v, 1.0).add_term(u, -1.0);
        p.add_row("link", link, Sense::Eq, 0.0);
        p.add_cone(ConeBlock::Soc {
            members: vec![LinExpr::single(t, 1.0), LinExpr::single(u, 1.0)],
            name: "one".into(),
        });
        p.add_cone(ConeBlock::Soc {
            members: vec![LinExpr::single(t, 1.0), LinExpr::single(v, 1.0)],
            name: "two".into(),
        });
        let sf = lower(&p).unwrap();
        assert_eq!(sf.dims.socs.len(), 1);
    }

    #[test]
    fn pinned_cone_degrades_to_rows() {
        let mut p = ConicProgram::new();
        let u = p.add_col("u", f64::NEG_INFINITY, f64::INFINITY);
        let v = p.add_col("v", f64::NEG_INFINITY, f64::INFINITY);
        let w = p.add_col("w", 0.0, 0.0);
        p.add_cone(ConeBlock::Rotated {
            members: vec![LinExpr::single(u, 1.0), LinExpr::single(v, 1.0), LinExpr::single(w, 1.0)],
            name: "rot".into(),
        });
        let sf = lower(&p).unwrap();
        assert!(sf.dims.socs.is_empty());
        // u >= 0 and v >= 0 rows.
        assert_eq!(sf.dims.nonneg, 2);
    }

    #[test]
    fn rotated_maps_to_soc() {
        // u*v >= w^2 at u=v=w=1 is tight: members map to ((u+v)/s2, (u-v)/s2, s2*w).
        let mut p = ConicProgram::new();
        let u = p.add_col("u", f64::NEG_INFINITY, f64::INFINITY);
        let v = p.add_col("v", f64::NEG_INFINITY, f64::INFINITY);
        let w = p.add_col("w", f64::NEG_INFINITY, f64::INFINITY);
        p.add_cone(ConeBlock::Rotated {
            members: vec![LinExpr::single(u, 1.0), LinExpr::single(v, 1.0), LinExpr::single(w, 1.0)],
            name: "rot".into(),
        });
        let sf = lower(&p).unwrap();
        assert_eq!(sf.dims.socs, vec![3]);
        let mut s = sf.h.clone();
        sf.g.mul_acc(-1.0, &[1.0, 1.0, 1.0], &mut s);
        assert!((s[0] - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        assert!((s[2] - std::f64::consts::SQRT_2).abs() < 1e-12);
    }
}
