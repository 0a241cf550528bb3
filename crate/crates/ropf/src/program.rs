//! Conic program container shared by the formulation builders, the cut
//! generators, branch-and-bound and the solver backends.
//!
//! A [`ConicProgram`] is a sparse linear objective plus linear rows, cone
//! blocks over affine expressions, variable bounds, binary flags and SOS1
//! groups. It is deliberately solver-agnostic; `conic::stdform` lowers it to
//! the standard `min c'x  s.t. Ax = b, Gx + s = h, s in K` form.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

/// Column index into a [`ConicProgram`].
pub type Col = usize;

/// Sparse affine expression `sum coef * x_col + constant`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub terms: Vec<(Col, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(value: f64) -> Self {
        Self { terms: Vec::new(), constant: value }
    }

    pub fn single(col: Col, coef: f64) -> Self {
        Self { terms: vec![(col, coef)], constant: 0.0 }
    }

    pub fn add_term(&mut self, col: Col, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.terms.push((col, coef));
        }
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(c, v)| v * x[c]).sum::<f64>() + self.constant
    }

    /// Merge duplicate columns and drop explicit zeros; sorts by column.
    pub fn normalize(&mut self) {
        self.terms.sort_by_key(|&(c, _)| c);
        let mut out: Vec<(Col, f64)> = Vec::with_capacity(self.terms.len());
        for &(c, v) in &self.terms {
            match out.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => out.push((c, v)),
            }
        }
        out.retain(|&(_, v)| v != 0.0);
        self.terms = out;
    }
}

/// Linear row sense.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

/// A linear constraint `expr (sense) rhs`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinRow {
    pub expr: LinExpr,
    pub sense: Sense,
    pub rhs: f64,
    pub name: String,
}

impl LinRow {
    /// Signed violation at `x`: positive means the row is violated.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let v = self.expr.eval(x);
        match self.sense {
            Sense::Le => v - self.rhs,
            Sense::Ge => self.rhs - v,
            Sense::Eq => (v - self.rhs).abs(),
        }
    }
}

/// Cone membership over affine expressions.
///
/// `Soc`: `members[0] >= || members[1..] ||_2`.
/// `Rotated`: `members[0] * members[1] >= sum members[2..]^2` with
/// `members[0], members[1] >= 0`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ConeBlock {
    Soc { members: Vec<LinExpr>, name: String },
    Rotated { members: Vec<LinExpr>, name: String },
}

impl ConeBlock {
    pub fn members(&self) -> &[LinExpr] {
        match self {
            ConeBlock::Soc { members, .. } | ConeBlock::Rotated { members, .. } => members,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ConeBlock::Soc { name, .. } | ConeBlock::Rotated { name, .. } => name,
        }
    }

    /// Cone residual at `x`: positive means the membership is violated.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let vals: Vec<f64> = self.members().iter().map(|e| e.eval(x)).collect();
        match self {
            ConeBlock::Soc { .. } => {
                let norm = vals[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
                norm - vals[0]
            }
            ConeBlock::Rotated { .. } => {
                let quad: f64 = vals[2..].iter().map(|v| v * v).sum();
                (quad - vals[0] * vals[1]).max(-vals[0]).max(-vals[1])
            }
        }
    }
}

/// Structural defect in a program; distinct from any numerical solve outcome.
#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("column {col} referenced in {place} does not exist (num_cols = {num_cols})")]
    DanglingColumn { col: Col, place: String, num_cols: usize },
    #[error("binary column {col} belongs to {count} SOS1 groups, expected exactly 1")]
    BinaryGroupMembership { col: Col, count: usize },
    #[error("column {col} has inverted bounds [{lo}, {up}]")]
    InvertedBounds { col: Col, lo: f64, up: f64 },
    #[error("cone block `{name}` has fewer than 2 members")]
    DegenerateCone { name: String },
    #[error("{0}")]
    Invalid(String),
}

/// A sparse conic optimization problem, possibly mixed-integer through
/// binary-flagged columns organized in SOS1 groups.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ConicProgram {
    pub col_names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub binary: Vec<bool>,
    /// Minimized objective.
    pub objective: LinExpr,
    pub rows: Vec<LinRow>,
    pub cones: Vec<ConeBlock>,
    /// Each group lists binary columns that must sum to one.
    pub sos1_groups: Vec<Vec<Col>>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_cols(&self) -> usize {
        self.col_names.len()
    }

    pub fn add_col(&mut self, name: impl Into<String>, lo: f64, up: f64) -> Col {
        self.col_names.push(name.into());
        self.lower.push(lo);
        self.upper.push(up);
        self.binary.push(false);
        self.col_names.len() - 1
    }

    pub fn add_binary_col(&mut self, name: impl Into<String>) -> Col {
        let c = self.add_col(name, 0.0, 1.0);
        self.binary[c] = true;
        c
    }

    pub fn add_row(&mut self, name: impl Into<String>, mut expr: LinExpr, sense: Sense, rhs: f64) {
        expr.normalize();
        self.rows.push(LinRow { expr, sense, rhs, name: name.into() });
    }

    pub fn add_cone(&mut self, cone: ConeBlock) {
        self.cones.push(cone);
    }

    pub fn has_binaries(&self) -> bool {
        self.binary.iter().any(|&b| b)
    }

    /// Structural validation per the program invariants: every referenced
    /// column exists, bounds are ordered, and every binary column sits in
    /// exactly one SOS1 group.
    pub fn validate(&self) -> Result<(), ProgramError> {
        let n = self.num_cols();
        let check_expr = |expr: &LinExpr, place: &str| -> Result<(), ProgramError> {
            for &(c, _) in &expr.terms {
                if c >= n {
                    return Err(ProgramError::DanglingColumn {
                        col: c,
                        place: place.to_string(),
                        num_cols: n,
                    });
                }
            }
            Ok(())
        };
        check_expr(&self.objective, "objective")?;
        for row in &self.rows {
            check_expr(&row.expr, &format!("row `{}`", row.name))?;
        }
        for cone in &self.cones {
            if cone.members().len() < 2 {
                return Err(ProgramError::DegenerateCone { name: cone.name().to_string() });
            }
            for m in cone.members() {
                check_expr(m, &format!("cone `{}`", cone.name()))?;
            }
        }
        for (c, (&lo, &up)) in self.lower.iter().zip(&self.upper).enumerate() {
            if lo > up {
                return Err(ProgramError::InvertedBounds { col: c, lo, up });
            }
        }
        let mut membership = vec![0usize; n];
        for group in &self.sos1_groups {
            for &c in group {
                if c >= n {
                    return Err(ProgramError::DanglingColumn {
                        col: c,
                        place: "sos1 group".to_string(),
                        num_cols: n,
                    });
                }
                membership[c] += 1;
            }
        }
        for (c, &flag) in self.binary.iter().enumerate() {
            if flag && membership[c] != 1 {
                return Err(ProgramError::BinaryGroupMembership { col: c, count: membership[c] });
            }
        }
        Ok(())
    }

    /// Worst violation of all rows, cones and bounds at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for row in &self.rows {
            worst = worst.max(row.violation(x));
        }
        for cone in &self.cones {
            worst = worst.max(cone.violation(x));
        }
        for (c, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[c] - v);
            worst = worst.max(v - self.upper[c]);
        }
        worst
    }

    /// Self-contained text dump: one column, row or cone per line, with
    /// column names. Format:
    ///
    /// ```text
    /// conic-program v1 cols=<n> rows=<r> cones=<k>
    /// col <name> in [lo, up] (binary)?
    /// min: <affine expression>
    /// row <name>: <affine expression> (<=|=|>=) <rhs>
    /// cone (soc|rot) <name>: <expr> | <expr> | ...
    /// sos1: <col names>
    /// ```
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let expr_str = |e: &LinExpr| -> String {
            let mut s = String::new();
            for (idx, &(c, v)) in e.terms.iter().enumerate() {
                if idx > 0 {
                    s.push_str(if v >= 0.0 { " + " } else { " - " });
                    let _ = write!(s, "{}*{}", v.abs(), self.col_names[c]);
                } else {
                    let _ = write!(s, "{}*{}", v, self.col_names[c]);
                }
            }
            if e.constant != 0.0 || e.terms.is_empty() {
                if e.terms.is_empty() {
                    let _ = write!(s, "{}", e.constant);
                } else {
                    let _ = write!(s, " + {}", e.constant);
                }
            }
            s
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "conic-program v1 cols={} rows={} cones={}",
            self.num_cols(),
            self.rows.len(),
            self.cones.len()
        );
        for c in 0..self.num_cols() {
            let _ = writeln!(
                out,
                "col {} in [{}, {}]{}",
                self.col_names[c],
                self.lower[c],
                self.upper[c],
                if self.binary[c] { " binary" } else { "" }
            );
        }
        let _ = writeln!(out, "min: {}", expr_str(&self.objective));
        for row in &self.rows {
            let op = match row.sense {
                Sense::Le => "<=",
                Sense::Eq => "=",
                Sense::Ge => ">=",
            };
            let _ = writeln!(out, "row {}: {} {} {}", row.name, expr_str(&row.expr), op, row.rhs);
        }
        for cone in &self.cones {
            let kind = match cone {
                ConeBlock::Soc { .. } => "soc",
                ConeBlock::Rotated { .. } => "rot",
            };
            let members: Vec<String> = cone.members().iter().map(&expr_str).collect();
            let _ = writeln!(out, "cone {} {}: {}", kind, cone.name(), members.join(" | "));
        }
        for group in &self.sos1_groups {
            let names: Vec<&str> = group.iter().map(|&c| self.col_names[c].as_str()).collect();
            let _ = writeln!(out, "sos1: {}", names.join(" "));
        }
        out
    }

    /// Columns appearing in some term of some row/cone/objective.
    pub fn referenced_cols(&self) -> HashSet<Col> {
        let mut set = HashSet::new();
        let mut visit = |e: &LinExpr| {
            for &(c, _) in &e.terms {
                set.insert(c);
            }
        };
        visit(&self.objective);
        for r in &self.rows {
            visit(&r.expr);
        }
        for cone in &self.cones {
            for m in cone.members() {
                visit(m);
            }
        }
        set
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_merges_and_drops_zeros() {
        let mut e = LinExpr::new();
        e.add_term(3, 1.0).add_term(1, 2.0).add_term(3, -1.0).add_term(0, 0.5);
        e.normalize();
        assert_eq!(e.terms, vec![(0, 0.5), (1, 2.0)]);
    }

    #[test]
    fn validate_rejects_dangling_column() {
        let mut p = ConicProgram::new();
        p.add_col("x", 0.0, 1.0);
        p.add_row("bad", LinExpr::single(5, 1.0), Sense::Eq, 0.0);
        assert!(matches!(p.validate(), Err(ProgramError::DanglingColumn { col: 5, .. })));
    }

    #[test]
    fn validate_requires_groups_for_binaries() {
        let mut p = ConicProgram::new();
        let a = p.add_binary_col("a");
        assert!(p.validate().is_err());
        p.sos1_groups.push(vec![a]);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn cone_violation_signs() {
        let mut p = ConicProgram::new();
        let t = p.add_col("t", f64::NEG_INFINITY, f64::INFINITY);
        let y = p.add_col("y", f64::NEG_INFINITY, f64::INFINITY);
        p.add_cone(ConeBlock::Soc {
            members: vec![LinExpr::single(t, 1.0), LinExpr::single(y, 1.0)],
            name: "norm".into(),
        });
        assert!(p.cones[0].violation(&[2.0, 1.0]) < 0.0);
        assert!(p.cones[0].violation(&[1.0, 2.0]) > 0.0);
    }
}
