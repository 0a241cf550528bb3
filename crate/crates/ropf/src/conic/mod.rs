//! Continuous SOCP solving behind a backend trait.
//!
//! The default backend is the embedded homogeneous self-dual interior-point
//! method in [`ipm`]. Any [`SocpBackend`] implementation (e.g. an adapter to
//! an external solver process or library) can replace it as long as it honors
//! the [`ConicSolution`] status contract: `Optimal` solutions satisfy the
//! primal/dual feasibility and gap tolerances of [`SolverParams`], and
//! `Infeasible` outcomes carry a Farkas certificate.

pub mod cone;
pub mod ipm;
pub mod ldl;
pub mod sparse;
pub mod stdform;

use crate::program::{ConicProgram, ProgramError, Sense};
use ipm::{IpmSettings, IpmStatus};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use stdform::IneqOrigin;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    NumericalFailure,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverParams {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iterations: usize,
    pub verbosity: u8,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self { feas_tol: 1e-8, gap_tol: 1e-8, max_iterations: 200, verbosity: 0 }
    }
}

impl SolverParams {
    /// Tolerances used by the solve pipeline (node relaxations, cut loop and
    /// recovery seeds): objective accuracy is governed by the relative gap,
    /// which stays at 1e-8; the feasibility tolerance is relaxed to 1e-6,
    /// where the interior-point endgame is decisive even on the degenerate
    /// fixed-binary programs.
    pub fn pipeline() -> Self {
        Self { feas_tol: 1e-6, gap_tol: 1e-8, max_iterations: 200, verbosity: 0 }
    }
}

/// Farkas certificate of primal infeasibility: multipliers on rows proving
/// no feasible point exists (`sum duals * rows` is inconsistent).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FarkasRay {
    /// Dual ray value per original program row (same sign convention as
    /// `row_duals`).
    pub row_duals: Vec<f64>,
    /// Certificate residual; at most `feas_tol` by the status contract.
    pub violation: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConicSolution {
    pub status: SolveStatus,
    /// Primal value per program column.
    pub primal: Vec<f64>,
    /// Dual per program row: Lagrangian convention
    /// `obj + sum d_r (expr_r - rhs_r)` stationary, `d >= 0` on `Le`,
    /// `d <= 0` on `Ge`.
    pub row_duals: Vec<f64>,
    /// Dual block per cone, mapped back through the rotated-cone transform.
    pub cone_duals: Vec<Vec<f64>>,
    /// Cone member values at the primal point (slack geometry).
    pub cone_slacks: Vec<Vec<f64>>,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub solve_time_s: f64,
    pub farkas: Option<FarkasRay>,
}

/// Structurally invalid input; a hard error distinct from any numerical
/// solve status.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid program: {0}")]
    InvalidProgram(#[from] ProgramError),
}

/// Interior starting point hint produced by [`warm_hint`]. Backends may
/// ignore it; correctness never depends on it.
#[derive(Clone, Debug)]
pub struct StartingPoint {
    pub primal: Vec<f64>,
    pub cone_slacks: Vec<Vec<f64>>,
}

pub trait SocpBackend {
    fn name(&self) -> &str;
    fn solve(
        &self,
        program: &ConicProgram,
        params: &SolverParams,
        hint: Option<&StartingPoint>,
    ) -> Result<ConicSolution, SolveError>;
}

/// The embedded interior-point backend.
///
/// Homogeneous self-dual with Nesterov-Todd scaling; stateless across solves
/// (each call performs its own symbolic analysis), hence trivially usable
/// from multiple threads on distinct programs. Starting-point hints are
/// accepted and ignored: cold starts keep the homogeneous embedding's
/// infeasibility detection intact.
#[derive(Clone, Copy, Debug, Default)]
pub struct EmbeddedIpm;

impl SocpBackend for EmbeddedIpm {
    fn name(&self) -> &str {
        "embedded-hsd-ipm"
    }

    fn solve(
        &self,
        program: &ConicProgram,
        params: &SolverParams,
        _hint: Option<&StartingPoint>,
    ) -> Result<ConicSolution, SolveError> {
        let start = Instant::now();
        let sf = stdform::lower(program)?;

        if let Some(proof) = &sf.infeasible_ray {
            let mut ray = vec![0.0; program.rows.len()];
            for &(ri, w) in proof {
                ray[ri] = w;
            }
            return Ok(ConicSolution {
                status: SolveStatus::Infeasible,
                primal: vec![0.0; program.num_cols()],
                row_duals: vec![0.0; program.rows.len()],
                cone_duals: vec![Vec::new(); program.cones.len()],
                cone_slacks: vec![Vec::new(); program.cones.len()],
                objective: f64::INFINITY,
                dual_objective: f64::INFINITY,
                iterations: 0,
                solve_time_s: start.elapsed().as_secs_f64(),
                farkas: Some(FarkasRay { row_duals: ray, violation: 0.0 }),
            });
        }

        // Fully presolved programs are decided by inspection.
        if sf.n == 0 {
            let primal = sf.expand_primal(&[], program.num_cols());
            let viol = program.max_violation(&primal);
            let status = if viol <= params.feas_tol.max(1e-12) {
                SolveStatus::Optimal
            } else {
                SolveStatus::Infeasible
            };
            let objective = program.objective.eval(&primal);
            return Ok(ConicSolution {
                status,
                cone_slacks: cone_member_values(program, &primal),
                primal,
                row_duals: vec![0.0; program.rows.len()],
                cone_duals: vec![Vec::new(); program.cones.len()],
                objective,
                dual_objective: objective,
                iterations: 0,
                solve_time_s: start.elapsed().as_secs_f64(),
                farkas: None,
            });
        }

        let settings = IpmSettings {
            feas_tol: params.feas_tol,
            gap_tol: params.gap_tol,
            max_iterations: params.max_iterations,
            verbose: params.verbosity > 1,
        };
        let (res, sf) = ipm::solve(sf, &settings);

        let status = match res.status {
            IpmStatus::Optimal => SolveStatus::Optimal,
            IpmStatus::PrimalInfeasible => SolveStatus::Infeasible,
            IpmStatus::DualInfeasible => SolveStatus::Unbounded,
            IpmStatus::IterationLimit => SolveStatus::IterationLimit,
            IpmStatus::NumericalFailure => SolveStatus::NumericalFailure,
        };

        let primal = sf.expand_primal(&res.x, program.num_cols());

        // Map duals back: y over equality rows, z over inequality rows and
        // cones; bound-row duals stay internal.
        let mut row_duals = vec![0.0; program.rows.len()];
        for (k, &ri) in sf.eq_origin.iter().enumerate() {
            row_duals[ri] = res.y[k];
        }
        for (k, origin) in sf.ineq_origin.iter().enumerate() {
            if let IneqOrigin::Row(ri) = origin {
                row_duals[*ri] = match program.rows[*ri].sense {
                    Sense::Le => res.z[k],
                    Sense::Ge => -res.z[k],
                    Sense::Eq => unreachable!(),
                };
            }
        }
        let mut cone_duals = vec![Vec::new(); program.cones.len()];
        let mut off = sf.dims.nonneg;
        for (block, &(ci, rotated)) in sf.dims.socs.iter().zip(&sf.cone_origin) {
            let zb = &res.z[off..off + block];
            cone_duals[ci] = if rotated {
                let mut d = Vec::with_capacity(zb.len());
                let s2 = std::f64::consts::FRAC_1_SQRT_2;
                d.push((zb[0] + zb[1]) * s2);
                d.push((zb[0] - zb[1]) * s2);
                for v in &zb[2..] {
                    d.push(v * std::f64::consts::SQRT_2);
                }
                d
            } else {
                zb.to_vec()
            };
            off += block;
        }

        let farkas = if status == SolveStatus::Infeasible {
            let mut ray = vec![0.0; program.rows.len()];
            for (k, &ri) in sf.eq_origin.iter().enumerate() {
                ray[ri] = res.y[k];
            }
            for (k, origin) in sf.ineq_origin.iter().enumerate() {
                if let IneqOrigin::Row(ri) = origin {
                    ray[*ri] = match program.rows[*ri].sense {
                        Sense::Le => res.z[k],
                        Sense::Ge => -res.z[k],
                        Sense::Eq => unreachable!(),
                    };
                }
            }
            Some(FarkasRay { row_duals: ray, violation: res.certificate_violation })
        } else {
            None
        };

        let objective = if res.obj.is_finite() { res.obj + sf.obj_const } else { res.obj };
        let dual_objective =
            if res.dual_obj.is_finite() { res.dual_obj + sf.obj_const } else { res.dual_obj };

        Ok(ConicSolution {
            status,
            cone_slacks: cone_member_values(program, &primal),
            primal,
            row_duals,
            cone_duals,
            objective,
            dual_objective,
            iterations: res.iterations,
            solve_time_s: start.elapsed().as_secs_f64(),
            farkas,
        })
    }
}

fn cone_member_values(program: &ConicProgram, x: &[f64]) -> Vec<Vec<f64>> {
    program
        .cones
        .iter()
        .map(|c| c.members().iter().map(|m| m.eval(x)).collect())
        .collect()
}

/// Solve a continuous conic program with the default embedded backend.
pub fn solve_socp(program: &ConicProgram, params: &SolverParams) -> Result<ConicSolution, SolveError> {
    EmbeddedIpm.solve(program, params, None)
}

/// Strictly cone-interior starting point derived from a parent solution, for
/// initializing a child solve. Returns `None` unless the parent is optimal.
pub fn warm_hint(solution: &ConicSolution) -> Option<StartingPoint> {
    const MARGIN: f64 = 1e-6;
    if solution.status != SolveStatus::Optimal {
        return None;
    }
    let mut slacks = solution.cone_slacks.clone();
    for block in slacks.iter_mut() {
        if block.is_empty() {
            continue;
        }
        // Treat every block through its SOC geometry (rotated blocks get the
        // equivalent shift on the first two members).
        let tail: f64 = block[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if block[0] < tail + MARGIN {
            block[0] = tail + MARGIN;
        }
    }
    Some(StartingPoint { primal: solution.primal.clone(), cone_slacks: slacks })
}

/// Cone-tightness flag: every rotated consistency cone holds with equality to
/// within `eps` relative, i.e. `m2..^2 >= (1 - eps) * m0 * m1`.
pub fn cone_tight(slacks: &[Vec<f64>], eps: f64) -> bool {
    slacks.iter().all(|block| {
        if block.len() < 3 {
            return true;
        }
        let quad: f64 = block[2..].iter().map(|v| v * v).sum();
        quad >= (1.0 - eps) * block[0] * block[1]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{ConeBlock, LinExpr};
    use approx::assert_relative_eq;

    fn free() -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    #[test]
    fn norm_epigraph() {
        // min x s.t. ||y|| <= x, y = 3  ->  objective 3.
        let mut p = ConicProgram::new();
        let (lo, up) = free();
        let x = p.add_col("x", lo, up);
        let y = p.add_col("y", lo, up);
        p.objective = LinExpr::single(x, 1.0);
        p.add_row("fix_y", LinExpr::single(y, 1.0), Sense::Eq, 3.0);
        p.add_cone(ConeBlock::Soc {
            members: vec![LinExpr::single(x, 1.0), LinExpr::single(y, 1.0)],
            name: "epi".into(),
        });
        let sol = solve_socp(&p, &SolverParams::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.objective, 3.0, epsilon = 1e-6);
        assert_relative_eq!(sol.primal[x], 3.0, epsilon = 1e-6);
        assert!(sol.dual_objective <= sol.objective + 1e-7);
    }

    #[test]
    fn rotated_symmetry() {
        // min u s.t. u*v >= w^2, u = v, w = 1  ->  u = 1.
        let mut p = ConicProgram::new();
        let (lo, up) = free();
        let u = p.add_col("u", lo, up);
        let v = p.add_col("v", lo, up);
        let w = p.add_col("w", 1.0, 1.0);
        p.objective = LinExpr::single(u, 1.0);
        let mut eq = LinExpr::new();
        eq.add_term(u, 1.0).add_term(v, -1.0);
        p.add_row("u_eq_v", eq, Sense::Eq, 0.0);
        p.add_cone(ConeBlock::Rotated {
            members: vec![
                LinExpr::single(u, 1.0),
                LinExpr::single(v, 1.0),
                LinExpr::single(w, 1.0),
            ],
            name: "rot".into(),
        });
        let sol = solve_socp(&p, &SolverParams::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.objective, 1.0, epsilon = 1e-6);
        assert_relative_eq!(sol.primal[v], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn infeasible_with_certificate() {
        // x >= 2 and x <= 1.
        let mut p = ConicProgram::new();
        let x = p.add_col("x", f64::NEG_INFINITY, f64::INFINITY);
        p.add_row("ge2", LinExpr::single(x, 1.0), Sense::Ge, 2.0);
        p.add_row("le1", LinExpr::single(x, 1.0), Sense::Le, 1.0);
        let sol = solve_socp(&p, &SolverParams::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
        let ray = sol.farkas.expect("certificate attached");
        assert!(ray.violation <= 1e-8);
    }

    #[test]
    fn unbounded_detected() {
        let mut p = ConicProgram::new();
        let x = p.add_col("x", f64::NEG_INFINITY, f64::INFINITY);
        p.objective = LinExpr::single(x, 1.0);
        p.add_row("le", LinExpr::single(x, 1.0), Sense::Le, 5.0);
        let sol = solve_socp(&p, &SolverParams::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Unbounded);
    }

    #[test]
    fn lp_corner() {
        // min -x - 2y s.t. x + y <= 4, x <= 3, y <= 2, x,y >= 0 -> (2,2), obj -6.
        let mut p = ConicProgram::new();
        let x = p.add_col("x", 0.0, 3.0);
        let y = p.add_col("y", 0.0, 2.0);
        let mut obj = LinExpr::new();
        obj.add_term(x, -1.0).add_term(y, -2.0);
        p.objective = obj;
        let mut row = LinExpr::new();
        row.add_term(x, 1.0).add_term(y, 1.0);
        p.add_row("cap", row, Sense::Le, 4.0);
        let sol = solve_socp(&p, &SolverParams::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.objective, -6.0, epsilon = 1e-6);
        assert_relative_eq!(sol.primal[x], 2.0, epsilon = 1e-5);
        // Deterministic: a second solve reproduces the objective exactly.
        let sol2 = solve_socp(&p, &SolverParams::default()).unwrap();
        assert!((sol.objective - sol2.objective).abs() < 1e-10);
    }

    #[test]
    fn hard_error_on_dangling_column() {
        let mut p = ConicProgram::new();
        p.add_col("x", 0.0, 1.0);
        p.add_row("bad", LinExpr::single(7, 1.0), Sense::Eq, 0.0);
        assert!(matches!(
            solve_socp(&p, &SolverParams::default()),
            Err(SolveError::InvalidProgram(_))
        ));
    }

    #[test]
    fn warm_hint_is_interior() {
        let mut p = ConicProgram::new();
        let x = p.add_col("x", f64::NEG_INFINITY, f64::INFINITY);
        let y = p.add_col("y", f64::NEG_INFINITY, f64::INFINITY);
        p.objective = LinExpr::single(x, 1.0);
        p.add_row("fix_y", LinExpr::single(y, 1.0), Sense::Eq, 3.0);
        p.add_cone(ConeBlock::Soc {
            members: vec![LinExpr::single(x, 1.0), LinExpr::single(y, 1.0)],
            name: "epi".into(),
        });
        let sol = solve_socp(&p, &SolverParams::default()).unwrap();
        let hint = warm_hint(&sol).unwrap();
        for block in &hint.cone_slacks {
            let tail: f64 = block[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(block[0] - tail >= 1e-6 - 1e-12);
        }
        // No hint from a non-optimal parent.
        let mut inf = ConicProgram::new();
        let z = inf.add_col("z", f64::NEG_INFINITY, f64::INFINITY);
        inf.add_row("ge", LinExpr::single(z, 1.0), Sense::Ge, 2.0);
        inf.add_row("le", LinExpr::single(z, 1.0), Sense::Le, 1.0);
        let bad = solve_socp(&inf, &SolverParams::default()).unwrap();
        assert!(warm_hint(&bad).is_none());
    }
}
