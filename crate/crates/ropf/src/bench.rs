//! Batch harness: run the full lower-bound / upper-bound pipeline on case
//! files and emit report tables.
//!
//! One instance run is: parse, attach catalogs, build the chosen relaxation,
//! strengthen the root with separation cuts (`misocpa_plus` only), solve the
//! mixed-integer relaxation by branch-and-bound with feasibility recovery as
//! the incumbent source, and report `LB`, `UB`, `%Gap = 100 (1 - LB/UB)`,
//! wall time (parsing excluded), node and cut counts.

use crate::bnb::{self, BnbParams, MisocpStatus};
use crate::case_io::{self, RopfInstance, ShuntRule, TapRule};
use crate::conic::SolverParams;
use crate::cuts;
use crate::formulation::{
    self, BuildOptions, CatalogChoice, RelaxationMode, VariableMap,
};
use crate::program::ConicProgram;
use crate::recovery::{self, PfOptions};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub case_name: String,
    pub case_text: String,
    pub shunt_values: Vec<f64>,
    pub tap_values: Vec<f64>,
    pub shunt_rule: ShuntRule,
    pub tap_rule: TapRule,
    pub mode: RelaxationMode,
    pub cut_rounds: usize,
    pub solver: SolverParams,
    pub mip_gap_tol: f64,
    pub node_limit: usize,
    pub time_limit: Option<Duration>,
}

impl RunConfig {
    pub fn new(case_name: impl Into<String>, case_text: impl Into<String>) -> Self {
        Self {
            case_name: case_name.into(),
            case_text: case_text.into(),
            shunt_values: vec![0.0, 1.0],
            tap_values: vec![0.9, 0.95, 1.0, 1.05, 1.1],
            shunt_rule: ShuntRule::ExistingShunts,
            tap_rule: TapRule::Transformers,
            mode: RelaxationMode::MisocpaPlus,
            cut_rounds: 5,
            solver: SolverParams::pipeline(),
            mip_gap_tol: 1e-6,
            node_limit: 100_000,
            time_limit: None,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.mode == RelaxationMode::MisocpaPlus && self.cut_rounds == 0 {
            return Err(BenchError::BadConfig(
                "misocpa_plus requires at least one cut round".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub case: String,
    pub lb: Option<f64>,
    pub ub: Option<f64>,
    pub gap_percent: Option<f64>,
    pub time_s: f64,
    pub nodes: usize,
    pub cuts: usize,
    pub recovery: String,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Case(#[from] case_io::CaseError),
    #[error(transparent)]
    Formulation(#[from] formulation::FormulationError),
    #[error("branch and bound: {0}")]
    Bnb(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Report(String),
}

/// Percentage optimality gap `100 (1 - lb/ub)`; negative values (numerical
/// lower-bound overshoot) clamp to zero with a warning.
pub fn gap(lb: f64, ub: f64) -> Result<f64, BenchError> {
    if ub <= 0.0 {
        return Err(BenchError::Report(format!("gap undefined for ub = {ub}")));
    }
    let g = 100.0 * (1.0 - lb / ub);
    if g < 0.0 {
        log::warn!("lower bound {lb} exceeds upper bound {ub}; clamping gap to 0");
        return Ok(0.0);
    }
    Ok(g)
}

/// Build-and-prepare stage shared by the harness and the tests: returns the
/// (possibly cut-augmented) mixed-integer program, the variable map and the
/// instance.
pub fn prepare(
    config: &RunConfig,
) -> Result<(RopfInstance, ConicProgram, VariableMap, usize), BenchError> {
    config.validate()?;
    let network = case_io::parse_matpower(&config.case_text)?;
    let instance = case_io::attach_catalogs(
        &network,
        &config.shunt_values,
        &config.tap_values,
        &config.shunt_rule,
        &config.tap_rule,
    )?;
    let bounds = formulation::compute_bounds(&instance)?;
    let (program, vmap) =
        formulation::build_misocp(&instance, &bounds, &BuildOptions { mode: config.mode })?;
    let mut cuts_added = 0;
    let program = if config.mode == RelaxationMode::MisocpaPlus {
        let loop_result = cuts::root_cut_loop(
            &program,
            &vmap,
            &instance,
            &bounds,
            config.cut_rounds,
            &config.solver,
        );
        for (entry, cut) in loop_result.log.iter().zip(&loop_result.cuts) {
            log::debug!("{}", entry.audit_line(cut, &program));
        }
        cuts_added = loop_result.cuts.len();
        cuts::apply_cuts(&program, &loop_result.cuts)
    } else {
        program
    };
    Ok((instance, program, vmap, cuts_added))
}

/// Catalog choice corresponding to a branch-and-bound assignment, using the
/// group registration order (shunt groups first, then tap groups, both in
/// ascending index order).
pub fn choice_from_assignment(instance: &RopfInstance, assignment: &bnb::Assignment) -> CatalogChoice {
    let mut choice = CatalogChoice::default();
    let mut gi = 0;
    for &bus in instance.shunt_catalog.keys() {
        choice.shunt.insert(bus, assignment[&gi]);
        gi += 1;
    }
    for &branch in instance.tap_catalog.keys() {
        choice.tap.insert(branch, assignment[&gi]);
        gi += 1;
    }
    choice
}

/// Run the full pipeline on one configured instance.
///
/// Wall time excludes parsing; any stage failure is recorded in the row's
/// recovery column with whatever partial results exist.
pub fn run_instance(config: &RunConfig) -> Result<ReportRow, BenchError> {
    let (instance, program, vmap, cuts_added) = prepare(config)?;
    let start = Instant::now();

    let bnb_params = BnbParams {
        mip_gap_tol: config.mip_gap_tol,
        node_limit: config.node_limit,
        time_limit: config.time_limit,
        solver: config.solver.clone(),
        ..BnbParams::default()
    };
    let pf_opts = PfOptions::default();
    let mut recovery_notes: Vec<String> = Vec::new();
    let solver = config.solver.clone();

    let result = {
        let mut callback = |assignment: &bnb::Assignment| -> Option<f64> {
            let choice = choice_from_assignment(&instance, assignment);
            match recovery::evaluate_ub(&instance, &program, &vmap, &choice, &solver, &pf_opts) {
                Ok(ub) if ub.feasible => Some(ub.cost),
                Ok(ub) => {
                    recovery_notes.push(format!(
                        "infeasible point (worst violation {:.2e})",
                        ub.report.worst()
                    ));
                    None
                }
                Err(e) => {
                    recovery_notes.push(e.to_string());
                    None
                }
            }
        };
        bnb::solve_misocp(&program, &mut callback, &bnb_params)
            .map_err(|e| BenchError::Bnb(e.to_string()))?
    };

    let time_s = start.elapsed().as_secs_f64();
    let lb = match result.status {
        MisocpStatus::Infeasible => None,
        _ => Some(result.lower_bound),
    };
    let ub = result.incumbent_ub;
    let gap_percent = match (lb, ub) {
        (Some(l), Some(u)) if u > 0.0 => Some(gap(l, u)?),
        _ => None,
    };
    let recovery = if ub.is_some() {
        "pf".to_string()
    } else if let Some(last) = recovery_notes.last() {
        format!("failed: {last}")
    } else if result.status == MisocpStatus::Infeasible {
        "relaxation infeasible".to_string()
    } else {
        "no integral assignment reached".to_string()
    };

    Ok(ReportRow {
        case: config.case_name.clone(),
        lb,
        ub,
        gap_percent,
        time_s,
        nodes: result.node_count,
        cuts: cuts_added,
        recovery,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

fn case_group(name: &str) -> &'static str {
    if name.ends_with("_api") || name.contains("_api_") {
        "api"
    } else if name.ends_with("_sad") || name.contains("_sad_") {
        "sad"
    } else {
        "typical"
    }
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_default()
}

/// Group averages in input order: (group name, mean time, mean gap over rows
/// with a gap, rows lacking a gap).
struct GroupSummary {
    name: String,
    rows: Vec<ReportRow>,
    mean_time: f64,
    mean_gap: Option<f64>,
    excluded: Vec<String>,
}

fn summarize(rows: &[ReportRow]) -> Vec<GroupSummary> {
    let mut groups: Vec<GroupSummary> = Vec::new();
    for row in rows {
        let g = case_group(&row.case);
        if groups.last().map(|s| s.name != g).unwrap_or(true) {
            groups.push(GroupSummary {
                name: g.to_string(),
                rows: Vec::new(),
                mean_time: 0.0,
                mean_gap: None,
                excluded: Vec::new(),
            });
        }
        groups.last_mut().unwrap().rows.push(row.clone());
    }
    for s in groups.iter_mut() {
        s.mean_time = s.rows.iter().map(|r| r.time_s).sum::<f64>() / s.rows.len() as f64;
        let with_gap: Vec<f64> = s.rows.iter().filter_map(|r| r.gap_percent).collect();
        if !with_gap.is_empty() {
            s.mean_gap = Some(with_gap.iter().sum::<f64>() / with_gap.len() as f64);
        }
        s.excluded =
            s.rows.iter().filter(|r| r.gap_percent.is_none()).map(|r| r.case.clone()).collect();
    }
    groups
}

/// Emit the report in the requested format.
///
/// CSV is RFC-4180 (CRLF records); markdown is a pipe table; JSON is the
/// bare array of rows (round-trips to identical `ReportRow`s). Each case
/// group is followed by an `Average` row over its time and gap columns;
/// rows without an upper bound have a blank gap, are excluded from the
/// average, and are footnoted.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat, out: &mut dyn Write) -> Result<(), BenchError> {
    if rows.is_empty() {
        return Err(BenchError::Report("no rows to report".into()));
    }
    match format {
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(rows)
                .map_err(|e| BenchError::Report(e.to_string()))?;
            out.write_all(text.as_bytes())?;
            out.write_all(b"\n")?;
        }
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(out);
            w.write_record([
                "Case", "LB", "Time", "UB", "%Gap", "Nodes", "Cuts", "Recovery",
            ])
            .map_err(|e| BenchError::Report(e.to_string()))?;
            for s in summarize(rows) {
                for r in &s.rows {
                    w.write_record([
                        r.case.clone(),
                        fmt_opt(r.lb, 2),
                        format!("{:.2}", r.time_s),
                        fmt_opt(r.ub, 2),
                        fmt_opt(r.gap_percent, 2),
                        r.nodes.to_string(),
                        r.cuts.to_string(),
                        r.recovery.clone(),
                    ])
                    .map_err(|e| BenchError::Report(e.to_string()))?;
                }
                w.write_record([
                    format!("Average ({})", s.name),
                    String::new(),
                    format!("{:.2}", s.mean_time),
                    String::new(),
                    fmt_opt(s.mean_gap, 2),
                    String::new(),
                    String::new(),
                    if s.excluded.is_empty() {
                        String::new()
                    } else {
                        format!("excluded: {}", s.excluded.join(" "))
                    },
                ])
                .map_err(|e| BenchError::Report(e.to_string()))?;
            }
            w.flush()?;
        }
        ReportFormat::Markdown => {
            writeln!(out, "| Case | LB | Time | UB | %Gap |")?;
            writeln!(out, "|------|----|------|----|------|")?;
            let mut footnotes = Vec::new();
            for s in summarize(rows) {
                for r in &s.rows {
                    writeln!(
                        out,
                        "| {} | {} | {:.2} | {} | {}{} |",
                        r.case,
                        fmt_opt(r.lb, 2),
                        r.time_s,
                        fmt_opt(r.ub, 2),
                        fmt_opt(r.gap_percent, 2),
                        if r.gap_percent.is_none() { " [^nb]" } else { "" },
                    )?;
                }
                writeln!(
                    out,
                    "| **Average ({})** |  | **{:.2}** |  | **{}** |",
                    s.name,
                    s.mean_time,
                    fmt_opt(s.mean_gap, 2)
                )?;
                footnotes.extend(s.excluded);
            }
            if !footnotes.is_empty() {
                writeln!(
                    out,
                    "\n[^nb]: no feasible upper bound recovered ({}); excluded from averages.",
                    footnotes.join(", ")
                )?;
            }
        }
    }
    Ok(())
}

/// Parsed rows from a JSON report (round-trip check support).
pub fn rows_from_json(text: &str) -> Result<Vec<ReportRow>, BenchError> {
    serde_json::from_str(text).map_err(|e| BenchError::Report(e.to_string()))
}

/// Exhaustive assignment enumeration (oracle for small instances): the
/// minimum over all full assignments of the fixed-assignment relaxation,
/// with the minimizing assignment.
pub fn enumerate_assignments(
    instance: &RopfInstance,
    program: &ConicProgram,
    vmap: &VariableMap,
    solver: &SolverParams,
) -> Result<(f64, BTreeMap<usize, usize>), BenchError> {
    let group_sizes: Vec<usize> = instance
        .shunt_catalog
        .values()
        .map(|c| c.len())
        .chain(instance.tap_catalog.values().map(|c| c.len()))
        .collect();
    if group_sizes.is_empty() {
        let relaxed = formulation::relax_integrality(program);
        let sol = crate::conic::solve_socp(&relaxed, solver)
            .map_err(|e| BenchError::Bnb(e.to_string()))?;
        return Ok((sol.objective, BTreeMap::new()));
    }
    let mut best = f64::INFINITY;
    let mut best_sel = BTreeMap::new();
    let total: usize = group_sizes.iter().product();
    for flat in 0..total {
        let mut rem = flat;
        let mut assignment = BTreeMap::new();
        for (gi, &sz) in group_sizes.iter().enumerate() {
            assignment.insert(gi, rem % sz);
            rem /= sz;
        }
        let cols = bnb::assignment_to_columns(program, &assignment);
        let fixed = formulation::fix_binaries(program, &cols)?;
        let sol = crate::conic::solve_socp(&fixed, solver)
            .map_err(|e| BenchError::Bnb(e.to_string()))?;
        if sol.status == crate::conic::SolveStatus::Optimal && sol.objective < best {
            best = sol.objective;
            best_sel = assignment;
        }
        let _ = vmap;
    }
    Ok((best, best_sel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(case: &str, lb: f64, ub: Option<f64>, t: f64) -> ReportRow {
        let gap_percent = ub.map(|u| gap(lb, u).unwrap());
        ReportRow {
            case: case.into(),
            lb: Some(lb),
            ub,
            gap_percent,
            time_s: t,
            nodes: 1,
            cuts: 0,
            recovery: "pf".into(),
        }
    }

    #[test]
    fn gap_examples() {
        approx::assert_relative_eq!(gap(16395.73, 17551.89).unwrap(), 6.59, epsilon = 0.005);
        approx::assert_relative_eq!(gap(5.0, 5.0).unwrap(), 0.0, epsilon = 1e-12);
        approx::assert_relative_eq!(gap(5769.87, 5812.64).unwrap(), 0.74, epsilon = 0.005);
        assert_eq!(gap(5.0001, 5.0).unwrap(), 0.0); // clamp
        assert!(gap(1.0, 0.0).is_err());
    }

    #[test]
    fn report_layout() {
        let rows = vec![
            row("case_a", 95.0, Some(100.0), 1.0),
            row("case_b", 99.0, Some(100.0), 3.0),
            row("case_c_api", 50.0, None, 2.0),
        ];
        let mut buf = Vec::new();
        emit_report(&rows, ReportFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\r\n"));
        assert!(text.starts_with("Case,LB,Time,UB,%Gap"));
        // Typical group average of 5.00 and 1.00 percent gaps = 3.00.
        assert!(text.contains("Average (typical),,2.00,,3.00"), "{text}");
        // Failed row footnoted, gap blank, excluded from its group average.
        assert!(text.contains("excluded: case_c_api"));

        let mut md = Vec::new();
        emit_report(&rows, ReportFormat::Markdown, &mut md).unwrap();
        let md = String::from_utf8(md).unwrap();
        assert!(md.contains("| Case | LB | Time | UB | %Gap |"));
        assert!(md.contains("[^nb]"));

        let mut js = Vec::new();
        emit_report(&rows, ReportFormat::Json, &mut js).unwrap();
        let back = rows_from_json(&String::from_utf8(js).unwrap()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn single_row_has_average() {
        let rows = vec![row("one", 10.0, Some(10.0), 0.5)];
        let mut buf = Vec::new();
        emit_report(&rows, ReportFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.matches("Average").count(), 1);
    }
}
