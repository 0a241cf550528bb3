//! MATPOWER case parsing and ROPF instance construction.
//!
//! Parses version-2 MATPOWER case files (`mpc.baseMVA`, `mpc.bus`, `mpc.gen`,
//! `mpc.branch`, optional `mpc.gencost`) into a validated per-unit
//! [`NetworkModel`], then attaches the discrete shunt/tap catalogs that turn an
//! OPF case into a ROPF instance. All powers are per-unit on `base_mva`,
//! angles in radians, and generator costs are polynomials in per-unit power
//! (the MW-coefficient of degree `k` is scaled by `base_mva^k`).

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// External bus number as it appears in the case file.
pub type BusId = i64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    /// Real / reactive load, p.u.
    pub p_load: f64,
    pub q_load: f64,
    /// Voltage magnitude bounds, p.u.
    pub v_min: f64,
    pub v_max: f64,
    /// Fixed shunt conductance, p.u.
    pub g_shunt: f64,
    /// Fixed shunt susceptance, p.u. (replaced by the catalog for buses in S).
    pub b_shunt_fixed: f64,
    pub bus_type: BusType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    /// Series impedance, p.u.
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance, p.u. (half at each terminal).
    pub b_charge: f64,
    /// Off-nominal tap ratio from the case file; 0.0 means "not a transformer".
    pub fixed_tap: f64,
    /// Apparent-power limit, p.u.; `None` = unlimited (rateA = 0).
    pub s_max: Option<f64>,
    /// Angle-difference limit, radians, in (0, pi/2].
    pub theta_max: f64,
}

impl Branch {
    /// Tap ratio to use when the branch keeps its case-file setting.
    pub fn effective_tap(&self) -> f64 {
        if self.fixed_tap == 0.0 {
            1.0
        } else {
            self.fixed_tap
        }
    }

    pub fn is_transformer(&self) -> bool {
        self.fixed_tap != 0.0
    }
}

/// Quadratic generation cost in per-unit power: `c2*p^2 + c1*p + c0` [$ per hr].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostPoly {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl CostPoly {
    pub fn eval(&self, p: f64) -> f64 {
        self.c0 + self.c1 * p + self.c2 * p * p
    }

    pub fn degree(&self) -> usize {
        if self.c2 != 0.0 {
            2
        } else if self.c1 != 0.0 {
            1
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: BusId,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost: CostPoly,
}

/// Validated per-unit network: buses, branches, generators and adjacency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    /// Branch indices incident to each bus (both directions), bus-index order.
    pub adjacency: Vec<Vec<usize>>,
}

impl NetworkModel {
    /// Map external bus ids to dense indices (position in `buses`).
    pub fn bus_index_map(&self) -> HashMap<BusId, usize> {
        self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect()
    }

    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Index of the slack bus.
    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.bus_type == BusType::Slack)
            .expect("validated model has a slack bus")
    }

    /// Generator indices attached to the given bus index.
    pub fn gens_at(&self, bus_idx: usize) -> Vec<usize> {
        let id = self.buses[bus_idx].id;
        self.generators
            .iter()
            .enumerate()
            .filter(|(_, g)| g.bus == id)
            .map(|(i, _)| i)
            .collect()
    }

    /// Endpoint bus indices of branch `k` as (from_idx, to_idx).
    pub fn branch_endpoints(&self, k: usize) -> (usize, usize) {
        let br = &self.branches[k];
        (
            self.bus_index(br.from).expect("validated endpoints"),
            self.bus_index(br.to).expect("validated endpoints"),
        )
    }

    /// Canonical JSON dump used for debugging and golden tests.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_canonical_json(text: &str) -> Result<Self, CaseError> {
        serde_json::from_str(text).map_err(|e| CaseError::Json(e.to_string()))
    }
}

/// A ROPF instance: the network plus the discrete control catalogs.
///
/// Buses absent from `shunt_catalog` keep `b_shunt_fixed`; branches absent
/// from `tap_catalog` keep `effective_tap()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopfInstance {
    pub network: NetworkModel,
    /// bus index -> ordered allowed susceptances (ascending).
    pub shunt_catalog: BTreeMap<usize, Vec<f64>>,
    /// branch index -> ordered allowed tap ratios (ascending).
    pub tap_catalog: BTreeMap<usize, Vec<f64>>,
}

impl RopfInstance {
    /// Instance with empty catalogs (every control fixed at its case value).
    pub fn fixed(network: NetworkModel) -> Self {
        Self { network, shunt_catalog: BTreeMap::new(), tap_catalog: BTreeMap::new() }
    }

    pub fn num_binary_groups(&self) -> usize {
        self.shunt_catalog.len() + self.tap_catalog.len()
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }
}

/// Which buses receive a switchable shunt catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShuntRule {
    /// Buses whose case file carries a nonzero shunt susceptance (default).
    ExistingShunts,
    /// Explicit external bus ids.
    Buses(Vec<BusId>),
    /// No variable shunts.
    None,
}

/// Which branches receive a tap catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TapRule {
    /// Branches whose case file has a nonzero tap ratio, i.e. transformers
    /// (default).
    Transformers,
    /// Explicit 0-based branch indices (case-file row order of in-service
    /// branches).
    Branches(Vec<usize>),
    /// No variable taps.
    None,
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("missing required section `{0}`")]
    MissingSection(String),
    #[error("malformed row {row} of matrix `{matrix}`: {detail}")]
    MalformedRow { matrix: String, row: usize, detail: String },
    #[error("duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("row {row} of `{matrix}` references unknown bus {id}")]
    UnknownBus { matrix: String, row: usize, id: BusId },
    #[error("network is disconnected: only {reachable} of {total} buses reachable from the slack")]
    Disconnected { reachable: usize, total: usize },
    #[error("branch row {row} has zero series impedance (r = x = 0)")]
    ZeroImpedance { row: usize },
    #[error("branch row {row} has a phase-shift angle; shifts are not supported")]
    PhaseShift { row: usize },
    #[error("gencost row {row}: {detail}")]
    UnsupportedCost { row: usize, detail: String },
    #[error("no slack (type 3) bus present")]
    NoSlack,
    #[error("bus {id}: invalid voltage bounds [{v_min}, {v_max}]")]
    BadVoltageBounds { id: BusId, v_min: f64, v_max: f64 },
    #[error("empty model: {0}")]
    EmptyModel(String),
    #[error("catalog error: {0}")]
    BadCatalog(String),
    #[error("json: {0}")]
    Json(String),
}

/// Series admittance and half line-charging for a branch.
///
/// Returns `(g, b, b_sh)` with `g + jb = 1/(r + jx)` and `b_sh = b_charge/2`.
/// The caller composes these into directional flow coefficients under the
/// pi-model, with `tap` dividing the from-side voltage only.
pub fn branch_admittance(branch: &Branch, tap: f64) -> Result<(f64, f64, f64), CaseError> {
    if branch.r == 0.0 && branch.x == 0.0 {
        return Err(CaseError::ZeroImpedance { row: 0 });
    }
    if tap <= 0.0 {
        return Err(CaseError::BadCatalog(format!("tap ratio must be positive, got {tap}")));
    }
    let denom = branch.r * branch.r + branch.x * branch.x;
    Ok((branch.r / denom, -branch.x / denom, branch.b_charge / 2.0))
}

/// Coefficients of the four directional flows as linear functions of
/// `(c_ii, c_jj, c_ij, s_ij)` for a given tap ratio.
///
/// With series admittance `g + jb` and half-charging `b_sh`:
///
/// ```text
/// p_ij =  g/t^2 * c_ii          - g/t * c_ij + b/t * s_ij
/// q_ij = -(b+b_sh)/t^2 * c_ii   + b/t * c_ij + g/t * s_ij
/// p_ji =  g * c_jj              - g/t * c_ij - b/t * s_ij
/// q_ji = -(b+b_sh) * c_jj       + b/t * c_ij - g/t * s_ij
/// ```
#[derive(Clone, Copy, Debug)]
pub struct FlowCoeffs {
    pub p_from: [f64; 3],
    pub q_from: [f64; 3],
    pub p_to: [f64; 3],
    pub q_to: [f64; 3],
}

impl FlowCoeffs {
    /// Ordering inside each triple: (self `c` term, `c_ij` term, `s_ij` term).
    pub fn new(branch: &Branch, tap: f64) -> Result<Self, CaseError> {
        let (g, b, b_sh) = branch_admittance(branch, tap)?;
        let t2 = tap * tap;
        Ok(Self {
            p_from: [g / t2, -g / tap, b / tap],
            q_from: [-(b + b_sh) / t2, b / tap, g / tap],
            p_to: [g, -g / tap, -b / tap],
            q_to: [-(b + b_sh), b / tap, -g / tap],
        })
    }
}

const DEFAULT_THETA_MAX: f64 = std::f64::consts::FRAC_PI_2;

/// Parse a MATPOWER version-2 case into a validated per-unit model.
///
/// Out-of-service branches and generators (status 0) are dropped. Comments
/// (`%` to end of line) and arbitrary whitespace are tolerated.
pub fn parse_matpower(text: &str) -> Result<NetworkModel, CaseError> {
    let clean = strip_comments(text);
    let name = parse_function_name(&clean).unwrap_or_else(|| "case".to_string());
    let base_mva = parse_scalar(&clean, "baseMVA")
        .ok_or_else(|| CaseError::MissingSection("baseMVA".into()))?;
    if base_mva <= 0.0 {
        return Err(CaseError::MalformedRow {
            matrix: "baseMVA".into(),
            row: 0,
            detail: format!("base must be positive, got {base_mva}"),
        });
    }

    let bus_rows = parse_matrix(&clean, "bus")?.ok_or_else(|| CaseError::MissingSection("bus".into()))?;
    let gen_rows = parse_matrix(&clean, "gen")?.ok_or_else(|| CaseError::MissingSection("gen".into()))?;
    let branch_rows =
        parse_matrix(&clean, "branch")?.ok_or_else(|| CaseError::MissingSection("branch".into()))?;
    let gencost_rows = parse_matrix(&clean, "gencost")?.unwrap_or_default();

    // Buses.
    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut seen = HashMap::new();
    let mut slack_seen = false;
    for (row, vals) in bus_rows.iter().enumerate() {
        if vals.len() < 13 {
            return Err(CaseError::MalformedRow {
                matrix: "bus".into(),
                row,
                detail: format!("expected at least 13 columns, got {}", vals.len()),
            });
        }
        let id = vals[0] as BusId;
        if seen.insert(id, row).is_some() {
            return Err(CaseError::DuplicateBus(id));
        }
        let bus_type = match vals[1] as i64 {
            3 if !slack_seen => {
                slack_seen = true;
                BusType::Slack
            }
            // A survivable quirk of some files: extra reference buses are
            // demoted to PV.
            3 => BusType::Pv,
            2 => BusType::Pv,
            1 => BusType::Pq,
            other => {
                return Err(CaseError::MalformedRow {
                    matrix: "bus".into(),
                    row,
                    detail: format!("unsupported bus type {other}"),
                })
            }
        };
        let (v_max, v_min) = (vals[11], vals[12]);
        if !(v_min > 0.0 && v_min <= v_max) {
            return Err(CaseError::BadVoltageBounds { id, v_min, v_max });
        }
        buses.push(Bus {
            id,
            p_load: vals[2] / base_mva,
            q_load: vals[3] / base_mva,
            v_min,
            v_max,
            g_shunt: vals[4] / base_mva,
            b_shunt_fixed: vals[5] / base_mva,
            bus_type,
        });
    }
    if !slack_seen {
        return Err(CaseError::NoSlack);
    }

    // Generators; gencost rows pair with gen rows before the status filter.
    let mut generators = Vec::new();
    for (row, vals) in gen_rows.iter().enumerate() {
        if vals.len() < 10 {
            return Err(CaseError::MalformedRow {
                matrix: "gen".into(),
                row,
                detail: format!("expected at least 10 columns, got {}", vals.len()),
            });
        }
        let status = vals[7] != 0.0;
        if !status {
            continue;
        }
        let bus = vals[0] as BusId;
        if !seen.contains_key(&bus) {
            return Err(CaseError::UnknownBus { matrix: "gen".into(), row, id: bus });
        }
        let cost = if gencost_rows.is_empty() {
            CostPoly::default()
        } else {
            let cost_row = gencost_rows.get(row).ok_or_else(|| CaseError::UnsupportedCost {
                row,
                detail: "gencost has fewer rows than gen".into(),
            })?;
            parse_cost_row(cost_row, row, base_mva)?
        };
        generators.push(Generator {
            bus,
            p_min: vals[9] / base_mva,
            p_max: vals[8] / base_mva,
            q_min: vals[4] / base_mva,
            q_max: vals[3] / base_mva,
            cost,
        });
    }

    // Branches.
    let mut branches = Vec::new();
    for (row, vals) in branch_rows.iter().enumerate() {
        if vals.len() < 11 {
            return Err(CaseError::MalformedRow {
                matrix: "branch".into(),
                row,
                detail: format!("expected at least 11 columns, got {}", vals.len()),
            });
        }
        let status = vals[10] != 0.0;
        if !status {
            continue;
        }
        let (from, to) = (vals[0] as BusId, vals[1] as BusId);
        for id in [from, to] {
            if !seen.contains_key(&id) {
                return Err(CaseError::UnknownBus { matrix: "branch".into(), row, id });
            }
        }
        let (r, x) = (vals[2], vals[3]);
        if r == 0.0 && x == 0.0 {
            return Err(CaseError::ZeroImpedance { row });
        }
        if vals[9] != 0.0 {
            return Err(CaseError::PhaseShift { row });
        }
        let theta_max = match (vals.get(11), vals.get(12)) {
            (Some(&lo), Some(&hi)) => angle_limit(lo, hi, row)?,
            _ => DEFAULT_THETA_MAX,
        };
        let s_max = if vals[5] > 0.0 { Some(vals[5] / base_mva) } else { None };
        branches.push(Branch {
            from,
            to,
            r,
            x,
            b_charge: vals[4],
            fixed_tap: vals[8],
            s_max,
            theta_max,
        });
    }
    if branches.is_empty() {
        return Err(CaseError::EmptyModel("no in-service branches".into()));
    }

    let adjacency = build_adjacency(&buses, &branches);
    check_connected(&buses, &branches, &adjacency)?;

    Ok(NetworkModel { name, base_mva, buses, branches, generators, adjacency })
}

fn angle_limit(angmin_deg: f64, angmax_deg: f64, row: usize) -> Result<f64, CaseError> {
    // MATPOWER marks "unconstrained" as 0 or +-360; anything at or beyond 90
    // degrees adds nothing over the pi/2 cap required by the c/s bounds.
    if (angmin_deg == 0.0 && angmax_deg == 0.0)
        || angmin_deg.abs() >= 90.0
        || angmax_deg.abs() >= 90.0
    {
        return Ok(DEFAULT_THETA_MAX);
    }
    if angmin_deg > 0.0 || angmax_deg < 0.0 {
        return Err(CaseError::MalformedRow {
            matrix: "branch".into(),
            row,
            detail: format!(
                "angle limits [{angmin_deg}, {angmax_deg}] exclude zero; unsupported"
            ),
        });
    }
    let lim = angmin_deg.abs().max(angmax_deg.abs());
    Ok(lim.to_radians())
}

fn parse_cost_row(vals: &[f64], row: usize, base_mva: f64) -> Result<CostPoly, CaseError> {
    if vals.len() < 4 {
        return Err(CaseError::UnsupportedCost { row, detail: "too few columns".into() });
    }
    let model = vals[0] as i64;
    if model != 2 {
        return Err(CaseError::UnsupportedCost {
            row,
            detail: format!("cost model {model} (only polynomial model 2 supported)"),
        });
    }
    let n = vals[3] as usize;
    if n > 3 {
        return Err(CaseError::UnsupportedCost {
            row,
            detail: format!("polynomial degree {} exceeds 2", n.saturating_sub(1)),
        });
    }
    if vals.len() < 4 + n {
        return Err(CaseError::UnsupportedCost { row, detail: "missing coefficients".into() });
    }
    // Coefficients are highest degree first, in $/hr against MW; convert to
    // $/hr against p.u. power.
    let coeffs = &vals[4..4 + n];
    let mut poly = CostPoly::default();
    for (k, &c) in coeffs.iter().rev().enumerate() {
        let scaled = c * base_mva.powi(k as i32);
        match k {
            0 => poly.c0 = scaled,
            1 => poly.c1 = scaled,
            2 => poly.c2 = scaled,
            _ => unreachable!(),
        }
    }
    Ok(poly)
}

fn build_adjacency(buses: &[Bus], branches: &[Branch]) -> Vec<Vec<usize>> {
    let index: HashMap<BusId, usize> = buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let mut adj = vec![Vec::new(); buses.len()];
    for (k, br) in branches.iter().enumerate() {
        adj[index[&br.from]].push(k);
        adj[index[&br.to]].push(k);
    }
    adj
}

fn check_connected(
    buses: &[Bus],
    branches: &[Branch],
    adjacency: &[Vec<usize>],
) -> Result<(), CaseError> {
    let index: HashMap<BusId, usize> = buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let start = buses.iter().position(|b| b.bus_type == BusType::Slack).unwrap_or(0);
    let mut seen = vec![false; buses.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut reachable = 1;
    while let Some(i) = stack.pop() {
        for &k in &adjacency[i] {
            let br = &branches[k];
            let other = if index[&br.from] == i { index[&br.to] } else { index[&br.from] };
            if !seen[other] {
                seen[other] = true;
                reachable += 1;
                stack.push(other);
            }
        }
    }
    if reachable != buses.len() {
        return Err(CaseError::Disconnected { reachable, total: buses.len() });
    }
    Ok(())
}

/// Attach shunt/tap catalogs to a parsed model.
///
/// Selected buses get `shunt_values` scaled by the bus's nominal shunt
/// susceptance (raw values when the nominal is zero, as happens with explicit
/// bus lists); selected branches get `tap_values` as-is. Catalogs are sorted
/// ascending and deduplicated.
pub fn attach_catalogs(
    model: &NetworkModel,
    shunt_values: &[f64],
    tap_values: &[f64],
    shunt_rule: &ShuntRule,
    tap_rule: &TapRule,
) -> Result<RopfInstance, CaseError> {
    if model.buses.is_empty() || model.branches.is_empty() {
        return Err(CaseError::EmptyModel("cannot attach catalogs to an empty model".into()));
    }
    for &t in tap_values {
        if t <= 0.0 {
            return Err(CaseError::BadCatalog(format!("tap catalog value {t} must be positive")));
        }
    }

    let mut shunt_catalog = BTreeMap::new();
    let selected_buses: Vec<usize> = match shunt_rule {
        ShuntRule::None => Vec::new(),
        ShuntRule::ExistingShunts => model
            .buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.b_shunt_fixed != 0.0)
            .map(|(i, _)| i)
            .collect(),
        ShuntRule::Buses(ids) => {
            let mut idxs = Vec::new();
            for id in ids {
                let i = model
                    .bus_index(*id)
                    .ok_or_else(|| CaseError::BadCatalog(format!("unknown bus id {id}")))?;
                idxs.push(i);
            }
            idxs
        }
    };
    if !shunt_values.is_empty() {
        for i in selected_buses {
            let nominal = model.buses[i].b_shunt_fixed;
            let scale = if nominal != 0.0 { nominal } else { 1.0 };
            let mut vals: Vec<f64> = shunt_values.iter().map(|v| v * scale).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            shunt_catalog.insert(i, vals);
        }
    }

    let mut tap_catalog = BTreeMap::new();
    let selected_branches: Vec<usize> = match tap_rule {
        TapRule::None => Vec::new(),
        TapRule::Transformers => model
            .branches
            .iter()
            .enumerate()
            .filter(|(_, br)| br.is_transformer())
            .map(|(i, _)| i)
            .collect(),
        TapRule::Branches(idxs) => {
            for &i in idxs {
                if i >= model.branches.len() {
                    return Err(CaseError::BadCatalog(format!("branch index {i} out of range")));
                }
            }
            idxs.clone()
        }
    };
    if !tap_values.is_empty() {
        for i in selected_branches {
            let mut vals = tap_values.to_vec();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            tap_catalog.insert(i, vals);
        }
    }

    Ok(RopfInstance { network: model.clone(), shunt_catalog, tap_catalog })
}

fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|line| match line.find('%') {
            Some(pos) => &line[..pos],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_function_name(text: &str) -> Option<String> {
    let pos = text.find("function")?;
    let rest = &text[pos..];
    let eq = rest.find('=')?;
    let after = rest[eq + 1..].trim_start();
    let name: String =
        after.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
    if name.is_empty() {
        None
    } else {
        Some(name)
    }
}

fn parse_scalar(text: &str, field: &str) -> Option<f64> {
    let key = format!("mpc.{field}");
    let pos = text.find(&key)?;
    let rest = &text[pos + key.len()..];
    let eq = rest.find('=')?;
    let value: String = rest[eq + 1..]
        .trim_start()
        .chars()
        .take_while(|c| !c.is_whitespace() && *c != ';')
        .collect();
    value.parse().ok()
}

/// Extract `mpc.<name> = [ ... ];` rows as float vectors. Returns `Ok(None)`
/// if the section is absent.
fn parse_matrix(text: &str, name: &str) -> Result<Option<Vec<Vec<f64>>>, CaseError> {
    let key = format!("mpc.{name}");
    let mut search_from = 0;
    let start = loop {
        let pos = match text[search_from..].find(&key) {
            Some(p) => search_from + p,
            None => return Ok(None),
        };
        // Reject longer field names sharing the prefix (e.g. "bus" vs "bus_name").
        let after = text[pos + key.len()..].trim_start();
        if after.starts_with('=') {
            break pos;
        }
        search_from = pos + key.len();
    };
    let open = text[start..].find('[').ok_or_else(|| CaseError::MalformedRow {
        matrix: name.into(),
        row: 0,
        detail: "missing opening bracket".into(),
    })? + start;
    let close = text[open..].find(']').ok_or_else(|| CaseError::MalformedRow {
        matrix: name.into(),
        row: 0,
        detail: "missing closing bracket".into(),
    })? + open;
    let body = &text[open + 1..close];

    let mut rows = Vec::new();
    for (row_idx, raw) in body.split(';').enumerate() {
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let mut vals = Vec::new();
        for tok in raw.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| CaseError::MalformedRow {
                matrix: name.into(),
                row: row_idx,
                detail: format!("cannot parse `{tok}` as a number"),
            })?;
            vals.push(v);
        }
        rows.push(vals);
    }
    Ok(Some(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) const CASE3: &str = include_str!("../fixtures/nesta_case3_lmbd.m");
    const CASE5: &str = include_str!("../fixtures/nesta_case5_pjm.m");

    fn two_bus_case(base: f64) -> String {
        format!(
            "function mpc = twobus\nmpc.version = '2';\nmpc.baseMVA = {base};\n\
             mpc.bus = [\n1 3 0 0 0 0 1 1 0 240 1 1.1 0.9;\n2 1 40 10 0 0 1 1 0 240 1 1.1 0.9;\n];\n\
             mpc.gen = [\n1 0 0 100 -100 1 100 1 40 0;\n];\n\
             mpc.gencost = [\n2 0 0 3 0.1 5.0 0;\n];\n\
             mpc.branch = [\n1 2 0 0.1 0 0 0 0 0 0 1 -30 30;\n];\n"
        )
    }

    #[test]
    fn parse_two_bus_passthrough() {
        let m = parse_matpower(&two_bus_case(100.0)).unwrap();
        assert_eq!(m.buses.len(), 2);
        assert_eq!(m.branches.len(), 1);
        assert_relative_eq!(m.branches[0].x, 0.1);
        // PMAX = 40 MW on a 100 MVA base.
        assert_relative_eq!(m.generators[0].p_max, 0.4);
        // Cost scaling: 0.1 $/MW^2 -> 0.1 * 100^2; 5 $/MW -> 500.
        assert_relative_eq!(m.generators[0].cost.c2, 1000.0);
        assert_relative_eq!(m.generators[0].cost.c1, 500.0);
    }

    #[test]
    fn parse_case3_counts() {
        let m = parse_matpower(CASE3).unwrap();
        assert_eq!(m.buses.len(), 3);
        assert_eq!(m.branches.len(), 3);
        assert_eq!(m.generators.len(), 3);
        assert_relative_eq!(m.buses[0].p_load, 1.10);
        assert_relative_eq!(m.branches[1].s_max.unwrap(), 0.50);
        assert_relative_eq!(m.branches[0].theta_max, 30f64.to_radians());
    }

    #[test]
    fn parse_case5_counts() {
        let m = parse_matpower(CASE5).unwrap();
        assert_eq!(m.buses.len(), 5);
        assert_eq!(m.branches.len(), 6);
        assert_eq!(m.generators.len(), 5);
        assert_eq!(m.buses[3].bus_type, BusType::Slack);
    }

    #[test]
    fn admittance_examples() {
        let mut br = Branch {
            from: 1,
            to: 2,
            r: 0.0,
            x: 0.1,
            b_charge: 0.0,
            fixed_tap: 0.0,
            s_max: None,
            theta_max: 0.5,
        };
        let (g, b, _) = branch_admittance(&br, 1.0).unwrap();
        assert_relative_eq!(g, 0.0);
        assert_relative_eq!(b, -10.0);

        br.r = 0.03;
        br.x = 0.04;
        let (g, b, _) = branch_admittance(&br, 1.0).unwrap();
        assert_relative_eq!(g, 12.0);
        assert_relative_eq!(b, -16.0);

        br.r = 0.0;
        br.x = 0.2;
        br.b_charge = 0.04;
        let (_, _, bsh) = branch_admittance(&br, 1.0).unwrap();
        assert_relative_eq!(bsh, 0.02);

        br.r = 0.0;
        br.x = 0.0;
        assert!(branch_admittance(&br, 1.0).is_err());
    }

    #[test]
    fn catalog_rules() {
        let m = parse_matpower(CASE3).unwrap();
        // No transformers, no shunts: default rules give empty catalogs.
        let inst = attach_catalogs(
            &m,
            &[0.0, 1.0],
            &[0.9, 0.95, 1.0, 1.05, 1.1],
            &ShuntRule::ExistingShunts,
            &TapRule::Transformers,
        )
        .unwrap();
        assert!(inst.shunt_catalog.is_empty());
        assert!(inst.tap_catalog.is_empty());

        // Nominal-shunt scaling: on/off of a 0.19 p.u. device.
        let mut m2 = m.clone();
        m2.buses[2].b_shunt_fixed = 0.19;
        let inst = attach_catalogs(
            &m2,
            &[0.0, 1.0],
            &[],
            &ShuntRule::ExistingShunts,
            &TapRule::None,
        )
        .unwrap();
        assert_eq!(inst.shunt_catalog[&2], vec![0.0, 0.19]);

        // Explicit selections on a shuntless bus fall back to raw values.
        let inst = attach_catalogs(
            &m,
            &[0.0, 1.0],
            &[0.9, 1.1],
            &ShuntRule::Buses(vec![3]),
            &TapRule::Branches(vec![1]),
        )
        .unwrap();
        assert_eq!(inst.shunt_catalog[&2], vec![0.0, 1.0]);
        assert_eq!(inst.tap_catalog[&1], vec![0.9, 1.1]);

        assert!(attach_catalogs(&m, &[], &[0.0], &ShuntRule::None, &TapRule::Transformers)
            .is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = parse_matpower(CASE3).unwrap();
        let json = m.to_canonical_json();
        let back = NetworkModel::from_canonical_json(&json).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn per_unit_conversion_is_linear() {
        // Doubling the base with the matching rescale of all natural-unit
        // fields must give the identical p.u. model: MW/MVAr fields double,
        // p.u. impedances double (Z_base halves), p.u. charging halves, and
        // MW-cost coefficients scale by 2^-k.
        let orig = parse_matpower(&two_bus_case(100.0)).unwrap();
        let scaled_text = "function mpc = twobus\nmpc.version = '2';\nmpc.baseMVA = 200.0;\n\
             mpc.bus = [\n1 3 0 0 0 0 1 1 0 240 1 1.1 0.9;\n2 1 80 20 0 0 1 1 0 240 1 1.1 0.9;\n];\n\
             mpc.gen = [\n1 0 0 200 -200 1 100 1 80 0;\n];\n\
             mpc.gencost = [\n2 0 0 3 0.025 2.5 0;\n];\n\
             mpc.branch = [\n1 2 0 0.2 0 0 0 0 0 0 1 -30 30;\n];\n";
        let scaled = parse_matpower(scaled_text).unwrap();
        assert_relative_eq!(orig.buses[1].p_load, scaled.buses[1].p_load);
        assert_relative_eq!(orig.generators[0].p_max, scaled.generators[0].p_max);
        assert_relative_eq!(orig.generators[0].cost.c2, scaled.generators[0].cost.c2);
        assert_relative_eq!(orig.generators[0].cost.c1, scaled.generators[0].cost.c1);
        // The branch reactance was written in the new base directly.
        assert_relative_eq!(orig.branches[0].x * 2.0, scaled.branches[0].x);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            parse_matpower(&two_bus_case(100.0).replace("1 2 0 0.1", "1 2 0 zz")),
            Err(CaseError::MalformedRow { .. })
        ));
        assert!(matches!(
            parse_matpower(&two_bus_case(100.0).replace("2 1 40", "1 1 40")),
            Err(CaseError::DuplicateBus(1))
        ));
        // Phase shift rejected.
        assert!(matches!(
            parse_matpower(&two_bus_case(100.0).replace("0 0 1 -30 30", "0 5 1 -30 30")),
            Err(CaseError::PhaseShift { .. })
        ));
        // Disconnected network: two islands.
        let txt = "function mpc = cut\nmpc.baseMVA = 100;\n\
            mpc.bus = [\n1 3 0 0 0 0 1 1 0 240 1 1.1 0.9;\n2 1 0 0 0 0 1 1 0 240 1 1.1 0.9;\n\
            3 1 0 0 0 0 1 1 0 240 1 1.1 0.9;\n4 1 0 0 0 0 1 1 0 240 1 1.1 0.9;\n];\n\
            mpc.gen = [\n1 0 0 10 -10 1 100 1 10 0;\n];\n\
            mpc.branch = [\n1 2 0 0.1 0 0 0 0 0 0 1 -30 30;\n3 4 0 0.1 0 0 0 0 0 0 1 -30 30;\n];\n";
        assert!(matches!(parse_matpower(txt), Err(CaseError::Disconnected { .. })));
    }
}
