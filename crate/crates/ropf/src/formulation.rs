//! MISOCP relaxation builder for the lifted ROPF formulation.
//!
//! The nonconvex AC equations are rewritten in the voltage-product variables
//! `c_ii = |V_i|^2`, `c_ij = |V_i||V_j| cos(t_i - t_j)` and
//! `s_ij = -|V_i||V_j| sin(t_i - t_j)`. Discrete shunt/tap choices enter via
//! SOS1 binaries; each bilinear product (`c_ii alpha`, `(c_ii, c_ij, s_ij)
//! beta`) is replaced by an auxiliary column with on/off convex envelope rows
//! and a recovery sum. The trigonometric identity
//! `c_ij^2 + s_ij^2 = c_ii c_jj` is relaxed to a rotated cone, both for the
//! plain pairs and for the per-candidate tap products. The `Misocpa` mode
//! adds explicit bus-angle columns tied to `(c, s)` by four arctangent
//! outer-approximation hyperplanes per line.

use crate::case_io::{BusType, FlowCoeffs, RopfInstance};
use crate::program::{Col, ConeBlock, ConicProgram, LinExpr, Sense};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Flow direction on a branch: `FromTo` is the case-file orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dir {
    FromTo,
    ToFrom,
}

/// Identity of a program column in domain terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarKey {
    /// Generator real output.
    GenP(usize),
    /// Generator reactive output.
    GenQ(usize),
    /// Generator cost epigraph value.
    CostEpi(usize),
    /// Directed branch real flow.
    FlowP(usize, Dir),
    /// Directed branch reactive flow.
    FlowQ(usize, Dir),
    /// Squared voltage magnitude per bus.
    VoltSq(usize),
    /// Voltage cosine product per branch.
    WCos(usize),
    /// Voltage (negated) sine product per branch.
    WSin(usize),
    /// Shunt selection binary for candidate `k` at a bus.
    ShuntSel { bus: usize, k: usize },
    /// Product `c_ii * alpha_k` at a bus.
    ShuntProd { bus: usize, k: usize },
    /// Tap selection binary for candidate `l` on a branch.
    TapSel { branch: usize, l: usize },
    /// Product `c_ii * beta_l` (from-side voltage square).
    TapVoltSq { branch: usize, l: usize },
    /// Product `c_ij * beta_l`.
    TapWCos { branch: usize, l: usize },
    /// Product `s_ij * beta_l`.
    TapWSin { branch: usize, l: usize },
    /// Bus voltage angle (present in arctangent-OA modes only).
    Angle(usize),
}

impl VarKey {
    fn name(&self) -> String {
        match self {
            VarKey::GenP(g) => format!("pg[{g}]"),
            VarKey::GenQ(g) => format!("qg[{g}]"),
            VarKey::CostEpi(g) => format!("t[{g}]"),
            VarKey::FlowP(k, Dir::FromTo) => format!("p[{k}:ft]"),
            VarKey::FlowP(k, Dir::ToFrom) => format!("p[{k}:tf]"),
            VarKey::FlowQ(k, Dir::FromTo) => format!("q[{k}:ft]"),
            VarKey::FlowQ(k, Dir::ToFrom) => format!("q[{k}:tf]"),
            VarKey::VoltSq(i) => format!("c[{i}]"),
            VarKey::WCos(k) => format!("cc[{k}]"),
            VarKey::WSin(k) => format!("ss[{k}]"),
            VarKey::ShuntSel { bus, k } => format!("alpha[{bus},{k}]"),
            VarKey::ShuntProd { bus, k } => format!("gamma[{bus},{k}]"),
            VarKey::TapSel { branch, l } => format!("beta[{branch},{l}]"),
            VarKey::TapVoltSq { branch, l } => format!("phibar[{branch},{l}]"),
            VarKey::TapWCos { branch, l } => format!("phi[{branch},{l}]"),
            VarKey::TapWSin { branch, l } => format!("psi[{branch},{l}]"),
            VarKey::Angle(i) => format!("theta[{i}]"),
        }
    }
}

/// Total, injective map between domain variables and program columns.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct VariableMap {
    forward: BTreeMap<VarKey, Col>,
    reverse: Vec<VarKey>,
}

impl VariableMap {
    fn insert(&mut self, key: VarKey, col: Col) {
        assert_eq!(col, self.reverse.len(), "columns must be registered in order");
        let prev = self.forward.insert(key, col);
        assert!(prev.is_none(), "duplicate variable key {key:?}");
        self.reverse.push(key);
    }

    /// Column of `key`; panics if absent (the map is total by construction).
    pub fn col(&self, key: VarKey) -> Col {
        *self.forward.get(&key).unwrap_or_else(|| panic!("no column for {key:?}"))
    }

    pub fn get(&self, key: VarKey) -> Option<Col> {
        self.forward.get(&key).copied()
    }

    pub fn key_of(&self, col: Col) -> VarKey {
        self.reverse[col]
    }

    pub fn len(&self) -> usize {
        self.reverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reverse.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VarKey, &Col)> {
        self.forward.iter()
    }
}

/// Variable bounds for the lifted voltage products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsTable {
    /// Per bus: `[Vmin^2, Vmax^2]`.
    pub c_diag: Vec<(f64, f64)>,
    /// Per branch: `[Vmin_i Vmin_j cos(theta_max), Vmax_i Vmax_j]`.
    ///
    /// The lower bound must use the voltage minima: `|V_i||V_j| cos(d)` with
    /// `|d| <= theta_max < pi/2` is minimized at the smallest magnitudes and
    /// the widest angle, and any larger value would cut off feasible
    /// low-voltage operating points.
    pub c_off: Vec<(f64, f64)>,
    /// Per branch: `[-Vmax_i Vmax_j sin(theta_max), +...]`.
    pub s_off: Vec<(f64, f64)>,
}

#[derive(Debug, Error)]
pub enum FormulationError {
    #[error("branch {branch}: angle limit {theta} exceeds pi/2; cosine lower bound invalid")]
    ThetaBound { branch: usize, theta: f64 },
    #[error("branch {branch}: arctangent outer approximation requires theta_max < pi/2 (got {theta})")]
    OaThetaBound { branch: usize, theta: f64 },
    #[error("generator {gen}: cost not conic-representable ({detail})")]
    UnsupportedCost { gen: usize, detail: String },
    #[error("column {name} needs finite bounds for envelope validity")]
    InfiniteBound { name: String },
    #[error("binary assignment invalid: {0}")]
    BadAssignment(String),
    #[error("{0}")]
    Inconsistent(String),
}

/// Lifted-variable bounds from voltage and angle limits.
pub fn compute_bounds(instance: &RopfInstance) -> Result<BoundsTable, FormulationError> {
    let net = &instance.network;
    let c_diag: Vec<(f64, f64)> =
        net.buses.iter().map(|b| (b.v_min * b.v_min, b.v_max * b.v_max)).collect();
    let mut c_off = Vec::with_capacity(net.branches.len());
    let mut s_off = Vec::with_capacity(net.branches.len());
    for (k, br) in net.branches.iter().enumerate() {
        if br.theta_max > std::f64::consts::FRAC_PI_2 + 1e-12 {
            return Err(FormulationError::ThetaBound { branch: k, theta: br.theta_max });
        }
        let (fi, ti) = net.branch_endpoints(k);
        let vmax = net.buses[fi].v_max * net.buses[ti].v_max;
        let vmin = net.buses[fi].v_min * net.buses[ti].v_min;
        c_off.push((vmin * br.theta_max.cos(), vmax));
        s_off.push((-vmax * br.theta_max.sin(), vmax * br.theta_max.sin()));
    }
    Ok(BoundsTable { c_diag, c_off, s_off })
}

/// Relaxation flavor. `Misocp` omits angle columns; `Misocpa` adds them with
/// the four arctangent outer-approximation hyperplanes per line;
/// `MisocpaPlus` is `Misocpa` plus the cycle-separation cut loop (applied by
/// the caller after the build).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelaxationMode {
    Misocp,
    Misocpa,
    MisocpaPlus,
}

impl RelaxationMode {
    pub fn has_angles(self) -> bool {
        !matches!(self, RelaxationMode::Misocp)
    }

    pub fn label(self) -> &'static str {
        match self {
            RelaxationMode::Misocp => "misocp",
            RelaxationMode::Misocpa => "misocpa",
            RelaxationMode::MisocpaPlus => "misocpa_plus",
        }
    }
}

impl std::str::FromStr for RelaxationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "misocp" => Ok(Self::Misocp),
            "misocpa" => Ok(Self::Misocpa),
            "misocpa_plus" | "misocpa+" => Ok(Self::MisocpaPlus),
            other => Err(format!("unknown relaxation mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    pub mode: RelaxationMode,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { mode: RelaxationMode::MisocpaPlus }
    }
}

/// A valid linear inequality over program columns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearCut {
    pub coeffs: Vec<(Col, f64)>,
    pub sense: Sense,
    pub rhs: f64,
    pub provenance: CutProvenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutProvenance {
    ArctanOa,
    Eig3,
    Dykstra,
}

impl CutProvenance {
    pub fn label(&self) -> &'static str {
        match self {
            CutProvenance::ArctanOa => "arctan_oa",
            CutProvenance::Eig3 => "eig3",
            CutProvenance::Dykstra => "dykstra",
        }
    }
}

impl LinearCut {
    /// Signed violation at `x` (positive = violated).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let v: f64 = self.coeffs.iter().map(|&(c, a)| a * x[c]).sum();
        match self.sense {
            Sense::Le => v - self.rhs,
            Sense::Ge => self.rhs - v,
            Sense::Eq => (v - self.rhs).abs(),
        }
    }

    pub fn add_to(&self, program: &mut ConicProgram, name: impl Into<String>) {
        let mut e = LinExpr::new();
        for &(c, v) in &self.coeffs {
            e.add_term(c, v);
        }
        program.add_row(name, e, self.sense, self.rhs);
    }
}

/// Build the MISOCP relaxation of the lifted formulation.
pub fn build_misocp(
    instance: &RopfInstance,
    bounds: &BoundsTable,
    options: &BuildOptions,
) -> Result<(ConicProgram, VariableMap), FormulationError> {
    let net = &instance.network;
    let nb = net.buses.len();
    let nl = net.branches.len();
    let mut prog = ConicProgram::new();
    let mut vmap = VariableMap::default();

    let add = |prog: &mut ConicProgram, vmap: &mut VariableMap, key: VarKey, lo: f64, up: f64, binary: bool| -> Col {
        let col =
            if binary { prog.add_binary_col(key.name()) } else { prog.add_col(key.name(), lo, up) };
        vmap.insert(key, col);
        col
    };

    // Generator columns and cost epigraph.
    for (g, gen) in net.generators.iter().enumerate() {
        add(&mut prog, &mut vmap, VarKey::GenP(g), gen.p_min, gen.p_max, false);
        add(&mut prog, &mut vmap, VarKey::GenQ(g), gen.q_min, gen.q_max, false);
        add(&mut prog, &mut vmap, VarKey::CostEpi(g), f64::NEG_INFINITY, f64::INFINITY, false);
        if gen.cost.c2 < 0.0 {
            return Err(FormulationError::UnsupportedCost {
                gen: g,
                detail: format!("concave quadratic coefficient {}", gen.cost.c2),
            });
        }
    }
    // Voltage products.
    for i in 0..nb {
        let (lo, up) = bounds.c_diag[i];
        add(&mut prog, &mut vmap, VarKey::VoltSq(i), lo, up, false);
    }
    for k in 0..nl {
        let (clo, cup) = bounds.c_off[k];
        if !(clo.is_finite() && cup.is_finite()) {
            return Err(FormulationError::InfiniteBound { name: format!("cc[{k}]") });
        }
        add(&mut prog, &mut vmap, VarKey::WCos(k), clo, cup, false);
        let (slo, sup) = bounds.s_off[k];
        if !(slo.is_finite() && sup.is_finite()) {
            return Err(FormulationError::InfiniteBound { name: format!("ss[{k}]") });
        }
        add(&mut prog, &mut vmap, VarKey::WSin(k), slo, sup, false);
    }
    // Directed flows.
    for k in 0..nl {
        for dir in [Dir::FromTo, Dir::ToFrom] {
            add(&mut prog, &mut vmap, VarKey::FlowP(k, dir), f64::NEG_INFINITY, f64::INFINITY, false);
            add(&mut prog, &mut vmap, VarKey::FlowQ(k, dir), f64::NEG_INFINITY, f64::INFINITY, false);
        }
    }
    // Catalog products and binaries.
    for (&bus, cat) in &instance.shunt_catalog {
        let (clo, cup) = bounds.c_diag[bus];
        for k in 0..cat.len() {
            add(&mut prog, &mut vmap, VarKey::ShuntSel { bus, k }, 0.0, 1.0, true);
            add(&mut prog, &mut vmap, VarKey::ShuntProd { bus, k }, clo.min(0.0), cup.max(0.0), false);
        }
    }
    for (&branch, cat) in &instance.tap_catalog {
        let (fi, _) = net.branch_endpoints(branch);
        let (cd_lo, cd_up) = bounds.c_diag[fi];
        let (co_lo, co_up) = bounds.c_off[branch];
        let (s_lo, s_up) = bounds.s_off[branch];
        for l in 0..cat.len() {
            add(&mut prog, &mut vmap, VarKey::TapSel { branch, l }, 0.0, 1.0, true);
            add(&mut prog, &mut vmap, VarKey::TapVoltSq { branch, l }, cd_lo.min(0.0), cd_up.max(0.0), false);
            add(&mut prog, &mut vmap, VarKey::TapWCos { branch, l }, co_lo.min(0.0), co_up.max(0.0), false);
            add(&mut prog, &mut vmap, VarKey::TapWSin { branch, l }, s_lo.min(0.0), s_up.max(0.0), false);
        }
    }
    // Angles.
    if options.mode.has_angles() {
        for i in 0..nb {
            add(&mut prog, &mut vmap, VarKey::Angle(i), f64::NEG_INFINITY, f64::INFINITY, false);
        }
    }

    // Objective: sum of epigraph variables; exactness rows/cones per degree.
    let mut obj = LinExpr::new();
    for (g, gen) in net.generators.iter().enumerate() {
        let t = vmap.col(VarKey::CostEpi(g));
        let p = vmap.col(VarKey::GenP(g));
        obj.add_term(t, 1.0);
        if gen.cost.c2 == 0.0 {
            // t = c0 + c1 p
            let mut e = LinExpr::new();
            e.add_term(t, 1.0).add_term(p, -gen.cost.c1);
            prog.add_row(format!("cost[{g}]"), e, Sense::Eq, gen.cost.c0);
        } else {
            // (t - c1 p - c0) * 1 >= (sqrt(c2) p)^2
            let mut shifted = LinExpr::new();
            shifted.add_term(t, 1.0).add_term(p, -gen.cost.c1);
            shifted.constant = -gen.cost.c0;
            let scaled = LinExpr::single(p, gen.cost.c2.sqrt());
            prog.add_cone(ConeBlock::Rotated {
                members: vec![shifted, LinExpr::constant(1.0), scaled],
                name: format!("cost[{g}]"),
            });
        }
    }
    prog.objective = obj;

    // Power balance per bus.
    let bus_of_branch: Vec<(usize, usize)> = (0..nl).map(|k| net.branch_endpoints(k)).collect();
    for i in 0..nb {
        let bus = &net.buses[i];
        let mut p_row = LinExpr::new();
        let mut q_row = LinExpr::new();
        for g in net.gens_at(i) {
            p_row.add_term(vmap.col(VarKey::GenP(g)), 1.0);
            q_row.add_term(vmap.col(VarKey::GenQ(g)), 1.0);
        }
        p_row.add_term(vmap.col(VarKey::VoltSq(i)), -bus.g_shunt);
        match instance.shunt_catalog.get(&i) {
            Some(cat) => {
                for (k, &b_k) in cat.iter().enumerate() {
                    q_row.add_term(vmap.col(VarKey::ShuntProd { bus: i, k }), b_k);
                }
            }
            None => {
                q_row.add_term(vmap.col(VarKey::VoltSq(i)), bus.b_shunt_fixed);
            }
        }
        for &k in &net.adjacency[i] {
            let dir = if bus_of_branch[k].0 == i { Dir::FromTo } else { Dir::ToFrom };
            p_row.add_term(vmap.col(VarKey::FlowP(k, dir)), -1.0);
            q_row.add_term(vmap.col(VarKey::FlowQ(k, dir)), -1.0);
        }
        prog.add_row(format!("pbal[{i}]"), p_row, Sense::Eq, bus.p_load);
        prog.add_row(format!("qbal[{i}]"), q_row, Sense::Eq, bus.q_load);
    }

    // Directed flow definitions.
    for k in 0..nl {
        let br = &net.branches[k];
        let (fi, ti) = bus_of_branch[k];
        let c_ii = vmap.col(VarKey::VoltSq(fi));
        let c_jj = vmap.col(VarKey::VoltSq(ti));
        let c_ij = vmap.col(VarKey::WCos(k));
        let s_ij = vmap.col(VarKey::WSin(k));
        match instance.tap_catalog.get(&k) {
            None => {
                let fc = FlowCoeffs::new(br, br.effective_tap())
                    .map_err(|e| FormulationError::Inconsistent(e.to_string()))?;
                let defs = [
                    (VarKey::FlowP(k, Dir::FromTo), fc.p_from, c_ii),
                    (VarKey::FlowQ(k, Dir::FromTo), fc.q_from, c_ii),
                    (VarKey::FlowP(k, Dir::ToFrom), fc.p_to, c_jj),
                    (VarKey::FlowQ(k, Dir::ToFrom), fc.q_to, c_jj),
                ];
                for (key, coefs, self_col) in defs {
                    let mut e = LinExpr::new();
                    e.add_term(vmap.col(key), 1.0);
                    e.add_term(self_col, -coefs[0]);
                    e.add_term(c_ij, -coefs[1]);
                    e.add_term(s_ij, -coefs[2]);
                    prog.add_row(format!("flow:{}", key.name()), e, Sense::Eq, 0.0);
                }
            }
            Some(cat) => {
                let mut pf = LinExpr::single(vmap.col(VarKey::FlowP(k, Dir::FromTo)), 1.0);
                let mut qf = LinExpr::single(vmap.col(VarKey::FlowQ(k, Dir::FromTo)), 1.0);
                let mut pt = LinExpr::single(vmap.col(VarKey::FlowP(k, Dir::ToFrom)), 1.0);
                let mut qt = LinExpr::single(vmap.col(VarKey::FlowQ(k, Dir::ToFrom)), 1.0);
                for (l, &tap) in cat.iter().enumerate() {
                    let fc = FlowCoeffs::new(br, tap)
                        .map_err(|e| FormulationError::Inconsistent(e.to_string()))?;
                    let phibar = vmap.col(VarKey::TapVoltSq { branch: k, l });
                    let phi = vmap.col(VarKey::TapWCos { branch: k, l });
                    let psi = vmap.col(VarKey::TapWSin { branch: k, l });
                    pf.add_term(phibar, -fc.p_from[0]);
                    pf.add_term(phi, -fc.p_from[1]);
                    pf.add_term(psi, -fc.p_from[2]);
                    qf.add_term(phibar, -fc.q_from[0]);
                    qf.add_term(phi, -fc.q_from[1]);
                    qf.add_term(psi, -fc.q_from[2]);
                    // The to-side self term has no tap; only the cross terms
                    // carry per-candidate coefficients.
                    pt.add_term(phi, -fc.p_to[1]);
                    pt.add_term(psi, -fc.p_to[2]);
                    qt.add_term(phi, -fc.q_to[1]);
                    qt.add_term(psi, -fc.q_to[2]);
                }
                let fc0 = FlowCoeffs::new(br, 1.0)
                    .map_err(|e| FormulationError::Inconsistent(e.to_string()))?;
                pt.add_term(c_jj, -fc0.p_to[0]);
                qt.add_term(c_jj, -fc0.q_to[0]);
                prog.add_row(format!("flow:p[{k}:ft]"), pf, Sense::Eq, 0.0);
                prog.add_row(format!("flow:q[{k}:ft]"), qf, Sense::Eq, 0.0);
                prog.add_row(format!("flow:p[{k}:tf]"), pt, Sense::Eq, 0.0);
                prog.add_row(format!("flow:q[{k}:tf]"), qt, Sense::Eq, 0.0);
            }
        }
    }

    // Shunt catalog: SOS1 row, recovery sum, envelopes.
    for (&bus, cat) in &instance.shunt_catalog {
        let (clo, cup) = bounds.c_diag[bus];
        let mut sel_row = LinExpr::new();
        let mut sum_row = LinExpr::new();
        let mut group = Vec::new();
        for k in 0..cat.len() {
            let alpha = vmap.col(VarKey::ShuntSel { bus, k });
            let gamma = vmap.col(VarKey::ShuntProd { bus, k });
            sel_row.add_term(alpha, 1.0);
            sum_row.add_term(gamma, 1.0);
            group.push(alpha);
            let mut up_env = LinExpr::new();
            up_env.add_term(gamma, 1.0).add_term(alpha, -cup);
            prog.add_row(format!("env:gamma_up[{bus},{k}]"), up_env, Sense::Le, 0.0);
            let mut lo_env = LinExpr::new();
            lo_env.add_term(gamma, 1.0).add_term(alpha, -clo);
            prog.add_row(format!("env:gamma_lo[{bus},{k}]"), lo_env, Sense::Ge, 0.0);
        }
        sum_row.add_term(vmap.col(VarKey::VoltSq(bus)), -1.0);
        prog.add_row(format!("sel:alpha[{bus}]"), sel_row, Sense::Eq, 1.0);
        prog.add_row(format!("sum:gamma[{bus}]"), sum_row, Sense::Eq, 0.0);
        prog.sos1_groups.push(group);
    }

    // Tap catalog: SOS1 row, recovery sums, envelopes.
    for (&branch, cat) in &instance.tap_catalog {
        let (fi, _) = bus_of_branch[branch];
        let (cd_lo, cd_up) = bounds.c_diag[fi];
        let (co_lo, co_up) = bounds.c_off[branch];
        let (s_lo, s_up) = bounds.s_off[branch];
        let mut sel_row = LinExpr::new();
        let mut group = Vec::new();
        let mut sums = [LinExpr::new(), LinExpr::new(), LinExpr::new()];
        for l in 0..cat.len() {
            let beta = vmap.col(VarKey::TapSel { branch, l });
            sel_row.add_term(beta, 1.0);
            group.push(beta);
            let envs = [
                (VarKey::TapVoltSq { branch, l }, cd_lo, cd_up, 0usize, "phibar"),
                (VarKey::TapWCos { branch, l }, co_lo, co_up, 1, "phi"),
                (VarKey::TapWSin { branch, l }, s_lo, s_up, 2, "psi"),
            ];
            for (key, lo, up, sum_idx, tag) in envs {
                let col = vmap.col(key);
                sums[sum_idx].add_term(col, 1.0);
                let mut up_env = LinExpr::new();
                up_env.add_term(col, 1.0).add_term(beta, -up);
                prog.add_row(format!("env:{tag}_up[{branch},{l}]"), up_env, Sense::Le, 0.0);
                let mut lo_env = LinExpr::new();
                lo_env.add_term(col, 1.0).add_term(beta, -lo);
                prog.add_row(format!("env:{tag}_lo[{branch},{l}]"), lo_env, Sense::Ge, 0.0);
            }
        }
        prog.add_row(format!("sel:beta[{branch}]"), sel_row, Sense::Eq, 1.0);
        let [mut sphibar, mut sphi, mut spsi] = sums;
        sphibar.add_term(vmap.col(VarKey::VoltSq(fi)), -1.0);
        prog.add_row(format!("sum:phibar[{branch}]"), sphibar, Sense::Eq, 0.0);
        sphi.add_term(vmap.col(VarKey::WCos(branch)), -1.0);
        prog.add_row(format!("sum:phi[{branch}]"), sphi, Sense::Eq, 0.0);
        spsi.add_term(vmap.col(VarKey::WSin(branch)), -1.0);
        prog.add_row(format!("sum:psi[{branch}]"), spsi, Sense::Eq, 0.0);
        prog.sos1_groups.push(group);
    }

    // Parallel branches share the same voltage products.
    let mut pair_first: HashMap<(usize, usize), (usize, bool)> = HashMap::new();
    for k in 0..nl {
        let (fi, ti) = bus_of_branch[k];
        let (key, fwd) = if fi <= ti { ((fi, ti), true) } else { ((ti, fi), false) };
        match pair_first.get(&key) {
            None => {
                pair_first.insert(key, (k, fwd));
            }
            Some(&(k0, fwd0)) => {
                let mut ec = LinExpr::new();
                ec.add_term(vmap.col(VarKey::WCos(k0)), 1.0);
                ec.add_term(vmap.col(VarKey::WCos(k)), -1.0);
                prog.add_row(format!("par:cc[{k0},{k}]"), ec, Sense::Eq, 0.0);
                let sign = if fwd0 == fwd { -1.0 } else { 1.0 };
                let mut es = LinExpr::new();
                es.add_term(vmap.col(VarKey::WSin(k0)), 1.0);
                es.add_term(vmap.col(VarKey::WSin(k)), sign);
                prog.add_row(format!("par:ss[{k0},{k}]"), es, Sense::Eq, 0.0);
            }
        }
    }

    // Apparent-power limits, one standard cone per direction.
    for k in 0..nl {
        if let Some(smax) = net.branches[k].s_max {
            for dir in [Dir::FromTo, Dir::ToFrom] {
                let tag = if dir == Dir::FromTo { "ft" } else { "tf" };
                prog.add_cone(ConeBlock::Soc {
                    members: vec![
                        LinExpr::constant(smax),
                        LinExpr::single(vmap.col(VarKey::FlowP(k, dir)), 1.0),
                        LinExpr::single(vmap.col(VarKey::FlowQ(k, dir)), 1.0),
                    ],
                    name: format!("smax[{k}:{tag}]"),
                });
            }
        }
    }

    // Angle anchoring, angle-difference rows and arctangent hyperplanes.
    if options.mode.has_angles() {
        let slack = net.buses.iter().position(|b| b.bus_type == BusType::Slack).unwrap_or(0);
        prog.add_row(
            "anchor:theta_slack",
            LinExpr::single(vmap.col(VarKey::Angle(slack)), 1.0),
            Sense::Eq,
            0.0,
        );
        for k in 0..nl {
            let (fi, ti) = bus_of_branch[k];
            let mut diff = LinExpr::new();
            diff.add_term(vmap.col(VarKey::Angle(fi)), 1.0);
            diff.add_term(vmap.col(VarKey::Angle(ti)), -1.0);
            let th = net.branches[k].theta_max;
            prog.add_row(format!("ang_up[{k}]"), diff.clone(), Sense::Le, th);
            prog.add_row(format!("ang_lo[{k}]"), diff, Sense::Ge, -th);
            if th < std::f64::consts::FRAC_PI_2 - 1e-9 {
                let cuts = arctan_oa_cuts(k, instance, bounds, &vmap)?;
                for (idx, cut) in cuts.iter().enumerate() {
                    cut.add_to(&mut prog, format!("oa[{k},{idx}]"));
                }
            }
        }
    }

    // Rotated consistency cones.
    for k in 0..nl {
        let (fi, ti) = bus_of_branch[k];
        prog.add_cone(ConeBlock::Rotated {
            members: vec![
                LinExpr::single(vmap.col(VarKey::VoltSq(fi)), 1.0),
                LinExpr::single(vmap.col(VarKey::VoltSq(ti)), 1.0),
                LinExpr::single(vmap.col(VarKey::WCos(k)), 1.0),
                LinExpr::single(vmap.col(VarKey::WSin(k)), 1.0),
            ],
            name: format!("consistency[{k}]"),
        });
        if let Some(cat) = instance.tap_catalog.get(&k) {
            for l in 0..cat.len() {
                prog.add_cone(ConeBlock::Rotated {
                    members: vec![
                        LinExpr::single(vmap.col(VarKey::TapVoltSq { branch: k, l }), 1.0),
                        LinExpr::single(vmap.col(VarKey::VoltSq(ti)), 1.0),
                        LinExpr::single(vmap.col(VarKey::TapWCos { branch: k, l }), 1.0),
                        LinExpr::single(vmap.col(VarKey::TapWSin { branch: k, l }), 1.0),
                    ],
                    name: format!("consistency[{k},{l}]"),
                });
            }
        }
    }

    prog.validate().map_err(|e| FormulationError::Inconsistent(e.to_string()))?;
    Ok((prog, vmap))
}

/// The four arctangent outer-approximation hyperplanes for one line.
///
/// With `t = theta_j - theta_i`, `s = M sin t`, `c = M cos t`,
/// `M = |V_i||V_j| <= Mbar` and `t in [-tmax, tmax]`, the identity
/// `s cos(phi) - c sin(phi) = M sin(t - phi)` at `phi in {-tmax, tmax}`
/// yields, using `|sin x| <= |x|` and `M <= Mbar`:
///
/// 1. `s cos(tmax) - c sin(tmax) <= 0`
/// 2. `s cos(tmax) + c sin(tmax) >= 0`
/// 3. `s cos(tmax) + c sin(tmax) <= Mbar (t + tmax)`
/// 4. `s cos(tmax) - c sin(tmax) >= Mbar (t - tmax)`
pub fn arctan_oa_cuts(
    line: usize,
    instance: &RopfInstance,
    bounds: &BoundsTable,
    vmap: &VariableMap,
) -> Result<[LinearCut; 4], FormulationError> {
    let net = &instance.network;
    let th = net.branches[line].theta_max;
    if th >= std::f64::consts::FRAC_PI_2 {
        return Err(FormulationError::OaThetaBound { branch: line, theta: th });
    }
    let (fi, ti) = net.branch_endpoints(line);
    let mbar = bounds.c_off[line].1;
    let s = vmap.col(VarKey::WSin(line));
    let c = vmap.col(VarKey::WCos(line));
    let th_i = vmap.col(VarKey::Angle(fi));
    let th_j = vmap.col(VarKey::Angle(ti));
    let (cos_t, sin_t) = (th.cos(), th.sin());

    let mk = |coeffs: Vec<(Col, f64)>, sense: Sense, rhs: f64| LinearCut {
        coeffs,
        sense,
        rhs,
        provenance: CutProvenance::ArctanOa,
    };
    Ok([
        mk(vec![(s, cos_t), (c, -sin_t)], Sense::Le, 0.0),
        mk(vec![(s, cos_t), (c, sin_t)], Sense::Ge, 0.0),
        mk(vec![(s, cos_t), (c, sin_t), (th_j, -mbar), (th_i, mbar)], Sense::Le, mbar * th),
        mk(vec![(s, cos_t), (c, -sin_t), (th_j, -mbar), (th_i, mbar)], Sense::Ge, -mbar * th),
    ])
}

/// Substitute a full binary assignment, producing a continuous program.
///
/// `assignment` maps binary columns to their values; it must cover every
/// binary column and select exactly one candidate per SOS1 group. The
/// envelope rows then force the products of unselected candidates to zero.
pub fn fix_binaries(
    program: &ConicProgram,
    assignment: &BTreeMap<Col, bool>,
) -> Result<ConicProgram, FormulationError> {
    for (c, &is_bin) in program.binary.iter().enumerate() {
        if is_bin && !assignment.contains_key(&c) {
            return Err(FormulationError::BadAssignment(format!(
                "binary column {} not covered",
                program.col_names[c]
            )));
        }
    }
    for group in &program.sos1_groups {
        let ones = group.iter().filter(|c| assignment.get(c) == Some(&true)).count();
        if ones != 1 {
            return Err(FormulationError::BadAssignment(format!(
                "SOS1 group must select exactly one candidate, got {ones}"
            )));
        }
    }
    let mut fixed = program.clone();
    for (&c, &v) in assignment {
        if c >= fixed.num_cols() || !fixed.binary[c] {
            return Err(FormulationError::BadAssignment(format!("column {c} is not binary")));
        }
        let val = if v { 1.0 } else { 0.0 };
        fixed.lower[c] = val;
        fixed.upper[c] = val;
        fixed.binary[c] = false;
    }
    fixed.sos1_groups.clear();
    Ok(fixed)
}

/// Replace binary domains by their continuous [0, 1] relaxation.
pub fn relax_integrality(program: &ConicProgram) -> ConicProgram {
    let mut relaxed = program.clone();
    for flag in relaxed.binary.iter_mut() {
        *flag = false;
    }
    relaxed
}

/// One catalog candidate per group.
#[derive(Clone, Debug, Default)]
pub struct CatalogChoice {
    /// bus index -> selected candidate position.
    pub shunt: BTreeMap<usize, usize>,
    /// branch index -> selected candidate position.
    pub tap: BTreeMap<usize, usize>,
}

/// Lift a physical operating point into the program's variable space.
///
/// Given per-bus voltage magnitudes/angles and one catalog candidate per
/// group, computes the exact values of every lifted column: voltage
/// products, flows at the selected taps, catalog products, epigraph values,
/// and generator injections derived from the bus balances (split equally
/// among the generators at a bus). Points produced this way satisfy every
/// structural row and cone of [`build_misocp`] by construction; this is the
/// oracle behind the relaxation-soundness and cut-validity suites.
pub fn lift_point(
    instance: &RopfInstance,
    vmap: &VariableMap,
    vm: &[f64],
    theta: &[f64],
    choice: &CatalogChoice,
) -> Vec<f64> {
    let net = &instance.network;
    let nb = net.buses.len();
    let nl = net.branches.len();
    let slack = net.buses.iter().position(|b| b.bus_type == BusType::Slack).unwrap_or(0);
    let mut x = vec![0.0; vmap.len()];

    let shift = theta[slack];
    let th: Vec<f64> = theta.iter().map(|t| t - shift).collect();

    for i in 0..nb {
        x[vmap.col(VarKey::VoltSq(i))] = vm[i] * vm[i];
        if let Some(c) = vmap.get(VarKey::Angle(i)) {
            x[c] = th[i];
        }
    }
    for k in 0..nl {
        let (fi, ti) = net.branch_endpoints(k);
        let d = th[fi] - th[ti];
        let m = vm[fi] * vm[ti];
        x[vmap.col(VarKey::WCos(k))] = m * d.cos();
        x[vmap.col(VarKey::WSin(k))] = -m * d.sin();
    }
    for (&bus, cat) in &instance.shunt_catalog {
        let sel = choice.shunt[&bus];
        let cii = x[vmap.col(VarKey::VoltSq(bus))];
        for k in 0..cat.len() {
            let on = k == sel;
            x[vmap.col(VarKey::ShuntSel { bus, k })] = if on { 1.0 } else { 0.0 };
            x[vmap.col(VarKey::ShuntProd { bus, k })] = if on { cii } else { 0.0 };
        }
    }
    for (&branch, cat) in &instance.tap_catalog {
        let sel = choice.tap[&branch];
        let (fi, _) = net.branch_endpoints(branch);
        let cii = x[vmap.col(VarKey::VoltSq(fi))];
        let cij = x[vmap.col(VarKey::WCos(branch))];
        let sij = x[vmap.col(VarKey::WSin(branch))];
        for l in 0..cat.len() {
            let on = l == sel;
            x[vmap.col(VarKey::TapSel { branch, l })] = if on { 1.0 } else { 0.0 };
            x[vmap.col(VarKey::TapVoltSq { branch, l })] = if on { cii } else { 0.0 };
            x[vmap.col(VarKey::TapWCos { branch, l })] = if on { cij } else { 0.0 };
            x[vmap.col(VarKey::TapWSin { branch, l })] = if on { sij } else { 0.0 };
        }
    }
    for k in 0..nl {
        let br = &net.branches[k];
        let tap = match (instance.tap_catalog.get(&k), choice.tap.get(&k)) {
            (Some(cat), Some(&sel)) => cat[sel],
            _ => br.effective_tap(),
        };
        let fc = FlowCoeffs::new(br, tap).expect("valid branch");
        let (fi, ti) = net.branch_endpoints(k);
        let cii = x[vmap.col(VarKey::VoltSq(fi))];
        let cjj = x[vmap.col(VarKey::VoltSq(ti))];
        let cij = x[vmap.col(VarKey::WCos(k))];
        let sij = x[vmap.col(VarKey::WSin(k))];
        x[vmap.col(VarKey::FlowP(k, Dir::FromTo))] =
            fc.p_from[0] * cii + fc.p_from[1] * cij + fc.p_from[2] * sij;
        x[vmap.col(VarKey::FlowQ(k, Dir::FromTo))] =
            fc.q_from[0] * cii + fc.q_from[1] * cij + fc.q_from[2] * sij;
        x[vmap.col(VarKey::FlowP(k, Dir::ToFrom))] =
            fc.p_to[0] * cjj + fc.p_to[1] * cij + fc.p_to[2] * sij;
        x[vmap.col(VarKey::FlowQ(k, Dir::ToFrom))] =
            fc.q_to[0] * cjj + fc.q_to[1] * cij + fc.q_to[2] * sij;
    }
    for i in 0..nb {
        let gens = net.gens_at(i);
        if gens.is_empty() {
            continue;
        }
        let bus = &net.buses[i];
        let cii = x[vmap.col(VarKey::VoltSq(i))];
        let mut p_inj = bus.p_load + bus.g_shunt * cii;
        let b_eff = match (instance.shunt_catalog.get(&i), choice.shunt.get(&i)) {
            (Some(cat), Some(&sel)) => cat[sel],
            _ => bus.b_shunt_fixed,
        };
        let mut q_inj = bus.q_load - b_eff * cii;
        for &k in &net.adjacency[i] {
            let (fi, _) = net.branch_endpoints(k);
            let dir = if fi == i { Dir::FromTo } else { Dir::ToFrom };
            p_inj += x[vmap.col(VarKey::FlowP(k, dir))];
            q_inj += x[vmap.col(VarKey::FlowQ(k, dir))];
        }
        let share = 1.0 / gens.len() as f64;
        for &g in &gens {
            let p = p_inj * share;
            x[vmap.col(VarKey::GenP(g))] = p;
            x[vmap.col(VarKey::GenQ(g))] = q_inj * share;
            x[vmap.col(VarKey::CostEpi(g))] = net.generators[g].cost.eval(p);
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::{self, ShuntRule, TapRule};
    use crate::conic::{solve_socp, SolveStatus, SolverParams};
    use crate::program::ConeBlock;

    const CASE3: &str = include_str!("../fixtures/nesta_case3_lmbd.m");

    fn case3_instance() -> RopfInstance {
        let net = case_io::parse_matpower(CASE3).unwrap();
        RopfInstance::fixed(net)
    }

    fn two_bus_linear() -> RopfInstance {
        let text = "function mpc = twobus\nmpc.baseMVA = 100;\n\
            mpc.bus = [\n1 3 0 0 0 0 1 1 0 240 1 1.1 0.9;\n2 1 40 10 0 0 1 1 0 240 1 1.1 0.9;\n];\n\
            mpc.gen = [\n1 0 0 100 -100 1 100 1 100 0;\n];\n\
            mpc.gencost = [\n2 0 0 2 5.0 0;\n];\n\
            mpc.branch = [\n1 2 0.01 0.1 0.02 100 0 0 0 0 1 -30 30;\n];\n";
        RopfInstance::fixed(case_io::parse_matpower(text).unwrap())
    }

    #[test]
    fn bounds_formulas() {
        // Vmax = 1.1, Vmin = 0.9, theta_max = 30 deg. The cosine-product
        // lower bound uses the voltage minima (the published upper-bound
        // variant would exclude feasible low-voltage points).
        let inst = case3_instance();
        let b = compute_bounds(&inst).unwrap();
        for k in 0..3 {
            approx::assert_relative_eq!(b.c_off[k].1, 1.21, epsilon = 1e-12);
            approx::assert_relative_eq!(b.c_off[k].0, 0.81 * (3f64.sqrt() / 2.0), epsilon = 1e-12);
            approx::assert_relative_eq!(b.s_off[k].1, 0.605, epsilon = 1e-12);
            approx::assert_relative_eq!(b.s_off[k].0, -0.605, epsilon = 1e-12);
            assert!(b.c_off[k].0 > 0.0);
        }
        // Unit box with theta_max = pi/2.
        let mut inst2 = case3_instance();
        for bus in inst2.network.buses.iter_mut() {
            bus.v_min = 1.0;
            bus.v_max = 1.0;
        }
        for br in inst2.network.branches.iter_mut() {
            br.theta_max = std::f64::consts::FRAC_PI_2;
        }
        let b2 = compute_bounds(&inst2).unwrap();
        assert_eq!(b2.c_diag[0], (1.0, 1.0));
        approx::assert_relative_eq!(b2.c_off[0].0, 0.0, epsilon = 1e-12);
        approx::assert_relative_eq!(b2.s_off[0].1, 1.0, epsilon = 1e-12);
        // Beyond pi/2 is rejected.
        inst2.network.branches[0].theta_max = 2.0;
        assert!(matches!(compute_bounds(&inst2), Err(FormulationError::ThetaBound { .. })));
    }

    #[test]
    fn no_catalog_build_shape() {
        let inst = two_bus_linear();
        let bounds = compute_bounds(&inst).unwrap();
        let (prog, _) =
            build_misocp(&inst, &bounds, &BuildOptions { mode: RelaxationMode::Misocp }).unwrap();
        assert!(!prog.has_binaries());
        let rotated = prog.cones.iter().filter(|c| matches!(c, ConeBlock::Rotated { .. })).count();
        // Exactly one rotated consistency cone for the single line (linear
        // cost contributes no cone).
        assert_eq!(rotated, 1);
    }

    #[test]
    fn shunt_group_counts() {
        let mut net = case3_instance().network;
        net.buses[2].b_shunt_fixed = 0.19;
        let inst = case_io::attach_catalogs(
            &net,
            &[0.0, 1.0],
            &[],
            &ShuntRule::ExistingShunts,
            &TapRule::None,
        )
        .unwrap();
        let bounds = compute_bounds(&inst).unwrap();
        let (prog, vmap) =
            build_misocp(&inst, &bounds, &BuildOptions { mode: RelaxationMode::Misocp }).unwrap();
        assert_eq!(prog.binary.iter().filter(|&&b| b).count(), 2);
        assert!(vmap.get(VarKey::ShuntProd { bus: 2, k: 0 }).is_some());
        assert!(vmap.get(VarKey::ShuntProd { bus: 2, k: 1 }).is_some());
        assert_eq!(prog.sos1_groups.len(), 1);
        let env_rows = prog.rows.iter().filter(|r| r.name.starts_with("env:gamma")).count();
        assert_eq!(env_rows, 4);
        assert!(prog.rows.iter().any(|r| r.name == "sel:alpha[2]"));
        assert!(prog.rows.iter().any(|r| r.name == "sum:gamma[2]"));
    }

    #[test]
    fn tap_group_counts() {
        let inst = case_io::attach_catalogs(
            &case3_instance().network,
            &[],
            &[0.9, 0.95, 1.0, 1.05, 1.1],
            &ShuntRule::None,
            &TapRule::Branches(vec![0]),
        )
        .unwrap();
        let bounds = compute_bounds(&inst).unwrap();
        let (prog, vmap) =
            build_misocp(&inst, &bounds, &BuildOptions { mode: RelaxationMode::Misocp }).unwrap();
        for l in 0..5 {
            assert!(vmap.get(VarKey::TapSel { branch: 0, l }).is_some());
            assert!(vmap.get(VarKey::TapVoltSq { branch: 0, l }).is_some());
            assert!(vmap.get(VarKey::TapWCos { branch: 0, l }).is_some());
            assert!(vmap.get(VarKey::TapWSin { branch: 0, l }).is_some());
        }
        // 6 rotated cones for line 0 (1 + 5 candidates), 1 per other line,
        // and 2 quadratic cost cones (the third generator's cost is linear).
        let rotated = prog.cones.iter().filter(|c| matches!(c, ConeBlock::Rotated { .. })).count();
        assert_eq!(rotated, 6 + 2 + 2);
    }

    #[test]
    fn fix_and_relax() {
        let inst = case_io::attach_catalogs(
            &case3_instance().network,
            &[],
            &[0.9, 0.95, 1.0, 1.05, 1.1],
            &ShuntRule::None,
            &TapRule::Branches(vec![1]),
        )
        .unwrap();
        let bounds = compute_bounds(&inst).unwrap();
        let (prog, vmap) =
            build_misocp(&inst, &bounds, &BuildOptions { mode: RelaxationMode::Misocp }).unwrap();

        // Selecting tau = 1 must reproduce the no-catalog optimum.
        let mut assignment = BTreeMap::new();
        for l in 0..5 {
            assignment.insert(vmap.col(VarKey::TapSel { branch: 1, l }), l == 2);
        }
        let fixed = fix_binaries(&prog, &assignment).unwrap();
        assert!(!fixed.has_binaries());

        let base = case3_instance();
        let bounds0 = compute_bounds(&base).unwrap();
        let (prog0, _) =
            build_misocp(&base, &bounds0, &BuildOptions { mode: RelaxationMode::Misocp }).unwrap();

        let params = SolverParams::pipeline();
        let sol_fixed = solve_socp(&fixed, &params).unwrap();
        let sol_base = solve_socp(&prog0, &params).unwrap();
        assert_eq!(sol_fixed.status, SolveStatus::Optimal);
        assert_eq!(sol_base.status, SolveStatus::Optimal);
        approx::assert_relative_eq!(sol_fixed.objective, sol_base.objective, max_relative = 1e-6);

        // Relaxed optimum <= fixed optimum (relaxation ordering).
        let relaxed = relax_integrality(&prog);
        assert!(!relaxed.has_binaries());
        let sol_rel = solve_socp(&relaxed, &params).unwrap();
        assert_eq!(sol_rel.status, SolveStatus::Optimal);
        assert!(sol_rel.objective <= sol_fixed.objective + 1e-6 * sol_fixed.objective.abs());

        // Two selections in one group: error.
        let mut bad = assignment.clone();
        bad.insert(vmap.col(VarKey::TapSel { branch: 1, l: 0 }), true);
        assert!(fix_binaries(&prog, &bad).is_err());

        // No binaries + empty assignment = identity.
        let id = fix_binaries(&prog0, &BTreeMap::new()).unwrap();
        assert_eq!(id.num_cols(), prog0.num_cols());
        assert_eq!(id.rows.len(), prog0.rows.len());
    }

    #[test]
    fn oa_cut_examples() {
        let inst = case3_instance();
        let bounds = compute_bounds(&inst).unwrap();
        let (_, vmap) =
            build_misocp(&inst, &bounds, &BuildOptions { mode: RelaxationMode::Misocpa }).unwrap();
        let cuts = arctan_oa_cuts(0, &inst, &bounds, &vmap).unwrap();
        assert_eq!(cuts.len(), 4);
        for cut in &cuts {
            assert!(cut.coeffs.len() >= 2);
            assert!(cut.coeffs.iter().all(|(_, v)| v.is_finite()));
        }
        // Boundary tangency: t = tmax, M = Mbar gives equality on cut 1.
        let th = inst.network.branches[0].theta_max;
        let mbar = bounds.c_off[0].1;
        let (fi, ti) = inst.network.branch_endpoints(0);
        let mut x = vec![0.0; vmap.len()];
        // theta_j - theta_i = tmax means s = Mbar sin(tmax), c = Mbar cos(tmax).
        x[vmap.col(VarKey::Angle(fi))] = 0.0;
        x[vmap.col(VarKey::Angle(ti))] = th;
        x[vmap.col(VarKey::WSin(0))] = mbar * th.sin();
        x[vmap.col(VarKey::WCos(0))] = mbar * th.cos();
        approx::assert_relative_eq!(cuts[0].violation(&x), 0.0, epsilon = 1e-12);
        for cut in &cuts {
            assert!(cut.violation(&x) <= 1e-12);
        }

        // theta_max >= pi/2 is rejected.
        let mut wide = case3_instance();
        wide.network.branches[0].theta_max = std::f64::consts::FRAC_PI_2;
        let b2 = compute_bounds(&wide).unwrap();
        assert!(arctan_oa_cuts(0, &wide, &b2, &vmap).is_err());
    }

    #[test]
    fn lifted_points_satisfy_everything() {
        // Deterministic grid of voltage profiles on case3 with a tap + shunt
        // catalog: every lifted point must satisfy all rows and cones.
        let mut net = case3_instance().network;
        net.buses[1].b_shunt_fixed = 0.10;
        let inst = case_io::attach_catalogs(
            &net,
            &[0.0, 1.0],
            &[0.9, 1.0, 1.1],
            &ShuntRule::ExistingShunts,
            &TapRule::Branches(vec![2]),
        )
        .unwrap();
        let bounds = compute_bounds(&inst).unwrap();
        let (prog, vmap) =
            build_misocp(&inst, &bounds, &BuildOptions { mode: RelaxationMode::Misocpa }).unwrap();

        let mut worst: f64 = 0.0;
        for &v1 in &[0.92, 1.0, 1.08] {
            for &v2 in &[0.95, 1.05] {
                for &t2 in &[-0.3, 0.0, 0.25] {
                    for &t3 in &[-0.2, 0.1] {
                        for shunt_sel in 0..2 {
                            for tap_sel in 0..3 {
                                let vm = [v1, v2, 1.0];
                                let th = [0.0, t2, t3];
                                let choice = CatalogChoice {
                                    shunt: BTreeMap::from([(1, shunt_sel)]),
                                    tap: BTreeMap::from([(2, tap_sel)]),
                                };
                                let x = lift_point(&inst, &vmap, &vm, &th, &choice);
                                for row in &prog.rows {
                                    worst = worst.max(row.violation(&x));
                                }
                                for cone in &prog.cones {
                                    // Apparent-power limits are box
                                    // constraints on the sample, not lifting
                                    // structure; free voltage profiles may
                                    // overload a line and are then simply
                                    // not feasible operating points.
                                    if cone.name().starts_with("smax") {
                                        continue;
                                    }
                                    worst = worst.max(cone.violation(&x));
                                }
                            }
                        }
                    }
                }
            }
        }
        assert!(worst <= 1e-9, "worst violation {worst}");
    }
}
