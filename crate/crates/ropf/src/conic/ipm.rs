//! Embedded homogeneous self-dual interior-point method for SOCPs.
//!
//! Solves the standard form `min c'x  s.t. Ax = b, Gx + s = h, s in K` via the
//! self-dual embedding in `(x, y, z, s, tau, kappa)` with Nesterov-Todd
//! scaling and Mehrotra predictor-corrector steps. Each iteration factors the
//! quasi-definite KKT system
//!
//! ```text
//! [ eps I    A'        G'     ]
//! [ A      -eps I      0      ]
//! [ G        0     -W^2-eps I ]
//! ```
//!
//! by sparse LDL' (static regularization `eps`, iterative refinement against
//! the unregularized matrix, at most two passes). Ruiz equilibration is
//! applied once up front; SOC rows share a single scale factor per block so
//! cone geometry is preserved. Termination is decided on residuals of the
//! original (unscaled) data.

use super::cone;
use super::ldl::{rcm_order, LdlFactor};
use super::sparse::{dot, norm2, CscMat};
use super::stdform::{ConeDims, StdForm};

const STATIC_REG: f64 = 1e-9;
/// Dynamic pivot floor for the LDL factorization (sign-preserving).
const DYN_PIVOT_EPS: f64 = 1e-13;
/// Infinity-neighborhood parameter for the centrality guard.
const NEIGHBORHOOD_GAMMA: f64 = 1e-5;
const STEP_FRAC: f64 = 0.99;
const RUIZ_ITERS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IpmStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    IterationLimit,
    NumericalFailure,
}

/// Solver-space result in the units of the original standard-form data;
/// `conic` maps it back to program space.
pub struct IpmResult {
    pub status: IpmStatus,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    pub obj: f64,
    pub dual_obj: f64,
    pub iterations: usize,
    /// Residual of the Farkas certificate for infeasible problems, where
    /// `(y, z)` is normalized to `b'y + h'z = -1`.
    pub certificate_violation: f64,
}

pub struct IpmSettings {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iterations: usize,
    pub verbose: bool,
}

struct Equilibration {
    d: Vec<f64>,
    ea: Vec<f64>,
    eg: Vec<f64>,
    sigma: f64,
}

fn block_starts(dims: &ConeDims) -> Vec<(usize, usize)> {
    // (offset, dim) of every cone block, nonneg coordinates as 1-dim blocks.
    let mut v = Vec::with_capacity(dims.nonneg + dims.socs.len());
    for i in 0..dims.nonneg {
        v.push((i, 1));
    }
    let mut off = dims.nonneg;
    for &q in &dims.socs {
        v.push((off, q));
        off += q;
    }
    v
}

/// Ruiz equilibration of the stacked [A; G] matrix, in place.
fn equilibrate(sf: &mut StdForm) -> Equilibration {
    let n = sf.n;
    let p = sf.b.len();
    let m = sf.h.len();
    let blocks = block_starts(&sf.dims);
    let mut d = vec![1.0; n];
    let mut ea = vec![1.0; p];
    let mut eg = vec![1.0; m];

    for _ in 0..RUIZ_ITERS {
        let mut col_max = vec![0.0f64; n];
        let mut arow_max = vec![0.0f64; p];
        let mut grow_max = vec![0.0f64; m];
        for cidx in 0..n {
            for pp in sf.a.colptr[cidx]..sf.a.colptr[cidx + 1] {
                let v = sf.a.values[pp].abs();
                col_max[cidx] = col_max[cidx].max(v);
                arow_max[sf.a.rowind[pp]] = arow_max[sf.a.rowind[pp]].max(v);
            }
            for pp in sf.g.colptr[cidx]..sf.g.colptr[cidx + 1] {
                let v = sf.g.values[pp].abs();
                col_max[cidx] = col_max[cidx].max(v);
                grow_max[sf.g.rowind[pp]] = grow_max[sf.g.rowind[pp]].max(v);
            }
        }
        let mut dcol: Vec<f64> =
            col_max.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        let mut da: Vec<f64> =
            arow_max.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        let mut dg = vec![1.0; m];
        // One factor per cone block.
        for &(off, dim) in &blocks {
            let mx = grow_max[off..off + dim].iter().fold(0.0f64, |a, &b| a.max(b));
            let f = if mx > 0.0 { 1.0 / mx.sqrt() } else { 1.0 };
            for k in 0..dim {
                dg[off + k] = f;
            }
        }
        for v in dcol.iter_mut().chain(da.iter_mut()).chain(dg.iter_mut()) {
            *v = v.clamp(1e-4, 1e4);
        }
        for cidx in 0..n {
            for pp in sf.a.colptr[cidx]..sf.a.colptr[cidx + 1] {
                sf.a.values[pp] *= dcol[cidx] * da[sf.a.rowind[pp]];
            }
            for pp in sf.g.colptr[cidx]..sf.g.colptr[cidx + 1] {
                sf.g.values[pp] *= dcol[cidx] * dg[sf.g.rowind[pp]];
            }
        }
        for j in 0..n {
            d[j] *= dcol[j];
        }
        for i in 0..p {
            ea[i] *= da[i];
            sf.b[i] *= da[i];
        }
        for i in 0..m {
            eg[i] *= dg[i];
            sf.h[i] *= dg[i];
        }
    }
    for j in 0..n {
        sf.c[j] *= d[j];
    }
    let cmax = CscMat::infinity_norm(&sf.c);
    let sigma = if cmax > 0.0 { 1.0 / cmax.max(1.0) } else { 1.0 };
    for v in sf.c.iter_mut() {
        *v *= sigma;
    }
    Equilibration { d, ea, eg, sigma }
}

struct Kkt {
    n: usize,
    p: usize,
    m: usize,
    dims: ConeDims,
    /// pinv[old] = new position under the fill-reducing permutation.
    pinv: Vec<usize>,
    /// Expected pivot sign per permuted row (+1 on the x block).
    signs: Vec<i8>,
    factor: LdlFactor,
    /// Triplet coordinates (natural ordering) fixed across refactorizations.
    coords: Vec<(usize, usize)>,
    sources: Vec<KktEntry>,
    raw: CscMat,
    reg: CscMat,
    refine_work: Vec<f64>,
}

#[derive(Clone, Copy)]
enum KktEntry {
    ConstDiagPos,
    ConstDiagNeg,
    AVal(usize),
    GVal(usize),
    /// Nonnegative-cone diagonal entry i of W^2.
    WNonneg(usize),
    /// SOC block `cone` entry (i, j) of its dense W^2.
    WSoc { cone: usize, i: usize, j: usize },
}

impl Kkt {
    fn new(sf: &StdForm) -> Self {
        let n = sf.n;
        let p = sf.b.len();
        let m = sf.h.len();
        let nk = n + p + m;
        let mut coords = Vec::new();
        let mut sources = Vec::new();

        for j in 0..n {
            coords.push((j, j));
            sources.push(KktEntry::ConstDiagPos);
        }
        for i in 0..p {
            coords.push((n + i, n + i));
            sources.push(KktEntry::ConstDiagNeg);
        }
        for j in 0..n {
            for pp in sf.a.colptr[j]..sf.a.colptr[j + 1] {
                coords.push((j, n + sf.a.rowind[pp]));
                sources.push(KktEntry::AVal(pp));
            }
        }
        for j in 0..n {
            for pp in sf.g.colptr[j]..sf.g.colptr[j + 1] {
                coords.push((j, n + p + sf.g.rowind[pp]));
                sources.push(KktEntry::GVal(pp));
            }
        }
        for i in 0..sf.dims.nonneg {
            coords.push((n + p + i, n + p + i));
            sources.push(KktEntry::WNonneg(i));
        }
        let mut off = sf.dims.nonneg;
        for (cidx, &q) in sf.dims.socs.iter().enumerate() {
            for i in 0..q {
                for j in i..q {
                    coords.push((n + p + off + i, n + p + off + j));
                    sources.push(KktEntry::WSoc { cone: cidx, i, j });
                }
            }
            off += q;
        }

        let pattern: Vec<(usize, usize, f64)> = coords
            .iter()
            .map(|&(i, j)| if i <= j { (i, j, 1.0) } else { (j, i, 1.0) })
            .collect();
        let upper_nat = CscMat::from_triplets(nk, nk, &pattern);
        let perm = rcm_order(&upper_nat);
        let mut pinv = vec![0usize; nk];
        for (newi, &old) in perm.iter().enumerate() {
            pinv[old] = newi;
        }

        let permuted: Vec<(usize, usize, f64)> = coords
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (pinv[i], pinv[j]);
                if a <= b {
                    (a, b, 1.0)
                } else {
                    (b, a, 1.0)
                }
            })
            .collect();
        let upper = CscMat::from_triplets(nk, nk, &permuted);
        let factor = LdlFactor::symbolic(&upper).expect("KKT pattern is factorizable");
        let mut signs = vec![0i8; nk];
        for old in 0..nk {
            signs[pinv[old]] = if old < n { 1 } else { -1 };
        }
        Self {
            n,
            p,
            m,
            dims: sf.dims.clone(),
            pinv,
            signs,
            factor,
            coords,
            sources,
            raw: upper.clone(),
            reg: upper,
            refine_work: vec![0.0; nk],
        }
    }

    /// Refresh numeric values for the given scaling and refactor.
    fn refactor(&mut self, sf: &StdForm, scaling: Option<&cone::NtScaling>) -> Result<(), ()> {
        let nk = self.n + self.p + self.m;
        let mut tri_raw: Vec<(usize, usize, f64)> = Vec::with_capacity(self.coords.len());
        let mut tri_reg: Vec<(usize, usize, f64)> = Vec::with_capacity(self.coords.len());
        let dense_wsq: Vec<Vec<Vec<f64>>> = match scaling {
            Some(sc) => (0..self.dims.socs.len()).map(|k| sc.wsq_soc_dense(k)).collect(),
            None => Vec::new(),
        };
        for (&(i, j), src) in self.coords.iter().zip(&self.sources) {
            let (raw, reg) = match *src {
                KktEntry::ConstDiagPos => (0.0, STATIC_REG),
                KktEntry::ConstDiagNeg => (0.0, -STATIC_REG),
                KktEntry::AVal(p) => (sf.a.values[p], sf.a.values[p]),
                KktEntry::GVal(p) => (sf.g.values[p], sf.g.values[p]),
                KktEntry::WNonneg(k) => {
                    let w = scaling.map(|sc| sc.wsq_nonneg[k]).unwrap_or(1.0);
                    (-w, -w - STATIC_REG)
                }
                KktEntry::WSoc { cone, i: bi, j: bj } => {
                    let w = match scaling {
                        Some(_) => dense_wsq[cone][bi][bj],
                        None => {
                            if bi == bj {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    let diag_reg = if bi == bj { -STATIC_REG } else { 0.0 };
                    (-w, -w + diag_reg)
                }
            };
            let (a, b) = (self.pinv[i], self.pinv[j]);
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            tri_raw.push((a, b, raw));
            tri_reg.push((a, b, reg));
        }
        self.raw = CscMat::from_triplets(nk, nk, &tri_raw);
        self.reg = CscMat::from_triplets(nk, nk, &tri_reg);
        self.factor
            .factor_regularized(&self.reg, Some((&self.signs, DYN_PIVOT_EPS)))
            .map_err(|_| ())
    }

    /// Solve K u = rhs (natural ordering in/out) with iterative refinement
    /// against the unregularized matrix.
    fn solve(&mut self, rhs: &[f64]) -> Vec<f64> {
        let nk = rhs.len();
        let mut xp = vec![0.0; nk];
        for old in 0..nk {
            xp[self.pinv[old]] = rhs[old];
        }
        self.factor.solve(&mut xp);
        // Iterative refinement against the unregularized matrix, keeping the
        // best iterate seen (the contraction is not always monotone when the
        // scaling block is ill-conditioned).
        let mut best = xp.clone();
        let mut best_rn = f64::INFINITY;
        for _ in 0..10 {
            let r = &mut self.refine_work;
            for old in 0..nk {
                r[self.pinv[old]] = rhs[old];
            }
            for col in 0..nk {
                let xc = xp[col];
                for pp in self.raw.colptr[col]..self.raw.colptr[col + 1] {
                    let row = self.raw.rowind[pp];
                    let v = self.raw.values[pp];
                    r[row] -= v * xc;
                    if row != col {
                        r[col] -= v * xp[row];
                    }
                }
            }
            let rn = CscMat::infinity_norm(r);
            if rn < best_rn {
                best_rn = rn;
                best.copy_from_slice(&xp);
            }
            if rn <= 1e-14 || rn > 4.0 * best_rn {
                break;
            }
            let mut dx = r.clone();
            self.factor.solve(&mut dx);
            for i in 0..nk {
                xp[i] += dx[i];
            }
        }
        let mut out = vec![0.0; nk];
        for old in 0..nk {
            out[old] = best[self.pinv[old]];
        }
        out
    }

    fn solve_blocks(&mut self, bx: &[f64], by: &[f64], bz: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (n, p, m) = (self.n, self.p, self.m);
        let mut rhs = vec![0.0; n + p + m];
        rhs[..n].copy_from_slice(bx);
        rhs[n..n + p].copy_from_slice(by);
        rhs[n + p..].copy_from_slice(bz);
        let sol = self.solve(&rhs);
        (sol[..n].to_vec(), sol[n..n + p].to_vec(), sol[n + p..].to_vec())
    }
}

/// Norm of a scaled residual after undoing a diagonal row scale and `1/tau`.
fn unscaled_res_norm(res: &[f64], rowscale: &[f64], tau: f64) -> f64 {
    let mut acc = 0.0;
    for (r, e) in res.iter().zip(rowscale) {
        let v = r / e;
        acc += v * v;
    }
    acc.sqrt() / tau
}

pub fn solve(mut sf: StdForm, settings: &IpmSettings) -> (IpmResult, StdForm) {
    // Norms of the original data, for termination tests in original units.
    let norm_b_u = 1.0 + norm2(&sf.b);
    let norm_h_u = 1.0 + norm2(&sf.h);
    let norm_c_u = 1.0 + norm2(&sf.c);

    let eq = equilibrate(&mut sf);
    let n = sf.n;
    let p = sf.b.len();
    let m = sf.h.len();
    let dims = sf.dims.clone();
    let degree = dims.degree();

    // Row scale for rx in original units: rx_u[j] = rx[j] / (sigma * d[j]).
    let rx_scale: Vec<f64> = eq.d.iter().map(|d| d * eq.sigma).collect();

    let mut kkt = Kkt::new(&sf);

    let fail = |status: IpmStatus, iters: usize| IpmResult {
        status,
        x: vec![0.0; n],
        y: vec![0.0; p],
        z: vec![0.0; m],
        s: vec![0.0; m],
        obj: f64::NAN,
        dual_obj: f64::NAN,
        iterations: iters,
        certificate_violation: f64::NAN,
    };

    // Initialization: one W = I factorization gives least-squares primal and
    // dual starts; slacks are then shifted into the cone interior.
    if kkt.refactor(&sf, None).is_err() {
        return (unscale(fail(IpmStatus::NumericalFailure, 0), &eq), sf);
    }
    let (mut x, mut y, mut s, mut z);
    {
        let zero_x = vec![0.0; n];
        let (xi, yi, zi) = kkt.solve_blocks(&zero_x, &sf.b, &sf.h);
        x = xi;
        y = yi;
        s = zi.iter().map(|v| -v).collect::<Vec<f64>>();
        let negc: Vec<f64> = sf.c.iter().map(|v| -v).collect();
        let (_, _, zd) = kkt.solve_blocks(&negc, &vec![0.0; p], &vec![0.0; m]);
        z = zd;
    }
    let e_id = cone::identity(&dims);
    for vec in [&mut s, &mut z] {
        let me = cone::min_eig(&dims, vec);
        if me < 1e-8 {
            let shift = -me + 1.0;
            for (i, ev) in e_id.iter().enumerate() {
                vec[i] += shift * ev;
            }
        }
    }
    let mut tau = 1.0f64;
    let mut kappa = 1.0f64;

    let mut iterations = 0;
    let mut work_prod = vec![0.0; m];
    // Best iterate seen, by worst-metric merit; returned on iteration limit.
    let mut best_merit = f64::INFINITY;
    let mut best_point: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64)> = None;

    for iter in 0..settings.max_iterations {
        iterations = iter;

        // Residuals of the self-dual embedding (scaled space).
        let mut rx = vec![0.0; n]; // A'y + G'z + c*tau
        sf.a.mul_t_acc(1.0, &y, &mut rx);
        sf.g.mul_t_acc(1.0, &z, &mut rx);
        for j in 0..n {
            rx[j] += sf.c[j] * tau;
        }
        let mut ry = vec![0.0; p]; // A x - b*tau
        sf.a.mul_acc(1.0, &x, &mut ry);
        for i in 0..p {
            ry[i] -= sf.b[i] * tau;
        }
        let mut rz = vec![0.0; m]; // G x + s - h*tau
        sf.g.mul_acc(1.0, &x, &mut rz);
        for i in 0..m {
            rz[i] += s[i] - sf.h[i] * tau;
        }
        let cx = dot(&sf.c, &x);
        let by = dot(&sf.b, &y);
        let hz = dot(&sf.h, &z);
        let rt = kappa + cx + by + hz;

        // Convergence metrics in original units.
        let pcost = cx / (tau * eq.sigma);
        let dcost = -(by + hz) / (tau * eq.sigma);
        let gap = dot(&s, &z) / (tau * tau * eq.sigma);
        let relgap = gap / (1.0f64).max(pcost.abs()).max(dcost.abs());
        let pres = (unscaled_res_norm(&ry, &eq.ea, tau) / norm_b_u)
            .max(unscaled_res_norm(&rz, &eq.eg, tau) / norm_h_u);
        let dres = unscaled_res_norm(&rx, &rx_scale, tau) / norm_c_u;

        if settings.verbose {
            log::debug!(
                "ipm iter {iter}: pcost={pcost:.8e} gap={gap:.2e} pres={pres:.2e} dres={dres:.2e} tau={tau:.2e} kappa={kappa:.2e} mineig_s={:.2e} mineig_z={:.2e}",
                cone::min_eig(&dims, &s), cone::min_eig(&dims, &z)
            );
        }

        let merit = pres.max(dres).max(relgap);
        if merit < best_merit {
            best_merit = merit;
            best_point = Some((x.clone(), y.clone(), z.clone(), s.clone(), tau));
        }
        if pres <= settings.feas_tol && dres <= settings.feas_tol && relgap <= settings.gap_tol {
            let r = IpmResult {
                status: IpmStatus::Optimal,
                x: x.iter().map(|v| v / tau).collect(),
                y: y.iter().map(|v| v / tau).collect(),
                z: z.iter().map(|v| v / tau).collect(),
                s: s.iter().map(|v| v / tau).collect(),
                obj: pcost,
                dual_obj: dcost,
                iterations: iter,
                certificate_violation: 0.0,
            };
            return (unscale(r, &eq), sf);
        }

        // Primal infeasibility certificate: A'y + G'z ~ 0, b'y + h'z < 0.
        if by + hz < -1e-10 {
            let scale = -(by + hz);
            let mut atygz = vec![0.0; n];
            sf.a.mul_t_acc(1.0, &y, &mut atygz);
            sf.g.mul_t_acc(1.0, &z, &mut atygz);
            let res = unscaled_res_norm(&atygz, &eq.d, scale / eq.sigma) / norm_c_u;
            if res <= settings.feas_tol * 1e-2
                || (res <= settings.feas_tol && tau <= 1e-7 * kappa.max(1.0))
            {
                let r = IpmResult {
                    status: IpmStatus::PrimalInfeasible,
                    x: vec![0.0; n],
                    y: y.iter().map(|v| v / scale).collect(),
                    z: z.iter().map(|v| v / scale).collect(),
                    s: vec![0.0; m],
                    obj: f64::INFINITY,
                    dual_obj: f64::INFINITY,
                    iterations: iter,
                    certificate_violation: res,
                };
                return (unscale_certificate(r, &eq), sf);
            }
        }
        // Dual infeasibility (primal unbounded): Ax ~ 0, Gx + s ~ 0, c'x < 0.
        if cx < -1e-10 {
            let scale = -cx / eq.sigma;
            let mut ax = vec![0.0; p];
            sf.a.mul_acc(1.0, &x, &mut ax);
            let mut gxs = vec![0.0; m];
            sf.g.mul_acc(1.0, &x, &mut gxs);
            for i in 0..m {
                gxs[i] += s[i];
            }
            let res = (unscaled_res_norm(&ax, &eq.ea, scale) / norm_b_u)
                .max(unscaled_res_norm(&gxs, &eq.eg, scale) / norm_h_u);
            if res <= settings.feas_tol * 1e-2
                || (res <= settings.feas_tol && tau <= 1e-7 * kappa.max(1.0))
            {
                let r = IpmResult {
                    status: IpmStatus::DualInfeasible,
                    x: x.iter().map(|v| v / (scale * eq.sigma)).collect(),
                    y: vec![0.0; p],
                    z: vec![0.0; m],
                    s: s.iter().map(|v| v / (scale * eq.sigma)).collect(),
                    obj: f64::NEG_INFINITY,
                    dual_obj: f64::NEG_INFINITY,
                    iterations: iter,
                    certificate_violation: res,
                };
                return (unscale_certificate(r, &eq), sf);
            }
        }

        // NT scaling and KKT refactorization.
        let scaling = match cone::NtScaling::compute(&dims, &s, &z) {
            Some(sc) => sc,
            None => {
                log::debug!("ipm: NT scaling failed at iter {iter}");
                return (unscale(fail(IpmStatus::NumericalFailure, iter), &eq), sf);
            }
        };
        if kkt.refactor(&sf, Some(&scaling)).is_err() {
            log::debug!("ipm: KKT refactorization failed at iter {iter}");
            return (unscale(fail(IpmStatus::NumericalFailure, iter), &eq), sf);
        }
        let lambda = scaling.lambda.clone();
        let mu = (dot(&lambda, &lambda) + tau * kappa) / (degree as f64 + 1.0);

        // Constant-rhs solve shared by predictor and corrector.
        let (ux, uy, uz) = {
            let negc: Vec<f64> = sf.c.iter().map(|v| -v).collect();
            kkt.solve_blocks(&negc, &sf.b, &sf.h)
        };
        let cu = dot(&sf.c, &ux) + dot(&sf.b, &uy) + dot(&sf.h, &uz);

        let direction = |sigma: f64,
                             ds_target: &[f64],
                             dtk_target: f64,
                             kkt: &mut Kkt|
         -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64, f64) {
            let fac = 1.0 - sigma;
            let mut lam_inv_ds = vec![0.0; m];
            cone::jordan_solve(&dims, &lambda, ds_target, &mut lam_inv_ds);
            let mut w_lam = vec![0.0; m];
            scaling.apply_w(&dims, &lam_inv_ds, &mut w_lam);
            let bx: Vec<f64> = rx.iter().map(|v| -fac * v).collect();
            let by_: Vec<f64> = ry.iter().map(|v| -fac * v).collect();
            let bz: Vec<f64> = rz.iter().zip(&w_lam).map(|(r, w)| -fac * r - w).collect();
            let (vx, vy, vz) = kkt.solve_blocks(&bx, &by_, &bz);
            let cv = dot(&sf.c, &vx) + dot(&sf.b, &vy) + dot(&sf.h, &vz);
            let dtau = (dtk_target / tau + fac * rt + cv) / (kappa / tau - cu);
            let dx: Vec<f64> = vx.iter().zip(&ux).map(|(v, u)| v + dtau * u).collect();
            let dy: Vec<f64> = vy.iter().zip(&uy).map(|(v, u)| v + dtau * u).collect();
            let dz: Vec<f64> = vz.iter().zip(&uz).map(|(v, u)| v + dtau * u).collect();
            // ds = W(lambda \ ds_target - W dz)
            let mut wdz = vec![0.0; m];
            scaling.apply_w(&dims, &dz, &mut wdz);
            let diff: Vec<f64> = lam_inv_ds.iter().zip(&wdz).map(|(a, b)| a - b).collect();
            let mut ds = vec![0.0; m];
            scaling.apply_w(&dims, &diff, &mut ds);
            let dkappa = -fac * rt - (dot(&sf.c, &dx) + dot(&sf.b, &dy) + dot(&sf.h, &dz));
            (dx, dy, dz, ds, dtau, dkappa)
        };

        // Predictor.
        cone::jordan_prod(&dims, &lambda, &lambda, &mut work_prod);
        let ds_aff: Vec<f64> = work_prod.iter().map(|v| -v).collect();
        let (_adx, _ady, adz, ads, adtau, adkappa) =
            direction(0.0, &ds_aff, -tau * kappa, &mut kkt);

        let mut winv_ds = vec![0.0; m];
        scaling.apply_winv(&dims, &ads, &mut winv_ds);
        let mut w_dz = vec![0.0; m];
        scaling.apply_w(&dims, &adz, &mut w_dz);
        let mut alpha_aff =
            cone::max_step(&dims, &lambda, &winv_ds).min(cone::max_step(&dims, &lambda, &w_dz));
        if adtau < 0.0 {
            alpha_aff = alpha_aff.min(-tau / adtau);
        }
        if adkappa < 0.0 {
            alpha_aff = alpha_aff.min(-kappa / adkappa);
        }
        let alpha_aff = alpha_aff.min(1.0);
        let sigma = ((1.0 - alpha_aff).powi(3)).clamp(0.0, 1.0);
        if settings.verbose {
            log::debug!("    alpha_aff={alpha_aff:.3e} sigma={sigma:.3e}");
        }

        // Corrector with Mehrotra second-order term.
        let mut corr = vec![0.0; m];
        cone::jordan_prod(&dims, &winv_ds, &w_dz, &mut corr);
        let smu = sigma * mu;
        let mut ds_comb = vec![0.0; m];
        for i in 0..m {
            ds_comb[i] = smu * e_id[i] - work_prod[i] - corr[i];
        }
        let dtk_comb = smu - tau * kappa - adtau * adkappa;
        let (dx, dy, dz, ds, dtau, dkappa) = direction(sigma, &ds_comb, dtk_comb, &mut kkt);

        let mut winv_ds2 = vec![0.0; m];
        scaling.apply_winv(&dims, &ds, &mut winv_ds2);
        let mut w_dz2 = vec![0.0; m];
        scaling.apply_w(&dims, &dz, &mut w_dz2);
        let mut alpha =
            cone::max_step(&dims, &lambda, &winv_ds2).min(cone::max_step(&dims, &lambda, &w_dz2));
        if dtau < 0.0 {
            alpha = alpha.min(-tau / dtau);
        }
        if dkappa < 0.0 {
            alpha = alpha.min(-kappa / dkappa);
        }
        let mut alpha = (STEP_FRAC * alpha).min(1.0);

        if !alpha.is_finite() || alpha < 1e-11 {
            log::debug!("ipm: step stalled (alpha = {alpha:.3e}) at iter {iter}");
            return (unscale(fail(IpmStatus::NumericalFailure, iter), &eq), sf);
        }

        // Commit the largest backed-off step that stays strictly interior,
        // preferring steps that also keep the iterate inside the centrality
        // neighborhood (collapsed per-block complementarity wrecks the KKT
        // conditioning).
        let mut committed = false;
        'outer: for demand_centrality in [true, false] {
            let mut a = alpha;
            for _ in 0..30 {
                let trial_s: Vec<f64> = s.iter().zip(&ds).map(|(v, d)| v + a * d).collect();
                let trial_z: Vec<f64> = z.iter().zip(&dz).map(|(v, d)| v + a * d).collect();
                let trial_tau = tau + a * dtau;
                let trial_kappa = kappa + a * dkappa;
                let interior = cone::min_eig(&dims, &trial_s) > 0.0
                    && cone::min_eig(&dims, &trial_z) > 0.0
                    && trial_tau > 0.0
                    && trial_kappa > 0.0;
                let ok = interior
                    && (!demand_centrality || {
                        let mu_new = (dot(&trial_s, &trial_z) + trial_tau * trial_kappa)
                            / (degree as f64 + 1.0);
                        cone::in_neighborhood(
                            &dims,
                            &trial_s,
                            &trial_z,
                            trial_tau,
                            trial_kappa,
                            mu_new,
                            NEIGHBORHOOD_GAMMA,
                        )
                    });
                if ok {
                    for j in 0..n {
                        x[j] += a * dx[j];
                    }
                    for i in 0..p {
                        y[i] += a * dy[i];
                    }
                    s = trial_s;
                    z = trial_z;
                    tau = trial_tau;
                    kappa = trial_kappa;
                    committed = true;
                    break 'outer;
                }
                a *= 0.5;
                if a < 1e-10 {
                    break;
                }
            }
        }
        if !committed {
            log::debug!("ipm: no interior step found at iter {iter}");
            return (unscale(fail(IpmStatus::NumericalFailure, iter), &eq), sf);
        }
    }

    // Iteration budget exhausted: report the best iterate seen.
    let (bx, by_vec, bz, bs, btau) = best_point.unwrap_or((x, y, z, s, tau));
    let cx = dot(&sf.c, &bx);
    let by = dot(&sf.b, &by_vec);
    let hz = dot(&sf.h, &bz);
    let r = IpmResult {
        status: IpmStatus::IterationLimit,
        x: bx.iter().map(|v| v / btau).collect(),
        y: by_vec.iter().map(|v| v / btau).collect(),
        z: bz.iter().map(|v| v / btau).collect(),
        s: bs.iter().map(|v| v / btau).collect(),
        obj: cx / (btau * eq.sigma),
        dual_obj: -(by + hz) / (btau * eq.sigma),
        iterations,
        certificate_violation: f64::NAN,
    };
    (unscale(r, &eq), sf)
}

/// Undo the equilibration on a solver-space point.
fn unscale(mut r: IpmResult, eq: &Equilibration) -> IpmResult {
    for (j, v) in r.x.iter_mut().enumerate() {
        *v *= eq.d[j];
    }
    for (i, v) in r.y.iter_mut().enumerate() {
        *v *= eq.ea[i] / eq.sigma;
    }
    for (i, v) in r.z.iter_mut().enumerate() {
        *v *= eq.eg[i] / eq.sigma;
    }
    for (i, v) in r.s.iter_mut().enumerate() {
        *v /= eq.eg[i];
    }
    r
}

/// Farkas rays scale like duals but keep their own normalization.
fn unscale_certificate(mut r: IpmResult, eq: &Equilibration) -> IpmResult {
    for (j, v) in r.x.iter_mut().enumerate() {
        *v *= eq.d[j];
    }
    for (i, v) in r.y.iter_mut().enumerate() {
        *v *= eq.ea[i];
    }
    for (i, v) in r.z.iter_mut().enumerate() {
        *v *= eq.eg[i];
    }
    for (i, v) in r.s.iter_mut().enumerate() {
        *v /= eq.eg[i];
    }
    r
}
