//! Cone algebra for the product cone `R+^l x SOC(q_1) x ... x SOC(q_k)`:
//! Jordan products, Nesterov-Todd scalings and boundary step lengths.

use super::stdform::ConeDims;

/// Iterate over (offset, dim, is_soc) blocks of the product cone.
fn blocks(dims: &ConeDims) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
    let head = if dims.nonneg > 0 { Some((0usize, dims.nonneg, false)) } else { None };
    let mut off = dims.nonneg;
    head.into_iter().chain(dims.socs.iter().map(move |&q| {
        let b = (off, q, true);
        off += q;
        b
    }))
}

/// Cone identity element `e` (ones on R+, (1,0,...,0) per SOC).
pub fn identity(dims: &ConeDims) -> Vec<f64> {
    let mut e = vec![0.0; dims.total()];
    for (off, dim, soc) in blocks(dims) {
        if soc {
            e[off] = 1.0;
        } else {
            for v in &mut e[off..off + dim] {
                *v = 1.0;
            }
        }
    }
    e
}

/// Minimum "eigenvalue": `min_i v_i` on R+ blocks, `v0 - ||v1||` on SOC blocks.
pub fn min_eig(dims: &ConeDims, v: &[f64]) -> f64 {
    let mut m = f64::INFINITY;
    for (off, dim, soc) in blocks(dims) {
        if soc {
            let x1: f64 = v[off + 1..off + dim].iter().map(|a| a * a).sum::<f64>().sqrt();
            m = m.min(v[off] - x1);
        } else {
            for &x in &v[off..off + dim] {
                m = m.min(x);
            }
        }
    }
    m
}

/// Largest `alpha` such that `v + alpha * dv` stays in the cone, given `v`
/// interior. Returns `f64::INFINITY` when unbounded.
pub fn max_step(dims: &ConeDims, v: &[f64], dv: &[f64]) -> f64 {
    let mut alpha = f64::INFINITY;
    for (off, dim, soc) in blocks(dims) {
        if soc {
            alpha = alpha.min(max_step_soc(&v[off..off + dim], &dv[off..off + dim]));
        } else {
            for i in off..off + dim {
                if dv[i] < 0.0 {
                    alpha = alpha.min(-v[i] / dv[i]);
                }
            }
        }
    }
    alpha
}

fn max_step_soc(v: &[f64], dv: &[f64]) -> f64 {
    // f(t) = (v0 + t u0)^2 - ||v1 + t u1||^2 stays positive until the first
    // root; f(0) > 0 for interior v.
    let v0 = v[0];
    let u0 = dv[0];
    let v1u1: f64 = v[1..].iter().zip(&dv[1..]).map(|(a, b)| a * b).sum();
    let v1s: f64 = v[1..].iter().map(|a| a * a).sum();
    let u1s: f64 = dv[1..].iter().map(|a| a * a).sum();
    let a = u0 * u0 - u1s;
    let b = 2.0 * (v0 * u0 - v1u1);
    let c = v0 * v0 - v1s;
    if c <= 0.0 {
        // Not interior (numerical edge); no step allowed.
        return 0.0;
    }
    if a.abs() < 1e-14 * (u0 * u0 + u1s).max(1.0) {
        return if b >= 0.0 { f64::INFINITY } else { -c / b };
    }
    let disc = b * b - 4.0 * a * c;
    if a > 0.0 {
        if disc <= 0.0 {
            return f64::INFINITY;
        }
        // Citardauq-stable roots: q = -(b + sign(b) sqrt(disc)) / 2.
        let sq = disc.sqrt();
        let q = -0.5 * (b + b.signum() * sq);
        let r1 = q / a;
        let r2 = c / q;
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        if lo > 0.0 {
            lo
        } else if hi <= 0.0 {
            f64::INFINITY
        } else {
            // f(0) > 0 excludes 0 lying strictly between real roots.
            hi
        }
    } else {
        // Opens downward; f > 0 between the roots, take the upper one.
        let sq = disc.sqrt();
        (-b - sq) / (2.0 * a)
    }
}

/// Jordan product `u o v` blockwise.
pub fn jordan_prod(dims: &ConeDims, u: &[f64], v: &[f64], out: &mut [f64]) {
    for (off, dim, soc) in blocks(dims) {
        if soc {
            let dotuv: f64 = u[off..off + dim].iter().zip(&v[off..off + dim]).map(|(a, b)| a * b).sum();
            out[off] = dotuv;
            for i in 1..dim {
                out[off + i] = u[off] * v[off + i] + v[off] * u[off + i];
            }
        } else {
            for i in off..off + dim {
                out[i] = u[i] * v[i];
            }
        }
    }
}

/// Solve `lambda o x = d` blockwise (arrow-operator solve on SOC blocks).
pub fn jordan_solve(dims: &ConeDims, lambda: &[f64], d: &[f64], out: &mut [f64]) {
    for (off, dim, soc) in blocks(dims) {
        if soc {
            let l0 = lambda[off];
            let l1 = &lambda[off + 1..off + dim];
            let d0 = d[off];
            let d1 = &d[off + 1..off + dim];
            let l1n: f64 = l1.iter().map(|a| a * a).sum();
            let l1d1: f64 = l1.iter().zip(d1).map(|(a, b)| a * b).sum();
            let x0 = (l0 * d0 - l1d1) / (l0 * l0 - l1n);
            out[off] = x0;
            for i in 1..dim {
                out[off + i] = (d[off + i] - x0 * lambda[off + i]) / l0;
            }
        } else {
            for i in off..off + dim {
                out[i] = d[i] / lambda[i];
            }
        }
    }
}

/// Nesterov-Todd scaling `W` with `lambda = W z = W^{-1} s`.
pub struct NtScaling {
    /// R+ block: w_i^2 entries.
    pub wsq_nonneg: Vec<f64>,
    /// Per SOC block: (eta, wbar).
    pub soc: Vec<(f64, Vec<f64>)>,
    pub lambda: Vec<f64>,
}

impl NtScaling {
    /// Both `s` and `z` must be cone-interior.
    pub fn compute(dims: &ConeDims, s: &[f64], z: &[f64]) -> Option<Self> {
        let mut wsq_nonneg = Vec::with_capacity(dims.nonneg);
        let mut soc = Vec::with_capacity(dims.socs.len());
        let mut lambda = vec![0.0; dims.total()];
        for (off, dim, is_soc) in blocks(dims) {
            if !is_soc {
                for i in off..off + dim {
                    if s[i] <= 0.0 || z[i] <= 0.0 {
                        return None;
                    }
                    wsq_nonneg.push(s[i] / z[i]);
                    lambda[i] = (s[i] * z[i]).sqrt();
                }
            } else {
                let sb = &s[off..off + dim];
                let zb = &z[off..off + dim];
                let sres = sb[0] * sb[0] - sb[1..].iter().map(|a| a * a).sum::<f64>();
                let zres = zb[0] * zb[0] - zb[1..].iter().map(|a| a * a).sum::<f64>();
                if sres <= 0.0 || zres <= 0.0 || sb[0] <= 0.0 || zb[0] <= 0.0 {
                    return None;
                }
                let snorm = sres.sqrt();
                let znorm = zres.sqrt();
                let sbar: Vec<f64> = sb.iter().map(|a| a / snorm).collect();
                let zbar: Vec<f64> = zb.iter().map(|a| a / znorm).collect();
                let dot_sz: f64 = sbar.iter().zip(&zbar).map(|(a, b)| a * b).sum();
                let gamma = ((1.0 + dot_sz) / 2.0).sqrt();
                let mut wbar = vec![0.0; dim];
                wbar[0] = (sbar[0] + zbar[0]) / (2.0 * gamma);
                for i in 1..dim {
                    wbar[i] = (sbar[i] - zbar[i]) / (2.0 * gamma);
                }
                let eta = (snorm / znorm).sqrt();
                let scale = (snorm * znorm).sqrt();
                // lambda = W z, computed in closed form.
                let lam = {
                    let mut l = vec![0.0; dim];
                    l[0] = gamma;
                    // lambda_1 per CVXOPT: combination of sbar1, zbar1.
                    let coef_s = (gamma + zbar[0]) / (sbar[0] + zbar[0] + 2.0 * gamma);
                    let coef_z = (gamma + sbar[0]) / (sbar[0] + zbar[0] + 2.0 * gamma);
                    for i in 1..dim {
                        l[i] = coef_s * sbar[i] + coef_z * zbar[i];
                    }
                    for v in l.iter_mut() {
                        *v *= scale;
                    }
                    l
                };
                lambda[off..off + dim].copy_from_slice(&lam);
                soc.push((eta, wbar));
            }
        }
        Some(Self { wsq_nonneg, soc, lambda })
    }

    /// `out = W u`
    pub fn apply_w(&self, dims: &ConeDims, u: &[f64], out: &mut [f64]) {
        let mut soc_idx = 0;
        for (off, dim, is_soc) in blocks(dims) {
            if !is_soc {
                for (k, i) in (off..off + dim).enumerate() {
                    out[i] = self.wsq_nonneg[k].sqrt() * u[i];
                }
            } else {
                let (eta, wbar) = &self.soc[soc_idx];
                soc_idx += 1;
                let ub = &u[off..off + dim];
                let w1u1: f64 = wbar[1..].iter().zip(&ub[1..]).map(|(a, b)| a * b).sum();
                out[off] = eta * (wbar[0] * ub[0] + w1u1);
                let k = w1u1 / (1.0 + wbar[0]);
                for i in 1..dim {
                    out[off + i] = eta * (ub[0] * wbar[i] + ub[i] + k * wbar[i]);
                }
            }
        }
    }

    /// `out = W^{-1} u`
    pub fn apply_winv(&self, dims: &ConeDims, u: &[f64], out: &mut [f64]) {
        let mut soc_idx = 0;
        for (off, dim, is_soc) in blocks(dims) {
            if !is_soc {
                for (k, i) in (off..off + dim).enumerate() {
                    out[i] = u[i] / self.wsq_nonneg[k].sqrt();
                }
            } else {
                let (eta, wbar) = &self.soc[soc_idx];
                soc_idx += 1;
                let ub = &u[off..off + dim];
                let w1u1: f64 = wbar[1..].iter().zip(&ub[1..]).map(|(a, b)| a * b).sum();
                out[off] = (wbar[0] * ub[0] - w1u1) / eta;
                let k = w1u1 / (1.0 + wbar[0]);
                for i in 1..dim {
                    out[off + i] = (-ub[0] * wbar[i] + ub[i] + k * wbar[i]) / eta;
                }
            }
        }
    }

    /// Dense `W^2` block for a SOC cone: `eta^2 (2 wbar wbar' - J)`.
    pub fn wsq_soc_dense(&self, soc_idx: usize) -> Vec<Vec<f64>> {
        let (eta, wbar) = &self.soc[soc_idx];
        let k = wbar.len();
        let e2 = eta * eta;
        let mut m = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..k {
                m[i][j] = 2.0 * e2 * wbar[i] * wbar[j];
            }
        }
        m[0][0] -= e2;
        for i in 1..k {
            m[i][i] += e2;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dims() -> ConeDims {
        ConeDims { nonneg: 2, socs: vec![3] }
    }

    #[test]
    fn identity_and_mineig() {
        let d = dims();
        let e = identity(&d);
        assert_eq!(e, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_relative_eq!(min_eig(&d, &e), 1.0);
    }

    #[test]
    fn nt_scaling_maps_s_and_z_to_lambda() {
        let d = dims();
        let s = vec![2.0, 0.5, 2.0, 0.3, -0.4];
        let z = vec![1.0, 3.0, 1.5, -0.2, 0.1];
        let sc = NtScaling::compute(&d, &s, &z).unwrap();
        // lambda must equal both W z and W^{-1} s.
        let mut wz = vec![0.0; 5];
        sc.apply_w(&d, &z, &mut wz);
        let mut wis = vec![0.0; 5];
        sc.apply_winv(&d, &s, &mut wis);
        for i in 0..5 {
            assert_relative_eq!(wz[i], sc.lambda[i], epsilon = 1e-12);
            assert_relative_eq!(wis[i], sc.lambda[i], epsilon = 1e-12);
        }
        // w_inv(w(u)) = u.
        let u = vec![0.3, -0.7, 1.1, 0.2, -0.5];
        let mut t = vec![0.0; 5];
        sc.apply_w(&d, &u, &mut t);
        let mut back = vec![0.0; 5];
        sc.apply_winv(&d, &t, &mut back);
        for i in 0..5 {
            assert_relative_eq!(back[i], u[i], epsilon = 1e-12);
        }
        // Dense W^2 of the SOC block agrees with apply_w twice.
        let m = sc.wsq_soc_dense(0);
        let ub = [u[2], u[3], u[4]];
        let mut w2u = vec![0.0; 5];
        sc.apply_w(&d, &t, &mut w2u); // t = W u, so w2u = W^2 u
        for i in 0..3 {
            let dense: f64 = (0..3).map(|j| m[i][j] * ub[j]).sum();
            assert_relative_eq!(dense, w2u[2 + i], epsilon = 1e-10);
        }
    }

    #[test]
    fn jordan_solve_inverts_prod() {
        let d = dims();
        let lam = vec![1.5, 2.0, 3.0, 1.0, -0.5];
        let x = vec![0.2, -0.3, 0.9, 0.1, 0.4];
        let mut prod = vec![0.0; 5];
        jordan_prod(&d, &lam, &x, &mut prod);
        let mut back = vec![0.0; 5];
        jordan_solve(&d, &lam, &prod, &mut back);
        for i in 0..5 {
            assert_relative_eq!(back[i], x[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn step_lengths() {
        let d = ConeDims { nonneg: 1, socs: vec![2] };
        let v = vec![1.0, 2.0, 0.0];
        // Nonneg coordinate shrinks at rate 1 -> step 1; SOC hits boundary
        // when 2 - t = t -> t = 1 for dv = (-1, (-1, 1)).
        let dv = vec![-1.0, -1.0, 1.0];
        let a = max_step(&d, &v, &dv);
        assert_relative_eq!(a, 1.0, epsilon = 1e-12);
        let unbounded = max_step(&d, &v, &vec![1.0, 1.0, 0.0]);
        assert!(unbounded.is_infinite());
    }
}

/// Centrality guard for the infinity-neighborhood: every block's
/// complementarity must stay above `gamma * mu`. For SOC blocks the
/// determinant product bounds the minimum Jordan eigenvalue pair.
pub fn in_neighborhood(
    dims: &ConeDims,
    s: &[f64],
    z: &[f64],
    tau: f64,
    kappa: f64,
    mu: f64,
    gamma: f64,
) -> bool {
    if mu <= 0.0 || tau * kappa < gamma * mu {
        return false;
    }
    let floor = gamma * mu;
    for (off, dim, soc) in blocks(dims) {
        if soc {
            let sres = s[off] * s[off]
                - s[off + 1..off + dim].iter().map(|a| a * a).sum::<f64>();
            let zres = z[off] * z[off]
                - z[off + 1..off + dim].iter().map(|a| a * a).sum::<f64>();
            // det(s) det(z) = mu^2 at perfectly centered points.
            if sres <= 0.0 || zres <= 0.0 || (sres * zres).sqrt() < floor {
                return false;
            }
        } else {
            for i in off..off + dim {
                if s[i] * z[i] < floor {
                    return false;
                }
            }
        }
    }
    true
}
