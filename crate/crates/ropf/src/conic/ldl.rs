//! Sparse LDL' factorization of symmetric quasi-definite matrices.
//!
//! Up-looking simplicial factorization driven by the elimination tree,
//! operating on the upper triangle in CSC form. Quasi-definite inputs (here:
//! regularized interior-point KKT systems) factor without pivoting. A reverse
//! Cuthill-McKee permutation is computed once per sparsity pattern to limit
//! fill-in.

use super::sparse::CscMat;

/// Symbolic + numeric LDL' factor of a permuted upper-triangular matrix.
pub struct LdlFactor {
    n: usize,
    /// Column pointers/indices/values of unit lower-triangular L (no diagonal).
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    etree: Vec<Option<usize>>,
    // workspaces reused across refactorizations
    y_val: Vec<f64>,
    y_flag: Vec<bool>,
    elim: Vec<usize>,
    y_idx: Vec<usize>,
    l_next: Vec<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum LdlError {
    #[error("zero pivot at column {0}; matrix is not quasi-definite")]
    ZeroPivot(usize),
    #[error("matrix must be square upper-triangular with full diagonal")]
    BadStructure,
}

impl LdlFactor {
    /// Symbolic analysis of an upper-triangular pattern (diagonal required).
    pub fn symbolic(upper: &CscMat) -> Result<Self, LdlError> {
        let n = upper.ncols;
        if upper.nrows != n {
            return Err(LdlError::BadStructure);
        }
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![usize::MAX; n];
        for j in 0..n {
            work[j] = j;
            let mut has_diag = false;
            for p in upper.colptr[j]..upper.colptr[j + 1] {
                let mut i = upper.rowind[p];
                if i == j {
                    has_diag = true;
                    continue;
                }
                if i > j {
                    return Err(LdlError::BadStructure);
                }
                while work[i] != j {
                    work[i] = j;
                    lnz[i] += 1;
                    if parent[i].is_none() {
                        parent[i] = Some(j);
                    }
                    i = parent[i].unwrap();
                }
            }
            if !has_diag {
                return Err(LdlError::BadStructure);
            }
        }
        let mut lp = vec![0usize; n + 1];
        for j in 0..n {
            lp[j + 1] = lp[j] + lnz[j];
        }
        let nnz_l = lp[n];
        Ok(Self {
            n,
            li: vec![0; nnz_l],
            lx: vec![0.0; nnz_l],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            lp,
            etree: parent,
            y_val: vec![0.0; n],
            y_flag: vec![false; n],
            elim: vec![0; n],
            y_idx: vec![0; n],
            l_next: vec![0; n],
        })
    }

    /// Numeric factorization; the pattern must match the symbolic analysis.
    pub fn factor(&mut self, upper: &CscMat) -> Result<(), LdlError> {
        self.factor_regularized(upper, None)
    }

    /// Numeric factorization with dynamic pivot regularization: a pivot whose
    /// magnitude falls below `eps` is replaced by `sign[k] * eps`, keeping the
    /// quasi-definite sign pattern. Callers compensate through iterative
    /// refinement against the unmodified matrix.
    pub fn factor_regularized(
        &mut self,
        upper: &CscMat,
        dynamic: Option<(&[i8], f64)>,
    ) -> Result<(), LdlError> {
        let n = self.n;
        self.l_next.copy_from_slice(&self.lp[..n]);
        for k in 0..n {
            let mut nnz_y = 0usize;
            let mut dk = 0.0;
            for p in upper.colptr[k]..upper.colptr[k + 1] {
                let bidx = upper.rowind[p];
                if bidx == k {
                    dk = upper.values[p];
                    continue;
                }
                self.y_val[bidx] = upper.values[p];
                if !self.y_flag[bidx] {
                    self.y_flag[bidx] = true;
                    self.elim[0] = bidx;
                    let mut nnz_e = 1usize;
                    let mut next = self.etree[bidx];
                    while let Some(nx) = next {
                        if nx >= k || self.y_flag[nx] {
                            break;
                        }
                        self.y_flag[nx] = true;
                        self.elim[nnz_e] = nx;
                        nnz_e += 1;
                        next = self.etree[nx];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        self.y_idx[nnz_y] = self.elim[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let cidx = self.y_idx[i];
                let yv = self.y_val[cidx];
                for j in self.lp[cidx]..self.l_next[cidx] {
                    self.y_val[self.li[j]] -= self.lx[j] * yv;
                }
                let slot = self.l_next[cidx];
                self.li[slot] = k;
                let lkj = yv * self.dinv[cidx];
                self.lx[slot] = lkj;
                dk -= yv * lkj;
                self.l_next[cidx] += 1;
                self.y_val[cidx] = 0.0;
                self.y_flag[cidx] = false;
            }
            if let Some((signs, eps)) = dynamic {
                if dk.abs() < eps {
                    dk = if signs[k] >= 0 { eps } else { -eps };
                }
            }
            if dk == 0.0 {
                return Err(LdlError::ZeroPivot(k));
            }
            self.d[k] = dk;
            self.dinv[k] = 1.0 / dk;
        }
        Ok(())
    }

    /// In-place solve of `L D L' x = b`.
    pub fn solve(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        for j in 0..self.n {
            let bj = b[j];
            if bj != 0.0 {
                for p in self.lp[j]..self.lp[j + 1] {
                    b[self.li[p]] -= self.lx[p] * bj;
                }
            }
        }
        for j in 0..self.n {
            b[j] *= self.dinv[j];
        }
        for j in (0..self.n).rev() {
            let mut acc = 0.0;
            for p in self.lp[j]..self.lp[j + 1] {
                acc += self.lx[p] * b[self.li[p]];
            }
            b[j] -= acc;
        }
    }
}

/// Reverse Cuthill-McKee ordering of a symmetric pattern given as an upper
/// triangle. Returns `perm` with `perm[new] = old`.
pub fn rcm_order(upper: &CscMat) -> Vec<usize> {
    let n = upper.ncols;
    let mut adj = vec![Vec::new(); n];
    for c in 0..n {
        for p in upper.colptr[c]..upper.colptr[c + 1] {
            let r = upper.rowind[p];
            if r != c {
                adj[r].push(c);
                adj[c].push(r);
            }
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(|a| a.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    // Start each component from a minimum-degree node.
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| degree[i]);
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> =
                adj[u].iter().copied().filter(|&v| !visited[v]).collect();
            nbrs.sort_by_key(|&v| degree[v]);
            for v in nbrs {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn upper_from_dense(a: &[Vec<f64>]) -> CscMat {
        let n = a.len();
        let mut trip = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                if a[i][j] != 0.0 {
                    trip.push((i, j, a[i][j]));
                }
            }
        }
        CscMat::from_triplets(n, n, &trip)
    }

    #[test]
    fn factor_and_solve_quasidefinite() {
        // [ 4  1  0; 1 -3  1; 0  1 -2 ] is quasi-definite after sign split.
        let dense = vec![
            vec![4.0, 1.0, 0.0],
            vec![1.0, -3.0, 1.0],
            vec![0.0, 1.0, -2.0],
        ];
        let upper = upper_from_dense(&dense);
        let mut f = LdlFactor::symbolic(&upper).unwrap();
        f.factor(&upper).unwrap();
        let mut x = vec![1.0, 2.0, 3.0];
        f.solve(&mut x);
        // Verify A x = b.
        let b = [
            4.0 * x[0] + 1.0 * x[1],
            x[0] - 3.0 * x[1] + x[2],
            x[1] - 2.0 * x[2],
        ];
        assert_relative_eq!(b[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(b[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(b[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn rcm_is_a_permutation() {
        let dense = vec![
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0, 1.0],
        ];
        let upper = upper_from_dense(&dense);
        let mut p = rcm_order(&upper);
        p.sort_unstable();
        assert_eq!(p, vec![0, 1, 2, 3]);
    }
}
