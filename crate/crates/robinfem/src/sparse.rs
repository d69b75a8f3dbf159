//! Sparse symmetric linear algebra for the assembled systems: CSR
//! operators, reverse Cuthill-McKee ordering, an envelope Cholesky
//! factorization for direct solves, and Jacobi-preconditioned conjugate
//! gradients as the large-problem fallback.
//!
//! Everything here is deterministic: assembly order never influences the
//! stored pattern (rows are sorted, duplicates summed), orderings break
//! ties by vertex index, and the iterative solver has no randomization.

use crate::{Error, Result};

/// Symmetric sparse matrix in CSR form. Both triangles are stored, which
/// keeps matvec branch-free and restriction trivial.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl SparseOperator {
    /// Build from (row, col, value) triplets; duplicates are summed and
    /// explicit zeros kept, so identical assembly inputs give identical
    /// patterns.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r >= n || c >= n {
                return Err(Error::validation(format!(
                    "triplet ({r}, {c}) outside a {n}-dof system"
                )));
            }
        }
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_unstable_by_key(|&k| (triplets[k].0, triplets[k].1));
        let mut indptr = vec![0usize; n + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (r, c, v) = triplets[k];
            if last == Some((r, c)) {
                // Same (row, col) as the previous entry: accumulate.
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                data.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Ok(SparseOperator { n, indptr, indices, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn nnz(&self) -> usize {
        self.data.len()
    }
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        self.indices[lo..hi]
            .iter()
            .copied()
            .zip(self.data[lo..hi].iter().copied())
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.data[k] * x[self.indices[k]];
            }
            y[i] = acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    /// x' A y, the bilinear form.
    pub fn quadratic_form(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            let mut row = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                row += self.data[k] * y[self.indices[k]];
            }
            acc += x[i] * row;
        }
        acc
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.indptr[i]..self.indptr[i + 1] {
                if self.indices[k] == i {
                    d[i] = self.data[k];
                }
            }
        }
        d
    }

    /// self + alpha * other, merging patterns.
    pub fn add_scaled(&self, other: &SparseOperator, alpha: f64) -> Result<SparseOperator> {
        if self.n != other.n {
            return Err(Error::validation("operator size mismatch"));
        }
        let mut triplets =
            Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                triplets.push((i, j, v));
            }
            for (j, v) in other.row(i) {
                triplets.push((i, j, alpha * v));
            }
        }
        SparseOperator::from_triplets(self.n, &triplets)
    }

    pub fn scaled(&self, alpha: f64) -> SparseOperator {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= alpha;
        }
        out
    }

    /// Principal submatrix on `keep` (sorted, deduplicated dof list), in
    /// the induced order.
    pub fn restrict(&self, keep: &[usize]) -> Result<SparseOperator> {
        let mut pos = vec![usize::MAX; self.n];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.n {
                return Err(Error::validation("restriction index out of range"));
            }
            if pos[old] != usize::MAX {
                return Err(Error::validation("duplicate restriction index"));
            }
            pos[old] = new;
        }
        let m = keep.len();
        let mut indptr = vec![0usize; m + 1];
        let mut indices = Vec::new();
        let mut data = Vec::new();
        for (new, &old) in keep.iter().enumerate() {
            for (j, v) in self.row(old) {
                if pos[j] != usize::MAX {
                    indices.push(pos[j]);
                    data.push(v);
                }
            }
            indptr[new + 1] = indices.len();
        }
        Ok(SparseOperator { n: m, indptr, indices, data })
    }

    /// Undirected adjacency (neighbors excluding self), sorted per row.
    fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i).map(|(j, _)| j).filter(move |&j| j != i)
    }
}

/// Reverse Cuthill-McKee ordering: BFS from a pseudo-peripheral vertex,
/// visiting neighbors by increasing degree (ties by index), reversed.
/// Returns `perm` with `perm[new] = old`.
pub fn rcm_ordering(op: &SparseOperator) -> Vec<usize> {
    let n = op.n();
    let degree: Vec<usize> = (0..n).map(|i| op.neighbors(i).count()).collect();
    let mut visited = vec![false; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);

    // BFS recording levels; returns (last level, eccentricity).
    let bfs = |start: usize, seen: &mut Vec<bool>, out: Option<&mut Vec<usize>>| -> (Vec<usize>, usize) {
        let mut frontier = vec![start];
        seen[start] = true;
        let mut sink: Vec<usize> = vec![start];
        let mut depth = 0;
        let mut last = frontier.clone();
        while !frontier.is_empty() {
            let mut next: Vec<usize> = Vec::new();
            for &u in &frontier {
                let mut nbrs: Vec<usize> = op.neighbors(u).filter(|&v| !seen[v]).collect();
                nbrs.sort_unstable_by_key(|&v| (degree[v], v));
                nbrs.dedup();
                for v in nbrs {
                    if !seen[v] {
                        seen[v] = true;
                        next.push(v);
                        sink.push(v);
                    }
                }
            }
            if !next.is_empty() {
                depth += 1;
                last = next.clone();
            }
            frontier = next;
        }
        if let Some(out) = out {
            out.extend_from_slice(&sink);
        }
        (last, depth)
    };

    for comp_start in 0..n {
        if visited[comp_start] {
            continue;
        }
        // Pseudo-peripheral search restricted to this component.
        let mut root = comp_start;
        let mut ecc = 0;
        loop {
            let mut seen = visited.clone();
            let (last, depth) = bfs(root, &mut seen, None);
            if depth > ecc {
                ecc = depth;
                // Farthest vertex of minimal degree, smallest index.
                root = last
                    .iter()
                    .copied()
                    .min_by_key(|&v| (degree[v], v))
                    .unwrap_or(root);
            } else {
                break;
            }
        }
        bfs(root, &mut visited, Some(&mut order));
    }
    order.reverse();
    order
}

/// Envelope (skyline) Cholesky factorization of a permuted SPD operator.
/// Fill-in stays inside the envelope, so storage is the profile size.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    /// perm[new] = old.
    perm: Vec<usize>,
    /// First stored column per row (in the permuted numbering).
    first: Vec<usize>,
    rowptr: Vec<usize>,
    vals: Vec<f64>,
}

/// Profile (stored entry count) of the envelope of `op` under `perm`.
pub fn envelope_profile(op: &SparseOperator, perm: &[usize]) -> usize {
    let n = op.n();
    let mut iperm = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        iperm[old] = new;
    }
    let mut profile = 0usize;
    for new in 0..n {
        let old = perm[new];
        let first = op
            .row(old)
            .map(|(j, _)| iperm[j])
            .filter(|&c| c <= new)
            .min()
            .unwrap_or(new);
        profile += new - first + 1;
    }
    profile
}

impl CholeskyFactor {
    /// Factor `op` (symmetric positive definite) under the given ordering.
    pub fn new(op: &SparseOperator, perm: Vec<usize>) -> Result<Self> {
        let n = op.n();
        if perm.len() != n {
            return Err(Error::validation("ordering length mismatch"));
        }
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let mut first = vec![0usize; n];
        for new in 0..n {
            let old = perm[new];
            first[new] = op
                .row(old)
                .map(|(j, _)| iperm[j])
                .filter(|&c| c <= new)
                .min()
                .unwrap_or(new);
        }
        // Envelope rows must be monotone enough for the factorization
        // loop: row i references rows first[i]..i, whose stored spans
        // must reach back to first[i]. The envelope property guarantees
        // the referenced entries are inside the profile.
        let mut rowptr = vec![0usize; n + 1];
        for i in 0..n {
            rowptr[i + 1] = rowptr[i] + (i - first[i] + 1);
        }
        let mut vals = vec![0.0; rowptr[n]];
        // Scatter A into the envelope (lower triangle, permuted),
        // accumulating so duplicate pattern entries stay additive.
        for new in 0..n {
            let old = perm[new];
            for (j, v) in op.row(old) {
                let c = iperm[j];
                if c <= new {
                    vals[rowptr[new] + (c - first[new])] += v;
                }
            }
        }
        // In-place LL^T inside the envelope.
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut sum = vals[rowptr[i] + (j - fi)];
                // Dot the overlapping prefixes of rows i and j.
                let (oi, oj) = (rowptr[i] + (lo - fi), rowptr[j] + (lo - fj));
                let len = j.saturating_sub(lo);
                for k in 0..len {
                    sum -= vals[oi + k] * vals[oj + k];
                }
                if j < i {
                    let d = vals[rowptr[j] + (j - fj)];
                    vals[rowptr[i] + (j - fi)] = sum / d;
                } else {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::solver(format!(
                            "matrix is not positive definite at pivot {i} (value {sum})"
                        )));
                    }
                    vals[rowptr[i] + (j - fi)] = sum.sqrt();
                }
            }
        }
        Ok(CholeskyFactor { perm, first, rowptr, vals })
    }

    /// Factor with the built-in reverse Cuthill-McKee ordering.
    pub fn with_rcm(op: &SparseOperator) -> Result<Self> {
        CholeskyFactor::new(op, rcm_ordering(op))
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }
    pub fn profile(&self) -> usize {
        self.vals.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n();
        debug_assert_eq!(b.len(), n);
        // Permute, forward substitute L y = Pb, back substitute L' z = y,
        // permute back.
        let mut y: Vec<f64> = (0..n).map(|i| b[self.perm[i]]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let base = self.rowptr[i];
            let mut acc = y[i];
            for k in fi..i {
                acc -= self.vals[base + (k - fi)] * y[k];
            }
            y[i] = acc / self.vals[base + (i - fi)];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let base = self.rowptr[i];
            let xi = y[i] / self.vals[base + (i - fi)];
            y[i] = xi;
            for k in fi..i {
                y[k] -= self.vals[base + (k - fi)] * xi;
            }
        }
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.perm[i]] = y[i];
        }
        x
    }
}

/// Jacobi-preconditioned conjugate gradients. Stops when the true
/// residual norm drops below `tol * ||b||` (or ||b|| = 0). Returns the
/// solution and the iteration count.
pub fn conjugate_gradient(
    op: &SparseOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = op.n();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let inv_diag: Vec<f64> = op
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut x = x0.map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut r = {
        let ax = op.matvec(&x);
        b.iter().zip(ax).map(|(bi, axi)| bi - axi).collect::<Vec<f64>>()
    };
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= tol * bnorm {
            return Ok((x, it));
        }
        op.matvec_into(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(Error::solver(
                "conjugate gradients hit a nonpositive curvature direction",
            ));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rnorm = {
        let ax = op.matvec(&x);
        b.iter()
            .zip(ax)
            .map(|(bi, axi)| (bi - axi) * (bi - axi))
            .sum::<f64>()
            .sqrt()
    };
    if rnorm <= tol * bnorm {
        Ok((x, max_iter))
    } else {
        Err(Error::solver(format!(
            "conjugate gradients stalled at relative residual {:.3e} after {max_iter} iterations",
            rnorm / bnorm
        )))
    }
}

/// Direct-solver profile budget: beyond this many stored envelope entries
/// the solver falls back to conjugate gradients.
pub const DIRECT_PROFILE_LIMIT: usize = 16_000_000;

/// SPD solver choosing envelope Cholesky when the RCM profile fits the
/// budget and Jacobi-CG otherwise. Keeps the operator for residual
/// verification and warm starts.
#[derive(Clone, Debug)]
pub struct SpdSolver {
    op: SparseOperator,
    factor: Option<CholeskyFactor>,
}

impl SpdSolver {
    pub fn new(op: SparseOperator) -> Result<Self> {
        let perm = rcm_ordering(&op);
        let factor = if envelope_profile(&op, &perm) <= DIRECT_PROFILE_LIMIT {
            Some(CholeskyFactor::new(&op, perm)?)
        } else {
            None
        };
        Ok(SpdSolver { op, factor })
    }

    pub fn operator(&self) -> &SparseOperator {
        &self.op
    }
    pub fn is_direct(&self) -> bool {
        self.factor.is_some()
    }

    /// Solve to a relative residual of 1e-10, verified on the original
    /// operator after the fact.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve_warm(b, None)
    }

    /// Solve with an initial guess (used by time stepping; ignored by the
    /// direct path, which is exact regardless).
    pub fn solve_warm(&self, b: &[f64], x0: Option<&[f64]>) -> Result<Vec<f64>> {
        const TOL: f64 = 1e-10;
        let x = match &self.factor {
            Some(f) => f.solve(b),
            None => conjugate_gradient(&self.op, b, x0, 0.1 * TOL, 40 * self.op.n().max(100))?.0,
        };
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ax = self.op.matvec(&x);
        let rnorm = b
            .iter()
            .zip(ax)
            .map(|(bi, axi)| (bi - axi) * (bi - axi))
            .sum::<f64>()
            .sqrt();
        if bnorm > 0.0 && rnorm > TOL * bnorm {
            return Err(Error::solver(format!(
                "solve verification failed: relative residual {:.3e}",
                rnorm / bnorm
            )));
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_of(op: &SparseOperator) -> Vec<Vec<f64>> {
        let n = op.n();
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..n {
            for (j, v) in op.row(i) {
                d[i][j] += v;
            }
        }
        d
    }

    /// Deterministic SPD test matrix: 1D Laplacian plus variable diagonal.
    fn laplacian_1d(n: usize) -> SparseOperator {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 + (i as f64) / (n as f64)));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        SparseOperator::from_triplets(n, &t).unwrap()
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let op = SparseOperator::from_triplets(
            3,
            &[(2, 0, 1.0), (0, 2, 1.0), (0, 0, 1.0), (0, 0, 2.0), (2, 2, 5.0), (1, 1, 4.0)],
        )
        .unwrap();
        assert_eq!(op.nnz(), 5);
        let d = dense_of(&op);
        assert_eq!(d[0][0], 3.0);
        assert_eq!(d[0][2], 1.0);
        assert_eq!(d[2][0], 1.0);
        assert_eq!(d[1][1], 4.0);
    }

    #[test]
    fn matvec_and_quadratic_form_match_dense() {
        let op = laplacian_1d(7);
        let d = dense_of(&op);
        let x: Vec<f64> = (0..7).map(|i| (i as f64).sin() + 1.0).collect();
        let y = op.matvec(&x);
        for i in 0..7 {
            let want: f64 = (0..7).map(|j| d[i][j] * x[j]).sum();
            assert!((y[i] - want).abs() < 1e-14);
        }
        let q = op.quadratic_form(&x, &x);
        let want: f64 = (0..7).map(|i| x[i] * y[i]).sum();
        assert!((q - want).abs() < 1e-12);
    }

    #[test]
    fn restriction_takes_principal_submatrix() {
        let op = laplacian_1d(5);
        let sub = op.restrict(&[1, 3, 4]).unwrap();
        let d = dense_of(&sub);
        assert_eq!(d[0][0], 2.2);
        assert_eq!(d[1][2], -1.0);
        assert_eq!(d[0][1], 0.0); // dofs 1 and 3 are not adjacent
        assert!(op.restrict(&[0, 0]).is_err());
    }

    #[test]
    fn rcm_reduces_envelope_of_shuffled_path() {
        // Path graph numbered by a fixed stride permutation: natural
        // order has a huge envelope, RCM recovers a bandwidth-1 layout.
        let n = 101;
        let sigma: Vec<usize> = (0..n).map(|i| (i * 53) % n).collect();
        let mut t = Vec::new();
        for i in 0..n {
            t.push((sigma[i], sigma[i], 4.0));
            if i + 1 < n {
                t.push((sigma[i], sigma[i + 1], -1.0));
                t.push((sigma[i + 1], sigma[i], -1.0));
            }
        }
        let op = SparseOperator::from_triplets(n, &t).unwrap();
        let identity: Vec<usize> = (0..n).collect();
        let perm = rcm_ordering(&op);
        let before = envelope_profile(&op, &identity);
        let after = envelope_profile(&op, &perm);
        assert_eq!(after, 2 * n - 1);
        assert!(after < before / 10, "{after} vs {before}");
    }

    #[test]
    fn cholesky_solves_to_machine_precision() {
        let n = 50;
        let op = laplacian_1d(n);
        let f = CholeskyFactor::with_rcm(&op).unwrap();
        let xtrue: Vec<f64> = (0..n).map(|i| ((i * i) % 13) as f64 - 6.0).collect();
        let b = op.matvec(&xtrue);
        let x = f.solve(&b);
        for i in 0..n {
            assert!((x[i] - xtrue[i]).abs() < 1e-11, "dof {i}");
        }
    }

    #[test]
    fn cholesky_rejects_indefinite_matrix() {
        let op = SparseOperator::from_triplets(
            2,
            &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)],
        )
        .unwrap();
        match CholeskyFactor::with_rcm(&op) {
            Err(Error::Solver(_)) => {}
            other => panic!("expected solver error, got {other:?}"),
        }
    }

    #[test]
    fn cg_matches_direct_solution() {
        let n = 80;
        let op = laplacian_1d(n);
        let b: Vec<f64> = (0..n).map(|i| (0.3 * i as f64).cos()).collect();
        let direct = CholeskyFactor::with_rcm(&op).unwrap().solve(&b);
        let (iterative, iters) = conjugate_gradient(&op, &b, None, 1e-12, 10 * n).unwrap();
        assert!(iters > 0);
        for i in 0..n {
            assert!((direct[i] - iterative[i]).abs() < 1e-8);
        }
        // Warm start from the exact solution converges immediately.
        let (_, iters2) = conjugate_gradient(&op, &b, Some(&direct), 1e-10, 10 * n).unwrap();
        assert_eq!(iters2, 0);
    }

    #[test]
    fn spd_solver_verifies_residual() {
        let op = laplacian_1d(30);
        let solver = SpdSolver::new(op.clone()).unwrap();
        assert!(solver.is_direct());
        let b = vec![1.0; 30];
        let x = solver.solve(&b).unwrap();
        let r: f64 = op
            .matvec(&x)
            .iter()
            .zip(&b)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(r <= 1e-10 * (30.0f64).sqrt());
    }

    proptest! {
        /// Envelope Cholesky solves random diagonally dominant systems.
        #[test]
        fn cholesky_random_spd(
            offd in proptest::collection::vec(-1.0f64..1.0, 9),
            rhs in proptest::collection::vec(-5.0f64..5.0, 10),
        ) {
            let n = 10;
            let mut t = Vec::new();
            let mut rowsum = vec![0.0; n];
            for (k, &v) in offd.iter().enumerate() {
                let (i, j) = (k, k + 1);
                t.push((i, j, v));
                t.push((j, i, v));
                rowsum[i] += v.abs();
                rowsum[j] += v.abs();
            }
            for i in 0..n {
                t.push((i, i, rowsum[i] + 1.0));
            }
            let op = SparseOperator::from_triplets(n, &t).unwrap();
            let f = CholeskyFactor::with_rcm(&op).unwrap();
            let x = f.solve(&rhs);
            let ax = op.matvec(&x);
            let rnorm: f64 = ax.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let bnorm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(rnorm <= 1e-10 * bnorm.max(1e-30));
        }
    }
}
