//! Sparse symmetric matrices and a simplicial LDLᵀ factorization.
//!
//! The factorization follows the classic up-looking algorithm: a
//! fill-reducing minimum-degree ordering, an elimination-tree symbolic
//! pass, then a numeric pass that can be repeated for new values on the
//! same pattern. The factor also yields entries of the inverse on the
//! filled pattern (Takahashi recurrences), which is what the variance
//! component updates and prediction error variances need.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Symmetric sparse matrix stored with both triangles in compressed
/// sparse column form. Row indices are sorted within each column.
/// Explicit zeros are kept so that a pattern can be reused for
/// refactorization.
#[derive(Debug, Clone, PartialEq)]
pub struct SymCsc {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SymCsc {
    /// Build from `(row, col, value)` triplets given for either triangle.
    /// Off-diagonal triplets are mirrored; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            cols[c].push((r, v));
            if r != c {
                cols[r].push((c, v));
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for mut col in cols {
            col.sort_by_key(|&(r, _)| r);
            let mut last: Option<usize> = None;
            for (r, v) in col {
                if last == Some(r) {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                    last = Some(r);
                }
            }
            col_ptr.push(row_idx.len());
        }
        SymCsc {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        SymCsc {
            n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Storage position of entry `(row, col)`, if structurally present.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.col_ptr[col];
        let hi = self.col_ptr[col + 1];
        self.row_idx[lo..hi]
            .binary_search(&row)
            .ok()
            .map(|p| lo + p)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.position(row, col).map_or(0.0, |p| self.values[p])
    }

    /// Entries of column `col` as `(row, value)` pairs.
    pub fn column(&self, col: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Lower-triangle entries `(row, col, value)` with `row >= col`, in
    /// column-major order.
    pub fn lower_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |c| {
            self.column(c)
                .filter(move |&(r, _)| r >= c)
                .map(move |(r, v)| (r, c, v))
        })
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for (c, &xc) in x.iter().enumerate() {
            for (r, v) in self.column(c) {
                y[r] += v * xc;
            }
        }
        y
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for c in 0..self.n {
            for (r, v) in self.column(c) {
                m[(r, c)] = v;
            }
        }
        m
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Minimum-degree ordering on the adjacency graph of `a`.
///
/// Rows denser than `max(16, 10·√n)` are set aside and ordered last.
/// Ties are broken by the smaller index, so the ordering is a pure
/// function of the pattern. Returns `perm` with `perm[new] = old`.
pub fn minimum_degree_ordering(a: &SymCsc) -> Vec<usize> {
    let n = a.dim();
    let dense_threshold = 16usize.max((10.0 * (n as f64).sqrt()) as usize);
    let mut dense = vec![false; n];
    for (c, flag) in dense.iter_mut().enumerate() {
        let deg = a.column(c).filter(|&(r, _)| r != c).count();
        *flag = deg > dense_threshold;
    }
    let mut adj: Vec<BTreeSet<usize>> = (0..n)
        .map(|c| {
            if dense[c] {
                BTreeSet::new()
            } else {
                a.column(c)
                    .map(|(r, _)| r)
                    .filter(|&r| r != c && !dense[r])
                    .collect()
            }
        })
        .collect();
    let mut degree: Vec<usize> = adj.iter().map(BTreeSet::len).collect();
    let mut queue: BTreeSet<(usize, usize)> = (0..n)
        .filter(|&i| !dense[i])
        .map(|i| (degree[i], i))
        .collect();
    let mut perm = Vec::with_capacity(n);
    while let Some((_, v)) = queue.pop_first() {
        perm.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &nbrs {
            adj[u].remove(&v);
        }
        for (i, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[i + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
        for &u in &nbrs {
            queue.remove(&(degree[u], u));
            degree[u] = adj[u].len();
            queue.insert((degree[u], u));
        }
    }
    perm.extend((0..n).filter(|&i| dense[i]));
    perm
}

/// Ordering and elimination structure of an LDLᵀ factorization,
/// reusable across numeric factorizations on the same pattern.
#[derive(Debug, Clone)]
pub struct SymbolicLdl {
    n: usize,
    perm: Vec<usize>,
    pinv: Vec<usize>,
    parent: Vec<Option<usize>>,
    l_col_ptr: Vec<usize>,
}

impl SymbolicLdl {
    pub fn analyze(a: &SymCsc) -> Self {
        Self::with_ordering(a, minimum_degree_ordering(a))
    }

    pub fn with_ordering(a: &SymCsc, perm: Vec<usize>) -> Self {
        let n = a.dim();
        assert_eq!(perm.len(), n);
        let mut pinv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }
        let mut parent = vec![None; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for (r, _) in a.column(perm[k]) {
                let mut i = pinv[r];
                if i >= k {
                    continue;
                }
                while flag[i] != k {
                    if parent[i].is_none() {
                        parent[i] = Some(k);
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i].expect("set above");
                }
            }
        }
        let mut l_col_ptr = Vec::with_capacity(n + 1);
        l_col_ptr.push(0);
        for k in 0..n {
            l_col_ptr.push(l_col_ptr[k] + lnz[k]);
        }
        SymbolicLdl {
            n,
            perm,
            pinv,
            parent,
            l_col_ptr,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of strictly-lower nonzeros in L.
    pub fn l_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }
}

/// Numeric LDLᵀ factor of `P A Pᵀ`.
#[derive(Debug, Clone)]
pub struct Ldl {
    symbolic: Arc<SymbolicLdl>,
    l_row: Vec<usize>,
    l_val: Vec<f64>,
    d: Vec<f64>,
}

impl Ldl {
    /// Factor `a`, failing if any pivot is not strictly positive.
    pub fn factor(symbolic: Arc<SymbolicLdl>, a: &SymCsc) -> Result<Self> {
        let n = symbolic.n;
        assert_eq!(a.dim(), n);
        let lnz_total = symbolic.l_nnz();
        let mut l_row = vec![0usize; lnz_total];
        let mut l_val = vec![0.0; lnz_total];
        let mut d = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        let lp = &symbolic.l_col_ptr;

        for k in 0..n {
            y[k] = 0.0;
            let mut top = n;
            flag[k] = k;
            for (r, v) in a.column(symbolic.perm[k]) {
                let mut i = symbolic.pinv[r];
                if i > k {
                    continue;
                }
                y[i] += v;
                let mut len = 0;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = symbolic.parent[i].expect("elimination tree path");
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for &i in &pattern[top..n] {
                let yi = y[i];
                y[i] = 0.0;
                let start = lp[i];
                let end = lp[i] + lnz[i];
                for p in start..end {
                    y[l_row[p]] -= l_val[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                l_row[end] = k;
                l_val[end] = l_ki;
                lnz[i] += 1;
            }
            let akk = a.get(symbolic.perm[k], symbolic.perm[k]).abs();
            if d[k].is_nan() || d[k] <= 1e-13 * akk || d[k] <= 0.0 {
                return Err(Error::NotPositiveDefinite {
                    pivot: symbolic.perm[k],
                });
            }
        }
        Ok(Ldl {
            symbolic,
            l_row,
            l_val,
            d,
        })
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<SymbolicLdl> {
        &self.symbolic
    }

    pub fn log_det(&self) -> f64 {
        self.d.iter().map(|v| v.ln()).sum()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let sym = &self.symbolic;
        let lp = &sym.l_col_ptr;
        let mut x: Vec<f64> = sym.perm.iter().map(|&old| b[old]).collect();
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                for p in lp[j]..lp[j + 1] {
                    x[self.l_row[p]] -= self.l_val[p] * xj;
                }
            }
        }
        for (xj, dj) in x.iter_mut().zip(&self.d) {
            *xj /= dj;
        }
        for j in (0..n).rev() {
            let mut s = x[j];
            for p in lp[j]..lp[j + 1] {
                s -= self.l_val[p] * x[self.l_row[p]];
            }
            x[j] = s;
        }
        let mut out = vec![0.0; n];
        for (new, &old) in sym.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }

    /// Entries of `A⁻¹` on the pattern of `L + Lᵀ + D`.
    pub fn selected_inverse(&self) -> SelectedInverse {
        let n = self.dim();
        let lp = &self.symbolic.l_col_ptr;
        let mut zx = vec![0.0; self.l_val.len()];
        let mut zd = vec![0.0; n];
        let mut col_buf = Vec::new();
        for j in (0..n).rev() {
            let range = lp[j]..lp[j + 1];
            let rows = &self.l_row[range.clone()];
            let vals = &self.l_val[range.clone()];
            col_buf.clear();
            for &i in rows {
                let mut s = 0.0;
                for (&k, &lkj) in rows.iter().zip(vals) {
                    let zik = if i == k {
                        zd[i]
                    } else {
                        let (r, c) = if i > k { (i, k) } else { (k, i) };
                        let lo = lp[c];
                        let hi = lp[c + 1];
                        let pos = self.l_row[lo..hi]
                            .binary_search(&r)
                            .expect("filled pattern is closed under elimination");
                        zx[lo + pos]
                    };
                    s += lkj * zik;
                }
                col_buf.push(-s);
            }
            let mut diag = 1.0 / self.d[j];
            for (&lij, &zij) in vals.iter().zip(&col_buf) {
                diag -= lij * zij;
            }
            zd[j] = diag;
            zx[range].copy_from_slice(&col_buf);
        }
        SelectedInverse {
            symbolic: Arc::clone(&self.symbolic),
            l_row: self.l_row.clone(),
            zx,
            zd,
        }
    }
}

/// Entries of the inverse of a factored matrix, available wherever the
/// factor has structural nonzeros (which includes the original pattern).
#[derive(Debug, Clone)]
pub struct SelectedInverse {
    symbolic: Arc<SymbolicLdl>,
    l_row: Vec<usize>,
    zx: Vec<f64>,
    zd: Vec<f64>,
}

impl SelectedInverse {
    /// `(A⁻¹)[a, b]` in original indexing, or `None` outside the pattern.
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        let pa = self.symbolic.pinv[a];
        let pb = self.symbolic.pinv[b];
        if pa == pb {
            return Some(self.zd[pa]);
        }
        let (r, c) = if pa > pb { (pa, pb) } else { (pb, pa) };
        let lo = self.symbolic.l_col_ptr[c];
        let hi = self.symbolic.l_col_ptr[c + 1];
        self.l_row[lo..hi]
            .binary_search(&r)
            .ok()
            .map(|p| self.zx[lo + p])
    }

    pub fn diag(&self, a: usize) -> f64 {
        self.zd[self.symbolic.pinv[a]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, extra: usize, seed: u64) -> SymCsc {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        let mut rowsum = vec![0.0; n];
        for _ in 0..extra {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            let v: f64 = rng.random_range(-1.0..1.0);
            t.push((i, j, v));
            rowsum[i] += v.abs();
            rowsum[j] += v.abs();
        }
        for (i, s) in rowsum.iter().enumerate() {
            t.push((i, i, s + 1.0 + rng.random_range(0.0..1.0)));
        }
        SymCsc::from_triplets(n, &t)
    }

    fn factor(a: &SymCsc) -> Ldl {
        Ldl::factor(Arc::new(SymbolicLdl::analyze(a)), a).unwrap()
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let a = SymCsc::identity(5);
        let b = vec![1.0, -2.0, 3.5, 0.0, 7.25];
        assert_eq!(factor(&a).solve(&b), b);
    }

    #[test]
    fn three_by_three_matches_dense_solve() {
        let a = SymCsc::from_triplets(
            3,
            &[
                (0, 0, 4.0),
                (1, 0, 1.0),
                (1, 1, 3.0),
                (2, 1, -0.5),
                (2, 2, 2.0),
                (2, 0, 0.25),
            ],
        );
        let b = [1.0, 2.0, 3.0];
        let x = factor(&a).solve(&b);
        let dense = a.to_dense().lu().solve(&nalgebra::DVector::from_row_slice(&b)).unwrap();
        for i in 0..3 {
            assert!((x[i] - dense[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn random_thousand_residual_small() {
        let a = random_spd(1000, 4000, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = factor(&a).solve(&b);
        let ax = a.mul_vec(&x);
        let num: f64 = ax.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-10, "relative residual {}", num / den);
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = SymCsc::from_triplets(2, &[(0, 0, 1.0), (1, 0, 2.0), (1, 1, 1.0)]);
        let sym = Arc::new(SymbolicLdl::analyze(&a));
        assert!(matches!(
            Ldl::factor(sym, &a),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn selected_inverse_matches_dense_inverse() {
        let a = random_spd(60, 150, 11);
        let f = factor(&a);
        let inv = a.to_dense().try_inverse().unwrap();
        let sel = f.selected_inverse();
        for c in 0..60 {
            for (r, _) in a.column(c) {
                let z = sel.get(r, c).expect("pattern entry");
                assert!((z - inv[(r, c)]).abs() < 1e-12, "({r},{c})");
            }
        }
        let ld: f64 = inv.determinant().ln();
        assert!((f.log_det() + ld).abs() < 1e-9);
    }

    #[test]
    fn ordering_is_a_permutation() {
        let a = random_spd(200, 900, 5);
        let mut p = minimum_degree_ordering(&a);
        p.sort_unstable();
        assert_eq!(p, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn dense_roundtrip() {
        let a = random_spd(10, 20, 1);
        let d: DMatrix<f64> = a.to_dense();
        assert!((d.clone() - d.transpose()).abs().max() == 0.0);
    }
}
