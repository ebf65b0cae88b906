//! Small dense symmetric linear algebra and a warm-started block eigensolver.
//!
//! Everything here works on plain `Vec<f64>` storage. The matrices that show
//! up in the flows are tiny (the critical subspace rarely exceeds a handful of
//! directions), so clarity wins over blocking or SIMD.

mod jacobi;
mod lobpcg;

pub use jacobi::{psd_project, sym_eig_dense};
pub use lobpcg::{lobpcg_topk, LobpcgOptions, LobpcgOutput};

use crate::error::{Error, Result};

/// Dense symmetric matrix, stored in full row-major form.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.data[i * d.len() + i] = v;
        }
        m
    }

    /// Builds from a closure evaluated on the upper triangle.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Accepts any square row-major array; rejects asymmetric or non-finite input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!("row {i} has length {} (expected {n})", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("matrix entry"));
                }
                m.data[i * n + j] = v;
            }
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (m.get(i, j), m.get(j, i));
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Shape(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        m.symmetrize();
        Ok(m)
    }

    /// Outer-product sum `Σ_c w_c v_c v_cᵀ` over columns.
    pub fn from_outer(cols: &[Vec<f64>], weights: &[f64]) -> Self {
        let n = cols.first().map_or(0, Vec::len);
        let mut m = Self::zeros(n);
        for (c, &wt) in cols.iter().zip(weights) {
            for i in 0..n {
                let ci = wt * c[i];
                for j in 0..n {
                    m.data[i * n + j] += ci * c[j];
                }
            }
        }
        m.symmetrize();
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets both `(i,j)` and `(j,i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Frobenius inner product ⟨A, B⟩.
    pub fn dot(&self, other: &SymMatrix) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn frobenius(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn scaled(&self, c: f64) -> SymMatrix {
        SymMatrix { n: self.n, data: self.data.iter().map(|x| c * x).collect() }
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix { n: self.n, data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() }
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix { n: self.n, data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() }
    }

    /// Averages with the transpose. Entry-wise asymmetry is never more than
    /// rounding noise for matrices built through `set`.
    pub fn symmetrize(&mut self) {
        let n = self.n;
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    /// Congruence `Vᵀ M V` with `V` given as columns.
    pub fn congruence(&self, cols: &[Vec<f64>]) -> SymMatrix {
        let mv: Vec<Vec<f64>> = cols.iter().map(|c| self.matvec(c)).collect();
        SymMatrix::from_fn(cols.len(), |i, j| dot(&cols[i], &mv[j]))
    }

    /// Smallest eigenvalue; zero-dimensional matrices report 0.
    pub fn min_eig(&self) -> Result<f64> {
        if self.n == 0 {
            return Ok(0.0);
        }
        Ok(*sym_eig_dense(self)?.values.last().unwrap())
    }

    pub fn max_eig(&self) -> Result<f64> {
        if self.n == 0 {
            return Ok(0.0);
        }
        Ok(sym_eig_dense(self)?.values[0])
    }
}

/// General dense matrix (row-major). Used for SDCP operators in svec form.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(&self.data[i * self.cols..(i + 1) * self.cols], v)).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn frobenius(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Reinterprets a square matrix as symmetric after averaging with its transpose.
    pub fn to_sym(&self) -> SymMatrix {
        assert_eq!(self.rows, self.cols);
        let mut s = SymMatrix { n: self.rows, data: self.data.clone() };
        s.symmetrize();
        s
    }
}

/// Eigenpairs with values in descending order and vectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    /// Diagonal metric `M` with `VᵀMV = I`; `None` means Euclidean.
    pub metric: Option<Vec<f64>>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index ranges of eigenvalues that coincide within `gap`.
    pub fn clusters(&self, gap: f64) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.values.len() {
            if i == self.values.len() || self.values[i - 1] - self.values[i] >= gap {
                out.push(start..i);
                start = i;
            }
        }
        out
    }
}

/// Eigenvalue gap below which two eigenvalues are treated as one cluster.
pub const CLUSTER_GAP: f64 = 1e-10;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| c * x).collect()
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Dimension of Sym(R^k).
#[inline]
pub fn svec_len(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Scaled symmetric vectorization: diagonal entries as-is, off-diagonal
/// entries times √2, so that `⟨svec A, svec B⟩ = ⟨A, B⟩_F`.
pub fn svec(m: &SymMatrix) -> Vec<f64> {
    let k = m.dim();
    let mut out = Vec::with_capacity(svec_len(k));
    for i in 0..k {
        for j in i..k {
            let v = m.get(i, j);
            out.push(if i == j { v } else { std::f64::consts::SQRT_2 * v });
        }
    }
    out
}

pub fn smat(v: &[f64], k: usize) -> SymMatrix {
    debug_assert_eq!(v.len(), svec_len(k));
    let mut m = SymMatrix::zeros(k);
    let mut c = 0;
    for i in 0..k {
        for j in i..k {
            let x = if i == j { v[c] } else { v[c] / std::f64::consts::SQRT_2 };
            m.set(i, j, x);
            c += 1;
        }
    }
    m
}

/// Matrix of a linear map on Sym(R^k) in the svec basis.
pub fn operator_matrix(k: usize, mut f: impl FnMut(&SymMatrix) -> SymMatrix) -> Mat {
    let m = svec_len(k);
    let mut out = Mat::zeros(m, m);
    let mut e = vec![0.0; m];
    for c in 0..m {
        e[c] = 1.0;
        let col = svec(&f(&smat(&e, k)));
        e[c] = 0.0;
        for r in 0..m {
            out.set(r, c, col[r]);
        }
    }
    out
}

/// Cholesky solve of `A x = b` for symmetric positive definite `A`.
/// Returns `None` when a pivot is not positive.
pub fn cholesky_solve(a: &Mat, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * n + p] * y[p];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for p in i + 1..n {
            s -= l[p * n + i] * x[p];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

/// LU solve of a square system with partial pivoting. Returns `None` for a
/// numerically singular matrix.
pub fn lu_solve(a: &Mat, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows;
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0_f64, |s, v| s.max(v.abs()));
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i * n + c].abs().total_cmp(&m[j * n + c].abs()))?;
        if !(m[p * n + c].abs() > 1e-14 * scale) {
            return None;
        }
        if p != c {
            for j in 0..n {
                m.swap(p * n + j, c * n + j);
            }
            x.swap(p, c);
        }
        for r in c + 1..n {
            let f = m[r * n + c] / m[c * n + c];
            if f != 0.0 {
                for j in c..n {
                    m[r * n + j] -= f * m[c * n + j];
                }
                x[r] -= f * x[c];
            }
        }
    }
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|j| m[c * n + j] * x[j]).sum();
        x[c] = (x[c] - s) / m[c * n + c];
    }
    all_finite(&x).then_some(x)
}

/// Modified Gram-Schmidt, run twice. Columns whose residual norm drops below
/// `drop_tol` times their original norm are discarded.
pub fn orthonormalize(cols: Vec<Vec<f64>>, drop_tol: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    for mut v in cols {
        let n0 = norm(&v);
        if n0 == 0.0 || !n0.is_finite() {
            continue;
        }
        for _ in 0..2 {
            for q in &out {
                let c = dot(q, &v);
                axpy(-c, q, &mut v);
            }
        }
        let n1 = norm(&v);
        if n1 > drop_tol * n0 {
            out.push(scale(&v, 1.0 / n1));
        }
    }
    out
}
