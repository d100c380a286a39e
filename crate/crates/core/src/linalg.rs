//! Dense and banded symmetric kernels.
//!
//! Everything here is small and dense (a few hundred unknowns at most), so the
//! routines favour clarity over blocking. [`SpdMatrix`] carries its Cholesky
//! factor so repeated solves with the noise covariance or a mass matrix cost
//! two triangular sweeps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// Symmetric positive definite matrix together with its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::dim("square matrix", matrix.nrows(), matrix.ncols()));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let n = matrix.nrows();
        for i in 0..n {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let factor = cholesky_lower(&matrix)?;
        Ok(Self { matrix, factor })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
            factor: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Lower-triangular `L` with `L Lᵀ = A`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.dim() {
            return Err(Error::dim("right-hand side", self.dim(), rhs.len()));
        }
        let mut y = rhs.clone();
        forward_substitute(&self.factor, y.as_mut_slice());
        backward_substitute_transposed(&self.factor, y.as_mut_slice());
        Ok(y)
    }

    /// `L⁻¹ v`, the whitening transform for this covariance.
    pub fn whiten(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::dim("vector", self.dim(), v.len()));
        }
        let mut y = v.clone();
        forward_substitute(&self.factor, y.as_mut_slice());
        Ok(y)
    }

    /// `(A⁻¹ u) · v`.
    pub fn inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::dim("second argument", self.dim(), v.len()));
        }
        Ok(self.solve(u)?.dot(v))
    }
}

/// Plain Cholesky factorization; fails on the first non-positive pivot.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotSpd { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

fn forward_substitute(l: &DMatrix<f64>, y: &mut [f64]) {
    let n = y.len();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
}

fn backward_substitute_transposed(l: &DMatrix<f64>, y: &mut [f64]) {
    let n = y.len();
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
}

pub fn cholesky_solve(a: &SpdMatrix, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    a.solve(rhs)
}

/// Noise-weighted inner product `⟨Σ⁻¹u, v⟩`.
pub fn sigma_inner(sigma: &SpdMatrix, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    sigma.inner(u, v)
}

/// Eigenvalues sorted non-increasing with matching eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<DVector<f64>>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    All,
    Count(usize),
    /// Keep pairs with `λ > tol · λ_max`.
    RelativeTol(f64),
}

/// Solves `A c = λ M c` for symmetric `A` and SPD `M`.
///
/// The problem is reduced to the standard form `L⁻¹ A L⁻ᵀ w = λ w` with
/// `M = L Lᵀ`; the eigenvectors are mapped back as `c = L⁻ᵀ w` and are
/// therefore `M`-orthonormal.
pub fn generalized_sym_eig(
    a: &DMatrix<f64>,
    m: &SpdMatrix,
    rule: Truncation,
) -> Result<EigenPairs> {
    let n = m.dim();
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::dim("eigenproblem matrix", n, a.nrows()));
    }
    let l = m.factor();
    // C = L⁻¹ A L⁻ᵀ, built column by column.
    let mut b = a.clone();
    for j in 0..n {
        let mut col = b.column(j).clone_owned();
        forward_substitute(l, col.as_mut_slice());
        b.set_column(j, &col);
    }
    let mut c = b.transpose();
    for j in 0..n {
        let mut col = c.column(j).clone_owned();
        forward_substitute(l, col.as_mut_slice());
        c.set_column(j, &col);
    }
    let c = (&c + c.transpose()) * 0.5;

    let eig = c
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or(Error::ConvergenceFailure)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let keep = match rule {
        Truncation::All => n,
        Truncation::Count(k) => k.min(n),
        Truncation::RelativeTol(tol) => {
            let top = eig.eigenvalues[order[0]];
            order
                .iter()
                .take_while(|&&i| eig.eigenvalues[i] > tol * top)
                .count()
        }
    };

    let mut values = Vec::with_capacity(keep);
    let mut vectors = Vec::with_capacity(keep);
    for &i in order.iter().take(keep) {
        values.push(eig.eigenvalues[i]);
        let mut v = eig.eigenvectors.column(i).clone_owned();
        backward_substitute_transposed(l, v.as_mut_slice());
        vectors.push(v);
    }
    Ok(EigenPairs { values, vectors })
}

/// `sqrt(cᵀ M c)`.
pub fn field_l2_norm(m: &DMatrix<f64>, c: &DVector<f64>) -> Result<f64> {
    if m.nrows() != c.len() || m.ncols() != c.len() {
        return Err(Error::dim("field vector", m.nrows(), c.len()));
    }
    Ok((m * c).dot(c).max(0.0).sqrt())
}

/// Mass-weighted Hilbert–Schmidt norm `sqrt(trace(M K M Kᵀ))`.
pub fn tensor_l2_norm(m: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    if m.ncols() != n || k.nrows() != n || k.ncols() != n {
        return Err(Error::dim("tensor", n, k.nrows()));
    }
    let mk = m * k;
    let km = k * m;
    Ok(mk.component_mul(&km).sum().max(0.0).sqrt())
}

/// Symmetric positive definite band matrix in lower band storage.
///
/// Entry `(i, j)` with `i - bandwidth <= j <= i` lives at
/// `i * (bandwidth + 1) + (j + bandwidth - i)`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.bandwidth + 1) + (j + self.bandwidth - i)
    }

    /// Adds `v` to entry `(i, j)`; only the lower triangle is stored, so
    /// upper-triangle contributions are ignored.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        if j <= i {
            debug_assert!(i - j <= self.bandwidth);
            let k = self.idx(i, j);
            self.data[k] += v;
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if i - j > self.bandwidth {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bandwidth);
            for j in lo..i {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += self.data[self.idx(i, i)] * x[i];
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// In-place banded Cholesky.
    pub fn factor(mut self) -> Result<BandedCholesky> {
        let bw = self.bandwidth;
        for j in 0..self.n {
            let lo = j.saturating_sub(bw);
            let mut d = self.data[self.idx(j, j)];
            for k in lo..j {
                let l = self.data[self.idx(j, k)];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotSpd { pivot: j, value: d });
            }
            let djj = d.sqrt();
            let jj = self.idx(j, j);
            self.data[jj] = djj;
            let hi = (j + bw).min(self.n - 1);
            for i in (j + 1)..=hi {
                let lo_i = i.saturating_sub(bw);
                let mut s = self.data[self.idx(i, j)];
                for k in lo_i.max(lo)..j {
                    s -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                let ij = self.idx(i, j);
                self.data[ij] = s / djj;
            }
        }
        Ok(BandedCholesky { factor: self })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    factor: BandedSpd,
}

impl BandedCholesky {
    pub fn solve_in_place(&self, y: &mut [f64]) {
        let f = &self.factor;
        let bw = f.bandwidth;
        let n = f.n;
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= f.data[f.idx(i, k)] * y[k];
            }
            y[i] = s / f.data[f.idx(i, i)];
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = y[i];
            for k in (i + 1)..=hi {
                s -= f.data[f.idx(k, i)] * y[k];
            }
            y[i] = s / f.data[f.idx(i, i)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn darcy_sigma() -> SpdMatrix {
        SpdMatrix::new(DMatrix::from_fn(5, 5, |i, j| {
            if i == j {
                0.005
            } else {
                0.001
            }
        }))
        .unwrap()
    }

    /// Gauss–Jordan inverse without pivoting shortcuts; test oracle only.
    fn gauss_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut aug = DMatrix::<f64>::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = a[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| aug[(x, col)].abs().total_cmp(&aug[(y, col)].abs()))
                .unwrap();
            aug.swap_rows(col, piv);
            let p = aug[(col, col)];
            for j in 0..2 * n {
                aug[(col, j)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[(r, col)];
                    for j in 0..2 * n {
                        aug[(r, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
        aug.columns(n, n).clone_owned()
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let id = SpdMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let x = cholesky_solve(&id, &DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0, 3.0]);
        let d = SpdMatrix::new(DMatrix::from_diagonal_element(2, 2, 2.0)).unwrap();
        let x = cholesky_solve(&d, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_relative_eq!(x[0], 0.5, epsilon = 1e-15);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn darcy_sigma_solve_matches_gauss_oracle() {
        let s = darcy_sigma();
        let inv = gauss_inverse(s.matrix());
        let e1 = DVector::from_fn(5, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let x = cholesky_solve(&s, &e1).unwrap();
        // Closed form: (aI + b11ᵀ)⁻¹ e₁ with a = 0.004, b = 0.001.
        let expected_first = (1.0 / 0.004) * (1.0 - 0.001 / (0.004 + 5.0 * 0.001));
        assert_relative_eq!(x[0], expected_first, max_relative = 1e-12);
        for i in 0..5 {
            assert_relative_eq!(x[i], inv[(i, 0)], max_relative = 1e-12);
        }
        let res = s.matrix() * &x - &e1;
        assert!(res.norm() <= 1e-10 * e1.norm());
        let ip = sigma_inner(&s, &e1, &e1).unwrap();
        assert_relative_eq!(ip, inv[(0, 0)], max_relative = 1e-12);
    }

    #[test]
    fn sigma_inner_small_cases() {
        let id = SpdMatrix::identity(2);
        let u = DVector::from_vec(vec![1.0, 2.0]);
        let v = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(sigma_inner(&id, &u, &v).unwrap(), 11.0);
        let d = SpdMatrix::new(DMatrix::from_diagonal_element(2, 2, 2.0)).unwrap();
        let e = DVector::from_vec(vec![1.0, 0.0]);
        assert_relative_eq!(sigma_inner(&d, &e, &e).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn not_spd_and_dimension_errors() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(SpdMatrix::new(a), Err(Error::NotSpd { pivot: 1, .. })));
        let id = SpdMatrix::identity(2);
        assert!(matches!(
            id.solve(&DVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn generalized_eig_diagonal_and_degenerate() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let pairs = generalized_sym_eig(&a, &SpdMatrix::identity(2), Truncation::All).unwrap();
        assert_relative_eq!(pairs.values[0], 3.0, epsilon = 1e-14);
        assert_relative_eq!(pairs.values[1], 1.0, epsilon = 1e-14);
        assert_relative_eq!(pairs.vectors[0][1].abs(), 1.0, epsilon = 1e-14);

        let pairs =
            generalized_sym_eig(&DMatrix::identity(2, 2), &SpdMatrix::identity(2), Truncation::All)
                .unwrap();
        assert_relative_eq!(pairs.values[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(pairs.values[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn truncation_rules() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-2, 1e-6, 0.5]));
        let m = SpdMatrix::identity(4);
        let p = generalized_sym_eig(&a, &m, Truncation::RelativeTol(1e-3)).unwrap();
        assert_eq!(p.values.len(), 3);
        let p = generalized_sym_eig(&a, &m, Truncation::Count(2)).unwrap();
        assert_eq!(p.values, vec![1.0, 0.5]);
    }

    #[test]
    fn norms_small_cases() {
        let id = DMatrix::identity(2, 2);
        assert_eq!(field_l2_norm(&id, &DVector::from_vec(vec![3.0, 4.0])).unwrap(), 5.0);
        let half = DMatrix::from_diagonal_element(2, 2, 0.5);
        assert_relative_eq!(
            field_l2_norm(&half, &DVector::from_vec(vec![1.0, 1.0])).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(tensor_l2_norm(&id, &id).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        let u = DVector::from_vec(vec![1.0, 2.0]);
        let v = DVector::from_vec(vec![-3.0, 0.5]);
        let k = &u * v.transpose();
        assert_relative_eq!(
            tensor_l2_norm(&id, &k).unwrap(),
            u.norm() * v.norm(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn banded_matches_dense() {
        let n = 12;
        let bw = 3;
        let mut band = BandedSpd::zeros(n, bw);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                let v = if i == j { 4.0 + i as f64 * 0.1 } else { -0.5 / (1 + i - j) as f64 };
                band.add(i, j, v);
                dense[(i, j)] = v;
                dense[(j, i)] = v;
            }
        }
        assert_eq!(band.to_dense(), dense);
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let y = band.mul_vec(&x);
        let yd = &dense * DVector::from_vec(x.clone());
        for i in 0..n {
            assert_relative_eq!(y[i], yd[i], epsilon = 1e-13);
        }
        let chol = band.factor().unwrap();
        let mut sol = y.clone();
        chol.solve_in_place(&mut sol);
        for i in 0..n {
            assert_relative_eq!(sol[i], x[i], epsilon = 1e-12);
        }
    }
}
