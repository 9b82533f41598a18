//! Dense linear algebra, a seedable counter-based generator and the
//! finite-difference harness the rest of the crate is checked against.
//!
//! Everything here runs in `f64`. File formats narrow to `f32` at the I/O
//! boundary only.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!("{} values cannot fill a {rows}x{cols} matrix", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-width matrix still has `rows` empty rows.
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(shape_err!(
                "cannot stack {} columns on {} columns",
                other.cols,
                self.cols
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!("cannot add {:?} to {:?}", other.shape(), self.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `(m + mᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(shape_err!("{}x{} matrix is not square", self.rows, self.cols));
        }
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
            }
        }
        Ok(out)
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(shape_err!("matmul of {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, the shape of a linear layer applied to a row batch.
pub fn matmul_transb(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(shape_err!(
            "matmul of {}x{} by transpose of {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        ));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`, used for weight gradients and covariance accumulation.
pub fn matmul_transa(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(shape_err!(
            "matmul of transpose of {}x{} by {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        ));
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let a_row = a.row(r);
        let b_row = b.row(r);
        for (i, &ai) in a_row.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bj) in out_row.iter_mut().zip(b_row) {
                *o += ai * bj;
            }
        }
    }
    Ok(out)
}

/// Inner product over four interleaved partial sums, which lets the loop
/// vectorize. The summation order depends only on the length.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Lower-triangular Cholesky factor `L` with `m = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factors the symmetric part of `m`. Fails when `m` is not square,
    /// noticeably asymmetric, or not positive definite.
    pub fn factor(m: &DenseMatrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(shape_err!("{}x{} matrix is not square", m.rows, m.cols));
        }
        let n = m.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (m.get(i, j), m.get(j, i));
                let scale = a.abs().max(b.abs()).max(1.0);
                if (a - b).abs() > 1e-9 * scale {
                    return Err(Error::NumericalDomain(format!(
                        "matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        let sym = m.symmetrized()?;
        let mut lower = vec![0.0; n * n];
        for j in 0..n {
            let mut diag = sym.get(j, j);
            for k in 0..j {
                diag -= lower[j * n + k] * lower[j * n + k];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NumericalDomain(format!(
                    "matrix is not positive definite (pivot {j} = {diag})"
                )));
            }
            let ljj = diag.sqrt();
            lower[j * n + j] = ljj;
            for i in (j + 1)..n {
                let mut s = sym.get(i, j);
                for k in 0..j {
                    s -= lower[i * n + k] * lower[j * n + k];
                }
                lower[i * n + j] = s / ljj;
            }
        }
        Ok(Self { n, lower })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `log det m = 2 Σ ln L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.lower[i * self.n + i].ln()).sum::<f64>()
    }

    /// Solves `m x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lower[i * n + k] * b[k];
            }
            b[i] = s / self.lower[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * b[k];
            }
            b[i] = s / self.lower[i * n + i];
        }
    }

    /// Full inverse of `m`, symmetrized.
    pub fn inverse(&self) -> DenseMatrix {
        let n = self.n;
        let mut inv = DenseMatrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv.data[i * n + j] = col[i];
            }
        }
        inv.symmetrized().expect("square by construction")
    }
}

/// `ln det m` for a symmetric positive-definite matrix.
pub fn logdet_posdef(m: &DenseMatrix) -> Result<f64> {
    Ok(Cholesky::factor(m)?.logdet())
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::NumericalDomain(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericalDomain(format!(
                "non-finite function value around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Seeded generator backed by ChaCha8, a counter-based stream cipher, so the
/// draw sequence depends only on `(seed, stream)` and never on the platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator on a numbered stream of the same seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product_is_exact() {
        let m = DenseMatrix::from_rows(&[[1.5, -2.0, 0.25], [3.0, 4.0, 5.0], [0.1, 0.2, 0.3]]);
        let i3 = DenseMatrix::identity(3);
        assert_eq!(matmul(&i3, &m).unwrap(), m);
        assert_eq!(matmul(&m, &i3).unwrap(), m);
    }

    #[test]
    fn small_product_by_hand() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = DenseMatrix::from_rows(&[[0.0], [1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), DenseMatrix::from_rows(&[[2.0], [4.0]]));
    }

    #[test]
    fn zero_annihilates() {
        let z = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(matmul(&z, &b).unwrap(), DenseMatrix::zeros(2, 2));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let mut rng = Rng::new(3);
        let a = DenseMatrix::from_vec(4, 5, (0..20).map(|_| rng.normal()).collect()).unwrap();
        let b = DenseMatrix::from_vec(6, 5, (0..30).map(|_| rng.normal()).collect()).unwrap();
        let direct = matmul(&a, &b.transpose()).unwrap();
        assert!(matmul_transb(&a, &b).unwrap().max_abs_diff(&direct) < 1e-12);
        let c = DenseMatrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let direct = matmul(&a.transpose(), &c).unwrap();
        assert!(matmul_transa(&a, &c).unwrap().max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn logdet_cases() {
        assert_eq!(logdet_posdef(&DenseMatrix::identity(4)).unwrap(), 0.0);
        let d = logdet_posdef(&DenseMatrix::diag(&[2.0, 1.0, 1.0, 1.0])).unwrap();
        assert!((d - 0.693147).abs() < 1e-6);
        let mut m = DenseMatrix::identity(4);
        m.scale(1.25);
        assert!((logdet_posdef(&m).unwrap() - 0.892574).abs() < 1e-6);
    }

    #[test]
    fn logdet_errors() {
        assert!(matches!(logdet_posdef(&DenseMatrix::zeros(2, 3)), Err(Error::Shape(_))));
        assert!(matches!(
            logdet_posdef(&DenseMatrix::diag(&[1.0, -1.0])),
            Err(Error::NumericalDomain(_))
        ));
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let m = DenseMatrix::from_rows(&[[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]]);
        let inv = Cholesky::factor(&m).unwrap().inverse();
        let prod = matmul(&m, &inv).unwrap();
        assert!(prod.max_abs_diff(&DenseMatrix::identity(3)) < 1e-12);
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 7.0, &[1.0, 2.0, 3.0], 1e-3).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let g = finite_diff_grad(|x| x.iter().sum(), &[1.0, -2.0, 0.5, 4.0], 1e-3).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
        assert!(finite_diff_grad(|_| f64::NAN, &[0.0], 1e-3).is_err());
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn equal_seeds_give_equal_streams() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::stream(42, 1);
        let mut d = Rng::new(42);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = Rng::new(9);
        let mut p = rng.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
