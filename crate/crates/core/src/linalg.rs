//! Dense real matrices and the decompositions the rest of the crate builds on:
//! thin SVD, rank-r approximation under several rank-selection rules,
//! spectral / Frobenius norms and numerical rank.

use std::fmt;

use crate::error::{LiftError, Result};
use crate::rng::LiftRng;

/// Dense row-major `f64` matrix. Entries are finite on construction.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols).map(|r| r.to_vec()))
                .finish()
        } else {
            write!(f, "[..]")
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LiftError::Shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(LiftError::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(p) = data.iter().position(|x| !x.is_finite()) {
            return Err(LiftError::NonFinite {
                what: "matrix",
                row: p / cols,
                col: p % cols,
                value: data[p],
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Panics on zero dimensions.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Panics if `f` produces a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::new(rows, cols, data).expect("from_fn produced an invalid matrix")
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LiftError::Shape("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    /// i.i.d. standard-normal entries drawn in row-major order.
    pub fn random_normal(rows: usize, cols: usize, rng: &mut LiftRng) -> Self {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw entries. Callers keep the entries finite.
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    /// Panics on out-of-range indices or a non-finite value.
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        assert!(row < self.rows && col < self.cols);
        assert!(value.is_finite(), "matrix entries must be finite");
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.data[j * self.cols + i])
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LiftError::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * s).collect();
        Matrix::new(self.rows, self.cols, data).expect("scaling produced a non-finite entry")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Matrix::new(self.rows, self.cols, data).expect("map produced a non-finite entry")
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LiftError::Shape(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
        )
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(LiftError::Shape(format!(
                "t_matmul: ({}x{})ᵀ * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        gemm(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, 1, self.cols as isize),
            (&other.data, other.cols as isize, 1),
        )
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(LiftError::Shape(format!(
                "matmul_t: {}x{} * ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        gemm(
            self.rows,
            self.cols,
            other.rows,
            (&self.data, self.cols as isize, 1),
            (&other.data, 1, other.cols as isize),
        )
    }

    pub(crate) fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub(crate) fn t_matvec(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += yi * a;
            }
        }
    }
}

// (data, row stride, col stride)
type Operand<'a> = (&'a [f64], isize, isize);

fn gemm(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>) -> Result<Matrix> {
    let mut c = vec![0.0; m * n];
    // SAFETY: the strides describe in-bounds views of `a.0` (m×k) and `b.0`
    // (k×n); shapes were checked by the callers and `c` holds m×n entries.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Matrix::new(m, n, c)
}

/// Thin SVD `w = u · diag(singular_values) · vᵀ` with `p = min(rows, cols)`
/// triplets, singular values non-increasing.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank_count(&self) -> usize {
        self.singular_values.len()
    }

    /// `Σ_{i ∈ indices} σ_i u_i v_iᵀ`.
    pub fn reconstruct(&self, indices: &[usize]) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        if indices.is_empty() {
            return Matrix::zeros(m, n);
        }
        let r = indices.len();
        let us = Matrix::from_fn(m, r, |i, c| {
            let j = indices[c];
            self.u.get(i, j) * self.singular_values[j]
        });
        let vs = Matrix::from_fn(n, r, |i, c| self.v.get(i, indices[c]));
        us.matmul_t(&vs).expect("factor shapes agree")
    }
}

/// Thin SVD of `w`. Backed by faer's divide-and-conquer / QR SVD, run
/// sequentially so the result is deterministic.
pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    let view = faer::MatRef::from_row_major_slice(w.as_slice(), w.rows(), w.cols());
    let decomposition = view.thin_svd().map_err(|_| LiftError::NoConvergence {
        what: "svd",
        iterations: 0,
    })?;
    let (u, s, v) = (decomposition.U(), decomposition.S(), decomposition.V());
    let p = w.rows().min(w.cols());
    let sv = s.column_vector();
    let singular_values: Vec<f64> = (0..p).map(|i| sv[i]).collect();
    if singular_values.iter().any(|x| !x.is_finite()) {
        return Err(LiftError::NoConvergence {
            what: "svd",
            iterations: 0,
        });
    }
    Ok(SvdFactors {
        u: Matrix::new(w.rows(), p, row_major(u))?,
        singular_values,
        v: Matrix::new(w.cols(), p, row_major(v))?,
    })
}

/// Singular values only, non-increasing. Cheaper than [`svd`].
pub fn singular_values(w: &Matrix) -> Result<Vec<f64>> {
    let view = faer::MatRef::from_row_major_slice(w.as_slice(), w.rows(), w.cols());
    let mut sv = view.singular_values().map_err(|_| LiftError::NoConvergence {
        what: "singular values",
        iterations: 0,
    })?;
    if sv.iter().any(|x| !x.is_finite()) {
        return Err(LiftError::NoConvergence {
            what: "singular values",
            iterations: 0,
        });
    }
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

fn row_major(m: faer::MatRef<'_, f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Which singular triplets a rank-r approximation keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankVariant {
    Largest,
    Smallest,
    Random { seed: u64 },
    /// `⌈r/2⌉` largest plus `⌊r/2⌋` smallest.
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankSelection {
    pub variant: RankVariant,
    pub rank: usize,
}

impl RankSelection {
    pub fn largest(rank: usize) -> Self {
        RankSelection {
            variant: RankVariant::Largest,
            rank,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.rank == 0 || self.rank > p {
            return Err(LiftError::Precondition(format!(
                "rank {} outside 1..={p}",
                self.rank
            )));
        }
        if self.variant == RankVariant::Hybrid && self.rank < 2 {
            return Err(LiftError::Precondition(
                "hybrid rank selection needs rank >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Indices (into the non-increasing singular value sequence) to keep,
    /// sorted ascending. Equal singular values are resolved towards the lower
    /// index.
    pub fn indices(&self, singular_values: &[f64]) -> Result<Vec<usize>> {
        let p = singular_values.len();
        self.validate(p)?;
        let r = self.rank;
        let by_desc = |p: usize| {
            let mut idx: Vec<usize> = (0..p).collect();
            idx.sort_by(|&a, &b| {
                singular_values[b]
                    .total_cmp(&singular_values[a])
                    .then(a.cmp(&b))
            });
            idx
        };
        let by_asc = |p: usize| {
            let mut idx: Vec<usize> = (0..p).collect();
            idx.sort_by(|&a, &b| {
                singular_values[a]
                    .total_cmp(&singular_values[b])
                    .then(a.cmp(&b))
            });
            idx
        };
        let mut chosen = match self.variant {
            RankVariant::Largest => by_desc(p)[..r].to_vec(),
            RankVariant::Smallest => by_asc(p)[..r].to_vec(),
            RankVariant::Random { seed } => LiftRng::new(seed).sample_indices(p, r),
            RankVariant::Hybrid => {
                let top = r.div_ceil(2);
                let mut chosen = by_desc(p)[..top].to_vec();
                let bottom: Vec<usize> = by_asc(p)
                    .into_iter()
                    .filter(|i| !chosen.contains(i))
                    .take(r / 2)
                    .collect();
                chosen.extend(bottom);
                chosen
            }
        };
        chosen.sort_unstable();
        Ok(chosen)
    }
}

pub fn low_rank_approx(w: &Matrix, sel: &RankSelection) -> Result<Matrix> {
    sel.validate(w.rows().min(w.cols()))?;
    let factors = svd(w)?;
    low_rank_from_factors(&factors, sel)
}

pub fn low_rank_from_factors(factors: &SvdFactors, sel: &RankSelection) -> Result<Matrix> {
    let idx = sel.indices(&factors.singular_values)?;
    Ok(factors.reconstruct(&idx))
}

pub fn frobenius_norm(w: &Matrix) -> f64 {
    w.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct PowerIteration {
    pub value: f64,
    /// Unit estimate of the leading right singular vector.
    pub vector: Vec<f64>,
    pub iterations: usize,
}

/// Largest singular value by power iteration on `wᵀw`.
pub fn spectral_norm(w: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    Ok(power_iteration(w, None, tol, max_iter)?.value)
}

/// Power iteration on `wᵀw`, stopping once the relative change of the
/// estimate drops below `tol`.
///
/// Starts from `start` when given (useful to warm-start along a training
/// trajectory), otherwise from the normalized all-ones vector. If the start is
/// annihilated by `wᵀw` while `w` is nonzero, restarts once from a seeded
/// random vector.
pub fn power_iteration(
    w: &Matrix,
    start: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<PowerIteration> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(LiftError::Precondition(format!("tol must be > 0, got {tol}")));
    }
    let n = w.cols();
    if frobenius_norm(w) == 0.0 {
        return Ok(PowerIteration {
            value: 0.0,
            vector: unit_ones(n),
            iterations: 0,
        });
    }
    let mut x = match start {
        Some(s) if s.len() == n && s.iter().any(|v| *v != 0.0) => normalized(s.to_vec()),
        Some(s) if s.len() != n => {
            return Err(LiftError::Shape(format!(
                "power iteration start has length {}, expected {n}",
                s.len()
            )))
        }
        _ => unit_ones(n),
    };
    let mut y = vec![0.0; w.rows()];
    let mut z = vec![0.0; n];
    let mut restarted = false;
    let mut prev = f64::NAN;
    for it in 1..=max_iter {
        w.matvec(&x, &mut y);
        let sigma = norm(&y);
        w.t_matvec(&y, &mut z);
        let nz = norm(&z);
        if nz == 0.0 {
            if restarted {
                return Err(LiftError::NoConvergence {
                    what: "power iteration",
                    iterations: it,
                });
            }
            restarted = true;
            let mut rng = LiftRng::new(0x05ee_d0f5_ca1e);
            x = normalized((0..n).map(|_| rng.normal()).collect());
            prev = f64::NAN;
            continue;
        }
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi = zi / nz;
        }
        if (sigma - prev).abs() <= tol * sigma {
            w.matvec(&x, &mut y);
            return Ok(PowerIteration {
                value: norm(&y).max(sigma),
                vector: x,
                iterations: it,
            });
        }
        prev = sigma;
    }
    Err(LiftError::NoConvergence {
        what: "power iteration",
        iterations: max_iter,
    })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalized(mut x: Vec<f64>) -> Vec<f64> {
    let n = norm(&x);
    x.iter_mut().for_each(|v| *v /= n);
    x
}

fn unit_ones(n: usize) -> Vec<f64> {
    vec![1.0 / (n as f64).sqrt(); n]
}

/// Number of singular values strictly above
/// `threshold_multiplier · max(m, n) · σ_max · ε`.
pub fn numerical_rank(w: &Matrix, threshold_multiplier: f64) -> Result<usize> {
    if threshold_multiplier.is_nan() || threshold_multiplier < 1.0 {
        return Err(LiftError::Precondition(format!(
            "threshold multiplier must be >= 1, got {threshold_multiplier}"
        )));
    }
    let sv = singular_values(w)?;
    Ok(rank_from_singular_values(&sv, w.rows().max(w.cols()), threshold_multiplier))
}

pub(crate) fn rank_from_singular_values(sv: &[f64], max_dim: usize, multiplier: f64) -> usize {
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    let tau = multiplier * max_dim as f64 * smax * f64::EPSILON;
    sv.iter().filter(|&&s| s > tau).count()
}
