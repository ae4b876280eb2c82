//! Independent reference implementations used as test oracles. None of these
//! call into the library's numerical routines; they operate on plain
//! row-major `Vec<f64>` buffers.

#![allow(dead_code)]

use lift_core::rng::LiftRng;
use lift_core::Matrix;

/// Row-major dense matrix for oracle code.
#[derive(Clone, Debug)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn from(m: &Matrix) -> Self {
        Dense {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().to_vec(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Naive triple-loop product.
    pub fn mul(&self, other: &Dense) -> Dense {
        assert_eq!(self.cols, other.rows);
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut s = 0.0;
                for l in 0..self.cols {
                    s += self.at(i, l) * other.at(l, j);
                }
                out[i * other.cols + j] = s;
            }
        }
        Dense {
            rows: self.rows,
            cols: other.cols,
            data: out,
        }
    }

    pub fn transpose(&self) -> Dense {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.at(i, j);
            }
        }
        Dense {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, &mut LiftRng::new(seed))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues sorted descending and the matching eigenvectors as columns.
pub fn jacobi_eigh(a: &Dense) -> (Vec<f64>, Dense) {
    let n = a.rows;
    assert_eq!(n, a.cols);
    let mut m = a.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (c, &src) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + c] = v[k * n + src];
        }
    }
    (values, Dense { rows: n, cols: n, data: vecs })
}

/// Singular values from the eigenvalues of `wᵀw`, largest `min(m, n)`.
pub fn singular_values_via_gram(w: &Matrix) -> Vec<f64> {
    let d = Dense::from(w);
    let (vals, _) = jacobi_eigh(&d.transpose().mul(&d));
    let p = w.rows().min(w.cols());
    vals.iter().take(p).map(|&x| x.max(0.0).sqrt()).collect()
}

/// Rank-r approximation `w · V_S · V_Sᵀ`, where `V_S` are the eigenvectors of
/// `wᵀw` for the chosen singular-value indices (0 = largest).
pub fn projected_low_rank(w: &Matrix, indices: &[usize]) -> Dense {
    let d = Dense::from(w);
    let (_, vecs) = jacobi_eigh(&d.transpose().mul(&d));
    let n = w.cols();
    let mut vs = vec![0.0; n * indices.len()];
    for (c, &j) in indices.iter().enumerate() {
        for k in 0..n {
            vs[k * indices.len() + c] = vecs.at(k, j);
        }
    }
    let vs = Dense {
        rows: n,
        cols: indices.len(),
        data: vs,
    };
    d.mul(&vs).mul(&vs.transpose())
}

/// Global sort of all entries by |value| (descending, ties to the lower
/// row-major index), first `k` positions, returned sorted.
pub fn brute_top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().partial_cmp(&values[a].abs()).unwrap().then(a.cmp(&b)));
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// Mask of the `k` largest |entries| of the explicit rank-r (largest)
/// approximation.
pub fn brute_lift_mask(w: &Matrix, r: usize, k: usize) -> Vec<usize> {
    let indices: Vec<usize> = (0..r).collect();
    brute_top_k(&projected_low_rank(w, &indices).data, k)
}

/// Adam over a full dense buffer, touching only positions where `mask` is set.
pub struct DenseAdamOracle {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl DenseAdamOracle {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        DenseAdamOracle {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64], mask: &[bool]) {
        self.t += 1;
        for i in 0..theta.len() {
            if !mask[i] {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - self.beta1.powi(self.t));
            let vh = self.v[i] / (1.0 - self.beta2.powi(self.t));
            theta[i] = theta[i] - self.lr * mh / (vh.sqrt() + self.eps) - self.lr * self.weight_decay * theta[i];
        }
    }

    /// Zeroes the moments outside the new mask.
    pub fn remask(&mut self, mask: &[bool]) {
        for i in 0..mask.len() {
            if !mask[i] {
                self.m[i] = 0.0;
                self.v[i] = 0.0;
            }
        }
    }
}

pub fn dense_mask(len: usize, positions: &[usize]) -> Vec<bool> {
    let mut m = vec![false; len];
    for &p in positions {
        m[p] = true;
    }
    m
}

/// Gather through a dense 0/1 mask: multiply elementwise, then collect the
/// entries at set positions in row-major order.
pub fn dense_gather(values: &[f64], mask: &[bool]) -> Vec<f64> {
    values
        .iter()
        .zip(mask)
        .map(|(v, &on)| (v * if on { 1.0 } else { 0.0 }, on))
        .filter(|(_, on)| *on)
        .map(|(v, _)| v)
        .collect()
}

/// Scalar-loop forward pass of `relu(x·w)·a`.
pub fn naive_forward(w: &Matrix, a: &Matrix, x: &Matrix, relu: bool) -> Vec<f64> {
    let (n, d, h) = (x.rows(), x.cols(), w.cols());
    let mut out = vec![0.0; n];
    for s in 0..n {
        let mut f = 0.0;
        for j in 0..h {
            let mut z = 0.0;
            for i in 0..d {
                z += x.get(s, i) * w.get(i, j);
            }
            let act = if relu { z.max(0.0) } else { z.tanh() };
            f += act * a.get(j, 0);
        }
        out[s] = f;
    }
    out
}

pub fn naive_mse(w: &Matrix, a: &Matrix, x: &Matrix, y: &Matrix, relu: bool) -> f64 {
    let f = naive_forward(w, a, x, relu);
    f.iter()
        .enumerate()
        .map(|(i, p)| (p - y.get(i, 0)).powi(2))
        .sum::<f64>()
        / f.len() as f64
}

/// Central finite-difference gradient of `loss` with respect to each entry.
pub fn finite_difference(m: &Matrix, step: f64, mut loss: impl FnMut(&Matrix) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let mut plus = m.clone();
            plus.set(i, j, m.get(i, j) + step);
            let mut minus = m.clone();
            minus.set(i, j, m.get(i, j) - step);
            out.push((loss(&plus) - loss(&minus)) / (2.0 * step));
        }
    }
    out
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn frobenius_sq_direct(d: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in d {
        s += x * x;
    }
    s
}

/// Whether moving `w[i][j]` by `±step` flips the sign of some pre-activation
/// `(x·w)[s][j]`, which puts a ReLU kink inside the difference stencil.
pub fn stencil_crosses_kink(w: &Matrix, x: &Matrix, i: usize, j: usize, step: f64) -> bool {
    (0..x.rows()).any(|s| {
        let mut z = 0.0;
        for l in 0..w.rows() {
            z += x.get(s, l) * w.get(l, j);
        }
        z.abs() <= x.get(s, i).abs() * step
    })
}

/// Orthogonal matrix from modified Gram–Schmidt on a seeded Gaussian matrix.
pub fn random_orthogonal(n: usize, seed: u64) -> Matrix {
    let g = random_matrix(n, n, seed);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| g.get(i, j)).collect()).collect();
    for j in 0..n {
        for p in 0..j {
            let dot: f64 = (0..n).map(|i| cols[j][i] * cols[p][i]).sum();
            for i in 0..n {
                cols[j][i] -= dot * cols[p][i];
            }
        }
        let norm = frobenius_sq_direct(&cols[j]).sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    Matrix::from_fn(n, n, |i, j| cols[j][i])
}
