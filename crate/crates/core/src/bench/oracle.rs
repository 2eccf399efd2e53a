//! Reference solvers for the benchmark problems.
//!
//! Nothing in here calls into `manifold` or `sgd`, and no nalgebra
//! decomposition is used: only plain arithmetic on `Vec<f64>` and
//! row-major slices. That keeps the optima they report independent of the
//! code being benchmarked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major dense matrix used by the oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut d = Self::zeros(n, n);
        for i in 0..n {
            d.data[i * n + i] = 1.0;
        }
        d
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut d = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                d.data[i * cols + j] = f(i, j);
            }
        }
        d
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matmul(&self, other: &Dense) -> Dense {
        assert_eq!(self.cols, other.rows);
        let mut out = Dense::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Dense {
        Dense::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &Dense, v: &[f64]) -> Vec<f64> {
    (0..m.rows)
        .map(|i| dot(&m.data[i * m.cols..(i + 1) * m.cols], v))
        .collect()
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(m: &Dense) -> f64 {
    assert_eq!(m.rows, m.cols);
    let n = m.rows;
    let mut a = m.data.clone();
    let mut det = 1.0;
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
            .unwrap();
        if a[piv * n + k] == 0.0 {
            return 0.0;
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            det = -det;
        }
        let d = a[k * n + k];
        det *= d;
        for i in k + 1..n {
            let f = a[i * n + k] / d;
            for j in k..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    det
}

/// Eigenpair found by power iteration.
#[derive(Clone, Debug)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Power iteration on a symmetric positive semidefinite matrix. Stops when
/// the residual `‖Bv − ρv‖` drops below `tol·scale` or after `max_iter`.
fn power_iteration_psd(b: &Dense, seed: u64, max_iter: usize, tol: f64) -> EigenPair {
    let n = b.rows;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let nv = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let scale = b.frobenius_sq().sqrt().max(f64::MIN_POSITIVE);
    let mut rho = 0.0;
    for _ in 0..max_iter {
        let w = matvec(b, &v);
        rho = dot(&v, &w);
        let resid = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - rho * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        let nw = dot(&w, &w).sqrt();
        if nw == 0.0 {
            return EigenPair { value: 0.0, vector: v };
        }
        v = w.into_iter().map(|x| x / nw).collect();
        if resid <= tol * scale {
            break;
        }
    }
    EigenPair { value: rho, vector: v }
}

/// Full spectrum of a symmetric matrix, descending, by shifted power
/// iteration with Hotelling deflation.
pub fn symmetric_eigen(m: &Dense, seed: u64) -> Vec<EigenPair> {
    assert_eq!(m.rows, m.cols);
    let n = m.rows;
    // Gershgorin bound makes M + cI positive semidefinite.
    let c = (0..n)
        .map(|i| (0..n).map(|j| m.at(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut b = m.clone();
    for i in 0..n {
        b.data[i * n + i] += c;
    }
    let mut pairs = Vec::with_capacity(n);
    for k in 0..n {
        let p = power_iteration_psd(&b, seed.wrapping_add(k as u64), 2_000_000, 1e-14);
        for i in 0..n {
            for j in 0..n {
                b.data[i * n + j] -= p.value * p.vector[i] * p.vector[j];
            }
        }
        pairs.push(EigenPair {
            value: p.value - c,
            vector: p.vector,
        });
    }
    pairs.sort_by(|a, b| b.value.total_cmp(&a.value));
    pairs
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(m: &Dense, seed: u64) -> f64 {
    symmetric_eigen(m, seed)[0].value
}

/// Thin SVD `A = U·diag(σ)·Vᵀ` with σ descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Dense,
    pub sigma: Vec<f64>,
    pub v: Dense,
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (a, b) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (ap, aq) = (*a, *b);
        *a = c * ap - s * aq;
        *b = s * ap + c * aq;
    }
}

/// One-sided (Hestenes) Jacobi SVD of an `m×n` matrix with `m ≥ n`.
pub fn jacobi_svd(a: &Dense) -> Svd {
    let (m, n) = (a.rows, a.cols);
    assert!(m >= n, "jacobi_svd expects rows >= cols");
    // Work on columns.
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = u.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut uu = Dense::zeros(m, n);
    let mut vv = Dense::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        let mut col: Vec<f64> = if s > 1e-300 {
            u[j].iter().map(|x| x / s).collect()
        } else {
            // Complete the basis for null singular directions.
            let mut e = vec![0.0; m];
            e[k % m] = 1.0;
            e
        };
        if s <= 1e-300 {
            for b in &basis {
                let d = dot(&col, b);
                col.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let nc = dot(&col, &col).sqrt();
            col.iter_mut().for_each(|x| *x /= nc);
        }
        for i in 0..m {
            uu.set(i, k, col[i]);
        }
        for i in 0..n {
            vv.set(i, k, v[j][i]);
        }
        basis.push(col);
    }
    Svd { u: uu, sigma, v: vv }
}

/// Optimum of `‖Pω − Q‖²_F` over matrices with orthonormal columns.
#[derive(Clone, Debug)]
pub struct ProcrustesOptimum {
    pub minimizer: Dense,
    pub value: f64,
}

/// `‖Pω − Q‖²_F`
pub fn procrustes_objective(p: &Dense, q: &Dense, w: &Dense) -> f64 {
    let pw = p.matmul(w);
    pw.data.iter().zip(&q.data).map(|(a, b)| (a - b).powi(2)).sum()
}

/// `ω* = U·Vᵀ` from the SVD of `PᵀQ`. Valid when `‖Pω‖_F` is constant on the
/// feasible set (square ω, or `P` with orthonormal columns).
///
/// `det_sign`: for square problems, restrict to matrices with this
/// determinant sign (`+1` for SO(n)); the last singular direction is flipped
/// when `U·Vᵀ` falls in the other component.
pub fn procrustes_optimum(p: &Dense, q: &Dense, det_sign: Option<f64>) -> ProcrustesOptimum {
    let a = p.transpose().matmul(q);
    let svd = jacobi_svd(&a);
    let n = a.cols;
    let mut vt = svd.v.transpose();
    if let Some(sign) = det_sign {
        assert_eq!(a.rows, a.cols, "determinant constraint needs a square problem");
        let d = determinant(&svd.u) * determinant(&svd.v);
        if d * sign < 0.0 {
            for j in 0..n {
                let x = vt.at(n - 1, j);
                vt.set(n - 1, j, -x);
            }
        }
    }
    let minimizer = svd.u.matmul(&vt);
    let value = procrustes_objective(p, q, &minimizer);
    ProcrustesOptimum { minimizer, value }
}

/// `Σ_{i≠j} (x_iᵀ M x_j)²` for the columns `x_i` of `w` (`A×B`, row-major).
pub fn off_diagonal_energy(m: &Dense, w: &Dense) -> f64 {
    let cols: Vec<Vec<f64>> = (0..w.cols).map(|j| w.col(j)).collect();
    let mx: Vec<Vec<f64>> = cols.iter().map(|c| matvec(m, c)).collect();
    let mut e = 0.0;
    for i in 0..w.cols {
        for j in 0..w.cols {
            if i != j {
                e += dot(&cols[i], &mx[j]).powi(2);
            }
        }
    }
    e
}

/// Unit vector in `ℝ^{len(angles)+1}` from hyperspherical angles.
fn unit_from_angles(angles: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(angles.len() + 1);
    let mut sin_prod = 1.0;
    for a in angles {
        out.push(sin_prod * a.cos());
        sin_prod *= a.sin();
    }
    out.push(sin_prod);
    out
}

fn oblique_from_angles(rows: usize, cols: usize, theta: &[f64]) -> Dense {
    let per = rows - 1;
    let mut w = Dense::zeros(rows, cols);
    for j in 0..cols {
        let x = unit_from_angles(&theta[j * per..(j + 1) * per]);
        for i in 0..rows {
            w.set(i, j, x[i]);
        }
    }
    w
}

/// Compass (pattern) search on `f` from `x0`, halving the step until it
/// falls below `min_step`.
pub fn compass_search(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step0: f64, min_step: f64) -> (Vec<f64>, f64) {
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut step = step0;
    while step >= min_step {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let old = x[i];
                x[i] = old + dir * step;
                let fy = f(&x);
                if fy < fx {
                    fx = fy;
                    improved = true;
                    break;
                }
                x[i] = old;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

/// Best off-diagonal energy over `restarts` random starts, each refined by
/// compass search in hyperspherical coordinates.
pub fn oblique_restart_optimum(m: &Dense, rows: usize, cols: usize, restarts: u64, seed: u64) -> (f64, Dense) {
    let dim = cols * (rows - 1);
    let f = |theta: &[f64]| off_diagonal_energy(m, &oblique_from_angles(rows, cols, theta));
    let mut best = (f64::INFINITY, Dense::zeros(rows, cols));
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(r));
        let x0: Vec<f64> = (0..dim)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        let (x, fx) = compass_search(&f, &x0, 0.5, 1e-9);
        if fx < best.0 {
            best = (fx, oblique_from_angles(rows, cols, &x));
        }
    }
    best
}
