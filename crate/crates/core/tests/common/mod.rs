//! Independent numerical oracles shared by integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues
/// in non-increasing order and the matching eigenvectors as rows.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        if off < 1e-30 * (1.0 + m.iter().map(|x| x * x).sum::<f64>()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[[y, y]].total_cmp(&m[[x, x]]));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[c, order[r]]]);
    (values, vectors)
}

/// Unbiased sample covariance, accumulated pair by pair.
pub fn sample_covariance(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[[i, j]]).sum::<f64>() / n as f64).collect();
    Array2::from_shape_fn((d, d), |(a, b)| {
        (0..n).map(|i| (x[[i, a]] - mean[a]) * (x[[i, b]] - mean[b])).sum::<f64>() / (n - 1) as f64
    })
}

/// Largest principal angle (radians) between the row spaces of two
/// orthonormal k x d bases, via the sine of the projection residual.
pub fn max_principal_angle(u1: &Array2<f64>, u2: &Array2<f64>) -> f64 {
    let proj = u2.dot(&u1.t()).dot(u1);
    let resid = u2 - &proj;
    let gram = resid.dot(&resid.t());
    let (vals, _) = jacobi_eigen(&gram);
    vals[0].max(0.0).sqrt().min(1.0).asin()
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs())).unwrap();
        if pivot != col {
            for k in 0..n {
                m.swap([col, k], [pivot, k]);
            }
            rhs.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            for k in col..n {
                m[[row, k]] -= f * m[[col, k]];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[[row, k]] * x[k]).sum();
        x[row] = (rhs[row] - s) / m[[row, row]];
    }
    x
}

/// Small deterministic generator so oracle fixtures do not depend on the
/// crate's own RNG choices.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Box-Muller standard normal.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// 200 samples of a 2-D Gaussian (std 3 and 2) embedded in 10-D along a
/// random orthonormal pair, plus isotropic noise of std `noise`.
pub fn embedded_gaussian(seed: u64, noise: f64) -> Array2<f64> {
    let mut rng = Lcg(seed);
    let d = 10;
    // two orthonormal directions by Gram-Schmidt
    let mut a: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.iter_mut().for_each(|v| *v /= na);
    let mut b: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b.iter_mut().zip(&a).for_each(|(v, x)| *v -= dot * x);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    b.iter_mut().for_each(|v| *v /= nb);
    let mut x = Array2::zeros((200, d));
    for i in 0..200 {
        let (s, t) = (3.0 * rng.normal(), 2.0 * rng.normal());
        for j in 0..d {
            x[[i, j]] = 5.0 + s * a[j] + t * b[j] + noise * rng.normal();
        }
    }
    x
}
