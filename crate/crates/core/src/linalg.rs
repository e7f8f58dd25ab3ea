//! Matrix factorizations: sign-fixed thin QR, cyclic Jacobi symmetric
//! eigendecomposition, Cholesky solves and spectral functions of SPD matrices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative asymmetry accepted by routines that expect a symmetric input.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Jacobi stops once the off-diagonal mass drops below this fraction of `‖A‖_F`.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Eigenvalues at or below this fraction of `λ_max` count as non-positive.
pub const SPD_EIG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct QrResult {
    /// `n × p` with orthonormal columns.
    pub q: Tensor,
    /// `p × p` upper triangular with a strictly positive diagonal.
    pub r: Tensor,
}

#[derive(Debug, Clone)]
pub struct SymEigResult {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Columns are unit eigenvectors, in the order of `eigenvalues`.
    pub eigenvectors: Tensor,
}

impl SymEigResult {
    /// `V f(Λ) Vᵀ`, symmetrized.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for j in 0..n {
            let fj = f(self.eigenvalues[j]);
            for i in 0..n {
                scaled.set(i, j, v.at(i, j) * fj);
            }
        }
        scaled.matmul(&v.t()).expect("square factors").sym()
    }
}

fn require_matrix(a: &Tensor, op: &str) -> Result<(usize, usize)> {
    if !a.is_matrix() {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", a.shape())));
    }
    Ok((a.rows(), a.cols()))
}

fn require_square(a: &Tensor, op: &str) -> Result<usize> {
    let (n, m) = require_matrix(a, op)?;
    if n != m {
        return Err(Error::shape(op, format!("expected a square matrix, got {n}x{m}")));
    }
    Ok(n)
}

/// Householder thin QR of an `n × p` matrix (`n ≥ p`) with the signs fixed so
/// that `diag(r) > 0`.
pub fn qr_thin(a: &Tensor) -> Result<QrResult> {
    let (n, p) = require_matrix(a, "qr_thin")?;
    if n < p {
        return Err(Error::shape("qr_thin", format!("needs rows >= cols, got {n}x{p}")));
    }
    let mut r = a.data().to_vec();
    let scale = (0..p)
        .map(|j| (0..n).map(|i| r[i * p + j].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(p);

    for j in 0..p {
        let norm = (j..n).map(|i| r[i * p + j].powi(2)).sum::<f64>().sqrt();
        if norm <= 1e-12 * scale || norm == 0.0 {
            return Err(Error::RankDeficient { column: j });
        }
        let x0 = r[j * p + j];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..n).map(|i| r[i * p + j]).collect();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        for c in j..p {
            let proj: f64 = v.iter().enumerate().map(|(k, vk)| vk * r[(j + k) * p + c]).sum();
            let f = 2.0 * proj / vv;
            for (k, vk) in v.iter().enumerate() {
                r[(j + k) * p + c] -= f * vk;
            }
        }
        // Exact zeros below the diagonal.
        r[j * p + j] = alpha;
        for i in j + 1..n {
            r[i * p + j] = 0.0;
        }
        reflectors.push(v);
    }

    // Q = H_0 ⋯ H_{p-1} [I_p; 0]
    let mut q = vec![0.0; n * p];
    for i in 0..p {
        q[i * p + i] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        let vv: f64 = v.iter().map(|x| x * x).sum();
        for c in 0..p {
            let proj: f64 = v.iter().enumerate().map(|(k, vk)| vk * q[(j + k) * p + c]).sum();
            if proj == 0.0 {
                continue;
            }
            let f = 2.0 * proj / vv;
            for (k, vk) in v.iter().enumerate() {
                q[(j + k) * p + c] -= f * vk;
            }
        }
    }

    let mut r_sq = vec![0.0; p * p];
    for i in 0..p {
        let flip = r[i * p + i] < 0.0;
        for c in i..p {
            let v = r[i * p + c];
            r_sq[i * p + c] = if flip { -v } else { v };
        }
        if flip {
            for row in 0..n {
                q[row * p + i] = -q[row * p + i];
            }
        }
    }

    Ok(QrResult {
        q: Tensor::new(vec![n, p], q)?,
        r: Tensor::new(vec![p, p], r_sq)?,
    })
}

fn check_symmetric(a: &Tensor) -> Result<()> {
    let asym = a.sub(&a.t()).norm();
    if asym > SYMMETRY_TOL * a.norm() {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(a: &Tensor) -> Result<SymEigResult> {
    let n = require_square(a, "sym_eig")?;
    check_symmetric(a)?;
    let sym = a.sym();
    let fro = sym.norm();
    let mut m = sym.into_data();
    let mut v = Tensor::eye(n).into_data();

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off(&m) <= JACOBI_TOL * fro {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off(&m) > JACOBI_TOL * fro {
        return Err(Error::NoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
    let eigenvalues = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + dst] = v[k * n + src];
        }
    }
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors: Tensor::new(vec![n, n], vecs)?,
    })
}

/// Lower Cholesky factor of the symmetrized input.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = require_square(a, "cholesky")?;
    let a = a.sym();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Tensor::new(vec![n, n], l)
}

/// Solves `a·x = b` for SPD `a` through its Cholesky factor. `b` may be a
/// vector of length `n` or an `n × k` matrix; the result has `b`'s shape.
pub fn spd_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = require_square(a, "spd_solve")?;
    if b.rows() != n || b.rank() > 2 {
        return Err(Error::shape(
            "spd_solve",
            format!("lhs {n}x{n}, rhs {:?}", b.shape()),
        ));
    }
    let k = b.cols();
    let l = cholesky(a)?;
    let mut x = b.data().to_vec();
    for c in 0..k {
        for i in 0..n {
            let mut s = x[i * k + c];
            for j in 0..i {
                s -= l.at(i, j) * x[j * k + c];
            }
            x[i * k + c] = s / l.at(i, i);
        }
        for i in (0..n).rev() {
            let mut s = x[i * k + c];
            for j in i + 1..n {
                s -= l.at(j, i) * x[j * k + c];
            }
            x[i * k + c] = s / l.at(i, i);
        }
    }
    Tensor::new(b.shape().to_vec(), x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpdFunction {
    Sqrt,
    InvSqrt,
    Log,
}

/// Applies a scalar function to the spectrum of an SPD matrix.
pub fn spd_sqrt_log(a: &Tensor, mode: SpdFunction) -> Result<Tensor> {
    let eig = sym_eig(a)?;
    let lmax = eig.eigenvalues.last().copied().unwrap_or(0.0);
    let lmin = eig.eigenvalues[0];
    if lmax <= 0.0 || lmin <= SPD_EIG_FLOOR * lmax {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(match mode {
        SpdFunction::Sqrt => eig.reconstruct_with(f64::sqrt),
        SpdFunction::InvSqrt => eig.reconstruct_with(|l| 1.0 / l.sqrt()),
        SpdFunction::Log => eig.reconstruct_with(f64::ln),
    })
}
