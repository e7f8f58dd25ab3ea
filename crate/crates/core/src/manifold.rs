//! Matrix manifolds and the operations an optimizer needs from them.
//!
//! A [`ManifoldDescriptor`] acts on tensors in their *storage* layout. For a
//! Stiefel descriptor with `transposed = true` the stored tensor is the `p × n`
//! transpose of the manifold point; every operation transposes on the way in
//! and out, so callers never branch on orientation. Tensors of higher rank
//! (convolution weights) are viewed as their storage matrix and results keep
//! the input shape.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, SpdFunction};
use crate::tensor::Tensor;

/// Membership tolerance for points and tangent vectors.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifoldKind {
    Euclidean(Vec<usize>),
    /// `n × p` matrices with orthonormal columns, `n ≥ p ≥ 1`.
    Stiefel { n: usize, p: usize },
    /// `n × n` symmetric positive definite matrices with the affine-invariant metric.
    PositiveDefinite { n: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifoldDescriptor {
    kind: ManifoldKind,
    transposed: bool,
}

impl ManifoldDescriptor {
    pub fn euclidean(shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::DegenerateShape(shape.to_vec()));
        }
        Ok(Self {
            kind: ManifoldKind::Euclidean(shape.to_vec()),
            transposed: false,
        })
    }

    pub fn stiefel(n: usize, p: usize) -> Result<Self> {
        Self::stiefel_oriented(n, p, false)
    }

    /// Stiefel(n, p) whose points are stored as `p × n` matrices.
    pub fn stiefel_transposed(n: usize, p: usize) -> Result<Self> {
        Self::stiefel_oriented(n, p, true)
    }

    fn stiefel_oriented(n: usize, p: usize, transposed: bool) -> Result<Self> {
        if p == 0 || n < p {
            return Err(Error::DegenerateShape(vec![n, p]));
        }
        Ok(Self {
            kind: ManifoldKind::Stiefel { n, p },
            transposed,
        })
    }

    pub fn positive_definite(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::DegenerateShape(vec![n, n]));
        }
        Ok(Self {
            kind: ManifoldKind::PositiveDefinite { n },
            transposed: false,
        })
    }

    pub fn kind(&self) -> &ManifoldKind {
        &self.kind
    }

    pub fn is_transposed(&self) -> bool {
        self.transposed
    }

    pub fn is_euclidean(&self) -> bool {
        matches!(self.kind, ManifoldKind::Euclidean(_))
    }

    /// Shape of the stored matrix (the Euclidean shape for unconstrained tensors).
    pub fn storage_shape(&self) -> Vec<usize> {
        match &self.kind {
            ManifoldKind::Euclidean(shape) => shape.clone(),
            ManifoldKind::Stiefel { n, p } if self.transposed => vec![*p, *n],
            ManifoldKind::Stiefel { n, p } => vec![*n, *p],
            ManifoldKind::PositiveDefinite { n } => vec![*n, *n],
        }
    }

    fn numel(&self) -> usize {
        self.storage_shape().iter().product()
    }

    fn check(&self, t: &Tensor, op: &str) -> Result<()> {
        let ok = match &self.kind {
            ManifoldKind::Euclidean(shape) => t.shape() == shape.as_slice(),
            _ => t.len() == self.numel(),
        };
        if !ok {
            return Err(Error::shape(
                op,
                format!("tensor {:?} does not fit {self}", t.shape()),
            ));
        }
        Ok(())
    }

    /// Storage tensor → manifold-oriented matrix.
    fn to_point(&self, t: &Tensor) -> Result<Tensor> {
        match &self.kind {
            ManifoldKind::Euclidean(_) => Ok(t.clone()),
            ManifoldKind::Stiefel { n, p } if self.transposed => Ok(t.as_matrix(*p, *n)?.t()),
            ManifoldKind::Stiefel { n, p } => t.as_matrix(*n, *p),
            ManifoldKind::PositiveDefinite { n } => t.as_matrix(*n, *n),
        }
    }

    /// Manifold-oriented matrix → storage tensor with `like`'s shape.
    fn store_point(&self, m: Tensor, like: &[usize]) -> Result<Tensor> {
        let m = if self.transposed { m.t() } else { m };
        m.into_reshape(like)
    }

    /// A random point, deterministic in `seed`, in storage layout.
    ///
    /// Stiefel: Q factor of a standard Gaussian `n × p`. SPD: `AAᵀ + I`.
    /// Euclidean: standard Gaussian entries.
    pub fn rand(&self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = self.storage_shape();
        let point = match &self.kind {
            ManifoldKind::Euclidean(shape) => return Tensor::randn(shape, &mut rng),
            ManifoldKind::Stiefel { n, p } => loop {
                let g = Tensor::randn(&[*n, *p], &mut rng);
                // A Gaussian matrix is rank deficient with probability zero.
                if let Ok(qr) = linalg::qr_thin(&g) {
                    break qr.q;
                }
            },
            ManifoldKind::PositiveDefinite { n } => {
                let a = Tensor::randn(&[*n, *n], &mut rng);
                a.matmul(&a.t())
                    .expect("square")
                    .add(&Tensor::eye(*n))
                    .sym()
            }
        };
        self.store_point(point, &shape).expect("storage shape")
    }

    /// Orthogonal projection of an ambient tensor onto the tangent space at `x`.
    pub fn proj(&self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        self.check(x, "proj")?;
        x.same_shape(g, "proj")?;
        match &self.kind {
            ManifoldKind::Euclidean(_) => Ok(g.clone()),
            ManifoldKind::Stiefel { .. } => {
                let xm = self.to_point(x)?;
                let gm = self.to_point(g)?;
                let s = xm.t().matmul(&gm)?.sym();
                let u = gm.sub(&xm.matmul(&s)?);
                self.store_point(u, g.shape())
            }
            ManifoldKind::PositiveDefinite { .. } => {
                let u = self.to_point(g)?.sym();
                self.store_point(u, g.shape())
            }
        }
    }

    /// Riemannian gradient from the Euclidean gradient of the ambient loss.
    pub fn egrad2rgrad(&self, x: &Tensor, egrad: &Tensor) -> Result<Tensor> {
        match &self.kind {
            ManifoldKind::Euclidean(_) | ManifoldKind::Stiefel { .. } => self.proj(x, egrad),
            ManifoldKind::PositiveDefinite { .. } => {
                self.check(x, "egrad2rgrad")?;
                x.same_shape(egrad, "egrad2rgrad")?;
                let xm = self.to_point(x)?;
                let g = self.to_point(egrad)?.sym();
                let r = xm.matmul(&g)?.matmul(&xm)?.sym();
                self.store_point(r, x.shape())
            }
        }
    }

    /// Retraction `R_x(t·u)`. Returns `x` unchanged when `t == 0` or `u == 0`.
    pub fn retr(&self, x: &Tensor, u: &Tensor, t: f64) -> Result<Tensor> {
        self.check(x, "retr")?;
        x.same_shape(u, "retr")?;
        if t == 0.0 || u.is_zero() {
            return Ok(x.clone());
        }
        match &self.kind {
            ManifoldKind::Euclidean(_) => Ok(x.axpy(t, u)),
            ManifoldKind::Stiefel { .. } => {
                let y = self.to_point(x)?.axpy(t, &self.to_point(u)?);
                let q = linalg::qr_thin(&y)?.q;
                self.store_point(q, x.shape())
            }
            ManifoldKind::PositiveDefinite { .. } => {
                let xm = self.to_point(x)?;
                let um = self.to_point(u)?;
                let x_inv_u = linalg::spd_solve(&xm, &um)?;
                let second = um.matmul(&x_inv_u)?;
                let y = xm.axpy(t, &um).axpy(0.5 * t * t, &second).sym();
                // Positive definite in exact arithmetic; guard against round-off.
                linalg::cholesky(&y)?;
                self.store_point(y, x.shape())
            }
        }
    }

    /// Riemannian metric at `x`.
    pub fn inner(&self, x: &Tensor, u: &Tensor, v: &Tensor) -> Result<f64> {
        self.check(x, "inner")?;
        x.same_shape(u, "inner")?;
        x.same_shape(v, "inner")?;
        match &self.kind {
            ManifoldKind::Euclidean(_) | ManifoldKind::Stiefel { .. } => Ok(u.dot(v)),
            ManifoldKind::PositiveDefinite { n } => {
                let xm = self.to_point(x)?;
                let a = linalg::spd_solve(&xm, &self.to_point(u)?)?;
                let b = linalg::spd_solve(&xm, &self.to_point(v)?)?;
                let mut tr = 0.0;
                for i in 0..*n {
                    for j in 0..*n {
                        tr += a.at(i, j) * b.at(j, i);
                    }
                }
                Ok(tr)
            }
        }
    }

    pub fn norm(&self, x: &Tensor, u: &Tensor) -> Result<f64> {
        Ok(self.inner(x, u, u)?.max(0.0).sqrt())
    }

    /// Vector transport of `u` (tangent at `x`) to the tangent space at `y`:
    /// projection for Stiefel, identity otherwise.
    pub fn transp(&self, x: &Tensor, y: &Tensor, u: &Tensor) -> Result<Tensor> {
        self.check(x, "transp")?;
        x.same_shape(y, "transp")?;
        match &self.kind {
            ManifoldKind::Stiefel { .. } => self.proj(y, u),
            _ => {
                x.same_shape(u, "transp")?;
                Ok(u.clone())
            }
        }
    }

    /// Distance from the point set; 0 on the manifold. Stiefel: `‖XᵀX − I‖_F`.
    /// SPD: asymmetry norm, or infinity when not positive definite.
    pub fn residual(&self, t: &Tensor) -> f64 {
        if self.check(t, "residual").is_err() {
            return f64::INFINITY;
        }
        if t.data().iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        match &self.kind {
            ManifoldKind::Euclidean(_) => 0.0,
            ManifoldKind::Stiefel { p, .. } => {
                let m = self.to_point(t).expect("checked");
                m.t().matmul(&m)
                    .expect("conformant")
                    .sub(&Tensor::eye(*p))
                    .norm()
            }
            ManifoldKind::PositiveDefinite { .. } => {
                let m = self.to_point(t).expect("checked");
                let asym = m.sub(&m.t()).norm();
                match linalg::sym_eig(&m.sym()) {
                    Ok(e) if e.eigenvalues[0] > 0.0 => asym,
                    _ => f64::INFINITY,
                }
            }
        }
    }

    pub fn is_point(&self, t: &Tensor, tol: f64) -> bool {
        self.residual(t) <= tol
    }

    pub fn is_tangent(&self, x: &Tensor, t: &Tensor, tol: f64) -> bool {
        if self.check(x, "is_tangent").is_err() || x.shape() != t.shape() {
            return false;
        }
        match &self.kind {
            ManifoldKind::Euclidean(_) => true,
            ManifoldKind::Stiefel { .. } => {
                let (Ok(xm), Ok(um)) = (self.to_point(x), self.to_point(t)) else {
                    return false;
                };
                let a = xm.t().matmul(&um).expect("conformant");
                a.add(&a.t()).norm() <= tol
            }
            ManifoldKind::PositiveDefinite { .. } => {
                let Ok(um) = self.to_point(t) else {
                    return false;
                };
                um.sub(&um.t()).norm() <= tol
            }
        }
    }

    /// Affine-invariant distance `‖log(X^{-1/2} Y X^{-1/2})‖_F`; SPD only.
    pub fn dist(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let ManifoldKind::PositiveDefinite { .. } = self.kind else {
            return Err(Error::Unsupported {
                op: "dist",
                manifold: self.to_string(),
            });
        };
        self.check(x, "dist")?;
        self.check(y, "dist")?;
        let xm = self.to_point(x)?;
        let ym = self.to_point(y)?;
        let w = linalg::spd_sqrt_log(&xm, SpdFunction::InvSqrt)?;
        let inner = w.matmul(&ym)?.matmul(&w)?.sym();
        Ok(linalg::spd_sqrt_log(&inner, SpdFunction::Log)?.norm())
    }
}

impl fmt::Display for ManifoldDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ManifoldKind::Euclidean(shape) => {
                let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                write!(f, "euclidean({})", dims.join("x"))
            }
            ManifoldKind::Stiefel { n, p } if self.transposed => {
                write!(f, "stiefel({n},{p},transposed)")
            }
            ManifoldKind::Stiefel { n, p } => write!(f, "stiefel({n},{p})"),
            ManifoldKind::PositiveDefinite { n } => write!(f, "spd({n})"),
        }
    }
}

impl FromStr for ManifoldDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown manifold descriptor `{s}`"));
        let (name, rest) = s.trim().split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let nums = |sep: char| -> Result<Vec<usize>> {
            args.split(sep)
                .filter(|a| *a != "transposed")
                .map(|a| a.trim().parse::<usize>().map_err(|_| bad()))
                .collect()
        };
        match name {
            "euclidean" => Self::euclidean(&nums('x')?),
            "spd" => match nums(',')?.as_slice() {
                [n] => Self::positive_definite(*n),
                _ => Err(bad()),
            },
            "stiefel" => {
                let transposed = args.ends_with(",transposed");
                match nums(',')?.as_slice() {
                    [n, p] => Self::stiefel_oriented(*n, *p, transposed),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }
}
