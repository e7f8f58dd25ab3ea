//! Standalone objectives over a single manifold-valued variable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Parameter};
use crate::error::Result;
use crate::linalg::{spd_sqrt_log, SpdFunction};
use crate::manifold::ManifoldDescriptor;
use crate::tensor::Tensor;

/// `f(X) = -tr(XᵀAX)` over `St(n, p)`; minimisers span the top-`p`
/// eigenspace of the symmetric matrix `A`.
#[derive(Debug, Clone)]
pub struct Rayleigh {
    a: Tensor,
    p: usize,
}

impl Rayleigh {
    pub fn new(a: Tensor, p: usize) -> Result<Self> {
        crate::linalg::sym_eig(&a)?;
        ManifoldDescriptor::stiefel(a.rows(), p)?;
        Ok(Self { a, p })
    }

    /// `A = M + Mᵀ` with `M` standard Gaussian.
    pub fn random(n: usize, p: usize, seed: u64) -> Result<Self> {
        let m = Tensor::randn(&[n, n], &mut ChaCha8Rng::seed_from_u64(seed));
        Self::new(m.add(&m.t()), p)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.a
    }

    pub fn manifold(&self) -> ManifoldDescriptor {
        ManifoldDescriptor::stiefel(self.a.rows(), self.p).expect("checked in new")
    }

    pub fn cost(&self, x: &Tensor) -> Result<f64> {
        Ok(-x.dot(&self.a.matmul(x)?))
    }

    /// Autodiff graph of the cost with `x` as its only parameter.
    pub fn graph(&self, x: &Parameter) -> Result<Graph> {
        let mut g = Graph::new();
        let a = g.constant(self.a.clone());
        let xn = g.param(x);
        let ax = g.matmul(a, xn)?;
        let prod = g.mul(xn, ax)?;
        let total = g.sum(prod);
        g.scale(total, -1.0);
        Ok(g)
    }
}

/// `f(X) = Σᵢ d(X, Aᵢ)²` over SPD matrices under the affine-invariant
/// distance; the minimiser is the Karcher mean of the `Aᵢ`.
#[derive(Debug, Clone)]
pub struct Karcher {
    points: Vec<Tensor>,
    manifold: ManifoldDescriptor,
}

impl Karcher {
    pub fn new(points: Vec<Tensor>) -> Result<Self> {
        let n = points.first().map_or(0, Tensor::rows);
        let manifold = ManifoldDescriptor::positive_definite(n)?;
        for p in &points {
            spd_sqrt_log(p, SpdFunction::Sqrt)?;
        }
        Ok(Self { points, manifold })
    }

    /// `k` random SPD matrices of size `n`.
    pub fn random(n: usize, k: usize, seed: u64) -> Result<Self> {
        let m = ManifoldDescriptor::positive_definite(n)?;
        Self::new((0..k as u64).map(|i| m.rand(seed.wrapping_add(i))).collect())
    }

    pub fn points(&self) -> &[Tensor] {
        &self.points
    }

    pub fn manifold(&self) -> &ManifoldDescriptor {
        &self.manifold
    }

    pub fn cost(&self, x: &Tensor) -> Result<f64> {
        self.points.iter().try_fold(0.0, |acc, a| {
            let d = self.manifold.dist(x, a)?;
            Ok(acc + d * d)
        })
    }

    /// Euclidean gradient `-2 Σ X^{-1/2} log(X^{-1/2} Aᵢ X^{-1/2}) X^{-1/2}`.
    pub fn egrad(&self, x: &Tensor) -> Result<Tensor> {
        let s = spd_sqrt_log(x, SpdFunction::InvSqrt)?;
        let mut g = Tensor::zeros(x.shape());
        for a in &self.points {
            let inner = s.matmul(a)?.matmul(&s)?.sym();
            let log = spd_sqrt_log(&inner, SpdFunction::Log)?;
            g.add_assign(&s.matmul(&log)?.matmul(&s)?);
        }
        Ok(g.scale(-2.0).sym())
    }
}
