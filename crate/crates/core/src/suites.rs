//! Named verification suites behind `riemopt check`. Each compares the
//! library against an independent oracle: finite differences, a naive
//! convolution loop, an eigendecomposition or a closed-form SPD midpoint.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Graph, NodeId, Parameter, ParameterSet};
use crate::config::parse_config_str;
use crate::error::{Error, Result};
use crate::linalg::{spd_sqrt_log, sym_eig, SpdFunction};
use crate::manifold::{ManifoldDescriptor, MEMBERSHIP_TOL};
use crate::nn::{Conv2d, Conv2dSpec, Layer, Linear, ManifoldRequest, Sequential};
use crate::optim::{BetaRule, CgConfig, Armijo, Method, Optimizer, SgdConfig};
use crate::problems::{Karcher, Rayleigh};
use crate::tensor::Tensor;
use crate::train;

pub const SUITES: &[&str] = &["gradcheck", "retraction", "rayleigh", "karcher", "mlp", "conv"];

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;
pub const SEEDS: u64 = 10;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// Passes when `value ≤ bound`.
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value <= bound, format!("{value:.3e} <= {bound:.0e}"))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run(name: &str) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = match name {
        "gradcheck" => gradcheck()?,
        "retraction" => retraction()?,
        "rayleigh" => rayleigh()?,
        "karcher" => karcher()?,
        "mlp" => mlp()?,
        "conv" => conv()?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown suite `{other}` (expected one of {})",
                SUITES.join(", ")
            )))
        }
    };
    Ok(SuiteReport {
        suite: name.to_string(),
        checks,
        elapsed: start.elapsed(),
    })
}

fn over_seeds<T: Send>(seeds: Range<u64>, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        seeds.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seeds.map(f).collect()
    }
}

fn worst(values: impl IntoIterator<Item = Result<f64>>) -> Result<f64> {
    values.into_iter().try_fold(0.0, |m, v| Ok(f64::max(m, v?)))
}

// Gradient checks.

type Builder = fn(&mut Graph, NodeId, &mut ChaCha8Rng) -> Result<NodeId>;

/// Wraps `build`'s output in `sum(out ⊙ R)` for a random `R` so every entry
/// of the output influences the scalar.
fn primitive_error(shape: &[usize], build: Builder, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Parameter::euclidean("p", Tensor::randn(shape, &mut rng));
    let mut g = Graph::new();
    let pn = g.param(&p);
    let out = build(&mut g, pn, &mut rng)?;
    if g.shape(out) != [1] {
        let r = g.constant(Tensor::randn(g.shape(out), &mut rng));
        let prod = g.mul(out, r)?;
        g.sum(prod);
    }
    g.forward(&[])?;
    grad_check(&mut g, p.id(), GRAD_STEP)
}

fn primitives() -> Vec<(&'static str, Vec<usize>, Builder)> {
    vec![
        ("matmul (left)", vec![3, 4], |g, p, rng| {
            let c = g.constant(Tensor::randn(&[4, 2], rng));
            g.matmul(p, c)
        }),
        ("matmul (right)", vec![3, 4], |g, p, rng| {
            let c = g.constant(Tensor::randn(&[2, 3], rng));
            g.matmul(c, p)
        }),
        ("add_bias (input)", vec![5, 3], |g, p, rng| {
            let b = g.constant(Tensor::randn(&[3], rng));
            g.add_bias(p, b)
        }),
        ("add_bias (bias)", vec![3], |g, p, rng| {
            let x = g.constant(Tensor::randn(&[5, 3], rng));
            g.add_bias(x, p)
        }),
        ("relu", vec![4, 5], |g, p, _| Ok(g.relu(p))),
        ("log_softmax_rows", vec![4, 5], |g, p, _| g.log_softmax_rows(p)),
        ("nll_loss_mean", vec![6, 4], |g, p, rng| {
            let targets: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
            let lp = g.log_softmax_rows(p)?;
            g.nll_loss_mean(lp, &targets)
        }),
        ("reshape", vec![3, 4], |g, p, _| g.reshape(p, &[2, 6])),
        ("permute", vec![2, 3, 4], |g, p, _| g.permute(p, &[2, 0, 1])),
        ("im2col", vec![2, 2, 5, 5], |g, p, _| g.im2col(p, (3, 3), 2, 1)),
        ("scale", vec![3, 3], |g, p, _| Ok(g.scale(p, -1.7))),
        ("sum", vec![3, 4], |g, p, _| Ok(g.sum(p))),
        ("mul", vec![3, 4], |g, p, rng| {
            let c = g.constant(Tensor::randn(&[3, 4], rng));
            let sq = g.mul(p, p)?;
            g.mul(sq, c)
        }),
        ("add", vec![3, 4], |g, p, rng| {
            let c = g.constant(Tensor::randn(&[3, 4], rng));
            let sq = g.mul(p, p)?;
            g.add(sq, c)
        }),
    ]
}

/// Largest gradient-check error over every parameter of the desk-scale
/// classifier on a random batch.
fn mlp_gradient_error(seed: u64) -> Result<f64> {
    let model = Sequential::mlp(64, &[32, 32, 32], 4, &[ManifoldRequest::Stiefel], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::randn(&[8, 64], &mut rng);
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..4)).collect();
    let mut g = Graph::new();
    let xi = g.input("x", x.shape())?;
    let lp = model.lower(&mut g, xi)?;
    g.nll_loss_mean(lp, &labels)?;
    g.forward(&[("x", &x)])?;
    worst(model.parameters().iter().map(|p| grad_check(&mut g, p.id(), GRAD_STEP)))
}

pub fn gradcheck() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (name, shape, build) in primitives() {
        let err = worst(over_seeds(0..SEEDS, |s| primitive_error(&shape, build, s)))?;
        checks.push(Check::at_most(format!("grad {name}"), err, GRAD_TOL));
    }
    let err = worst(over_seeds(0..SEEDS, mlp_gradient_error))?;
    checks.push(Check::at_most("grad mlp 64-32-32-32-4 stiefel", err, GRAD_TOL));
    Ok(checks)
}

// Manifold contract.

pub const PAIRS: u64 = 20;
pub const RETRACTION_T: f64 = 1e-2;
pub const DECAY_RATIO: f64 = 0.3;
pub const IDEMPOTENCE_TOL: f64 = 1e-12;

fn test_manifolds() -> Vec<ManifoldDescriptor> {
    vec![
        ManifoldDescriptor::euclidean(&[4, 3]).expect("valid"),
        ManifoldDescriptor::stiefel(6, 3).expect("valid"),
        ManifoldDescriptor::stiefel_transposed(5, 2).expect("valid"),
        ManifoldDescriptor::positive_definite(4).expect("valid"),
    ]
}

/// A random unit-norm tangent vector at `x`.
fn unit_tangent(m: &ManifoldDescriptor, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let u = m.proj(x, &Tensor::randn(x.shape(), rng))?;
    let n = m.norm(x, &u)?;
    Ok(u.scale(1.0 / n))
}

/// Two smooth test functions and their Euclidean gradients: the sum of
/// squared entries, and a mix of a linear term and a row-wise log-softmax.
fn smooth_objective(x: &Tensor, which: usize, mix: &Tensor, weights: &Tensor) -> Result<(f64, Tensor)> {
    let p = Parameter::euclidean("x", x.clone());
    let mut g = Graph::new();
    let xn = g.param(&p);
    let sq = g.mul(xn, xn)?;
    let mut out = g.sum(sq);
    if which == 1 {
        let m = g.constant(mix.clone());
        let proj = g.matmul(xn, m)?;
        let lp = g.log_softmax_rows(proj)?;
        let w = g.constant(weights.clone());
        let weighted = g.mul(lp, w)?;
        let s = g.sum(weighted);
        out = g.add(out, s)?;
    }
    let _ = out;
    let f = g.forward(&[])?.item();
    let grad = g.backward()?.get(p.id()).cloned().expect("x is in the graph");
    Ok((f, grad))
}

fn manifold_checks(m: &ManifoldDescriptor) -> Result<Vec<Check>> {
    let shape = m.storage_shape();
    let per_pair = over_seeds(0..PAIRS, |seed| -> Result<[f64; 7]> {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = m.rand(seed);
        let u = unit_tangent(m, &x, &mut rng)?;

        let feasibility = [1e-3, 1e-1, 1.0]
            .iter()
            .map(|&t| m.retr(&x, &u, t).map(|y| m.residual(&y)))
            .try_fold(0.0, |a: f64, r| r.map(|r| a.max(r)))?;

        let zero_step = m.retr(&x, &u, 0.0)? == x && m.retr(&x, &Tensor::zeros(&shape), 1.0)? == x;

        let r = |t: f64| -> Result<f64> { Ok(m.retr(&x, &u, t)?.sub(&x.axpy(t, &u)).norm()) };
        let (full, half) = (r(RETRACTION_T)?, r(RETRACTION_T / 2.0)?);
        let decay_excess = half - DECAY_RATIO * full;

        let g = Tensor::randn(&shape, &mut rng);
        let pg = m.proj(&x, &g)?;
        let idempotence = m.proj(&x, &pg)?.sub(&pg).norm() / g.norm();

        let cols = *shape.last().expect("non-empty shape");
        let mix = Tensor::randn(&[cols, 3], &mut rng);
        let weights = Tensor::randn(&[shape[0], 3], &mut rng);
        let mut identity: f64 = 0.0;
        for which in 0..2 {
            let (_, egrad) = smooth_objective(&x, which, &mix, &weights)?;
            let rgrad = m.egrad2rgrad(&x, &egrad)?;
            for _ in 0..5 {
                let v = unit_tangent(m, &x, &mut rng)?;
                let predicted = m.inner(&x, &rgrad, &v)?;
                let h = GRAD_STEP;
                let (fp, _) = smooth_objective(&m.retr(&x, &v, h)?, which, &mix, &weights)?;
                let (fm, _) = smooth_objective(&m.retr(&x, &v, -h)?, which, &mix, &weights)?;
                let fd = (fp - fm) / (2.0 * h);
                identity = identity.max((predicted - fd).abs() / fd.abs().max(1.0));
            }
        }

        let y = m.retr(&x, &unit_tangent(m, &x, &mut rng)?, 0.5)?;
        let moved = m.transp(&x, &y, &u)?;
        let tangency = m.proj(&y, &moved)?.sub(&moved).norm() / moved.norm().max(1.0);

        Ok([feasibility, f64::from(u8::from(zero_step)), decay_excess, idempotence, identity, tangency, full])
    });
    let rows: Vec<[f64; 7]> = per_pair.into_iter().collect::<Result<_>>()?;
    let max_of = |k: usize| rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
    let min_of = |k: usize| rows.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
    let decay_ratio = rows
        .iter()
        .map(|r| if r[6] == 0.0 { 0.0 } else { (r[2] + DECAY_RATIO * r[6]) / r[6] })
        .fold(0.0, f64::max);
    Ok(vec![
        Check::at_most(format!("{m} retraction feasibility"), max_of(0), MEMBERSHIP_TOL),
        Check::new(
            format!("{m} retr(x, 0) = x"),
            min_of(1) == 1.0,
            if min_of(1) == 1.0 { "bitwise equal" } else { "differs" },
        ),
        Check::new(
            format!("{m} second-order decay"),
            max_of(2) <= 0.0,
            format!("worst r(t/2)/r(t) = {decay_ratio:.4} <= {DECAY_RATIO}"),
        ),
        Check::at_most(format!("{m} projection idempotence"), max_of(3), IDEMPOTENCE_TOL),
        Check::at_most(format!("{m} egrad2rgrad directional derivative"), max_of(4), GRAD_TOL),
        Check::at_most(format!("{m} transport tangency"), max_of(5), MEMBERSHIP_TOL),
    ])
}

pub fn retraction() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for m in test_manifolds() {
        checks.extend(manifold_checks(&m)?);
    }
    Ok(checks)
}

// Dominant subspace.

pub const RAYLEIGH_N: usize = 50;
pub const RAYLEIGH_P: usize = 5;
/// First seed tried when drawing the matrix.
pub const RAYLEIGH_SEED: u64 = 0;
/// Required gap between the p-th and (p+1)-th largest eigenvalues. Fixed-step
/// SGD contracts the error roughly like `exp(-4·lr·steps·gap)`, so 5000 steps
/// at lr 1e-3 need a gap near 0.5 to reach 1e-4.
pub const MIN_EIGENGAP: f64 = 0.5;
pub const CG_MAX_ITERS: usize = 500;
pub const SGD_STEPS: usize = 5000;
pub const SGD_LR: f64 = 1e-3;
/// CG stops once the Riemannian gradient norm falls below this.
pub const CG_GRAD_TOL: f64 = 1e-5;

/// The first `A = M + Mᵀ` (seeds from `seed` upward) whose gap below the
/// top `p` eigenvalues is at least `min_gap`. Returns the problem, the seed
/// used and the gap.
pub fn conditioned_rayleigh(n: usize, p: usize, min_gap: f64, seed: u64) -> Result<(Rayleigh, u64, f64)> {
    for s in seed..seed + 1000 {
        let problem = Rayleigh::random(n, p, s)?;
        let e = sym_eig(problem.matrix())?.eigenvalues;
        let gap = e[n - p] - e[n - p - 1];
        if gap >= min_gap {
            return Ok((problem, s, gap));
        }
    }
    Err(Error::InvalidArgument(format!("no matrix with eigengap {min_gap} near seed {seed}")))
}

/// `−(sum of the p largest eigenvalues of A)`.
pub fn rayleigh_optimum(problem: &Rayleigh, p: usize) -> Result<f64> {
    let eig = sym_eig(problem.matrix())?;
    Ok(-eig.eigenvalues.iter().rev().take(p).sum::<f64>())
}

fn rayleigh_gradient(problem: &Rayleigh, x: &mut Parameter) -> Result<()> {
    x.zero_grad();
    let mut g = problem.graph(x)?;
    g.forward(&[])?;
    g.backward_into(std::iter::once(x))
}

/// Conjugate gradient until the Riemannian gradient norm drops to `grad_tol`, the line
/// search fails from steepest descent, or `max_iters` runs out. Returns the
/// cost after every accepted step.
pub fn rayleigh_cg(
    problem: &Rayleigh,
    x: &mut Parameter,
    beta: BetaRule,
    max_iters: usize,
    grad_tol: f64,
) -> Result<Vec<f64>> {
    let mut opt = Optimizer::new(Method::ConjugateGradient(CgConfig::new(beta, Armijo::default())?));
    let mut costs = vec![problem.cost(x.value())?];
    let mut fresh = true;
    for _ in 0..max_iters {
        rayleigh_gradient(problem, x)?;
        let mut objective = |p: &Parameter| problem.cost(p.value());
        match opt.step_all(x, Some(&mut objective)) {
            Ok(outcomes) => {
                let outcome = outcomes[0].expect("CG reports an outcome");
                if outcome.step == 0.0 {
                    break;
                }
                costs.push(outcome.loss_after);
                fresh = false;
                if outcome.grad_norm <= grad_tol {
                    break;
                }
            }
            Err(e) if matches!(e.root(), Error::LineSearchFailed { .. }) && !fresh => {
                opt.reset();
                fresh = true;
            }
            Err(e) if matches!(e.root(), Error::LineSearchFailed { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(costs)
}

/// Full-batch SGD without momentum. Returns the cost after every step.
pub fn rayleigh_sgd(problem: &Rayleigh, x: &mut Parameter, lr: f64, steps: usize) -> Result<Vec<f64>> {
    let mut opt = Optimizer::new(Method::Sgd(SgdConfig::new(lr, 0.0)?));
    let mut costs = Vec::with_capacity(steps + 1);
    costs.push(problem.cost(x.value())?);
    for _ in 0..steps {
        rayleigh_gradient(problem, x)?;
        opt.step_all(x, None)?;
        costs.push(problem.cost(x.value())?);
    }
    Ok(costs)
}

pub fn rayleigh() -> Result<Vec<Check>> {
    let (problem, seed, gap) = conditioned_rayleigh(RAYLEIGH_N, RAYLEIGH_P, MIN_EIGENGAP, RAYLEIGH_SEED)?;
    let optimum = rayleigh_optimum(&problem, RAYLEIGH_P)?;
    let start = Parameter::random("X", problem.manifold(), &[RAYLEIGH_N, RAYLEIGH_P], seed + 1)?;

    let mut x = start.clone();
    let cg = rayleigh_cg(&problem, &mut x, BetaRule::FletcherReeves, CG_MAX_ITERS, CG_GRAD_TOL)?;
    let cg_gap = (cg.last().expect("initial cost") - optimum).abs();
    let cg_monotone = cg.windows(2).all(|w| w[1] <= w[0]);
    let cg_ties = cg.windows(2).filter(|w| w[1] == w[0]).count();
    let cg_residual = x.constraint_residual();

    let mut z = start.clone();
    let pr = rayleigh_cg(&problem, &mut z, BetaRule::PolakRibierePlus, CG_MAX_ITERS, CG_GRAD_TOL)?;
    let pr_gap = (pr.last().expect("initial cost") - optimum).abs();

    let mut y = start.clone();
    let sgd = rayleigh_sgd(&problem, &mut y, SGD_LR, SGD_STEPS)?;
    let sgd_gap = (sgd.last().expect("initial cost") - optimum).abs();
    let sgd_descent = sgd.windows(2).take(100).all(|w| w[1] <= w[0]);

    Ok(vec![
        Check::new(
            "cg cost vs eigenvalue oracle",
            cg_gap <= 1e-6,
            format!(
                "|f - f*| = {cg_gap:.3e} <= 1e-6 after {} iterations (f* = {optimum:.6}, seed {seed}, eigengap {gap:.3})",
                cg.len() - 1
            ),
        ),
        Check::new(
            "cg (polak-ribiere+) cost vs eigenvalue oracle",
            pr_gap <= 1e-6,
            format!("|f - f*| = {pr_gap:.3e} <= 1e-6 after {} iterations", pr.len() - 1),
        ),
        Check::new(
            "cg accepted steps never increase the cost",
            cg_monotone,
            format!("{} accepted steps, {cg_ties} below one ulp of f", cg.len() - 1),
        ),
        Check::at_most("cg stiefel residual", cg_residual, 1e-8),
        Check::new(
            "sgd cost vs eigenvalue oracle",
            sgd_gap <= 1e-4,
            format!("|f - f*| = {sgd_gap:.3e} <= 1e-4 after {SGD_STEPS} steps at lr {SGD_LR}"),
        ),
        Check::new("sgd non-increasing over first 100 steps", sgd_descent, format!("lr {SGD_LR}")),
        Check::at_most("sgd stiefel residual", y.constraint_residual(), 1e-8),
    ])
}

// Karcher mean of two SPD matrices.

pub const KARCHER_N: usize = 5;
pub const KARCHER_SEED: u64 = 11;
pub const KARCHER_LR: f64 = 0.25;
pub const KARCHER_STEPS: usize = 200;

/// `A^{1/2} (A^{-1/2} B A^{-1/2})^{1/2} A^{1/2}`.
pub fn geodesic_midpoint(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let s = spd_sqrt_log(a, SpdFunction::Sqrt)?;
    let si = spd_sqrt_log(a, SpdFunction::InvSqrt)?;
    let inner = si.matmul(b)?.matmul(&si)?.sym();
    let root = spd_sqrt_log(&inner, SpdFunction::Sqrt)?;
    Ok(s.matmul(&root)?.matmul(&s)?.sym())
}

pub fn karcher_sgd(problem: &Karcher, x: &mut Parameter, lr: f64, steps: usize) -> Result<Vec<f64>> {
    let mut opt = Optimizer::new(Method::Sgd(SgdConfig::new(lr, 0.0)?));
    let mut costs = vec![problem.cost(x.value())?];
    for _ in 0..steps {
        x.zero_grad();
        x.accumulate_egrad(&problem.egrad(x.value())?)?;
        opt.step_all(x, None)?;
        costs.push(problem.cost(x.value())?);
    }
    Ok(costs)
}

pub fn karcher() -> Result<Vec<Check>> {
    let problem = Karcher::random(KARCHER_N, 2, KARCHER_SEED)?;
    let oracle = geodesic_midpoint(&problem.points()[0], &problem.points()[1])?;
    let mut x = Parameter::new("X", Tensor::eye(KARCHER_N), problem.manifold().clone())?;
    let costs = karcher_sgd(&problem, &mut x, KARCHER_LR, KARCHER_STEPS)?;
    let err = x.value().sub(&oracle).norm();
    let half = problem.manifold().dist(&problem.points()[0], &problem.points()[1])? / 2.0;
    let to_a = problem.manifold().dist(x.value(), &problem.points()[0])?;
    Ok(vec![
        Check::new(
            "karcher mean vs geodesic midpoint",
            err <= 1e-5,
            format!("||X - M||_F = {err:.3e} <= 1e-5 after {KARCHER_STEPS} steps"),
        ),
        Check::at_most("distance to endpoint equals half the geodesic", (to_a - half).abs(), 1e-6),
        Check::new(
            "karcher cost decreased",
            costs.last() < costs.first(),
            format!("{:.6e} -> {:.6e}", costs[0], costs[costs.len() - 1]),
        ),
        Check::at_most("spd residual", x.constraint_residual(), 1e-8),
    ])
}

// Desk-scale classifier.

pub const MLP_CONFIG: &str = "\
task = mlp_classify
dataset = synthetic(4, 64, 512)
model.hidden = 32, 32, 32
model.manifold = stiefel
optimizer = adagrad
optimizer.lr = 0.01
epochs = 10
batch_size = 32
seed = 0
";

pub fn mlp() -> Result<Vec<Check>> {
    let cfg = parse_config_str(Path::new("mlp.cfg"), MLP_CONFIG)?;
    let outcome = train::train(&cfg)?;
    let records = &outcome.records;
    let (first, last) = (&records[0], &records[records.len() - 1]);
    let worst_residual = records.iter().map(|r| r.constraint_residual).fold(0.0, f64::max);
    let accuracy = last.accuracy.unwrap_or(0.0);
    Ok(vec![
        Check::new(
            "epoch-10 loss at most half of epoch-1 loss",
            last.loss <= 0.5 * first.loss,
            format!("{:.4e} <= 0.5 * {:.4e}", last.loss, first.loss),
        ),
        Check::at_most("constraint residual every epoch", worst_residual, 1e-6),
        Check::new("training accuracy", accuracy >= 0.9, format!("{accuracy:.4} >= 0.9")),
    ])
}

// Convolution.

pub const CONV_GEOMETRIES: u64 = 25;

#[derive(Debug, Clone, Copy)]
pub struct Geometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    /// Random geometry whose output size divides evenly.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let kernel = (rng.random_range(1..=4), rng.random_range(1..=4));
        let stride = rng.random_range(1..=3);
        let padding = rng.random_range(0..=2);
        let mut side = |k: usize| {
            let mut n = (k + stride * rng.random_range(0..=4)) as isize - 2 * padding as isize;
            while n < 1 {
                n += stride as isize;
            }
            n as usize
        };
        let (height, width) = (side(kernel.0), side(kernel.1));
        Self {
            batch: rng.random_range(1..=3),
            in_channels: rng.random_range(1..=3),
            out_channels: rng.random_range(1..=4),
            height,
            width,
            kernel,
            stride,
            padding,
        }
    }

    pub fn spec(&self, bias: bool) -> Conv2dSpec {
        Conv2dSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            bias,
        }
    }
}

/// Direct seven-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |bt| bt.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (i * stride + ky) as isize - padding as isize;
                                let xx = (j * stride + kx) as isize - padding as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((n * c + ic) * h + y as usize) * wd + xx as usize];
                                let wv = wdat[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, o, oh, ow], out).expect("shape matches data")
}

fn conv_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = Geometry::random(&mut rng);
    let conv = Conv2d::new(geom.spec(rng.random()), ManifoldRequest::None, seed)?;
    let x = Tensor::randn(&[geom.batch, geom.in_channels, geom.height, geom.width], &mut rng);
    let fast = conv.apply(&x)?;
    let slow = naive_conv(&x, conv.weight.value(), conv.bias.as_ref().map(Parameter::value), geom.stride, geom.padding);
    if fast.shape() != slow.shape() {
        return Ok(f64::INFINITY);
    }
    Ok(fast.sub(&slow).max_abs())
}

/// Trains a Stiefel-constrained convolution for `steps` SGD steps and
/// returns `‖W Wᵀ − I‖` of its matricized weight (rows are orthonormal since
/// it is wider than tall).
pub fn stiefel_conv_drift(steps: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let spec = Conv2dSpec {
        in_channels: 2,
        out_channels: 4,
        kernel: (3, 3),
        stride: 1,
        padding: 1,
        bias: true,
    };
    let conv = Conv2d::new(spec, ManifoldRequest::Stiefel, seed)?;
    let head = Linear::new(4 * 6 * 6, 3, true, ManifoldRequest::None, seed + 1)?;
    let mut model = Sequential::new(vec![
        Layer::Conv2d(conv),
        Layer::Relu,
        Layer::Flatten,
        Layer::Linear(head),
        Layer::LogSoftmax,
    ])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let x = Tensor::randn(&[8, 2, 6, 6], &mut rng);
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
    let mut opt = Optimizer::new(Method::Sgd(SgdConfig::new(1e-2, 0.9)?));
    let loss = |model: &Sequential| -> Result<f64> {
        let mut g = Graph::new();
        let xi = g.input("x", x.shape())?;
        let lp = model.lower(&mut g, xi)?;
        g.nll_loss_mean(lp, &labels)?;
        Ok(g.forward(&[("x", &x)])?.item())
    };
    let before = loss(&model)?;
    for _ in 0..steps {
        opt.zero_grad(&mut model);
        let mut g = Graph::new();
        let xi = g.input("x", x.shape())?;
        let lp = model.lower(&mut g, xi)?;
        g.nll_loss_mean(lp, &labels)?;
        g.forward(&[("x", &x)])?;
        g.backward_into(model.parameters_mut())?;
        opt.step_all(&mut model, None)?;
    }
    let after = loss(&model)?;
    let Layer::Conv2d(conv) = &model.layers()[0] else {
        unreachable!("first layer is the convolution")
    };
    let w = conv.weight_matrix();
    let gram = w.matmul(&w.t())?;
    Ok((gram.sub(&Tensor::eye(gram.rows())).norm(), before, after))
}

pub fn conv() -> Result<Vec<Check>> {
    let err = worst(over_seeds(0..CONV_GEOMETRIES, conv_error))?;
    let (drift, before, after) = stiefel_conv_drift(100, 3)?;
    Ok(vec![
        Check::at_most(format!("im2col conv vs naive loops ({CONV_GEOMETRIES} geometries)"), err, 1e-12),
        Check::at_most("stiefel conv orthonormality after 100 sgd steps", drift, 1e-6),
        Check::new("stiefel conv loss decreased", after < before, format!("{before:.4e} -> {after:.4e}")),
    ])
}
