//! Riemannian optimizers. Every update converts the accumulated Euclidean
//! gradient to a Riemannian one, moves along a tangent direction and lands
//! back on the manifold through the retraction.

use std::collections::HashMap;

use crate::autodiff::{ParamId, Parameter, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

/// Full loss of a model as it currently stands.
pub type Objective<'a, M> = &'a mut dyn FnMut(&M) -> Result<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl SgdConfig {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !positive(lr) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self { lr, momentum })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdagradConfig {
    pub lr: f64,
    pub eps: f64,
}

impl AdagradConfig {
    pub const DEFAULT_EPS: f64 = 1e-10;

    pub fn new(lr: f64, eps: f64) -> Result<Self> {
        if !positive(lr) || !positive(eps) {
            return Err(Error::InvalidArgument(format!(
                "lr and eps must be positive, got lr={lr}, eps={eps}"
            )));
        }
        Ok(Self { lr, eps })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaRule {
    #[default]
    FletcherReeves,
    /// Polak–Ribière clipped at zero.
    PolakRibierePlus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Armijo {
    pub c1: f64,
    pub contraction: f64,
    pub max_backtracks: usize,
    pub initial_step: f64,
}

impl Default for Armijo {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            contraction: 0.5,
            max_backtracks: 30,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CgConfig {
    pub beta_rule: BetaRule,
    pub armijo: Armijo,
}

impl CgConfig {
    pub fn new(beta_rule: BetaRule, armijo: Armijo) -> Result<Self> {
        let a = armijo;
        let unit = |v: f64| positive(v) && v < 1.0;
        if !unit(a.c1) || !unit(a.contraction) || !positive(a.initial_step) {
            return Err(Error::InvalidArgument(format!("invalid Armijo parameters {a:?}")));
        }
        Ok(Self { beta_rule, armijo })
    }
}

/// Gradients below this Riemannian norm are treated as zero by CG.
pub const CG_GRAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CgMemory {
    pub direction: Tensor,
    pub grad: Tensor,
    pub grad_inner: f64,
    /// Point at which `direction` and `grad` are tangent.
    pub point: Tensor,
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamState {
    /// SGD momentum buffer, tangent at `point`.
    pub momentum: Option<Tensor>,
    pub point: Option<Tensor>,
    /// Adagrad running sum of squared gradient entries.
    pub accumulator: Option<Tensor>,
    pub cg: Option<CgMemory>,
}

/// Stores and returns `egrad2rgrad(value, egrad)`.
pub fn compute_rgrad(p: &mut Parameter) -> Result<Tensor> {
    let egrad = p.egrad.as_ref().ok_or(Error::MissingGradient)?;
    let rgrad = p.manifold().egrad2rgrad(&p.value, egrad)?;
    p.rgrad = Some(rgrad.clone());
    Ok(rgrad)
}

fn rgrad_of(p: &Parameter) -> Result<Tensor> {
    p.rgrad.clone().ok_or(Error::MissingGradient)
}

/// Momentum SGD: `buf ← μ·transp(buf) + rgrad`, `x ← R_x(−lr·buf)`.
pub fn sgd_step(p: &mut Parameter, cfg: &SgdConfig, state: &mut ParamState) -> Result<()> {
    let rgrad = rgrad_of(p)?;
    let m = p.manifold().clone();
    let x = &p.value;
    let buf = match (&state.momentum, &state.point) {
        (Some(b), Some(prev)) if cfg.momentum > 0.0 => m.transp(prev, x, b)?.scale(cfg.momentum).add(&rgrad),
        _ => rgrad,
    };
    let next = m.retr(x, &buf, -cfg.lr)?;
    if cfg.momentum > 0.0 {
        state.momentum = Some(m.transp(x, &next, &buf)?);
        state.point = Some(next.clone());
    }
    p.value = next;
    Ok(())
}

/// Adagrad with ambient entrywise accumulation and re-projection of the
/// scaled direction onto the tangent space.
pub fn adagrad_step(p: &mut Parameter, cfg: &AdagradConfig, state: &mut ParamState) -> Result<()> {
    let rgrad = rgrad_of(p)?;
    let m = p.manifold().clone();
    let acc = state
        .accumulator
        .get_or_insert_with(|| Tensor::zeros(rgrad.shape()));
    acc.add_assign(&rgrad.map(|g| g * g));
    let scaled = rgrad.zip_map(acc, |g, a| g / (a.sqrt() + cfg.eps));
    let direction = m.proj(&p.value, &scaled)?;
    p.value = m.retr(&p.value, &direction, -cfg.lr)?;
    Ok(())
}

/// Result of an accepted conjugate-gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub step: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm: f64,
}

/// One Riemannian nonlinear CG step with Armijo backtracking.
///
/// `objective` evaluates the loss with this parameter set to a candidate
/// value (everything else held fixed).
pub fn cg_step(
    p: &mut Parameter,
    cfg: &CgConfig,
    state: &mut ParamState,
    objective: &mut dyn FnMut(&Tensor) -> Result<f64>,
) -> Result<CgOutcome> {
    let g = rgrad_of(p)?;
    let m = p.manifold().clone();
    let x = p.value.clone();
    let gg = m.inner(&x, &g, &g)?;
    if gg.sqrt() <= CG_GRAD_FLOOR {
        let f = objective(&x)?;
        return Ok(CgOutcome {
            step: 0.0,
            loss_before: f,
            loss_after: f,
            grad_norm: gg.sqrt(),
        });
    }

    let mut d = g.scale(-1.0);
    if let Some(mem) = &state.cg {
        let prev_d = m.transp(&mem.point, &x, &mem.direction)?;
        let beta = match cfg.beta_rule {
            BetaRule::FletcherReeves => gg / mem.grad_inner,
            BetaRule::PolakRibierePlus => {
                let prev_g = m.transp(&mem.point, &x, &mem.grad)?;
                (m.inner(&x, &g, &g.sub(&prev_g))? / mem.grad_inner).max(0.0)
            }
        };
        if beta.is_finite() {
            d = d.axpy(beta, &prev_d);
        }
    }
    let mut slope = m.inner(&x, &g, &d)?;
    if slope.is_nan() || slope >= 0.0 {
        d = g.scale(-1.0);
        slope = -gg;
    }

    let f0 = objective(&x)?;
    let a = cfg.armijo;
    let mut t = a.initial_step;
    for _ in 0..=a.max_backtracks {
        // A retraction that fails numerically counts as a rejected step.
        if let Ok(candidate) = m.retr(&x, &d, t) {
            let f = objective(&candidate)?;
            if f <= f0 + a.c1 * t * slope {
                state.cg = Some(CgMemory {
                    direction: d,
                    grad: g,
                    grad_inner: gg,
                    point: x,
                });
                p.value = candidate;
                return Ok(CgOutcome {
                    step: t,
                    loss_before: f0,
                    loss_after: f,
                    grad_norm: gg.sqrt(),
                });
            }
        }
        t *= a.contraction;
    }
    // Leave the evaluation point where it started.
    objective(&x)?;
    Err(Error::LineSearchFailed {
        backtracks: a.max_backtracks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Sgd(SgdConfig),
    Adagrad(AdagradConfig),
    ConjugateGradient(CgConfig),
}

/// A configured optimizer plus its per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    method: Method,
    state: HashMap<ParamId, ParamState>,
}

impl Optimizer {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            state: HashMap::new(),
        }
    }

    pub fn method(&self) -> &Method {
        &self.method
    }

    pub fn state(&self, id: ParamId) -> Option<&ParamState> {
        self.state.get(&id)
    }

    /// Drops all per-parameter state (momentum, accumulators, CG memory).
    pub fn reset(&mut self) {
        self.state.clear();
    }

    pub fn zero_grad<M: ParameterSet + ?Sized>(&self, model: &mut M) {
        model.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Converts gradients and updates every parameter that has one, in
    /// parameter order. Conjugate gradient needs `objective`, which evaluates
    /// the full loss of the model as it currently stands.
    pub fn step_all<M: ParameterSet>(
        &mut self,
        model: &mut M,
        mut objective: Option<Objective<'_, M>>,
    ) -> Result<Vec<Option<CgOutcome>>> {
        let count = model.parameters().len();
        let mut outcomes = Vec::with_capacity(count);
        for i in 0..count {
            let (id, name, has_grad) = {
                let p = &model.parameters()[i];
                (p.id(), p.name().to_string(), p.egrad().is_some())
            };
            if !has_grad {
                outcomes.push(None);
                continue;
            }
            let with_name = |e: Error| Error::Parameter {
                name: name.clone(),
                source: Box::new(e),
            };
            let state = self.state.entry(id).or_default();
            match &self.method {
                Method::Sgd(cfg) => {
                    let mut params = model.parameters_mut();
                    let p = &mut params[i];
                    compute_rgrad(p).and_then(|_| sgd_step(p, cfg, state)).map_err(with_name)?;
                    outcomes.push(None);
                }
                Method::Adagrad(cfg) => {
                    let mut params = model.parameters_mut();
                    let p = &mut params[i];
                    compute_rgrad(p).and_then(|_| adagrad_step(p, cfg, state)).map_err(with_name)?;
                    outcomes.push(None);
                }
                Method::ConjugateGradient(cfg) => {
                    let obj = objective.as_deref_mut().ok_or_else(|| {
                        with_name(Error::InvalidArgument("conjugate gradient needs an objective".into()))
                    })?;
                    let mut working = {
                        let mut params = model.parameters_mut();
                        compute_rgrad(params[i]).map_err(with_name)?;
                        params[i].clone()
                    };
                    let original = working.value.clone();
                    let mut eval = |candidate: &Tensor| -> Result<f64> {
                        model.parameters_mut()[i].value = candidate.clone();
                        obj(model)
                    };
                    let result = cg_step(&mut working, cfg, state, &mut eval);
                    let target = &mut model.parameters_mut()[i];
                    match result {
                        Ok(outcome) => {
                            **target = working;
                            outcomes.push(Some(outcome));
                        }
                        Err(e) => {
                            target.value = original;
                            return Err(with_name(e));
                        }
                    }
                }
            }
        }
        Ok(outcomes)
    }
}
