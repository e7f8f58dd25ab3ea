//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] is built node by node; every builder call runs shape inference
//! immediately, so a malformed graph is rejected before any numeric work.
//! [`Graph::forward`] binds named inputs and evaluates the tape in insertion
//! order, [`Graph::backward`] propagates from the final (scalar) node and
//! yields the Euclidean gradient of every [`Parameter`] leaf.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, Exec};
use crate::manifold::{ManifoldDescriptor, MEMBERSHIP_TOL};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor together with the manifold it is constrained to.
///
/// Cloning keeps the id, so a clone is the *same* parameter as far as graphs
/// and optimizer state are concerned.
#[derive(Debug, Clone)]
pub struct Parameter {
    id: ParamId,
    name: String,
    pub(crate) value: Tensor,
    manifold: ManifoldDescriptor,
    pub(crate) egrad: Option<Tensor>,
    pub(crate) rgrad: Option<Tensor>,
}

impl Parameter {
    /// Wraps a user value; it must lie on `manifold` within the membership tolerance.
    pub fn new(name: impl Into<String>, value: Tensor, manifold: ManifoldDescriptor) -> Result<Self> {
        if !manifold.is_point(&value, MEMBERSHIP_TOL) {
            return Err(Error::InvalidInitialValue(manifold.to_string()));
        }
        Ok(Self::new_unchecked(name, value, manifold))
    }

    pub(crate) fn new_unchecked(
        name: impl Into<String>,
        value: Tensor,
        manifold: ManifoldDescriptor,
    ) -> Self {
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            manifold,
            egrad: None,
            rgrad: None,
        }
    }

    pub fn euclidean(name: impl Into<String>, value: Tensor) -> Self {
        let manifold = ManifoldDescriptor::euclidean(value.shape()).expect("tensor shapes are valid");
        Self::new_unchecked(name, value, manifold)
    }

    /// A random point of `manifold`, reshaped to `shape` (which must have as
    /// many entries as the manifold's storage matrix).
    pub fn random(
        name: impl Into<String>,
        manifold: ManifoldDescriptor,
        shape: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let value = manifold.rand(seed).into_reshape(shape)?;
        Ok(Self::new_unchecked(name, value, manifold))
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub(crate) fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn manifold(&self) -> &ManifoldDescriptor {
        &self.manifold
    }

    pub fn egrad(&self) -> Option<&Tensor> {
        self.egrad.as_ref()
    }

    pub fn rgrad(&self) -> Option<&Tensor> {
        self.rgrad.as_ref()
    }

    /// Replaces the value after checking manifold membership.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                format!("parameter `{}`", self.name),
                format!("{:?} vs {:?}", value.shape(), self.value.shape()),
            ));
        }
        if !self.manifold.is_point(&value, MEMBERSHIP_TOL) {
            return Err(Error::InvalidInitialValue(self.manifold.to_string()));
        }
        self.value = value;
        Ok(())
    }

    /// Adds `grad` to the Euclidean gradient accumulator.
    pub fn accumulate_egrad(&mut self, grad: &Tensor) -> Result<()> {
        self.value.same_shape(grad, "accumulate_egrad")?;
        match &mut self.egrad {
            Some(g) => g.add_assign(grad),
            None => self.egrad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.egrad = None;
        self.rgrad = None;
    }

    /// Membership residual of the current value.
    pub fn constraint_residual(&self) -> f64 {
        self.manifold.residual(&self.value)
    }
}

/// Something that owns an ordered list of parameters.
pub trait ParameterSet {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;
}

impl ParameterSet for Vec<Parameter> {
    fn parameters(&self) -> Vec<&Parameter> {
        self.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.iter_mut().collect()
    }
}

impl ParameterSet for Parameter {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![self]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![self]
    }
}

/// Clears Euclidean and Riemannian gradients.
pub fn zero_grad<'a>(params: impl IntoIterator<Item = &'a mut Parameter>) {
    params.into_iter().for_each(Parameter::zero_grad);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Tape primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Parameter,
    Constant,
    MatMul,
    AddBias,
    Relu,
    LogSoftmaxRows,
    NllLossMean,
    Reshape,
    Permute,
    Im2Col,
    Scale,
    Sum,
    Mul,
    Add,
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(ParamId),
    Const,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    LogSoftmaxRows(NodeId),
    NllLossMean(NodeId, Vec<usize>),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Im2Col(NodeId, ConvGeometry),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mul(NodeId, NodeId),
    Add(NodeId, NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input(_) => OpKind::Input,
            Op::Param(_) => OpKind::Parameter,
            Op::Const => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Relu(_) => OpKind::Relu,
            Op::LogSoftmaxRows(_) => OpKind::LogSoftmaxRows,
            Op::NllLossMean(..) => OpKind::NllLossMean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Im2Col(..) => OpKind::Im2Col,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Mul(..) => OpKind::Mul,
            Op::Add(..) => OpKind::Add,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    /// Leaf value for parameters and constants.
    leaf: Option<Tensor>,
}

/// Euclidean gradients of the parameters reached by a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds each gradient to its parameter's accumulator. Parameters the
    /// graph never touched are left alone.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        for p in params {
            if let Some(g) = self.by_param.get(&p.id) {
                p.accumulate_egrad(g)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    bindings: HashMap<String, Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, node: NodeId) -> OpKind {
        self.nodes[node.0].op.kind()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    /// Forward output of `node`, once [`Graph::forward`] has run.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, leaf: Option<Tensor>) -> NodeId {
        self.nodes.push(Node { op, shape, leaf });
        self.values.clear();
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, kind: &str, detail: String) -> Error {
        Error::shape(format!("node {} ({kind})", self.nodes.len()), detail)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::DegenerateShape(shape.to_vec()));
        }
        Ok(self.push(Op::Input(name.to_string()), shape.to_vec(), None))
    }

    /// Parameter leaf; the current value is captured on the tape.
    pub fn param(&mut self, p: &Parameter) -> NodeId {
        self.push(Op::Param(p.id), p.value.shape().to_vec(), Some(p.value.clone()))
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value.shape().to_vec(), Some(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]], None))
    }

    /// Adds a length-`n` bias to every row of a `batch × n` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(self.mismatch("add_bias", format!("{sx:?} + {sb:?}")));
        }
        Ok(self.push(Op::AddBias(x, bias), sx, None))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Relu(x), s, None)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(self.mismatch("log_softmax_rows", format!("expected a matrix, got {s:?}")));
        }
        Ok(self.push(Op::LogSoftmaxRows(x), s, None))
    }

    /// Mean negative log-likelihood of `targets` under row log-probabilities.
    pub fn nll_loss_mean(&mut self, log_probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.shape(log_probs).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(self.mismatch(
                "nll_loss_mean",
                format!("log-probs {s:?} with {} targets", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(self.mismatch("nll_loss_mean", format!("target {t} >= {} classes", s[1])));
        }
        Ok(self.push(Op::NllLossMean(log_probs, targets.to_vec()), vec![1], None))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(x);
        if shape.is_empty() || shape.contains(&0) || s.iter().product::<usize>() != shape.iter().product() {
            return Err(self.mismatch("reshape", format!("{s:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec(), None))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm.iter().all(|&a| a < s.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(self.mismatch("permute", format!("{perm:?} on {s:?}")));
        }
        let shape = perm.iter().map(|&a| s[a]).collect();
        Ok(self.push(Op::Permute(x, perm.to_vec()), shape, None))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.permute(x, &[1, 0])
    }

    /// Patch extraction of a `[batch, channels, h, w]` tensor into a
    /// `(batch·oh·ow) × (channels·kh·kw)` matrix.
    pub fn im2col(
        &mut self,
        x: NodeId,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(self.mismatch("im2col", format!("expected NCHW input, got {s:?}")));
        }
        let geom = ConvGeometry {
            batch: s[0],
            channels: s[1],
            height: s[2],
            width: s[3],
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride,
            padding,
        };
        let (oh, ow) = geom.output_size().ok_or_else(|| {
            Error::InvalidGeometry(format!(
                "input {}x{}, kernel {}x{}, stride {stride}, padding {padding}",
                s[2], s[3], kernel.0, kernel.1
            ))
        })?;
        Ok(self.push(Op::Im2Col(x, geom), vec![s[0] * oh * ow, geom.patch_len()], None))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Scale(x, factor), s, None)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![1], None)
    }

    /// Entrywise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(self.mismatch("mul", format!("{sa:?} * {sb:?}")));
        }
        Ok(self.push(Op::Mul(a, b), sa, None))
    }

    /// Entrywise sum of two tensors of the same shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(self.mismatch("add", format!("{sa:?} + {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa, None))
    }

    /// Binds the named inputs and evaluates every node. Returns the output of
    /// the final node.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor)]) -> Result<Tensor> {
        let mut bindings = HashMap::with_capacity(inputs.len());
        for (name, t) in inputs {
            bindings.insert(name.to_string(), (*t).clone());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input(name) = &node.op {
                let t = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::shape(
                        format!("node {i} (input `{name}`)"),
                        format!("declared {:?}, bound {:?}", node.shape, t.shape()),
                    ));
                }
            }
        }
        self.bindings = bindings;
        self.evaluate()
    }

    fn evaluate(&mut self) -> Result<Tensor> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("empty graph".into()));
        }
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let get = |id: NodeId| values[id.0].as_ref().expect("topological order");
            let out = match &node.op {
                Op::Input(name) => self.bindings[name].clone(),
                Op::Param(_) | Op::Const => node.leaf.clone().expect("leaf value"),
                Op::MatMul(a, b) => get(*a).matmul(get(*b))?,
                Op::AddBias(x, b) => add_bias(get(*x), get(*b)),
                Op::Relu(x) => get(*x).map(|v| v.max(0.0)),
                Op::LogSoftmaxRows(x) => log_softmax_rows(get(*x)),
                Op::NllLossMean(x, targets) => {
                    let lp = get(*x);
                    let c = lp.cols();
                    let total: f64 = targets
                        .iter()
                        .enumerate()
                        .map(|(i, &t)| lp.data()[i * c + t])
                        .sum();
                    Tensor::scalar(-total / targets.len() as f64)
                }
                Op::Reshape(x) => get(*x).reshape(&node.shape)?,
                Op::Permute(x, perm) => permute(get(*x), perm),
                Op::Im2Col(x, geom) => {
                    let mut out = vec![0.0; node.shape.iter().product()];
                    let exec = Exec::auto(out.len());
                    kernels::im2col(get(*x).data(), geom, &mut out, exec);
                    Tensor::new(node.shape.clone(), out)?
                }
                Op::Scale(x, c) => get(*x).scale(*c),
                Op::Sum(x) => Tensor::scalar(get(*x).data().iter().sum()),
                Op::Mul(a, b) => get(*a).zip_map(get(*b), |x, y| x * y),
                Op::Add(a, b) => get(*a).add(get(*b)),
            };
            values.push(Some(out));
        }
        let out = values.last().cloned().flatten().expect("non-empty");
        self.values = values;
        Ok(out)
    }

    /// Gradients of the scalar final node with respect to every parameter leaf.
    pub fn backward(&self) -> Result<Gradients> {
        if self.values.len() != self.nodes.len() || self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        let last = self.nodes.len() - 1;
        if self.nodes[last].shape != [1] {
            return Err(Error::NonScalarOutput(self.nodes[last].shape.clone()));
        }
        let val = |id: &NodeId| self.values[id.0].as_ref().expect("forward ran");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[last] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=last).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input(_) | Op::Const => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(g) => g.add_assign(&dy),
                    None => {
                        out.by_param.insert(*id, dy);
                    }
                },
                Op::MatMul(a, b) => {
                    let da = dy.matmul(&val(b).t())?;
                    let db = val(a).t().matmul(&dy)?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let n = dy.cols();
                    let mut db = vec![0.0; n];
                    for row in dy.data().chunks(n) {
                        db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    acc(&mut grads, *b, Tensor::new(vec![n], db)?);
                    acc(&mut grads, *x, dy);
                }
                Op::Relu(x) => {
                    // Subgradient 0 at exactly 0.
                    let dx = val(x).zip_map(&dy, |v, g| if v > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *x, dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = self.values[i].as_ref().expect("forward ran");
                    let c = y.cols();
                    let mut dx = dy.clone();
                    for (row, (yr, gr)) in dx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(y.data().chunks(c).zip(dy.data().chunks(c)))
                    {
                        let total: f64 = gr.iter().sum();
                        for (d, yv) in row.iter_mut().zip(yr) {
                            *d -= yv.exp() * total;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::NllLossMean(x, targets) => {
                    let shape = self.nodes[x.0].shape.clone();
                    let c = shape[1];
                    let scale = -dy.item() / targets.len() as f64;
                    let mut dx = Tensor::zeros(&shape);
                    for (r, &t) in targets.iter().enumerate() {
                        dx.data_mut()[r * c + t] = scale;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    let dx = dy.into_reshape(&self.nodes[x.0].shape)?;
                    acc(&mut grads, *x, dx);
                }
                Op::Permute(x, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    acc(&mut grads, *x, permute(&dy, &inv));
                }
                Op::Im2Col(x, geom) => {
                    let shape = &self.nodes[x.0].shape;
                    let mut dx = vec![0.0; shape.iter().product()];
                    kernels::col2im(dy.data(), geom, &mut dx, Exec::auto(dy.len()));
                    acc(&mut grads, *x, Tensor::new(shape.clone(), dx)?);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, dy.scale(*c)),
                Op::Sum(x) => {
                    let g = dy.item();
                    acc(&mut grads, *x, Tensor::full(&self.nodes[x.0].shape, g));
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(val(b), |g, v| g * v);
                    let db = dy.zip_map(val(a), |g, v| g * v);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
            }
        }
        Ok(out)
    }

    /// Backward pass whose gradients are accumulated straight into `params`.
    pub fn backward_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        self.backward()?.accumulate_into(params)
    }

    fn set_param_leaves(&mut self, id: ParamId, value: &Tensor) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Param(pid) if pid == id) {
                node.leaf = Some(value.clone());
            }
        }
    }

    fn param_leaf(&self, id: ParamId) -> Option<&Tensor> {
        self.nodes.iter().find_map(|n| match n.op {
            Op::Param(pid) if pid == id => n.leaf.as_ref(),
            _ => None,
        })
    }
}

/// Compares the backward gradient of `param` against central differences with
/// step `h`, re-running the forward pass on the inputs bound last. Returns
/// `max_i |g_i − fd_i| / max(1, |fd_i|)`.
pub fn grad_check(graph: &mut Graph, param: ParamId, h: f64) -> Result<f64> {
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [1e-8, 1e-4]")));
    }
    let analytic = graph
        .backward()?
        .get(param)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("parameter is not part of the graph".into()))?;
    let base = graph
        .param_leaf(param)
        .cloned()
        .expect("parameter has a leaf when it has a gradient");

    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for i in 0..base.len() {
        let orig = base.data()[i];
        let (up, down) = (orig + h, orig - h);
        probe.data_mut()[i] = up;
        graph.set_param_leaves(param, &probe);
        let plus = graph.evaluate()?.item();
        probe.data_mut()[i] = down;
        graph.set_param_leaves(param, &probe);
        let minus = graph.evaluate()?.item();
        probe.data_mut()[i] = orig;
        // Divide by the step actually taken after rounding.
        let fd = (plus - minus) / (up - down);
        worst = worst.max((analytic.data()[i] - fd).abs() / fd.abs().max(1.0));
    }
    graph.set_param_leaves(param, &base);
    graph.evaluate()?;
    Ok(worst)
}

fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let mut out = x.clone();
    let n = b.len();
    for row in out.data_mut().chunks_mut(n) {
        row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let rank = s.len();
    let mut in_strides = vec![1; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * s[a + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&a| s[a]).collect();
    let strides: Vec<usize> = perm.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0; rank];
    let mut offset = 0;
    for _ in 0..x.len() {
        out.push(x.data()[offset]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            offset += strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            offset -= strides[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_forward_with_identity_input() {
        let w = Parameter::euclidean("w", Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let mut g = Graph::new();
        let x = g.input("x", &[2, 2]).unwrap();
        let wn = g.param(&w);
        g.matmul(x, wn).unwrap();
        let y = g.forward(&[("x", &Tensor::eye(2))]).unwrap();
        assert_eq!(&y, w.value());
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        g.relu(x);
        let y = g.forward(&[("x", &Tensor::vector(&[-1.0, 2.0]))]).unwrap();
        assert_eq!(y, Tensor::vector(&[0.0, 2.0]));
    }

    #[test]
    fn uniform_two_class_loss_is_ln2() {
        let mut g = Graph::new();
        let x = g.input("logits", &[1, 2]).unwrap();
        let lp = g.log_softmax_rows(x).unwrap();
        g.nll_loss_mean(lp, &[0]).unwrap();
        let loss = g.forward(&[("logits", &Tensor::zeros(&[1, 2]))]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-16);
    }

    #[test]
    fn log_softmax_is_stable_for_huge_logits() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 3]).unwrap();
        g.log_softmax_rows(x).unwrap();
        let y = g
            .forward(&[("x", &Tensor::from_rows(&[[1000.0, 1000.0, -1000.0]]))])
            .unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert!((y.data()[0] + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn forward_errors() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 3]).unwrap();
        g.relu(x);
        assert!(matches!(g.forward(&[]), Err(Error::UnboundInput(n)) if n == "x"));
        assert!(matches!(
            g.forward(&[("x", &Tensor::zeros(&[3, 2]))]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn malformed_graphs_rejected_at_build_time() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[2, 3]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("node 2 (matmul)"), "{err}");
        assert!(g.add_bias(a, b).is_err());
        assert!(g.reshape(a, &[4]).is_err());
        assert!(g.permute(a, &[0, 0]).is_err());
        assert!(g.nll_loss_mean(a, &[0, 3]).is_err());
        assert!(g.nll_loss_mean(a, &[0]).is_err());
        assert!(matches!(
            g.im2col(a, (3, 3), 1, 0),
            Err(Error::ShapeMismatch { .. })
        ));
        let img = g.input("img", &[1, 1, 4, 4]).unwrap();
        assert!(matches!(g.im2col(img, (3, 3), 2, 0), Err(Error::InvalidGeometry(_))));
        // Nothing was added by the failed calls.
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn backward_of_sum_and_relu() {
        let w = Parameter::euclidean("w", Tensor::vector(&[0.5, -3.0, 7.0]));
        let mut g = Graph::new();
        let n = g.param(&w);
        g.sum(n);
        g.forward(&[]).unwrap();
        assert_eq!(g.backward().unwrap().get(w.id()).unwrap(), &Tensor::full(&[3], 1.0));

        let w = Parameter::euclidean("w", Tensor::vector(&[-1.0, 2.0, 0.0]));
        let mut g = Graph::new();
        let n = g.param(&w);
        let r = g.relu(n);
        g.sum(r);
        g.forward(&[]).unwrap();
        assert_eq!(
            g.backward().unwrap().get(w.id()).unwrap(),
            &Tensor::vector(&[0.0, 1.0, 0.0])
        );
    }

    #[test]
    fn backward_errors() {
        let w = Parameter::euclidean("w", Tensor::vector(&[1.0, 2.0]));
        let mut g = Graph::new();
        let n = g.param(&w);
        let s = g.sum(n);
        assert!(matches!(g.backward(), Err(Error::BackwardBeforeForward)));
        g.scale(n, 2.0);
        g.forward(&[]).unwrap();
        assert!(matches!(g.backward(), Err(Error::NonScalarOutput(_))));
        let _ = s;
    }

    #[test]
    fn quadratic_gradient() {
        let w = Parameter::euclidean("w", Tensor::vector(&[1.0, 2.0]));
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        let sq = g.mul(a, b).unwrap();
        g.sum(sq);
        g.forward(&[]).unwrap();
        assert_eq!(g.backward().unwrap().get(w.id()).unwrap(), &Tensor::vector(&[2.0, 4.0]));
        assert!(grad_check(&mut g, w.id(), 1e-6).unwrap() < 1e-8);
    }

    #[test]
    fn linear_grad_check_is_exact() {
        let w = Parameter::euclidean("w", Tensor::vector(&[0.5, -0.25, 0.125]));
        let mut g = Graph::new();
        let n = g.param(&w);
        g.sum(n);
        g.forward(&[]).unwrap();
        assert!(grad_check(&mut g, w.id(), 1e-6).unwrap() <= 1e-10);
        assert!(grad_check(&mut g, w.id(), 1e-2).is_err());
    }

    #[test]
    fn accumulation_and_zero_grad() {
        let mut w = Parameter::euclidean("w", Tensor::randn(&[3, 2], &mut rng(1)));
        let x = Tensor::randn(&[4, 3], &mut rng(2));
        let mut g = Graph::new();
        let xi = g.input("x", &[4, 3]).unwrap();
        let wn = g.param(&w);
        let y = g.matmul(xi, wn).unwrap();
        let sq = g.mul(y, y).unwrap();
        g.sum(sq);
        g.forward(&[("x", &x)]).unwrap();
        g.backward_into([&mut w]).unwrap();
        let once = w.egrad().unwrap().clone();
        g.backward_into([&mut w]).unwrap();
        assert_eq!(w.egrad().unwrap(), &once.scale(2.0));

        zero_grad([&mut w]);
        assert!(w.egrad().is_none() && w.rgrad().is_none());
        zero_grad([&mut w]);
        let mut fresh = Parameter::euclidean("f", Tensor::scalar(1.0));
        zero_grad([&mut fresh]);
        assert!(fresh.egrad().is_none());
    }

    #[test]
    fn constants_and_inputs_receive_no_gradient() {
        let w = Parameter::euclidean("w", Tensor::vector(&[1.0, 2.0]));
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(&[3.0, 4.0]));
        let wn = g.param(&w);
        let m = g.mul(c, wn).unwrap();
        g.sum(m);
        g.forward(&[]).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get(w.id()).unwrap(), &Tensor::vector(&[3.0, 4.0]));
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] = x[i, j, k]
        let (i, j, k) = (1, 2, 1);
        assert_eq!(p.data()[(k * 2 + i) * 3 + j], x.data()[(i * 3 + j) * 4 + k]);
        assert_eq!(permute(&p, &[1, 2, 0]), x);
        let m = Tensor::randn(&[3, 5], &mut rng(0));
        assert_eq!(permute(&m, &[1, 0]), m.t());
    }

    #[test]
    fn forward_is_deterministic() {
        let w = Parameter::euclidean("w", Tensor::randn(&[8, 5], &mut rng(3)));
        let x = Tensor::randn(&[6, 8], &mut rng(4));
        let build = || {
            let mut g = Graph::new();
            let xi = g.input("x", &[6, 8]).unwrap();
            let wn = g.param(&w);
            let y = g.matmul(xi, wn).unwrap();
            g.log_softmax_rows(y).unwrap();
            g
        };
        let a = build().forward(&[("x", &x)]).unwrap();
        let b = build().forward(&[("x", &x)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_rejects_off_manifold_value() {
        let st = ManifoldDescriptor::stiefel(2, 2).unwrap();
        assert!(Parameter::new("w", Tensor::eye(2), st.clone()).is_ok());
        assert!(matches!(
            Parameter::new("w", Tensor::from_rows(&[[1.0, 1.0], [1.0, 1.0]]), st),
            Err(Error::InvalidInitialValue(_))
        ));
    }
}
