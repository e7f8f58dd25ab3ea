//! Layers whose weights can be constrained to a manifold.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Parameter, ParameterSet};
use crate::error::{Error, Result};
use crate::manifold::ManifoldDescriptor;
use crate::tensor::Tensor;

/// Which manifold a layer's weight should live on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ManifoldRequest {
    #[default]
    None,
    Stiefel,
    PositiveDefinite,
}

/// Maps a `rows × cols` weight shape to a descriptor that satisfies the
/// manifold's existence conditions. Stiefel weights with fewer rows than
/// columns are stored transposed so that `n ≥ p` always holds.
///
/// `Stiefel` on a `1 × 1` weight is accepted but degenerate: the only points
/// are `±1`.
pub fn manifold_for_shape(request: ManifoldRequest, rows: usize, cols: usize) -> Result<ManifoldDescriptor> {
    if rows == 0 || cols == 0 {
        return Err(Error::DegenerateShape(vec![rows, cols]));
    }
    match request {
        ManifoldRequest::None => ManifoldDescriptor::euclidean(&[rows, cols]),
        ManifoldRequest::Stiefel if rows >= cols => ManifoldDescriptor::stiefel(rows, cols),
        ManifoldRequest::Stiefel => ManifoldDescriptor::stiefel_transposed(cols, rows),
        ManifoldRequest::PositiveDefinite if rows == cols => ManifoldDescriptor::positive_definite(rows),
        ManifoldRequest::PositiveDefinite => Err(Error::IncompatibleShape { rows, cols }),
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Fresh weight of `shape` whose matricization is `rows × cols`.
fn init_parameter(
    name: &str,
    descriptor: ManifoldDescriptor,
    shape: &[usize],
    fan_in: usize,
    seed: u64,
) -> Result<Parameter> {
    if descriptor.is_euclidean() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = fan_in_bound(fan_in);
        let value = Tensor::uniform(shape, -b, b, &mut rng);
        Ok(Parameter::euclidean(name, value))
    } else {
        Parameter::random(name, descriptor, shape, seed)
    }
}

fn init_bias(out: usize, fan_in: usize, seed: u64) -> Parameter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let b = fan_in_bound(fan_in);
    Parameter::euclidean("bias", Tensor::uniform(&[out], -b, b, &mut rng))
}

/// `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    in_features: usize,
    out_features: usize,
    request: ManifoldRequest,
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    pub fn new(
        in_features: usize,
        out_features: usize,
        bias: bool,
        request: ManifoldRequest,
        seed: u64,
    ) -> Result<Self> {
        let descriptor = manifold_for_shape(request, out_features, in_features)?;
        let weight = init_parameter(
            "weight",
            descriptor,
            &[out_features, in_features],
            in_features,
            seed,
        )?;
        Ok(Self {
            in_features,
            out_features,
            request,
            weight,
            bias: bias.then(|| init_bias(out_features, in_features, seed)),
        })
    }

    /// Builds the layer from user-supplied values; a constrained weight must
    /// already lie on its manifold.
    pub fn with_values(weight: Tensor, bias: Option<Tensor>, request: ManifoldRequest) -> Result<Self> {
        if !weight.is_matrix() {
            return Err(Error::shape("Linear", format!("weight must be a matrix, got {:?}", weight.shape())));
        }
        let (out_features, in_features) = (weight.rows(), weight.cols());
        let descriptor = manifold_for_shape(request, out_features, in_features)?;
        let weight = Parameter::new("weight", weight, descriptor)?;
        let bias = match bias {
            Some(b) if b.shape() != [out_features] => {
                return Err(Error::shape("Linear bias", format!("expected [{out_features}], got {:?}", b.shape())))
            }
            Some(b) => Some(Parameter::euclidean("bias", b)),
            None => None,
        };
        Ok(Self {
            in_features,
            out_features,
            request,
            weight,
            bias,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn request(&self) -> ManifoldRequest {
        self.request
    }

    /// Re-draws the weight: a random manifold point when constrained,
    /// `U(−1/√in, 1/√in)` otherwise. Keeps the parameter identity.
    pub fn init_weight(&mut self, seed: u64) -> Result<()> {
        let fresh = init_parameter(
            self.weight.name(),
            self.weight.manifold().clone(),
            self.weight.value().shape(),
            self.in_features,
            seed,
        )?;
        self.weight.value = fresh.value;
        self.weight.zero_grad();
        Ok(())
    }

    /// Replaces the weight with a user value, which must lie on the layer's manifold.
    pub fn set_weight(&mut self, value: Tensor) -> Result<()> {
        self.weight.set_value(value)
    }

    pub fn lower(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight);
        let wt = g.transpose(w)?;
        let y = g.matmul(x, wt)?;
        match &self.bias {
            Some(b) => {
                let bn = g.param(b);
                g.add_bias(y, bn)
            }
            None => Ok(y),
        }
    }

    /// Eager forward pass on a `batch × in` matrix.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.input("x", x.shape())?;
        self.lower(&mut g, xi)?;
        g.forward(&[("x", x)])
    }
}

/// 2-D cross-correlation lowered to `im2col` + matmul. The weight is stored
/// `[out_ch, in_ch, kh, kw]`; its `out_ch × (in_ch·kh·kw)` matricization is
/// what a manifold constraint applies to.
#[derive(Debug, Clone)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
    request: ManifoldRequest,
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(spec: Conv2dSpec, request: ManifoldRequest, seed: u64) -> Result<Self> {
        let Conv2dSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } = spec;
        if stride == 0 {
            return Err(Error::InvalidGeometry("stride must be positive".into()));
        }
        let patch = in_channels * kernel.0 * kernel.1;
        let descriptor = manifold_for_shape(request, out_channels, patch)?;
        let weight = init_parameter(
            "weight",
            descriptor,
            &[out_channels, in_channels, kernel.0, kernel.1],
            patch,
            seed,
        )?;
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            request,
            weight,
            bias: bias.then(|| init_bias(out_channels, patch, seed)),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn request(&self) -> ManifoldRequest {
        self.request
    }

    /// The `out_ch × (in_ch·kh·kw)` weight matrix.
    pub fn weight_matrix(&self) -> Tensor {
        self.weight
            .value()
            .as_matrix(self.out_channels, self.in_channels * self.kernel.0 * self.kernel.1)
            .expect("weight shape is fixed at construction")
    }

    /// Replaces the weight; accepts either the 4-D tensor or its matricization.
    pub fn set_weight(&mut self, value: Tensor) -> Result<()> {
        let value = value.into_reshape(self.weight.value().shape())?;
        self.weight.set_value(value)
    }

    pub fn lower(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(
                "Conv2d",
                format!("expected [batch, {}, h, w], got {s:?}", self.in_channels),
            ));
        }
        let cols = g.im2col(x, self.kernel, self.stride, self.padding)?;
        let patch = self.in_channels * self.kernel.0 * self.kernel.1;
        let w = g.param(&self.weight);
        let wm = g.reshape(w, &[self.out_channels, patch])?;
        let wt = g.transpose(wm)?;
        let mut y = g.matmul(cols, wt)?;
        if let Some(b) = &self.bias {
            let bn = g.param(b);
            y = g.add_bias(y, bn)?;
        }
        let rows = g.shape(y)[0];
        let (batch, spatial) = (s[0], rows / s[0]);
        let ow = (s[3] + 2 * self.padding - self.kernel.1) / self.stride + 1;
        let oh = spatial / ow;
        let y = g.reshape(y, &[batch, oh, ow, self.out_channels])?;
        g.permute(y, &[0, 3, 1, 2])
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.input("x", x.shape())?;
        self.lower(&mut g, xi)?;
        g.forward(&[("x", x)])
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    Relu,
    /// Row-wise log-softmax over a `batch × classes` matrix.
    LogSoftmax,
    /// Collapses all but the batch axis.
    Flatten,
}

impl Layer {
    fn params(&self) -> Vec<&Parameter> {
        match self {
            Layer::Linear(l) => std::iter::once(&l.weight).chain(&l.bias).collect(),
            Layer::Conv2d(c) => std::iter::once(&c.weight).chain(&c.bias).collect(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Layer::Linear(l) => std::iter::once(&mut l.weight).chain(&mut l.bias).collect(),
            Layer::Conv2d(c) => std::iter::once(&mut c.weight).chain(&mut c.bias).collect(),
            _ => Vec::new(),
        }
    }

    fn lower(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Layer::Linear(l) => l.lower(g, x),
            Layer::Conv2d(c) => c.lower(g, x),
            Layer::Relu => Ok(g.relu(x)),
            Layer::LogSoftmax => g.log_softmax_rows(x),
            Layer::Flatten => {
                let s = g.shape(x).to_vec();
                let rest: usize = s[1..].iter().product();
                g.reshape(x, &[s[0], rest.max(1)])
            }
        }
    }
}

/// An ordered stack of layers.
#[derive(Debug, Clone)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    /// Names parameters `<index>.weight` / `<index>.bias` and rejects a
    /// parameter that appears twice (e.g. a cloned layer pushed twice).
    pub fn new(mut layers: Vec<Layer>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter_mut().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    if let Some(w) = width.filter(|&w| w != l.in_features()) {
                        return Err(Error::shape(
                            format!("layer {i} (Linear)"),
                            format!("expects {} inputs, previous layer yields {w}", l.in_features()),
                        ));
                    }
                    width = Some(l.out_features());
                }
                Layer::Conv2d(_) | Layer::Flatten => width = None,
                Layer::Relu | Layer::LogSoftmax => {}
            }
            for p in layer.params_mut() {
                let suffix = p.name().rsplit('.').next().unwrap_or("param").to_string();
                p.set_name(format!("{i}.{suffix}"));
                if !seen.insert(p.id()) {
                    return Err(Error::DuplicateParameter(p.name().to_string()));
                }
            }
        }
        Ok(Self { layers })
    }

    /// `in → hidden… → out` Linear stack with ReLU between layers and
    /// LogSoftmax at the output. `requests` gives one manifold request per
    /// Linear layer (a single entry applies to all).
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        output: usize,
        requests: &[ManifoldRequest],
        seed: u64,
    ) -> Result<Self> {
        let sizes: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output))
            .collect();
        let n_linear = sizes.len() - 1;
        if requests.len() != 1 && requests.len() != n_linear {
            return Err(Error::InvalidArgument(format!(
                "{} manifold requests for {n_linear} linear layers",
                requests.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(2 * n_linear);
        for i in 0..n_linear {
            let request = requests[if requests.len() == 1 { 0 } else { i }];
            layers.push(Layer::Linear(Linear::new(
                sizes[i],
                sizes[i + 1],
                true,
                request,
                rng.random(),
            )?));
            layers.push(if i + 1 < n_linear {
                Layer::Relu
            } else {
                Layer::LogSoftmax
            });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn lower(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.layers.iter().try_fold(x, |node, layer| layer.lower(g, node))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xi = g.input("x", x.shape())?;
        self.lower(&mut g, xi)?;
        g.forward(&[("x", x)])
    }

    /// Largest membership residual over constrained parameters (0 if none).
    pub fn constraint_residual(&self) -> f64 {
        self.parameters()
            .into_iter()
            .filter(|p| !p.manifold().is_euclidean())
            .map(Parameter::constraint_residual)
            .fold(0.0, f64::max)
    }
}

impl ParameterSet for Sequential {
    fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::manifold::{ManifoldKind, MEMBERSHIP_TOL};

    #[test]
    fn factory_orientation() {
        let d = manifold_for_shape(ManifoldRequest::Stiefel, 128, 64).unwrap();
        assert_eq!(d.kind(), &ManifoldKind::Stiefel { n: 128, p: 64 });
        assert!(!d.is_transposed());
        let d = manifold_for_shape(ManifoldRequest::Stiefel, 10, 30).unwrap();
        assert_eq!(d.kind(), &ManifoldKind::Stiefel { n: 30, p: 10 });
        assert!(d.is_transposed());
        assert!(matches!(
            manifold_for_shape(ManifoldRequest::PositiveDefinite, 5, 7),
            Err(Error::IncompatibleShape { rows: 5, cols: 7 })
        ));
        assert!(matches!(
            manifold_for_shape(ManifoldRequest::None, 0, 3),
            Err(Error::DegenerateShape(_))
        ));
        assert!(manifold_for_shape(ManifoldRequest::Stiefel, 1, 1).is_ok());
        assert!(manifold_for_shape(ManifoldRequest::None, 3, 4).unwrap().is_euclidean());
    }

    #[test]
    fn factory_never_violates_n_ge_p() {
        for rows in 1..12 {
            for cols in 1..12 {
                let d = manifold_for_shape(ManifoldRequest::Stiefel, rows, cols).unwrap();
                let ManifoldKind::Stiefel { n, p } = *d.kind() else { unreachable!() };
                assert!(n >= p);
                assert_eq!(d.storage_shape(), vec![rows, cols]);
            }
        }
    }

    #[test]
    fn linear_examples() {
        let l = Linear::with_values(Tensor::eye(2), Some(Tensor::zeros(&[2])), ManifoldRequest::Stiefel).unwrap();
        let y = l.apply(&Tensor::from_rows(&[[3.0, 4.0]])).unwrap();
        assert_eq!(y, Tensor::from_rows(&[[3.0, 4.0]]));

        let l = Linear::with_values(
            Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]),
            Some(Tensor::vector(&[1.0, 1.0])),
            ManifoldRequest::Stiefel,
        )
        .unwrap();
        let y = l.apply(&Tensor::from_rows(&[[3.0, 4.0]])).unwrap();
        assert_eq!(y, Tensor::from_rows(&[[5.0, 4.0]]));

        let x = Tensor::from_rows(&[[1.0, 2.0], [-3.0, 0.5]]);
        let swapped = Tensor::from_rows(&[[-3.0, 0.5], [1.0, 2.0]]);
        let (a, b) = (l.apply(&x).unwrap(), l.apply(&swapped).unwrap());
        assert_eq!(a.data()[..2], b.data()[2..]);
        assert_eq!(a.data()[2..], b.data()[..2]);

        assert!(matches!(l.apply(&Tensor::zeros(&[1, 3])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn stiefel_init_uses_transposed_storage() {
        let l = Linear::new(64, 32, true, ManifoldRequest::Stiefel, 3).unwrap();
        let w = l.weight.value();
        assert_eq!(w.shape(), &[32, 64]);
        assert!(w.matmul(&w.t()).unwrap().sub(&Tensor::eye(32)).norm() <= 1e-8);
        assert!(l.weight.manifold().is_transposed());
    }

    #[test]
    fn user_initial_values() {
        assert!(Linear::with_values(Tensor::eye(3), None, ManifoldRequest::Stiefel).is_ok());
        let rank1 = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0]]);
        assert!(matches!(
            Linear::with_values(rank1.clone(), None, ManifoldRequest::Stiefel),
            Err(Error::InvalidInitialValue(_))
        ));
        let mut l = Linear::new(2, 2, false, ManifoldRequest::Stiefel, 0).unwrap();
        assert!(l.set_weight(rank1).is_err());
        assert!(l.set_weight(Tensor::eye(2)).is_ok());
    }

    #[test]
    fn euclidean_init_is_bounded() {
        let l = Linear::new(16, 4, true, ManifoldRequest::None, 5).unwrap();
        assert!(l.weight.value().max_abs() <= 0.25);
        assert!(l.bias.as_ref().unwrap().value().max_abs() <= 0.25);
        let mut l2 = l.clone();
        l2.init_weight(6).unwrap();
        assert_eq!(l2.weight.id(), l.weight.id());
        assert_ne!(l2.weight.value(), l.weight.value());
    }

    #[test]
    fn collect_parameters_order_and_uniqueness() {
        let l = Linear::new(3, 2, true, ManifoldRequest::None, 0).unwrap();
        let model = Sequential::new(vec![Layer::Linear(l.clone())]).unwrap();
        let names: Vec<&str> = model.parameters().iter().map(|p| p.name()).collect();
        assert_eq!(names, ["0.weight", "0.bias"]);

        let mlp = Sequential::mlp(8, &[6, 4], 3, &[ManifoldRequest::Stiefel], 1).unwrap();
        assert_eq!(mlp.parameters().len(), 6);

        let err = Sequential::new(vec![
            Layer::Linear(Linear::new(2, 2, true, ManifoldRequest::None, 0).unwrap()),
            Layer::Linear(l.clone()),
            Layer::Relu,
            Layer::Linear(l),
        ]);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. }) | Err(Error::DuplicateParameter(_))));
        let l = Linear::new(2, 2, true, ManifoldRequest::None, 0).unwrap();
        assert!(matches!(
            Sequential::new(vec![Layer::Linear(l.clone()), Layer::Linear(l)]),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn mlp_rejects_incompatible_widths() {
        let a = Linear::new(4, 3, true, ManifoldRequest::None, 0).unwrap();
        let b = Linear::new(5, 2, true, ManifoldRequest::None, 1).unwrap();
        assert!(matches!(
            Sequential::new(vec![Layer::Linear(a), Layer::Relu, Layer::Linear(b)]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_identity_kernel() {
        let spec = Conv2dSpec {
            in_channels: 3,
            out_channels: 3,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            bias: false,
        };
        let mut conv = Conv2d::new(spec, ManifoldRequest::Stiefel, 0).unwrap();
        conv.set_weight(Tensor::eye(3)).unwrap();
        let x = Tensor::randn(&[2, 3, 4, 5], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(conv.apply(&x).unwrap(), x);
    }

    #[test]
    fn conv_all_ones_kernel_sums() {
        let spec = Conv2dSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (2, 2),
            stride: 1,
            padding: 0,
            bias: false,
        };
        let mut conv = Conv2d::new(spec, ManifoldRequest::None, 0).unwrap();
        conv.set_weight(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.5]).unwrap();
        let y = conv.apply(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 10.5);
    }

    #[test]
    fn conv_geometry_errors() {
        let spec = Conv2dSpec {
            in_channels: 1,
            out_channels: 2,
            kernel: (3, 3),
            stride: 2,
            padding: 0,
            bias: true,
        };
        let conv = Conv2d::new(spec, ManifoldRequest::None, 0).unwrap();
        assert!(matches!(
            conv.apply(&Tensor::zeros(&[1, 1, 4, 4])),
            Err(Error::InvalidGeometry(_))
        ));
        assert!(matches!(
            conv.apply(&Tensor::zeros(&[1, 2, 5, 5])),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(conv.apply(&Tensor::zeros(&[1, 1, 5, 5])).is_ok());
    }

    #[test]
    fn stiefel_conv_weight_is_orthonormal() {
        let spec = Conv2dSpec {
            in_channels: 2,
            out_channels: 4,
            kernel: (3, 3),
            stride: 1,
            padding: 1,
            bias: true,
        };
        let conv = Conv2d::new(spec, ManifoldRequest::Stiefel, 9).unwrap();
        let m = conv.weight_matrix();
        assert!(m.matmul(&m.t()).unwrap().sub(&Tensor::eye(4)).norm() <= MEMBERSHIP_TOL);
    }

    #[test]
    fn linear_gradients_pass_grad_check() {
        let l = Linear::new(5, 3, true, ManifoldRequest::Stiefel, 2).unwrap();
        let x = Tensor::randn(&[4, 5], &mut ChaCha8Rng::seed_from_u64(8));
        let mut g = Graph::new();
        let xi = g.input("x", &[4, 5]).unwrap();
        let y = l.lower(&mut g, xi).unwrap();
        let lp = g.log_softmax_rows(y).unwrap();
        g.nll_loss_mean(lp, &[0, 2, 1, 2]).unwrap();
        g.forward(&[("x", &x)]).unwrap();
        assert!(grad_check(&mut g, l.weight.id(), 1e-6).unwrap() <= 1e-5);
        assert!(grad_check(&mut g, l.bias.as_ref().unwrap().id(), 1e-6).unwrap() <= 1e-5);
    }
}
