use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use riemopt::autodiff::{Graph, Parameter};
use riemopt::manifold::ManifoldDescriptor;
use riemopt::optim::{AdagradConfig, Method, Optimizer, SgdConfig};
use riemopt::suites::{geodesic_midpoint, naive_conv, Geometry};
use riemopt::nn::{Conv2d, ManifoldRequest};
use riemopt::Tensor;

/// `‖D X − Y‖²` with its gradient written into `x`. `Y` is built from a
/// point of the same manifold so the minimum is attained on it.
fn least_squares(x: &mut Parameter, d: &Tensor, y: &Tensor) -> f64 {
    x.zero_grad();
    let mut g = Graph::new();
    let dn = g.constant(d.clone());
    let xn = g.param(x);
    let yn = g.constant(y.scale(-1.0));
    let dx = g.matmul(dn, xn).unwrap();
    let r = g.add(dx, yn).unwrap();
    let sq = g.mul(r, r).unwrap();
    g.sum(sq);
    let f = g.forward(&[]).unwrap().item();
    g.backward_into(std::iter::once(x)).unwrap();
    f
}

fn drive(m: ManifoldDescriptor, method: Method, steps: usize, seed: u64) -> (f64, f64, f64) {
    let shape = m.storage_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Tensor::randn(&[7, shape[0]], &mut rng).scale(0.3);
    let y = d.matmul(&m.rand(seed + 100)).unwrap();
    let mut x = Parameter::random("x", m.clone(), &shape, seed).unwrap();
    let mut opt = Optimizer::new(method);
    let first = least_squares(&mut x, &d, &y);
    let mut worst: f64 = 0.0;
    let mut last = first;
    for _ in 0..steps {
        opt.step_all(&mut x, None).unwrap();
        worst = worst.max(x.constraint_residual());
        last = least_squares(&mut x, &d, &y);
    }
    (worst, first, last)
}

#[test]
fn long_momentum_runs_stay_on_the_manifold() {
    // The SPD step scales like X G X and identity transport does not shrink
    // stale momentum near the boundary, so it needs a much smaller rate.
    for seed in 0..3 {
        for (m, lr) in [
            (ManifoldDescriptor::stiefel(6, 3).unwrap(), 1e-2),
            (ManifoldDescriptor::stiefel_transposed(5, 2).unwrap(), 1e-2),
            (ManifoldDescriptor::positive_definite(4).unwrap(), 1e-5),
        ] {
            let sgd = Method::Sgd(SgdConfig::new(lr, 0.9).unwrap());
            let (residual, first, last) = drive(m.clone(), sgd, 500, seed);
            assert!(residual <= 1e-8, "{m}: residual {residual}");
            assert!(last < first, "{m}: {first} -> {last}");
        }
    }
}

#[test]
fn spd_momentum_overshoot_is_reported_not_hidden() {
    let sgd = Method::Sgd(SgdConfig::new(1e-4, 0.9).unwrap());
    let m = ManifoldDescriptor::positive_definite(4).unwrap();
    let shape = m.storage_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = Tensor::randn(&[7, 4], &mut rng).scale(0.3);
    let y = d.matmul(&m.rand(101)).unwrap();
    let mut x = Parameter::random("x", m.clone(), &shape, 1).unwrap();
    let mut opt = Optimizer::new(sgd);
    for _ in 0..2000 {
        least_squares(&mut x, &d, &y);
        match opt.step_all(&mut x, None) {
            Ok(_) => assert!(m.is_point(x.value(), 1e-8)),
            Err(e) => {
                assert!(matches!(e.root(), riemopt::Error::NotPositiveDefinite), "{e:?}");
                // The failed step leaves the last feasible point in place.
                assert!(m.is_point(x.value(), 1e-8));
                return;
            }
        }
    }
}

#[test]
fn adagrad_stays_on_the_manifold() {
    let ada = Method::Adagrad(AdagradConfig::new(5e-2, 1e-10).unwrap());
    for m in [
        ManifoldDescriptor::stiefel(6, 3).unwrap(),
        ManifoldDescriptor::positive_definite(3).unwrap(),
    ] {
        let (residual, first, last) = drive(m.clone(), ada, 300, 4);
        assert!(residual <= 1e-8, "{m}: residual {residual}");
        assert!(last < first, "{m}: {first} -> {last}");
    }
}

#[test]
fn inner_product_is_symmetric_and_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in [
        ManifoldDescriptor::stiefel(5, 2).unwrap(),
        ManifoldDescriptor::positive_definite(3).unwrap(),
        ManifoldDescriptor::euclidean(&[2, 3]).unwrap(),
    ] {
        let x = m.rand(9);
        let u = m.proj(&x, &Tensor::randn(x.shape(), &mut rng)).unwrap();
        let v = m.proj(&x, &Tensor::randn(x.shape(), &mut rng)).unwrap();
        let (uv, vu) = (m.inner(&x, &u, &v).unwrap(), m.inner(&x, &v, &u).unwrap());
        assert!((uv - vu).abs() <= 1e-12 * uv.abs().max(1.0));
        assert!(m.inner(&x, &u, &u).unwrap() > 0.0);
        // The Riemannian gradient represents the Euclidean one through the metric.
        let egrad = Tensor::randn(x.shape(), &mut rng);
        let rgrad = m.egrad2rgrad(&x, &egrad).unwrap();
        let lhs = m.inner(&x, &rgrad, &u).unwrap();
        assert!((lhs - egrad.dot(&u)).abs() <= 1e-10 * lhs.abs().max(1.0), "{m}");
    }
}

#[test]
fn spd_midpoint_is_equidistant_and_on_the_geodesic() {
    let m = ManifoldDescriptor::positive_definite(4).unwrap();
    let (a, b) = (m.rand(1), m.rand(2));
    let mid = geodesic_midpoint(&a, &b).unwrap();
    let d = m.dist(&a, &b).unwrap();
    assert!((m.dist(&a, &mid).unwrap() - d / 2.0).abs() < 1e-10);
    assert!((m.dist(&mid, &b).unwrap() - d / 2.0).abs() < 1e-10);
    assert!((geodesic_midpoint(&b, &a).unwrap().sub(&mid)).norm() < 1e-10);
}

#[test]
fn conv_matches_naive_loops_with_and_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..25 {
        let geom = Geometry::random(&mut rng);
        for bias in [false, true] {
            let conv = Conv2d::new(geom.spec(bias), ManifoldRequest::None, i).unwrap();
            let x = Tensor::randn(&[geom.batch, geom.in_channels, geom.height, geom.width], &mut rng);
            let fast = conv.apply(&x).unwrap();
            let slow = naive_conv(&x, conv.weight.value(), conv.bias.as_ref().map(|b| b.value()), geom.stride, geom.padding);
            assert_eq!(fast.shape(), slow.shape(), "{geom:?}");
            assert!(fast.sub(&slow).max_abs() <= 1e-12, "{geom:?}");
        }
    }
}
