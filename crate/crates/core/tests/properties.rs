//! Randomized invariants.

mod common;

use std::path::Path;
use std::sync::{Arc, OnceLock};

use bridgeflow::bridge::EndpointPair;
use bridgeflow::config::RunConfig;
use bridgeflow::distributions::{GaussianComponent, GaussianMixture};
use bridgeflow::linalg::{gramian, mat_exp, psd_sqrt, Matrix, PsdMatrix, Vector};
use bridgeflow::metrics::{mmd2, mmd2_unclamped, w2_exact, MmdConfig};
use bridgeflow::mixture_law::MixtureLawContext;
use bridgeflow::rollout::{rollout, FlowField, RolloutOptions};
use bridgeflow::samples::SampleSet;
use bridgeflow::systems::{build_kernel, builtin_system, BridgeKernel, LinearSystem};
use proptest::prelude::*;

use common::moments;

const SYSTEMS: [&str; 4] = ["double_integrator", "oscillator", "nyquist_johnson", "mass_spring(4)"];

fn kernels() -> &'static Vec<BridgeKernel> {
    static K: OnceLock<Vec<BridgeKernel>> = OnceLock::new();
    K.get_or_init(|| {
        SYSTEMS
            .iter()
            .map(|name| build_kernel(builtin_system(name).unwrap(), 11, 1e-3).unwrap())
            .collect()
    })
}

fn matrix(n: usize, bound: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-bound..bound, n * n).prop_map(move |v| Matrix::from_vec(n, n, v))
}

fn points(dim: usize, count: std::ops::Range<usize>) -> impl Strategy<Value = SampleSet> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, dim), count)
        .prop_map(|rows| SampleSet::from_rows(&rows).unwrap())
}

fn direction(n: usize) -> impl Strategy<Value = Vector> {
    prop::collection::vec(-1.0..1.0f64, n).prop_map(Vector::from_vec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exponential_semigroup(n in 1usize..6, raw in matrix(5, 1.0), size in 0.0..10.0f64, s in 0.0..1.0f64, t in 0.0..1.0f64) {
        let m = raw.view((0, 0), (n, n)).into_owned();
        let m = &m * (size / m.norm().max(1e-12));
        let whole = mat_exp(&m, s + t).unwrap();
        let split = mat_exp(&m, s).unwrap() * mat_exp(&m, t).unwrap();
        prop_assert!((&whole - split).norm() <= 1e-9 * whole.norm());
    }

    #[test]
    fn gramian_is_monotone(sys in 0usize..4, s in 0.0..1.0f64, gap in 0.0..1.0f64, x in direction(4)) {
        let k = &kernels()[sys];
        let (a, b) = (&k.system().a, &k.system().b);
        let t = (s + gap).min(1.0);
        let x = x.rows(0, k.n()).into_owned();
        let lo = gramian(a, b, s).unwrap().quad_form(&x);
        let hi = gramian(a, b, t).unwrap().quad_form(&x);
        prop_assert!(lo <= hi + 1e-10, "{lo} > {hi}");
    }

    #[test]
    fn psd_sqrt_is_symmetric(n in 1usize..6, raw in matrix(5, 2.0)) {
        let l = raw.view((0, 0), (n, n)).into_owned();
        let root = psd_sqrt(&PsdMatrix::new(&l * l.transpose()).unwrap()).unwrap();
        prop_assert!((&root - root.transpose()).norm() <= 1e-10 * root.norm().max(1.0));
    }

    #[test]
    fn bridge_covariance_is_psd_and_below_gramian(sys in 0usize..4, t in 0.0..1.0f64, x in direction(4)) {
        let k = &kernels()[sys];
        let node = k.node(t).unwrap();
        let (lo, hi) = node.sigma.eigen_extremes();
        prop_assert!(lo >= -1e-10 * hi.abs().max(1e-300));
        let x = x.rows(0, k.n()).into_owned();
        let scale = node.phi_t.eigen_extremes().1.max(1e-300);
        prop_assert!(node.sigma.quad_form(&x) <= node.phi_t.quad_form(&x) + 1e-10 * scale);
    }

    #[test]
    fn brownian_coefficients_are_linear_interpolation(t in 0.0..1.0f64) {
        static K: OnceLock<BridgeKernel> = OnceLock::new();
        let k = K.get_or_init(|| {
            let sys = LinearSystem::new("brownian", Matrix::zeros(3, 3), Matrix::identity(3, 3), 1.0).unwrap();
            build_kernel(sys, 11, 1e-3).unwrap()
        });
        let node = k.node(t).unwrap();
        let id = Matrix::identity(3, 3);
        prop_assert!((&node.r - &id * (1.0 - t)).norm() <= 1e-12);
        prop_assert!((&node.s - &id * t).norm() <= 1e-12);
        prop_assert!((node.sigma.as_matrix() - &id * (t * (1.0 - t))).norm() <= 1e-12);
    }

    #[test]
    fn mean_path_interpolates_endpoints(sys in 0usize..4, x in direction(4), y in direction(4)) {
        let k = &kernels()[sys];
        let n = k.n();
        let (x, y) = (x.rows(0, n) * 3.0, y.rows(0, n) * 3.0);
        let at = |t: f64| {
            let node = k.node(t).unwrap();
            &node.r * &x + &node.s * &y
        };
        prop_assert!((at(0.0) - &x).norm() <= 1e-10 * (1.0 + x.norm()));
        prop_assert!((at(1.0) - &y).norm() <= 1e-8 * (1.0 + y.norm()));
    }

    #[test]
    fn responsibilities_sum_to_one(
        t in 0.0..1.0f64,
        xi in direction(2),
        weights in prop::collection::vec(0.05..1.0f64, 1..5),
        means in prop::collection::vec(direction(2), 4),
    ) {
        let k = Arc::new(kernels()[0].clone());
        let total: f64 = weights.iter().sum();
        let comps = weights
            .iter()
            .zip(&means)
            .map(|(w, m)| GaussianComponent::new(w / total, m * 4.0, PsdMatrix::new(Matrix::identity(2, 2) * 0.3).unwrap()).unwrap())
            .collect();
        let p0 = GaussianMixture::gaussian(Vector::zeros(2), PsdMatrix::identity(2)).unwrap();
        let ctx = MixtureLawContext::new(k, &p0, GaussianMixture::new(comps).unwrap()).unwrap();
        let r = ctx.responsibilities(t, &(xi * 5.0)).unwrap();
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(r.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn mmd_is_symmetric_and_nonnegative(x in points(3, 1..30), y in points(3, 1..30), h in 0.1..5.0f64) {
        let cfg = MmdConfig { bandwidth: h };
        prop_assert_eq!(mmd2(&x, &y, &cfg).unwrap().to_bits(), mmd2(&y, &x, &cfg).unwrap().to_bits());
        prop_assert!(mmd2_unclamped(&x, &y, &cfg).unwrap() >= -1e-12);
        prop_assert!(mmd2(&x, &y, &cfg).unwrap() >= 0.0);
    }

    #[test]
    fn w2_triangle_inequality(x in points(2, 6..7), y in points(2, 6..7), z in points(2, 6..7)) {
        let xy = w2_exact(&x, &y).unwrap();
        let yz = w2_exact(&y, &z).unwrap();
        let xz = w2_exact(&x, &z).unwrap();
        prop_assert!(xz <= xy + yz + 1e-9);
    }

    #[test]
    fn w2_on_the_line_pairs_sorted_values(mut v in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..40)) {
        let x = SampleSet::new(1, v.iter().map(|p| p.0).collect()).unwrap();
        let y = SampleSet::new(1, v.iter().map(|p| p.1).collect()).unwrap();
        let mut a: Vec<f64> = v.iter().map(|p| p.0).collect();
        let mut b: Vec<f64> = v.drain(..).map(|p| p.1).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let want = (a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        prop_assert!((w2_exact(&x, &y).unwrap() - want).abs() <= 1e-10 * (1.0 + want));
    }

    #[test]
    fn config_survives_a_round_trip(
        seed in any::<u64>(),
        eps in 0.0..3.0f64,
        sys in 0usize..3,
        mean in prop::collection::vec(-10.0..10.0f64, 2),
        var in 0.01..4.0f64,
        paths in 1usize..5000,
        bandwidth in 0.1..10.0f64,
        closed in any::<bool>(),
    ) {
        let law = if closed { r#"{"kind":"closed_form"}"# } else { r#"{"kind":"learned","params_file":"p.json"}"# };
        let text = format!(
            r#"{{"seed":{seed},"system":{{"name":"{}","epsilon":{eps:?}}},
               "p0":{{"kind":"gaussian","mean":[0,0],"cov":[[1,0],[0,1]]}},
               "p1":{{"kind":"gaussian","mean":[{:?},{:?}],"cov":[[{var:?},0],[0,{var:?}]]}},
               "law":{law},"rollout":{{"paths":{paths}}},"eval":{{"mmd":{{"bandwidth":{bandwidth:?}}}}}}}"#,
            SYSTEMS[sys], mean[0], mean[1],
        );
        let first = RunConfig::from_json(&text, "generated").unwrap();
        let second = RunConfig::from_json(&first.to_json(), "round trip").unwrap();
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(first.hash(), second.hash());
        prop_assert!(first.coupling(Path::new("."), 2).is_ok());
    }
}

#[test]
fn euler_terminal_error_halves_with_the_step() {
    let sys = builtin_system("double_integrator").unwrap().with_epsilon(0.0).unwrap();
    let k = build_kernel(sys, 1001, 1e-3).unwrap();
    let pair = EndpointPair::new(Vector::from_column_slice(&[1.0, -0.5]), Vector::from_column_slice(&[-2.0, 1.0])).unwrap();
    let init = SampleSet::from_vectors(std::slice::from_ref(&pair.x)).unwrap();
    let law = FlowField::PointBridge(SampleSet::from_vectors(std::slice::from_ref(&pair.y)).unwrap());
    let end = |dt: f64| {
        let opts = RolloutOptions {
            dt,
            seed: 1,
            record_stride: (1.0 / dt).round() as usize,
            ..RolloutOptions::default()
        };
        moments(&rollout(&k, &law, &init, &opts).unwrap().terminal()).0
    };
    let (coarse, mid, fine) = (end(4e-3), end(2e-3), end(1e-3));
    let ratio = (&coarse - &mid).norm() / (&mid - &fine).norm();
    assert!((1.5..=2.5).contains(&ratio), "refinement ratio {ratio}");
}
