//! Randomized invariants of the geometry and optimizer layers.

use mksgd::sgd::{Hyperparams, Param, RiemannianSgd, Schedule};
use mksgd::{Exec, Family, ManifoldSpec, Mat};
use proptest::prelude::*;

fn family() -> impl Strategy<Value = Family> {
    prop::sample::select(Family::ALL.to_vec())
}

/// A valid (family, rows, cols) triple with intrinsic dimension ≥ 1.
fn shape() -> impl Strategy<Value = ManifoldSpec> {
    (family(), 1usize..=5, 1usize..=4).prop_filter_map("valid shape", |(f, r, c)| {
        let (r, c) = match f {
            Family::SpecialOrthogonal => (r.max(2), r.max(2)),
            Family::Stiefel => (r.max(c), c),
            _ => (r, c),
        };
        ManifoldSpec::new(f, r, c).ok()
    })
}

fn ambient(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| Mat::from_vec(rows, cols, v))
}

fn case() -> impl Strategy<Value = (ManifoldSpec, u64, Mat, f64)> {
    shape().prop_flat_map(|s| (Just(s), any::<u64>(), ambient(s.rows(), s.cols()), 0.0f64..=1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_is_idempotent_and_tangent((spec, seed, m, _) in case()) {
        let p = spec.random_point(seed);
        let once = p.project_tangent(&m).unwrap();
        let twice = p.project_tangent(once.value()).unwrap();
        prop_assert!((twice.value() - once.value()).norm() <= 1e-10 * m.norm().max(1.0));
        prop_assert!(once.tangency_violation() <= 1e-10);
    }

    #[test]
    fn retraction_stays_on_manifold((spec, seed, m, s) in case()) {
        let p = spec.random_point(seed);
        let v = p.project_tangent(&m).unwrap();
        let n = v.norm();
        let v = if n > 0.0 { v.scaled(s / n) } else { v };
        let (q, _) = p.retract_with_info(&v).unwrap();
        prop_assert!(q.validate().violation <= 1e-8);
        if spec.family() == Family::SpecialOrthogonal {
            prop_assert!((q.value().determinant() - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn inner_product_is_symmetric_and_positive((spec, seed, m, _) in case(), k in 0.1f64..2.0) {
        let p = spec.random_point(seed);
        let u = p.project_tangent(&m).unwrap();
        let w = p.project_tangent(&(&m * k).map(|x| x.sin())).unwrap();
        prop_assert_eq!(p.inner(&u, &w).unwrap(), p.inner(&w, &u).unwrap());
        prop_assert!(p.inner(&u, &u).unwrap() >= 0.0);
    }

    #[test]
    fn geodesic_distance_is_a_semimetric(spec in shape(), a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(spec.family().has_exp_map());
        let p = spec.random_point(a);
        let q = spec.random_point(b);
        prop_assert_eq!(p.geodesic_distance(&p).unwrap(), 0.0);
        let d = p.geodesic_distance(&q).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - q.geodesic_distance(&p).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn exp_map_stays_on_manifold((spec, seed, m, s) in case()) {
        prop_assume!(spec.family().has_exp_map());
        let p = spec.random_point(seed);
        let v = p.project_tangent(&(&m * s)).unwrap();
        prop_assert!(p.exp_map(&v).unwrap().validate().violation <= 1e-8);
    }

    #[test]
    fn riemannian_grad_norm_is_the_projection_norm((spec, seed, m, _) in case()) {
        let p = spec.random_point(seed);
        let opt = RiemannianSgd::new(Hyperparams::default()).unwrap();
        let got = opt.riemannian_grad_norm(&p, &m).unwrap();
        prop_assert!((got - p.project_tangent(&m).unwrap().norm()).abs() <= 1e-12 * m.norm().max(1.0));
    }

    #[test]
    fn sweep_matches_across_exec_modes(seed in any::<u64>(), steps in 1usize..8) {
        let specs = [
            ManifoldSpec::sphere(3, 3).unwrap(),
            ManifoldSpec::oblique(4, 2).unwrap(),
            ManifoldSpec::stiefel(4, 3).unwrap(),
            ManifoldSpec::special_orthogonal(3).unwrap(),
        ];
        let init: Vec<Param> = specs
            .iter()
            .enumerate()
            .map(|(k, s)| Param::Point(s.random_point(seed.wrapping_add(k as u64))))
            .chain(std::iter::once(Param::Free(Mat::from_element(1, 3, 0.5))))
            .collect();
        let hyper = Hyperparams {
            theta_mu: 0.7,
            schedule: Schedule::InverseTime { alpha0: 0.3, lambda: 0.1 },
            ..Hyperparams::default()
        };
        let run = |exec: Exec| {
            let mut params = init.clone();
            let mut opt = RiemannianSgd::for_params(hyper, &params).unwrap().with_exec(exec);
            for t in 0..steps {
                let grads: Vec<Mat> = params
                    .iter()
                    .map(|p| p.value().map(|x| (x * (t + 1) as f64).cos()))
                    .collect();
                opt.sweep(&mut params, &grads).unwrap();
            }
            params
        };
        let seq = run(Exec::Sequential);
        prop_assert_eq!(&seq, &run(Exec::default()));
        for p in &seq {
            prop_assert!(p.violation() <= 1e-8);
        }
    }
}

#[test]
fn intrinsic_dimensions() {
    let cases = [
        (Family::Sphere, 4, 3, 11),
        (Family::Oblique, 4, 3, 9),
        (Family::Stiefel, 4, 3, 6),
        (Family::SpecialOrthogonal, 4, 4, 6),
    ];
    for (f, r, c, d) in cases {
        assert_eq!(ManifoldSpec::new(f, r, c).unwrap().intrinsic_dimension(), d, "{f}");
    }
    assert!(ManifoldSpec::new(Family::Sphere, 1, 1).is_err());
    assert!(ManifoldSpec::new(Family::Oblique, 1, 3).is_err());
}
