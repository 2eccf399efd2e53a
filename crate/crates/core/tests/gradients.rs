//! Backpropagation and optimizer-step checks against finite differences.

use mksgd::bench::{self, BenchProblem};
use mksgd::check::{fit_slope, random_small_network};
use mksgd::net::{Batch, Mode, Network};
use mksgd::sgd::{Hyperparams, RiemannianSgd, Schedule};
use mksgd::{ManifoldSpec, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flat(net: &Network) -> Vec<f64> {
    net.params().iter().flat_map(|p| p.value().iter().copied().collect::<Vec<_>>()).collect()
}

fn set_flat(net: &mut Network, x: &[f64]) {
    let mut at = 0;
    for p in net.params_mut() {
        let (r, c) = p.value().shape();
        p.set_value(Mat::from_column_slice(r, c, &x[at..at + r * c])).unwrap();
        at += r * c;
    }
}

fn loss_at(net: &mut Network, batch: &Batch, x: &[f64]) -> f64 {
    set_flat(net, x);
    net.forward(batch, Mode::Train).unwrap().loss
}

fn grad_at(net: &mut Network, batch: &Batch, x: &[f64]) -> Vec<f64> {
    set_flat(net, x);
    net.forward(batch, Mode::Train).unwrap();
    net.backward().unwrap().iter().flat_map(|g| g.iter().copied().collect::<Vec<_>>()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn backprop_matches_central_differences_on_100_networks() {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let (mut net, batch) = random_small_network(seed).unwrap();
        let x0 = flat(&net);
        let g = grad_at(&mut net, &batch, &x0);
        let fd: Vec<f64> = (0..x0.len())
            .map(|i| {
                let mut a = x0.clone();
                let mut b = x0.clone();
                a[i] += h;
                b[i] -= h;
                (loss_at(&mut net, &batch, &a) - loss_at(&mut net, &batch, &b)) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&g).max(norm(&fd)).max(1e-12);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-4, "max relative error {worst:e}");
}

#[test]
fn hessian_vector_products_are_symmetric() {
    let eps = 1e-4;
    for seed in 0..20 {
        let (mut net, batch) = random_small_network(seed).unwrap();
        let x0 = flat(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..x0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..x0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut hvp = |d: &[f64]| -> Vec<f64> {
            let plus: Vec<f64> = x0.iter().zip(d).map(|(x, d)| x + eps * d).collect();
            let minus: Vec<f64> = x0.iter().zip(d).map(|(x, d)| x - eps * d).collect();
            let gp = grad_at(&mut net, &batch, &plus);
            let gm = grad_at(&mut net, &batch, &minus);
            gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
        };
        let hv = hvp(&v);
        let hw = hvp(&w);
        let (a, b) = (dot(&hv, &w), dot(&hw, &v));
        let scale = norm(&hv) * norm(&w) + norm(&hw) * norm(&v);
        assert!((a - b).abs() <= 1e-3 * scale.max(1e-12), "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    for seed in 0..20 {
        let (mut net, batch) = random_small_network(seed).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let f = net.forward(&batch, mode).unwrap();
            assert!(f.loss >= 0.0);
            for row in &f.probs {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}

fn problems(seed: u64) -> Vec<BenchProblem> {
    vec![
        bench::rayleigh_problem(5, seed).unwrap(),
        bench::procrustes_problem(4, 4, seed).unwrap(),
        bench::procrustes_problem(5, 3, seed).unwrap(),
        bench::oblique_diag_problem(3, 2, seed).unwrap(),
    ]
}

#[test]
fn small_steps_descend() {
    let hyper = Hyperparams {
        theta_mu: 0.0,
        schedule: Schedule::Constant { alpha0: 1e-3 },
        ..Hyperparams::default()
    };
    let (mut ok, mut total) = (0, 0);
    for seed in 0..100 {
        for p in problems(seed) {
            let w = p.spec.random_point(seed.wrapping_mul(7).wrapping_add(1));
            let mut opt = RiemannianSgd::new(hyper).unwrap();
            let id = opt.register(p.spec.rows(), p.spec.cols());
            let next = opt.step(id, &w, &p.gradient(&w)).unwrap();
            total += 1;
            if p.value(&next) <= p.value(&w) + 1e-12 {
                ok += 1;
            }
        }
    }
    assert!(ok * 100 >= total * 99, "{ok}/{total} steps descended");
}

/// Manifold step and renormalized Euclidean step from the same point agree
/// to first order in α.
#[test]
fn renormalized_baseline_agrees_to_first_order() {
    for seed in 0..5 {
        let p = bench::rayleigh_problem(5, seed).unwrap();
        let w = p.spec.random_point(seed + 100);
        let g = p.gradient(&w);
        let mut pts = Vec::new();
        for k in 0..8 {
            let alpha = 0.1 * 0.5f64.powi(k);
            let hyper = Hyperparams {
                schedule: Schedule::Constant { alpha0: alpha },
                ..Hyperparams::default()
            };
            let mut a = RiemannianSgd::new(hyper).unwrap();
            let mut b = a.clone();
            let id = a.register(5, 1);
            b.register(5, 1);
            let ra = a.step(id, &w, &g).unwrap();
            let rb = b.step_renormalized(id, &w, &g).unwrap();
            pts.push((alpha.ln(), (ra.value() - rb.value()).norm().ln()));
        }
        let slope = fit_slope(&pts);
        assert!(slope >= 1.9, "seed {seed}: slope {slope}");
    }
}

/// For a scale-invariant objective the Euclidean gradient is already
/// tangent, so both updates coincide.
#[test]
fn scale_invariant_objective_gives_identical_steps() {
    let spec = ManifoldSpec::sphere(4, 1).unwrap();
    let m = Mat::from_fn(4, 4, |i, j| ((i + 1) * (j + 1)) as f64 / 7.0);
    let w = spec.random_point(3);
    let x = w.value();
    let q = (x.transpose() * &m * x)[(0, 0)];
    // ∇(−xᵀMx / xᵀx) = −2(Mx − q·x) at ‖x‖ = 1
    let g = (&m * x - x * q) * -2.0;
    let hyper = Hyperparams {
        schedule: Schedule::Constant { alpha0: 0.05 },
        ..Hyperparams::default()
    };
    let mut a = RiemannianSgd::new(hyper).unwrap();
    let mut b = a.clone();
    let id = a.register(4, 1);
    b.register(4, 1);
    let ra = a.step(id, &w, &g).unwrap();
    let rb = b.step_renormalized(id, &w, &g).unwrap();
    assert!((ra.value() - rb.value()).norm() <= 1e-14);
}
