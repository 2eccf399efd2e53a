//! Property suite behind the `check` command: manifold closure, projection
//! idempotence and tangency, exponential-map identities, retraction order
//! and backpropagation against finite differences.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::manifold::{Family, KernelPoint, ManifoldSpec, Mat, TangentVector};
use crate::net::{Activation, Batch, LayerSpec, ManifoldPolicy, Mode, Network, NetworkSpec, Tensor};
use crate::par::Exec;

/// Faults the suite can inject to confirm that it notices them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Sphere steps skip the renormalization: `ω ← ω + v`.
    SkipSphereRenormalization,
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    /// Random retraction steps per family in the closure check.
    pub steps: usize,
    /// Random networks in the gradient check.
    pub nets: usize,
    pub fault: Option<Fault>,
    pub exec: Exec,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            steps: 10_000,
            nets: 100,
            fault: None,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub detail: String,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    fn push(&mut self, name: impl Into<String>, pass: bool, detail: String) {
        self.rows.push(CheckRow {
            name: name.into(),
            detail,
            pass,
        });
    }

    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Fixed-width table, one line per check.
    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$}  result  detail\n", "check");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:<6}  {}", r.name, if r.pass { "PASS" } else { "FAIL" }, r.detail);
        }
        let failed = self.rows.iter().filter(|r| !r.pass).count();
        let _ = writeln!(s, "{} checks, {} failed", self.rows.len(), failed);
        s
    }
}

/// Representative shape per family for the geometry checks.
pub fn check_specs() -> Vec<ManifoldSpec> {
    vec![
        ManifoldSpec::sphere(4, 3).expect("valid"),
        ManifoldSpec::oblique(4, 3).expect("valid"),
        ManifoldSpec::stiefel(5, 3).expect("valid"),
        ManifoldSpec::special_orthogonal(4).expect("valid"),
    ]
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        scale * z
    })
}

/// Stream for ambient draws, kept apart from the one behind
/// `random_point(seed)` so the two are independent.
fn ambient_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn step(p: &KernelPoint, v: &TangentVector, fault: Option<Fault>) -> Result<KernelPoint> {
    if fault == Some(Fault::SkipSphereRenormalization) && p.spec().family() == Family::Sphere {
        return KernelPoint::new(*p.spec(), p.value() + v.value());
    }
    p.retract(v)
}

/// Largest violation along `steps` random retraction steps from a random
/// point; tangent directions have Frobenius norm up to 1. The walk stops at
/// the first point off the manifold.
pub fn closure_walk(spec: ManifoldSpec, steps: usize, seed: u64, fault: Option<Fault>) -> Result<f64> {
    let mut rng = ambient_rng(seed);
    let mut p = spec.random_point(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let v = p.project_tangent(&gaussian(&mut rng, spec.rows(), spec.cols(), 1.0))?;
        let n = v.norm();
        let v = if n > 0.0 { v.scaled(rng.random::<f64>() / n) } else { v };
        p = step(&p, &v, fault)?;
        let check = p.validate();
        worst = worst.max(check.violation);
        if !check.valid {
            break;
        }
    }
    Ok(worst)
}

/// Worst `‖Π(Π(m)) − Π(m)‖` and tangency violation over random draws.
pub fn projection_errors(spec: ManifoldSpec, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ambient_rng(seed);
    let (mut idem, mut tan): (f64, f64) = (0.0, 0.0);
    for k in 0..draws {
        let p = spec.random_point(seed.wrapping_add(k as u64));
        let m = gaussian(&mut rng, spec.rows(), spec.cols(), 10.0);
        let once = p.project_tangent(&m)?;
        let twice = p.project_tangent(once.value())?;
        idem = idem.max((twice.value() - once.value()).norm());
        tan = tan.max(once.tangency_violation());
    }
    Ok((idem, tan))
}

/// Worst `‖exp_p(π·u) + p‖` over unit tangent `u` on the unit sphere.
pub fn antipode_error(rows: usize, cols: usize, draws: usize, seed: u64) -> Result<f64> {
    let spec = ManifoldSpec::sphere(rows, cols)?;
    let mut rng = ambient_rng(seed);
    let mut worst: f64 = 0.0;
    for k in 0..draws {
        let p = spec.random_point(seed.wrapping_add(k as u64));
        let u = p.project_tangent(&gaussian(&mut rng, rows, cols, 1.0))?;
        let u = u.scaled(std::f64::consts::PI / u.norm());
        let q = p.exp_map(&u)?;
        worst = worst.max((q.value() + p.value()).norm());
    }
    Ok(worst)
}

/// Least-squares slope of `log ‖R_p(t·v) − exp_p(t·v)‖` against `log t`.
/// The two maps agree to first order, so the slope is at least 2.
pub fn retraction_exp_slope(spec: ManifoldSpec, seed: u64) -> Result<f64> {
    let mut rng = ambient_rng(seed);
    let p = spec.random_point(seed);
    let v = p.project_tangent(&gaussian(&mut rng, spec.rows(), spec.cols(), 1.0))?;
    let v = v.scaled(1.0 / v.norm());
    let mut pts = Vec::new();
    for k in 0..8 {
        let t = 0.2 * 0.5f64.powi(k);
        let tv = v.scaled(t);
        let d = (p.retract(&tv)?.value() - p.exp_map(&tv)?.value()).norm();
        if d > 0.0 {
            pts.push((t.ln(), d.ln()));
        }
    }
    Ok(fit_slope(&pts))
}

pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// A small random network and batch: one or two convolutions with smooth
/// activations, optional mean-only batch norm, a dense head, and a random
/// manifold policy where the kernel shapes admit one.
pub fn random_small_network(seed: u64) -> Result<(Network, Batch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cin = rng.random_range(1..=2);
    let side = rng.random_range(4..=6);
    let classes = rng.random_range(2..=3);
    let kh = rng.random_range(2..=3);
    let kw = rng.random_range(2..=3);
    let c1 = rng.random_range(1..=3);
    let act = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            Activation::Tanh
        } else {
            Activation::Softplus
        }
    };
    let mut layers = vec![LayerSpec::Conv2d {
        kernel_height: kh,
        kernel_width: kw,
        in_channels: cin,
        out_channels: c1,
        stride: rng.random_range(1..=2),
        padding: rng.random_range(0..=1),
        manifold: None,
    }];
    if rng.random_bool(0.5) {
        layers.push(LayerSpec::MeanOnlyBn);
    }
    layers.push(LayerSpec::Activation { function: act(&mut rng) });
    let draft = NetworkSpec {
        input_channels: cin,
        input_height: side,
        input_width: side,
        num_classes: classes,
        layers: layers.clone(),
    };
    let (mut c, mut h, mut w) = draft.output_shape()?;
    if h >= 3 && w >= 3 && rng.random_bool(0.5) {
        let c2 = rng.random_range(1..=2);
        layers.push(LayerSpec::Conv2d {
            kernel_height: 2,
            kernel_width: 2,
            in_channels: c,
            out_channels: c2,
            stride: 1,
            padding: 0,
            manifold: None,
        });
        layers.push(LayerSpec::Activation { function: act(&mut rng) });
        (c, h, w) = (c2, h - 1, w - 1);
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense {
        in_dim: c * h * w,
        out_dim: classes,
        manifold: None,
    });
    let spec = NetworkSpec {
        input_channels: cin,
        input_height: side,
        input_width: side,
        num_classes: classes,
        layers,
    };
    let mut net = Network::new(spec, seed)?;
    let families = [None, Some(Family::Sphere), Some(Family::Oblique), Some(Family::Stiefel)];
    let policy = ManifoldPolicy {
        conv: families[rng.random_range(0..families.len())],
        dense: families[rng.random_range(0..families.len())],
    };
    if net.assign_manifolds(policy, seed).is_err() {
        net.assign_manifolds(ManifoldPolicy::uniform(policy.dense), seed)
            .or_else(|_| net.assign_manifolds(ManifoldPolicy::default(), seed))?;
    }
    // Non-zero biases and shifts so their gradients are exercised.
    for p in net.params_mut() {
        if let crate::sgd::Param::Free(m) = p {
            if m.nrows() == 1 {
                *m = gaussian(&mut rng, 1, m.ncols(), 0.3);
            }
        }
    }
    let n = rng.random_range(2..=4);
    let inputs = Tensor::from_vec(
        [n, cin, side, side],
        (0..n * cin * side * side).map(|_| StandardNormal.sample(&mut rng)).collect(),
    );
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Ok((net, Batch::new(inputs, labels)?))
}

/// Relative error `‖g_bp − g_fd‖ / max(‖g_bp‖, ‖g_fd‖)` between backprop
/// and central differences over every parameter entry, in training mode.
pub fn gradient_fd_error(net: &mut Network, batch: &Batch) -> Result<f64> {
    const H: f64 = 1e-5;
    net.forward(batch, Mode::Train)?;
    let grads = net.backward()?;
    let (mut diff, mut bp, mut fd) = (0.0, 0.0, 0.0);
    for i in 0..net.params().len() {
        let base = net.params()[i].value().clone();
        for j in 0..base.len() {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut m = base.clone();
                m[j] += delta;
                net.params_mut()[i].set_value(m)?;
                Ok(net.forward(batch, Mode::Train)?.loss)
            };
            let d = (probe(H)? - probe(-H)?) / (2.0 * H);
            let g = grads[i][j];
            diff += (g - d).powi(2);
            bp += g * g;
            fd += d * d;
        }
        net.params_mut()[i].set_value(base)?;
    }
    let scale = bp.max(fd).sqrt().max(1e-12);
    Ok(diff.sqrt() / scale)
}

/// Runs every check. Output depends only on `opts`.
pub fn run_checks(opts: &CheckOptions) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let specs = check_specs();

    let walks = opts.exec.map(&specs, |s| closure_walk(*s, opts.steps, opts.seed, opts.fault));
    for (s, w) in specs.iter().zip(walks) {
        let w = w?;
        report.push(
            format!("closure/{}", s.family().name()),
            w <= 1e-8,
            format!("{} steps, max violation {w:.2e}", opts.steps),
        );
    }

    for s in &specs {
        let (idem, tan) = projection_errors(*s, 200, opts.seed)?;
        report.push(
            format!("projection/{}", s.family().name()),
            idem <= 1e-10 && tan <= 1e-10,
            format!("idempotence {idem:.2e}, tangency {tan:.2e}"),
        );
    }

    let anti = antipode_error(4, 1, 200, opts.seed)?;
    report.push("exp/antipode", anti <= 1e-10, format!("max error {anti:.2e}"));

    for s in specs.iter().filter(|s| s.family().has_exp_map()) {
        let slope = retraction_exp_slope(*s, opts.seed)?;
        report.push(
            format!("retraction-order/{}", s.family().name()),
            slope >= 1.9,
            format!("log-log slope {slope:.3}"),
        );
    }

    let seeds: Vec<u64> = (0..opts.nets as u64).map(|k| opts.seed.wrapping_add(k)).collect();
    let errs = opts.exec.map(&seeds, |&s| {
        let (mut net, batch) = random_small_network(s)?;
        gradient_fd_error(&mut net, &batch)
    });
    let errs: Vec<f64> = errs.into_iter().collect::<Result<_>>()?;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    report.push(
        "gradient/finite-difference",
        !errs.is_empty() && worst <= 1e-4,
        format!("{} networks, max relative error {worst:.2e}", errs.len()),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(fault: Option<Fault>) -> CheckOptions {
        CheckOptions {
            steps: 300,
            nets: 5,
            fault,
            ..CheckOptions::default()
        }
    }

    #[test]
    fn suite_passes() {
        let r = run_checks(&quick(None)).unwrap();
        assert!(r.all_pass(), "{}", r.table());
    }

    #[test]
    fn injected_fault_is_caught() {
        let r = run_checks(&quick(Some(Fault::SkipSphereRenormalization))).unwrap();
        assert!(!r.all_pass());
        let failing: Vec<_> = r.rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
        assert_eq!(failing, vec!["closure/sphere"]);
    }

    #[test]
    fn table_is_deterministic() {
        let a = run_checks(&quick(None)).unwrap().table();
        let b = run_checks(&CheckOptions {
            exec: Exec::Sequential,
            ..quick(None)
        })
        .unwrap()
        .table();
        assert_eq!(a, b);
    }

    #[test]
    fn slope_fit() {
        let pts: Vec<(f64, f64)> = (1..6).map(|k| (k as f64, 3.0 * k as f64 + 1.0)).collect();
        assert!((fit_slope(&pts) - 3.0).abs() < 1e-12);
    }
}
