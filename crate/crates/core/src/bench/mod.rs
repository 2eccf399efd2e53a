//! Benchmark problems with known optima, a runner that records convergence
//! series, a renormalized-Euclidean baseline and the convergence
//! diagnostics.
//!
//! | problem   | manifold      | objective                      | oracle                   |
//! |-----------|---------------|--------------------------------|--------------------------|
//! | rayleigh  | Sphere(n,1)   | `−ωᵀMω`                        | power iteration          |
//! | procrustes| Stiefel/SO    | `‖Pω − Q‖²_F`                  | Jacobi SVD               |
//! | oblique   | Oblique(A,B)  | `Σ_{i≠j} [ωᵀMω]²_ij`           | multi-restart search     |

pub mod oracle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{Family, KernelPoint, ManifoldSpec, Mat};
use crate::par::Exec;
use crate::sgd::{Hyperparams, RiemannianSgd, Schedule};
use oracle::Dense;

/// Number of random restarts behind the oblique oracle.
pub const OBLIQUE_RESTARTS: u64 = 100;

fn to_dense(m: &Mat) -> Dense {
    Dense::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_dense(d: &Dense) -> Mat {
    Mat::from_fn(d.rows, d.cols, |i, j| d.at(i, j))
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

/// Modified Gram-Schmidt on the columns (problem data only).
fn orthonormal_columns(mut m: Mat) -> Mat {
    for j in 0..m.ncols() {
        for k in 0..j {
            let d = m.column(k).dot(&m.column(j));
            let ck = m.column(k).into_owned();
            m.column_mut(j).axpy(-d, &ck, 1.0);
        }
        let n = m.column(j).norm();
        m.column_mut(j).unscale_mut(n);
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// `f(ω) = −ωᵀMω`
    Rayleigh { m: Mat },
    /// `f(ω) = ‖Pω − Q‖²_F`
    Procrustes { p: Mat, q: Mat },
    /// `f(ω) = Σ_{i≠j} [ωᵀMω]²_ij`
    OffDiagonal { m: Mat },
}

impl Objective {
    pub fn value(&self, w: &Mat) -> f64 {
        match self {
            Objective::Rayleigh { m } => -(w.transpose() * m * w).trace(),
            Objective::Procrustes { p, q } => (p * w - q).norm_squared(),
            Objective::OffDiagonal { m } => {
                let s = w.transpose() * m * w;
                s.norm_squared() - s.diagonal().norm_squared()
            }
        }
    }

    pub fn euclidean_gradient(&self, w: &Mat) -> Mat {
        match self {
            Objective::Rayleigh { m } => m * w * -2.0,
            Objective::Procrustes { p, q } => p.transpose() * (p * w - q) * 2.0,
            Objective::OffDiagonal { m } => {
                // d/dω ‖S‖² − ‖diag S‖² with S = ωᵀMω is 4Mω(S − Ddiag(S)).
                let mw = m * w;
                let mut s = w.transpose() * &mw;
                s.fill_diagonal(0.0);
                mw * s * 4.0
            }
        }
    }
}

/// A benchmark instance: objective, manifold, start point and the optimum
/// reported by an independent oracle.
#[derive(Clone, Debug)]
pub struct BenchProblem {
    pub name: String,
    pub spec: ManifoldSpec,
    pub objective: Objective,
    /// Best value reachable from `start`; computed before any run.
    pub oracle_optimum: f64,
    /// Oracle minimizer, when the oracle produces one.
    pub oracle_minimizer: Option<Mat>,
    pub start: KernelPoint,
    pub seed: u64,
}

impl BenchProblem {
    pub fn default_hyper(&self) -> Hyperparams {
        tuned_hyper()
    }

    pub fn value(&self, p: &KernelPoint) -> f64 {
        self.objective.value(p.value())
    }

    pub fn gradient(&self, p: &KernelPoint) -> Mat {
        self.objective.euclidean_gradient(p.value())
    }
}

/// Hyperparameters fixed by the tuning sweep in `examples/tune.rs`; one
/// setting serves all three problems.
pub fn tuned_hyper() -> Hyperparams {
    Hyperparams {
        theta_mu: 0.5,
        schedule: Schedule::InverseTime {
            alpha0: 0.1,
            lambda: 1e-3,
        },
        ..Hyperparams::default()
    }
}

fn start_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(17)
}

/// `−ωᵀMω` on the unit sphere in `ℝⁿ` with `M = (G + Gᵀ)/2`, `G` Gaussian.
pub fn rayleigh_problem(n: usize, seed: u64) -> Result<BenchProblem> {
    if n < 2 {
        return Err(Error::config("problem.n", "rayleigh needs n >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian(&mut rng, n, n);
    rayleigh_from_matrix((&g + g.transpose()) * 0.5, seed)
}

pub fn rayleigh_from_matrix(m: Mat, seed: u64) -> Result<BenchProblem> {
    let n = m.nrows();
    if m.ncols() != n || n < 2 {
        return Err(Error::Structure("rayleigh matrix must be square with n >= 2".into()));
    }
    if (&m - m.transpose()).norm() > 0.0 {
        return Err(Error::Structure("rayleigh matrix must be symmetric".into()));
    }
    let spec = ManifoldSpec::sphere(n, 1)?;
    let oracle_optimum = -oracle::lambda_max(&to_dense(&m), seed);
    Ok(BenchProblem {
        name: "rayleigh".into(),
        spec,
        oracle_optimum,
        oracle_minimizer: None,
        objective: Objective::Rayleigh { m },
        start: spec.random_point(start_seed(seed)),
        seed,
    })
}

/// `‖Pω − Q‖²_F` on `Stiefel(rows, cols)`, with `P` of size `2·rows × rows`.
/// For non-square shapes `P` has orthonormal columns so that `‖Pω‖_F` is
/// constant and the SVD closed form applies.
pub fn procrustes_problem(rows: usize, cols: usize, seed: u64) -> Result<BenchProblem> {
    procrustes_on(Family::Stiefel, rows, cols, seed)
}

/// As [`procrustes_problem`] on a chosen family (Stiefel or SO(n)).
pub fn procrustes_on(family: Family, rows: usize, cols: usize, seed: u64) -> Result<BenchProblem> {
    if rows < cols {
        return Err(Error::config("problem.rows", "procrustes needs rows >= cols"));
    }
    let m = 2 * rows;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (m as f64).sqrt().recip();
    let mut p = gaussian(&mut rng, m, rows) * scale;
    if rows != cols {
        p = orthonormal_columns(p);
    }
    let q = gaussian(&mut rng, m, cols) * scale;
    procrustes_from(family, p, q, seed)
}

pub fn procrustes_from(family: Family, p: Mat, q: Mat, seed: u64) -> Result<BenchProblem> {
    if p.nrows() != q.nrows() {
        return Err(Error::Structure("P and Q need the same number of rows".into()));
    }
    let (rows, cols) = (p.ncols(), q.ncols());
    let spec = match family {
        Family::Stiefel | Family::SpecialOrthogonal => ManifoldSpec::new(family, rows, cols)?,
        f => {
            return Err(Error::config(
                "manifold.policy",
                format!("procrustes is defined on stiefel or so, not {f}"),
            ))
        }
    };
    let start = spec.random_point(start_seed(seed));
    // A square problem's iterates never change det sign, so the oracle is
    // taken over the component of the start point.
    let det_sign = (rows == cols).then(|| oracle::determinant(&to_dense(start.value())).signum());
    let opt = oracle::procrustes_optimum(&to_dense(&p), &to_dense(&q), det_sign);
    Ok(BenchProblem {
        name: "procrustes".into(),
        spec,
        oracle_optimum: opt.value,
        oracle_minimizer: Some(from_dense(&opt.minimizer)),
        objective: Objective::Procrustes { p, q },
        start,
        seed,
    })
}

/// Off-diagonal energy of `ωᵀMω` on `Oblique(rows, cols)`, `M = GGᵀ/rows + I`.
pub fn oblique_diag_problem(rows: usize, cols: usize, seed: u64) -> Result<BenchProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian(&mut rng, rows, rows);
    let m = &g * g.transpose() / rows as f64 + Mat::identity(rows, rows);
    oblique_from_matrix(m, cols, seed)
}

pub fn oblique_from_matrix(m: Mat, cols: usize, seed: u64) -> Result<BenchProblem> {
    let rows = m.nrows();
    if rows < 2 {
        return Err(Error::config("problem.rows", "oblique problem needs rows >= 2"));
    }
    let spec = ManifoldSpec::oblique(rows, cols)?;
    let (value, w) = if cols == 1 {
        (0.0, None)
    } else {
        let (v, w) = oracle::oblique_restart_optimum(&to_dense(&m), rows, cols, OBLIQUE_RESTARTS, seed);
        (v, Some(from_dense(&w)))
    };
    Ok(BenchProblem {
        name: "oblique".into(),
        spec,
        oracle_optimum: value,
        oracle_minimizer: w,
        objective: Objective::OffDiagonal { m },
        start: spec.random_point(start_seed(seed)),
        seed,
    })
}

/// One recorded iteration: metrics of the iterate after step `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub t: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub violation: f64,
    /// Geodesic distance travelled in this step (sphere and oblique only).
    pub step_len: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub problem: String,
    pub family: Family,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub oracle_optimum: f64,
    /// Minimum gradient norm over the last 1% of iterations.
    pub grad_norm_final: Option<f64>,
    /// Final objective minus the oracle optimum.
    pub gap_to_oracle: Option<f64>,
    pub schedule_satisfies_robbins_monro: bool,
    pub failed: bool,
    pub failure: Option<String>,
}

impl ConvergenceReport {
    /// Builds the report and derives every verdict from `rows`.
    pub fn from_rows(
        problem: &str,
        family: Family,
        seed: u64,
        rows: Vec<ReportRow>,
        oracle_optimum: f64,
        robbins_monro: bool,
        failure: Option<String>,
    ) -> Self {
        let n = rows.len();
        let tail = n.div_ceil(100).max(1).min(n);
        let grad_norm_final = rows[n - tail..]
            .iter()
            .map(|r| r.grad_norm)
            .reduce(f64::min);
        let gap_to_oracle = rows.last().map(|r| r.loss - oracle_optimum);
        ConvergenceReport {
            problem: problem.to_string(),
            family,
            seed,
            failed: failure.is_some() || rows.is_empty(),
            failure: failure.or_else(|| rows.is_empty().then(|| "no iterations recorded".into())),
            rows,
            oracle_optimum,
            grad_norm_final,
            gap_to_oracle,
            schedule_satisfies_robbins_monro: robbins_monro,
        }
    }

    /// First iteration whose gap to the oracle is at most `tol`.
    pub fn iterations_to_gap(&self, tol: f64) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.loss - self.oracle_optimum <= tol)
            .map(|r| r.t)
    }

    pub fn max_violation(&self) -> f64 {
        self.rows.iter().map(|r| r.violation).fold(0.0, f64::max)
    }

    pub fn max_grad_norm(&self) -> f64 {
        self.rows.iter().map(|r| r.grad_norm).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Update {
    Riemannian,
    Renormalized,
}

fn run(problem: &BenchProblem, hyper: &Hyperparams, iters: usize, update: Update) -> Result<ConvergenceReport> {
    if iters == 0 {
        return Err(Error::config("iters", "need at least one iteration"));
    }
    let mut opt = RiemannianSgd::new(*hyper)?.with_exec(Exec::Sequential);
    let id = opt.register(problem.spec.rows(), problem.spec.cols());
    let mut point = problem.start.clone();
    let mut grad = problem.gradient(&point);
    let mut rows = Vec::with_capacity(iters);
    let mut failure = None;
    for t in 0..iters as u64 {
        let next = match update {
            Update::Riemannian => opt.step(id, &point, &grad),
            Update::Renormalized => opt.step_renormalized(id, &point, &grad),
        };
        opt.tick();
        let next = match next {
            Ok(p) => p,
            Err(e) => {
                failure = Some(format!("step {t}: {e}"));
                break;
            }
        };
        let loss = problem.value(&next);
        if !loss.is_finite() {
            failure = Some(format!("step {t}: non-finite loss"));
            break;
        }
        grad = problem.gradient(&next);
        let grad_norm = match opt.effective_gradient(&grad).and_then(|g| next.project_tangent(&g)) {
            Ok(v) => v.norm(),
            Err(e) => {
                failure = Some(format!("step {t}: {e}"));
                break;
            }
        };
        rows.push(ReportRow {
            t,
            loss,
            grad_norm,
            violation: next.validate().violation,
            step_len: point.geodesic_distance(&next).ok(),
        });
        point = next;
    }
    Ok(ConvergenceReport::from_rows(
        &problem.name,
        problem.spec.family(),
        problem.seed,
        rows,
        problem.oracle_optimum,
        hyper.schedule.satisfies_robbins_monro(),
        failure,
    ))
}

/// Runs Riemannian SGD from `problem.start` for `iters` steps.
///
/// Row `t` holds the objective, the Riemannian norm of the (clipped)
/// gradient and the constraint violation at the iterate after step `t`.
/// A non-finite loss or a failed step ends the run with `failed` set.
pub fn run_benchmark(problem: &BenchProblem, hyper: &Hyperparams, iters: usize) -> Result<ConvergenceReport> {
    run(problem, hyper, iters, Update::Riemannian)
}

/// Same run with Euclidean momentum SGD followed by renormalization onto
/// the manifold (QR for Stiefel).
pub fn run_euclidean_baseline(problem: &BenchProblem, hyper: &Hyperparams, iters: usize) -> Result<ConvergenceReport> {
    run(problem, hyper, iters, Update::Renormalized)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub manifold: ConvergenceReport,
    pub euclidean: ConvergenceReport,
}

impl PairedReport {
    /// Iterations to reach a gap of `tol` for (manifold, euclidean).
    pub fn iterations_to_gap(&self, tol: f64) -> (Option<u64>, Option<u64>) {
        (
            self.manifold.iterations_to_gap(tol),
            self.euclidean.iterations_to_gap(tol),
        )
    }
}

pub fn compare_euclidean_baseline(problem: &BenchProblem, hyper: &Hyperparams, iters: usize) -> Result<PairedReport> {
    Ok(PairedReport {
        manifold: run_benchmark(problem, hyper, iters)?,
        euclidean: run_euclidean_baseline(problem, hyper, iters)?,
    })
}

/// Runs one problem per seed, fanned out under `exec`; each run is
/// single-threaded and reports come back in seed order.
pub fn run_seeds<F>(make: F, seeds: &[u64], hyper: Option<Hyperparams>, iters: usize, exec: Exec) -> Result<Vec<ConvergenceReport>>
where
    F: Fn(u64) -> Result<BenchProblem> + Sync + Send,
{
    exec.map(seeds, |&s| {
        let p = make(s)?;
        let h = hyper.unwrap_or_else(|| p.default_hyper());
        run_benchmark(&p, &h, iters)
    })
    .into_iter()
    .collect()
}

/// Pass/fail per operational convergence condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Iterates stayed on the compact manifold: violation ≤ 1e−8 throughout.
    pub compact: bool,
    /// Every recorded gradient norm is finite and, with clipping, ≤ K.
    pub bounded_gradient: bool,
    /// The schedule satisfies the Robbins–Monro conditions.
    pub schedule: bool,
    /// Running-minimum gradient norm fell ≥ 10× from the start of the first
    /// decile to the start of the last. `None` when the schedule does not
    /// qualify.
    pub trend: Option<bool>,
}

impl Diagnostics {
    pub fn all_pass(&self) -> bool {
        self.compact && self.bounded_gradient && self.schedule && self.trend.unwrap_or(false)
    }
}

/// Threshold for the compactness surrogate.
pub const COMPACT_VIOLATION: f64 = 1e-8;

pub fn check_convergence_conditions(report: &ConvergenceReport, hyper: &Hyperparams) -> Diagnostics {
    let rows = &report.rows;
    let compact = !rows.is_empty() && rows.iter().all(|r| r.violation <= COMPACT_VIOLATION);
    let bounded_gradient = !rows.is_empty()
        && rows.iter().all(|r| {
            r.grad_norm.is_finite() && hyper.grad_clip.is_none_or(|k| r.grad_norm <= k * (1.0 + 1e-12))
        });
    let schedule = hyper.schedule.satisfies_robbins_monro();
    let trend = (schedule && !rows.is_empty()).then(|| {
        // Each decile is represented by the running minimum at its first
        // iterate, so a run that reaches round-off inside the first decile
        // still shows its drop.
        let mut running = Vec::with_capacity(rows.len());
        let mut m = f64::INFINITY;
        for r in rows {
            m = m.min(r.grad_norm);
            running.push(m);
        }
        let last_decile = rows.len() - (rows.len() / 10).max(1);
        running[last_decile] <= running[0] / 10.0
    });
    Diagnostics {
        compact,
        bounded_gradient,
        schedule,
        trend,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn fd_gradient(obj: &Objective, w: &Mat) -> Mat {
        let h = 1e-6;
        Mat::from_fn(w.nrows(), w.ncols(), |i, j| {
            let mut a = w.clone();
            let mut b = w.clone();
            a[(i, j)] += h;
            b[(i, j)] -= h;
            (obj.value(&a) - obj.value(&b)) / (2.0 * h)
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        let problems = [
            rayleigh_problem(4, 1).unwrap(),
            procrustes_problem(4, 4, 2).unwrap(),
            procrustes_problem(5, 2, 2).unwrap(),
            oblique_diag_problem(3, 3, 3).unwrap(),
        ];
        for p in &problems {
            let w = p.start.value();
            let g = p.objective.euclidean_gradient(w);
            let fd = fd_gradient(&p.objective, w);
            assert!((&g - &fd).norm() <= 1e-6 * g.norm().max(1.0), "{}", p.name);
        }
    }

    #[test]
    fn rayleigh_diagonal() {
        let m = Mat::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let p = rayleigh_from_matrix(m, 0).unwrap();
        assert_abs_diff_eq!(p.oracle_optimum, -3.0, epsilon = 1e-10);
    }

    #[test]
    fn rayleigh_isotropic_has_zero_riemannian_gradient() {
        let p = rayleigh_from_matrix(Mat::identity(3, 3), 0).unwrap();
        assert_abs_diff_eq!(p.oracle_optimum, -1.0, epsilon = 1e-10);
        for seed in 0..5 {
            let w = p.spec.random_point(seed);
            assert_abs_diff_eq!(p.value(&w), -1.0, epsilon = 1e-12);
            let rg = w.project_tangent(&p.gradient(&w)).unwrap();
            assert!(rg.norm() < 1e-14);
        }
    }

    #[test]
    fn procrustes_consistent_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = gaussian(&mut rng, 6, 3);
        let prob = procrustes_from(Family::SpecialOrthogonal, p.clone(), p.clone(), 0).unwrap();
        assert_abs_diff_eq!(prob.oracle_optimum, 0.0, epsilon = 1e-20);
        assert_abs_diff_eq!(prob.oracle_minimizer.unwrap(), Mat::identity(3, 3), epsilon = 1e-12);

        let r = ManifoldSpec::special_orthogonal(3).unwrap().random_point(4).into_value();
        let prob = procrustes_from(Family::SpecialOrthogonal, p.clone(), &p * &r, 0).unwrap();
        assert_abs_diff_eq!(prob.oracle_optimum, 0.0, epsilon = 1e-20);
        assert_abs_diff_eq!(prob.oracle_minimizer.unwrap(), r, epsilon = 1e-12);
    }

    #[test]
    fn oblique_degenerate_cases() {
        let p = oblique_from_matrix(Mat::identity(3, 3), 2, 0).unwrap();
        assert!(p.oracle_optimum < 1e-16);
        let orth = Mat::identity(3, 2);
        assert_eq!(p.objective.value(&orth), 0.0);

        let p = oblique_diag_problem(3, 1, 0).unwrap();
        for s in 0..5 {
            assert_eq!(p.value(&p.spec.random_point(s)), 0.0);
        }
    }

    #[test]
    fn oracle_is_a_lower_bound() {
        let problems = [
            rayleigh_problem(5, 11).unwrap(),
            procrustes_on(Family::SpecialOrthogonal, 4, 4, 3).unwrap(),
            oblique_diag_problem(3, 2, 5).unwrap(),
        ];
        for p in &problems {
            for s in 0..200 {
                let w = p.spec.random_point(s);
                assert!(p.oracle_optimum <= p.value(&w) + 1e-9, "{} seed {s}", p.name);
            }
        }
    }

    #[test]
    fn zero_step_size_freezes_the_iterate() {
        let p = rayleigh_problem(3, 0).unwrap();
        let h = Hyperparams {
            schedule: Schedule::Constant { alpha0: 0.0 },
            ..Hyperparams::default()
        };
        let pair = compare_euclidean_baseline(&p, &h, 20).unwrap();
        for r in pair.manifold.rows.iter().chain(&pair.euclidean.rows) {
            assert_eq!(r.step_len, Some(0.0));
            assert_abs_diff_eq!(r.loss, p.value(&p.start), epsilon = 1e-15);
        }
        assert!(!pair.manifold.schedule_satisfies_robbins_monro);
        let d = check_convergence_conditions(&pair.manifold, &h);
        assert!(!d.schedule);
        assert_eq!(d.trend, None);
    }

    #[test]
    fn verdicts_from_rows() {
        let rows: Vec<ReportRow> = (0..200)
            .map(|t| ReportRow {
                t,
                loss: 1.0 / (t + 1) as f64,
                grad_norm: 10.0 / (t + 1) as f64,
                violation: 0.0,
                step_len: None,
            })
            .collect();
        let r = ConvergenceReport::from_rows("x", Family::Sphere, 0, rows, 0.0, true, None);
        assert_eq!(r.grad_norm_final, Some(10.0 / 200.0));
        assert_eq!(r.gap_to_oracle, Some(1.0 / 200.0));
        assert_eq!(r.iterations_to_gap(0.1), Some(9));

        let empty = ConvergenceReport::from_rows("x", Family::Sphere, 0, vec![], 0.0, true, None);
        assert!(empty.failed);
        assert_eq!(empty.grad_norm_final, None);
    }

    #[test]
    fn clipped_run_records_bounded_norms() {
        let p = rayleigh_problem(5, 2).unwrap();
        let h = Hyperparams {
            grad_clip: Some(1.0),
            ..p.default_hyper()
        };
        let r = run_benchmark(&p, &h, 500).unwrap();
        assert!(r.max_grad_norm() <= 1.0 + 1e-12);
        assert!(check_convergence_conditions(&r, &h).bounded_gradient);
    }
}
