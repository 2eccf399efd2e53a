//! Riemannian SGD on kernel submanifolds.
//!
//! One iteration for a constrained kernel `ω` with Euclidean gradient `g`:
//!
//! ```text
//! g   ← clip(g, K)                      (optional)
//! μ   ← θ_μ·μ − θ_E·g                   (ambient momentum buffer)
//! ξ   ← Π_ω(μ)                          (tangent projection)
//! α_t ← schedule(t)
//! ω   ← R_ω(α_t·ξ)                      (retraction or exponential map)
//! ```
//!
//! The minus sign lives in the momentum update only, so `α_t·ξ` is already a
//! descent direction. Unconstrained parameters follow the same momentum rule
//! with `ω ← ω + α_t·μ`. The iteration counter `t` is shared by all kernels
//! and advances once per [`RiemannianSgd::sweep`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{KernelPoint, Mat, RetractInfo, TangentVector};
use crate::par::Exec;

/// Number of step halvings attempted after a singular retraction.
pub const MAX_RETRIES: u32 = 5;

/// Step-size schedule `α_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `α0 / (1 + α0·λ·t)`
    InverseTime { alpha0: f64, lambda: f64 },
    /// `α0 · drop_factor^⌊t / drop_every⌋`
    StepDecay {
        alpha0: f64,
        drop_every: u64,
        drop_factor: f64,
    },
    Constant { alpha0: f64 },
}

impl Schedule {
    pub fn learning_rate(&self, t: u64) -> f64 {
        match *self {
            Schedule::InverseTime { alpha0, lambda } => alpha0 / (1.0 + alpha0 * lambda * t as f64),
            Schedule::StepDecay {
                alpha0,
                drop_every,
                drop_factor,
            } => {
                let drops = (t / drop_every).min(i32::MAX as u64) as i32;
                alpha0 * drop_factor.powi(drops)
            }
            Schedule::Constant { alpha0 } => alpha0,
        }
    }

    pub fn alpha0(&self) -> f64 {
        match *self {
            Schedule::InverseTime { alpha0, .. }
            | Schedule::StepDecay { alpha0, .. }
            | Schedule::Constant { alpha0 } => alpha0,
        }
    }

    /// Whether `Σ α_t = ∞` and `Σ α_t² < ∞` hold.
    ///
    /// Only inverse-time decay with `λ > 0` qualifies: a constant step has a
    /// divergent square sum and step decay has a finite plain sum.
    pub fn satisfies_robbins_monro(&self) -> bool {
        match *self {
            Schedule::InverseTime { alpha0, lambda } => alpha0 > 0.0 && lambda > 0.0,
            Schedule::StepDecay { .. } | Schedule::Constant { .. } => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.alpha0();
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::config("schedule.alpha0", format!("must be >= 0, got {a}")));
        }
        match *self {
            Schedule::InverseTime { lambda, .. } if !(lambda.is_finite() && lambda >= 0.0) => Err(
                Error::config("schedule.lambda", format!("must be >= 0, got {lambda}")),
            ),
            Schedule::StepDecay { drop_every: 0, .. } => {
                Err(Error::config("schedule.drop_every", "must be positive"))
            }
            Schedule::StepDecay { drop_factor, .. } if !(drop_factor > 0.0 && drop_factor < 1.0) => {
                Err(Error::config(
                    "schedule.drop_factor",
                    format!("must lie in (0, 1), got {drop_factor}"),
                ))
            }
            _ => Ok(()),
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::InverseTime {
            alpha0: 0.1,
            lambda: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Momentum coefficient, in `[0, 1)`.
    pub theta_mu: f64,
    /// Euclidean gradient decay, positive.
    pub theta_e: f64,
    pub schedule: Schedule,
    /// Rescale Euclidean gradients to at most this Frobenius norm.
    pub grad_clip: Option<f64>,
    /// Use the exponential map instead of the retraction where one exists.
    pub use_exp_map: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            theta_mu: 0.0,
            theta_e: 1.0,
            schedule: Schedule::default(),
            grad_clip: None,
            use_exp_map: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_mu >= 0.0 && self.theta_mu < 1.0) {
            return Err(Error::config(
                "hyper.theta_mu",
                format!("must lie in [0, 1), got {}", self.theta_mu),
            ));
        }
        if !(self.theta_e.is_finite() && self.theta_e > 0.0) {
            return Err(Error::config(
                "hyper.theta_e",
                format!("must be positive, got {}", self.theta_e),
            ));
        }
        if let Some(k) = self.grad_clip {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::config(
                    "hyper.grad_clip",
                    format!("must be positive, got {k}"),
                ));
            }
        }
        self.schedule.validate()
    }
}

/// A trainable matrix: either a point on a kernel submanifold or a free
/// Euclidean parameter (biases, unconstrained kernels).
#[derive(Clone, Debug, PartialEq)]
pub enum Param {
    Point(KernelPoint),
    Free(Mat),
}

impl Param {
    pub fn value(&self) -> &Mat {
        match self {
            Param::Point(p) => p.value(),
            Param::Free(m) => m,
        }
    }

    pub fn point(&self) -> Option<&KernelPoint> {
        match self {
            Param::Point(p) => Some(p),
            Param::Free(_) => None,
        }
    }

    /// Constraint violation; zero for free parameters.
    pub fn violation(&self) -> f64 {
        self.point().map_or(0.0, |p| p.validate().violation)
    }

    /// Replaces the value, keeping the kind. Points are checked for shape
    /// only, so finite-difference probes may step off the manifold.
    pub fn set_value(&mut self, value: Mat) -> Result<()> {
        match self {
            Param::Point(p) => *p = KernelPoint::new(*p.spec(), value)?,
            Param::Free(m) => {
                if m.shape() != value.shape() {
                    return Err(Error::Structure(format!(
                        "free parameter is {:?}, got {:?}",
                        m.shape(),
                        value.shape()
                    )));
                }
                *m = value;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KernelId(pub usize);

/// Counters for the rarely taken branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    /// SO(n) retractions that had to negate a column to restore det +1.
    pub det_flips: u64,
    /// Step halvings after singular retractions.
    pub halvings: u64,
}

struct Advance {
    momentum: Mat,
    param: Param,
    info: RetractInfo,
    halvings: u32,
}

/// Optimizer state: one ambient momentum buffer per registered kernel, the
/// shared iteration counter and the hyperparameters.
#[derive(Clone, Debug)]
pub struct RiemannianSgd {
    hyper: Hyperparams,
    t: u64,
    momentum: Vec<Mat>,
    exec: Exec,
    stats: StepStats,
}

impl RiemannianSgd {
    pub fn new(hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        Ok(RiemannianSgd {
            hyper,
            t: 0,
            momentum: Vec::new(),
            exec: Exec::default(),
            stats: StepStats::default(),
        })
    }

    /// Optimizer with one zeroed momentum buffer per parameter, in order.
    pub fn for_params(hyper: Hyperparams, params: &[Param]) -> Result<Self> {
        let mut opt = Self::new(hyper)?;
        for p in params {
            opt.register(p.value().nrows(), p.value().ncols());
        }
        Ok(opt)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn register(&mut self, rows: usize, cols: usize) -> KernelId {
        self.momentum.push(Mat::zeros(rows, cols));
        KernelId(self.momentum.len() - 1)
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn stats(&self) -> StepStats {
        self.stats
    }

    pub fn num_kernels(&self) -> usize {
        self.momentum.len()
    }

    pub fn momentum(&self, id: KernelId) -> Result<&Mat> {
        self.momentum
            .get(id.0)
            .ok_or_else(|| Error::Structure(format!("unknown kernel id {}", id.0)))
    }

    /// `α_t` at the current iteration.
    pub fn learning_rate(&self) -> f64 {
        self.hyper.schedule.learning_rate(self.t)
    }

    /// Advance the shared iteration counter.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// The gradient the optimizer actually consumes: finiteness-checked and
    /// rescaled to the clip bound when clipping is on.
    pub fn effective_gradient(&self, grad: &Mat) -> Result<Mat> {
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite entry in Euclidean gradient".into()));
        }
        match self.hyper.grad_clip {
            Some(k) => {
                let n = grad.norm();
                if n > k {
                    Ok(grad * (k / n))
                } else {
                    Ok(grad.clone())
                }
            }
            None => Ok(grad.clone()),
        }
    }

    fn next_momentum(&self, prev: &Mat, grad: &Mat) -> Result<Mat> {
        if prev.shape() != grad.shape() {
            return Err(Error::Structure(format!(
                "gradient shape {:?} does not match kernel shape {:?}",
                grad.shape(),
                prev.shape()
            )));
        }
        let g = self.effective_gradient(grad)?;
        Ok(prev * self.hyper.theta_mu - g * self.hyper.theta_e)
    }

    /// `μ ← θ_μ·μ − θ_E·g`; stores and returns the new buffer.
    pub fn momentum_update(&mut self, id: KernelId, grad: &Mat) -> Result<Mat> {
        let next = self.next_momentum(self.momentum(id)?, grad)?;
        self.momentum[id.0] = next.clone();
        Ok(next)
    }

    /// `‖Π_ω(g)‖_F` for the raw gradient; does not touch the state.
    pub fn riemannian_grad_norm(&self, kernel: &KernelPoint, grad: &Mat) -> Result<f64> {
        Ok(kernel.project_tangent(grad)?.norm())
    }

    fn map_point(&self, p: &KernelPoint, v: &TangentVector) -> Result<(KernelPoint, RetractInfo)> {
        if self.hyper.use_exp_map && p.spec().family().has_exp_map() {
            Ok((p.exp_map(v)?, RetractInfo::default()))
        } else {
            p.retract_with_info(v)
        }
    }

    fn advance(&self, momentum: &Mat, param: &Param, grad: &Mat, alpha: f64) -> Result<Advance> {
        let momentum = self.next_momentum(momentum, grad)?;
        match param {
            Param::Free(w) => Ok(Advance {
                param: Param::Free(w + &momentum * alpha),
                momentum,
                info: RetractInfo::default(),
                halvings: 0,
            }),
            Param::Point(p) => {
                let v = p.project_tangent(&momentum)?.scaled(alpha);
                let mut scale = 1.0;
                for halvings in 0..=MAX_RETRIES {
                    match self.map_point(p, &v.scaled(scale)) {
                        Ok((q, info)) => {
                            return Ok(Advance {
                                momentum,
                                param: Param::Point(q),
                                info,
                                halvings,
                            })
                        }
                        Err(Error::SingularStep(msg)) => {
                            log::debug!("singular step ({msg}); halving");
                            scale *= 0.5;
                        }
                        Err(e) => return Err(e),
                    }
                }
                Err(Error::SingularStep(format!(
                    "retraction still singular after {MAX_RETRIES} halvings"
                )))
            }
        }
    }

    fn commit(&mut self, i: usize, adv: &Advance) {
        self.stats.det_flips += u64::from(adv.info.det_flipped);
        self.stats.halvings += u64::from(adv.halvings);
        self.momentum[i] = adv.momentum.clone();
    }

    /// One update of a single kernel at the current `t`. Does not advance
    /// `t`; see [`RiemannianSgd::sweep`] or call [`RiemannianSgd::tick`].
    pub fn step(&mut self, id: KernelId, kernel: &KernelPoint, grad: &Mat) -> Result<KernelPoint> {
        let prev = self.momentum(id)?;
        let adv = self.advance(prev, &Param::Point(kernel.clone()), grad, self.learning_rate())?;
        self.commit(id.0, &adv);
        match adv.param {
            Param::Point(q) => Ok(q),
            Param::Free(_) => unreachable!(),
        }
    }

    /// Updates every parameter (index `i` uses kernel id `i`) and advances
    /// `t` once. Kernels are independent and updated under the configured
    /// [`Exec`]; nothing is modified unless every update succeeds.
    pub fn sweep(&mut self, params: &mut [Param], grads: &[Mat]) -> Result<()> {
        if params.len() != self.momentum.len() || grads.len() != params.len() {
            return Err(Error::Structure(format!(
                "sweep over {} params with {} gradients and {} momentum buffers",
                params.len(),
                grads.len(),
                self.momentum.len()
            )));
        }
        let alpha = self.learning_rate();
        let this = &*self;
        let advances = self.exec.map_range(params.len(), |i| {
            this.advance(&this.momentum[i], &params[i], &grads[i], alpha)
        });
        let advances = advances.into_iter().collect::<Result<Vec<_>>>()?;
        for (i, adv) in advances.into_iter().enumerate() {
            self.commit(i, &adv);
            params[i] = adv.param;
        }
        self.tick();
        Ok(())
    }

    /// Euclidean SGD baseline: `ω ← normalize(ω + α_t·μ)` with the same
    /// momentum rule, followed by the family's metric normalization instead
    /// of a tangent projection and retraction.
    pub fn step_renormalized(
        &mut self,
        id: KernelId,
        kernel: &KernelPoint,
        grad: &Mat,
    ) -> Result<KernelPoint> {
        let mu = self.next_momentum(self.momentum(id)?, grad)?;
        let alpha = self.learning_rate();
        let step = &mu * alpha;
        let next = if step.iter().all(|&x| x == 0.0) {
            kernel.clone()
        } else {
            kernel.spec().normalize(&(kernel.value() + step))?
        };
        self.momentum[id.0] = mu;
        Ok(next)
    }
}
