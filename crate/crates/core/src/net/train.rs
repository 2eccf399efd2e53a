//! Mini-batch training loop driving [`RiemannianSgd`] over a [`Network`].

use std::time::Instant;

use crate::error::Result;
use crate::net::{Batch, Mode, Network};
use crate::par::Exec;
use crate::sgd::{Hyperparams, Param, RiemannianSgd};

/// Supplies mini-batches for training and full passes for evaluation.
pub trait BatchSource {
    /// Shuffled training batches for `epoch`.
    fn epoch_batches(&self, epoch: usize) -> Result<Vec<Batch>>;
    /// Every sample once, in storage order.
    fn eval_batches(&self) -> Result<Vec<Batch>>;
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub hyper: Hyperparams,
    pub epochs: usize,
    /// Stop after the first epoch whose train accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub exec: Exec,
}

/// One optimizer sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub loss: f64,
    /// Mean Riemannian gradient norm over weight kernels (Euclidean norm
    /// for unconstrained kernels).
    pub grad_norm: f64,
    /// Largest constraint violation after the sweep.
    pub violation: f64,
    /// Mean Frobenius displacement of the weight kernels.
    pub step_len: f64,
    /// Seconds since training started. Not written to metric files.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    /// Evaluation-mode accuracy over the training set after each epoch.
    pub epoch_accuracy: Vec<f64>,
    pub det_flips: u64,
}

impl TrainReport {
    pub fn best_accuracy(&self) -> f64 {
        self.epoch_accuracy.iter().copied().fold(0.0, f64::max)
    }

    /// 1-based epoch at which accuracy first reached `target`.
    pub fn epochs_to(&self, target: f64) -> Option<usize> {
        self.epoch_accuracy.iter().position(|&a| a >= target).map(|i| i + 1)
    }

    pub fn max_violation(&self) -> f64 {
        self.records.iter().map(|r| r.violation).fold(0.0, f64::max)
    }
}

/// Accuracy of the network over `batches` in evaluation mode.
pub fn accuracy(net: &mut Network, batches: &[Batch]) -> Result<f64> {
    let mut correct = 0;
    let mut total = 0;
    for b in batches {
        correct += net.forward(b, Mode::Eval)?.correct(&b.labels);
        total += b.len();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

pub fn train(net: &mut Network, data: &dyn BatchSource, opts: &TrainOptions) -> Result<TrainReport> {
    let start = Instant::now();
    let mut opt = RiemannianSgd::for_params(opts.hyper, net.params())?.with_exec(opts.exec);
    let eval = data.eval_batches()?;
    let kernels: Vec<usize> = net
        .roles()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_kernel())
        .map(|(i, _)| i)
        .collect();
    let mut report = TrainReport::default();
    net.validate_constraints()?;

    for epoch in 0..opts.epochs {
        for batch in data.epoch_batches(epoch)? {
            let loss = net.forward(&batch, Mode::Train)?.loss;
            let grads = net.backward()?;
            let grad_norm = mean(kernels.iter().map(|&i| match &net.params()[i] {
                Param::Point(p) => p.project_tangent(&grads[i]).map(|t| t.norm()),
                Param::Free(_) => Ok(grads[i].norm()),
            }))?;
            let before: Vec<_> = kernels.iter().map(|&i| net.params()[i].value().clone()).collect();
            opt.sweep(net.params_mut(), &grads)?;
            let step_len = mean(
                kernels
                    .iter()
                    .zip(&before)
                    .map(|(&i, b)| Ok((net.params()[i].value() - b).norm())),
            )?;
            report.records.push(TrainRecord {
                iteration: opt.t() - 1,
                epoch,
                loss,
                grad_norm,
                violation: net.max_violation(),
                step_len,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
        let acc = accuracy(net, &eval)?;
        log::info!("epoch {epoch}: train accuracy {acc:.4}");
        report.epoch_accuracy.push(acc);
        if opts.target_accuracy.is_some_and(|t| acc >= t) {
            break;
        }
    }
    report.det_flips = opt.stats().det_flips;
    Ok(report)
}

fn mean(values: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
