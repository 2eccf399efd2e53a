//! A small differentiable network whose convolution and dense kernels can be
//! constrained to kernel submanifolds.
//!
//! Each `(c, d)` slice of a convolution weight tensor, an `A×B` matrix, is
//! its own manifold point. A dense layer's `C×D` weight matrix is a single
//! point. Biases and batch-norm shifts stay Euclidean.

mod ops;
pub mod train;

pub use ops::{
    channel_means, conv_backward, conv_forward, cross_entropy, dense_backward, dense_forward,
    mean_only_bn, mean_only_bn_backward, softmax, Activation, ConvGeom, Mode, Tensor, BN_MOMENTUM,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{Family, ManifoldSpec, Mat};
use crate::par::Exec;
use crate::sgd::Param;

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        kernel_height: usize,
        kernel_width: usize,
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        manifold: Option<Family>,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        manifold: Option<Family>,
    },
    Activation {
        function: Activation,
    },
    MeanOnlyBn,
    Flatten,
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::MeanOnlyBn => "mean_only_bn",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Layer graph plus input geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Two 3×3 convolutions with tanh, then a dense classifier, for
    /// single-channel `side×side` inputs.
    pub fn two_conv(side: usize, channels: usize, num_classes: usize) -> Self {
        let after = (side + 2 - 3) / 2 + 1;
        NetworkSpec {
            input_channels: 1,
            input_height: side,
            input_width: side,
            num_classes,
            layers: vec![
                LayerSpec::Conv2d {
                    kernel_height: 3,
                    kernel_width: 3,
                    in_channels: 1,
                    out_channels: channels,
                    stride: 1,
                    padding: 1,
                    manifold: None,
                },
                LayerSpec::Activation {
                    function: Activation::Tanh,
                },
                LayerSpec::Conv2d {
                    kernel_height: 3,
                    kernel_width: 3,
                    in_channels: channels,
                    out_channels: channels,
                    stride: 2,
                    padding: 1,
                    manifold: None,
                },
                LayerSpec::Activation {
                    function: Activation::Tanh,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: channels * after * after,
                    out_dim: num_classes,
                    manifold: None,
                },
            ],
        }
    }

    /// Checks that shapes flow through the graph and end in `num_classes`
    /// logits; returns the per-layer input shapes `(c, h, w)`.
    pub fn validate(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (shapes, shape) = self.flow()?;
        if shape != (self.num_classes, 1, 1) {
            return Err(Error::config(
                "network.layers",
                format!(
                    "network ends in shape {shape:?}, expected ({}, 1, 1) logits",
                    self.num_classes
                ),
            ));
        }
        Ok(shapes)
    }

    /// Shape `(c, h, w)` after the last layer, without the logits check.
    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        Ok(self.flow()?.1)
    }

    #[allow(clippy::type_complexity)]
    fn flow(&self) -> Result<(Vec<(usize, usize, usize)>, (usize, usize, usize))> {
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::config("network.input", "input dimensions must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("network.num_classes", "need at least two classes"));
        }
        let mut shape = (self.input_channels, self.input_height, self.input_width);
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let key = format!("network.layers[{i}]");
            shapes.push(shape);
            let (c, h, w) = shape;
            shape = match *layer {
                LayerSpec::Conv2d {
                    kernel_height,
                    kernel_width,
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                    ..
                } => {
                    if in_channels != c {
                        return Err(Error::config(
                            key,
                            format!("expects {in_channels} input channels, receives {c}"),
                        ));
                    }
                    if kernel_height == 0 || kernel_width == 0 || out_channels == 0 || stride == 0 {
                        return Err(Error::config(key, "kernel, channels and stride must be positive"));
                    }
                    if h + 2 * padding < kernel_height || w + 2 * padding < kernel_width {
                        return Err(Error::config(key, "kernel larger than padded input"));
                    }
                    let g = ConvGeom {
                        in_channels,
                        out_channels,
                        kernel_h: kernel_height,
                        kernel_w: kernel_width,
                        stride,
                        padding,
                        in_h: h,
                        in_w: w,
                    };
                    let (oh, ow) = g.out_hw();
                    (out_channels, oh, ow)
                }
                LayerSpec::Dense { in_dim, out_dim, .. } => {
                    if h != 1 || w != 1 {
                        return Err(Error::config(key, "dense layer needs a flattened input"));
                    }
                    if in_dim != c {
                        return Err(Error::config(
                            key,
                            format!("expects {in_dim} inputs, receives {c}"),
                        ));
                    }
                    if out_dim == 0 {
                        return Err(Error::config(key, "out_dim must be positive"));
                    }
                    (out_dim, 1, 1)
                }
                LayerSpec::Flatten => (c * h * w, 1, 1),
                LayerSpec::Activation { .. } | LayerSpec::MeanOnlyBn => shape,
            };
        }
        Ok((shapes, shape))
    }
}

/// Which family (or none) each kind of weight layer is constrained to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifoldPolicy {
    pub conv: Option<Family>,
    pub dense: Option<Family>,
}

impl ManifoldPolicy {
    pub fn uniform(family: Option<Family>) -> Self {
        ManifoldPolicy {
            conv: family,
            dense: family,
        }
    }
}

/// A batch of `N×C×H×W` inputs with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let b = Batch { inputs, labels };
        if b.labels.is_empty() || b.inputs.batch() != b.labels.len() {
            return Err(Error::Structure(format!(
                "batch has {} inputs and {} labels",
                b.inputs.batch(),
                b.labels.len()
            )));
        }
        if !b.inputs.is_finite() {
            return Err(Error::Numeric("non-finite batch input".into()));
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        geom: ConvGeom,
        /// Parameter index of kernel `(c=0, d=0)`; slice `(c, d)` is at
        /// `first + d·C + c`.
        first: usize,
        bias: usize,
    },
    Dense {
        kernel: usize,
        bias: usize,
        /// Stored as `D×C` (transpose of the logical weight).
        transposed: bool,
    },
    Act(Activation),
    Bn {
        shift: usize,
        running_mean: Vec<f64>,
    },
    Flatten {
        input: [usize; 4],
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvKernel { layer: usize, in_channel: usize, out_channel: usize },
    DenseKernel { layer: usize },
    Bias { layer: usize },
    BnShift { layer: usize },
}

impl ParamRole {
    /// Weight kernels, as opposed to biases and shifts.
    pub fn is_kernel(self) -> bool {
        matches!(self, ParamRole::ConvKernel { .. } | ParamRole::DenseKernel { .. })
    }
}

struct Cache {
    mode: Mode,
    /// Input of every layer.
    inputs: Vec<Tensor>,
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

/// Result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub loss: f64,
    /// Softmax probabilities, one row per sample.
    pub probs: Vec<Vec<f64>>,
}

impl Forward {
    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                    .0
            })
            .collect()
    }

    pub fn correct(&self, labels: &[usize]) -> usize {
        self.predictions().iter().zip(labels).filter(|(p, y)| p == y).count()
    }
}

pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    params: Vec<Param>,
    roles: Vec<ParamRole>,
    cache: Option<Cache>,
    exec: Exec,
}

fn mix_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn gaussian(rows: usize, cols: usize, std: f64, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * std
    })
}

impl Network {
    /// Builds the network; kernels get the manifold named in their layer
    /// spec (or stay Euclidean with `N(0, 1/fan_in)` entries).
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut params = Vec::new();
        let mut roles = Vec::new();
        for (li, (layer, &(c, h, w))) in spec.layers.iter().zip(&shapes).enumerate() {
            layers.push(match *layer {
                LayerSpec::Conv2d {
                    kernel_height,
                    kernel_width,
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                    ..
                } => {
                    let first = params.len();
                    for d in 0..out_channels {
                        for ci in 0..in_channels {
                            params.push(Param::Free(Mat::zeros(kernel_height, kernel_width)));
                            roles.push(ParamRole::ConvKernel {
                                layer: li,
                                in_channel: ci,
                                out_channel: d,
                            });
                        }
                    }
                    params.push(Param::Free(Mat::zeros(1, out_channels)));
                    roles.push(ParamRole::Bias { layer: li });
                    Layer::Conv {
                        geom: ConvGeom {
                            in_channels,
                            out_channels,
                            kernel_h: kernel_height,
                            kernel_w: kernel_width,
                            stride,
                            padding,
                            in_h: h,
                            in_w: w,
                        },
                        first,
                        bias: params.len() - 1,
                    }
                }
                LayerSpec::Dense { in_dim, out_dim, .. } => {
                    params.push(Param::Free(Mat::zeros(in_dim, out_dim)));
                    roles.push(ParamRole::DenseKernel { layer: li });
                    params.push(Param::Free(Mat::zeros(1, out_dim)));
                    roles.push(ParamRole::Bias { layer: li });
                    Layer::Dense {
                        kernel: params.len() - 2,
                        bias: params.len() - 1,
                        transposed: false,
                    }
                }
                LayerSpec::Activation { function } => {
                    if !function.is_smooth() {
                        log::warn!(
                            "layer {li}: {function:?} is not smooth; convergence guarantees for smooth losses do not apply"
                        );
                    }
                    Layer::Act(function)
                }
                LayerSpec::MeanOnlyBn => {
                    params.push(Param::Free(Mat::zeros(1, c)));
                    roles.push(ParamRole::BnShift { layer: li });
                    Layer::Bn {
                        shift: params.len() - 1,
                        running_mean: vec![0.0; c],
                    }
                }
                LayerSpec::Flatten => Layer::Flatten { input: [0, c, h, w] },
            });
        }
        let mut net = Network {
            spec,
            layers,
            params,
            roles,
            cache: None,
            exec: Exec::default(),
        };
        net.initialize(seed)?;
        Ok(net)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Mutable access for optimizers; shapes must be preserved.
    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    /// Re-assign manifolds by layer kind and redraw every kernel so that all
    /// constraints hold. Biases and shifts are reset to zero.
    pub fn assign_manifolds(&mut self, policy: ManifoldPolicy, seed: u64) -> Result<()> {
        for layer in &mut self.spec.layers {
            match layer {
                LayerSpec::Conv2d { manifold, .. } => *manifold = policy.conv,
                LayerSpec::Dense { manifold, .. } => *manifold = policy.dense,
                _ => {}
            }
        }
        self.initialize(seed)
    }

    fn initialize(&mut self, seed: u64) -> Result<()> {
        for (li, (layer, spec)) in self.layers.iter_mut().zip(&self.spec.layers).enumerate() {
            let key = format!("network.layers[{li}].manifold");
            match (layer, spec) {
                (
                    Layer::Conv { geom, first, bias },
                    LayerSpec::Conv2d { manifold, .. },
                ) => {
                    let count = geom.in_channels * geom.out_channels;
                    let fan_in = (geom.in_channels * geom.kernel_h * geom.kernel_w) as f64;
                    let mspec = manifold
                        .map(|f| ManifoldSpec::new(f, geom.kernel_h, geom.kernel_w))
                        .transpose()
                        .map_err(|e| Error::config(key.clone(), e.to_string()))?;
                    for k in *first..*first + count {
                        let s = mix_seed(seed, k);
                        self.params[k] = match mspec {
                            Some(ms) => Param::Point(ms.random_point(s)),
                            None => Param::Free(gaussian(geom.kernel_h, geom.kernel_w, fan_in.sqrt().recip(), s)),
                        };
                    }
                    self.params[*bias] = Param::Free(Mat::zeros(1, geom.out_channels));
                }
                (
                    Layer::Dense {
                        kernel,
                        bias,
                        transposed,
                    },
                    LayerSpec::Dense {
                        in_dim,
                        out_dim,
                        manifold,
                    },
                ) => {
                    let s = mix_seed(seed, *kernel);
                    *transposed = false;
                    self.params[*kernel] = match manifold {
                        Some(f) => {
                            // Stiefel needs rows >= cols; store Wᵀ when C < D.
                            let (r, c) = if *f == Family::Stiefel && in_dim < out_dim {
                                log::info!(
                                    "layer {li}: {in_dim}x{out_dim} dense kernel stored transposed for the stiefel constraint"
                                );
                                *transposed = true;
                                (*out_dim, *in_dim)
                            } else {
                                (*in_dim, *out_dim)
                            };
                            let ms = ManifoldSpec::new(*f, r, c)
                                .map_err(|e| Error::config(key.clone(), e.to_string()))?;
                            Param::Point(ms.random_point(s))
                        }
                        None => Param::Free(gaussian(*in_dim, *out_dim, (*in_dim as f64).sqrt().recip(), s)),
                    };
                    self.params[*bias] = Param::Free(Mat::zeros(1, *out_dim));
                }
                (Layer::Bn { shift, running_mean }, _) => {
                    running_mean.iter_mut().for_each(|v| *v = 0.0);
                    let c = running_mean.len();
                    self.params[*shift] = Param::Free(Mat::zeros(1, c));
                }
                _ => {}
            }
        }
        self.cache = None;
        Ok(())
    }

    /// Largest constraint violation over constrained kernels.
    pub fn max_violation(&self) -> f64 {
        self.params.iter().map(Param::violation).fold(0.0, f64::max)
    }

    pub fn validate_constraints(&self) -> Result<()> {
        for p in self.params.iter().filter_map(Param::point) {
            p.ensure_valid()?;
        }
        Ok(())
    }

    fn dense_weight(&self, kernel: usize, transposed: bool) -> Mat {
        let w = self.params[kernel].value();
        if transposed {
            w.transpose()
        } else {
            w.clone()
        }
    }

    /// Mean softmax cross-entropy of the batch; caches activations for
    /// [`Network::backward`]. Training mode updates batch-norm running means.
    pub fn forward(&mut self, batch: &Batch, mode: Mode) -> Result<Forward> {
        let [_, c, h, w] = batch.inputs.shape();
        if (c, h, w) != (self.spec.input_channels, self.spec.input_height, self.spec.input_width) {
            return Err(Error::Structure(format!(
                "batch samples are {c}x{h}x{w}, network expects {}x{}x{}",
                self.spec.input_channels, self.spec.input_height, self.spec.input_width
            )));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= self.spec.num_classes) {
            return Err(Error::Structure(format!(
                "label {bad} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        self.cache = None;
        let exec = self.exec;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = batch.inputs.clone();
        for li in 0..self.layers.len() {
            let y = match &mut self.layers[li] {
                Layer::Conv { geom, first, bias } => {
                    let n = geom.in_channels * geom.out_channels;
                    let ks: Vec<&Mat> = self.params[*first..*first + n].iter().map(Param::value).collect();
                    conv_forward(exec, geom, &x, &ks, self.params[*bias].value())
                }
                Layer::Dense {
                    kernel,
                    bias,
                    transposed,
                } => {
                    let (k, b, t) = (*kernel, *bias, *transposed);
                    let wgt = self.dense_weight(k, t);
                    dense_forward(&x, &wgt, self.params[b].value())
                }
                Layer::Act(f) => {
                    let f = *f;
                    let mut y = x.clone();
                    y.data_mut().iter_mut().for_each(|v| *v = f.apply(*v));
                    y
                }
                Layer::Bn { shift, running_mean } => {
                    let s: Vec<f64> = self.params[*shift].value().iter().copied().collect();
                    mean_only_bn(&x, running_mean, &s, mode)
                }
                Layer::Flatten { input } => {
                    *input = x.shape();
                    let [n, c, h, w] = x.shape();
                    x.clone().reshape([n, c * h * w, 1, 1])
                }
            };
            if !y.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activation after layer {li} ({})",
                    self.spec.layers[li].kind()
                )));
            }
            inputs.push(std::mem::replace(&mut x, y));
        }
        let loss = cross_entropy(&x, &batch.labels);
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let probs = softmax(&x);
        self.cache = Some(Cache {
            mode,
            inputs,
            probs: probs.clone(),
            labels: batch.labels.clone(),
        });
        Ok(Forward { loss, probs })
    }

    /// Reverse-mode gradients of the cached batch loss, one per parameter
    /// (same order and shape as [`Network::params`]).
    pub fn backward(&self) -> Result<Vec<Mat>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let n = cache.labels.len();
        let k = self.spec.num_classes;
        let mut g = Tensor::zeros([n, k, 1, 1]);
        for (s, (row, &y)) in cache.probs.iter().zip(&cache.labels).enumerate() {
            for (j, &p) in row.iter().enumerate() {
                let onehot = if j == y { 1.0 } else { 0.0 };
                g.data_mut()[s * k + j] = (p - onehot) / n as f64;
            }
        }
        let mut grads: Vec<Mat> = self
            .params
            .iter()
            .map(|p| Mat::zeros(p.value().nrows(), p.value().ncols()))
            .collect();
        for li in (0..self.layers.len()).rev() {
            let x = &cache.inputs[li];
            g = match &self.layers[li] {
                Layer::Conv { geom, first, bias } => {
                    let cnt = geom.in_channels * geom.out_channels;
                    let ks: Vec<&Mat> = self.params[*first..*first + cnt].iter().map(Param::value).collect();
                    let cg = conv_backward(self.exec, geom, x, &ks, &g);
                    for (i, dk) in cg.kernels.into_iter().enumerate() {
                        grads[first + i] = dk;
                    }
                    grads[*bias] = cg.bias;
                    cg.input
                }
                Layer::Dense {
                    kernel,
                    bias,
                    transposed,
                } => {
                    let wgt = self.dense_weight(*kernel, *transposed);
                    let (dx, dw, db) = dense_backward(x, &wgt, &g);
                    grads[*kernel] = if *transposed { dw.transpose() } else { dw };
                    grads[*bias] = db;
                    dx
                }
                Layer::Act(f) => {
                    let mut dx = g;
                    dx.data_mut()
                        .iter_mut()
                        .zip(x.data())
                        .for_each(|(d, &xi)| *d *= f.derivative(xi));
                    dx
                }
                Layer::Bn { shift, .. } => {
                    let (dx, ds) = mean_only_bn_backward(&g, cache.mode);
                    grads[*shift] = Mat::from_row_slice(1, ds.len(), &ds);
                    dx
                }
                Layer::Flatten { input } => g.reshape([n, input[1], input[2], input[3]]),
            };
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_dense() -> NetworkSpec {
        NetworkSpec {
            input_channels: 2,
            input_height: 1,
            input_width: 1,
            num_classes: 2,
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense {
                in_dim: 2,
                out_dim: 2,
                manifold: None,
            }],
        }
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut net = Network::new(tiny_dense(), 0).unwrap();
        net.params_mut()[0] = Param::Free(Mat::identity(2, 2));
        let batch = Batch::new(Tensor::from_vec([1, 2, 1, 1], vec![0.0, 0.0]), vec![1]).unwrap();
        let out = net.forward(&batch, Mode::Train).unwrap();
        assert_abs_diff_eq!(out.loss, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let net = Network::new(tiny_dense(), 0).unwrap();
        assert!(matches!(net.backward(), Err(Error::State(_))));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let spec = NetworkSpec::two_conv(6, 2, 3);
        let mut net = Network::new(spec, 4).unwrap();
        let x: Vec<f64> = (0..72).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let b1 = Batch::new(Tensor::from_vec([2, 1, 6, 6], x.clone()), vec![0, 2]).unwrap();
        let mut xx = x.clone();
        xx.extend(&x);
        let b2 = Batch::new(Tensor::from_vec([4, 1, 6, 6], xx), vec![0, 2, 0, 2]).unwrap();
        net.forward(&b1, Mode::Train).unwrap();
        let g1 = net.backward().unwrap();
        net.forward(&b2, Mode::Train).unwrap();
        let g2 = net.backward().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        // Inputs all zero: logits equal the bias. With the bias at log-priors
        // of a balanced batch the loss sits at its global minimum.
        let mut net = Network::new(tiny_dense(), 0).unwrap();
        let batch = Batch::new(Tensor::zeros([4, 2, 1, 1]), vec![0, 1, 0, 1]).unwrap();
        net.forward(&batch, Mode::Train).unwrap();
        let grads = net.backward().unwrap();
        let norm: f64 = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
        assert!(norm <= 1e-10);
    }

    #[test]
    fn manifold_policies() {
        let spec = NetworkSpec::two_conv(8, 4, 2);
        let mut net = Network::new(spec, 1).unwrap();
        net.assign_manifolds(ManifoldPolicy::uniform(Some(Family::Sphere)), 2).unwrap();
        for (p, r) in net.params().iter().zip(net.roles()) {
            if r.is_kernel() {
                assert_abs_diff_eq!(p.value().norm(), 1.0, epsilon = 1e-12);
            } else {
                assert!(p.point().is_none());
            }
        }

        net.assign_manifolds(
            ManifoldPolicy {
                conv: Some(Family::Stiefel),
                dense: None,
            },
            2,
        )
        .unwrap();
        for (p, r) in net.params().iter().zip(net.roles()) {
            if let ParamRole::ConvKernel { .. } = r {
                let k = p.point().unwrap();
                assert_abs_diff_eq!(k.value().transpose() * k.value(), Mat::identity(3, 3), epsilon = 1e-12);
            }
        }
        assert!(net.max_violation() <= 1e-12);

        net.assign_manifolds(ManifoldPolicy::default(), 2).unwrap();
        assert!(net.params().iter().all(|p| p.point().is_none()));
    }

    #[test]
    fn incompatible_family_is_a_config_error() {
        let spec = NetworkSpec {
            input_channels: 1,
            input_height: 4,
            input_width: 4,
            num_classes: 2,
            layers: vec![
                LayerSpec::Conv2d {
                    kernel_height: 2,
                    kernel_width: 3,
                    in_channels: 1,
                    out_channels: 1,
                    stride: 1,
                    padding: 0,
                    manifold: None,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 6,
                    out_dim: 2,
                    manifold: None,
                },
            ],
        };
        let mut net = Network::new(spec, 0).unwrap();
        // 2x3 kernels cannot be stiefel (rows < cols)
        let err = net
            .assign_manifolds(
                ManifoldPolicy {
                    conv: Some(Family::Stiefel),
                    dense: None,
                },
                0,
            )
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "network.layers[0].manifold"));
    }

    #[test]
    fn dense_stiefel_is_transposed_when_wide() {
        let spec = NetworkSpec {
            input_channels: 2,
            input_height: 1,
            input_width: 1,
            num_classes: 3,
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense {
                in_dim: 2,
                out_dim: 3,
                manifold: Some(Family::Stiefel),
            }],
        };
        let net = Network::new(spec, 0).unwrap();
        let k = net.params()[0].point().unwrap();
        assert_eq!((k.spec().rows(), k.spec().cols()), (3, 2));
    }

    #[test]
    fn shape_errors() {
        let mut spec = tiny_dense();
        spec.num_classes = 3;
        assert!(Network::new(spec, 0).is_err());
        let mut net = Network::new(tiny_dense(), 0).unwrap();
        let wrong = Batch::new(Tensor::zeros([1, 3, 1, 1]), vec![0]).unwrap();
        assert!(net.forward(&wrong, Mode::Train).is_err());
        let bad_label = Batch::new(Tensor::zeros([1, 2, 1, 1]), vec![5]).unwrap();
        assert!(net.forward(&bad_label, Mode::Train).is_err());
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let mut net = Network::new(tiny_dense(), 0).unwrap();
        net.params_mut()[0] = Param::Free(Mat::from_element(2, 2, f64::MAX));
        let batch = Batch::new(Tensor::from_vec([1, 2, 1, 1], vec![10.0, 10.0]), vec![0]).unwrap();
        match net.forward(&batch, Mode::Train) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("layer 1"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
