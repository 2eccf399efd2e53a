//! Layer kernels over NCHW tensors. Forward passes and the input-gradient
//! halves of backward passes fan out over samples; weight gradients are
//! computed per sample and summed in sample order.

use serde::{Deserialize, Serialize};

use crate::manifold::Mat;
use crate::par::Exec;

/// Dense NCHW tensor stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Panics if `data.len()` does not match `shape`.
    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, h, w] = self.shape;
        self.data[((n * cs + c) * h + y) * w + x]
    }
}

/// Convolution geometry: `out = ⌊(in + 2·padding − kernel) / stride⌋ + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1,
            (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1,
        )
    }

    /// Input coordinate for output `o` and kernel offset `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < len)
    }
}

/// Valid cross-correlation. `kernels[d * C + c]` is the `A×B` slice
/// connecting input channel `c` to output channel `d`.
pub fn conv_forward(exec: Exec, g: &ConvGeom, x: &Tensor, kernels: &[&Mat], bias: &Mat) -> Tensor {
    let n = x.batch();
    let (oh, ow) = g.out_hw();
    let mut out = Tensor::zeros([n, g.out_channels, oh, ow]);
    let chunk = g.out_channels * oh * ow;
    exec.for_each_chunk_mut(out.data_mut(), chunk, |s, o| {
        let xs = x.sample(s);
        for d in 0..g.out_channels {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[(0, d)];
                    for c in 0..g.in_channels {
                        let k = kernels[d * g.in_channels + c];
                        let plane = &xs[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
                        for a in 0..g.kernel_h {
                            let Some(y) = g.src(i, a, g.in_h) else { continue };
                            for b in 0..g.kernel_w {
                                let Some(xx) = g.src(j, b, g.in_w) else { continue };
                                acc += k[(a, b)] * plane[y * g.in_w + xx];
                            }
                        }
                    }
                    o[(d * oh + i) * ow + j] = acc;
                }
            }
        }
    });
    out
}

pub struct ConvGrads {
    pub input: Tensor,
    /// Same layout as the forward `kernels`.
    pub kernels: Vec<Mat>,
    pub bias: Mat,
}

pub fn conv_backward(
    exec: Exec,
    g: &ConvGeom,
    x: &Tensor,
    kernels: &[&Mat],
    grad_out: &Tensor,
) -> ConvGrads {
    let n = x.batch();
    let (oh, ow) = g.out_hw();
    let (cin, cout) = (g.in_channels, g.out_channels);
    let (ka, kb) = (g.kernel_h, g.kernel_w);
    let plane = g.in_h * g.in_w;

    let mut dx = Tensor::zeros(x.shape());
    exec.for_each_chunk_mut(dx.data_mut(), cin * plane, |s, dxs| {
        let gs = grad_out.sample(s);
        for d in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let go = gs[(d * oh + i) * ow + j];
                    if go == 0.0 {
                        continue;
                    }
                    for c in 0..cin {
                        let k = kernels[d * cin + c];
                        for a in 0..ka {
                            let Some(y) = g.src(i, a, g.in_h) else { continue };
                            for b in 0..kb {
                                let Some(xx) = g.src(j, b, g.in_w) else { continue };
                                dxs[c * plane + y * g.in_w + xx] += k[(a, b)] * go;
                            }
                        }
                    }
                }
            }
        }
    });

    // Per-sample weight gradients, reduced in sample order.
    let per_sample = exec.map_range(n, |s| {
        let xs = x.sample(s);
        let gs = grad_out.sample(s);
        let mut dw = vec![0.0; cout * cin * ka * kb];
        let mut db = vec![0.0; cout];
        for d in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let go = gs[(d * oh + i) * ow + j];
                    db[d] += go;
                    for c in 0..cin {
                        let base = (d * cin + c) * ka * kb;
                        for a in 0..ka {
                            let Some(y) = g.src(i, a, g.in_h) else { continue };
                            for b in 0..kb {
                                let Some(xx) = g.src(j, b, g.in_w) else { continue };
                                dw[base + a * kb + b] += go * xs[c * plane + y * g.in_w + xx];
                            }
                        }
                    }
                }
            }
        }
        (dw, db)
    });
    let mut dw = vec![0.0; cout * cin * ka * kb];
    let mut db = vec![0.0; cout];
    for (w, b) in &per_sample {
        dw.iter_mut().zip(w).for_each(|(acc, v)| *acc += v);
        db.iter_mut().zip(b).for_each(|(acc, v)| *acc += v);
    }
    let kernels = dw
        .chunks(ka * kb)
        .map(|k| Mat::from_row_slice(ka, kb, k))
        .collect();
    ConvGrads {
        input: dx,
        kernels,
        bias: Mat::from_row_slice(1, cout, &db),
    }
}

/// `x` is `N×C` with `h = w = 1`; returns `N×D`.
pub fn dense_forward(x: &Tensor, weight: &Mat, bias: &Mat) -> Tensor {
    let [n, c, _, _] = x.shape();
    let xm = Mat::from_row_slice(n, c, x.data());
    let mut y = xm * weight;
    for mut row in y.row_iter_mut() {
        row += bias;
    }
    let d = weight.ncols();
    // nalgebra is column-major; emit row-major sample data.
    let data = (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| y[(i, j)]).collect();
    Tensor::from_vec([n, d, 1, 1], data)
}

/// Returns `(dx, dW, db)`.
pub fn dense_backward(x: &Tensor, weight: &Mat, grad_out: &Tensor) -> (Tensor, Mat, Mat) {
    let [n, c, _, _] = x.shape();
    let d = weight.ncols();
    let xm = Mat::from_row_slice(n, c, x.data());
    let gm = Mat::from_row_slice(n, d, grad_out.data());
    let dw = xm.transpose() * &gm;
    let db = Mat::from_fn(1, d, |_, j| gm.column(j).sum());
    let dxm = gm * weight.transpose();
    let data = (0..n).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| dxm[(i, j)]).collect();
    (Tensor::from_vec([n, c, 1, 1], data), dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            // ln(1 + eˣ) without overflow
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Whether the activation is smooth (C^∞).
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential factor for the running mean of mean-only batch norm.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel means over batch and spatial axes.
pub fn channel_means(x: &Tensor) -> Vec<f64> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut sums = vec![0.0; c];
    for s in 0..n {
        let xs = x.sample(s);
        for (ch, sum) in sums.iter_mut().enumerate() {
            *sum += xs[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
        }
    }
    let count = (n * hw) as f64;
    sums.into_iter().map(|s| s / count).collect()
}

/// Mean-only batch normalization: subtract the per-channel mean (batch mean
/// in training, `running_mean` in evaluation) and add a learnable shift.
/// Training mode also folds the batch mean into `running_mean` as
/// `running ← 0.9·running + 0.1·batch_mean`.
pub fn mean_only_bn(x: &Tensor, running_mean: &mut [f64], shift: &[f64], mode: Mode) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert_eq!(running_mean.len(), c);
    assert_eq!(shift.len(), c);
    let means = match mode {
        Mode::Train => {
            let m = channel_means(x);
            for (r, b) in running_mean.iter_mut().zip(&m) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            m
        }
        Mode::Eval => running_mean.to_vec(),
    };
    let hw = h * w;
    let mut out = x.clone();
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            for v in &mut out.data_mut()[off..off + hw] {
                *v += shift[ch] - means[ch];
            }
        }
    }
    out
}

/// Returns `(dx, dshift)`.
pub fn mean_only_bn_backward(grad_out: &Tensor, mode: Mode) -> (Tensor, Vec<f64>) {
    let [n, c, h, w] = grad_out.shape();
    let hw = h * w;
    let gmeans = channel_means(grad_out);
    let count = (n * hw) as f64;
    let dshift: Vec<f64> = gmeans.iter().map(|m| m * count).collect();
    let dx = match mode {
        Mode::Eval => grad_out.clone(),
        Mode::Train => {
            let mut dx = grad_out.clone();
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    for v in &mut dx.data_mut()[off..off + hw] {
                        *v -= gmeans[ch];
                    }
                }
            }
            dx
        }
    };
    (dx, dshift)
}

/// Row-wise softmax of `N×K` logits.
pub fn softmax(logits: &Tensor) -> Vec<Vec<f64>> {
    let k = logits.sample_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Mean cross-entropy computed from logits via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.sample_len();
    let total: f64 = logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}
