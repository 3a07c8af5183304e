//! Minimal CPU training plumbing: parameter tensors with gradients, Adam,
//! and hand-written forward/backward passes for the handful of layer types
//! the nets need (strided 3D convolution via im2col, instance norm, linear,
//! silu, sigmoid, nearest-neighbor upsampling).

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A named tensor with an accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(name: &str, value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { name: name.to_string(), value, grad }
    }

    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Param::new(name, ArrayD::zeros(IxDyn(shape)))
    }

    /// He-normal initialization.
    pub fn he(name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n).map(|_| normal.sample(rng) as f32).collect();
        Param::new(name, ArrayD::from_shape_vec(IxDyn(shape), values).unwrap())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn count(&self) -> usize {
        self.value.len()
    }
}

/// Adam with bias correction. One instance per network component; state is
/// allocated on first step and keyed by parameter order, which is fixed.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    pub fn step(&mut self, params: &mut [&mut Param], lr: f32) {
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(ArrayD::zeros(p.value.raw_dim()));
                self.v.push(ArrayD::zeros(p.value.raw_dim()));
            }
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed under optimizer");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Unfold `x` (C, D, H, W) into a (OD*OH*OW, C*k^3) patch matrix.
pub fn im2col(
    x: &Array4<f32>,
    k: usize,
    stride: usize,
    pad: isize,
    out_sp: (usize, usize, usize),
) -> Array2<f32> {
    let (c, d, h, w) = x.dim();
    let (od, oh, ow) = out_sp;
    let cols = c * k * k * k;
    let mut col = Array2::<f32>::zeros((od * oh * ow, cols));
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    for zo in 0..od {
        for yo in 0..oh {
            for xo in 0..ow {
                let row = (zo * oh + yo) * ow + xo;
                let base = row * cols;
                let iz0 = (zo * stride) as isize - pad;
                let iy0 = (yo * stride) as isize - pad;
                let ix0 = (xo * stride) as isize - pad;
                let mut idx = base;
                for ci in 0..c {
                    let coff = ci * d * h * w;
                    for kz in 0..k {
                        let iz = iz0 + kz as isize;
                        if iz < 0 || iz >= d as isize {
                            idx += k * k;
                            continue;
                        }
                        let zoff = coff + iz as usize * h * w;
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                idx += k;
                                continue;
                            }
                            let yoff = zoff + iy as usize * w;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix >= 0 && ix < w as isize {
                                    cs[idx] = xs[yoff + ix as usize];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-accumulate a patch-matrix gradient back onto the input grid.
pub fn col2im(
    grad_col: &Array2<f32>,
    in_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: isize,
    out_sp: (usize, usize, usize),
) -> Array4<f32> {
    let (c, d, h, w) = in_shape;
    let (od, oh, ow) = out_sp;
    let cols = c * k * k * k;
    let mut gx = Array4::<f32>::zeros(in_shape);
    let gs = gx.as_slice_mut().expect("standard layout");
    let gc = grad_col.as_slice().expect("standard layout");
    for zo in 0..od {
        for yo in 0..oh {
            for xo in 0..ow {
                let row = (zo * oh + yo) * ow + xo;
                let base = row * cols;
                let iz0 = (zo * stride) as isize - pad;
                let iy0 = (yo * stride) as isize - pad;
                let ix0 = (xo * stride) as isize - pad;
                let mut idx = base;
                for ci in 0..c {
                    let coff = ci * d * h * w;
                    for kz in 0..k {
                        let iz = iz0 + kz as isize;
                        if iz < 0 || iz >= d as isize {
                            idx += k * k;
                            continue;
                        }
                        let zoff = coff + iz as usize * h * w;
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                idx += k;
                                continue;
                            }
                            let yoff = zoff + iy as usize * w;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix >= 0 && ix < w as isize {
                                    gs[yoff + ix as usize] += gc[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// 3D convolution. Weights are stored pre-flattened as (C_in*k^3, C_out) so
/// the forward pass is a single matrix product against the patch matrix.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: Param,
    pub b: Param,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv3dCache {
    col: Array2<f32>,
    in_shape: (usize, usize, usize, usize),
    out_sp: (usize, usize, usize),
}

impl Conv3d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k * k * k;
        Conv3d {
            w: Param::he(&format!("{name}.w"), &[fan_in, cout], fan_in, rng),
            b: Param::zeros(&format!("{name}.b"), &[cout]),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn out_spatial(&self, sp: (usize, usize, usize)) -> (usize, usize, usize) {
        (
            conv_out_len(sp.0, self.k, self.stride, self.pad),
            conv_out_len(sp.1, self.k, self.stride, self.pad),
            conv_out_len(sp.2, self.k, self.stride, self.pad),
        )
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, Conv3dCache) {
        let (c, d, h, w) = x.dim();
        assert_eq!(c, self.cin);
        let out_sp = self.out_spatial((d, h, w));
        let col = im2col(x, self.k, self.stride, self.pad as isize, out_sp);
        let w2 = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out2 = col.dot(&w2); // (spatial, cout)
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        out2 += &b;
        // (spatial, cout) -> (cout, od, oh, ow)
        let out = out2
            .t()
            .as_standard_layout()
            .to_owned()
            .into_shape((self.cout, out_sp.0, out_sp.1, out_sp.2))
            .unwrap();
        (out, Conv3dCache { col, in_shape: (c, d, h, w), out_sp })
    }

    /// Accumulates weight/bias grads and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv3dCache, grad_out: &Array4<f32>) -> Array4<f32> {
        let (od, oh, ow) = cache.out_sp;
        let sp = od * oh * ow;
        let g2 = grad_out
            .view()
            .into_shape((self.cout, sp))
            .unwrap()
            .t()
            .as_standard_layout()
            .to_owned(); // (spatial, cout)
        {
            let gw = cache.col.t().dot(&g2);
            let mut wg = self.w.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            wg += &gw;
            let gb = g2.sum_axis(ndarray::Axis(0));
            let mut bg = self.b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            bg += &gb;
        }
        let w2 = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        // dot may return an F-order array when a dimension is 1
        let grad_col = g2.dot(&w2.t()).as_standard_layout().to_owned();
        col2im(&grad_col, cache.in_shape, self.k, self.stride, self.pad as isize, cache.out_sp)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Per-channel instance normalization with learnable gain and bias.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub g: Param,
    pub b: Param,
    pub eps: f32,
}

pub struct InstanceNormCache {
    xhat: Array4<f32>,
    inv_std: Vec<f32>,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        InstanceNorm {
            g: Param::new(&format!("{name}.g"), ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            b: Param::zeros(&format!("{name}.b"), &[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, InstanceNormCache) {
        let (c, d, h, w) = x.dim();
        let n = (d * h * w) as f64;
        let mut out = Array4::<f32>::zeros((c, d, h, w));
        let mut xhat = Array4::<f32>::zeros((c, d, h, w));
        let mut inv_std = Vec::with_capacity(c);
        if d * h * w == 1 {
            // single voxel per channel: centering would zero the signal, so
            // fall back to a plain per-channel affine map
            for ci in 0..c {
                let xv = x[[ci, 0, 0, 0]];
                xhat[[ci, 0, 0, 0]] = xv;
                out[[ci, 0, 0, 0]] = self.g.value[ci] * xv + self.b.value[ci];
                inv_std.push(f32::NAN); // marks the affine path for backward
            }
            return (out, InstanceNormCache { xhat, inv_std });
        }
        for ci in 0..c {
            let xc = x.index_axis(ndarray::Axis(0), ci);
            let mean = xc.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = xc.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let istd = 1.0 / (var + self.eps as f64).sqrt();
            inv_std.push(istd as f32);
            let gain = self.g.value[ci];
            let bias = self.b.value[ci];
            let mut oc = out.index_axis_mut(ndarray::Axis(0), ci);
            let mut hc = xhat.index_axis_mut(ndarray::Axis(0), ci);
            ndarray::Zip::from(&mut oc).and(&mut hc).and(&xc).for_each(|o, hv, &xv| {
                let xh = ((xv as f64 - mean) * istd) as f32;
                *hv = xh;
                *o = gain * xh + bias;
            });
        }
        (out, InstanceNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &InstanceNormCache, grad_out: &Array4<f32>) -> Array4<f32> {
        let (c, d, h, w) = grad_out.dim();
        let n = (d * h * w) as f32;
        let mut gx = Array4::<f32>::zeros((c, d, h, w));
        if d * h * w == 1 {
            for ci in 0..c {
                let go = grad_out[[ci, 0, 0, 0]];
                let xv = cache.xhat[[ci, 0, 0, 0]];
                self.b.grad[ci] += go;
                self.g.grad[ci] += go * xv;
                gx[[ci, 0, 0, 0]] = self.g.value[ci] * go;
            }
            return gx;
        }
        for ci in 0..c {
            let go = grad_out.index_axis(ndarray::Axis(0), ci);
            let xh = cache.xhat.index_axis(ndarray::Axis(0), ci);
            let gain = self.g.value[ci];
            let istd = cache.inv_std[ci];
            let sum_g: f32 = go.iter().sum();
            let sum_gx: f32 = go.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            self.b.grad[ci] += sum_g;
            self.g.grad[ci] += sum_gx;
            let mean_g = sum_g / n;
            let mean_gx = sum_gx / n;
            let mut gc = gx.index_axis_mut(ndarray::Axis(0), ci);
            ndarray::Zip::from(&mut gc).and(&go).and(&xh).for_each(|g, &gov, &xhv| {
                *g = gain * istd * (gov - mean_g - xhv * mean_gx);
            });
        }
        gx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.g, &mut self.b]
    }
}

/// Fully connected layer, weights (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

pub struct LinearCache {
    input: Array1<f32>,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Param::he(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng),
            b: Param::zeros(&format!("{name}.b"), &[fan_out]),
        }
    }

    pub fn forward(&self, x: &Array1<f32>) -> (Array1<f32>, LinearCache) {
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = x.dot(&w) + &b;
        (out, LinearCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, grad_out: &Array1<f32>) -> Array1<f32> {
        {
            let mut wg = self.w.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            for (i, &xi) in cache.input.iter().enumerate() {
                if xi != 0.0 {
                    let mut row = wg.row_mut(i);
                    row.scaled_add(xi, grad_out);
                }
            }
            let mut bg = self.b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            bg += grad_out;
        }
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        w.dot(grad_out)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu4(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v * sigmoid_scalar(v))
}

pub fn silu4_backward(x: &Array4<f32>, grad_out: &Array4<f32>) -> Array4<f32> {
    let mut g = grad_out.clone();
    ndarray::Zip::from(&mut g).and(x).for_each(|gv, &xv| {
        let s = sigmoid_scalar(xv);
        *gv *= s + xv * s * (1.0 - s);
    });
    g
}

pub fn silu1(x: &Array1<f32>) -> Array1<f32> {
    x.mapv(|v| v * sigmoid_scalar(v))
}

pub fn silu1_backward(x: &Array1<f32>, grad_out: &Array1<f32>) -> Array1<f32> {
    let mut g = grad_out.clone();
    ndarray::Zip::from(&mut g).and(x).for_each(|gv, &xv| {
        let s = sigmoid_scalar(xv);
        *gv *= s + xv * s * (1.0 - s);
    });
    g
}

pub fn sigmoid4(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(sigmoid_scalar)
}

/// Backward through sigmoid given the forward *output*.
pub fn sigmoid4_backward(y: &Array4<f32>, grad_out: &Array4<f32>) -> Array4<f32> {
    let mut g = grad_out.clone();
    ndarray::Zip::from(&mut g).and(y).for_each(|gv, &yv| {
        *gv *= yv * (1.0 - yv);
    });
    g
}

/// Nearest-neighbor upsampling by 2 along every spatial axis.
pub fn upsample2(x: &Array4<f32>) -> Array4<f32> {
    let (c, d, h, w) = x.dim();
    let mut out = Array4::<f32>::zeros((c, 2 * d, 2 * h, 2 * w));
    for ci in 0..c {
        for i in 0..2 * d {
            for j in 0..2 * h {
                for k in 0..2 * w {
                    out[[ci, i, j, k]] = x[[ci, i / 2, j / 2, k / 2]];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Array4<f32>, in_dim: (usize, usize, usize, usize)) -> Array4<f32> {
    let mut gx = Array4::<f32>::zeros(in_dim);
    let (c, d2, h2, w2) = grad_out.dim();
    for ci in 0..c {
        for i in 0..d2 {
            for j in 0..h2 {
                for k in 0..w2 {
                    gx[[ci, i / 2, j / 2, k / 2]] += grad_out[[ci, i, j, k]];
                }
            }
        }
    }
    gx
}

/// Channel-wise global mean pooling, (C, D, H, W) -> (C,).
pub fn global_mean_pool(x: &Array4<f32>) -> Array1<f32> {
    let (c, d, h, w) = x.dim();
    let n = (d * h * w) as f32;
    Array1::from_iter((0..c).map(|ci| x.index_axis(ndarray::Axis(0), ci).sum() / n))
}

pub fn global_mean_pool_backward(grad_out: &Array1<f32>, in_dim: (usize, usize, usize, usize)) -> Array4<f32> {
    let (c, d, h, w) = in_dim;
    let n = (d * h * w) as f32;
    let mut gx = Array4::<f32>::zeros(in_dim);
    for ci in 0..c {
        gx.index_axis_mut(ndarray::Axis(0), ci).fill(grad_out[ci] / n);
    }
    gx
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f32>) -> Array1<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e /= s;
    e
}

/// Backward through softmax: given p = softmax(s) and dL/dp, return dL/ds.
pub fn softmax_backward(p: &Array1<f32>, grad_p: &Array1<f32>) -> Array1<f32> {
    let dot: f32 = p.iter().zip(grad_p.iter()).map(|(a, b)| a * b).sum();
    let mut g = grad_p.clone();
    ndarray::Zip::from(&mut g).and(p).for_each(|gv, &pv| {
        *gv = pv * (*gv - dot);
    });
    g
}

/// Cross-entropy of softmax(logits) against a one-hot target; returns the
/// loss and dL/dlogits.
pub fn cross_entropy_logits(logits: &Array1<f32>, target: usize) -> (f32, Array1<f32>) {
    let p = softmax(logits);
    let loss = -(p[target].max(1e-12)).ln();
    let mut grad = p;
    grad[target] -= 1.0;
    (loss, grad)
}

/// Cross-entropy of softmax(logits) against the uniform distribution over K
/// classes: `logsumexp(logits) - mean(logits)`, floored at ln K.
pub fn confusion_loss(logits: &Array1<f32>) -> (f32, Array1<f32>) {
    let k = logits.len() as f32;
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
    let loss = lse - logits.sum() / k;
    let mut grad = softmax(logits);
    grad -= 1.0 / k;
    (loss, grad)
}
