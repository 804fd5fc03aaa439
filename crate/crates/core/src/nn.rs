//! Convolutional layers with explicit forward and backward passes.
//!
//! Activations are batched NHWC arrays. Convolutions lower to GEMM through
//! im2col; every layer caches what its backward pass needs when the forward
//! pass is recorded.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Array, Scalar};

/// A named tensor owned by a layer. Running statistics are stored as
/// non-trainable parameters so checkpoints and checksums see them.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, shape: Vec<usize>, value: Vec<T>, trainable: bool) -> Self {
        let grad = if trainable {
            vec![T::zero(); value.len()]
        } else {
            Vec::new()
        };
        Param {
            name,
            shape,
            value,
            grad,
            trainable,
        }
    }

    fn kaiming<R: Rng + ?Sized>(name: String, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(std * z)
            })
            .collect();
        Self::new(name, shape, value, true)
    }

    fn filled(name: String, n: usize, v: f64, trainable: bool) -> Self {
        Self::new(name, vec![n], vec![T::from_f64(v); n], trainable)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Walks every tensor (trainable or not) of a layer in a fixed order.
pub trait Visit<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
}

/// How a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    /// Batch statistics in batch-norm (and running-stat updates).
    pub train: bool,
    /// Keep activations for a later backward pass.
    pub record: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        train: true,
        record: true,
    };
    pub const EVAL: Pass = Pass {
        train: false,
        record: false,
    };
    /// Evaluation statistics with activations kept, for gradient checks and
    /// for frozen-statistics fine-tuning.
    pub const EVAL_RECORD: Pass = Pass {
        train: false,
        record: true,
    };
}

#[inline]
pub fn dims4<T: Scalar>(x: &Array<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    debug_assert_eq!(s.len(), 4, "expected NHWC, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn im2col3<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, col: &mut [T]) {
    let k = 9 * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &mut col[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    let dst = &mut row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let base = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&x[base..base + c]);
                    }
                }
            }
        }
    }
}

fn col2im3<T: Scalar>(col: &[T], h: usize, w: usize, c: usize, dx: &mut [T]) {
    let k = 9 * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &col[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let base = (sy as usize * w + sx as usize) * c;
                    let src = &row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    for (d, s) in dx[base..base + c].iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Same-padded convolution with a 3x3 or 1x1 kernel, stride 1.
///
/// Weights are laid out `[ky][kx][cin][cout]`, i.e. a `(k*k*cin) x cout`
/// matrix matching the im2col rows.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Array<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "unsupported kernel {kernel}");
        let fan_in = kernel * kernel * cin;
        Conv2d {
            kernel,
            cin,
            cout,
            weight: Param::kaiming(
                format!("{name}.weight"),
                vec![kernel, kernel, cin, cout],
                fan_in,
                rng,
            ),
            bias: Param::filled(format!("{name}.bias"), cout, 0.0, true),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Array<T>, pass: Pass) -> Array<T> {
        let (n, h, w, c) = dims4(x);
        assert_eq!(c, self.cin, "{}: expected {} input channels", self.weight.name, self.cin);
        let hw = h * w;
        let k = self.kernel * self.kernel * c;
        let cout = self.cout;
        let mut out = vec![T::zero(); n * hw * cout];
        let mut col = if self.kernel == 3 {
            vec![T::zero(); hw * k]
        } else {
            Vec::new()
        };
        for b in 0..n {
            let xb = &x.data()[b * hw * c..(b + 1) * hw * c];
            let ob = &mut out[b * hw * cout..(b + 1) * hw * cout];
            for row in ob.chunks_exact_mut(cout) {
                row.copy_from_slice(&self.bias.value);
            }
            let a: &[T] = if self.kernel == 3 {
                im2col3(xb, h, w, c, &mut col);
                &col
            } else {
                xb
            };
            T::gemm(
                hw,
                k,
                cout,
                T::one(),
                a,
                k as isize,
                1,
                &self.weight.value,
                cout as isize,
                1,
                T::one(),
                ob,
                cout as isize,
                1,
            );
        }
        self.input = if pass.record { Some(x.clone()) } else { None };
        Array::raw(vec![n, h, w, cout], out)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Array<T>, need_dx: bool) -> Option<Array<T>> {
        let x = self
            .input
            .take()
            .expect("Conv2d::backward without a recorded forward pass");
        let (n, h, w, c) = dims4(&x);
        let hw = h * w;
        let k = self.kernel * self.kernel * c;
        let cout = self.cout;
        let mut col = if self.kernel == 3 {
            vec![T::zero(); hw * k]
        } else {
            Vec::new()
        };
        let mut dcol = vec![T::zero(); hw * k];
        let mut dx = if need_dx {
            vec![T::zero(); n * hw * c]
        } else {
            Vec::new()
        };
        for b in 0..n {
            let xb = &x.data()[b * hw * c..(b + 1) * hw * c];
            let dyb = &dy.data()[b * hw * cout..(b + 1) * hw * cout];
            for row in dyb.chunks_exact(cout) {
                for (g, d) in self.bias.grad.iter_mut().zip(row) {
                    *g += *d;
                }
            }
            let a: &[T] = if self.kernel == 3 {
                im2col3(xb, h, w, c, &mut col);
                &col
            } else {
                xb
            };
            // dW += col^T * dY
            T::gemm(
                k,
                hw,
                cout,
                T::one(),
                a,
                1,
                k as isize,
                dyb,
                cout as isize,
                1,
                T::one(),
                &mut self.weight.grad,
                cout as isize,
                1,
            );
            if need_dx {
                let dxb = &mut dx[b * hw * c..(b + 1) * hw * c];
                if self.kernel == 3 {
                    // dcol = dY * W^T
                    T::gemm(
                        hw,
                        cout,
                        k,
                        T::one(),
                        dyb,
                        cout as isize,
                        1,
                        &self.weight.value,
                        1,
                        cout as isize,
                        T::zero(),
                        &mut dcol,
                        k as isize,
                        1,
                    );
                    col2im3(&dcol, h, w, c, dxb);
                } else {
                    T::gemm(
                        hw,
                        cout,
                        k,
                        T::one(),
                        dyb,
                        cout as isize,
                        1,
                        &self.weight.value,
                        1,
                        cout as isize,
                        T::zero(),
                        dxb,
                        k as isize,
                        1,
                    );
                }
            }
        }
        need_dx.then(|| Array::raw(vec![n, h, w, c], dx))
    }
}

impl<T: Scalar> Visit<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// 2x2 transposed convolution with stride 2 (exact spatial doubling).
/// Weights are laid out `[cin][dy][dx][cout]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2<T> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Array<T>>,
}

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        ConvTranspose2x2 {
            cin,
            cout,
            weight: Param::kaiming(format!("{name}.weight"), vec![cin, 2, 2, cout], cin, rng),
            bias: Param::filled(format!("{name}.bias"), cout, 0.0, true),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Array<T>, pass: Pass) -> Array<T> {
        let (n, h, w, c) = dims4(x);
        assert_eq!(c, self.cin, "{}: expected {} input channels", self.weight.name, self.cin);
        let (hw, cout) = (h * w, self.cout);
        let (oh, ow) = (2 * h, 2 * w);
        let mut g = vec![T::zero(); hw * 4 * cout];
        let mut out = vec![T::zero(); n * oh * ow * cout];
        for b in 0..n {
            let xb = &x.data()[b * hw * c..(b + 1) * hw * c];
            T::gemm(
                hw,
                c,
                4 * cout,
                T::one(),
                xb,
                c as isize,
                1,
                &self.weight.value,
                (4 * cout) as isize,
                1,
                T::zero(),
                &mut g,
                (4 * cout) as isize,
                1,
            );
            let ob = &mut out[b * oh * ow * cout..(b + 1) * oh * ow * cout];
            for i in 0..h {
                for j in 0..w {
                    let src = &g[(i * w + j) * 4 * cout..(i * w + j + 1) * 4 * cout];
                    for a in 0..2 {
                        for bb in 0..2 {
                            let dst = ((2 * i + a) * ow + 2 * j + bb) * cout;
                            let s = &src[(a * 2 + bb) * cout..(a * 2 + bb + 1) * cout];
                            for ((d, v), bias) in ob[dst..dst + cout]
                                .iter_mut()
                                .zip(s)
                                .zip(&self.bias.value)
                            {
                                *d = *v + *bias;
                            }
                        }
                    }
                }
            }
        }
        self.input = if pass.record { Some(x.clone()) } else { None };
        Array::raw(vec![n, oh, ow, cout], out)
    }

    pub fn backward(&mut self, dy: &Array<T>) -> Array<T> {
        let x = self
            .input
            .take()
            .expect("ConvTranspose2x2::backward without a recorded forward pass");
        let (n, h, w, c) = dims4(&x);
        let (hw, cout) = (h * w, self.cout);
        let (oh, ow) = (2 * h, 2 * w);
        let mut dg = vec![T::zero(); hw * 4 * cout];
        let mut dx = vec![T::zero(); n * hw * c];
        for b in 0..n {
            let dyb = &dy.data()[b * oh * ow * cout..(b + 1) * oh * ow * cout];
            for row in dyb.chunks_exact(cout) {
                for (g, d) in self.bias.grad.iter_mut().zip(row) {
                    *g += *d;
                }
            }
            for i in 0..h {
                for j in 0..w {
                    let dst = &mut dg[(i * w + j) * 4 * cout..(i * w + j + 1) * 4 * cout];
                    for a in 0..2 {
                        for bb in 0..2 {
                            let src = ((2 * i + a) * ow + 2 * j + bb) * cout;
                            dst[(a * 2 + bb) * cout..(a * 2 + bb + 1) * cout]
                                .copy_from_slice(&dyb[src..src + cout]);
                        }
                    }
                }
            }
            let xb = &x.data()[b * hw * c..(b + 1) * hw * c];
            T::gemm(
                c,
                hw,
                4 * cout,
                T::one(),
                xb,
                1,
                c as isize,
                &dg,
                (4 * cout) as isize,
                1,
                T::one(),
                &mut self.weight.grad,
                (4 * cout) as isize,
                1,
            );
            T::gemm(
                hw,
                4 * cout,
                c,
                T::one(),
                &dg,
                (4 * cout) as isize,
                1,
                &self.weight.value,
                1,
                (4 * cout) as isize,
                T::zero(),
                &mut dx[b * hw * c..(b + 1) * hw * c],
                c as isize,
                1,
            );
        }
        Array::raw(vec![n, h, w, c], dx)
    }
}

impl<T: Scalar> Visit<T> for ConvTranspose2x2<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over N, H and W.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(format!("{name}.gamma"), c, 1.0, true),
            beta: Param::filled(format!("{name}.beta"), c, 0.0, true),
            running_mean: Param::filled(format!("{name}.running_mean"), c, 0.0, false),
            running_var: Param::filled(format!("{name}.running_var"), c, 1.0, false),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Array<T>, pass: Pass) -> Array<T> {
        let c = self.channels();
        let m = x.len() / c;
        let eps = T::from_f64(BN_EPS);
        let (mean, inv_std) = if pass.train {
            let mut mean = vec![0.0f64; c];
            for px in x.data().chunks_exact(c) {
                for (a, v) in mean.iter_mut().zip(px) {
                    *a += v.as_f64();
                }
            }
            mean.iter_mut().for_each(|a| *a /= m as f64);
            let mut var = vec![0.0f64; c];
            for px in x.data().chunks_exact(c) {
                for ((a, v), mu) in var.iter_mut().zip(px).zip(&mean) {
                    let d = v.as_f64() - mu;
                    *a += d * d;
                }
            }
            var.iter_mut().for_each(|a| *a /= m as f64);
            let mom = BN_MOMENTUM;
            let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            for k in 0..c {
                let rm = self.running_mean.value[k].as_f64();
                let rv = self.running_var.value[k].as_f64();
                self.running_mean.value[k] = T::from_f64((1.0 - mom) * rm + mom * mean[k]);
                self.running_var.value[k] = T::from_f64((1.0 - mom) * rv + mom * var[k] * unbias);
            }
            (
                mean.iter().map(|&v| T::from_f64(v)).collect::<Vec<T>>(),
                var.iter()
                    .map(|&v| T::one() / (T::from_f64(v) + eps).sqrt())
                    .collect::<Vec<T>>(),
            )
        } else {
            (
                self.running_mean.value.clone(),
                self.running_var
                    .value
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect(),
            )
        };
        let mut xhat = Vec::with_capacity(if pass.record { x.len() } else { 0 });
        let mut out = Vec::with_capacity(x.len());
        for px in x.data().chunks_exact(c) {
            for k in 0..c {
                let xh = (px[k] - mean[k]) * inv_std[k];
                if pass.record {
                    xhat.push(xh);
                }
                out.push(self.gamma.value[k] * xh + self.beta.value[k]);
            }
        }
        self.cache = pass.record.then_some(BnCache {
            xhat,
            inv_std,
            batch_stats: pass.train,
        });
        Array::raw(x.shape().to_vec(), out)
    }

    pub fn backward(&mut self, dy: &Array<T>) -> Array<T> {
        let cache = self
            .cache
            .take()
            .expect("BatchNorm::backward without a recorded forward pass");
        let c = self.channels();
        let m = dy.len() / c;
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (g, xh) in dy.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for k in 0..c {
                dgamma[k] += g[k] * xh[k];
                dbeta[k] += g[k];
            }
        }
        for k in 0..c {
            self.gamma.grad[k] += dgamma[k];
            self.beta.grad[k] += dbeta[k];
        }
        let mut dx = Vec::with_capacity(dy.len());
        if cache.batch_stats {
            let mf = T::from_f64(m as f64);
            let scale: Vec<T> = (0..c)
                .map(|k| self.gamma.value[k] * cache.inv_std[k] / mf)
                .collect();
            for (g, xh) in dy.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
                for k in 0..c {
                    dx.push(scale[k] * (mf * g[k] - dbeta[k] - xh[k] * dgamma[k]));
                }
            }
        } else {
            let scale: Vec<T> = (0..c)
                .map(|k| self.gamma.value[k] * cache.inv_std[k])
                .collect();
            for g in dy.data().chunks_exact(c) {
                for k in 0..c {
                    dx.push(scale[k] * g[k]);
                }
            }
        }
        Array::raw(dy.shape().to_vec(), dx)
    }
}

impl<T: Scalar> Visit<T> for BatchNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// 3x3 conv, batch-norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    output: Option<Array<T>>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&format!("{name}.conv"), 3, cin, cout, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), cout),
            output: None,
        }
    }

    pub fn forward(&mut self, x: &Array<T>, pass: Pass) -> Array<T> {
        let z = self.conv.forward(x, pass);
        let mut y = self.bn.forward(&z, pass);
        y.data_mut().iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero();
            }
        });
        self.output = if pass.record { Some(y.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, dy: &Array<T>, need_dx: bool) -> Option<Array<T>> {
        let y = self
            .output
            .take()
            .expect("ConvBnRelu::backward without a recorded forward pass");
        let mut g = dy.clone();
        for (d, v) in g.data_mut().iter_mut().zip(y.data()) {
            if *v <= T::zero() {
                *d = T::zero();
            }
        }
        let g = self.bn.backward(&g);
        self.conv.backward(&g, need_dx)
    }
}

impl<T: Scalar> Visit<T> for ConvBnRelu<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// Two [`ConvBnRelu`] units.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub first: ConvBnRelu<T>,
    pub second: ConvBnRelu<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        ConvBlock {
            first: ConvBnRelu::new(&format!("{name}.0"), cin, cout, rng),
            second: ConvBnRelu::new(&format!("{name}.1"), cout, cout, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.second.conv.cout
    }

    pub fn forward(&mut self, x: &Array<T>, pass: Pass) -> Array<T> {
        let y = self.first.forward(x, pass);
        self.second.forward(&y, pass)
    }

    pub fn backward(&mut self, dy: &Array<T>, need_dx: bool) -> Option<Array<T>> {
        let g = self.second.backward(dy, true).expect("inner gradient");
        self.first.backward(&g, need_dx)
    }
}

impl<T: Scalar> Visit<T> for ConvBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.first.visit(f);
        self.second.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.first.visit_mut(f);
        self.second.visit_mut(f);
    }
}

/// 2x2 max pooling, stride 2.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool2 {
    pub fn forward<T: Scalar>(&mut self, x: &Array<T>, pass: Pass) -> Array<T> {
        let (n, h, w, c) = dims4(x);
        assert!(h % 2 == 0 && w % 2 == 0, "max-pool needs even extents, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let src = x.data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut idx = Vec::with_capacity(if pass.record { n * oh * ow * c } else { 0 });
        for b in 0..n {
            let base = b * h * w * c;
            for i in 0..oh {
                for j in 0..ow {
                    for k in 0..c {
                        let mut best = base + ((2 * i) * w + 2 * j) * c + k;
                        for (a, bb) in [(0, 1), (1, 0), (1, 1)] {
                            let p = base + ((2 * i + a) * w + 2 * j + bb) * c + k;
                            if src[p] > src[best] {
                                best = p;
                            }
                        }
                        out.push(src[best]);
                        if pass.record {
                            idx.push(best as u32);
                        }
                    }
                }
            }
        }
        self.argmax = pass.record.then(|| (x.shape().to_vec(), idx));
        Array::raw(vec![n, oh, ow, c], out)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Array<T>) -> Array<T> {
        let (shape, idx) = self
            .argmax
            .take()
            .expect("MaxPool2::backward without a recorded forward pass");
        let mut dx = Array::zeros(&shape);
        let d = dx.data_mut();
        for (g, &i) in dy.data().iter().zip(&idx) {
            d[i as usize] += *g;
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Array<T>) -> Array<T> {
    let (n, h, w, c) = dims4(x);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let s = ((b * h + i / 2) * w + j / 2) * c;
                let d = ((b * oh + i) * ow + j) * c;
                out[d..d + c].copy_from_slice(&x.data()[s..s + c]);
            }
        }
    }
    Array::raw(vec![n, oh, ow, c], out)
}

pub fn upsample2_backward<T: Scalar>(dy: &Array<T>) -> Array<T> {
    let (n, oh, ow, c) = dims4(dy);
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let s = ((b * oh + i) * ow + j) * c;
                let d = ((b * h + i / 2) * w + j / 2) * c;
                for (a, g) in dx[d..d + c].iter_mut().zip(&dy.data()[s..s + c]) {
                    *a += *g;
                }
            }
        }
    }
    Array::raw(vec![n, h, w, c], dx)
}

/// Concatenates NHWC arrays along channels, in argument order.
pub fn concat_channels<T: Scalar>(parts: &[&Array<T>]) -> Array<T> {
    let (n, h, w, _) = dims4(parts[0]);
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[3]).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * h * w * total);
    for px in 0..n * h * w {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Array::raw(vec![n, h, w, total], out)
}

/// Inverse of [`concat_channels`].
pub fn split_channels<T: Scalar>(x: &Array<T>, widths: &[usize]) -> Vec<Array<T>> {
    let (n, h, w, c) = dims4(x);
    debug_assert_eq!(widths.iter().sum::<usize>(), c);
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&k| Vec::with_capacity(n * h * w * k)).collect();
    for px in x.data().chunks_exact(c) {
        let mut off = 0;
        for (part, &k) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&px[off..off + k]);
            off += k;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &k)| Array::raw(vec![n, h, w, k], d))
        .collect()
}

pub fn add_assign<T: Scalar>(a: &mut Array<T>, b: &Array<T>) {
    debug_assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += *y;
    }
}
