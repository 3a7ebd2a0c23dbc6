//! Primitive layers: convolution, transposed convolution, batch norm, ReLU.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::module::{join, Mode, Module, Param};
use crate::nn::ops::{col2im, gemm, im2col, ConvGeometry};
use crate::nn::tensor::{Tensor, TensorSpec};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

fn he_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f32> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt() as f32;
    let dist = Normal::new(0.0f32, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn missing_cache(layer: &str) -> Error {
    Error::Shape(format!("{layer}: backward called without a cached forward"))
}

fn check_channels(layer: &str, x: &Tensor, expected: usize) -> Result<()> {
    if x.spec().channels != expected {
        return Err(Error::Shape(format!(
            "{layer} expects {expected} input channels, got {:?}",
            x.spec()
        )));
    }
    Ok(())
}

/// 2-D convolution with square kernel. Weight layout `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let k = geometry.kernel;
        let fan_in = in_channels * k * k;
        let weight = Param::new(
            vec![out_channels, in_channels, k, k],
            he_normal(rng, out_channels * fan_in, fan_in),
        );
        let bias = bias.then(|| Param::new(vec![out_channels], vec![0.0; out_channels]));
        Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
            input: None,
        }
    }

    /// `out * in * k * k` weights plus `out` biases when present.
    pub fn param_formula(in_c: usize, out_c: usize, k: usize, bias: bool) -> usize {
        out_c * in_c * k * k + if bias { out_c } else { 0 }
    }

    fn is_pointwise(&self) -> bool {
        self.geometry == ConvGeometry::new(1, 1, 0)
    }

    pub fn output_spec(&self, input: TensorSpec) -> Result<TensorSpec> {
        let g = self.geometry;
        crate::nn::ops::conv2d_output_shape(input, self.out_channels, g.kernel, g.stride, g.pad)
    }
}

impl Module for Conv2d {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        check_channels("conv2d", x, self.in_channels)?;
        let xs = x.spec();
        let os = self.output_spec(xs)?;
        let kdim = self.in_channels * self.geometry.kernel * self.geometry.kernel;
        let plane = os.plane();
        let mut out = Tensor::zeros(os);
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kdim * plane]
        };
        for b in 0..xs.batch {
            let src = x.item(b);
            let cols: &[f32] = if self.is_pointwise() {
                src
            } else {
                im2col(
                    src,
                    xs.channels,
                    xs.height,
                    xs.width,
                    self.geometry,
                    os.height,
                    os.width,
                    &mut col,
                );
                &col
            };
            let dst = out.item_mut(b);
            gemm(
                false,
                false,
                self.out_channels,
                plane,
                kdim,
                1.0,
                &self.weight.value,
                cols,
                0.0,
                dst,
            );
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.value.iter().enumerate() {
                    for v in &mut dst[o * plane..(o + 1) * plane] {
                        *v += bv;
                    }
                }
            }
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing_cache("conv2d"))?;
        let xs = x.spec();
        let gs = grad.spec();
        let kdim = self.in_channels * self.geometry.kernel * self.geometry.kernel;
        let plane = gs.plane();
        let mut dx = Tensor::zeros(xs);
        let mut col = vec![0.0; if self.is_pointwise() { 0 } else { kdim * plane }];
        let mut dcol = vec![0.0; if self.is_pointwise() { 0 } else { kdim * plane }];
        for b in 0..xs.batch {
            let g = grad.item(b);
            if let Some(bias) = &mut self.bias {
                for (o, gb) in bias.grad.iter_mut().enumerate() {
                    *gb += g[o * plane..(o + 1) * plane].iter().sum::<f32>();
                }
            }
            if self.is_pointwise() {
                gemm(
                    false,
                    true,
                    self.out_channels,
                    kdim,
                    plane,
                    1.0,
                    g,
                    x.item(b),
                    1.0,
                    &mut self.weight.grad,
                );
                gemm(
                    true,
                    false,
                    kdim,
                    plane,
                    self.out_channels,
                    1.0,
                    &self.weight.value,
                    g,
                    0.0,
                    dx.item_mut(b),
                );
            } else {
                im2col(
                    x.item(b),
                    xs.channels,
                    xs.height,
                    xs.width,
                    self.geometry,
                    gs.height,
                    gs.width,
                    &mut col,
                );
                gemm(
                    false,
                    true,
                    self.out_channels,
                    kdim,
                    plane,
                    1.0,
                    g,
                    &col,
                    1.0,
                    &mut self.weight.grad,
                );
                gemm(
                    true,
                    false,
                    kdim,
                    plane,
                    self.out_channels,
                    1.0,
                    &self.weight.value,
                    g,
                    0.0,
                    &mut dcol,
                );
                col2im(
                    &dcol,
                    xs.channels,
                    xs.height,
                    xs.width,
                    self.geometry,
                    gs.height,
                    gs.width,
                    dx.item_mut(b),
                );
            }
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Transposed 2-D convolution. Weight layout `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let k = geometry.kernel;
        let s = geometry.stride;
        // Each output pixel receives about in * (k / s)^2 contributions.
        let fan_in = (in_channels * k * k / (s * s)).max(1);
        let weight = Param::new(
            vec![in_channels, out_channels, k, k],
            he_normal(rng, in_channels * out_channels * k * k, fan_in),
        );
        let bias = bias.then(|| Param::new(vec![out_channels], vec![0.0; out_channels]));
        Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
            input: None,
        }
    }

    pub fn output_spec(&self, input: TensorSpec) -> Result<TensorSpec> {
        input.validate()?;
        let g = self.geometry;
        match (g.transposed_extent(input.height), g.transposed_extent(input.width)) {
            (Some(h), Some(w)) => Ok(TensorSpec::new(input.batch, self.out_channels, h, w)),
            _ => Err(Error::Shape(format!(
                "transposed convolution {g:?} on {input:?} has non-positive output"
            ))),
        }
    }
}

impl Module for ConvTranspose2d {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        check_channels("conv_transpose2d", x, self.in_channels)?;
        let xs = x.spec();
        let os = self.output_spec(xs)?;
        let k = self.geometry.kernel;
        let rows = self.out_channels * k * k;
        let plane_in = xs.plane();
        let mut out = Tensor::zeros(os);
        let mut cols = vec![0.0; rows * plane_in];
        for b in 0..xs.batch {
            gemm(
                true,
                false,
                rows,
                plane_in,
                self.in_channels,
                1.0,
                &self.weight.value,
                x.item(b),
                0.0,
                &mut cols,
            );
            let dst = out.item_mut(b);
            col2im(
                &cols,
                self.out_channels,
                os.height,
                os.width,
                self.geometry,
                xs.height,
                xs.width,
                dst,
            );
            if let Some(bias) = &self.bias {
                let plane = os.plane();
                for (o, &bv) in bias.value.iter().enumerate() {
                    for v in &mut dst[o * plane..(o + 1) * plane] {
                        *v += bv;
                    }
                }
            }
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing_cache("conv_transpose2d"))?;
        let xs = x.spec();
        let gs = grad.spec();
        let k = self.geometry.kernel;
        let rows = self.out_channels * k * k;
        let plane_in = xs.plane();
        let plane_out = gs.plane();
        let mut dx = Tensor::zeros(xs);
        let mut dcols = vec![0.0; rows * plane_in];
        for b in 0..xs.batch {
            let g = grad.item(b);
            if let Some(bias) = &mut self.bias {
                for (o, gb) in bias.grad.iter_mut().enumerate() {
                    *gb += g[o * plane_out..(o + 1) * plane_out].iter().sum::<f32>();
                }
            }
            im2col(
                g,
                self.out_channels,
                gs.height,
                gs.width,
                self.geometry,
                xs.height,
                xs.width,
                &mut dcols,
            );
            gemm(
                false,
                false,
                self.in_channels,
                plane_in,
                rows,
                1.0,
                &self.weight.value,
                &dcols,
                0.0,
                dx.item_mut(b),
            );
            gemm(
                false,
                true,
                self.in_channels,
                rows,
                plane_in,
                1.0,
                x.item(b),
                &dcols,
                1.0,
                &mut self.weight.grad,
            );
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    mode: Mode,
}

/// Per-channel batch normalization with affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f32,
    pub momentum: f32,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }
}

impl Module for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        check_channels("batch_norm", x, self.channels)?;
        let s = x.spec();
        let plane = s.plane();
        let count = s.batch * plane;
        let mut mean = vec![0.0f32; self.channels];
        let mut inv_std = vec![0.0f32; self.channels];
        for c in 0..self.channels {
            let (m, inv) = match mode {
                Mode::Train => {
                    let mut sum = 0.0f64;
                    for b in 0..s.batch {
                        let lane = &x.item(b)[c * plane..(c + 1) * plane];
                        sum += lane.iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = sum / count as f64;
                    let mut sq = 0.0f64;
                    for b in 0..s.batch {
                        let lane = &x.item(b)[c * plane..(c + 1) * plane];
                        sq += lane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let unbiased = if count > 1 {
                        sq / (count - 1) as f64
                    } else {
                        var
                    };
                    let mom = self.momentum;
                    self.running_mean.value[c] =
                        (1.0 - mom) * self.running_mean.value[c] + mom * m as f32;
                    self.running_var.value[c] =
                        (1.0 - mom) * self.running_var.value[c] + mom * unbiased as f32;
                    (m as f32, (1.0 / (var + self.eps as f64).sqrt()) as f32)
                }
                Mode::Eval => (
                    self.running_mean.value[c],
                    1.0 / (self.running_var.value[c] + self.eps).sqrt(),
                ),
            };
            mean[c] = m;
            inv_std[c] = inv;
        }
        let mut xhat = x.clone();
        let mut out = Tensor::zeros(s);
        for b in 0..s.batch {
            let xh = xhat.item_mut(b);
            let o = out.item_mut(b);
            for c in 0..self.channels {
                let (g, bt) = (self.gamma.value[c], self.beta.value[c]);
                for i in c * plane..(c + 1) * plane {
                    let v = (xh[i] - mean[c]) * inv_std[c];
                    xh[i] = v;
                    o[i] = g * v + bt;
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            mode,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batch_norm"))?;
        let s = grad.spec();
        let plane = s.plane();
        let count = (s.batch * plane) as f64;
        let mut dx = Tensor::zeros(s);
        for c in 0..self.channels {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for b in 0..s.batch {
                let g = &grad.item(b)[c * plane..(c + 1) * plane];
                let xh = &cache.xhat.item(b)[c * plane..(c + 1) * plane];
                for (gv, xv) in g.iter().zip(xh) {
                    sum_g += *gv as f64;
                    sum_gx += (*gv * *xv) as f64;
                }
            }
            self.beta.grad[c] += sum_g as f32;
            self.gamma.grad[c] += sum_gx as f32;
            let gamma = self.gamma.value[c];
            let inv = cache.inv_std[c];
            let mean_g = (sum_g / count) as f32;
            let mean_gx = (sum_gx / count) as f32;
            for b in 0..s.batch {
                let g = &grad.item(b)[c * plane..(c + 1) * plane];
                let xh = &cache.xhat.item(b)[c * plane..(c + 1) * plane];
                let d = &mut dx.item_mut(b)[c * plane..(c + 1) * plane];
                match cache.mode {
                    Mode::Train => {
                        for i in 0..plane {
                            d[i] = gamma * inv * (g[i] - mean_g - xh[i] * mean_gx);
                        }
                    }
                    Mode::Eval => {
                        for i in 0..plane {
                            d[i] = gamma * inv * g[i];
                        }
                    }
                }
            }
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

thread_local! {
    static TRACE: std::cell::Cell<Option<u64>> = const { std::cell::Cell::new(None) };
}

/// Records a hash of every ReLU activation pattern computed on this thread
/// while alive. Used by gradient checks to detect steps that cross a kink.
pub(crate) struct ActivationTrace {
    previous: Option<u64>,
}

impl ActivationTrace {
    pub(crate) fn start() -> Self {
        Self {
            previous: TRACE.with(|t| t.replace(Some(0xcbf2_9ce4_8422_2325))),
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        TRACE.with(|t| t.get()).unwrap_or(0)
    }

    fn record(mask: &[bool]) {
        TRACE.with(|t| {
            if let Some(mut h) = t.get() {
                for &on in mask {
                    h = (h ^ on as u64).wrapping_mul(0x0100_0000_01b3);
                }
                t.set(Some(h));
            }
        });
    }
}

impl Drop for ActivationTrace {
    fn drop(&mut self) {
        TRACE.with(|t| t.set(self.previous));
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Module for Relu {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let mut out = x.clone();
        let mut mask = Vec::with_capacity(x.len());
        for v in out.data_mut() {
            let on = *v > 0.0;
            mask.push(on);
            if !on {
                *v = 0.0;
            }
        }
        ActivationTrace::record(&mask);
        self.mask = Some(mask);
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("relu"))?;
        let mut dx = grad.clone();
        for (v, on) in dx.data_mut().iter_mut().zip(mask) {
            if !on {
                *v = 0.0;
            }
        }
        Ok(dx)
    }

    fn visit(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param)) {}

    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}
}

/// Global average pooling `[B, C, H, W] -> [B, C, 1, 1]`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    input_spec: Option<TensorSpec>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Module for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let s = x.spec();
        let plane = s.plane();
        let data = x
            .data()
            .chunks(plane)
            .map(|lane| (lane.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        self.input_spec = Some(s);
        Tensor::from_vec(TensorSpec::new(s.batch, s.channels, 1, 1), data)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let s = self
            .input_spec
            .take()
            .ok_or_else(|| missing_cache("global_avg_pool"))?;
        let plane = s.plane();
        let inv = 1.0 / plane as f32;
        let mut dx = Tensor::zeros(s);
        for (lane, g) in dx.data_mut().chunks_mut(plane).zip(grad.data()) {
            lane.fill(g * inv);
        }
        Ok(dx)
    }

    fn visit(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param)) {}

    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}
}
