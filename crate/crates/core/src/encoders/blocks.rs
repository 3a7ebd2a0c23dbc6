//! Residual down-sampling, up-sampling and self-attention blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::module::{join, Mode, Module, Param};
use crate::nn::ops::{gemm, softmax_in_place, ConvGeometry};
use crate::nn::tensor::{Tensor, TensorSpec};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Relu};

/// conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU, plus a shortcut, summed last.
///
/// The shortcut is the identity when shapes agree, otherwise a strided
/// bias-free 1x1 convolution followed by BN.
#[derive(Clone, Debug)]
pub struct DownBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl DownBlock {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (in_channels != out_channels || stride != 1).then(|| {
            (
                Conv2d::new(in_channels, out_channels, ConvGeometry::new(1, stride, 0), false, rng),
                BatchNorm2d::new(out_channels),
            )
        });
        Self {
            in_channels,
            out_channels,
            stride,
            conv1: Conv2d::new(in_channels, out_channels, ConvGeometry::new(3, stride, 1), false, rng),
            bn1: BatchNorm2d::new(out_channels),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_channels, out_channels, ConvGeometry::new(3, 1, 1), false, rng),
            bn2: BatchNorm2d::new(out_channels),
            relu2: Relu::new(),
            shortcut,
        }
    }

    pub fn param_formula(in_c: usize, out_c: usize, stride: usize) -> usize {
        let main = 9 * in_c * out_c + 9 * out_c * out_c + 4 * out_c;
        let projection = if in_c != out_c || stride != 1 {
            in_c * out_c + 2 * out_c
        } else {
            0
        };
        main + projection
    }
}

impl Module for DownBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.conv1.forward(x, mode)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu1.forward(&h, mode)?;
        let h = self.conv2.forward(&h, mode)?;
        let h = self.bn2.forward(&h, mode)?;
        let mut out = self.relu2.forward(&h, mode)?;
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x, mode)?;
                out.add_assign(&bn.forward(&s, mode)?);
            }
            None => out.add_assign(x),
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.relu2.backward(grad)?;
        let g = self.bn2.backward(&g)?;
        let g = self.conv2.backward(&g)?;
        let g = self.relu1.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        let mut dx = self.conv1.backward(&g)?;
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = bn.backward(grad)?;
                dx.add_assign(&conv.backward(&s)?);
            }
            None => dx.add_assign(grad),
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit(&join(prefix, "shortcut.conv"), f);
            bn.visit(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_mut(&join(prefix, "shortcut.conv"), f);
            bn.visit_mut(&join(prefix, "shortcut.bn"), f);
        }
    }
}

/// Transposed conv (k2 s2, C -> C/2) -> conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU.
/// All convolutions carry biases. Doubles the spatial extent.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub in_channels: usize,
    up: ConvTranspose2d,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
}

impl UpBlock {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, rng: &mut R) -> Self {
        let out = in_channels / 2;
        Self {
            in_channels,
            up: ConvTranspose2d::new(in_channels, out, ConvGeometry::new(2, 2, 0), true, rng),
            conv1: Conv2d::new(out, out, ConvGeometry::new(3, 1, 1), true, rng),
            bn1: BatchNorm2d::new(out),
            relu1: Relu::new(),
            conv2: Conv2d::new(out, out, ConvGeometry::new(3, 1, 1), true, rng),
            bn2: BatchNorm2d::new(out),
            relu2: Relu::new(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels / 2
    }

    pub fn param_formula(in_c: usize) -> usize {
        let out = in_c / 2;
        (4 * in_c * out + out) + 2 * (9 * out * out + out) + 2 * (2 * out)
    }
}

impl Module for UpBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.up.forward(x, mode)?;
        let h = self.conv1.forward(&h, mode)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu1.forward(&h, mode)?;
        let h = self.conv2.forward(&h, mode)?;
        let h = self.bn2.forward(&h, mode)?;
        self.relu2.forward(&h, mode)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.relu2.backward(grad)?;
        let g = self.bn2.backward(&g)?;
        let g = self.conv2.backward(&g)?;
        let g = self.relu1.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        let g = self.conv1.backward(&g)?;
        self.up.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.up.visit(&join(prefix, "up"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }
}

#[derive(Clone, Debug)]
struct AttnCache {
    query: Vec<f32>,
    key: Vec<f32>,
    value: Vec<f32>,
    attention: Vec<f32>,
    pre_out: Vec<f32>,
    spec: TensorSpec,
}

/// Self-attention over spatial positions with a learnable residual gate.
///
/// With `N = H * W` flattened positions, `energy = Q^T K` is `N x N`, each
/// query row is softmaxed over key positions, and the output is
/// `gamma * (V attention^T) + x`. `gamma` starts at zero, making the block an
/// identity map at initialization.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub channels: usize,
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    pub gamma: Param,
    cache: Option<AttnCache>,
}

impl AttnBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Result<Self> {
        if channels % 8 != 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "attention channels {channels} must be a positive multiple of 8"
            )));
        }
        let pw = ConvGeometry::new(1, 1, 0);
        Ok(Self {
            channels,
            query: Conv2d::new(channels, channels / 8, pw, true, rng),
            key: Conv2d::new(channels, channels / 8, pw, true, rng),
            value: Conv2d::new(channels, channels, pw, true, rng),
            gamma: Param::new(vec![1], vec![0.0]),
            cache: None,
        })
    }

    /// `2 (C C/8 + C/8) + (C^2 + C) + 1`
    pub fn param_formula(c: usize) -> usize {
        2 * (c * c / 8 + c / 8) + (c * c + c) + 1
    }

    /// Attention maps `[B, N, N]` from the most recent forward pass.
    pub fn last_attention(&self) -> Option<&[f32]> {
        self.cache.as_ref().map(|c| c.attention.as_slice())
    }
}

impl Module for AttnBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = x.spec();
        let q = self.query.forward(x, mode)?;
        let k = self.key.forward(x, mode)?;
        let v = self.value.forward(x, mode)?;
        let n = s.plane();
        let c8 = self.channels / 8;
        let c = self.channels;
        let mut attention = vec![0.0f32; s.batch * n * n];
        let mut pre_out = vec![0.0f32; s.batch * c * n];
        for b in 0..s.batch {
            let att = &mut attention[b * n * n..(b + 1) * n * n];
            gemm(true, false, n, n, c8, 1.0, q.item(b), k.item(b), 0.0, att);
            for row in att.chunks_mut(n) {
                softmax_in_place(row);
            }
            let po = &mut pre_out[b * c * n..(b + 1) * c * n];
            gemm(false, true, c, n, n, 1.0, v.item(b), att, 0.0, po);
        }
        let g = self.gamma.value[0];
        let mut out = x.clone();
        for (o, p) in out.data_mut().iter_mut().zip(&pre_out) {
            *o += g * p;
        }
        self.cache = Some(AttnCache {
            query: q.into_vec(),
            key: k.into_vec(),
            value: v.into_vec(),
            attention,
            pre_out,
            spec: s,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("attention: backward without forward".into()))?;
        let s = cache.spec;
        let n = s.plane();
        let c = self.channels;
        let c8 = c / 8;
        let g = self.gamma.value[0];
        self.gamma.grad[0] += grad
            .data()
            .iter()
            .zip(&cache.pre_out)
            .map(|(a, b)| (a * b) as f64)
            .sum::<f64>() as f32;

        let mut dq = Tensor::zeros(TensorSpec::new(s.batch, c8, s.height, s.width));
        let mut dk = Tensor::zeros(dq.spec());
        let mut dv = Tensor::zeros(s);
        let mut d_att = vec![0.0f32; n * n];
        for b in 0..s.batch {
            let d_out: Vec<f32> = grad.item(b).iter().map(|v| v * g).collect();
            let att = &cache.attention[b * n * n..(b + 1) * n * n];
            let v = &cache.value[b * c * n..(b + 1) * c * n];
            let q = &cache.query[b * c8 * n..(b + 1) * c8 * n];
            let k = &cache.key[b * c8 * n..(b + 1) * c8 * n];
            gemm(false, false, c, n, n, 1.0, &d_out, att, 0.0, dv.item_mut(b));
            gemm(true, false, n, n, c, 1.0, &d_out, v, 0.0, &mut d_att);
            // Softmax backward, row by row; d_att becomes d_energy.
            for (drow, arow) in d_att.chunks_mut(n).zip(att.chunks(n)) {
                let dot: f64 = drow.iter().zip(arow).map(|(d, a)| (d * a) as f64).sum();
                let dot = dot as f32;
                for (d, a) in drow.iter_mut().zip(arow) {
                    *d = a * (*d - dot);
                }
            }
            gemm(false, true, c8, n, n, 1.0, k, &d_att, 0.0, dq.item_mut(b));
            gemm(false, false, c8, n, n, 1.0, q, &d_att, 0.0, dk.item_mut(b));
        }
        let mut dx = grad.clone();
        dx.add_assign(&self.query.backward(&dq)?);
        dx.add_assign(&self.key.backward(&dk)?);
        dx.add_assign(&self.value.backward(&dv)?);
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        f(&join(prefix, "gamma"), &self.gamma);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        f(&join(prefix, "gamma"), &mut self.gamma);
    }
}
