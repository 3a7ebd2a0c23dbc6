use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::UpBlock;
use super::encoder::{Encoder, EMBED_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::module::{join, Mode, Module, Param};
use crate::nn::ops::ConvGeometry;
use crate::nn::tensor::Tensor;
use crate::nn::Conv2d;

/// Default header output channels: five scored classes plus no-data and other.
pub const DEFAULT_HEADER_CLASSES: usize = 7;
const UP_STAGES: usize = 4;

/// Four [`UpBlock`]s taking 512 channels down to 32 at 16x the extent.
#[derive(Clone, Debug)]
pub struct UpStack {
    blocks: Vec<UpBlock>,
}

impl UpStack {
    pub fn new<R: rand::Rng + ?Sized>(in_channels: usize, rng: &mut R) -> Self {
        let mut c = in_channels;
        let blocks = (0..UP_STAGES)
            .map(|_| {
                let b = UpBlock::new(c, rng);
                c /= 2;
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels())
    }

    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.num_params()).collect()
    }
}

impl Module for UpStack {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("layer{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("layer{}", i + 1)), f);
        }
    }
}

/// Segmentation header: `[B, 512, h, w]` to `[B, nc, 16h, 16w]` logits.
#[derive(Clone, Debug)]
pub struct DeconvHeader {
    pub classes: usize,
    ups: UpStack,
    classifier: Conv2d,
}

impl DeconvHeader {
    pub fn new(classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidConfig("header needs at least one output channel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ups = UpStack::new(EMBED_CHANNELS, &mut rng);
        let classifier = Conv2d::new(ups.out_channels(), classes, ConvGeometry::new(1, 1, 0), true, &mut rng);
        Ok(Self { classes, ups, classifier })
    }

    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = self
            .ups
            .layer_param_counts()
            .into_iter()
            .enumerate()
            .map(|(i, n)| (format!("layer{}", i + 1), n))
            .collect();
        out.push(("conv1".to_string(), self.classifier.num_params()));
        out
    }

    pub fn param_formula(classes: usize) -> usize {
        let mut c = EMBED_CHANNELS;
        let mut total = 0;
        for _ in 0..UP_STAGES {
            total += UpBlock::param_formula(c);
            c /= 2;
        }
        total + Conv2d::param_formula(c, classes, 1, true)
    }
}

impl Module for DeconvHeader {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.spec().channels != EMBED_CHANNELS {
            return Err(Error::Shape(format!(
                "header expects {EMBED_CHANNELS} channels, got {}",
                x.spec().channels
            )));
        }
        let h = self.ups.forward(x, mode)?;
        self.classifier.forward(&h, mode)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.classifier.backward(grad)?;
        self.ups.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ups.visit(prefix, f);
        self.classifier.visit(&join(prefix, "conv1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ups.visit_mut(prefix, f);
        self.classifier.visit_mut(&join(prefix, "conv1"), f);
    }
}

/// Encoder followed by a deconvolutional header.
///
/// With `freeze_encoder` set, backward stops at the header and the encoder
/// runs in inference mode, so only header weights receive gradients. Callers
/// then hand only the header to the optimizer.
#[derive(Clone, Debug)]
pub struct SegmentationModel {
    pub encoder: Encoder,
    pub header: DeconvHeader,
    pub freeze_encoder: bool,
}

impl SegmentationModel {
    pub fn new(encoder: Encoder, header: DeconvHeader) -> Self {
        Self {
            encoder,
            header,
            freeze_encoder: false,
        }
    }
}

impl Module for SegmentationModel {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let enc_mode = if self.freeze_encoder { Mode::Eval } else { mode };
        let z = self.encoder.forward(x, enc_mode)?;
        self.header.forward(&z, mode)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.header.backward(grad)?;
        if self.freeze_encoder {
            return Ok(Tensor::zeros(crate::nn::TensorSpec::new(
                g.spec().batch,
                crate::data::CHANNELS,
                g.spec().height * super::encoder::DOWNSAMPLE,
                g.spec().width * super::encoder::DOWNSAMPLE,
            )));
        }
        self.encoder.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.header.visit(&join(prefix, "header"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.header.visit_mut(&join(prefix, "header"), f);
    }
}
