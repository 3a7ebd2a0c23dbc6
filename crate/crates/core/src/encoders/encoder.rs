use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{AttnBlock, DownBlock};
use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::nn::module::{join, Mode, Module, Param};
use crate::nn::ops::ConvGeometry;
use crate::nn::tensor::{Tensor, TensorSpec};
use crate::nn::{BatchNorm2d, Conv2d, Relu};

pub const EMBED_CHANNELS: usize = 512;
/// Total spatial down-sampling factor of every encoder.
pub const DOWNSAMPLE: usize = 16;
const WIDTHS: [usize; 4] = [64, 128, 256, 512];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    ResNet18,
    ResNet34,
    ResNet18Attn,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 3] = [Self::ResNet18, Self::ResNet34, Self::ResNet18Attn];

    pub fn name(self) -> &'static str {
        match self {
            Self::ResNet18 => "resnet18",
            Self::ResNet34 => "resnet34",
            Self::ResNet18Attn => "resnet18attn",
        }
    }

    pub fn blocks_per_layer(self) -> [usize; 4] {
        match self {
            Self::ResNet18 | Self::ResNet18Attn => [2, 2, 2, 2],
            Self::ResNet34 => [3, 4, 6, 3],
        }
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Self::ResNet18Attn)
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "resnet18" => Ok(Self::ResNet18),
            "resnet34" => Ok(Self::ResNet34),
            "resnet18attn" => Ok(Self::ResNet18Attn),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

/// ResNet-style encoder mapping `[B, 14, H, W]` to `[B, 512, H/16, W/16]`.
///
/// The attention variant gates layer-3 and layer-4 outputs through
/// [`AttnBlock`]s whose built-in residual provides the sum with the layer
/// output, so layer 4 consumes `attn3(layer3(x))`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub variant: EncoderVariant,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stem_relu: Relu,
    layers: Vec<Vec<DownBlock>>,
    attn3: Option<AttnBlock>,
    attn4: Option<AttnBlock>,
}

impl Encoder {
    pub fn new(variant: EncoderVariant, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = Conv2d::new(CHANNELS, WIDTHS[0], ConvGeometry::new(7, 2, 3), false, &mut rng);
        let mut layers = Vec::with_capacity(4);
        let mut in_c = WIDTHS[0];
        for (i, (&n, &w)) in variant.blocks_per_layer().iter().zip(&WIDTHS).enumerate() {
            let layer = (0..n)
                .map(|j| {
                    let stride = if i > 0 && j == 0 { 2 } else { 1 };
                    let b = DownBlock::new(in_c, w, stride, &mut rng);
                    in_c = w;
                    b
                })
                .collect();
            layers.push(layer);
        }
        let (attn3, attn4) = if variant.has_attention() {
            (
                Some(AttnBlock::new(WIDTHS[2], &mut rng).expect("256 is a multiple of 8")),
                Some(AttnBlock::new(WIDTHS[3], &mut rng).expect("512 is a multiple of 8")),
            )
        } else {
            (None, None)
        };
        Self {
            variant,
            stem_conv,
            stem_bn: BatchNorm2d::new(WIDTHS[0]),
            stem_relu: Relu::new(),
            layers,
            attn3,
            attn4,
        }
    }

    /// Named per-layer trainable parameter counts in forward order.
    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        let mut out = vec![
            ("conv1".to_string(), self.stem_conv.num_params()),
            ("bn1".to_string(), self.stem_bn.num_params()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let n = layer.iter().map(|b| b.num_params()).sum();
            out.push((format!("layer{}", i + 1), n));
            if i == 2 {
                if let Some(a) = &self.attn3 {
                    out.push(("attn1".to_string(), a.num_params()));
                }
            }
        }
        if let Some(a) = &self.attn4 {
            out.push(("attn2".to_string(), a.num_params()));
        }
        out
    }

    /// Closed-form trainable parameter count.
    pub fn param_formula(variant: EncoderVariant) -> usize {
        let stem = Conv2d::param_formula(CHANNELS, WIDTHS[0], 7, false) + 2 * WIDTHS[0];
        let mut total = stem;
        let mut in_c = WIDTHS[0];
        for (i, (&n, &w)) in variant.blocks_per_layer().iter().zip(&WIDTHS).enumerate() {
            for j in 0..n {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                total += DownBlock::param_formula(in_c, w, stride);
                in_c = w;
            }
        }
        if variant.has_attention() {
            total += AttnBlock::param_formula(WIDTHS[2]) + AttnBlock::param_formula(WIDTHS[3]);
        }
        total
    }

    /// Attention gates, if any, in forward order.
    pub fn attention_blocks_mut(&mut self) -> Vec<&mut AttnBlock> {
        self.attn3.iter_mut().chain(self.attn4.iter_mut()).collect()
    }
}

impl Module for Encoder {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = x.spec();
        if s.channels != CHANNELS {
            return Err(Error::Shape(format!(
                "encoder expects {CHANNELS} input channels, got {}",
                s.channels
            )));
        }
        if s.height % DOWNSAMPLE != 0 || s.width % DOWNSAMPLE != 0 || s.height == 0 || s.width == 0 {
            return Err(Error::Shape(format!(
                "encoder input extent {}x{} must be a positive multiple of {DOWNSAMPLE}",
                s.height, s.width
            )));
        }
        let h = self.stem_conv.forward(x, mode)?;
        let h = self.stem_bn.forward(&h, mode)?;
        let mut h = self.stem_relu.forward(&h, mode)?;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for block in layer.iter_mut() {
                h = block.forward(&h, mode)?;
            }
            if i == 2 {
                if let Some(a) = &mut self.attn3 {
                    h = a.forward(&h, mode)?;
                }
            }
        }
        if let Some(a) = &mut self.attn4 {
            h = a.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        if let Some(a) = &mut self.attn4 {
            g = a.backward(&g)?;
        }
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            if i == 2 {
                if let Some(a) = &mut self.attn3 {
                    g = a.backward(&g)?;
                }
            }
            for block in layer.iter_mut().rev() {
                g = block.backward(&g)?;
            }
        }
        let g = self.stem_relu.backward(&g)?;
        let g = self.stem_bn.backward(&g)?;
        self.stem_conv.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem_conv.visit(&join(prefix, "conv1"), f);
        self.stem_bn.visit(&join(prefix, "bn1"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, b) in layer.iter().enumerate() {
                b.visit(&join(prefix, &format!("layer{}.{j}", i + 1)), f);
            }
        }
        if let Some(a) = &self.attn3 {
            a.visit(&join(prefix, "attn1"), f);
        }
        if let Some(a) = &self.attn4 {
            a.visit(&join(prefix, "attn2"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem_conv.visit_mut(&join(prefix, "conv1"), f);
        self.stem_bn.visit_mut(&join(prefix, "bn1"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (j, b) in layer.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("layer{}.{j}", i + 1)), f);
            }
        }
        if let Some(a) = &mut self.attn3 {
            a.visit_mut(&join(prefix, "attn1"), f);
        }
        if let Some(a) = &mut self.attn4 {
            a.visit_mut(&join(prefix, "attn2"), f);
        }
    }
}

/// Runs the encoder and checks the embedding shape.
pub fn forward_embed(encoder: &mut Encoder, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    let s = batch.spec();
    let z = encoder.forward(batch, mode)?;
    let want = TensorSpec::new(s.batch, EMBED_CHANNELS, s.height / DOWNSAMPLE, s.width / DOWNSAMPLE);
    if z.spec() != want {
        return Err(Error::Shape(format!("embedding is {:?}, expected {want:?}", z.spec())));
    }
    if !z.all_finite() {
        return Err(Error::NonFinite("encoder embedding".into()));
    }
    Ok(z)
}

/// Global spatial average: `[B, C, H, W]` to `[B, C]` (returned as `[B, C, 1, 1]`).
pub fn pool_embedding(latent: &Tensor) -> Tensor {
    let s = latent.spec();
    let plane = s.plane();
    let data = latent
        .data()
        .chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::from_vec(TensorSpec::new(s.batch, s.channels, 1, 1), data).expect("pooled length matches")
}

/// Gradient of [`pool_embedding`]: spreads each pooled gradient evenly over the plane.
pub fn pool_embedding_backward(grad: &Tensor, latent_spec: TensorSpec) -> Tensor {
    let plane = latent_spec.plane();
    let mut out = Tensor::zeros(latent_spec);
    for (dst, &g) in out.data_mut().chunks_mut(plane).zip(grad.data()) {
        dst.fill(g / plane as f32);
    }
    out
}
