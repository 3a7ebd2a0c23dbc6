//! Encoder variants, the deconvolutional segmentation header, and the blocks
//! they are assembled from.
//!
//! Encoder convolutions are bias-free and header/attention convolutions carry
//! biases; that convention is the one for which every layer count below is
//! exact.

mod blocks;
mod checkpoint;
mod encoder;
mod header;

pub use blocks::{AttnBlock, DownBlock, UpBlock};
pub use checkpoint::{ArchDescriptor, ArrayInfo, Checkpoint, CHECKPOINT_VERSION};
pub use encoder::{
    forward_embed, pool_embedding, pool_embedding_backward, Encoder, EncoderVariant, DOWNSAMPLE,
    EMBED_CHANNELS,
};
pub use header::{DeconvHeader, SegmentationModel, UpStack, DEFAULT_HEADER_CLASSES};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::Module;

pub fn build_encoder(variant: &str, seed: u64) -> Result<Encoder> {
    Ok(Encoder::new(variant.parse()?, seed))
}

pub fn build_deconv_header(classes: usize, seed: u64) -> Result<DeconvHeader> {
    DeconvHeader::new(classes, seed)
}

pub fn build_attn_block(channels: usize, seed: u64) -> Result<AttnBlock> {
    AttnBlock::new(channels, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Trainable scalar count of any network.
pub fn count_parameters(network: &dyn Module) -> usize {
    network.num_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_module;
    use crate::nn::{Mode, Tensor, TensorSpec};

    #[test]
    fn down_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        check_module(&mut DownBlock::new(4, 4, 1, &mut rng), TensorSpec::new(2, 4, 8, 8), 0.1, 1);
        check_module(&mut DownBlock::new(4, 8, 2, &mut rng), TensorSpec::new(2, 4, 8, 8), 0.1, 2);
    }

    #[test]
    fn up_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        check_module(&mut UpBlock::new(8, &mut rng), TensorSpec::new(2, 8, 4, 4), 0.1, 3);
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut a = AttnBlock::new(16, &mut rng).unwrap();
        a.gamma.value[0] = 0.7;
        check_module(&mut a, TensorSpec::new(2, 16, 8, 8), 1.0, 4);
    }

    #[test]
    fn builders_validate() {
        assert!(build_encoder("vgg", 0).is_err());
        assert!(build_attn_block(20, 0).is_err());
        assert_eq!(count_parameters(&build_attn_block(256, 0).unwrap()), 82_241);
    }

    #[test]
    fn per_layer_counts() {
        let counts = |v| {
            Encoder::new(v, 0)
                .layer_param_counts()
                .into_iter()
                .map(|(_, n)| n)
                .collect::<Vec<_>>()
        };
        assert_eq!(
            counts(EncoderVariant::ResNet18),
            vec![43_904, 128, 147_968, 525_568, 2_099_712, 8_393_728]
        );
        assert_eq!(
            counts(EncoderVariant::ResNet34),
            vec![43_904, 128, 221_952, 1_116_416, 6_822_400, 13_114_368]
        );
        assert_eq!(
            counts(EncoderVariant::ResNet18Attn),
            vec![43_904, 128, 147_968, 525_568, 2_099_712, 82_241, 8_393_728, 328_321]
        );
        for v in EncoderVariant::ALL {
            assert_eq!(Encoder::new(v, 0).num_params(), Encoder::param_formula(v));
        }
    }

    #[test]
    fn closed_gate_matches_plain_topology() {
        let mut attn = Encoder::new(EncoderVariant::ResNet18Attn, 5);
        let mut plain = Encoder::new(EncoderVariant::ResNet18, 0);
        let mut ck = Checkpoint::new(ArchDescriptor {
            encoder: EncoderVariant::ResNet18Attn,
            header_classes: None,
            objective: None,
            seed: 5,
        });
        ck.add("", &attn);
        ck.arrays.retain(|(i, _)| !i.name.starts_with("attn"));
        ck.restore("", &mut plain).unwrap();
        let x = Tensor::randn(TensorSpec::new(1, 14, 32, 32), &mut ChaCha8Rng::seed_from_u64(6));
        let a = attn.forward(&x, Mode::Eval).unwrap();
        let b = plain.forward(&x, Mode::Eval).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-5);
    }
}
