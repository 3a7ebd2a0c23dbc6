//! End-to-end finite-difference checks of the pretraining objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::objectives::{csf_pass, triplet_pass};
use super::run::Objective;
use super::vae::{vae_pass, VaeHead};
use crate::data::CHANNELS;
use crate::encoders::{Encoder, EncoderVariant, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::nn::{flatten_grads, flatten_params, grad_check_with, load_params, GradCheckConfig, GradCheckReport};
use crate::nn::{Module, Tensor, TensorSpec};

/// Spatial side of the reduced-scale check inputs.
pub const CHECK_INPUT_SIZE: usize = 32;
const CHECK_BATCH: usize = 2;
/// A single VAE input keeps the number of ReLUs, and so the share of
/// coordinates that straddle a kink, low enough for the full sample.
const VAE_CHECK_BATCH: usize = 1;
/// Large enough that every hinge stays active, so the loss is smooth in the weights.
const CHECK_MARGIN: f64 = 100.0;

/// Checks the gradient of one objective's total loss with respect to all
/// trainable weights (encoder plus any objective head) on random 32x32 inputs.
///
/// The full-width networks make each evaluation costly; expect about a
/// minute of CPU per objective at the default 64 coordinates.
pub fn check_objective_gradients(
    objective: Objective,
    variant: EncoderVariant,
    seed: u64,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut encoder = Encoder::new(variant, seed);
    let spec = TensorSpec::new(CHECK_BATCH, CHANNELS, CHECK_INPUT_SIZE, CHECK_INPUT_SIZE);
    match objective {
        Objective::None => Err(Error::InvalidConfig("objective none has no loss".into())),
        Objective::Vae => {
            let spec = TensorSpec::new(VAE_CHECK_BATCH, CHANNELS, CHECK_INPUT_SIZE, CHECK_INPUT_SIZE);
            let mut head = VaeHead::new(8, seed ^ 1)?;
            let x = Tensor::randn(spec, &mut rng);
            let side = CHECK_INPUT_SIZE / DOWNSAMPLE;
            let eps = Tensor::randn(TensorSpec::new(VAE_CHECK_BATCH, 8, side, side), &mut rng);
            let enc_len = flatten_params(&encoder).len();
            let mut p0 = flatten_params(&encoder);
            p0.extend(flatten_params(&head));
            grad_check_with(
                &p0,
                |p, with_grad| {
                    load_params(&mut encoder, &p[..enc_len]);
                    load_params(&mut head, &p[enc_len..]);
                    encoder.zero_grad();
                    head.zero_grad();
                    let parts = vae_pass(&x, &mut encoder, &mut head, 1.0, Some(&eps), with_grad)?;
                    let mut g = flatten_grads(&encoder);
                    g.extend(flatten_grads(&head));
                    Ok((parts.total, g))
                },
                cfg,
            )
        }
        Objective::T2v => {
            let a = Tensor::randn(spec, &mut rng);
            let p = Tensor::randn(spec, &mut rng);
            let n = Tensor::randn(spec, &mut rng);
            let p0 = flatten_params(&encoder);
            grad_check_with(
                &p0,
                |w, with_grad| {
                    load_params(&mut encoder, w);
                    encoder.zero_grad();
                    let out = triplet_pass(&mut encoder, &a, &p, &n, CHECK_MARGIN, with_grad)?;
                    Ok((out.loss, flatten_grads(&encoder)))
                },
                cfg,
            )
        }
        Objective::Csf => {
            let full = CHECK_INPUT_SIZE + 8;
            let samples: Vec<Tensor> = (0..3)
                .map(|_| Tensor::randn(TensorSpec::new(1, CHANNELS, full, full), &mut rng))
                .collect();
            let p0 = flatten_params(&encoder);
            grad_check_with(
                &p0,
                |w, with_grad| {
                    load_params(&mut encoder, w);
                    encoder.zero_grad();
                    let out = csf_pass(&samples, &mut encoder, CHECK_INPUT_SIZE, 1.0, CHECK_MARGIN, seed, with_grad)?;
                    Ok((out.loss, flatten_grads(&encoder)))
                },
                cfg,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn none_has_no_loss() {
        let r = check_objective_gradients(Objective::None, EncoderVariant::ResNet18, 0, GradCheckConfig::default());
        assert!(r.is_err());
    }
}
