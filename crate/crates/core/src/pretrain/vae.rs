use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::kl_divergence;
use crate::data::CHANNELS;
use crate::encoders::{Encoder, UpStack, EMBED_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::loss::mse;
use crate::nn::module::join;
use crate::nn::ops::ConvGeometry;
use crate::nn::{Conv2d, Mode, Module, Param, Tensor, TensorSpec};

pub const DEFAULT_LATENT_CHANNELS: usize = 32;

/// Variational bottleneck and decoder on top of an encoder's `[B, 512, h, w]` latent.
///
/// 1x1 convolutions reduce the latent to `L` mean and log-variance channels
/// on the same spatial grid; the decoder lifts a sample back to 512 channels
/// and upsamples to the 14-channel input.
#[derive(Clone, Debug)]
pub struct VaeHead {
    pub latent_channels: usize,
    mu_conv: Conv2d,
    logvar_conv: Conv2d,
    lift: Conv2d,
    ups: UpStack,
    out_conv: Conv2d,
    cache: Option<VaeCache>,
}

#[derive(Clone, Debug)]
struct VaeCache {
    eps: Tensor,
    logvar: Tensor,
}

/// Output of [`VaeHead::forward_parts`].
#[derive(Clone, Debug)]
pub struct VaeForward {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub reconstruction: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

impl VaeHead {
    pub fn new(latent_channels: usize, seed: u64) -> Result<Self> {
        if latent_channels == 0 {
            return Err(Error::InvalidConfig("latent_channels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pw = ConvGeometry::new(1, 1, 0);
        let mu_conv = Conv2d::new(EMBED_CHANNELS, latent_channels, pw, true, &mut rng);
        let logvar_conv = Conv2d::new(EMBED_CHANNELS, latent_channels, pw, true, &mut rng);
        let lift = Conv2d::new(latent_channels, EMBED_CHANNELS, pw, true, &mut rng);
        let ups = UpStack::new(EMBED_CHANNELS, &mut rng);
        let out_conv = Conv2d::new(ups.out_channels(), CHANNELS, pw, true, &mut rng);
        // Start near a unit posterior variance.
        let mut head = Self {
            latent_channels,
            mu_conv,
            logvar_conv,
            lift,
            ups,
            out_conv,
            cache: None,
        };
        head.logvar_conv.weight.value.iter_mut().for_each(|w| *w *= 0.01);
        Ok(head)
    }

    /// Encodes, samples `z = mu + exp(logvar / 2) * eps`, and decodes.
    /// `eps` of `None` decodes the mean.
    pub fn forward_parts(&mut self, latent: &Tensor, eps: Option<&Tensor>, mode: Mode) -> Result<VaeForward> {
        let mu = self.mu_conv.forward(latent, mode)?;
        let logvar = self.logvar_conv.forward(latent, mode)?;
        let eps = match eps {
            Some(e) if e.spec() == mu.spec() => e.clone(),
            Some(e) => {
                return Err(Error::Shape(format!("noise {:?} for latent {:?}", e.spec(), mu.spec())))
            }
            None => Tensor::zeros(mu.spec()),
        };
        let mut z = mu.clone();
        for ((zv, &lv), &e) in z.data_mut().iter_mut().zip(logvar.data()).zip(eps.data()) {
            *zv += (0.5 * lv).exp() * e;
        }
        let h = self.lift.forward(&z, mode)?;
        let h = self.ups.forward(&h, mode)?;
        let reconstruction = self.out_conv.forward(&h, mode)?;
        self.cache = Some(VaeCache {
            eps,
            logvar: logvar.clone(),
        });
        Ok(VaeForward {
            mu,
            logvar,
            reconstruction,
        })
    }

    /// Backpropagates reconstruction and KL gradients to the encoder latent.
    pub fn backward_parts(&mut self, d_recon: &Tensor, d_mu_kl: &Tensor, d_logvar_kl: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("vae head: backward without forward".into()))?;
        let g = self.out_conv.backward(d_recon)?;
        let g = self.ups.backward(&g)?;
        let dz = self.lift.backward(&g)?;
        let mut dmu = dz.clone();
        dmu.add_assign(d_mu_kl);
        let mut dlv = d_logvar_kl.clone();
        for (((d, &gz), &lv), &e) in dlv
            .data_mut()
            .iter_mut()
            .zip(dz.data())
            .zip(cache.logvar.data())
            .zip(cache.eps.data())
        {
            *d += gz * e * 0.5 * (0.5 * lv).exp();
        }
        let mut dlatent = self.mu_conv.backward(&dmu)?;
        dlatent.add_assign(&self.logvar_conv.backward(&dlv)?);
        Ok(dlatent)
    }

    pub fn latent_spec(&self, latent: TensorSpec) -> TensorSpec {
        TensorSpec::new(latent.batch, self.latent_channels, latent.height, latent.width)
    }
}

impl Module for VaeHead {
    /// Deterministic (mean) reconstruction.
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_parts(x, None, mode)?.reconstruction)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let spec = self
            .cache
            .as_ref()
            .map(|c| c.logvar.spec())
            .ok_or_else(|| Error::Shape("vae head: backward without forward".into()))?;
        let zero = Tensor::zeros(spec);
        self.backward_parts(grad, &zero, &zero)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.mu_conv.visit(&join(prefix, "mu"), f);
        self.logvar_conv.visit(&join(prefix, "logvar"), f);
        self.lift.visit(&join(prefix, "lift"), f);
        self.ups.visit(&join(prefix, "decoder"), f);
        self.out_conv.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.mu_conv.visit_mut(&join(prefix, "mu"), f);
        self.logvar_conv.visit_mut(&join(prefix, "logvar"), f);
        self.lift.visit_mut(&join(prefix, "lift"), f);
        self.ups.visit_mut(&join(prefix, "decoder"), f);
        self.out_conv.visit_mut(&join(prefix, "out"), f);
    }
}

/// `MSE(x̂, x) + β KL` for one batch, accumulating gradients into both networks.
pub fn vae_loss(
    x: &Tensor,
    encoder: &mut Encoder,
    head: &mut VaeHead,
    kl_weight: f64,
    eps: Option<&Tensor>,
) -> Result<VaeLoss> {
    vae_pass(x, encoder, head, kl_weight, eps, true)
}

pub(crate) fn vae_pass(
    x: &Tensor,
    encoder: &mut Encoder,
    head: &mut VaeHead,
    kl_weight: f64,
    eps: Option<&Tensor>,
    backward: bool,
) -> Result<VaeLoss> {
    let latent = encoder.forward(x, Mode::Train)?;
    let out = head.forward_parts(&latent, eps, Mode::Train)?;
    let (recon, d_recon) = mse(&out.reconstruction, x)?;
    let (kl, mut dmu, mut dlv) = kl_divergence(&out.mu, &out.logvar)?;
    let total = recon + kl_weight * kl;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("vae loss (recon {recon}, kl {kl})")));
    }
    if backward {
        dmu.scale(kl_weight as f32);
        dlv.scale(kl_weight as f32);
        let dlatent = head.backward_parts(&d_recon, &dmu, &dlv)?;
        encoder.backward(&dlatent)?;
    }
    Ok(VaeLoss { total, recon, kl })
}
