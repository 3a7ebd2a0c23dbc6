use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::csf_augment;
use super::losses::{triplet_distances, triplet_loss};
use crate::encoders::{pool_embedding, pool_embedding_backward, Encoder};
use crate::error::{Error, Result};
use crate::nn::{Mode, Module, Tensor};

/// Loss value plus the per-row positive and negative embedding distances.
#[derive(Clone, Debug)]
pub struct TripletOutcome {
    pub loss: f64,
    pub distances: Vec<(f64, f64)>,
}

/// Embeds three equally sized batches with one shared forward pass and
/// backpropagates the triplet hinge through the encoder.
pub fn embed_triplets(
    encoder: &mut Encoder,
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    margin: f64,
) -> Result<TripletOutcome> {
    triplet_pass(encoder, anchor, positive, negative, margin, true)
}

pub(crate) fn triplet_pass(
    encoder: &mut Encoder,
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    margin: f64,
    backward: bool,
) -> Result<TripletOutcome> {
    let b = anchor.spec().batch;
    let x = Tensor::cat_batch(&[anchor, positive, negative])?;
    let latent = encoder.forward(&x, Mode::Train)?;
    let pooled = pool_embedding(&latent);
    let (za, zp, zn) = (
        pooled.slice_batch(0, b),
        pooled.slice_batch(b, b),
        pooled.slice_batch(2 * b, b),
    );
    let (loss, g) = triplet_loss(&za, &zp, &zn, margin)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("triplet loss".into()));
    }
    if backward {
            let dpooled = Tensor::cat_batch(&[&g.anchor, &g.positive, &g.negative])?;
        encoder.backward(&pool_embedding_backward(&dpooled, latent.spec()))?;
    }
    Ok(TripletOutcome {
        loss,
        distances: triplet_distances(&za, &zp, &zn),
    })
}

/// Tile2vec: anchor, geographic neighbour, and distant tiles share the encoder.
pub fn t2v_loss(
    encoder: &mut Encoder,
    anchor: &Tensor,
    neighbor: &Tensor,
    distant: &Tensor,
    margin: f64,
) -> Result<TripletOutcome> {
    embed_triplets(encoder, anchor, neighbor, distant, margin)
}

/// Contrastive sensor fusion on a batch of normalized `[1, 14, H, W]` samples.
///
/// Each sample yields two independently augmented `view_size` views; the
/// second view of another, randomly chosen batch member is the negative.
pub fn csf_loss(
    samples: &[Tensor],
    encoder: &mut Encoder,
    view_size: usize,
    intensity: f64,
    margin: f64,
    seed: u64,
) -> Result<TripletOutcome> {
    csf_pass(samples, encoder, view_size, intensity, margin, seed, true)
}

pub(crate) fn csf_pass(
    samples: &[Tensor],
    encoder: &mut Encoder,
    view_size: usize,
    intensity: f64,
    margin: f64,
    seed: u64,
    backward: bool,
) -> Result<TripletOutcome> {
    let b = samples.len();
    if b < 2 {
        return Err(Error::InvalidConfig("csf needs a batch of at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::with_capacity(b);
    let mut second = Vec::with_capacity(b);
    for s in samples {
        first.push(csf_augment(s, view_size, intensity, rng.next_u64())?.0);
        second.push(csf_augment(s, view_size, intensity, rng.next_u64())?.0);
    }
    let negatives: Vec<usize> = (0..b).map(|i| (i + 1 + rng.random_range(0..b - 1)) % b).collect();

    let views: Vec<&Tensor> = first.iter().chain(second.iter()).collect();
    let x = Tensor::cat_batch(&views)?;
    let latent = encoder.forward(&x, Mode::Train)?;
    let pooled = pool_embedding(&latent);
    let z1 = pooled.slice_batch(0, b);
    let z2 = pooled.slice_batch(b, b);
    let neg_rows: Vec<&[f32]> = negatives.iter().map(|&j| z2.item(j)).collect();
    let zn = Tensor::from_vec(z1.spec(), neg_rows.concat())?;
    let (loss, g) = triplet_loss(&z1, &z2, &zn, margin)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("csf loss".into()));
    }
    if backward {
        let mut d2 = g.positive.clone();
        for (i, &j) in negatives.iter().enumerate() {
            for (d, &v) in d2.item_mut(j).iter_mut().zip(g.negative.item(i)) {
                *d += v;
            }
        }
        let dpooled = Tensor::cat_batch(&[&g.anchor, &d2])?;
        encoder.backward(&pool_embedding_backward(&dpooled, latent.spec()))?;
    }
    Ok(TripletOutcome {
        loss,
        distances: triplet_distances(&z1, &z2, &zn),
    })
}
