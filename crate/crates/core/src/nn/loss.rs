//! Scalar losses returning `(value, d value / d input)`.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Label value excluded from cross-entropy.
pub const IGNORE_LABEL: u8 = 0;

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.spec() != target.spec() {
        return Err(Error::Shape(format!(
            "mse between {:?} and {:?}",
            pred.spec(),
            target.spec()
        )));
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.spec());
    let mut sum = 0.0f64;
    let scale = (2.0 / n) as f32;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum += (d as f64) * (d as f64);
        *g = scale * d;
    }
    Ok((sum / n, grad))
}

/// Pixel-wise cross-entropy over `[B, nc, H, W]` logits against class indices `[B, H, W]`.
///
/// `labels` holds channel indices; pixels whose *code* equals [`IGNORE_LABEL`] must be
/// passed as `None`. The value is the mean negative log-softmax of the true class
/// over non-ignored pixels.
pub fn cross_entropy_masked(logits: &Tensor, labels: &[Option<u8>]) -> Result<(f64, Tensor)> {
    let s = logits.spec();
    let plane = s.plane();
    if labels.len() != s.batch * plane {
        return Err(Error::Shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            s
        )));
    }
    let counted = labels.iter().filter(|l| l.is_some()).count();
    if counted == 0 {
        return Err(Error::AllIgnored);
    }
    let nc = s.channels;
    let inv = 1.0 / counted as f64;
    let mut grad = Tensor::zeros(s);
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; nc];
    for b in 0..s.batch {
        let item = logits.item(b);
        let gitem = grad.item_mut(b);
        for p in 0..plane {
            let Some(label) = labels[b * plane + p] else {
                continue;
            };
            let label = label as usize;
            if label >= nc {
                return Err(Error::Shape(format!("label {label} with {nc} classes")));
            }
            let max = (0..nc)
                .map(|c| item[c * plane + p])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut z = 0.0f64;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (item[c * plane + p] as f64 - max).exp();
                z += *pr;
            }
            total += z.ln() + max - item[label * plane + p] as f64;
            for (c, pr) in probs.iter().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                gitem[c * plane + p] = ((pr / z - onehot) * inv) as f32;
            }
        }
    }
    Ok((total * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::TensorSpec;
    use rand::{Rng, SeedableRng};

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::zeros(TensorSpec::new(2, 6, 3, 3));
        let labels = vec![Some(2u8); 18];
        let (l, _) = cross_entropy_masked(&logits, &labels).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn confident_correct_logits_give_small_loss() {
        let mut logits = Tensor::zeros(TensorSpec::new(1, 3, 2, 2));
        for p in 0..4 {
            logits.data_mut()[4 + p] = 50.0;
        }
        let (l, _) = cross_entropy_masked(&logits, &[Some(1); 4]).unwrap();
        assert!(l < 1e-3);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let logits = Tensor::zeros(TensorSpec::new(1, 3, 2, 2));
        assert!(matches!(
            cross_entropy_masked(&logits, &[None; 4]),
            Err(Error::AllIgnored)
        ));
    }

    #[test]
    fn cross_entropy_matches_per_pixel_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let s = TensorSpec::new(2, 4, 3, 5);
        let logits = Tensor::randn(s, &mut rng);
        let labels: Vec<Option<u8>> = (0..2 * 15)
            .map(|_| {
                let v: u8 = rng.random_range(0..5);
                (v < 4).then_some(v)
            })
            .collect();
        let (l, _) = cross_entropy_masked(&logits, &labels).unwrap();
        let mut total = 0.0f64;
        let mut n = 0;
        for b in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    if let Some(t) = labels[b * 15 + y * 5 + x] {
                        let z: f64 = (0..4).map(|c| (logits.at(b, c, y, x) as f64).exp()).sum();
                        total -= ((logits.at(b, t as usize, y, x) as f64).exp() / z).ln();
                        n += 1;
                    }
                }
            }
        }
        assert!((l - total / n as f64).abs() < 1e-6);
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let t = Tensor::full(TensorSpec::new(1, 2, 2, 2), 0.7);
        let (l, g) = mse(&t, &t).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
