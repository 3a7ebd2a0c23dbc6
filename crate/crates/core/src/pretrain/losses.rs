use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tensor, TensorSpec};

/// `½ Σ (μ² + e^lv − 1 − lv) / B` with gradients w.r.t. `mu` and `logvar`.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if mu.spec() != logvar.spec() {
        return Err(Error::Shape(format!(
            "kl between mu {:?} and logvar {:?}",
            mu.spec(),
            logvar.spec()
        )));
    }
    let b = mu.spec().batch as f64;
    let mut dmu = Tensor::zeros(mu.spec());
    let mut dlv = Tensor::zeros(mu.spec());
    let mut sum = 0.0f64;
    for (i, (&m, &lv)) in mu.data().iter().zip(logvar.data()).enumerate() {
        let (m64, lv64) = (m as f64, lv as f64);
        let e = lv64.exp();
        sum += m64 * m64 + e - 1.0 - lv64;
        dmu.data_mut()[i] = (m64 / b) as f32;
        dlv.data_mut()[i] = (0.5 * (e - 1.0) / b) as f32;
    }
    Ok((0.5 * sum / b, dmu, dlv))
}

/// Gradients of [`triplet_loss`] w.r.t. each input, `[B, D, 1, 1]`.
#[derive(Clone, Debug)]
pub struct TripletGrads {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Per-row anchor-positive and anchor-negative euclidean distances.
pub fn triplet_distances(za: &Tensor, zp: &Tensor, zn: &Tensor) -> Vec<(f64, f64)> {
    (0..za.spec().batch)
        .map(|b| (l2(za.item(b), zp.item(b)), l2(za.item(b), zn.item(b))))
        .collect()
}

/// Batch mean of `max(0, ‖a − p‖ − ‖a − n‖ + margin)` over rows of pooled embeddings.
///
/// A zero distance contributes a zero subgradient.
pub fn triplet_loss(za: &Tensor, zp: &Tensor, zn: &Tensor, margin: f64) -> Result<(f64, TripletGrads)> {
    let s = za.spec();
    if zp.spec() != s || zn.spec() != s {
        return Err(Error::Shape(format!(
            "triplet inputs {:?}, {:?}, {:?}",
            s,
            zp.spec(),
            zn.spec()
        )));
    }
    let nb = s.batch as f64;
    let mut grads = TripletGrads {
        anchor: Tensor::zeros(s),
        positive: Tensor::zeros(s),
        negative: Tensor::zeros(s),
    };
    let mut total = 0.0;
    for (b, (dp, dn)) in triplet_distances(za, zp, zn).into_iter().enumerate() {
        let hinge = dp - dn + margin;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        let (a, p, n) = (za.item(b), zp.item(b), zn.item(b));
        let ga = grads.anchor.item_mut(b);
        for i in 0..a.len() {
            let mut g = 0.0f64;
            if dp > 0.0 {
                g += (a[i] as f64 - p[i] as f64) / dp;
            }
            if dn > 0.0 {
                g -= (a[i] as f64 - n[i] as f64) / dn;
            }
            ga[i] = (g / nb) as f32;
        }
        if dp > 0.0 {
            for (g, (&x, &y)) in grads.positive.item_mut(b).iter_mut().zip(a.iter().zip(p)) {
                *g = (-(x as f64 - y as f64) / dp / nb) as f32;
            }
        }
        if dn > 0.0 {
            for (g, (&x, &y)) in grads.negative.item_mut(b).iter_mut().zip(a.iter().zip(n)) {
                *g = ((x as f64 - y as f64) / dn / nb) as f32;
            }
        }
    }
    Ok((total / nb, grads))
}

/// Augmentation strength by epoch: zero through the warm-up, then a linear
/// ramp reaching 1 after `ramp_epochs` more epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub warmup_epochs: usize,
    pub ramp_epochs: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 5,
            ramp_epochs: 10,
        }
    }
}

impl CurriculumSchedule {
    /// Intensity for the zero-based `epoch`.
    pub fn intensity(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return 0.0;
        }
        if self.ramp_epochs == 0 {
            return 1.0;
        }
        ((epoch - self.warmup_epochs + 1) as f64 / self.ramp_epochs as f64).clamp(0.0, 1.0)
    }
}

/// Rows of a `[B, D]` embedding as a `[B, D, 1, 1]` tensor.
pub fn embedding_rows(rows: &[Vec<f32>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    Tensor::from_vec(TensorSpec::new(rows.len(), d, 1, 1), rows.concat())
}
