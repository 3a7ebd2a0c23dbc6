use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Label code for pixels without a land-cover class; ignored by the loss and
/// by every metric.
pub const NO_DATA: u8 = 0;

/// Level-0 land-cover classes scored by the evaluation, keyed by label code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    /// `(code, name)` with contiguous codes starting at 1.
    pub classes: Vec<(u8, String)>,
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        let names = [
            "Urban and built-up",
            "Agriculture and mixed",
            "Natural",
            "Wetlands",
            "Permanent water",
        ];
        Self {
            classes: names.iter().enumerate().map(|(i, n)| (i as u8 + 1, n.to_string())).collect(),
        }
    }
}

impl ClassTaxonomy {
    /// Number of scored classes.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Row/column of `code` in the confusion matrix, if scored.
    pub fn index(&self, code: u8) -> Option<usize> {
        let i = (code as usize).checked_sub(1)?;
        (i < self.len()).then_some(i)
    }

    pub fn code(&self, index: usize) -> u8 {
        self.classes[index].0
    }

    pub fn name(&self, index: usize) -> &str {
        &self.classes[index].1
    }

    /// Logit channel trained for a label code: scored codes map to their own
    /// channel, any other non-zero code to the last ("other") channel, and
    /// no-data to `None`.
    pub fn label_channel(&self, code: u8, channels: usize) -> Option<u8> {
        if code == NO_DATA {
            return None;
        }
        if self.index(code).is_some() && (code as usize) < channels {
            return Some(code);
        }
        (channels > self.len() + 1).then(|| (channels - 1) as u8)
    }

    /// Per-pixel argmax over the scored channels `1..=len` of `[B, nc, H, W]`
    /// logits, returned as codes. The no-data and "other" channels never win,
    /// so every prediction lands in a scored class.
    pub fn predict(&self, logits: &Tensor) -> Result<Vec<u8>> {
        let s = logits.spec();
        if s.channels <= self.len() {
            return Err(Error::Shape(format!(
                "{} logit channels cannot hold {} classes after the no-data channel",
                s.channels,
                self.len()
            )));
        }
        let plane = s.plane();
        let mut out = Vec::with_capacity(s.batch * plane);
        for b in 0..s.batch {
            let item = logits.item(b);
            for p in 0..plane {
                let mut best = 1;
                for c in 2..=self.len() {
                    if item[c * plane + p] > item[best * plane + p] {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
        Ok(out)
    }
}

/// Square confusion counts over scored classes; rows are truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    /// Pixels per truth class.
    pub fn truth_counts(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.truth_counts().iter().sum()
    }
}

/// Counts every pixel whose truth is a scored class. Predictions must be
/// scored codes.
pub fn confusion_matrix(pred: &[u8], truth: &[u8], taxonomy: &ClassTaxonomy) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut cm = ConfusionMatrix::zeros(taxonomy.len());
    for (&p, &t) in pred.iter().zip(truth) {
        let Some(ti) = taxonomy.index(t) else {
            continue;
        };
        let pi = taxonomy
            .index(p)
            .ok_or_else(|| Error::Shape(format!("prediction {p} is not a scored class")))?;
        cm.counts[ti][pi] += 1;
    }
    Ok(cm)
}

/// `TP / (TP + FP + FN)` per class; `None` marks a class absent from both
/// truth and prediction.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let k = cm.classes();
    (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let fn_ = cm.counts[c].iter().sum::<u64>() - tp;
            let fp = (0..k).map(|r| cm.counts[r][c]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Share of truth pixels per class; all zero when no pixel is scored.
pub fn class_weights(cm: &ConfusionMatrix) -> Vec<f64> {
    let rows = cm.truth_counts();
    let total: u64 = rows.iter().sum();
    rows.iter()
        .map(|&r| if total == 0 { 0.0 } else { r as f64 / total as f64 })
        .collect()
}

/// `Σ w_c · iou_c` over present classes with the weights renormalized over
/// them; `None` when no present class carries weight.
pub fn weighted_mean_iou(iou: &[Option<f64>], weights: &[f64]) -> Option<f64> {
    let (num, den) = iou
        .iter()
        .zip(weights)
        .filter_map(|(i, &w)| i.map(|v| (v, w)))
        .fold((0.0, 0.0), |(n, d), (v, w)| (n + w * v, d + w));
    (den > 0.0).then(|| num / den)
}

/// Which pretraining objective and encoder produced a result.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub pretrain: String,
    pub encoder: String,
}

/// Test-set metrics of one fine-tuned model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cell: Cell,
    /// IoU per class code; `null` for classes absent from truth and prediction.
    pub iou: BTreeMap<u8, Option<f64>>,
    /// The same with absent classes reported as 0.
    pub iou_zero_filled: BTreeMap<u8, f64>,
    pub class_names: BTreeMap<u8, String>,
    /// Truth pixel share per class code.
    pub class_weights: BTreeMap<u8, f64>,
    pub weighted_miou: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub n_test_pixels: u64,
    /// One-based fine-tuning epoch whose weights were evaluated.
    pub selected_epoch: usize,
    /// Trainable parameters of encoder plus header.
    pub parameters: usize,
}

impl EvalReport {
    pub fn from_confusion(
        cell: Cell,
        cm: &ConfusionMatrix,
        taxonomy: &ClassTaxonomy,
        selected_epoch: usize,
        parameters: usize,
    ) -> Self {
        let iou = iou_per_class(cm);
        let weights = class_weights(cm);
        let by_code = |f: &dyn Fn(usize) -> f64| -> BTreeMap<u8, f64> {
            (0..taxonomy.len()).map(|i| (taxonomy.code(i), f(i))).collect()
        };
        Self {
            cell,
            iou: (0..taxonomy.len()).map(|i| (taxonomy.code(i), iou[i])).collect(),
            iou_zero_filled: by_code(&|i| iou[i].unwrap_or(0.0)),
            class_names: (0..taxonomy.len())
                .map(|i| (taxonomy.code(i), taxonomy.name(i).to_string()))
                .collect(),
            class_weights: by_code(&|i| weights[i]),
            weighted_miou: weighted_mean_iou(&iou, &weights),
            confusion: cm.counts.clone(),
            n_test_pixels: cm.total(),
            selected_epoch,
            parameters,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("eval report", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::json("eval report", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TensorSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn taxonomy_codes() {
        let t = ClassTaxonomy::default();
        assert_eq!(t.len(), 5);
        assert_eq!(t.name(0), "Urban and built-up");
        assert_eq!(t.name(4), "Permanent water");
        assert_eq!((t.index(0), t.index(1), t.index(5), t.index(6)), (None, Some(0), Some(4), None));
        assert_eq!(t.label_channel(0, 7), None);
        assert_eq!(t.label_channel(3, 7), Some(3));
        assert_eq!(t.label_channel(9, 7), Some(6));
        assert_eq!(t.label_channel(9, 6), None);
    }

    #[test]
    fn predict_ignores_unscored_channels() {
        let t = ClassTaxonomy::default();
        let mut logits = Tensor::zeros(TensorSpec::new(1, 7, 1, 2));
        // Pixel 0: no-data channel is largest, then class 4.
        logits.data_mut()[0] = 9.0;
        logits.data_mut()[4 * 2] = 1.0;
        // Pixel 1: "other" channel is largest, then class 2.
        logits.data_mut()[6 * 2 + 1] = 9.0;
        logits.data_mut()[2 * 2 + 1] = 0.5;
        assert_eq!(t.predict(&logits).unwrap(), vec![4, 2]);
        assert!(t.predict(&Tensor::zeros(TensorSpec::new(1, 5, 1, 1))).is_err());
    }

    #[test]
    fn perfect_and_disjoint() {
        let t = ClassTaxonomy::default();
        let truth = [1, 2, 3, 0, 2, 1];
        let cm = confusion_matrix(&truth.map(|v| if v == 0 { 5 } else { v }), &truth, &t).unwrap();
        for (r, row) in cm.counts.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert!(r == c || v == 0);
            }
        }
        let iou = iou_per_class(&cm);
        assert_eq!(iou, vec![Some(1.0), Some(1.0), Some(1.0), None, None]);
        let wrong = confusion_matrix(&[2, 1, 1, 1], &[1, 2, 3, 0], &t).unwrap();
        assert_eq!(&iou_per_class(&wrong)[..3], &[Some(0.0), Some(0.0), Some(0.0)]);
        let empty = confusion_matrix(&[1, 2], &[0, 0], &t).unwrap();
        assert_eq!(empty, ConfusionMatrix::zeros(5));
        assert_eq!(weighted_mean_iou(&iou_per_class(&empty), &class_weights(&empty)), None);
    }

    #[test]
    fn hand_counted_four_by_four() {
        let t = ClassTaxonomy::default();
        #[rustfmt::skip]
        let truth = [1, 1, 2, 2,
                     1, 1, 2, 2,
                     3, 3, 0, 0,
                     3, 3, 5, 5];
        #[rustfmt::skip]
        let pred =  [1, 2, 2, 2,
                     1, 1, 2, 3,
                     3, 1, 4, 4,
                     3, 3, 5, 1];
        let cm = confusion_matrix(&pred, &truth, &t).unwrap();
        let mut want = ConfusionMatrix::zeros(5);
        want.counts[0] = vec![3, 1, 0, 0, 0];
        want.counts[1] = vec![0, 3, 1, 0, 0];
        want.counts[2] = vec![1, 0, 3, 0, 0];
        want.counts[4] = vec![1, 0, 0, 0, 1];
        assert_eq!(cm, want);
        assert_eq!(cm.total(), 14);
        let iou = iou_per_class(&cm);
        assert_eq!(iou[0], Some(3.0 / 6.0));
        assert_eq!(iou[1], Some(3.0 / 5.0));
        assert_eq!(iou[2], Some(3.0 / 5.0));
        assert_eq!(iou[3], None);
        assert_eq!(iou[4], Some(1.0 / 2.0));
    }

    #[test]
    fn two_class_reduction() {
        let cm = ConfusionMatrix {
            counts: vec![vec![3, 1], vec![2, 4]],
        };
        let iou = iou_per_class(&cm);
        assert_eq!(iou, vec![Some(0.5), Some(4.0 / 7.0)]);
        let w = weighted_mean_iou(&[Some(0.5), Some(0.5714)], &[0.7, 0.3]).unwrap();
        assert!((w - 0.52142).abs() < 1e-5, "{w}");
        // Swapping prediction and truth leaves binary IoU unchanged.
        let swapped = ConfusionMatrix {
            counts: vec![vec![3, 2], vec![1, 4]],
        };
        assert_eq!(iou_per_class(&swapped), iou);
    }

    #[test]
    fn weighted_mean_spot_values() {
        assert_eq!(weighted_mean_iou(&[Some(1.0), Some(0.0)], &[0.5, 0.5]), Some(0.5));
        assert_eq!(weighted_mean_iou(&[None, Some(0.3), None], &[0.0, 1.0, 0.0]), Some(0.3));
        // Absent classes drop out and the rest renormalize.
        assert_eq!(weighted_mean_iou(&[Some(1.0), None], &[0.25, 0.75]), Some(1.0));
    }

    /// Per-pixel brute force over explicit TP/FP/FN sets.
    fn oracle(pred: &[u8], truth: &[u8], k: u8) -> (Vec<Vec<u64>>, Vec<Option<f64>>, Option<f64>) {
        let mut cm = vec![vec![0u64; k as usize]; k as usize];
        for (&p, &t) in pred.iter().zip(truth) {
            if t != 0 {
                cm[t as usize - 1][p as usize - 1] += 1;
            }
        }
        let scored = truth.iter().filter(|&&t| t != 0).count();
        let mut ious = Vec::new();
        let (mut num, mut den) = (0.0, 0.0);
        for c in 1..=k {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&p, &t) in pred.iter().zip(truth) {
                if t == 0 {
                    continue;
                }
                match (p == c, t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let iou = (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64);
            if let Some(v) = iou {
                let w = (tp + fn_) as f64 / scored as f64;
                num += w * v;
                den += w;
            }
            ious.push(iou);
        }
        (cm, ious, (den > 0.0).then(|| num / den))
    }

    #[test]
    fn matches_brute_force_oracle_on_random_masks() {
        let t = ClassTaxonomy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let truth: Vec<u8> = (0..256).map(|_| rng.random_range(0..=5)).collect();
            let pred: Vec<u8> = (0..256).map(|_| rng.random_range(1..=5)).collect();
            let cm = confusion_matrix(&pred, &truth, &t).unwrap();
            let (ocm, oiou, ow) = oracle(&pred, &truth, 5);
            assert_eq!(cm.counts, ocm);
            let iou = iou_per_class(&cm);
            assert_eq!(iou, oiou);
            let w = weighted_mean_iou(&iou, &class_weights(&cm));
            match (w, ow) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn report_round_trips_through_json() {
        let t = ClassTaxonomy::default();
        let cm = confusion_matrix(&[1, 2, 2, 5], &[1, 2, 1, 0], &t).unwrap();
        let cell = Cell {
            pretrain: "vae".into(),
            encoder: "resnet18".into(),
        };
        let r = EvalReport::from_confusion(cell, &cm, &t, 3, 42);
        assert_eq!(r.n_test_pixels, 3);
        assert_eq!(r.iou[&4], None);
        assert_eq!(r.iou_zero_filled[&4], 0.0);
        assert_eq!(r.iou[&1], Some(0.5));
        let json = r.to_json().unwrap();
        assert!(json.contains("\"weighted_miou\""));
        assert_eq!(EvalReport::from_json(&json).unwrap(), r);
    }

    proptest! {
        #[test]
        fn weighted_mean_is_bounded(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..1.0), 1..6)) {
            let iou: Vec<Option<f64>> = pairs.iter().map(|p| Some(p.0)).collect();
            let w: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let Some(m) = weighted_mean_iou(&iou, &w) {
                let lo = pairs.iter().filter(|p| p.1 > 0.0).map(|p| p.0).fold(f64::INFINITY, f64::min);
                let hi = pairs.iter().filter(|p| p.1 > 0.0).map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
            }
        }

        #[test]
        fn confusion_rows_sum_to_truth_counts(pixels in prop::collection::vec((0u8..=5, 1u8..=5), 1..200)) {
            let t = ClassTaxonomy::default();
            let truth: Vec<u8> = pixels.iter().map(|p| p.0).collect();
            let pred: Vec<u8> = pixels.iter().map(|p| p.1).collect();
            let cm = confusion_matrix(&pred, &truth, &t).unwrap();
            for (c, n) in cm.truth_counts().iter().enumerate() {
                prop_assert_eq!(*n, truth.iter().filter(|&&v| v as usize == c + 1).count() as u64);
            }
            for v in iou_per_class(&cm).into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
