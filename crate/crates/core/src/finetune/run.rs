use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{
    class_weights, confusion_matrix, iou_per_class, weighted_mean_iou, Cell, ClassTaxonomy, ConfusionMatrix,
    EvalReport,
};
use crate::batch::PatchLoader;
use crate::data::{BandStats, Manifest};
use crate::encoders::{
    ArchDescriptor, Checkpoint, DeconvHeader, Encoder, SegmentationModel, DEFAULT_HEADER_CLASSES, DOWNSAMPLE,
};
use crate::error::{Error, Result};
use crate::nn::loss::cross_entropy_masked;
use crate::nn::{Adam, Mode, Module};
use crate::pretrain::{sub_seed, STREAM_DATA, STREAM_HEAD};

pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const FINETUNE_METRICS_FILE: &str = "finetune_metrics.csv";
pub const FINETUNE_METRICS_HEADER: &str = "epoch,loss,val_weighted_miou,seconds";
const STREAM_SPLIT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Train the header only, leaving encoder weights and statistics untouched.
    pub freeze_encoder: bool,
    /// Logit channels: no-data, the scored classes, and "other".
    pub header_classes: usize,
    pub input_size: usize,
    /// Use every labeled sample for training, validation and test alike.
    pub evaluate_on_train: bool,
    pub deterministic: bool,
    pub cache_samples: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            train_fraction: 0.8,
            val_fraction: 0.1,
            freeze_encoder: false,
            header_classes: DEFAULT_HEADER_CLASSES,
            input_size: crate::pretrain::DEFAULT_INPUT_SIZE,
            evaluate_on_train: false,
            deterministic: true,
            cache_samples: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("finetune: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.batch_size == 0 || self.batch_size > crate::pretrain::MAX_BATCH_SIZE {
            return bad(format!("batch_size {} out of range", self.batch_size));
        }
        let test = 1.0 - self.train_fraction - self.val_fraction;
        if !(self.train_fraction > 0.0) || !(self.val_fraction >= 0.0) || test < -1e-9 {
            return bad(format!(
                "split fractions {}/{} leave no valid test share",
                self.train_fraction, self.val_fraction
            ));
        }
        if self.input_size == 0 || self.input_size % DOWNSAMPLE != 0 {
            return bad(format!("input_size {} must be a positive multiple of {DOWNSAMPLE}", self.input_size));
        }
        if self.header_classes <= ClassTaxonomy::default().len() {
            return bad(format!("header_classes {} must exceed the scored classes", self.header_classes));
        }
        Ok(())
    }
}

/// Manifest indices of each split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded train/val/test split of the labeled samples, by sample.
///
/// Samples are ordered by `sample_id` before shuffling so the split does not
/// depend on manifest order. Validation and test each get at least one sample
/// when their fraction is positive.
pub fn split_samples(manifest: &Manifest, cfg: &FinetuneConfig) -> Result<Split> {
    let mut labeled: Vec<usize> = (0..manifest.len()).filter(|&i| manifest.entries[i].has_label).collect();
    if labeled.is_empty() {
        return Err(Error::EmptySplit("manifest has no labeled samples".into()));
    }
    if cfg.evaluate_on_train {
        return Ok(Split {
            train: labeled.clone(),
            val: labeled.clone(),
            test: labeled,
        });
    }
    labeled.sort_by(|&a, &b| manifest.entries[a].sample_id.cmp(&manifest.entries[b].sample_id));
    labeled.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_SPLIT)));
    let n = labeled.len();
    let share = |f: f64| -> usize {
        if f <= 0.0 {
            0
        } else {
            ((f * n as f64).round() as usize).max(1)
        }
    };
    let n_val = share(cfg.val_fraction);
    let n_test = share(1.0 - cfg.train_fraction - cfg.val_fraction);
    if n_val + n_test >= n {
        return Err(Error::EmptySplit(format!(
            "{n} labeled samples leave no training data after {n_val} val and {n_test} test"
        )));
    }
    let test = labeled.split_off(n - n_test);
    let val = labeled.split_off(n - n_test - n_val);
    if test.is_empty() {
        return Err(Error::EmptySplit("test split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation split is empty".into()));
    }
    Ok(Split {
        train: labeled,
        val,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_weighted_miou: Option<f64>,
    pub seconds: Option<f64>,
}

impl FinetuneEpoch {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{},{}",
            self.epoch,
            self.loss,
            self.val_weighted_miou.map(|v| format!("{v:.9e}")).unwrap_or_default(),
            self.seconds.map(|s| format!("{s:.3}")).unwrap_or_default()
        )
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: SegmentationModel,
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
    pub metrics: Vec<FinetuneEpoch>,
    pub split: Split,
}

impl FinetuneOutcome {
    /// Writes the model checkpoint, the eval report and the epoch metrics into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint.save(&dir.join(MODEL_CHECKPOINT))?;
        let report = dir.join(EVAL_REPORT_FILE);
        fs::write(&report, self.report.to_json()? + "\n").map_err(|e| Error::io(&report, e))?;
        let mut csv = String::from(FINETUNE_METRICS_HEADER);
        csv.push('\n');
        for m in &self.metrics {
            csv.push_str(&m.csv_row());
            csv.push('\n');
        }
        let path = dir.join(FINETUNE_METRICS_FILE);
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    }
}

/// Name of the pretraining objective recorded in an encoder checkpoint.
pub fn checkpoint_objective(ck: &Checkpoint) -> String {
    ck.arch.objective.clone().unwrap_or_else(|| "unknown".into())
}

/// Fresh segmentation model whose encoder weights come from `ck`.
pub fn model_from_encoder_checkpoint(ck: &Checkpoint, cfg: &FinetuneConfig) -> Result<SegmentationModel> {
    let mut encoder = Encoder::new(ck.arch.encoder, 0);
    ck.restore("encoder", &mut encoder)?;
    let header = DeconvHeader::new(cfg.header_classes, sub_seed(cfg.seed, STREAM_HEAD))?;
    let mut model = SegmentationModel::new(encoder, header);
    model.freeze_encoder = cfg.freeze_encoder;
    Ok(model)
}

/// Rebuilds a fine-tuned model saved by [`FinetuneOutcome::save`].
pub fn load_segmentation_model(ck: &Checkpoint) -> Result<SegmentationModel> {
    let classes = ck
        .arch
        .header_classes
        .ok_or_else(|| Error::Checkpoint("checkpoint has no segmentation header".into()))?;
    let mut model = SegmentationModel::new(Encoder::new(ck.arch.encoder, 0), DeconvHeader::new(classes, 0)?);
    ck.restore("encoder", &mut model.encoder)?;
    ck.restore("header", &mut model.header)?;
    Ok(model)
}

fn model_checkpoint(model: &SegmentationModel, objective: &str, seed: u64) -> Checkpoint {
    let mut ck = Checkpoint::new(ArchDescriptor {
        encoder: model.encoder.variant,
        header_classes: Some(model.header.classes),
        objective: Some(objective.to_string()),
        seed,
    });
    ck.add("encoder", &model.encoder);
    ck.add("header", &model.header);
    ck
}

/// Confusion counts of `model` in inference mode over the given samples.
pub fn evaluate_indices(
    model: &mut SegmentationModel,
    loader: &PatchLoader,
    indices: &[usize],
    input_size: usize,
    batch_size: usize,
    taxonomy: &ClassTaxonomy,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::zeros(taxonomy.len());
    for idx in indices.chunks(batch_size.max(1)) {
        let logits = model.forward(&loader.inputs(idx, input_size)?, Mode::Eval)?;
        let pred = taxonomy.predict(&logits)?;
        cm.add(&confusion_matrix(&pred, &loader.labels(idx, input_size)?, taxonomy)?);
    }
    Ok(cm)
}

fn weighted_miou(cm: &ConfusionMatrix) -> Option<f64> {
    weighted_mean_iou(&iou_per_class(cm), &class_weights(cm))
}

/// Fine-tunes an encoder checkpoint with a fresh header on the labeled
/// samples, keeps the epoch with the best validation weighted mIoU, and
/// reports that model on the test split.
pub fn finetune_run(
    encoder_ckpt: &Checkpoint,
    manifest: &Manifest,
    stats: &BandStats,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let taxonomy = ClassTaxonomy::default();
    let split = split_samples(manifest, cfg)?;
    let loader = PatchLoader::new(manifest, stats, cfg.cache_samples)?;
    if loader.patch_size() < cfg.input_size {
        return Err(Error::InvalidConfig(format!(
            "patch size {} is smaller than input_size {}",
            loader.patch_size(),
            cfg.input_size
        )));
    }
    let objective = checkpoint_objective(encoder_ckpt);
    let mut model = model_from_encoder_checkpoint(encoder_ckpt, cfg)?;
    let parameters = model.encoder.num_params() + model.header.num_params();
    let mut opt = Adam::with_betas(cfg.lr, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_DATA));
    let channels = cfg.header_classes;

    let mut best: Option<(f64, usize, SegmentationModel)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        let (mut sum, mut seen) = (0.0f64, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let labels: Vec<Option<u8>> = loader
                .labels(idx, cfg.input_size)?
                .into_iter()
                .map(|c| taxonomy.label_channel(c, channels))
                .collect();
            if labels.iter().all(Option::is_none) {
                continue;
            }
            model.zero_grad();
            let logits = model.forward(&loader.inputs(idx, cfg.input_size)?, Mode::Train)?;
            let (loss, grad) = cross_entropy_masked(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("fine-tune loss at epoch {epoch}")));
            }
            model.backward(&grad)?;
            if cfg.freeze_encoder {
                opt.step(&mut [&mut model.header]);
            } else {
                opt.step(&mut [&mut model]);
            }
            sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        if seen == 0 {
            return Err(Error::EmptySplit("no labeled pixel in the training split".into()));
        }
        let val = weighted_miou(&evaluate_indices(
            &mut model,
            &loader,
            &split.val,
            cfg.input_size,
            cfg.batch_size,
            &taxonomy,
        )?);
        let score = val.unwrap_or(f64::NEG_INFINITY);
        // Ties go to the later epoch.
        if best.as_ref().is_none_or(|(s, _, _)| score >= *s) {
            best = Some((score, epoch, model.clone()));
        }
        let secs = start.elapsed().as_secs_f64();
        log::info!(
            "finetune {objective} {} epoch {epoch}/{}: loss {:.6} val wmIoU {} ({secs:.1}s)",
            model.encoder.variant,
            cfg.epochs,
            sum / seen as f64,
            val.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
        metrics.push(FinetuneEpoch {
            epoch,
            loss: sum / seen as f64,
            val_weighted_miou: val,
            seconds: (!cfg.deterministic).then_some(secs),
        });
    }
    let (_, selected_epoch, mut model) = best.expect("at least one epoch");
    let cm = evaluate_indices(&mut model, &loader, &split.test, cfg.input_size, cfg.batch_size, &taxonomy)?;
    let cell = Cell {
        pretrain: objective.clone(),
        encoder: model.encoder.variant.to_string(),
    };
    let report = EvalReport::from_confusion(cell, &cm, &taxonomy, selected_epoch, parameters);
    Ok(FinetuneOutcome {
        checkpoint: model_checkpoint(&model, &objective, cfg.seed),
        model,
        report,
        metrics,
        split,
    })
}

/// Test-split EvalReport of a saved fine-tuned model under the split that
/// `cfg` defines.
pub fn evaluate_checkpoint(
    model_ckpt: &Checkpoint,
    manifest: &Manifest,
    stats: &BandStats,
    cfg: &FinetuneConfig,
    selected_epoch: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    let taxonomy = ClassTaxonomy::default();
    let split = split_samples(manifest, cfg)?;
    let loader = PatchLoader::new(manifest, stats, cfg.cache_samples)?;
    let mut model = load_segmentation_model(model_ckpt)?;
    let parameters = model.encoder.num_params() + model.header.num_params();
    let cm = evaluate_indices(&mut model, &loader, &split.test, cfg.input_size, cfg.batch_size, &taxonomy)?;
    let cell = Cell {
        pretrain: checkpoint_objective(model_ckpt),
        encoder: model.encoder.variant.to_string(),
    };
    Ok(EvalReport::from_confusion(cell, &cm, &taxonomy, selected_epoch, parameters))
}
