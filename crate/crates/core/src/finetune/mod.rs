//! Segmentation fine-tuning on weak land-cover labels and IoU evaluation.

mod metrics;
mod run;

pub use metrics::{
    class_weights, confusion_matrix, iou_per_class, weighted_mean_iou, Cell, ClassTaxonomy, ConfusionMatrix,
    EvalReport, NO_DATA,
};
pub use run::{
    checkpoint_objective, evaluate_checkpoint, evaluate_indices, finetune_run, load_segmentation_model,
    model_from_encoder_checkpoint, split_samples, FinetuneConfig, FinetuneEpoch, FinetuneOutcome, Split,
    EVAL_REPORT_FILE, FINETUNE_METRICS_FILE, FINETUNE_METRICS_HEADER, MODEL_CHECKPOINT,
};
