//! Self-supervised pretraining: variational autoencoding, tile2vec, and
//! contrastive sensor fusion, plus the shared training loop.
//!
//! Distance-based objectives compare global-average-pooled 512-d embeddings.

pub mod augment;
mod gradcheck;
mod losses;
mod objectives;
mod run;
mod vae;

pub use augment::{center_crop, crop, csf_augment, AugmentRecord};
pub use gradcheck::{check_objective_gradients, CHECK_INPUT_SIZE};
pub use losses::{embedding_rows, kl_divergence, triplet_distances, triplet_loss, CurriculumSchedule, TripletGrads};
pub use objectives::{csf_loss, embed_triplets, t2v_loss, TripletOutcome};
pub use run::{
    encoder_checkpoint, initial_encoder, pretrain_run, triplet_separation, write_metrics_csv, EpochMetrics, Objective,
    PretrainConfig, PretrainOutcome, DEFAULT_INPUT_SIZE, ENCODER_CHECKPOINT, MAX_BATCH_SIZE, METRICS_FILE,
    METRICS_HEADER,
};
pub(crate) use run::{sub_seed, STREAM_DATA, STREAM_HEAD};
pub use vae::{vae_loss, VaeForward, VaeHead, VaeLoss, DEFAULT_LATENT_CHANNELS};
