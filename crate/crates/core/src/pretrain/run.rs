use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::CurriculumSchedule;
use super::objectives::{csf_loss, t2v_loss};
use super::vae::{vae_loss, VaeHead, DEFAULT_LATENT_CHANNELS};
use crate::batch::PatchLoader;
use crate::data::{BandStats, Manifest};
use crate::encoders::{pool_embedding, ArchDescriptor, Checkpoint, Encoder, EncoderVariant, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::geo::{draw_triplet_with, NeighborGraph};
use crate::nn::{Adam, Mode, Module, Tensor};

pub const MAX_BATCH_SIZE: usize = 1024;
pub const DEFAULT_INPUT_SIZE: usize = 128;
pub const METRICS_HEADER: &str = "epoch,objective,encoder,loss,loss_recon,loss_kl,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    None,
    Vae,
    T2v,
    Csf,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Self::None, Self::Vae, Self::T2v, Self::Csf];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Vae => "vae",
            Self::T2v => "t2v",
            Self::Csf => "csf",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "vae" => Ok(Self::Vae),
            "t2v" | "tile2vec" => Ok(Self::T2v),
            "csf" => Ok(Self::Csf),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub encoder: EncoderVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub seed: u64,
    pub margin: f64,
    pub kl_weight: f64,
    pub latent_channels: usize,
    /// Neighbour softmax temperature; the graph's mean edge length when unset.
    pub temperature_km: Option<f64>,
    /// Side of the square network input cropped from each patch.
    pub input_size: usize,
    pub curriculum: CurriculumSchedule,
    /// Leave the wall-clock column empty so metrics files are reproducible.
    pub deterministic: bool,
    /// Keep normalized samples in memory between epochs.
    pub cache_samples: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Vae,
            encoder: EncoderVariant::ResNet18,
            epochs: 20,
            batch_size: 32,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            margin: 1.0,
            kl_weight: 1e-3,
            latent_channels: DEFAULT_LATENT_CHANNELS,
            temperature_km: None,
            input_size: DEFAULT_INPUT_SIZE,
            curriculum: CurriculumSchedule::default(),
            deterministic: true,
            cache_samples: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("pretrain: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.batch_size == 0 || self.batch_size > MAX_BATCH_SIZE {
            return bad(format!("batch_size {} outside 1..={MAX_BATCH_SIZE}", self.batch_size));
        }
        if self.objective == Objective::Csf && self.batch_size < 2 {
            return bad("csf needs batch_size >= 2".into());
        }
        if self.input_size == 0 || self.input_size % DOWNSAMPLE != 0 {
            return bad(format!("input_size {} must be a positive multiple of {DOWNSAMPLE}", self.input_size));
        }
        if !(self.margin >= 0.0) || !(self.kl_weight >= 0.0) {
            return bad("margin and kl_weight must be non-negative".into());
        }
        if self.latent_channels == 0 {
            return bad("latent_channels must be positive".into());
        }
        if let Some(t) = self.temperature_km {
            if !(t > 0.0) {
                return bad(format!("temperature_km {t} must be positive"));
            }
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub objective: Objective,
    pub encoder: EncoderVariant,
    pub loss: f64,
    pub loss_recon: Option<f64>,
    pub loss_kl: Option<f64>,
    pub seconds: Option<f64>,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{},{},{},{:.9e},{},{},{}",
            self.epoch,
            self.objective,
            self.encoder,
            self.loss,
            opt(self.loss_recon),
            opt(self.loss_kl),
            self.seconds.map(|s| format!("{s:.3}")).unwrap_or_default()
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: Encoder,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

impl PretrainOutcome {
    /// Writes `encoder.ckpt` and `metrics.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint.save(&dir.join(ENCODER_CHECKPOINT))?;
        write_metrics_csv(&dir.join(METRICS_FILE), &self.metrics)
    }
}

pub const ENCODER_CHECKPOINT: &str = "encoder.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Independent seed for a named role derived from the run seed.
pub(crate) fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

pub(crate) const STREAM_ENCODER: u64 = 1;
pub(crate) const STREAM_HEAD: u64 = 2;
pub(crate) const STREAM_DATA: u64 = 3;

/// The seeded initial encoder of a run; what objective `none` returns.
pub fn initial_encoder(variant: EncoderVariant, seed: u64) -> Encoder {
    Encoder::new(variant, sub_seed(seed, STREAM_ENCODER))
}

pub fn encoder_checkpoint(encoder: &Encoder, objective: Objective, seed: u64) -> Checkpoint {
    let mut ck = Checkpoint::new(ArchDescriptor {
        encoder: encoder.variant,
        header_classes: None,
        objective: Some(objective.name().to_string()),
        seed,
    });
    ck.add("encoder", encoder);
    ck
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

/// Runs the configured self-supervised objective over the manifest.
///
/// Tile2vec needs a neighbour graph built over the manifest's locations
/// (graph index == manifest index).
pub fn pretrain_run(
    cfg: &PretrainConfig,
    manifest: &Manifest,
    stats: &BandStats,
    graph: Option<&NeighborGraph>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut encoder = initial_encoder(cfg.encoder, cfg.seed);
    if cfg.objective == Objective::None {
        return Ok(PretrainOutcome {
            checkpoint: encoder_checkpoint(&encoder, cfg.objective, cfg.seed),
            encoder,
            metrics: Vec::new(),
        });
    }
    let loader = PatchLoader::new(manifest, stats, cfg.cache_samples)?;
    if loader.patch_size() < cfg.input_size {
        return Err(Error::InvalidConfig(format!(
            "patch size {} is smaller than input_size {}",
            loader.patch_size(),
            cfg.input_size
        )));
    }
    let mut head = match cfg.objective {
        Objective::Vae => Some(VaeHead::new(cfg.latent_channels, sub_seed(cfg.seed, STREAM_HEAD))?),
        _ => None,
    };
    let (graph, temperature) = match cfg.objective {
        Objective::T2v => {
            let g = graph.ok_or_else(|| Error::InvalidConfig("t2v needs a neighbour graph".into()))?;
            if g.len() != manifest.len() {
                return Err(Error::InvalidConfig(format!(
                    "graph has {} points for {} manifest entries",
                    g.len(),
                    manifest.len()
                )));
            }
            let t = match cfg.temperature_km {
                Some(t) => t,
                None => g.mean_neighbor_km().ok_or(Error::NoNeighborExhausted)?,
            };
            (Some(g), t)
        }
        _ => (None, 0.0),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_DATA));
    let mut opt = Adam::with_betas(cfg.lr, cfg.beta1, cfg.beta2);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = match graph {
            Some(g) => g.anchors(),
            None => (0..manifest.len()).collect(),
        };
        if order.is_empty() {
            return Err(Error::NoNeighborExhausted);
        }
        order.shuffle(&mut rng);
        let (mut sum, mut recon, mut kl, mut seen) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for idx in batches(&order, cfg.batch_size) {
            let n = idx.len();
            if cfg.objective == Objective::Csf && n < 2 {
                continue;
            }
            encoder.zero_grad();
            let loss = match cfg.objective {
                Objective::Vae => {
                    let head = head.as_mut().expect("vae head");
                    head.zero_grad();
                    let x = loader.inputs(idx, cfg.input_size)?;
                    let side = cfg.input_size / DOWNSAMPLE;
                    let eps = Tensor::randn(
                        crate::nn::TensorSpec::new(n, cfg.latent_channels, side, side),
                        &mut rng,
                    );
                    let parts = vae_loss(&x, &mut encoder, head, cfg.kl_weight, Some(&eps))?;
                    recon += parts.recon * n as f64;
                    kl += parts.kl * n as f64;
                    opt.step(&mut [&mut encoder, head]);
                    parts.total
                }
                Objective::T2v => {
                    let g = graph.expect("t2v graph");
                    let draws = idx
                        .iter()
                        .map(|&a| draw_triplet_with(g, a, &mut rng, temperature))
                        .collect::<Result<Vec<_>>>()?;
                    let pick = |f: fn(&crate::geo::TripletDraw) -> usize| -> Vec<usize> {
                        draws.iter().map(f).collect()
                    };
                    let a = loader.inputs(&pick(|d| d.anchor), cfg.input_size)?;
                    let p = loader.inputs(&pick(|d| d.neighbor), cfg.input_size)?;
                    let d = loader.inputs(&pick(|d| d.distant), cfg.input_size)?;
                    let out = t2v_loss(&mut encoder, &a, &p, &d, cfg.margin)?;
                    opt.step(&mut [&mut encoder]);
                    out.loss
                }
                Objective::Csf => {
                    let samples = idx.iter().map(|&i| loader.patch(i)).collect::<Result<Vec<_>>>()?;
                    let intensity = cfg.curriculum.intensity(epoch);
                    let out = csf_loss(
                        &samples,
                        &mut encoder,
                        cfg.input_size,
                        intensity,
                        cfg.margin,
                        rng.next_u64(),
                    )?;
                    opt.step(&mut [&mut encoder]);
                    out.loss
                }
                Objective::None => unreachable!("handled above"),
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("{} loss at epoch {}", cfg.objective, epoch + 1)));
            }
            sum += loss * n as f64;
            seen += n;
        }
        if seen == 0 {
            return Err(Error::EmptySplit("no trainable batch in epoch".into()));
        }
        let secs = start.elapsed().as_secs_f64();
        let row = EpochMetrics {
            epoch: epoch + 1,
            objective: cfg.objective,
            encoder: cfg.encoder,
            loss: sum / seen as f64,
            loss_recon: head.as_ref().map(|_| recon / seen as f64),
            loss_kl: head.as_ref().map(|_| kl / seen as f64),
            seconds: (!cfg.deterministic).then_some(secs),
        };
        log::info!(
            "pretrain {} {} epoch {}/{}: loss {:.6} ({secs:.1}s)",
            cfg.objective,
            cfg.encoder,
            epoch + 1,
            cfg.epochs,
            row.loss
        );
        metrics.push(row);
    }
    Ok(PretrainOutcome {
        checkpoint: encoder_checkpoint(&encoder, cfg.objective, cfg.seed),
        encoder,
        metrics,
    })
}

/// Mean anchor-neighbour and anchor-distant distances of pooled embeddings
/// in inference mode over `draws` seeded triplets.
pub fn triplet_separation(
    encoder: &mut Encoder,
    loader: &PatchLoader,
    graph: &NeighborGraph,
    input_size: usize,
    temperature_km: f64,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let anchors = graph.anchors();
    if anchors.is_empty() {
        return Err(Error::NoNeighborExhausted);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = |encoder: &mut Encoder, i: usize| -> Result<Tensor> {
        Ok(pool_embedding(&encoder.forward(&loader.inputs(&[i], input_size)?, Mode::Eval)?))
    };
    let dist = |a: &Tensor, b: &Tensor| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (mut pos, mut neg) = (0.0, 0.0);
    for k in 0..draws {
        let t = draw_triplet_with(graph, anchors[k % anchors.len()], &mut rng, temperature_km)?;
        let za = embed(encoder, t.anchor)?;
        pos += dist(&za, &embed(encoder, t.neighbor)?);
        neg += dist(&za, &embed(encoder, t.distant)?);
    }
    Ok((pos / draws as f64, neg / draws as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_names_round_trip() {
        for o in Objective::ALL {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
            assert_eq!(serde_json::to_string(&o).unwrap(), format!("\"{o}\""));
        }
        assert_eq!("Tile2Vec".parse::<Objective>().unwrap(), Objective::T2v);
        assert!("simclr".parse::<Objective>().is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = PretrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.lr), (20, 32, 5e-4));
        assert_eq!((cfg.beta1, cfg.beta2, cfg.margin, cfg.kl_weight), (0.9, 0.999, 1.0, 1e-3));
        let bad = [
            PretrainConfig { epochs: 0, ..cfg.clone() },
            PretrainConfig { lr: 0.0, ..cfg.clone() },
            PretrainConfig { batch_size: MAX_BATCH_SIZE + 1, ..cfg.clone() },
            PretrainConfig { objective: Objective::Csf, batch_size: 1, ..cfg.clone() },
            PretrainConfig { input_size: 100, ..cfg.clone() },
            PretrainConfig { temperature_km: Some(0.0), ..cfg.clone() },
        ];
        for b in bad {
            assert!(b.validate().is_err(), "{b:?}");
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok: PretrainConfig = serde_json::from_str(r#"{"objective":"csf","epochs":3}"#).unwrap();
        assert_eq!((ok.objective, ok.epochs, ok.batch_size), (Objective::Csf, 3, 32));
        assert!(serde_json::from_str::<PretrainConfig>(r#"{"epoch":3}"#).is_err());
    }

    #[test]
    fn metrics_rows_leave_missing_parts_empty() {
        let row = EpochMetrics {
            epoch: 2,
            objective: Objective::T2v,
            encoder: EncoderVariant::ResNet18Attn,
            loss: 0.5,
            loss_recon: None,
            loss_kl: None,
            seconds: None,
        };
        assert_eq!(row.csv_row(), "2,t2v,resnet18attn,5.000000000e-1,,,");
        assert_eq!(METRICS_HEADER.split(',').count(), row.csv_row().split(',').count());
    }

    #[test]
    fn sub_seeds_differ_by_stream() {
        let s: Vec<u64> = [STREAM_ENCODER, STREAM_HEAD, STREAM_DATA].iter().map(|&k| sub_seed(7, k)).collect();
        assert!(s[0] != s[1] && s[1] != s[2] && s[0] != s[2]);
        assert_eq!(sub_seed(7, STREAM_DATA), s[2]);
    }
}
