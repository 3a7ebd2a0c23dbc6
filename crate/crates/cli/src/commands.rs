//! The single-stage subcommands: synth, pretrain, finetune and evaluate.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use terrafuse_core::data::{compute_band_stats, BandStats, Manifest, BAND_STATS_FILE};
use terrafuse_core::encoders::{Checkpoint, EncoderVariant};
use terrafuse_core::finetune::{
    checkpoint_objective, evaluate_checkpoint, finetune_run, EvalReport, FinetuneOutcome, EVAL_REPORT_FILE,
    MODEL_CHECKPOINT,
};
use terrafuse_core::geo::build_neighbor_graph;
use terrafuse_core::pretrain::{pretrain_run, Objective, PretrainConfig, PretrainOutcome, ENCODER_CHECKPOINT};
use terrafuse_core::synth::generate_dataset;

use crate::config::{DataConfig, ExperimentConfig};

/// Records the `[data]` and `[synth]` sections a dataset was generated from.
pub const DATASET_CONFIG_FILE: &str = "dataset.toml";

/// A validated config plus the output directory every command writes under.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

#[derive(serde::Serialize)]
struct DatasetConfig<'a> {
    data: &'a DataConfig,
    synth: &'a terrafuse_core::synth::SynthConfig,
}

impl Workspace {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            out: out.into(),
        })
    }

    pub fn data_root(&self) -> PathBuf {
        let root = &self.config.data.root;
        if root.is_absolute() {
            root.clone()
        } else {
            self.out.join(root)
        }
    }

    fn dataset_config(&self) -> Result<String> {
        let doc = DatasetConfig {
            data: &self.config.data,
            synth: &self.config.synth,
        };
        toml::to_string(&doc).context("serializing dataset config")
    }

    pub fn pretrain_dir(&self, objective: Objective, encoder: EncoderVariant) -> PathBuf {
        self.out.join("pretrain").join(cell_name(objective.name(), encoder.name()))
    }

    pub fn finetune_dir(&self, objective: &str, encoder: EncoderVariant) -> PathBuf {
        self.out.join("finetune").join(cell_name(objective, encoder.name()))
    }
}

/// Directory name of one (objective, encoder) combination.
pub fn cell_name(objective: &str, encoder: &str) -> String {
    format!("{objective}-{encoder}")
}

/// Generates the dataset and its band statistics under the data root.
pub fn cmd_synth(ws: &Workspace) -> Result<(Manifest, BandStats)> {
    let cfg = &ws.config;
    let root = ws.data_root();
    // Written last, so a partial dataset is never mistaken for a complete one.
    let _ = fs::remove_file(root.join(DATASET_CONFIG_FILE));
    let locations = cfg.data.sample_locations(cfg.synth.seed, cfg.synth.n_samples)?;
    let manifest = generate_dataset(&cfg.synth, &locations, &root)?;
    let stats = compute_band_stats(&manifest)?;
    stats.save(&root.join(BAND_STATS_FILE))?;
    fs::write(root.join(DATASET_CONFIG_FILE), ws.dataset_config()?)
        .with_context(|| format!("writing {}", root.join(DATASET_CONFIG_FILE).display()))?;
    info!("wrote {} samples to {}", manifest.len(), root.display());
    Ok((manifest, stats))
}

/// Loads the dataset under the data root, refusing one generated from a
/// different `[data]`/`[synth]` configuration.
pub fn load_dataset(ws: &Workspace) -> Result<(Manifest, BandStats)> {
    let root = ws.data_root();
    let recorded = fs::read_to_string(root.join(DATASET_CONFIG_FILE))
        .with_context(|| format!("no dataset at {}; run `terrafuse synth` first", root.display()))?;
    if recorded != ws.dataset_config()? {
        bail!(
            "dataset at {} was generated from a different [data]/[synth] config; rerun `terrafuse synth`",
            root.display()
        );
    }
    let manifest = Manifest::load(&root)?;
    let stats = BandStats::load(&root.join(BAND_STATS_FILE))?;
    Ok((manifest, stats))
}

/// Loads the dataset, generating it first when absent.
pub fn ensure_dataset(ws: &Workspace) -> Result<(Manifest, BandStats)> {
    if ws.data_root().join(DATASET_CONFIG_FILE).exists() {
        load_dataset(ws)
    } else {
        cmd_synth(ws)
    }
}

/// Pretrains with the configured objective, building the neighbour graph for tile2vec.
pub fn run_pretrain(cfg: &PretrainConfig, manifest: &Manifest, stats: &BandStats) -> Result<PretrainOutcome> {
    let graph = (cfg.objective == Objective::T2v).then(|| {
        let points: Vec<_> = manifest.entries.iter().map(|e| (e.lon, e.lat)).collect();
        build_neighbor_graph(&points)
    });
    Ok(pretrain_run(cfg, manifest, stats, graph.as_ref())?)
}

pub fn cmd_pretrain(ws: &Workspace) -> Result<PathBuf> {
    let (manifest, stats) = load_dataset(ws)?;
    let cfg = &ws.config.pretrain;
    let dir = ws.pretrain_dir(cfg.objective, cfg.encoder);
    let outcome = run_pretrain(cfg, &manifest, &stats)?;
    outcome.save(&dir)?;
    ws.config.echo(&dir)?;
    info!("pretrained {} into {}", cfg.objective, dir.display());
    Ok(dir)
}

/// Fine-tunes `checkpoint`, or the encoder `pretrain` wrote for the configured cell.
pub fn cmd_finetune(ws: &Workspace, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let (manifest, stats) = load_dataset(ws)?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => ws
            .pretrain_dir(ws.config.pretrain.objective, ws.config.pretrain.encoder)
            .join(ENCODER_CHECKPOINT),
    };
    let ck = Checkpoint::load(&path).with_context(|| format!("loading encoder checkpoint {}", path.display()))?;
    let dir = ws.finetune_dir(&checkpoint_objective(&ck), ck.arch.encoder);
    let outcome = finetune_run(&ck, &manifest, &stats, &ws.config.finetune)?;
    save_finetune(&outcome, ws, &dir)?;
    Ok(dir)
}

fn save_finetune(outcome: &FinetuneOutcome, ws: &Workspace, dir: &Path) -> Result<()> {
    outcome.save(dir)?;
    ws.config.echo(dir)?;
    info!(
        "fine-tuned {}-{}: test weighted mIoU {:?}",
        outcome.report.cell.pretrain, outcome.report.cell.encoder, outcome.report.weighted_miou
    );
    Ok(())
}

/// Re-evaluates a fine-tuned model on the test split and writes its report
/// under `out/evaluate/<cell>/`.
pub fn cmd_evaluate(ws: &Workspace, model: Option<&Path>) -> Result<PathBuf> {
    let (manifest, stats) = load_dataset(ws)?;
    let path = match model {
        Some(p) => p.to_path_buf(),
        None => ws
            .finetune_dir(ws.config.pretrain.objective.name(), ws.config.pretrain.encoder)
            .join(MODEL_CHECKPOINT),
    };
    let ck = Checkpoint::load(&path).with_context(|| format!("loading model checkpoint {}", path.display()))?;
    // The epoch a model was selected at lives in the report saved beside it.
    let sibling = path.with_file_name(EVAL_REPORT_FILE);
    let selected_epoch = match fs::read_to_string(&sibling) {
        Ok(text) => EvalReport::from_json(&text)?.selected_epoch,
        Err(_) => 0,
    };
    let report = evaluate_checkpoint(&ck, &manifest, &stats, &ws.config.finetune, selected_epoch)?;
    let dir = ws
        .out
        .join("evaluate")
        .join(cell_name(&report.cell.pretrain, &report.cell.encoder));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(EVAL_REPORT_FILE), report.to_json()? + "\n")
        .with_context(|| format!("writing {}", dir.join(EVAL_REPORT_FILE).display()))?;
    ws.config.echo(&dir)?;
    info!("evaluated {}: test weighted mIoU {:?}", path.display(), report.weighted_miou);
    Ok(dir)
}
