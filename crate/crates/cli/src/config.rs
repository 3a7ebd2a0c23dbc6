//! Experiment configuration: one TOML or JSON document with a section per stage.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use terrafuse_core::encoders::EncoderVariant;
use terrafuse_core::finetune::FinetuneConfig;
use terrafuse_core::geo::{sample_clustered, sample_sphere_uniform, LonLat};
use terrafuse_core::pretrain::{Objective, PretrainConfig};
use terrafuse_core::synth::SynthConfig;

/// Written into every run directory with all defaults filled in.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// How patch locations are drawn on the sphere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationSampler {
    /// Area-uniform over the whole sphere.
    Uniform,
    /// Area-uniform within small caps, so small datasets still have neighbours.
    Clustered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; relative paths resolve against `--out`.
    pub root: PathBuf,
    pub locations: LocationSampler,
    pub clusters: usize,
    pub cluster_radius_deg: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            locations: LocationSampler::Clustered,
            clusters: 8,
            cluster_radius_deg: 0.4,
        }
    }
}

impl DataConfig {
    pub fn sample_locations(&self, seed: u64, n: usize) -> Result<Vec<LonLat>> {
        Ok(match self.locations {
            LocationSampler::Uniform => sample_sphere_uniform(seed, n),
            LocationSampler::Clustered => sample_clustered(seed, n, self.clusters, self.cluster_radius_deg)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub objectives: Vec<Objective>,
    pub encoders: Vec<EncoderVariant>,
    /// Cells trained concurrently.
    pub workers: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            objectives: Objective::ALL.to_vec(),
            encoders: EncoderVariant::ALL.to_vec(),
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub grid: GridConfig,
}

impl ExperimentConfig {
    /// Reads a `.json` file as JSON and anything else as TOML, then validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
        .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    /// Applies the global `--seed` and `--deterministic` flags.
    pub fn apply_overrides(&mut self, seed: Option<u64>, deterministic: bool) {
        if let Some(seed) = seed {
            self.synth.seed = seed;
            self.pretrain.seed = seed;
            self.finetune.seed = seed;
        }
        if deterministic {
            self.pretrain.deterministic = true;
            self.finetune.deterministic = true;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let d = &self.data;
        if d.locations == LocationSampler::Clustered {
            if d.clusters == 0 {
                bail!("data: clusters must be >= 1");
            }
            if !(d.cluster_radius_deg > 0.0 && d.cluster_radius_deg < 90.0) {
                bail!("data: cluster_radius_deg {} must lie in (0, 90)", d.cluster_radius_deg);
            }
        }
        for (stage, size) in [("pretrain", self.pretrain.input_size), ("finetune", self.finetune.input_size)] {
            if size > self.synth.patch_size {
                bail!("{stage}: input_size {size} exceeds synth patch_size {}", self.synth.patch_size);
            }
        }
        if !self.synth.labeled {
            bail!("synth: fine-tuning needs labeled = true");
        }
        let g = &self.grid;
        if g.workers == 0 {
            bail!("grid: workers must be >= 1");
        }
        if g.objectives.is_empty() || g.encoders.is_empty() {
            bail!("grid: objectives and encoders must be non-empty");
        }
        if g.objectives.iter().collect::<HashSet<_>>().len() != g.objectives.len()
            || g.encoders.iter().collect::<HashSet<_>>().len() != g.encoders.len()
        {
            bail!("grid: objectives and encoders must not repeat");
        }
        // The echoed TOML cannot hold integers above i64::MAX.
        for seed in [self.synth.seed, self.pretrain.seed, self.finetune.seed] {
            if i64::try_from(seed).is_err() {
                bail!("seed {seed} exceeds {}", i64::MAX);
            }
        }
        Ok(())
    }

    /// Writes [`RESOLVED_CONFIG_FILE`] into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}
