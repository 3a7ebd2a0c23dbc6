//! On-disk dataset container, manifests, band statistics and normalization.
//!
//! Each sample lives in its own directory:
//!
//! ```text
//! <root>/<sample_id>/S2.f32    12 x H x W little-endian float32, C order
//! <root>/<sample_id>/S1.f32     2 x H x W (VV, VH)
//! <root>/<sample_id>/LC.u8          H x W label codes, absent when unlabeled
//! <root>/<sample_id>/meta.json
//! ```
//!
//! A dataset directory additionally holds `manifest.json` and `band_stats.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{Tensor, TensorSpec};

pub const S2_BANDS: usize = 12;
pub const S1_BANDS: usize = 2;
/// S2 bands 0..12 followed by S1 VV, VH.
pub const CHANNELS: usize = S2_BANDS + S1_BANDS;
pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const MAX_DATE_GAP_DAYS: i64 = 3;
/// Largest label code representable (uint8 space with 0 reserved for no-data,
/// the top values kept free).
pub const MAX_LABEL_CODE: u8 = 250;

pub const S2_FILE: &str = "S2.f32";
pub const S1_FILE: &str = "S1.f32";
pub const LC_FILE: &str = "LC.u8";
pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BAND_STATS_FILE: &str = "band_stats.json";

/// One geolocated paired S2/S1 observation with an optional label raster.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub sample_id: String,
    pub lon: f64,
    pub lat: f64,
    pub patch_size: usize,
    /// `[12, H, W]`
    pub s2: Vec<f32>,
    /// `[2, H, W]`
    pub s1: Vec<f32>,
    /// `[H, W]`, 0 = no-data.
    pub lc: Option<Vec<u8>>,
    pub s2_date: NaiveDate,
    pub s1_date: NaiveDate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub sample_id: String,
    pub lon: f64,
    pub lat: f64,
    pub s2_date: NaiveDate,
    pub s1_date: NaiveDate,
    pub patch_size: usize,
    pub has_label: bool,
}

impl PatchSample {
    pub fn plane(&self) -> usize {
        self.patch_size * self.patch_size
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidSample {
            sample_id: self.sample_id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_id(&self.sample_id)?;
        validate_location(&self.sample_id, self.lon, self.lat)?;
        if self.patch_size == 0 {
            return Err(self.invalid("patch_size must be positive"));
        }
        let plane = self.plane();
        if self.s2.len() != S2_BANDS * plane {
            return Err(self.invalid(format!("S2 has {} values, expected {}", self.s2.len(), S2_BANDS * plane)));
        }
        if self.s1.len() != S1_BANDS * plane {
            return Err(self.invalid(format!("S1 has {} values, expected {}", self.s1.len(), S1_BANDS * plane)));
        }
        if let Some(i) = self.s2.iter().position(|v| !v.is_finite()) {
            return Err(self.invalid(format!("non-finite S2 value at flat index {i}")));
        }
        if let Some(i) = self.s1.iter().position(|v| !v.is_finite()) {
            return Err(self.invalid(format!("non-finite S1 value at flat index {i}")));
        }
        if let Some(lc) = &self.lc {
            if lc.len() != plane {
                return Err(self.invalid(format!("LC has {} values, expected {plane}", lc.len())));
            }
            if let Some(&v) = lc.iter().find(|&&v| v > MAX_LABEL_CODE) {
                return Err(self.invalid(format!("label code {v} exceeds {MAX_LABEL_CODE}")));
            }
        }
        let gap = (self.s2_date - self.s1_date).num_days().abs();
        if gap > MAX_DATE_GAP_DAYS {
            return Err(self.invalid(format!("S1/S2 acquisitions {gap} days apart")));
        }
        Ok(())
    }

    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            sample_id: self.sample_id.clone(),
            lon: self.lon,
            lat: self.lat,
            s2_date: self.s2_date,
            s1_date: self.s1_date,
            patch_size: self.patch_size,
            has_label: self.lc.is_some(),
        }
    }

    /// Value of input channel `c` (S2 bands then S1) at flat pixel `p`.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.plane();
        if c < S2_BANDS {
            &self.s2[c * plane..(c + 1) * plane]
        } else {
            let c = c - S2_BANDS;
            &self.s1[c * plane..(c + 1) * plane]
        }
    }
}

fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && id != "."
        && id != "..";
    if !ok {
        return Err(Error::InvalidSample {
            sample_id: id.to_string(),
            reason: "sample_id must be a non-empty [A-Za-z0-9_.-] name".into(),
        });
    }
    Ok(())
}

fn validate_location(id: &str, lon: f64, lat: f64) -> Result<()> {
    if !(-180.0..180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
        return Err(Error::InvalidSample {
            sample_id: id.to_string(),
            reason: format!("location ({lon}, {lat}) outside lon [-180,180), lat [-90,90]"),
        });
    }
    Ok(())
}

fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_exact_len(path: &Path, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            file: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn read_f32(path: &Path, count: usize) -> Result<Vec<f32>> {
    let bytes = read_exact_len(path, count as u64 * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Writes `sample` into `root/<sample_id>/` and returns that directory.
pub fn write_sample(sample: &PatchSample, root: &Path) -> Result<PathBuf> {
    sample.validate()?;
    let dir = root.join(&sample.sample_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_f32(&dir.join(S2_FILE), &sample.s2)?;
    write_f32(&dir.join(S1_FILE), &sample.s1)?;
    let lc_path = dir.join(LC_FILE);
    match &sample.lc {
        Some(lc) => fs::write(&lc_path, lc).map_err(|e| Error::io(&lc_path, e))?,
        None => {
            if lc_path.exists() {
                fs::remove_file(&lc_path).map_err(|e| Error::io(&lc_path, e))?;
            }
        }
    }
    write_json(&dir.join(META_FILE), &sample.meta())?;
    Ok(dir)
}

/// Reads `root/<sample_id>/`, checking byte lengths against `meta.json`.
pub fn read_sample(root: &Path, sample_id: &str) -> Result<PatchSample> {
    read_sample_dir(&root.join(sample_id))
}

pub fn read_sample_dir(dir: &Path) -> Result<PatchSample> {
    let meta: SampleMeta = read_json(&dir.join(META_FILE))?;
    validate_location(&meta.sample_id, meta.lon, meta.lat)?;
    let plane = meta.patch_size * meta.patch_size;
    let s2 = read_f32(&dir.join(S2_FILE), S2_BANDS * plane)?;
    let s1 = read_f32(&dir.join(S1_FILE), S1_BANDS * plane)?;
    let lc = if meta.has_label {
        Some(read_exact_len(&dir.join(LC_FILE), plane as u64)?)
    } else {
        None
    };
    let sample = PatchSample {
        sample_id: meta.sample_id,
        lon: meta.lon,
        lat: meta.lat,
        patch_size: meta.patch_size,
        s2,
        s1,
        lc,
        s2_date: meta.s2_date,
        s1_date: meta.s1_date,
    };
    sample.validate()?;
    Ok(sample)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub lon: f64,
    pub lat: f64,
    pub relative_path: String,
    pub has_label: bool,
}

/// Index of a dataset directory. `root` is the directory the manifest lives in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset_name: String,
    pub patch_size: usize,
    pub created_seed: Option<u64>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(dataset_name: impl Into<String>, patch_size: usize, root: impl Into<PathBuf>) -> Self {
        Self {
            dataset_name: dataset_name.into(),
            patch_size,
            created_seed: None,
            entries: Vec::new(),
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, sample: &PatchSample) {
        self.entries.push(ManifestEntry {
            sample_id: sample.sample_id.clone(),
            lon: sample.lon,
            lat: sample.lat,
            relative_path: sample.sample_id.clone(),
            has_label: sample.lc.is_some(),
        });
    }

    /// Checks id uniqueness and that every entry resolves to a complete sample directory.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate sample_id {}", e.sample_id)));
            }
            let dir = self.root.join(&e.relative_path);
            let mut required = vec![S2_FILE, S1_FILE, META_FILE];
            if e.has_label {
                required.push(LC_FILE);
            }
            for f in required {
                if !dir.join(f).is_file() {
                    return Err(Error::InvalidManifest(format!(
                        "{} is missing {f}",
                        dir.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sample_dir(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].relative_path)
    }

    pub fn read(&self, index: usize) -> Result<PatchSample> {
        read_sample_dir(&self.sample_dir(index))
    }

    pub fn save(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(MANIFEST_FILE);
        write_json(&path, self)?;
        Ok(path)
    }

    /// Loads `manifest.json` from a dataset directory (or a path to the file itself).
    pub fn load(path: &Path) -> Result<Self> {
        let (file, root) = if path.is_dir() {
            (path.join(MANIFEST_FILE), path.to_path_buf())
        } else {
            (
                path.to_path_buf(),
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
            )
        };
        let mut m: Manifest = read_json(&file)?;
        m.root = root;
        m.validate()?;
        Ok(m)
    }

    /// A manifest over a subset of entries, sharing the same root.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsProvenance {
    pub dataset_name: String,
    pub n_samples: usize,
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_pixels: u64,
    pub provenance: Option<StatsProvenance>,
}

impl BandStats {
    /// Mean 0, std 1 on every channel.
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; CHANNELS],
            std: vec![1.0; CHANNELS],
            n_pixels: 0,
            provenance: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != CHANNELS || self.std.len() != CHANNELS {
            return Err(Error::InvalidConfig(format!(
                "band stats need {CHANNELS} channels, got {} / {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if let Some(c) = self.std.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::ZeroVariance { channel: c });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = read_json(path)?;
        s.validate()?;
        Ok(s)
    }
}

/// Count, mean and sum of squared deviations for one channel of one sample.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn of(values: &[f32]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let m2 = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
        Self { n, mean, m2 }
    }

    /// Chan et al. pairwise combination.
    fn merge(self, other: Self) -> Self {
        if self.n == 0.0 {
            return other;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        Self {
            n,
            mean: self.mean + delta * other.n / n,
            m2: self.m2 + other.m2 + delta * delta * self.n * other.n / n,
        }
    }
}

/// Band statistics over every pixel of every sample in `manifest`.
///
/// Per-sample moments are merged in `sample_id` order, so the result does not
/// depend on manifest order.
pub fn compute_band_stats(manifest: &Manifest) -> Result<BandStats> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.sort_by(|&a, &b| manifest.entries[a].sample_id.cmp(&manifest.entries[b].sample_id));
    let mut acc = vec![Moments::default(); CHANNELS];
    for i in order {
        let s = manifest.read(i)?;
        for (c, m) in acc.iter_mut().enumerate() {
            *m = m.merge(Moments::of(s.channel(c)));
        }
    }
    let mean: Vec<f64> = acc.iter().map(|m| m.mean).collect();
    let std: Vec<f64> = acc.iter().map(|m| (m.m2 / m.n).sqrt()).collect();
    if let Some(c) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::ZeroVariance { channel: c });
    }
    Ok(BandStats {
        mean,
        std,
        n_pixels: acc[0].n as u64,
        provenance: Some(StatsProvenance {
            dataset_name: manifest.dataset_name.clone(),
            n_samples: manifest.len(),
        }),
    })
}

/// `(concat(s2, s1)[c] - mean[c]) / std[c]` as a `[1, 14, H, W]` tensor.
pub fn normalize_patch(sample: &PatchSample, stats: &BandStats) -> Tensor {
    let h = sample.patch_size;
    let plane = sample.plane();
    let mut data = Vec::with_capacity(CHANNELS * plane);
    for c in 0..CHANNELS {
        let (m, s) = (stats.mean[c], stats.std[c]);
        data.extend(sample.channel(c).iter().map(|&v| ((v as f64 - m) / s) as f32));
    }
    Tensor::from_vec(TensorSpec::new(1, CHANNELS, h, h), data).expect("channel layout")
}

/// Inverse of [`normalize_patch`] on a `[B, 14, H, W]` tensor.
pub fn denormalize(x: &Tensor, stats: &BandStats) -> Tensor {
    let s = x.spec();
    let plane = s.plane();
    let mut out = x.clone();
    for (i, lane) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.channels;
        for v in lane {
            *v = (*v as f64 * stats.std[c] + stats.mean[c]) as f32;
        }
    }
    out
}
