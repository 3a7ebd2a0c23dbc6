//! Deterministic synthetic paired S1/S2/land-cover patches.
//!
//! Labels come from a quantile-thresholded Gaussian random field, so classes
//! form contiguous regions. S2 is a per-class spectral signature plus a small
//! texture field, brightened toward 1.0 under a second (cloud) field. S1
//! carries the signature's VV/VH values under multiplicative gamma speckle and
//! is never touched by clouds. A fraction of label pixels is moved to an
//! adjacent class code to imitate weak labels.
//!
//! Every sample draws from its own ChaCha stream keyed by `(seed, index)`, so
//! samples can be generated in any order with identical results.

use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_sample, Manifest, PatchSample, CHANNELS, S1_BANDS, S2_BANDS};
use crate::error::{Error, Result};
use crate::geo::LonLat;

/// Amplitude of the per-band S2 texture.
pub const TEXTURE_AMPLITUDE: f32 = 0.05;
/// Texture values are truncated at this many standard deviations.
pub const TEXTURE_CLIP: f32 = 4.0;
/// Blur radius (pixels) of the texture fields.
pub const TEXTURE_SMOOTHNESS: f64 = 1.0;
pub const MIN_SIGNATURE_GAP: f64 = 0.05;
pub const MAX_CLASSES: usize = 250;

/// Channel means for urban, agriculture, natural, wetlands and water,
/// ordered as S2 B1..B12 (B10 excluded) then S1 VV, VH.
pub const DEFAULT_SIGNATURES: [[f32; CHANNELS]; 5] = [
    [0.30, 0.32, 0.34, 0.36, 0.38, 0.40, 0.41, 0.42, 0.43, 0.40, 0.45, 0.42, 0.60, 0.30],
    [0.20, 0.22, 0.28, 0.24, 0.35, 0.50, 0.58, 0.62, 0.64, 0.55, 0.40, 0.30, 0.35, 0.15],
    [0.15, 0.16, 0.20, 0.15, 0.25, 0.45, 0.52, 0.56, 0.58, 0.50, 0.30, 0.20, 0.25, 0.20],
    [0.18, 0.20, 0.24, 0.20, 0.24, 0.30, 0.32, 0.34, 0.35, 0.30, 0.22, 0.18, 0.15, 0.06],
    [0.20, 0.22, 0.21, 0.20, 0.18, 0.17, 0.16, 0.15, 0.15, 0.14, 0.12, 0.10, 0.04, 0.02],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub patch_size: usize,
    pub n_classes: usize,
    /// Gaussian blur radius (pixels) of the label and cloud fields.
    pub field_smoothness: f64,
    pub cloud_fraction: f64,
    pub speckle_looks: f64,
    pub label_noise: f64,
    /// Write `LC.u8` rasters.
    pub labeled: bool,
    pub dataset_name: String,
    /// Per-class 14-vectors; generated from the seed when absent and
    /// `n_classes != 5`.
    pub class_signatures: Option<Vec<Vec<f32>>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 64,
            patch_size: crate::data::DEFAULT_PATCH_SIZE,
            n_classes: 5,
            field_smoothness: 16.0,
            cloud_fraction: 0.3,
            speckle_looks: 4.0,
            label_noise: 0.1,
            labeled: true,
            dataset_name: "synthetic".into(),
            class_signatures: None,
        }
    }
}

impl SynthConfig {
    pub fn signatures(&self) -> Vec<Vec<f32>> {
        if let Some(s) = &self.class_signatures {
            return s.clone();
        }
        if self.n_classes <= DEFAULT_SIGNATURES.len() {
            return DEFAULT_SIGNATURES[..self.n_classes]
                .iter()
                .map(|s| s.to_vec())
                .collect();
        }
        // Rejection-sample until every pair is well separated.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5157_4e41_5455_5245);
        let mut out: Vec<Vec<f32>> = DEFAULT_SIGNATURES.iter().map(|s| s.to_vec()).collect();
        while out.len() < self.n_classes {
            let cand: Vec<f32> = (0..CHANNELS).map(|_| rng.random_range(0.2..0.8)).collect();
            if out.iter().all(|s| l2(s, &cand) >= 2.0 * MIN_SIGNATURE_GAP) {
                out.push(cand);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.n_classes == 0 || self.n_classes > MAX_CLASSES {
            return bad(format!("n_classes {} outside 1..={MAX_CLASSES}", self.n_classes));
        }
        if self.patch_size < 8 {
            return bad(format!("patch_size {} < 8", self.patch_size));
        }
        if !(self.field_smoothness > 0.0) {
            return bad("field_smoothness must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cloud_fraction) {
            return bad("cloud_fraction outside [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise outside [0, 1]".into());
        }
        if !(self.speckle_looks >= 1.0) {
            return bad("speckle_looks must be >= 1".into());
        }
        let sigs = self.signatures();
        if sigs.len() != self.n_classes {
            return bad(format!("{} signatures for {} classes", sigs.len(), self.n_classes));
        }
        for (i, s) in sigs.iter().enumerate() {
            if s.len() != CHANNELS || s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("signature {i} must be {CHANNELS} values in [0, 1]"));
            }
            for (j, t) in sigs.iter().enumerate().skip(i + 1) {
                if l2(s, t) < MIN_SIGNATURE_GAP {
                    return bad(format!("signatures {i} and {j} closer than {MIN_SIGNATURE_GAP}"));
                }
            }
        }
        Ok(())
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable periodic blur of a square field, rows then columns.
fn blur_periodic(field: &[f64], size: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let n = size as isize;
    let wrap = |i: isize| i.rem_euclid(n) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        let row = &field[y * size..(y + 1) * size];
        for x in 0..size {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                acc += w * row[wrap(x as isize + t as isize - radius)];
            }
            tmp[y * size + x] = acc;
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                acc += w * tmp[wrap(y as isize + t as isize - radius) * size + x];
            }
            out[y * size + x] = acc;
        }
    }
    out
}

/// White noise blurred by a Gaussian of radius `smoothness` pixels and
/// rescaled to zero mean and unit variance. Radii below half a pixel skip the
/// blur. Boundaries wrap around.
pub fn generate_random_field(seed: u64, size: usize, smoothness: f64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..size * size)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let field = if smoothness < 0.5 {
        noise
    } else {
        blur_periodic(&noise, size, &gaussian_kernel(smoothness))
    };
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    field
        .iter()
        .map(|v| ((v - mean) / std.max(f64::MIN_POSITIVE)) as f32)
        .collect()
}

/// Value below which a fraction `q` of `values` falls.
fn empirical_quantile(sorted: &[f32], q: f64) -> f32 {
    let idx = ((sorted.len() as f64 * q).floor() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Splits a field into `n_classes` equal-share codes `1..=n_classes`.
fn threshold_labels(field: &[f32], n_classes: usize) -> Vec<u8> {
    let mut sorted = field.to_vec();
    sorted.sort_by(f32::total_cmp);
    let cuts: Vec<f32> = (1..n_classes)
        .map(|k| empirical_quantile(&sorted, k as f64 / n_classes as f64))
        .collect();
    field
        .iter()
        .map(|v| (cuts.iter().filter(|&&c| *v >= c).count() + 1) as u8)
        .collect()
}

/// Cloud opacity in `[0, 1]`: zero for a `1 - cloud_fraction` share of pixels,
/// ramping to full saturation half a standard deviation above the threshold.
fn cloud_opacity(field: &[f32], cloud_fraction: f64) -> Vec<f32> {
    if cloud_fraction <= 0.0 {
        return vec![0.0; field.len()];
    }
    let mut sorted = field.to_vec();
    sorted.sort_by(f32::total_cmp);
    let threshold = if cloud_fraction >= 1.0 {
        f32::NEG_INFINITY
    } else {
        empirical_quantile(&sorted, 1.0 - cloud_fraction)
    };
    field
        .iter()
        .map(|&v| {
            if v < threshold {
                0.0
            } else if threshold == f32::NEG_INFINITY {
                1.0
            } else {
                ((v - threshold) / 0.5).clamp(0.0, 1.0).max(f32::EPSILON)
            }
        })
        .collect()
}

/// A generated sample together with the clean labels and cloud mask.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub sample: PatchSample,
    /// Labels before weak-label corruption.
    pub clean_labels: Vec<u8>,
    /// Cloud opacity per pixel; zero on clear pixels.
    pub cloud: Vec<f32>,
}

pub fn sample_id(index: usize) -> String {
    format!("synth_{index:06}")
}

fn index_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates sample `index` at `location`.
pub fn generate_sample(cfg: &SynthConfig, index: usize, location: LonLat) -> Result<PatchSample> {
    Ok(generate_sample_detailed(cfg, index, location)?.sample)
}

pub fn generate_sample_detailed(
    cfg: &SynthConfig,
    index: usize,
    location: LonLat,
) -> Result<SynthSample> {
    cfg.validate()?;
    let sigs = cfg.signatures();
    let size = cfg.patch_size;
    let plane = size * size;
    let mut rng = index_rng(cfg.seed, index);

    let label_field = generate_random_field(rng.random(), size, cfg.field_smoothness);
    let clean = threshold_labels(&label_field, cfg.n_classes);
    let cloud_field = generate_random_field(rng.random(), size, cfg.field_smoothness);
    let cloud = cloud_opacity(&cloud_field, cfg.cloud_fraction);

    let mut s2 = vec![0.0f32; S2_BANDS * plane];
    for band in 0..S2_BANDS {
        let tex = generate_random_field(rng.random(), size, TEXTURE_SMOOTHNESS);
        let dst = &mut s2[band * plane..(band + 1) * plane];
        for p in 0..plane {
            let base = sigs[clean[p] as usize - 1][band]
                + TEXTURE_AMPLITUDE * tex[p].clamp(-TEXTURE_CLIP, TEXTURE_CLIP);
            dst[p] = base + cloud[p] * (1.0 - base);
        }
    }

    let speckle = Gamma::new(cfg.speckle_looks, 1.0 / cfg.speckle_looks)
        .map_err(|e| Error::InvalidConfig(format!("speckle: {e}")))?;
    let mut s1 = vec![0.0f32; S1_BANDS * plane];
    for pol in 0..S1_BANDS {
        let dst = &mut s1[pol * plane..(pol + 1) * plane];
        for p in 0..plane {
            let sig = sigs[clean[p] as usize - 1][S2_BANDS + pol] as f64;
            dst[p] = (sig * speckle.sample(&mut rng)) as f32;
        }
    }

    let mut labels = clean.clone();
    let n = cfg.n_classes as u8;
    for l in labels.iter_mut() {
        if rng.random::<f64>() < cfg.label_noise && n > 1 {
            let up = rng.random::<bool>();
            *l = match (*l, up) {
                (1, _) => 2,
                (c, _) if c == n => n - 1,
                (c, true) => c + 1,
                (c, false) => c - 1,
            };
        }
    }

    let base = NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date");
    let s2_date = base
        .checked_add_days(Days::new(rng.random_range(0..730)))
        .expect("date in range");
    let offset: i64 = rng.random_range(-3..=3);
    let s1_date = if offset >= 0 {
        s2_date.checked_add_days(Days::new(offset as u64))
    } else {
        s2_date.checked_sub_days(Days::new((-offset) as u64))
    }
    .expect("date in range");

    let sample = PatchSample {
        sample_id: sample_id(index),
        lon: location.0,
        lat: location.1,
        patch_size: size,
        s2,
        s1,
        lc: cfg.labeled.then_some(labels),
        s2_date,
        s1_date,
    };
    sample.validate()?;
    Ok(SynthSample {
        sample,
        clean_labels: clean,
        cloud,
    })
}

/// Generates and writes `cfg.n_samples` samples under `root`, then writes the manifest.
pub fn generate_dataset(cfg: &SynthConfig, locations: &[LonLat], root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if locations.len() != cfg.n_samples {
        return Err(Error::InvalidConfig(format!(
            "{} locations for {} samples",
            locations.len(),
            cfg.n_samples
        )));
    }
    let mut manifest = Manifest::new(cfg.dataset_name.clone(), cfg.patch_size, root);
    manifest.created_seed = Some(cfg.seed);
    for (i, &loc) in locations.iter().enumerate() {
        let sample = generate_sample(cfg, i, loc)?;
        write_sample(&sample, root)?;
        manifest.push(&sample);
    }
    manifest.save()?;
    Ok(manifest)
}
