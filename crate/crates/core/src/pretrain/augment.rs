//! Curriculum-scaled augmentations for contrastive sensor fusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::nn::{Tensor, TensorSpec};

/// S2 channel indices of bands B4, B3, B2 (red, green, blue).
pub const RGB_CHANNELS: [usize; 3] = [3, 2, 1];
pub const MAX_BAND_DROPOUT: f64 = 0.2;
pub const MAX_PHOTOMETRIC_JITTER: f64 = 0.4;
/// Largest hue rotation, in turns.
pub const MAX_HUE_SHIFT: f64 = 0.1;

/// Square crop of a `[1, C, H, W]` tensor at `(top, left)`.
pub fn crop(x: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let s = x.spec();
    if s.batch != 1 || top + size > s.height || left + size > s.width || size == 0 {
        return Err(Error::Shape(format!(
            "crop {size} at ({top}, {left}) from {s:?}"
        )));
    }
    let mut out = Tensor::zeros(TensorSpec::new(1, s.channels, size, size));
    let src = x.data();
    let dst = out.data_mut();
    for c in 0..s.channels {
        for y in 0..size {
            let from = (c * s.height + top + y) * s.width + left;
            let to = (c * size + y) * size;
            dst[to..to + size].copy_from_slice(&src[from..from + size]);
        }
    }
    Ok(out)
}

pub fn center_crop(x: &Tensor, size: usize) -> Result<Tensor> {
    let s = x.spec();
    if size > s.height || size > s.width {
        return Err(Error::Shape(format!("center crop {size} from {s:?}")));
    }
    crop(x, (s.height - size) / 2, (s.width - size) / 2, size)
}

/// Which augmentations were applied, for inspection and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRecord {
    pub top: usize,
    pub left: usize,
    pub dropped: Vec<bool>,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_turns: f64,
}

/// One augmented `size x size` view of a normalized `[1, 14, H, W]` sample.
///
/// At intensity 0 the view is exactly the center crop. Otherwise, in order:
/// a crop whose offset jitters around the center by up to `intensity` times
/// the available margin; per-channel contrast about the crop mean and
/// brightness scaling, both by factors in `1 ± 0.4 intensity`; saturation
/// scaling and hue rotation (up to `0.1 intensity` turns about the gray axis)
/// of the RGB bands; and band dropout zeroing each channel with probability
/// `0.2 intensity`, always keeping at least one.
pub fn csf_augment(x: &Tensor, size: usize, intensity: f64, seed: u64) -> Result<(Tensor, AugmentRecord)> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::InvalidConfig(format!("intensity {intensity} outside [0, 1]")));
    }
    let s = x.spec();
    if s.channels != CHANNELS {
        return Err(Error::Shape(format!("augmentation expects {CHANNELS} channels, got {s:?}")));
    }
    if size > s.height || size > s.width {
        return Err(Error::Shape(format!("view {size} larger than {s:?}")));
    }
    let (cy, cx) = ((s.height - size) / 2, (s.width - size) / 2);
    let mut rec = AugmentRecord {
        top: cy,
        left: cx,
        dropped: vec![false; CHANNELS],
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue_turns: 0.0,
    };
    if intensity == 0.0 {
        return Ok((crop(x, cy, cx, size)?, rec));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng, center: usize, room: usize| -> usize {
        let reach = (intensity * center.min(room - center) as f64).round() as i64;
        (center as i64 + rng.random_range(-reach..=reach)) as usize
    };
    rec.top = jitter(&mut rng, cy, s.height - size);
    rec.left = jitter(&mut rng, cx, s.width - size);
    let spread = MAX_PHOTOMETRIC_JITTER * intensity;
    rec.brightness = rng.random_range(1.0 - spread..=1.0 + spread);
    rec.contrast = rng.random_range(1.0 - spread..=1.0 + spread);
    rec.saturation = rng.random_range(1.0 - spread..=1.0 + spread);
    let hue = MAX_HUE_SHIFT * intensity;
    rec.hue_turns = rng.random_range(-hue..=hue);
    let p = MAX_BAND_DROPOUT * intensity;
    for d in rec.dropped.iter_mut() {
        *d = rng.random_bool(p);
    }
    if rec.dropped.iter().all(|&d| d) {
        let keep = rng.random_range(0..CHANNELS);
        rec.dropped[keep] = false;
    }

    let mut view = crop(x, rec.top, rec.left, size)?;
    let plane = size * size;
    let data = view.data_mut();
    for c in 0..CHANNELS {
        let lane = &mut data[c * plane..(c + 1) * plane];
        let mean = lane.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        for v in lane.iter_mut() {
            *v = (((*v as f64 - mean) * rec.contrast + mean) * rec.brightness) as f32;
        }
    }
    color_jitter(data, plane, rec.saturation, rec.hue_turns);
    for (c, &d) in rec.dropped.iter().enumerate() {
        if d {
            data[c * plane..(c + 1) * plane].fill(0.0);
        }
    }
    Ok((view, rec))
}

/// Scales chroma about the per-pixel gray level, then rotates it about the
/// gray axis `(1, 1, 1)` by `hue_turns` full turns.
fn color_jitter(data: &mut [f32], plane: usize, saturation: f64, hue_turns: f64) {
    let theta = hue_turns * std::f64::consts::TAU;
    let (sin, cos) = theta.sin_cos();
    let k = 1.0 / 3.0f64.sqrt();
    // Rodrigues rotation about the unit gray axis.
    let t = 1.0 - cos;
    let rot = [
        [cos + t * k * k, t * k * k - sin * k, t * k * k + sin * k],
        [t * k * k + sin * k, cos + t * k * k, t * k * k - sin * k],
        [t * k * k - sin * k, t * k * k + sin * k, cos + t * k * k],
    ];
    let [r, g, b] = RGB_CHANNELS;
    for i in 0..plane {
        let px = [data[r * plane + i] as f64, data[g * plane + i] as f64, data[b * plane + i] as f64];
        let gray = (px[0] + px[1] + px[2]) / 3.0;
        let sat = px.map(|v| gray + saturation * (v - gray));
        for (row, &ch) in rot.iter().zip(&[r, g, b]) {
            data[ch * plane + i] = (row[0] * sat[0] + row[1] * sat[1] + row[2] * sat[2]) as f32;
        }
    }
}
