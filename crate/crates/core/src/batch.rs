//! Normalized mini-batch assembly from a manifest.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::data::{normalize_patch, BandStats, Manifest};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::pretrain::augment::center_crop;

/// Reads samples by manifest index, normalizes them, and optionally keeps
/// them in memory across epochs.
#[derive(Debug)]
pub struct PatchLoader<'a> {
    pub manifest: &'a Manifest,
    pub stats: &'a BandStats,
    cache: Option<RefCell<HashMap<usize, (Tensor, Option<Vec<u8>>)>>>,
}

impl<'a> PatchLoader<'a> {
    pub fn new(manifest: &'a Manifest, stats: &'a BandStats, cache: bool) -> Result<Self> {
        stats.validate()?;
        if manifest.is_empty() {
            return Err(Error::EmptyManifest);
        }
        Ok(Self {
            manifest,
            stats,
            cache: cache.then(|| RefCell::new(HashMap::new())),
        })
    }

    pub fn patch_size(&self) -> usize {
        self.manifest.patch_size
    }

    fn fetch(&self, index: usize) -> Result<(Tensor, Option<Vec<u8>>)> {
        if index >= self.manifest.len() {
            return Err(Error::InvalidManifest(format!(
                "index {index} beyond {} entries",
                self.manifest.len()
            )));
        }
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.borrow().get(&index) {
                return Ok(hit.clone());
            }
        }
        let sample = self.manifest.read(index)?;
        let item = (normalize_patch(&sample, self.stats), sample.lc);
        if let Some(cache) = &self.cache {
            cache.borrow_mut().insert(index, item.clone());
        }
        Ok(item)
    }

    /// Full normalized patch `[1, 14, P, P]`.
    pub fn patch(&self, index: usize) -> Result<Tensor> {
        Ok(self.fetch(index)?.0)
    }

    /// Center crops of the given samples stacked into `[B, 14, size, size]`.
    pub fn inputs(&self, indices: &[usize], size: usize) -> Result<Tensor> {
        let crops = indices
            .iter()
            .map(|&i| center_crop(&self.patch(i)?, size))
            .collect::<Result<Vec<_>>>()?;
        Tensor::cat_batch(&crops.iter().collect::<Vec<_>>())
    }

    /// Center-cropped label codes, `B * size * size` in row-major order.
    pub fn labels(&self, indices: &[usize], size: usize) -> Result<Vec<u8>> {
        let p = self.patch_size();
        if size > p {
            return Err(Error::Shape(format!("label crop {size} from patch {p}")));
        }
        let off = (p - size) / 2;
        let mut out = Vec::with_capacity(indices.len() * size * size);
        for &i in indices {
            let lc = self.fetch(i)?.1.ok_or_else(|| Error::InvalidSample {
                sample_id: self.manifest.entries[i].sample_id.clone(),
                reason: "no land-cover raster".into(),
            })?;
            for y in 0..size {
                let row = (off + y) * p + off;
                out.extend_from_slice(&lc[row..row + size]);
            }
        }
        Ok(out)
    }
}
