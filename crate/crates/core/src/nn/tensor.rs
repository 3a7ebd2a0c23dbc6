use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Shape of a dense NCHW float32 tensor. Every dimension is at least 1.
#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct TensorSpec {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorSpec {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Shape(format!("zero-sized dimension in {self:?}")));
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements in one batch item.
    pub fn item(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl fmt::Debug for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Dense NCHW float32 tensor in C order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    spec: TensorSpec,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.spec)
    }
}

impl Tensor {
    pub fn zeros(spec: TensorSpec) -> Self {
        Self {
            spec,
            data: vec![0.0; spec.numel()],
        }
    }

    pub fn full(spec: TensorSpec, value: f32) -> Self {
        Self {
            spec,
            data: vec![value; spec.numel()],
        }
    }

    pub fn from_vec(spec: TensorSpec, data: Vec<f32>) -> Result<Self> {
        if data.len() != spec.numel() {
            return Err(Error::Shape(format!(
                "{} values for shape {:?}",
                data.len(),
                spec
            )));
        }
        Ok(Self { spec, data })
    }

    pub fn randn<R: Rng + ?Sized>(spec: TensorSpec, rng: &mut R) -> Self {
        let data = (0..spec.numel())
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        Self { spec, data }
    }

    pub fn spec(&self) -> TensorSpec {
        self.spec
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self, b: usize) -> &[f32] {
        let n = self.spec.item();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.spec.item();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        let s = self.spec;
        self.data[((b * s.channels + c) * s.height + y) * s.width + x]
    }

    pub fn reshape(self, spec: TensorSpec) -> Result<Self> {
        Self::from_vec(spec, self.data)
    }

    /// Concatenates along the batch axis.
    pub fn cat_batch(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cat of zero tensors".into()))?
            .spec;
        let mut batch = 0;
        let mut data = Vec::new();
        for t in parts {
            let s = t.spec;
            if (s.channels, s.height, s.width) != (first.channels, first.height, first.width) {
                return Err(Error::Shape(format!("cannot cat {s:?} with {first:?}")));
            }
            batch += s.batch;
            data.extend_from_slice(&t.data);
        }
        Self::from_vec(
            TensorSpec::new(batch, first.channels, first.height, first.width),
            data,
        )
    }

    /// Batch items `start..start + count` as a new tensor.
    pub fn slice_batch(&self, start: usize, count: usize) -> Self {
        let n = self.spec.item();
        let spec = TensorSpec {
            batch: count,
            ..self.spec
        };
        Self {
            spec,
            data: self.data[start * n..(start + count) * n].to_vec(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.spec, other.spec);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f32) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
