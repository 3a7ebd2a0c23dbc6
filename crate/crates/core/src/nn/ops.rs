//! Low-level kernels shared by the layers: GEMM, im2col/col2im, softmax.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::nn::tensor::{Tensor, TensorSpec};

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// Output extent along one spatial axis, if positive.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution along one axis.
    pub fn transposed_extent(&self, input: usize) -> Option<usize> {
        let full = (input - 1) * self.stride + self.kernel;
        full.checked_sub(2 * self.pad).filter(|&v| v > 0)
    }
}

/// Output shape of a convolution: `H' = floor((H + 2p - k) / s) + 1`.
pub fn conv2d_output_shape(
    input: TensorSpec,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<TensorSpec> {
    input.validate()?;
    if kernel == 0 || stride == 0 || out_channels == 0 {
        return Err(Error::Shape(format!(
            "kernel {kernel}, stride {stride}, out channels {out_channels} must be positive"
        )));
    }
    let g = ConvGeometry::new(kernel, stride, pad);
    match (g.out_extent(input.height), g.out_extent(input.width)) {
        (Some(h), Some(w)) => Ok(TensorSpec::new(input.batch, out_channels, h, w)),
        _ => Err(Error::Shape(format!(
            "convolution k{kernel} s{stride} p{pad} on {input:?} has non-positive output"
        ))),
    }
}

thread_local! {
    static WIDE: Cell<bool> = const { Cell::new(false) };
}

/// While alive, [`gemm`] on this thread accumulates in f64 and rounds each
/// output once. Storage stays float32.
pub(crate) struct WideAccumulation {
    previous: bool,
}

impl WideAccumulation {
    pub(crate) fn enable() -> Self {
        Self {
            previous: WIDE.with(|w| w.replace(true)),
        }
    }
}

impl Drop for WideAccumulation {
    fn drop(&mut self) {
        WIDE.with(|w| w.set(self.previous));
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` with row-major storage.
///
/// `op(A)` is `m x k`; when `trans_a` is set, `A` is stored as `k x m`.
/// Likewise for `B` (`k x n`, stored `n x k` when transposed).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    if WIDE.with(|w| w.get()) {
        let a64: Vec<f64> = a[..m * k].iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = b[..k * n].iter().map(|&v| v as f64).collect();
        let mut c64: Vec<f64> = c[..m * n].iter().map(|&v| v as f64).collect();
        // SAFETY: freshly allocated buffers of exactly the strided extents.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha as f64,
                a64.as_ptr(),
                rsa as isize,
                csa as isize,
                b64.as_ptr(),
                rsb as isize,
                csb as isize,
                beta as f64,
                c64.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for (dst, v) in c.iter_mut().zip(c64) {
            *dst = v as f32;
        }
        return;
    }
    // SAFETY: slices cover the strided extents checked above; C does not alias A or B.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[channels, h, w]` image into `[channels * k * k, oh * ow]` columns.
pub fn im2col(
    input: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let k = g.kernel;
    let plane_out = oh * ow;
    for c in 0..channels {
        let img = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane_out..(row + 1) * plane_out];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &img[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            *v = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[channels, h, w]`.
pub fn col2im(
    col: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let k = g.kernel;
    let plane_out = oh * ow;
    for c in 0..channels {
        let img = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane_out..(row + 1) * plane_out];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Stable softmax of `row` in place (max-shifted).
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax along `axis` (0 = batch, 1 = channel, 2 = height, 3 = width).
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis > 3 {
        return Err(Error::Shape(format!("softmax axis {axis} out of range")));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let dims = x.spec().dims();
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut lane = vec![0.0f32; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, v) in lane.iter_mut().enumerate() {
                *v = data[base + j * inner];
            }
            softmax_in_place(&mut lane);
            for (j, v) in lane.iter().enumerate() {
                data[base + j * inner] = *v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet_stem_and_layer2_shapes() {
        let s = conv2d_output_shape(TensorSpec::new(2, 14, 128, 128), 64, 7, 2, 3).unwrap();
        assert_eq!(s, TensorSpec::new(2, 64, 64, 64));
        let s = conv2d_output_shape(TensorSpec::new(2, 64, 64, 64), 128, 3, 2, 1).unwrap();
        assert_eq!(s, TensorSpec::new(2, 128, 32, 32));
    }

    #[test]
    fn pointwise_conv_keeps_spatial_dims() {
        let s = conv2d_output_shape(TensorSpec::new(1, 3, 17, 9), 5, 1, 1, 0).unwrap();
        assert_eq!(s, TensorSpec::new(1, 5, 17, 9));
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        assert!(conv2d_output_shape(TensorSpec::new(1, 3, 2, 2), 5, 7, 1, 0).is_err());
        assert!(conv2d_output_shape(TensorSpec::new(1, 3, 8, 8), 5, 3, 0, 1).is_err());
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let x = Tensor::full(TensorSpec::new(1, 4, 1, 1), 3.0);
        let y = softmax_axis(&x, 1).unwrap();
        for v in y.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_saturates_on_large_one_hot() {
        let x = Tensor::from_vec(TensorSpec::new(1, 1, 1, 3), vec![0.0, 1000.0, 0.0]).unwrap();
        let y = softmax_axis(&x, 3).unwrap();
        assert!(y.data()[1] > 1.0 - 1e-6);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let v = [0.3f64, -1.2, 2.05];
        let denom: f64 = v.iter().map(|x| x.exp()).sum();
        let x = Tensor::from_vec(
            TensorSpec::new(1, 3, 1, 1),
            v.iter().map(|&x| x as f32).collect(),
        )
        .unwrap();
        let y = softmax_axis(&x, 1).unwrap();
        for (i, &xi) in v.iter().enumerate() {
            assert!((y.data()[i] as f64 - xi.exp() / denom).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_sums_to_one_on_every_axis() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(TensorSpec::new(2, 3, 4, 5), &mut rng);
        for axis in 0..4 {
            let y = softmax_axis(&x, axis).unwrap();
            let dims = y.spec().dims();
            let mut sums = std::collections::HashMap::<[usize; 3], f64>::new();
            for b in 0..dims[0] {
                for c in 0..dims[1] {
                    for h in 0..dims[2] {
                        for w in 0..dims[3] {
                            let mut key = [b, c, h, w].to_vec();
                            key.remove(axis);
                            *sums.entry([key[0], key[1], key[2]]).or_default() +=
                                y.at(b, c, h, w) as f64;
                        }
                    }
                }
            }
            for s in sums.values() {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (c, h, w) = (2, 7, 6);
        let g = ConvGeometry::new(3, 2, 1);
        let (oh, ow) = (g.out_extent(h).unwrap(), g.out_extent(w).unwrap());
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..c * 9 * oh * ow)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut col = vec![0.0; c * 9 * oh * ow];
        im2col(&x, c, h, w, g, oh, ow, &mut col);
        let mut back = vec![0.0; c * h * w];
        col2im(&y, c, h, w, g, oh, ow, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
