//! Central-difference gradient checking.
//!
//! The checked function maps a flat `f32` vector to a scalar loss and its
//! reverse-mode gradient. A random subset of coordinates is perturbed by
//! `±eps` and the resulting slope is compared against the analytic value.
//!
//! Relative error at a coordinate is `|a - n| / max(|a|, |n|, floor)` where
//! `floor = floor_fraction * max|a|` over the full analytic gradient. The
//! floor keeps float32 cancellation noise on near-zero coordinates from
//! dominating the report.
//!
//! ReLU makes the loss non-differentiable on a measure-zero set that a finite
//! step can still straddle. Every evaluation records the on/off pattern of all
//! ReLUs it runs; a coordinate whose perturbed pattern differs from the base
//! pattern straddles a kink and is skipped; further coordinates are drawn
//! until `coords` smooth ones are checked or `max_samples` were tried. A check
//! that ends with fewer than `coords` smooth coordinates fails.
//!
//! Matrix products accumulate in f64 while a check runs, so the loss is not
//! swamped by float32 summation error over long reductions. Values stay f32.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::ActivationTrace;
use crate::nn::module::{Mode, Module};
use crate::nn::ops::WideAccumulation;
use crate::nn::tensor::{Tensor, TensorSpec};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f32,
    pub tol: f64,
    pub coords: usize,
    pub floor_fraction: f64,
    /// Upper bound on coordinates tried, kinked ones included.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 2e-2,
            coords: 64,
            floor_fraction: 1e-2,
            max_samples: 512,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the step straddled a kink.
    pub kinks: usize,
    /// Smooth coordinates the check asked for.
    pub wanted: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Set when a loss or gradient value was non-finite.
    pub failure: Option<String>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.checked > 0 && self.checked >= self.wanted && self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.failure {
            Some(msg) => write!(f, "FAIL ({msg})"),
            None => write!(
                f,
                "{} max rel err {:.3e} over {} coords, {} kinks skipped (worst #{}: analytic {:.4e}, numeric {:.4e}, tol {:.1e})",
                if self.passed() { "PASS" } else { "FAIL" },
                self.max_rel_err,
                self.checked,
                self.kinks,
                self.worst_coord,
                self.analytic,
                self.numeric,
                self.tol
            ),
        }
    }
}

/// Compares `f`'s reverse-mode gradient at `x` against central differences.
pub fn grad_check<F>(x: &[f32], mut f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&[f32]) -> Result<(f64, Vec<f32>)>,
{
    grad_check_with(x, |v, _| f(v), cfg)
}

/// Like [`grad_check`], but tells `f` whether the gradient is needed. The
/// perturbed evaluations only use the loss, so `f` may skip its backward pass
/// and return an empty gradient when the flag is false.
pub fn grad_check_with<F>(x: &[f32], mut f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&[f32], bool) -> Result<(f64, Vec<f32>)>,
{
    let mut report = GradCheckReport {
        checked: 0,
        kinks: 0,
        wanted: cfg.coords.min(x.len()),
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        failure: None,
        tol: cfg.tol,
    };
    let mut f = |v: &[f32], with_grad: bool| -> Result<(f64, Vec<f32>, u64)> {
        let _wide = WideAccumulation::enable();
        let _guard = ActivationTrace::start();
        let (loss, grad) = f(v, with_grad)?;
        Ok((loss, grad, _guard.finish()))
    };
    let (loss, grad, base_trace) = f(x, true)?;
    if grad.len() != x.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} inputs",
            grad.len(),
            x.len()
        )));
    }
    if !loss.is_finite() {
        report.failure = Some(format!("loss is {loss} at the base point"));
        return Ok(report);
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        report.failure = Some(format!("gradient coordinate {i} is {}", grad[i]));
        return Ok(report);
    }
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs() as f64));
    let floor = (cfg.floor_fraction * gmax).max(f64::MIN_POSITIVE);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tries = cfg.max_samples.max(cfg.coords).min(x.len());
    let coords = sample(&mut rng, x.len(), tries).into_vec();

    let mut probe = x.to_vec();
    for &i in &coords {
        if report.checked >= report.wanted {
            break;
        }
        let orig = probe[i];
        probe[i] = orig + cfg.eps;
        let (plus, _, plus_trace) = f(&probe, false)?;
        probe[i] = orig - cfg.eps;
        let (minus, _, minus_trace) = f(&probe, false)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            report.failure = Some(format!("loss non-finite when perturbing coordinate {i}"));
            return Ok(report);
        }
        // The perturbation actually applied after float32 rounding.
        let up = ((orig + cfg.eps) as f64) - orig as f64;
        let down = orig as f64 - ((orig - cfg.eps) as f64);
        let numeric = (plus - minus) / (up + down);
        if plus_trace != base_trace || minus_trace != base_trace {
            report.kinks += 1;
            continue;
        }
        let analytic = grad[i] as f64;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.analytic = analytic;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Trainable parameters of `m`, flattened in visit order.
pub fn flatten_params(m: &dyn Module) -> Vec<f32> {
    let mut out = Vec::new();
    m.visit("", &mut |_, p| {
        if p.trainable {
            out.extend_from_slice(&p.value)
        }
    });
    out
}

/// Accumulated gradients of the trainable parameters, in visit order.
pub fn flatten_grads(m: &dyn Module) -> Vec<f32> {
    let mut out = Vec::new();
    m.visit("", &mut |_, p| {
        if p.trainable {
            out.extend_from_slice(&p.grad)
        }
    });
    out
}

/// Overwrites the trainable parameters of `m` from a flat vector.
pub fn load_params(m: &mut dyn Module, flat: &[f32]) {
    let mut offset = 0;
    m.visit_mut("", &mut |_, p| {
        if p.trainable {
            let n = p.len();
            p.value.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    });
    assert_eq!(offset, flat.len(), "flat parameter vector has the wrong length");
}

/// Parameter and input gradient reports for one module.
#[derive(Clone, Debug)]
pub struct ModuleGradReport {
    pub params: GradCheckReport,
    pub input: GradCheckReport,
}

impl ModuleGradReport {
    pub fn passed(&self) -> bool {
        self.params.passed() && self.input.passed()
    }
}

impl std::fmt::Display for ModuleGradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "params: {}; input: {}", self.params, self.input)
    }
}

/// Checks parameter and input gradients of `m` in training mode under the
/// fixed random projection loss `sum(w * m(x))`, with `w` standard normal and
/// `x` normal with standard deviation `input_std`.
///
/// Batch-normalized blocks are invariant to the input scale, so their input
/// gradients shrink as `1 / input_std` while float32 rounding of the loss does
/// not; a small `input_std` keeps the finite-difference signal above that noise.
pub fn check_module_gradients(
    m: &mut dyn Module,
    input: TensorSpec,
    input_std: f32,
    seed: u64,
    cfg: GradCheckConfig,
) -> Result<ModuleGradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(input, &mut rng);
    x.scale(input_std);
    let out_spec = m.forward(&x, Mode::Train)?.spec();
    let w = Tensor::randn(out_spec, &mut rng);
    let loss_of = |y: &Tensor| -> f64 { y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum() };

    let p0 = flatten_params(m);
    let params = grad_check_with(
        &p0,
        |p, with_grad| {
            load_params(m, p);
            m.zero_grad();
            let y = m.forward(&x, Mode::Train)?;
            if !with_grad {
                return Ok((loss_of(&y), Vec::new()));
            }
            m.backward(&w)?;
            Ok((loss_of(&y), flatten_grads(m)))
        },
        cfg,
    )?;
    load_params(m, &p0);
    let input = grad_check_with(
        x.data(),
        |xv, with_grad| {
            let xt = Tensor::from_vec(input, xv.to_vec())?;
            let y = m.forward(&xt, Mode::Train)?;
            if !with_grad {
                return Ok((loss_of(&y), Vec::new()));
            }
            let dx = m.backward(&w)?;
            Ok((loss_of(&y), dx.into_vec()))
        },
        cfg,
    )?;
    m.zero_grad();
    Ok(ModuleGradReport { params, input })
}

#[cfg(test)]
pub(crate) fn check_module(m: &mut dyn Module, input: TensorSpec, input_std: f32, seed: u64) {
    let r = check_module_gradients(m, input, input_std, seed, GradCheckConfig::default()).unwrap();
    assert!(r.passed(), "{r}");
}
