use crate::error::Result;
use crate::nn::tensor::Tensor;

/// Whether batch normalization uses batch statistics and updates running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named array of learnable scalars (or a non-trainable buffer) plus its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f32>) -> Self {
        Self {
            trainable: false,
            ..Self::new(shape, value)
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A differentiable layer with cached activations.
///
/// `backward` consumes the activations cached by the most recent `forward`,
/// accumulates parameter gradients, and returns the gradient w.r.t. the input.
pub trait Module {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    /// Number of trainable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}
