use crate::nn::module::Module;

/// Adam with bias correction. State is matched to parameters by visit order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter of `modules`, in order.
    pub fn step(&mut self, modules: &mut [&mut dyn Module]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let mut slot = 0;
        let moments = &mut self.moments;
        for m in modules.iter_mut() {
            m.visit_mut("", &mut |_, p| {
                if !p.trainable {
                    return;
                }
                if moments.len() <= slot {
                    moments.push((vec![0.0; p.len()], vec![0.0; p.len()]));
                }
                let (mv, vv) = &mut moments[slot];
                assert_eq!(mv.len(), p.len(), "optimizer state does not match parameters");
                for i in 0..p.len() {
                    let g = p.grad[i];
                    mv[i] = b1 * mv[i] + (1.0 - b1) * g;
                    vv[i] = b2 * vv[i] + (1.0 - b2) * g * g;
                    let mhat = mv[i] / bc1;
                    let vhat = vv[i] / bc2;
                    p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
                slot += 1;
            });
        }
    }
}
