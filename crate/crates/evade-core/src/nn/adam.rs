//! Adam optimizer with bias correction and optional global-norm clipping.

use super::tensor::Tensor2;

/// Adam state for a fixed list of parameter tensors. The caller presents
/// parameters and gradients in the same order every step.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global L2 norm of all gradients to this value before the
    /// update; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    t: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, max_grad_norm: Option<f64>) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            max_grad_norm,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Step count so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. `params` and `grads` are parallel slices; moment
    /// buffers are lazily allocated on the first call.
    pub fn step(&mut self, params: &mut [&mut Tensor2], grads: &mut [Tensor2]) {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| g.zeros_like()).collect();
            self.v = grads.iter().map(|g| g.zeros_like()).collect();
        }
        assert_eq!(self.m.len(), grads.len(), "optimizer bound to a different parameter list");

        if let Some(max_norm) = self.max_grad_norm {
            let total: f64 = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
            if total > max_norm {
                let scale = max_norm / total;
                for g in grads.iter_mut() {
                    for v in g.as_mut_slice() {
                        *v *= scale;
                    }
                }
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, gv), (mv, vv)) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
