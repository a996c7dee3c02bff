//! Multinomial logistic regression trained full-batch with Adam.

use super::{ClassDistribution, ClassicalError};
use crate::nn::tape::softmax_of;
use crate::nn::{Adam, ParamSet, Tape, Tensor2, Trans};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    /// L2 penalty on the weight matrix (bias exempt).
    pub l2: f64,
    pub lr: f64,
    pub max_iters: usize,
    /// Converged when |loss_t - loss_{t-1}| < tol.
    pub tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 1e-4,
            lr: 1e-3,
            max_iters: 3000,
            tol: 1e-7,
        }
    }
}

/// Softmax regression: logits = x W^T + b.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LinearModel {
    /// class_count x d_in.
    pub w: Tensor2,
    /// 1 x class_count.
    pub b: Tensor2,
    pub l2: f64,
}

impl LinearModel {
    pub fn class_count(&self) -> usize {
        self.w.rows()
    }

    pub fn feature_count(&self) -> usize {
        self.w.cols()
    }

    pub fn logits(&self, x: &Tensor2) -> Result<Tensor2, ClassicalError> {
        if x.cols() != self.feature_count() {
            return Err(ClassicalError::WidthMismatch {
                expected: self.feature_count(),
                got: x.cols(),
            });
        }
        let mut z = crate::nn::matmul(x, Trans::No, &self.w, Trans::Yes);
        for i in 0..z.rows() {
            for (v, bv) in z.row_mut(i).iter_mut().zip(self.b.as_slice()) {
                *v += bv;
            }
        }
        Ok(z)
    }

    pub fn predict_proba(&self, x: &Tensor2) -> Result<Vec<ClassDistribution>, ClassicalError> {
        let probs = softmax_of(&self.logits(x)?, 1.0);
        (0..probs.rows())
            .map(|i| ClassDistribution::new(renormalize(probs.row(i))))
            .collect()
    }

    /// Round-trip through the shared parameter container format.
    pub fn save(&self, path: &std::path::Path) -> Result<(), crate::nn::container::ContainerError> {
        let mut params = ParamSet::new();
        params.insert("w", self.w.clone());
        params.insert("b", self.b.clone());
        params.insert("l2", Tensor2::scalar(self.l2));
        crate::nn::ParamContainer::save(path, "logistic", &params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, crate::nn::container::ContainerError> {
        let (_, params) = crate::nn::ParamContainer::load(path)?;
        Ok(LinearModel {
            w: params.get("w").expect("container has w").clone(),
            b: params.get("b").expect("container has b").clone(),
            l2: params.get("l2").expect("container has l2").item(),
        })
    }
}

/// Softmax rows already sum to ~1; nudge off float drift so downstream
/// distribution validation (1e-9 tolerance) never trips.
fn renormalize(row: &[f64]) -> Vec<f64> {
    let sum: f64 = row.iter().sum();
    row.iter().map(|&p| p / sum).collect()
}

/// Train from zero-initialized parameters (the objective is convex, so no
/// random init is needed and training is fully deterministic).
pub fn train_logistic(
    x: &Tensor2,
    y: &[usize],
    class_count: usize,
    cfg: &LogisticConfig,
) -> Result<LinearModel, ClassicalError> {
    let m = x.rows();
    if m == 0 || y.len() != m {
        return Err(ClassicalError::EmptyInput);
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= class_count) {
        return Err(ClassicalError::BadLabel {
            label: bad,
            classes: class_count,
        });
    }
    let d = x.cols();
    let mut params = ParamSet::new();
    params.insert("w", Tensor2::zeros(class_count, d));
    params.insert("b", Tensor2::zeros(1, class_count));
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999, None);

    let mut prev_loss = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.input(x.clone());
        let (wv, bv) = (bound.var("w"), bound.var("b"));
        let z = tape.matmul_nt(xv, wv).expect("shapes fixed");
        let z = tape.add_bias(z, bv).expect("shapes fixed");
        let ce = tape.softmax_cross_entropy(z, y).expect("labels checked");
        // + l2 * sum(w^2)
        let w_sq = tape.mul(wv, wv).expect("same shape");
        let w_sq_sum = tape.reduce_sum(w_sq).expect("scalar");
        let reg = tape.affine(w_sq_sum, cfg.l2, 0.0).expect("scalar");
        let loss = tape.add(ce, reg).expect("scalars");

        let loss_val = tape.value(loss).item();
        let mut grads = tape.backward(loss).expect("well-formed graph");
        let mut gs = bound.grads_in_order(&mut grads);
        opt.step(&mut params.tensors_mut(), &mut gs);

        if (prev_loss - loss_val).abs() < cfg.tol {
            break;
        }
        prev_loss = loss_val;
    }

    Ok(LinearModel {
        w: params.get("w").expect("inserted").clone(),
        b: params.get("b").expect("inserted").clone(),
        l2: cfg.l2,
    })
}
