//! Knowledge distillation: train a differentiable proxy MLP to mimic the
//! soft-vote ensemble so downstream generators can take gradients through
//! a classifier.
//!
//! Teacher distributions are temperature-softened (q^(1/T), renormalized);
//! the student minimizes alpha * T^2 * KL(q_soft || softmax(logits/T)) +
//! (1 - alpha) * CE(logits, y).

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::classical::ClassDistribution;
use crate::ensemble::{EnsembleError, EnsembleModel};
use crate::nn::layers::{linear, BoundParams};
use crate::nn::{
    Adam, BnStats, ContainerError, Mode, NnError, ParamContainer, ParamSet, Tape, Tensor2, Var,
};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const MIN_BATCH: usize = 2;
/// Floor applied to teacher probabilities before powering/logging; forest
/// members can emit exact zeros.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Distillation schedule. `temperature` softens both sides of the KL term;
/// `alpha` balances soft-target imitation against hard-label fit.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 5.0,
            alpha: 0.9,
            epochs: 700,
            lr: 1e-3,
            batch_size: 128,
        }
    }
}

/// Proxy architecture: three FC+BN+ReLU+Dropout stages and a linear head.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub hidden: [usize; 3],
    pub dropout: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            hidden: [2048, 1024, 512],
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProxyStats {
    pub bn: Vec<BnStats>,
}

/// The trained student: emits raw logits (no softmax baked in).
#[derive(Debug, Clone)]
pub struct ProxyModel {
    params: ParamSet,
    stats: ProxyStats,
    in_dim: usize,
    class_count: usize,
    dropout: f64,
}

impl ProxyModel {
    pub fn new(
        in_dim: usize,
        class_count: usize,
        cfg: &ProxyConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut params = ParamSet::new();
        let mut prev = in_dim;
        for (i, &h) in cfg.hidden.iter().enumerate() {
            params.add_linear_he(&format!("fc{}", i + 1), prev, h, rng);
            params.add_batchnorm(&format!("bn{}", i + 1), h);
            prev = h;
        }
        params.add_linear_xavier("out", prev, class_count, rng);
        ProxyModel {
            params,
            stats: ProxyStats {
                bn: cfg.hidden.iter().map(|&h| BnStats::new(h)).collect(),
            },
            in_dim,
            class_count,
            dropout: cfg.dropout,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Copy of the batchnorm running statistics, for callers that drive
    /// `forward_on_tape` themselves without mutating the model.
    pub fn stats_clone(&self) -> ProxyStats {
        self.stats.clone()
    }

    pub fn forward_on_tape(
        tape: &mut Tape,
        bound: &BoundParams,
        stats: &mut ProxyStats,
        x: Var,
        dropout: f64,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, NnError> {
        let mut h = x;
        for (i, bn_stats) in stats.bn.iter_mut().enumerate() {
            h = linear(tape, bound, &format!("fc{}", i + 1), h)?;
            h = tape.batchnorm(
                h,
                bound.var(&format!("bn{}.gamma", i + 1)),
                bound.var(&format!("bn{}.beta", i + 1)),
                bn_stats,
                mode,
                BN_MOMENTUM,
                BN_EPS,
            )?;
            h = tape.relu(h)?;
            h = tape.dropout(h, dropout, mode, rng.as_deref_mut())?;
        }
        linear(tape, bound, "out", h)
    }

    /// Deterministic eval-mode logits, chunked to bound tape memory.
    pub fn logits(&self, x: &Tensor2) -> Result<Tensor2, DistillError> {
        if x.cols() != self.in_dim {
            return Err(DistillError::Invalid(format!(
                "input has {} columns, proxy expects {}",
                x.cols(),
                self.in_dim
            )));
        }
        const CHUNK: usize = 512;
        let mut out = Tensor2::zeros(x.rows(), self.class_count);
        let mut start = 0;
        while start < x.rows() {
            let end = (start + CHUNK).min(x.rows());
            let mut chunk = Tensor2::zeros(end - start, self.in_dim);
            for i in start..end {
                chunk.row_mut(i - start).copy_from_slice(x.row(i));
            }
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let xv = tape.input(chunk);
            let mut stats = self.stats.clone();
            let y = Self::forward_on_tape(
                &mut tape,
                &bound,
                &mut stats,
                xv,
                self.dropout,
                Mode::Eval,
                None,
            )?;
            let vals = tape.value(y);
            for i in start..end {
                out.row_mut(i).copy_from_slice(vals.row(i - start));
            }
            start = end;
        }
        Ok(out)
    }

    /// Argmax class per row (0-based, lowest id on ties).
    pub fn predict(&self, x: &Tensor2) -> Result<Vec<usize>, DistillError> {
        Ok(crate::ensemble::argmax_rows(&self.logits(x)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), DistillError> {
        let mut all = self.params.clone();
        for (i, stats) in self.stats.bn.iter().enumerate() {
            all.insert(
                &format!("bn{}.running_mean", i + 1),
                Tensor2::from_vec(1, stats.mean.len(), stats.mean.clone()).expect("stats row"),
            );
            all.insert(
                &format!("bn{}.running_var", i + 1),
                Tensor2::from_vec(1, stats.var.len(), stats.var.clone()).expect("stats row"),
            );
        }
        all.insert("meta.dropout", Tensor2::scalar(self.dropout));
        ParamContainer::save(path, "proxy", &all)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DistillError> {
        let (module, all) = ParamContainer::load(path)?;
        if module != "proxy" {
            return Err(DistillError::Invalid(format!(
                "container holds a '{module}' module, expected 'proxy'"
            )));
        }
        let mut params = ParamSet::new();
        let mut means: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut vars: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut dropout = None;
        for (name, t) in all.iter() {
            if name == "meta.dropout" {
                dropout = Some(t.item());
            } else if let Some(stripped) = name
                .strip_prefix("bn")
                .and_then(|s| s.strip_suffix(".running_mean"))
            {
                let i: usize = stripped.parse().map_err(|_| {
                    DistillError::Invalid(format!("bad stats tensor name {name}"))
                })?;
                means.push((i, t.as_slice().to_vec()));
            } else if let Some(stripped) = name
                .strip_prefix("bn")
                .and_then(|s| s.strip_suffix(".running_var"))
            {
                let i: usize = stripped.parse().map_err(|_| {
                    DistillError::Invalid(format!("bad stats tensor name {name}"))
                })?;
                vars.push((i, t.as_slice().to_vec()));
            } else {
                params.insert(name, t.clone());
            }
        }
        means.sort_by_key(|(i, _)| *i);
        vars.sort_by_key(|(i, _)| *i);
        if means.len() != vars.len() || means.is_empty() {
            return Err(DistillError::Invalid("missing running stats".into()));
        }
        let bn = means
            .into_iter()
            .zip(vars)
            .map(|((_, mean), (_, var))| BnStats { mean, var })
            .collect();
        let missing = |n: &str| DistillError::Invalid(format!("missing tensor {n}"));
        let fc1 = params.get("fc1.w").ok_or_else(|| missing("fc1.w"))?;
        let in_dim = fc1.rows();
        let out = params.get("out.w").ok_or_else(|| missing("out.w"))?;
        let class_count = out.cols();
        Ok(ProxyModel {
            params,
            stats: ProxyStats { bn },
            in_dim,
            class_count,
            dropout: dropout.ok_or_else(|| missing("meta.dropout"))?,
        })
    }
}

/// q^(1/T), renormalized. Returns the softened distribution and whether
/// any entry needed the probability floor.
pub fn soften_teacher(
    q: &ClassDistribution,
    temperature: f64,
) -> (ClassDistribution, bool) {
    let mut floored = false;
    let powered: Vec<f64> = q
        .probs()
        .iter()
        .map(|&p| {
            let p = if p < PROB_FLOOR {
                floored = true;
                PROB_FLOOR
            } else {
                p
            };
            p.powf(1.0 / temperature)
        })
        .collect();
    (
        ClassDistribution::from_scores(powered).expect("powered probabilities are positive"),
        floored,
    )
}

/// Row-wise [`soften_teacher`] over a matrix of distributions. Returns the
/// softened matrix and how many entries hit the floor.
pub fn soften_teacher_matrix(q: &Tensor2, temperature: f64) -> (Tensor2, usize) {
    let mut out = Tensor2::zeros(q.rows(), q.cols());
    let mut floored = 0usize;
    for i in 0..q.rows() {
        let mut sum = 0.0;
        for (j, &p) in q.row(i).iter().enumerate() {
            let p = if p < PROB_FLOOR {
                floored += 1;
                PROB_FLOOR
            } else {
                p
            };
            let v = p.powf(1.0 / temperature);
            out.set(i, j, v);
            sum += v;
        }
        for v in out.row_mut(i) {
            *v /= sum;
        }
    }
    (out, floored)
}

/// softmax(logits / T) for one row of logits.
pub fn soften_student(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

/// The scalar distillation objective for a batch, computed without a tape
/// (reference implementation used by tests and reports): alpha * T^2 *
/// mean-KL(q_soft || p_soft) + (1 - alpha) * mean-CE(logits, y).
pub fn distill_loss(
    student_logits: &Tensor2,
    teacher_q: &Tensor2,
    y: &[usize],
    cfg: &DistillConfig,
) -> Result<f64, DistillError> {
    if !student_logits.same_shape(teacher_q) || y.len() != student_logits.rows() {
        return Err(DistillError::Invalid(
            "logits/teacher/label shapes disagree".into(),
        ));
    }
    let t = cfg.temperature;
    let rows = student_logits.rows();
    let (q_soft, _) = soften_teacher_matrix(teacher_q, t);
    let mut kl = 0.0;
    let mut ce = 0.0;
    for i in 0..rows {
        let p_soft = soften_student(student_logits.row(i), t);
        for (qv, pv) in q_soft.row(i).iter().zip(&p_soft) {
            if *qv > 0.0 {
                kl += qv * (qv.ln() - pv.max(PROB_FLOOR).ln());
            }
        }
        let p_hard = soften_student(student_logits.row(i), 1.0);
        ce -= p_hard[y[i]].max(PROB_FLOOR).ln();
    }
    kl /= rows as f64;
    ce /= rows as f64;
    Ok(cfg.alpha * t * t * kl + (1.0 - cfg.alpha) * ce)
}

/// Run the frozen ensemble over training rows to collect the teacher
/// matrix Q (one distribution per row).
pub fn collect_soft_targets(
    ensemble: &EnsembleModel,
    x: &Tensor2,
) -> Result<Tensor2, EnsembleError> {
    ensemble.predict_proba(x)
}

/// Persist Q with an identifying key (typically a hash of the ensemble
/// manifest) so reruns can skip the ensemble forward pass.
pub fn save_q_cache(path: &Path, key: &str, q: &Tensor2) -> Result<(), DistillError> {
    let mut params = ParamSet::new();
    params.insert("q", q.clone());
    ParamContainer::save(path, &format!("teacher_q:{key}"), &params)?;
    Ok(())
}

/// Returns (key, Q).
pub fn load_q_cache(path: &Path) -> Result<(String, Tensor2), DistillError> {
    let (module, params) = ParamContainer::load(path)?;
    let key = module
        .strip_prefix("teacher_q:")
        .ok_or_else(|| DistillError::Invalid(format!("not a teacher cache: {module}")))?
        .to_string();
    let q = params
        .get("q")
        .ok_or_else(|| DistillError::Invalid("cache missing tensor q".into()))?
        .clone();
    Ok((key, q))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DistillReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    /// Teacher entries that hit the probability floor.
    pub floored_entries: usize,
}

/// Train the proxy against precomputed teacher distributions. Labels are
/// 0-based; `teacher_q` rows parallel `x_train` rows.
pub fn train_proxy(
    x_train: &Tensor2,
    y_train: &[usize],
    teacher_q: &Tensor2,
    class_count: usize,
    proxy_cfg: &ProxyConfig,
    cfg: &DistillConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ProxyModel, DistillReport), DistillError> {
    let n = x_train.rows();
    if y_train.len() != n || teacher_q.rows() != n {
        return Err(DistillError::Invalid(
            "training rows, labels, and teacher matrix must align".into(),
        ));
    }
    if teacher_q.cols() != class_count {
        return Err(DistillError::Invalid(format!(
            "teacher emits {} classes, expected {class_count}",
            teacher_q.cols()
        )));
    }
    if let Some(&bad) = y_train.iter().find(|&&c| c >= class_count) {
        return Err(DistillError::Invalid(format!(
            "label {bad} out of {class_count} classes"
        )));
    }

    let (q_soft, floored_entries) = soften_teacher_matrix(teacher_q, cfg.temperature);
    let mut model = ProxyModel::new(x_train.cols(), class_count, proxy_cfg, rng);
    let mut adam = Adam::new(cfg.lr, 0.9, 0.999, None);

    let mut order: Vec<usize> = (0..n).collect();
    let mut final_loss = f64::NAN;
    let mut epochs_run = 0;
    for _ in 0..cfg.epochs {
        epochs_run += 1;
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch_ix in order.chunks(cfg.batch_size) {
            if batch_ix.len() < MIN_BATCH {
                continue;
            }
            let mut xb = Tensor2::zeros(batch_ix.len(), x_train.cols());
            let mut qb = Tensor2::zeros(batch_ix.len(), class_count);
            let mut yb = Vec::with_capacity(batch_ix.len());
            for (r, &i) in batch_ix.iter().enumerate() {
                xb.row_mut(r).copy_from_slice(x_train.row(i));
                qb.row_mut(r).copy_from_slice(q_soft.row(i));
                yb.push(y_train[i]);
            }

            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let xv = tape.input(xb);
            let logits = ProxyModel::forward_on_tape(
                &mut tape,
                &bound,
                &mut model.stats,
                xv,
                model.dropout,
                Mode::Train,
                Some(&mut *rng),
            )?;
            let kl = tape.kl_to_softmax(logits, &qb, cfg.temperature)?;
            let kl = tape.affine(kl, cfg.alpha * cfg.temperature * cfg.temperature, 0.0)?;
            let ce = tape.softmax_cross_entropy(logits, &yb)?;
            let ce = tape.affine(ce, 1.0 - cfg.alpha, 0.0)?;
            let loss = tape.add(kl, ce)?;
            loss_sum += tape.value(loss).item();
            batches += 1;

            let mut grads = tape.backward(loss)?;
            let mut grad_list = bound.grads_in_order(&mut grads);
            let mut tensors = model.params.tensors_mut();
            adam.step(&mut tensors, &mut grad_list);
        }
        if batches == 0 {
            return Err(DistillError::Invalid(
                "every batch was smaller than the batch-norm minimum".into(),
            ));
        }
        final_loss = loss_sum / batches as f64;
    }

    Ok((
        model,
        DistillReport {
            epochs_run,
            final_loss,
            floored_entries,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn soften_teacher_identity_at_t1() {
        let q = ClassDistribution::new(vec![0.7, 0.2, 0.1]).unwrap();
        let (s, floored) = soften_teacher(&q, 1.0);
        assert!(!floored);
        for (a, b) in s.probs().iter().zip(q.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soften_teacher_matches_scalar_evaluation() {
        let q = ClassDistribution::new(vec![0.8, 0.2]).unwrap();
        let (s, _) = soften_teacher(&q, 5.0);
        // independent straight-line arithmetic
        let a = 0.8f64.powf(0.2);
        let b = 0.2f64.powf(0.2);
        assert!((s.probs()[0] - a / (a + b)).abs() < 1e-12);
        assert!((s.probs()[0] - 0.56887).abs() < 1e-4);
        assert!((s.probs()[1] - 0.43113).abs() < 1e-4);
    }

    #[test]
    fn soften_teacher_keeps_uniform_uniform_and_flags_zeros() {
        let q = ClassDistribution::new(vec![0.25; 4]).unwrap();
        for t in [1.0, 2.0, 5.0, 20.0] {
            let (s, _) = soften_teacher(&q, t);
            for v in s.probs() {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
        let q = ClassDistribution::new(vec![1.0, 0.0]).unwrap();
        let (s, floored) = soften_teacher(&q, 5.0);
        assert!(floored);
        assert!(s.probs()[0] > s.probs()[1]);
    }

    #[test]
    fn soften_teacher_preserves_argmax_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() + 1e-6).collect();
            let q = ClassDistribution::from_scores(raw).unwrap();
            let (s, _) = soften_teacher(&q, 5.0);
            let order = |v: &[f64]| {
                let mut ix: Vec<usize> = (0..v.len()).collect();
                ix.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
                ix
            };
            assert_eq!(order(q.probs()), order(s.probs()));
        }
    }

    #[test]
    fn soften_student_scalar_case_and_shift_invariance() {
        let p = soften_student(&[2.0, 0.0], 2.0);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert!((p[1] - 0.2689).abs() < 1e-4);
        let shifted = soften_student(&[2.0 + 7.5, 0.0 + 7.5], 2.0);
        for (a, b) in p.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soften_student_approaches_uniform_at_high_temperature() {
        let logits = [3.0, 1.0, -2.0];
        let dist_to_uniform = |t: f64| {
            soften_student(&logits, t)
                .iter()
                .map(|p| (p - 1.0 / 3.0).abs())
                .sum::<f64>()
        };
        assert!(dist_to_uniform(100.0) < dist_to_uniform(1.0));
        assert!(dist_to_uniform(100.0) < 0.02);
    }

    #[test]
    fn distill_loss_zero_when_student_matches_softened_teacher() {
        // logits = T * ln(q_soft) makes softmax(logits/T) = q_soft exactly
        let cfg = DistillConfig {
            alpha: 1.0,
            ..DistillConfig::default()
        };
        let teacher = Tensor2::from_vec(1, 3, vec![0.6, 0.3, 0.1]).unwrap();
        let (q_soft, _) = soften_teacher_matrix(&teacher, cfg.temperature);
        let logits = Tensor2::from_vec(
            1,
            3,
            q_soft.row(0).iter().map(|p| cfg.temperature * p.ln()).collect(),
        )
        .unwrap();
        let loss = distill_loss(&logits, &teacher, &[0], &cfg).unwrap();
        assert!(loss.abs() < 1e-10, "loss {loss}");
    }

    #[test]
    fn distill_loss_alpha_zero_is_plain_cross_entropy() {
        let cfg = DistillConfig {
            alpha: 0.0,
            ..DistillConfig::default()
        };
        let logits = Tensor2::from_vec(2, 3, vec![2.0, 0.5, -1.0, 0.0, 1.0, 0.0]).unwrap();
        let teacher = Tensor2::from_vec(2, 3, vec![0.9, 0.05, 0.05, 0.1, 0.8, 0.1]).unwrap();
        let y = [0usize, 1];
        let loss = distill_loss(&logits, &teacher, &y, &cfg).unwrap();
        // independent CE computation
        let mut ce = 0.0;
        for (i, &c) in y.iter().enumerate() {
            let p = soften_student(logits.row(i), 1.0);
            ce -= p[c].ln();
        }
        ce /= 2.0;
        assert!((loss - ce).abs() < 1e-12);
    }

    #[test]
    fn distill_loss_hand_case_matches_scalar_script() {
        // teacher [0.8, 0.2], student logits [0, 0], T = 5, alpha = 0.9,
        // label 0 — evaluated by independent straight-line arithmetic
        let cfg = DistillConfig {
            temperature: 5.0,
            alpha: 0.9,
            ..DistillConfig::default()
        };
        let logits = Tensor2::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let teacher = Tensor2::from_vec(1, 2, vec![0.8, 0.2]).unwrap();
        let loss = distill_loss(&logits, &teacher, &[0], &cfg).unwrap();

        let qa = 0.8f64.powf(0.2);
        let qb = 0.2f64.powf(0.2);
        let (qa, qb) = (qa / (qa + qb), qb / (qa + qb));
        // student softened softmax of [0,0] is [0.5, 0.5]; hard CE is ln 2
        let kl = qa * (qa / 0.5).ln() + qb * (qb / 0.5).ln();
        let expected = 0.9 * 25.0 * kl + 0.1 * 2.0f64.ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.28345).abs() < 1e-4);
    }

    #[test]
    fn distill_loss_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = DistillConfig::default();
        for _ in 0..25 {
            let logits =
                Tensor2::from_fn(3, 4, |_, _| rng.gen::<f64>() * 6.0 - 3.0);
            let mut teacher = Tensor2::from_fn(3, 4, |_, _| rng.gen::<f64>() + 1e-9);
            for i in 0..3 {
                let s: f64 = teacher.row(i).iter().sum();
                for v in teacher.row_mut(i) {
                    *v /= s;
                }
            }
            let y: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            let loss = distill_loss(&logits, &teacher, &y, &cfg).unwrap();
            assert!(loss >= 0.0, "loss {loss}");
        }
    }

    #[test]
    fn q_cache_roundtrip() {
        let q = Tensor2::from_vec(2, 2, vec![0.9, 0.1, 0.3, 0.7]).unwrap();
        let dir = std::env::temp_dir().join("qcache-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("q.nnpc");
        save_q_cache(&path, "abc123", &q).unwrap();
        let (key, back) = load_q_cache(&path).unwrap();
        assert_eq!(key, "abc123");
        assert_eq!(back.as_slice(), q.as_slice());
    }

    fn tiny_problem(n: usize, seed: u64) -> (Tensor2, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 10;
        let mut x = Tensor2::zeros(n, d);
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            for j in 0..d {
                let p = if (j < 5) == (c == 0) { 0.8 } else { 0.1 };
                if rng.gen::<f64>() < p {
                    x.set(i, j, 1.0);
                }
            }
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn one_hot_teacher_with_alpha_zero_learns_supervised() {
        let (x, y) = tiny_problem(40, 5);
        let mut teacher = Tensor2::zeros(40, 2);
        for (i, &c) in y.iter().enumerate() {
            teacher.set(i, c, 1.0);
        }
        let proxy_cfg = ProxyConfig {
            hidden: [16, 8, 8],
            dropout: 0.1,
        };
        let cfg = DistillConfig {
            alpha: 0.0,
            epochs: 60,
            batch_size: 20,
            ..DistillConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (model, report) =
            train_proxy(&x, &y, &teacher, 2, &proxy_cfg, &cfg, &mut rng).unwrap();
        let pred = model.predict(&x).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / 40.0;
        assert!(acc > 0.9, "train accuracy {acc}, final loss {}", report.final_loss);
    }

    #[test]
    fn training_is_deterministic_and_roundtrips() {
        let (x, y) = tiny_problem(30, 6);
        let teacher = {
            let mut t = Tensor2::zeros(30, 2);
            for (i, &c) in y.iter().enumerate() {
                t.set(i, c, 0.8);
                t.set(i, 1 - c, 0.2);
            }
            t
        };
        let proxy_cfg = ProxyConfig {
            hidden: [8, 8, 4],
            dropout: 0.1,
        };
        let cfg = DistillConfig {
            epochs: 5,
            batch_size: 15,
            ..DistillConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            train_proxy(&x, &y, &teacher, 2, &proxy_cfg, &cfg, &mut rng)
                .unwrap()
                .0
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.logits(&x).unwrap().as_slice(),
            b.logits(&x).unwrap().as_slice()
        );

        let dir = std::env::temp_dir().join("proxy-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("proxy.nnpc");
        a.save(&path).unwrap();
        let loaded = ProxyModel::load(&path).unwrap();
        assert_eq!(
            a.logits(&x).unwrap().as_slice(),
            loaded.logits(&x).unwrap().as_slice()
        );
    }
}
