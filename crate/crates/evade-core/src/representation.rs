//! Metric-learning encoder that maps binary import vectors to unit-norm
//! embeddings.
//!
//! Stack: FC(h1) + BN + ReLU + Dropout, FC(h2) + BN + ReLU + Dropout, a
//! residual block of two FC(h2)+BN layers, FC(embed_dim), then row-wise L2
//! normalization. Training minimizes additive-angular-margin cross-entropy
//! plus a weighted supervised contrastive term; early stopping watches the
//! macro-F1 of a nearest-centroid probe on a validation split.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::eval::{classification_metrics, nearest_centroid_predict, EvalError};
use crate::nn::layers::{linear, BoundParams};
use crate::nn::{
    Adam, BnStats, ContainerError, Mode, NnError, ParamContainer, ParamSet, Tape, Tensor2, Var,
};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
/// Batch statistics need at least this many rows.
const MIN_BATCH: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum RepresentationError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Encoder architecture and training settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub arcface_scale: f64,
    pub arcface_margin: f64,
    pub supcon_weight: f64,
    pub supcon_temp: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden1: 1024,
            hidden2: 512,
            embed_dim: 128,
            dropout: 0.3,
            arcface_scale: 30.0,
            arcface_margin: 0.30,
            supcon_weight: 0.1,
            supcon_temp: 0.1,
            lr: 1e-3,
            batch_size: 128,
            max_epochs: 200,
            patience: 20,
        }
    }
}

/// Running batch-norm statistics for every normalization layer.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EncoderStats {
    pub bn1: BnStats,
    pub bn2: BnStats,
    pub resbn1: BnStats,
    pub resbn2: BnStats,
}

impl EncoderStats {
    fn new(hidden1: usize, hidden2: usize) -> Self {
        EncoderStats {
            bn1: BnStats::new(hidden1),
            bn2: BnStats::new(hidden2),
            resbn1: BnStats::new(hidden2),
            resbn2: BnStats::new(hidden2),
        }
    }
}

/// Classifier head over unit-norm embeddings: one unit-norm weight row per
/// class, cosine logits scaled by `scale`, additive angular margin `margin`
/// on the labelled entry during training.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ArcFaceHead {
    pub w: Tensor2,
    pub scale: f64,
    pub margin: f64,
}

impl ArcFaceHead {
    pub fn new(
        class_count: usize,
        embed_dim: usize,
        scale: f64,
        margin: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = crate::nn::init::xavier_uniform(class_count, embed_dim, embed_dim, class_count, rng);
        let mut head = ArcFaceHead { w, scale, margin };
        head.renormalize_rows();
        head
    }

    /// Rescale every class row back to unit length. Must run after each
    /// optimizer update so cosine logits stay true cosines.
    pub fn renormalize_rows(&mut self) {
        for i in 0..self.w.rows() {
            let norm: f64 = self.w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for v in self.w.row_mut(i) {
                    *v /= norm;
                }
            }
        }
    }
}

/// Trained encoder: parameters plus frozen batch-norm statistics.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    params: ParamSet,
    stats: EncoderStats,
    in_dim: usize,
    hidden1: usize,
    hidden2: usize,
    embed_dim: usize,
    dropout: f64,
}

impl EncoderModel {
    pub fn new(in_dim: usize, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        params.add_linear_he("fc1", in_dim, cfg.hidden1, rng);
        params.add_batchnorm("bn1", cfg.hidden1);
        params.add_linear_he("fc2", cfg.hidden1, cfg.hidden2, rng);
        params.add_batchnorm("bn2", cfg.hidden2);
        params.add_linear_he("res1", cfg.hidden2, cfg.hidden2, rng);
        params.add_batchnorm("resbn1", cfg.hidden2);
        params.add_linear_he("res2", cfg.hidden2, cfg.hidden2, rng);
        params.add_batchnorm("resbn2", cfg.hidden2);
        params.add_linear_xavier("out", cfg.hidden2, cfg.embed_dim, rng);
        EncoderModel {
            params,
            stats: EncoderStats::new(cfg.hidden1, cfg.hidden2),
            in_dim,
            hidden1: cfg.hidden1,
            hidden2: cfg.hidden2,
            embed_dim: cfg.embed_dim,
            dropout: cfg.dropout,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden_dims(&self) -> (usize, usize) {
        (self.hidden1, self.hidden2)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Forward pass over already-bound parameters. Training mode updates
    /// `stats` and draws dropout masks from `rng`.
    pub fn forward_on_tape(
        tape: &mut Tape,
        bound: &BoundParams,
        stats: &mut EncoderStats,
        x: Var,
        dropout: f64,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, NnError> {
        let h = linear(tape, bound, "fc1", x)?;
        let h = tape.batchnorm(
            h,
            bound.var("bn1.gamma"),
            bound.var("bn1.beta"),
            &mut stats.bn1,
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, dropout, mode, rng.as_deref_mut())?;

        let h = linear(tape, bound, "fc2", h)?;
        let h = tape.batchnorm(
            h,
            bound.var("bn2.gamma"),
            bound.var("bn2.beta"),
            &mut stats.bn2,
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, dropout, mode, rng.as_deref_mut())?;

        let r = linear(tape, bound, "res1", h)?;
        let r = tape.batchnorm(
            r,
            bound.var("resbn1.gamma"),
            bound.var("resbn1.beta"),
            &mut stats.resbn1,
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        let r = tape.relu(r)?;
        let r = linear(tape, bound, "res2", r)?;
        let r = tape.batchnorm(
            r,
            bound.var("resbn2.gamma"),
            bound.var("resbn2.beta"),
            &mut stats.resbn2,
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        let h = tape.add(h, r)?;
        let h = tape.relu(h)?;

        let e = linear(tape, bound, "out", h)?;
        tape.l2_normalize_rows(e)
    }

    /// Deterministic eval-mode embedding of `x` (rows are samples). Output
    /// rows are unit-norm. Processes in chunks to bound tape memory.
    pub fn embed(&self, x: &Tensor2) -> Result<Tensor2, RepresentationError> {
        if x.cols() != self.in_dim {
            return Err(RepresentationError::Invalid(format!(
                "input has {} columns, encoder expects {}",
                x.cols(),
                self.in_dim
            )));
        }
        const CHUNK: usize = 512;
        let mut out = Tensor2::zeros(x.rows(), self.embed_dim);
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
            // eval mode leaves the running stats untouched; the clone keeps
            // `embed` callable through a shared reference
            let mut stats = self.stats.clone();
            let h = Self::forward_on_tape(
                &mut tape,
                &bound,
                &mut stats,
                xv,
                self.dropout,
                Mode::Eval,
                None,
            )?;
            let vals = tape.value(h);
            for i in start..end {
                out.row_mut(i).copy_from_slice(vals.row(i - start));
            }
            start = end;
        }
        Ok(out)
    }

    /// Serialize parameters, running statistics, and dimensions into one
    /// container file.
    pub fn save(&self, path: &Path) -> Result<(), RepresentationError> {
        let mut all = self.params.clone();
        for (name, stats) in [
            ("bn1", &self.stats.bn1),
            ("bn2", &self.stats.bn2),
            ("resbn1", &self.stats.resbn1),
            ("resbn2", &self.stats.resbn2),
        ] {
            all.insert(
                &format!("{name}.running_mean"),
                Tensor2::from_vec(1, stats.mean.len(), stats.mean.clone()).expect("stats row"),
            );
            all.insert(
                &format!("{name}.running_var"),
                Tensor2::from_vec(1, stats.var.len(), stats.var.clone()).expect("stats row"),
            );
        }
        all.insert("meta.dropout", Tensor2::scalar(self.dropout));
        ParamContainer::save(path, "encoder", &all)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RepresentationError> {
        let (module, all) = ParamContainer::load(path)?;
        if module != "encoder" {
            return Err(RepresentationError::Invalid(format!(
                "container holds a '{module}' module, expected 'encoder'"
            )));
        }
        let mut params = ParamSet::new();
        let mut stats_parts: Vec<(String, Tensor2)> = Vec::new();
        let mut dropout = None;
        for (name, t) in all.iter() {
            if name == "meta.dropout" {
                dropout = Some(t.item());
            } else if name.ends_with(".running_mean") || name.ends_with(".running_var") {
                stats_parts.push((name.to_string(), t.clone()));
            } else {
                params.insert(name, t.clone());
            }
        }
        let pull = |suffix: &str| -> Result<Vec<f64>, RepresentationError> {
            stats_parts
                .iter()
                .find(|(n, _)| n == suffix)
                .map(|(_, t)| t.as_slice().to_vec())
                .ok_or_else(|| RepresentationError::Invalid(format!("missing tensor {suffix}")))
        };
        let stats = EncoderStats {
            bn1: BnStats {
                mean: pull("bn1.running_mean")?,
                var: pull("bn1.running_var")?,
            },
            bn2: BnStats {
                mean: pull("bn2.running_mean")?,
                var: pull("bn2.running_var")?,
            },
            resbn1: BnStats {
                mean: pull("resbn1.running_mean")?,
                var: pull("resbn1.running_var")?,
            },
            resbn2: BnStats {
                mean: pull("resbn2.running_mean")?,
                var: pull("resbn2.running_var")?,
            },
        };
        let missing = |n: &str| RepresentationError::Invalid(format!("missing tensor {n}"));
        let fc1 = params.get("fc1.w").ok_or_else(|| missing("fc1.w"))?;
        let (in_dim, hidden1) = fc1.shape();
        let fc2 = params.get("fc2.w").ok_or_else(|| missing("fc2.w"))?;
        let hidden2 = fc2.cols();
        let out = params.get("out.w").ok_or_else(|| missing("out.w"))?;
        let embed_dim = out.cols();
        Ok(EncoderModel {
            params,
            stats,
            in_dim,
            hidden1,
            hidden2,
            embed_dim,
            dropout: dropout.ok_or_else(|| missing("meta.dropout"))?,
        })
    }
}

/// Per-epoch training diagnostics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EncoderTrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_probe_f1: f64,
    pub final_train_loss: f64,
}

/// Train an encoder on `(x_train, y_train)` with 0-based labels, early
/// stopping on the nearest-centroid probe's validation macro-F1.
pub fn train_encoder(
    x_train: &Tensor2,
    y_train: &[usize],
    x_val: &Tensor2,
    y_val: &[usize],
    class_count: usize,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(EncoderModel, ArcFaceHead, EncoderTrainReport), RepresentationError> {
    if x_train.rows() != y_train.len() || x_val.rows() != y_val.len() {
        return Err(RepresentationError::Invalid(
            "row/label count mismatch".into(),
        ));
    }
    if x_train.rows() < MIN_BATCH {
        return Err(RepresentationError::Invalid(format!(
            "need at least {MIN_BATCH} training rows"
        )));
    }
    if class_count < 2 {
        return Err(RepresentationError::Invalid(
            "need at least 2 classes".into(),
        ));
    }
    if let Some(&bad) = y_train.iter().chain(y_val).find(|&&c| c >= class_count) {
        return Err(RepresentationError::Invalid(format!(
            "label {bad} out of {class_count} classes"
        )));
    }

    let mut model = EncoderModel::new(x_train.cols(), cfg, rng);
    let mut head = ArcFaceHead::new(
        class_count,
        cfg.embed_dim,
        cfg.arcface_scale,
        cfg.arcface_margin,
        rng,
    );
    let mut adam = Adam::new(cfg.lr, 0.9, 0.999, None);

    let mut best: Option<(ParamSet, EncoderStats, ArcFaceHead)> = None;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0usize;
    let mut epochs_run = 0;
    let mut final_train_loss = f64::NAN;

    let mut order: Vec<usize> = (0..x_train.rows()).collect();
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch_ix in order.chunks(cfg.batch_size) {
            if batch_ix.len() < MIN_BATCH {
                continue;
            }
            let mut xb = Tensor2::zeros(batch_ix.len(), x_train.cols());
            let mut yb = Vec::with_capacity(batch_ix.len());
            for (r, &i) in batch_ix.iter().enumerate() {
                xb.row_mut(r).copy_from_slice(x_train.row(i));
                yb.push(y_train[i]);
            }

            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let wv = tape.input(head.w.clone());
            let xv = tape.input(xb);
            let h = EncoderModel::forward_on_tape(
                &mut tape,
                &bound,
                &mut model.stats,
                xv,
                model.dropout,
                Mode::Train,
                Some(&mut *rng),
            )?;
            let cos = tape.matmul_nt(h, wv)?;
            let logits = tape.arcface_margin(cos, &yb, head.scale, head.margin)?;
            let ce = tape.softmax_cross_entropy(logits, &yb)?;
            let sc = tape.supcon_loss(h, &yb, cfg.supcon_temp)?;
            let sc_scaled = tape.affine(sc, cfg.supcon_weight, 0.0)?;
            let loss = tape.add(ce, sc_scaled)?;
            loss_sum += tape.value(loss).item();
            batches += 1;

            let mut grads = tape.backward(loss)?;
            let mut grad_list = bound.grads_in_order(&mut grads);
            grad_list.push(grads.take(wv));
            let mut tensors = model.params.tensors_mut();
            tensors.push(&mut head.w);
            adam.step(&mut tensors, &mut grad_list);
            head.renormalize_rows();
        }
        if batches == 0 {
            return Err(RepresentationError::Invalid(
                "every batch was smaller than the batch-norm minimum".into(),
            ));
        }
        final_train_loss = loss_sum / batches as f64;

        let train_emb = model.embed(x_train)?;
        let val_emb = model.embed(x_val)?;
        let pred = nearest_centroid_predict(&train_emb, y_train, &val_emb, class_count);
        let probe = classification_metrics(&pred, y_val, class_count)?;
        if probe.macro_f1 > best_f1 {
            best_f1 = probe.macro_f1;
            best_epoch = epoch;
            since_best = 0;
            best = Some((model.params.clone(), model.stats.clone(), head.clone()));
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (params, stats, head) = best.expect("at least one epoch ran");
    model.params = params;
    model.stats = stats;
    Ok((
        model,
        head,
        EncoderTrainReport {
            epochs_run,
            best_epoch,
            best_probe_f1: best_f1,
            final_train_loss,
        },
    ))
}

/// Write one row per sample: id, embedding coordinates, 1-based label.
pub fn write_embeddings_csv(
    sample_ids: &[usize],
    embeddings: &Tensor2,
    labels: &[usize],
    path: &Path,
) -> Result<(), RepresentationError> {
    use std::io::Write;
    if sample_ids.len() != embeddings.rows() || labels.len() != embeddings.rows() {
        return Err(RepresentationError::Invalid(
            "id/embedding/label count mismatch".into(),
        ));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "sample_id")?;
    for j in 0..embeddings.cols() {
        write!(f, ",e{j}")?;
    }
    writeln!(f, ",label")?;
    for (i, (&id, &label)) in sample_ids.iter().zip(labels).enumerate() {
        write!(f, "{id}")?;
        for v in embeddings.row(i) {
            write!(f, ",{v:.9}")?;
        }
        writeln!(f, ",{label}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            hidden1: 16,
            hidden2: 8,
            embed_dim: 4,
            batch_size: 16,
            max_epochs: 8,
            patience: 8,
            ..EncoderConfig::default()
        }
    }

    /// Two clusters of binary vectors: class 0 lights features 0..5, class 1
    /// lights 10..15, both with noise elsewhere.
    fn blob_data(n_per: usize, seed: u64) -> (Tensor2, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 20;
        let mut x = Tensor2::zeros(2 * n_per, d);
        let mut y = Vec::new();
        for i in 0..2 * n_per {
            let class = i % 2;
            let base = if class == 0 { 0 } else { 10 };
            for j in 0..5 {
                if rng.gen::<f64>() < 0.9 {
                    x.set(i, base + j, 1.0);
                }
            }
            for j in 0..d {
                if rng.gen::<f64>() < 0.05 {
                    x.set(i, j, 1.0);
                }
            }
            y.push(class);
        }
        (x, y)
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = EncoderModel::new(20, &small_cfg(), &mut rng);
        let (x, _) = blob_data(8, 3);
        let e = model.embed(&x).unwrap();
        assert_eq!(e.shape(), (16, 4));
        for i in 0..e.rows() {
            let norm: f64 = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "row {i} norm {norm}");
        }
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let (x, y) = blob_data(16, 5);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let cfg = EncoderConfig {
                max_epochs: 2,
                patience: 2,
                ..small_cfg()
            };
            let (model, _, _) =
                train_encoder(&x, &y, &x, &y, 2, &cfg, &mut rng).unwrap();
            model.embed(&x).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn head_rows_stay_unit_norm_through_training() {
        let (x, y) = blob_data(16, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = EncoderConfig {
            max_epochs: 3,
            patience: 3,
            ..small_cfg()
        };
        let (_, head, _) = train_encoder(&x, &y, &x, &y, 2, &cfg, &mut rng).unwrap();
        for i in 0..head.w.rows() {
            let norm: f64 = head.w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn training_separates_obvious_clusters() {
        let (x, y) = blob_data(32, 9);
        let (xv, yv) = blob_data(16, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = EncoderConfig {
            max_epochs: 30,
            patience: 30,
            ..small_cfg()
        };
        let (model, _, report) = train_encoder(&x, &y, &xv, &yv, 2, &cfg, &mut rng).unwrap();
        assert!(
            report.best_probe_f1 > 0.9,
            "probe f1 {}",
            report.best_probe_f1
        );
        // embeddings should cluster: same-class cosine above cross-class
        let e = model.embed(&x).unwrap();
        let cos = |a: usize, b: usize| -> f64 {
            e.row(a).iter().zip(e.row(b)).map(|(p, q)| p * q).sum()
        };
        // samples alternate classes; 0 and 2 match, 0 and 1 differ
        let mut same = 0.0;
        let mut diff = 0.0;
        let mut n = 0.0;
        for i in (0..24).step_by(2) {
            same += cos(i, i + 2);
            diff += cos(i, i + 1);
            n += 1.0;
        }
        assert!(same / n > diff / n, "same {same} vs diff {diff}");
    }

    #[test]
    fn save_load_roundtrip_preserves_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = EncoderModel::new(20, &small_cfg(), &mut rng);
        let (x, _) = blob_data(4, 3);
        let before = model.embed(&x).unwrap();
        let dir = std::env::temp_dir().join("encoder-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("encoder.nnpc");
        model.save(&path).unwrap();
        let loaded = EncoderModel::load(&path).unwrap();
        let after = loaded.embed(&x).unwrap();
        assert_eq!(before.as_slice(), after.as_slice());
    }

    #[test]
    fn embeddings_csv_has_expected_shape() {
        let e = Tensor2::from_vec(2, 3, vec![0.5, 0.5, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let dir = std::env::temp_dir().join("emb-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("emb.csv");
        write_embeddings_csv(&[7, 9], &e, &[1, 6], &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let mut lines = body.lines();
        assert_eq!(lines.next().unwrap(), "sample_id,e0,e1,e2,label");
        assert!(lines.next().unwrap().starts_with("7,0.5"));
        assert!(lines.next().unwrap().ends_with(",6"));
    }

    #[test]
    fn mismatched_input_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = EncoderModel::new(20, &small_cfg(), &mut rng);
        let x = Tensor2::zeros(2, 19);
        assert!(matches!(
            model.embed(&x),
            Err(RepresentationError::Invalid(_))
        ));
    }
}
