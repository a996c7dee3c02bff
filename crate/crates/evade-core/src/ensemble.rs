//! Weighted soft-vote ensembles over raw import bits and learned
//! embeddings, plus per-sample target-class assignment.
//!
//! An ensemble holds four members — random forest and logistic regression
//! on the raw binary vectors, and the same pair on encoder embeddings —
//! blended as q(c|x) = sum_i w_i q_i(c|x). The weight vector is found by
//! exhaustive search over the 4-simplex at step 0.05 (1,771 points),
//! maximizing validation macro-F1. Ensemble A covers all six classes;
//! ensemble B runs the same recipe on the five benign classes only and
//! supplies each malware sample's most plausible benign target.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::classical::forest::{train_forest, ForestConfig, ForestModel};
use crate::classical::logistic::{train_logistic, LinearModel, LogisticConfig};
use crate::classical::{ClassDistribution, ClassicalError};
use crate::data::LabeledDataset;
use crate::eval::{classification_metrics, EvalError};
use crate::nn::Tensor2;
use crate::representation::{train_encoder, EncoderConfig, EncoderModel, RepresentationError};

/// Number of soft-vote members.
pub const MEMBER_COUNT: usize = 4;
/// Weight-grid resolution: weights move in steps of 1/GRID_STEPS.
const GRID_STEPS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("container error: {0}")]
    Container(#[from] crate::nn::ContainerError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Four members plus their blend weights. `class_set` lists the 1-based
/// dataset classes the output distributions range over, in ascending
/// order; position in `class_set` is the member models' 0-based label.
pub struct EnsembleModel {
    pub forest_raw: ForestModel,
    pub logistic_raw: LinearModel,
    pub encoder: EncoderModel,
    pub forest_emb: ForestModel,
    pub logistic_emb: LinearModel,
    pub weights: [f64; MEMBER_COUNT],
    pub class_set: Vec<usize>,
}

/// Diagnostics from one ensemble build.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EnsembleReport {
    pub member_val_accuracy: [f64; MEMBER_COUNT],
    pub ensemble_val_macro_f1: f64,
    pub weights: [f64; MEMBER_COUNT],
    pub encoder_epochs: usize,
    pub encoder_probe_f1: f64,
}

fn probs_to_tensor(probs: &[ClassDistribution]) -> Tensor2 {
    let cols = probs.first().map_or(0, |p| p.probs().len());
    let mut t = Tensor2::zeros(probs.len(), cols);
    for (i, p) in probs.iter().enumerate() {
        t.row_mut(i).copy_from_slice(p.probs());
    }
    t
}

/// q = sum_i w_i q_i, row by row.
pub fn combine_probs(
    members: &[&Tensor2],
    weights: &[f64],
) -> Result<Tensor2, EnsembleError> {
    if members.len() != weights.len() || members.is_empty() {
        return Err(EnsembleError::Invalid(
            "member/weight count mismatch".into(),
        ));
    }
    let shape = members[0].shape();
    let mut out = Tensor2::zeros(shape.0, shape.1);
    for (m, &w) in members.iter().zip(weights) {
        if m.shape() != shape {
            return Err(EnsembleError::Invalid(format!(
                "member prediction shape {:?} vs {:?}",
                m.shape(),
                shape
            )));
        }
        out.axpy(w, m);
    }
    Ok(out)
}

/// Row-wise argmax with ties going to the lowest class index.
pub fn argmax_rows(probs: &Tensor2) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Exhaustive search over the weight simplex (step 1/20) for the vector
/// maximizing macro-F1 of the blended argmax predictions. Ties keep the
/// lexicographically smallest weight vector. Returns (weights, macro-F1).
pub fn optimize_weights(
    member_probs: &[&Tensor2; MEMBER_COUNT],
    y_val: &[usize],
    class_count: usize,
) -> Result<([f64; MEMBER_COUNT], f64), EnsembleError> {
    let n = y_val.len();
    if member_probs.iter().any(|p| p.rows() != n) {
        return Err(EnsembleError::Invalid(
            "member predictions do not cover the validation set".into(),
        ));
    }
    let mut best_w = [0.0; MEMBER_COUNT];
    let mut best_f1 = f64::NEG_INFINITY;
    let s = GRID_STEPS as f64;
    for i in 0..=GRID_STEPS {
        for j in 0..=GRID_STEPS - i {
            for k in 0..=GRID_STEPS - i - j {
                let l = GRID_STEPS - i - j - k;
                let w = [i as f64 / s, j as f64 / s, k as f64 / s, l as f64 / s];
                let combined = combine_probs(
                    &[member_probs[0], member_probs[1], member_probs[2], member_probs[3]],
                    &w,
                )?;
                let pred = argmax_rows(&combined);
                let f1 = classification_metrics(&pred, y_val, class_count)?.macro_f1;
                if f1 > best_f1 {
                    best_f1 = f1;
                    best_w = w;
                }
            }
        }
    }
    Ok((best_w, best_f1))
}

/// Filter `indices` to samples whose label is in `class_set` and remap
/// labels to positions within it.
fn select_and_remap(
    ds: &LabeledDataset,
    indices: &[usize],
    class_set: &[usize],
) -> (Vec<usize>, Vec<usize>) {
    let pos: BTreeMap<usize, usize> = class_set
        .iter()
        .enumerate()
        .map(|(p, &c)| (c, p))
        .collect();
    let mut keep = Vec::new();
    let mut labels = Vec::new();
    for &i in indices {
        if let Some(&p) = pos.get(&ds.label(i)) {
            keep.push(i);
            labels.push(p);
        }
    }
    (keep, labels)
}

/// Train the four members and optimize blend weights (the full recipe:
/// raw-bit models, encoder, embedding models, weight search).
pub fn build_ensemble(
    ds: &LabeledDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    class_set: &[usize],
    encoder_cfg: &EncoderConfig,
    forest_cfg: &ForestConfig,
    logistic_cfg: &LogisticConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(EnsembleModel, EnsembleReport), EnsembleError> {
    if class_set.is_empty() || class_set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EnsembleError::Invalid(
            "class_set must be ascending and non-empty".into(),
        ));
    }
    if class_set.iter().any(|&c| c == 0 || c > ds.num_classes()) {
        return Err(EnsembleError::Invalid(format!(
            "class_set {:?} outside dataset classes 1..{}",
            class_set,
            ds.num_classes()
        )));
    }
    let class_count = class_set.len();
    let (train_keep, y_train) = select_and_remap(ds, train_idx, class_set);
    let (val_keep, y_val) = select_and_remap(ds, val_idx, class_set);
    if train_keep.is_empty() || val_keep.is_empty() {
        return Err(EnsembleError::Invalid(
            "no training or validation samples in class_set".into(),
        ));
    }
    let x_train = ds.batch(&train_keep);
    let x_val = ds.batch(&val_keep);

    let forest_raw = train_forest(&x_train, &y_train, forest_cfg, rng)?;
    let logistic_raw = train_logistic(&x_train, &y_train, class_count, logistic_cfg)
        .map_err(|e| EnsembleError::Invalid(format!("logistic training failed: {e}")))?;

    let (encoder, _head, enc_report) = train_encoder(
        &x_train,
        &y_train,
        &x_val,
        &y_val,
        class_count,
        encoder_cfg,
        rng,
    )?;
    let emb_train = encoder.embed(&x_train)?;
    let emb_val = encoder.embed(&x_val)?;

    let forest_emb = train_forest(&emb_train, &y_train, forest_cfg, rng)?;
    let logistic_emb = train_logistic(&emb_train, &y_train, class_count, logistic_cfg)
        .map_err(|e| EnsembleError::Invalid(format!("logistic training failed: {e}")))?;

    let p1 = probs_to_tensor(&forest_raw.predict_proba(&x_val)?);
    let p2 = probs_to_tensor(&logistic_raw.predict_proba(&x_val)?);
    let p3 = probs_to_tensor(&forest_emb.predict_proba(&emb_val)?);
    let p4 = probs_to_tensor(&logistic_emb.predict_proba(&emb_val)?);

    let accuracy_of = |p: &Tensor2| -> Result<f64, EnsembleError> {
        Ok(classification_metrics(&argmax_rows(p), &y_val, class_count)?.accuracy)
    };
    let member_val_accuracy = [
        accuracy_of(&p1)?,
        accuracy_of(&p2)?,
        accuracy_of(&p3)?,
        accuracy_of(&p4)?,
    ];

    let (weights, ensemble_val_macro_f1) =
        optimize_weights(&[&p1, &p2, &p3, &p4], &y_val, class_count)?;

    let model = EnsembleModel {
        forest_raw,
        logistic_raw,
        encoder,
        forest_emb,
        logistic_emb,
        weights,
        class_set: class_set.to_vec(),
    };
    let report = EnsembleReport {
        member_val_accuracy,
        ensemble_val_macro_f1,
        weights,
        encoder_epochs: enc_report.epochs_run,
        encoder_probe_f1: enc_report.best_probe_f1,
    };
    Ok((model, report))
}

impl EnsembleModel {
    /// Blended class distributions for raw bit rows `x` (one row per
    /// sample), ordered per `class_set`.
    pub fn predict_proba(&self, x: &Tensor2) -> Result<Tensor2, EnsembleError> {
        let emb = self.encoder.embed(x)?;
        let p1 = probs_to_tensor(&self.forest_raw.predict_proba(x)?);
        let p2 = probs_to_tensor(&self.logistic_raw.predict_proba(x)?);
        let p3 = probs_to_tensor(&self.forest_emb.predict_proba(&emb)?);
        let p4 = probs_to_tensor(&self.logistic_emb.predict_proba(&emb)?);
        combine_probs(&[&p1, &p2, &p3, &p4], &self.weights)
    }

    /// Per-member class distributions in member order (raw forest, raw
    /// logistic, embedded forest, embedded logistic).
    pub fn member_probs(&self, x: &Tensor2) -> Result<[Tensor2; MEMBER_COUNT], EnsembleError> {
        let emb = self.encoder.embed(x)?;
        Ok([
            probs_to_tensor(&self.forest_raw.predict_proba(x)?),
            probs_to_tensor(&self.logistic_raw.predict_proba(x)?),
            probs_to_tensor(&self.forest_emb.predict_proba(&emb)?),
            probs_to_tensor(&self.logistic_emb.predict_proba(&emb)?),
        ])
    }

    /// Predicted 1-based dataset class ids (argmax, lowest id on ties).
    pub fn predict_classes(&self, x: &Tensor2) -> Result<Vec<usize>, EnsembleError> {
        let probs = self.predict_proba(x)?;
        Ok(argmax_rows(&probs)
            .into_iter()
            .map(|p| self.class_set[p])
            .collect())
    }

    /// Write members and the manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EnsembleError> {
        std::fs::create_dir_all(dir)?;
        self.forest_raw.save_json(&dir.join("forest_raw.json"))?;
        self.logistic_raw.save(&dir.join("logistic_raw.nnpc"))?;
        self.encoder.save(&dir.join("encoder.nnpc"))?;
        self.forest_emb.save_json(&dir.join("forest_emb.json"))?;
        self.logistic_emb.save(&dir.join("logistic_emb.nnpc"))?;
        let manifest = serde_json::json!({
            "weights": self.weights,
            "class_set": self.class_set,
            "members": {
                "forest_raw": "forest_raw.json",
                "logistic_raw": "logistic_raw.nnpc",
                "encoder": "encoder.nnpc",
                "forest_emb": "forest_emb.json",
                "logistic_emb": "logistic_emb.nnpc",
            },
        });
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EnsembleError> {
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let weights_v: Vec<f64> = serde_json::from_value(manifest["weights"].clone())?;
        let weights: [f64; MEMBER_COUNT] = weights_v
            .try_into()
            .map_err(|_| EnsembleError::Invalid("manifest weights must have 4 entries".into()))?;
        let class_set: Vec<usize> = serde_json::from_value(manifest["class_set"].clone())?;
        Ok(EnsembleModel {
            forest_raw: ForestModel::load_json(&dir.join("forest_raw.json"))?,
            logistic_raw: LinearModel::load(&dir.join("logistic_raw.nnpc"))?,
            encoder: EncoderModel::load(&dir.join("encoder.nnpc"))?,
            forest_emb: ForestModel::load_json(&dir.join("forest_emb.json"))?,
            logistic_emb: LinearModel::load(&dir.join("logistic_emb.nnpc"))?,
            weights,
            class_set,
        })
    }
}

/// Per-malware-sample benign target class and guide confidence.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct TargetAssignment {
    /// dataset row -> (1-based benign class id, probability under the guide)
    pub entries: BTreeMap<usize, (usize, f64)>,
}

impl TargetAssignment {
    pub fn get(&self, sample_id: usize) -> Option<(usize, f64)> {
        self.entries.get(&sample_id).copied()
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), EnsembleError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "sample_id,c_star,confidence")?;
        for (id, (c, p)) in &self.entries {
            writeln!(f, "{id},{c},{p:.9}")?;
        }
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self, EnsembleError> {
        let body = std::fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (ln, line) in body.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let parse_err = || EnsembleError::Invalid(format!("bad targets row {}", ln + 1));
            let id: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
            let c: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
            let p: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
            entries.insert(id, (c, p));
        }
        Ok(TargetAssignment { entries })
    }
}

/// Pick each sample's target as the guide's argmax class (lowest id on
/// ties). `probs` rows parallel `sample_ids`; columns follow `class_set`.
pub fn assign_targets_from_probs(
    probs: &Tensor2,
    class_set: &[usize],
    sample_ids: &[usize],
) -> Result<TargetAssignment, EnsembleError> {
    if probs.rows() != sample_ids.len() || probs.cols() != class_set.len() {
        return Err(EnsembleError::Invalid(
            "probability matrix does not match ids/class_set".into(),
        ));
    }
    let mut entries = BTreeMap::new();
    for (row, &id) in sample_ids.iter().enumerate() {
        let arg = argmax_rows_single(probs.row(row));
        entries.insert(id, (class_set[arg], probs.at(row, arg)));
    }
    Ok(TargetAssignment { entries })
}

fn argmax_rows_single(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Run the benign-only guide over the given malware rows and cache each
/// sample's target class. The guide must not cover `malware_class`.
pub fn assign_targets(
    guide: &EnsembleModel,
    ds: &LabeledDataset,
    malware_ids: &[usize],
    malware_class: usize,
) -> Result<TargetAssignment, EnsembleError> {
    if guide.class_set.contains(&malware_class) {
        return Err(EnsembleError::Invalid(format!(
            "guide covers class {malware_class}; targets must be benign"
        )));
    }
    if let Some(&bad) = malware_ids.iter().find(|&&i| ds.label(i) != malware_class) {
        return Err(EnsembleError::Invalid(format!(
            "sample {bad} is not in malware class {malware_class}"
        )));
    }
    let x = ds.batch(malware_ids);
    let probs = guide.predict_proba(&x)?;
    assign_targets_from_probs(&probs, &guide.class_set, malware_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn uniform_probs(rows: usize, cols: usize, seed: u64) -> Tensor2 {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor2::from_fn(rows, cols, |_, _| rng.gen::<f64>());
        for i in 0..rows {
            let s: f64 = t.row(i).iter().sum();
            for v in t.row_mut(i) {
                *v /= s;
            }
        }
        t
    }

    #[test]
    fn combination_is_linear_in_weights() {
        let a = uniform_probs(6, 4, 1);
        let b = uniform_probs(6, 4, 2);
        let c = uniform_probs(6, 4, 3);
        let d = uniform_probs(6, 4, 4);
        let members = [&a, &b, &c, &d];
        let w1 = [0.1, 0.2, 0.3, 0.4];
        let w2 = [0.4, 0.3, 0.2, 0.1];
        let mid: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| (x + y) / 2.0).collect();
        let q1 = combine_probs(&members, &w1).unwrap();
        let q2 = combine_probs(&members, &w2).unwrap();
        let qm = combine_probs(&members, &mid).unwrap();
        for (m, (p, q)) in qm.as_slice().iter().zip(q1.as_slice().iter().zip(q2.as_slice())) {
            assert!((m - (p + q) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_members_weighted_sum_matches_hand_arithmetic() {
        let a = Tensor2::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Tensor2::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let z = Tensor2::zeros(1, 2);
        let q = combine_probs(&[&a, &b, &z, &z], &[0.7, 0.3, 0.0, 0.0]).unwrap();
        assert!((q.at(0, 0) - 0.7).abs() < 1e-12);
        assert!((q.at(0, 1) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn uniform_members_stay_uniform() {
        let u = Tensor2::from_fn(3, 4, |_, _| 0.25);
        let q = combine_probs(&[&u, &u, &u, &u], &[0.25, 0.25, 0.25, 0.25]).unwrap();
        for v in q.as_slice() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    /// Independent restatement of the weight-search contract: collect every
    /// grid point, keep those with maximal macro-F1, and among them pick
    /// the lexicographically smallest vector (compared as grid integers).
    fn oracle_weights(
        members: &[&Tensor2; MEMBER_COUNT],
        y: &[usize],
        classes: usize,
    ) -> ([usize; MEMBER_COUNT], f64) {
        let mut points = Vec::new();
        for i in 0..=20usize {
            for j in 0..=20 - i {
                for k in 0..=20 - i - j {
                    let l = 20 - i - j - k;
                    let w = [i as f64 / 20.0, j as f64 / 20.0, k as f64 / 20.0, l as f64 / 20.0];
                    let q = combine_probs(
                        &[members[0], members[1], members[2], members[3]],
                        &w,
                    )
                    .unwrap();
                    let f1 = classification_metrics(&argmax_rows(&q), y, classes)
                        .unwrap()
                        .macro_f1;
                    points.push(([i, j, k, l], f1));
                }
            }
        }
        let best_f1 = points.iter().map(|(_, f)| *f).fold(f64::MIN, f64::max);
        let winner = points
            .iter()
            .filter(|(_, f)| *f == best_f1)
            .map(|(g, _)| *g)
            .min()
            .unwrap();
        (winner, best_f1)
    }

    fn assert_matches_oracle(members: [&Tensor2; MEMBER_COUNT], y: &[usize], classes: usize) {
        let (w, f1) = optimize_weights(&members, y, classes).unwrap();
        let (grid, oracle_f1) = oracle_weights(&members, y, classes);
        assert!((f1 - oracle_f1).abs() < 1e-12);
        for (got, want) in w.iter().zip(grid) {
            assert!(
                (got - want as f64 / 20.0).abs() < 1e-12,
                "weights {w:?} vs oracle grid {grid:?}"
            );
        }
    }

    /// Member 3 alone predicts perfectly; the others confidently push the
    /// next class. The search must give member 3 the dominant weight and
    /// agree with the enumeration oracle exactly.
    #[test]
    fn dominant_member_gets_the_largest_weight() {
        let n = 12;
        let classes = 3;
        let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut good = Tensor2::zeros(n, classes);
        let mut bad = Tensor2::zeros(n, classes);
        for (i, &c) in y.iter().enumerate() {
            good.set(i, c, 1.0);
            bad.set(i, (c + 1) % classes, 1.0);
        }
        let (w, f1) = optimize_weights(&[&bad, &bad, &good, &bad], &y, classes).unwrap();
        assert!((f1 - 1.0).abs() < 1e-12);
        assert!(w[2] > w[0] && w[2] > w[1] && w[2] > w[3], "weights {w:?}");
        assert_matches_oracle([&bad, &bad, &good, &bad], &y, classes);
    }

    /// Mixed-quality members with noisy probabilities: the search result
    /// must match the enumeration oracle, including its tie-break.
    #[test]
    fn search_matches_enumeration_oracle_on_noisy_members() {
        let n = 18;
        let classes = 3;
        let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut members = Vec::new();
        for seed in 0..4u64 {
            let mut m = uniform_probs(n, classes, 30 + seed);
            // tilt each member toward the truth by a different amount
            for (i, &c) in y.iter().enumerate() {
                let boost = 0.2 + 0.2 * seed as f64;
                let v = m.at(i, c) + boost;
                m.set(i, c, v);
                let s: f64 = m.row(i).iter().sum();
                for q in m.row_mut(i) {
                    *q /= s;
                }
            }
            members.push(m);
        }
        assert_matches_oracle(
            [&members[0], &members[1], &members[2], &members[3]],
            &y,
            classes,
        );
    }

    /// Identical perfect members against identical hostile members: many
    /// grid points reach F1 = 1, and the contract picks the smallest.
    #[test]
    fn tie_break_picks_lexicographically_smallest() {
        let n = 6;
        let classes = 3;
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect(); // classes 0,1 only
        let mut good = Tensor2::zeros(n, classes);
        let mut bad = Tensor2::zeros(n, classes);
        for (i, &c) in y.iter().enumerate() {
            good.set(i, c, 1.0);
            bad.set(i, c + 1, 1.0);
        }
        let (w, f1) = optimize_weights(&[&bad, &good, &bad, &good], &y, classes).unwrap();
        assert!((f1 - 1.0).abs() < 1e-12);
        // lexicographically smallest winner: all weight on the last good
        // member (ties at equality resolve to the lower, true, class id)
        assert_eq!(w, [0.0, 0.0, 0.0, 1.0]);
        assert_matches_oracle([&bad, &good, &bad, &good], &y, classes);
    }

    #[test]
    fn optimized_weights_live_on_the_simplex() {
        let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let a = uniform_probs(10, 2, 5);
        let b = uniform_probs(10, 2, 6);
        let c = uniform_probs(10, 2, 7);
        let d = uniform_probs(10, 2, 8);
        let (w, _) = optimize_weights(&[&a, &b, &c, &d], &y, 2).unwrap();
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn target_assignment_examples() {
        let probs = Tensor2::from_vec(
            2,
            5,
            vec![
                0.1, 0.5, 0.2, 0.1, 0.1, // argmax class 2
                0.3, 0.3, 0.2, 0.1, 0.1, // tie -> class 1
            ],
        )
        .unwrap();
        let ta = assign_targets_from_probs(&probs, &[1, 2, 3, 4, 5], &[40, 41]).unwrap();
        assert_eq!(ta.get(40), Some((2, 0.5)));
        assert_eq!(ta.get(41), Some((1, 0.3)));
    }

    fn tiny_dataset() -> LabeledDataset {
        use crate::data::ApiVocabulary;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (n, d) = (60, 20);
        let mut bits = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let base = if class == 0 { 0 } else { 10 };
            let mut row = vec![0u8; d];
            for j in 0..6 {
                if rng.gen::<f64>() < 0.9 {
                    row[base + j] = 1;
                }
            }
            for slot in row.iter_mut() {
                if rng.gen::<f64>() < 0.05 {
                    *slot = 1;
                }
            }
            bits.extend_from_slice(&row);
            labels.push(class + 1);
        }
        let vocab = ApiVocabulary::new((0..d).map(|i| format!("api_{i}")).collect()).unwrap();
        LabeledDataset::from_parts(vocab, bits, labels).unwrap()
    }

    #[test]
    fn build_save_load_and_degenerate_weights() {
        let ds = tiny_dataset();
        let train: Vec<usize> = (0..40).collect();
        let val: Vec<usize> = (40..60).collect();
        let enc_cfg = EncoderConfig {
            hidden1: 16,
            hidden2: 8,
            embed_dim: 4,
            batch_size: 20,
            max_epochs: 4,
            patience: 4,
            ..EncoderConfig::default()
        };
        let forest_cfg = ForestConfig {
            n_trees: 20,
            ..ForestConfig::default()
        };
        let logistic_cfg = LogisticConfig {
            max_iters: 300,
            ..LogisticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut model, report) = build_ensemble(
            &ds,
            &train,
            &val,
            &[1, 2],
            &enc_cfg,
            &forest_cfg,
            &logistic_cfg,
            &mut rng,
        )
        .unwrap();
        assert!((report.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(report.ensemble_val_macro_f1 > 0.8);

        // degenerate blend reproduces the raw-bit forest exactly
        model.weights = [1.0, 0.0, 0.0, 0.0];
        let x = ds.batch(&val);
        let blended = model.predict_proba(&x).unwrap();
        let forest = probs_to_tensor(&model.forest_raw.predict_proba(&x).unwrap());
        for (a, b) in blended.as_slice().iter().zip(forest.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }

        // serialization roundtrip preserves predictions bit for bit
        let dir = std::env::temp_dir().join("ensemble-roundtrip");
        let _ = std::fs::remove_dir_all(&dir);
        model.save(&dir).unwrap();
        let loaded = EnsembleModel::load(&dir).unwrap();
        assert_eq!(loaded.weights, model.weights);
        assert_eq!(loaded.class_set, model.class_set);
        let again = loaded.predict_proba(&x).unwrap();
        assert_eq!(again.as_slice(), blended.as_slice());
    }

    #[test]
    fn target_csv_roundtrip() {
        let probs = Tensor2::from_vec(1, 2, vec![0.25, 0.75]).unwrap();
        let ta = assign_targets_from_probs(&probs, &[1, 2], &[17]).unwrap();
        let dir = std::env::temp_dir().join("targets-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("targets.csv");
        ta.save_csv(&path).unwrap();
        let back = TargetAssignment::load_csv(&path).unwrap();
        assert_eq!(back.get(17), Some((2, 0.75)));
    }
}
