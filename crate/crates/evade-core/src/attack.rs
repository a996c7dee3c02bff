//! Import-injection attacks. Every generator receives a malware sample's
//! bit row and a budget k and returns k distinct feature indices that are
//! currently absent; flipping those bits on is the whole perturbation, so
//! original functionality (present imports) is never touched.
//!
//! Three generators share that contract: the trained conditional VAE
//! (score-ranked), a most-popular baseline (target-class frequency
//! ranked), and a uniform-random baseline. A driver runs the full
//! method x budget grid and labels each sample before and after with the
//! detector ensemble.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cvae::{top_k_absent, CvaeError, CvaeModel};
use crate::data::{DataError, LabeledDataset};
use crate::ensemble::{EnsembleError, EnsembleModel, TargetAssignment};
use crate::eval::EvasionCounts;
use crate::nn::Tensor2;

/// Default injection budgets: 5, 10, ..., 50.
pub fn default_k_grid() -> Vec<usize> {
    (1..=10).map(|i| i * 5).collect()
}

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Cvae,
    MostPopular,
    Random,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 3] =
        [AttackMethod::Cvae, AttackMethod::MostPopular, AttackMethod::Random];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackMethod::Cvae => "cvae",
            AttackMethod::MostPopular => "most_popular",
            AttackMethod::Random => "random",
        }
    }
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One attacked sample: which indices were added and how the detector
/// labeled it before and after.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdversarialSample {
    pub sample_id: usize,
    pub method: AttackMethod,
    pub k: usize,
    /// 1-based benign class the attack aims for.
    pub target: usize,
    pub added_indices: Vec<usize>,
    /// 1-based detector labels.
    pub before_label: usize,
    pub after_label: usize,
    pub before_probs: Vec<f64>,
    pub after_probs: Vec<f64>,
}

impl AdversarialSample {
    /// Check the additive contract against the original bit row.
    pub fn validate(&self, original: &[u8]) -> Result<(), AttackError> {
        if self.added_indices.len() != self.k {
            return Err(AttackError::Invalid(format!(
                "sample {}: {} additions, budget {}",
                self.sample_id,
                self.added_indices.len(),
                self.k
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &j in &self.added_indices {
            if j >= original.len() {
                return Err(AttackError::Invalid(format!(
                    "sample {}: index {j} out of range",
                    self.sample_id
                )));
            }
            if original[j] != 0 {
                return Err(AttackError::Invalid(format!(
                    "sample {}: index {j} was already present",
                    self.sample_id
                )));
            }
            if !seen.insert(j) {
                return Err(AttackError::Invalid(format!(
                    "sample {}: index {j} added twice",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }
}

/// Rank absent features by target-class popularity; ties prefer the
/// lowest feature index.
pub fn select_most_popular(
    frequency: &[usize],
    bits: &[u8],
    k: usize,
) -> Result<Vec<usize>, AttackError> {
    if frequency.len() != bits.len() {
        return Err(AttackError::Invalid(
            "frequency/bits length mismatch".into(),
        ));
    }
    let scores: Vec<f64> = frequency.iter().map(|&c| c as f64).collect();
    Ok(top_k_absent(bits, &scores, k)?)
}

/// Sample k absent features uniformly without replacement.
pub fn select_random(
    bits: &[u8],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, AttackError> {
    let absent: Vec<usize> = (0..bits.len()).filter(|&j| bits[j] == 0).collect();
    if absent.len() < k {
        return Err(AttackError::Invalid(format!(
            "k = {k} exceeds {} absent features",
            absent.len()
        )));
    }
    // partial Fisher-Yates over the absent pool
    let mut pool = absent;
    for i in 0..k {
        let j = i + rng.gen_range(0..pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    Ok(pool)
}

/// Rank absent features by the generator's scores for this sample's
/// target class.
pub fn select_cvae(
    model: &CvaeModel,
    bits: &[u8],
    c_star: usize,
    k: usize,
) -> Result<Vec<usize>, AttackError> {
    let mut x = Tensor2::zeros(1, bits.len());
    for (j, &b) in bits.iter().enumerate() {
        if b == 1 {
            x.set(0, j, 1.0);
        }
    }
    let scores = model.scores(&x, &[c_star - 1])?;
    Ok(top_k_absent(bits, scores.row(0), k)?)
}

/// Run every method at every budget over the given malware samples and
/// label the results with the detector. Record order is deterministic:
/// methods in `AttackMethod::ALL` order, budgets as given, samples as
/// given. The random baseline consumes `rng` in that same order.
#[allow(clippy::too_many_arguments)]
pub fn run_attack_grid(
    detector: &EnsembleModel,
    generator: &CvaeModel,
    ds: &LabeledDataset,
    malware_ids: &[usize],
    targets: &TargetAssignment,
    train_idx: &[usize],
    ks: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AdversarialSample>, AttackError> {
    if malware_ids.is_empty() {
        return Err(AttackError::Invalid("no malware samples to attack".into()));
    }
    let benign_count = ds.num_classes() - 1;

    let mut targets0 = Vec::with_capacity(malware_ids.len());
    for &id in malware_ids {
        let (c_star, _) = targets.get(id).ok_or_else(|| {
            AttackError::Invalid(format!("sample {id} has no target assignment"))
        })?;
        if c_star == 0 || c_star > benign_count {
            return Err(AttackError::Invalid(format!(
                "sample {id}: target {c_star} is not a benign class"
            )));
        }
        targets0.push(c_star - 1);
    }

    // per-target-class training popularity for the baseline
    let mut freq: Vec<Option<Vec<usize>>> = vec![None; benign_count];
    for &c0 in &targets0 {
        if freq[c0].is_none() {
            freq[c0] = Some(ds.class_frequency(c0 + 1, train_idx)?);
        }
    }

    let originals = ds.batch(malware_ids);
    let before_probs = detector.predict_proba(&originals)?;
    let before_labels = detector.predict_classes(&originals)?;
    let cvae_scores = generator.scores(&originals, &targets0)?;

    let mut records = Vec::with_capacity(AttackMethod::ALL.len() * ks.len() * malware_ids.len());
    for method in AttackMethod::ALL {
        for &k in ks {
            let mut added_per_row: Vec<Vec<usize>> = Vec::with_capacity(malware_ids.len());
            let mut perturbed = originals.clone();
            for (row, &id) in malware_ids.iter().enumerate() {
                let bits = ds.sample(id);
                let added = match method {
                    AttackMethod::Cvae => top_k_absent(bits, cvae_scores.row(row), k)?,
                    AttackMethod::MostPopular => {
                        let f = freq[targets0[row]].as_ref().expect("precomputed");
                        select_most_popular(f, bits, k)?
                    }
                    AttackMethod::Random => select_random(bits, k, rng)?,
                };
                for &j in &added {
                    perturbed.set(row, j, 1.0);
                }
                added_per_row.push(added);
            }
            let after_probs = detector.predict_proba(&perturbed)?;
            let after_labels = detector.predict_classes(&perturbed)?;
            for (row, &id) in malware_ids.iter().enumerate() {
                let record = AdversarialSample {
                    sample_id: id,
                    method,
                    k,
                    target: targets0[row] + 1,
                    added_indices: added_per_row[row].clone(),
                    before_label: before_labels[row],
                    after_label: after_labels[row],
                    before_probs: before_probs.row(row).to_vec(),
                    after_probs: after_probs.row(row).to_vec(),
                };
                record.validate(ds.sample(id))?;
                records.push(record);
            }
        }
    }
    Ok(records)
}

/// Evasion tallies per (method, budget): a sample counts as evaded when
/// the detector no longer assigns `malware_class`, and as a target hit
/// when it assigns exactly the intended benign class.
pub fn tally(
    records: &[AdversarialSample],
    malware_class: usize,
) -> BTreeMap<(AttackMethod, usize), EvasionCounts> {
    let mut groups: BTreeMap<(AttackMethod, usize), (usize, usize, usize)> = BTreeMap::new();
    for r in records {
        let entry = groups.entry((r.method, r.k)).or_insert((0, 0, 0));
        entry.0 += 1;
        if r.after_label != malware_class {
            entry.1 += 1;
            if r.after_label == r.target {
                entry.2 += 1;
            }
        }
    }
    groups
        .into_iter()
        .map(|(key, (m, e, t))| {
            (
                key,
                EvasionCounts::new(m, e, t).expect("tally preserves ordering"),
            )
        })
        .collect()
}

/// One JSON object per line.
pub fn write_jsonl(records: &[AdversarialSample], path: &Path) -> Result<(), AttackError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AdversarialSample>, AttackError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
