//! Dataset loading, validation, and stratified splitting.
//!
//! The on-disk format is headered CSV: first row is the API-import names
//! plus a literal last column `label`; body rows are 0/1 integers plus a
//! 1-based class id. Canonical files (comma-separated, LF-terminated, no
//! quoting) round-trip byte-identically through [`load_dataset`] /
//! [`write_dataset`].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::Tensor2;

/// Minimum set bits per admitted sample, capped by the feature count so
/// tiny synthetic fixtures stay loadable.
const MIN_POPCOUNT: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {detail}")]
    MalformedRow { row: usize, detail: String },
    #[error("row {row}, column {col}: value {value:?} is not 0 or 1")]
    NonBinaryValue { row: usize, col: usize, value: String },
    #[error("row {row}: label {value:?} outside 1..=C")]
    BadLabel { row: usize, value: String },
    #[error("column {col}: duplicate vocabulary name {name:?}")]
    DuplicateName { col: usize, name: String },
    #[error("row {row}: popcount {popcount} below the admission minimum {min}")]
    LowPopcount { row: usize, popcount: usize, min: usize },
    #[error("class {class_id} has no samples")]
    EmptyClass { class_id: usize },
    #[error("class {class_id} has {count} samples; stratification needs at least 4")]
    ClassTooSmall { class_id: usize, count: usize },
    #[error("unknown class id {class_id} (dataset has 1..={num_classes})")]
    UnknownClass { class_id: usize, num_classes: usize },
    #[error("split fractions must sum to 1, got {sum}")]
    BadFractions { sum: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Ordered API-import name list; a feature index is a position in it.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ApiVocabulary {
    names: Vec<String>,
}

impl ApiVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self, DataError> {
        if names.is_empty() {
            return Err(DataError::Invalid("vocabulary is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (col, name) in names.iter().enumerate() {
            if !seen.insert(name.as_str()) {
                return Err(DataError::DuplicateName {
                    col,
                    name: name.clone(),
                });
            }
        }
        Ok(ApiVocabulary { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Binary feature matrix with 1-based class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    vocab: ApiVocabulary,
    /// Flat row-major 0/1 bytes, n_samples x n_features.
    bits: Vec<u8>,
    /// 1-based class ids, one per sample.
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Build from parts, validating shape, binary values, and label range.
    /// The popcount admission rule applies only at [`load_dataset`]; attack
    /// outputs and unit fixtures may be sparser.
    pub fn from_parts(
        vocab: ApiVocabulary,
        bits: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        let n = vocab.len();
        if labels.is_empty() || bits.len() != labels.len() * n {
            return Err(DataError::Invalid(format!(
                "bits length {} does not match {} samples x {} features",
                bits.len(),
                labels.len(),
                n
            )));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(DataError::NonBinaryValue {
                row: pos / n,
                col: pos % n,
                value: bits[pos].to_string(),
            });
        }
        let num_classes = *labels.iter().max().expect("non-empty");
        for (row, &l) in labels.iter().enumerate() {
            if l == 0 {
                return Err(DataError::BadLabel {
                    row,
                    value: l.to_string(),
                });
            }
        }
        let ds = LabeledDataset {
            vocab,
            bits,
            labels,
            num_classes,
        };
        for c in 1..=num_classes {
            if ds.class_indices(c).is_empty() {
                return Err(DataError::EmptyClass { class_id: c });
            }
        }
        Ok(ds)
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn vocabulary(&self) -> &ApiVocabulary {
        &self.vocab
    }

    /// Bit row for sample `i`.
    pub fn sample(&self, i: usize) -> &[u8] {
        let n = self.n_features();
        &self.bits[i * n..(i + 1) * n]
    }

    /// 1-based class id of sample `i`.
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// 0-based class index of sample `i`.
    pub fn label0(&self, i: usize) -> usize {
        self.labels[i] - 1
    }

    /// Indices of all samples with the given 1-based class id.
    pub fn class_indices(&self, class_id: usize) -> Vec<usize> {
        (0..self.n_samples())
            .filter(|&i| self.labels[i] == class_id)
            .collect()
    }

    /// Dense f64 batch for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor2 {
        let n = self.n_features();
        let mut out = Tensor2::zeros(indices.len(), n);
        for (r, &i) in indices.iter().enumerate() {
            let src = self.sample(i);
            for (dst, &b) in out.row_mut(r).iter_mut().zip(src) {
                *dst = b as f64;
            }
        }
        out
    }

    /// 0-based labels for the given sample indices.
    pub fn labels0(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label0(i)).collect()
    }

    /// Set bits of sample `i`.
    pub fn popcount(&self, i: usize) -> usize {
        self.sample(i).iter().map(|&b| b as usize).sum()
    }

    /// Mean popcount over samples of a class (Table-style per-class stat).
    pub fn mean_popcount(&self, class_id: usize) -> Result<f64, DataError> {
        let idx = self.checked_class(class_id)?;
        let total: usize = idx.iter().map(|&i| self.popcount(i)).sum();
        Ok(total as f64 / idx.len() as f64)
    }

    /// Per-feature count of set bits among class-`class_id` samples
    /// restricted to `within` (typically a split's indices).
    pub fn class_frequency(
        &self,
        class_id: usize,
        within: &[usize],
    ) -> Result<Vec<usize>, DataError> {
        if class_id == 0 || class_id > self.num_classes {
            return Err(DataError::UnknownClass {
                class_id,
                num_classes: self.num_classes,
            });
        }
        let mut counts = vec![0usize; self.n_features()];
        let mut any = false;
        for &i in within {
            if self.labels[i] != class_id {
                continue;
            }
            any = true;
            for (c, &b) in counts.iter_mut().zip(self.sample(i)) {
                *c += b as usize;
            }
        }
        if !any {
            return Err(DataError::EmptyClass { class_id });
        }
        Ok(counts)
    }

    fn checked_class(&self, class_id: usize) -> Result<Vec<usize>, DataError> {
        if class_id == 0 || class_id > self.num_classes {
            return Err(DataError::UnknownClass {
                class_id,
                num_classes: self.num_classes,
            });
        }
        let idx = self.class_indices(class_id);
        if idx.is_empty() {
            return Err(DataError::EmptyClass { class_id });
        }
        Ok(idx)
    }
}

/// Disjoint index sets covering the whole dataset, stratified by class.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val_tune: Vec<usize>,
    pub val_es: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let json = std::fs::read_to_string(path)?;
        serde_json::from_str(&json).map_err(|e| DataError::Invalid(e.to_string()))
    }

    /// All four index sets in (train, val_tune, val_es, test) order.
    pub fn splits(&self) -> [&[usize]; 4] {
        [&self.train, &self.val_tune, &self.val_es, &self.test]
    }
}

/// Parse and validate a dataset CSV.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    let ncols = headers.len();
    if ncols < 2 || headers.get(ncols - 1) != Some("label") {
        return Err(DataError::Invalid(
            "header must end with a literal `label` column".into(),
        ));
    }
    let names: Vec<String> = headers.iter().take(ncols - 1).map(String::from).collect();
    let vocab = ApiVocabulary::new(names)?;
    let n = vocab.len();
    let min_pop = MIN_POPCOUNT.min(n);

    let mut bits = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != ncols {
            return Err(DataError::MalformedRow {
                row,
                detail: format!("expected {} columns, got {}", ncols, record.len()),
            });
        }
        let mut popcount = 0usize;
        for col in 0..n {
            let cell = record.get(col).expect("length checked");
            match cell {
                "0" => bits.push(0),
                "1" => {
                    bits.push(1);
                    popcount += 1;
                }
                other => {
                    return Err(DataError::NonBinaryValue {
                        row,
                        col,
                        value: other.to_string(),
                    })
                }
            }
        }
        if popcount < min_pop {
            return Err(DataError::LowPopcount {
                row,
                popcount,
                min: min_pop,
            });
        }
        let label_cell = record.get(n).expect("length checked");
        let label: usize = label_cell.parse().map_err(|_| DataError::BadLabel {
            row,
            value: label_cell.to_string(),
        })?;
        if label == 0 {
            return Err(DataError::BadLabel {
                row,
                value: label_cell.to_string(),
            });
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(DataError::Invalid("dataset has no rows".into()));
    }
    LabeledDataset::from_parts(vocab, bits, labels)
}

/// Write the canonical CSV form (comma-separated, LF line endings).
pub fn write_dataset(ds: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut header: Vec<&str> = ds.vocab.names().iter().map(String::as_str).collect();
    header.push("label");
    writer.write_record(&header)?;
    let mut cells: Vec<String> = Vec::with_capacity(ds.n_features() + 1);
    for i in 0..ds.n_samples() {
        cells.clear();
        cells.extend(ds.sample(i).iter().map(|b| b.to_string()));
        cells.push(ds.label(i).to_string());
        writer.write_record(&cells)?;
    }
    writer.flush().map_err(DataError::Io)?;
    Ok(())
}

/// Deterministic stratified split into train / val_tune / val_es / test.
///
/// Per class: real-valued targets `fraction * count` are floored, then
/// leftover samples go to the splits with the largest fractional parts
/// (ties resolved toward the earlier split, train first). Assignment order
/// comes from a seeded shuffle of each class's indices.
pub fn stratified_split(
    ds: &LabeledDataset,
    fractions: [f64; 4],
    seed: u64,
) -> Result<SplitManifest, DataError> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions { sum });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: [Vec<usize>; 4] = Default::default();

    for class_id in 1..=ds.num_classes() {
        let mut idx = ds.class_indices(class_id);
        if idx.len() < 4 {
            return Err(DataError::ClassTooSmall {
                class_id,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);

        let m = idx.len();
        let targets: Vec<f64> = fractions.iter().map(|f| f * m as f64).collect();
        let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..4).collect();
        // largest fractional part first; equal parts keep split order
        order.sort_by(|&a, &b| {
            let fa = targets[a] - targets[a].floor();
            let fb = targets[b] - targets[b].floor();
            fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
        });
        for &s in order.iter().take(m - assigned) {
            counts[s] += 1;
        }

        let mut cursor = 0;
        for (s, &c) in counts.iter().enumerate() {
            out[s].extend_from_slice(&idx[cursor..cursor + c]);
            cursor += c;
        }
    }

    for split in &mut out {
        split.sort_unstable();
    }
    let [train, val_tune, val_es, test] = out;
    Ok(SplitManifest {
        seed,
        train,
        val_tune,
        val_es,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(names: usize, labels: Vec<usize>, bits: Vec<u8>) -> LabeledDataset {
        let vocab =
            ApiVocabulary::new((0..names).map(|i| format!("api_{i:04}")).collect()).unwrap();
        LabeledDataset::from_parts(vocab, bits, labels).unwrap()
    }

    #[test]
    fn load_echoes_counts_of_handwritten_file() {
        let dir = std::env::temp_dir().join("data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.csv");
        let mut body = String::from("a,b,c,d,label\n");
        for i in 0..12 {
            let label = if i < 7 { 1 } else { 2 };
            // all-ones rows satisfy the popcount minimum capped at n=4
            body.push_str(&format!("1,1,1,1,{label}\n"));
        }
        std::fs::write(&path, &body).unwrap();

        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.n_samples(), 12);
        assert_eq!(ds.n_features(), 4);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.class_indices(1).len(), 7);
        assert_eq!(ds.class_indices(2).len(), 5);

        // canonical round trip is byte-identical
        let out = dir.join("tiny-out.csv");
        write_dataset(&ds, &out).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&out).unwrap());
    }

    #[test]
    fn all_zero_row_is_rejected() {
        let dir = std::env::temp_dir().join("data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("zero.csv");
        std::fs::write(&path, "a,b,c,d,e,f,label\n0,0,0,0,0,0,1\n").unwrap();
        match load_dataset(&path) {
            Err(DataError::LowPopcount { row: 0, popcount: 0, min: 5 }) => {}
            other => panic!("expected popcount violation, got {other:?}"),
        }
    }

    #[test]
    fn non_binary_and_bad_label_carry_position() {
        let dir = std::env::temp_dir().join("data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("nonbin.csv");
        std::fs::write(&p1, "a,b,label\n0,2,1\n").unwrap();
        match load_dataset(&p1) {
            Err(DataError::NonBinaryValue { row: 0, col: 1, .. }) => {}
            other => panic!("got {other:?}"),
        }
        let p2 = dir.join("badlabel.csv");
        std::fs::write(&p2, "a,b,label\n1,1,0\n").unwrap();
        match load_dataset(&p2) {
            Err(DataError::BadLabel { row: 0, .. }) => {}
            other => panic!("got {other:?}"),
        }
    }

    #[test]
    fn duplicate_header_name_is_rejected() {
        let dir = std::env::temp_dir().join("data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dup.csv");
        std::fs::write(&path, "a,a,label\n1,1,1\n").unwrap();
        match load_dataset(&path) {
            Err(DataError::DuplicateName { col: 1, .. }) => {}
            other => panic!("got {other:?}"),
        }
    }

    #[test]
    fn split_of_100_per_class_is_exact() {
        let labels: Vec<usize> = (0..200).map(|i| 1 + i % 2).collect();
        let bits = vec![1u8; 200 * 6];
        let ds = toy(6, labels, bits);
        let m = stratified_split(&ds, [0.70, 0.10, 0.05, 0.15], 7).unwrap();
        for (split, want) in m.splits().into_iter().zip([140, 20, 10, 30]) {
            assert_eq!(split.len(), want);
            for class_id in 1..=2 {
                let in_class = split
                    .iter()
                    .filter(|&&i| ds.label(i) == class_id)
                    .count();
                assert_eq!(in_class, want / 2);
            }
        }
    }

    #[test]
    fn split_of_667_rounds_within_one_of_targets() {
        let labels = vec![1usize; 667];
        let bits = vec![1u8; 667 * 6];
        let ds = toy(6, labels, bits);
        let m = stratified_split(&ds, [0.70, 0.10, 0.05, 0.15], 1).unwrap();
        let sizes: Vec<usize> = m.splits().iter().map(|s| s.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 667);
        for (&got, target) in sizes.iter().zip([466.9, 66.7, 33.35, 100.05]) {
            assert!(
                (got as f64 - target).abs() <= 1.0,
                "split size {got} vs target {target}"
            );
        }
    }

    #[test]
    fn same_seed_same_manifest() {
        let labels: Vec<usize> = (0..60).map(|i| 1 + i % 3).collect();
        let bits = vec![1u8; 60 * 6];
        let ds = toy(6, labels, bits);
        let a = stratified_split(&ds, [0.70, 0.10, 0.05, 0.15], 42).unwrap();
        let b = stratified_split(&ds, [0.70, 0.10, 0.05, 0.15], 42).unwrap();
        let c = stratified_split(&ds, [0.70, 0.10, 0.05, 0.15], 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn class_frequency_counts_bits() {
        // class 1 samples {[1,0],[1,1]} -> [2,1]; class 2 sample [0,1]
        let ds = toy(2, vec![1, 1, 2], vec![1, 0, 1, 1, 0, 1]);
        let all: Vec<usize> = (0..3).collect();
        assert_eq!(ds.class_frequency(1, &all).unwrap(), vec![2, 1]);
        assert_eq!(ds.class_frequency(2, &all).unwrap(), vec![0, 1]);
        // empty filter -> error
        match ds.class_frequency(1, &[2]) {
            Err(DataError::EmptyClass { class_id: 1 }) => {}
            other => panic!("got {other:?}"),
        }
        match ds.class_frequency(9, &all) {
            Err(DataError::UnknownClass { class_id: 9, .. }) => {}
            other => panic!("got {other:?}"),
        }
    }

    #[test]
    fn frequency_sums_match_column_popcounts() {
        let ds = toy(3, vec![1, 2, 1, 2], vec![1, 0, 1, 0, 1, 1, 1, 1, 0, 1, 0, 1]);
        let all: Vec<usize> = (0..4).collect();
        let mut summed = vec![0usize; 3];
        for c in 1..=2 {
            for (s, f) in summed.iter_mut().zip(ds.class_frequency(c, &all).unwrap()) {
                *s += f;
            }
        }
        let col_pop: Vec<usize> = (0..3)
            .map(|j| (0..4).filter(|&i| ds.sample(i)[j] == 1).count())
            .collect();
        assert_eq!(summed, col_pop);
    }
}
