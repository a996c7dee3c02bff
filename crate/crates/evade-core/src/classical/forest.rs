//! Random forest: bootstrap-resampled Gini trees with per-node random
//! feature candidates, leaf class histograms, and soft (averaged) voting.

use rand::seq::index::sample as sample_without_replacement;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ClassDistribution, ClassicalError};
use crate::nn::Tensor2;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 300,
            max_depth: 32,
            min_samples_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum Node {
    /// Samples with feature value <= threshold go left.
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Class counts of the training samples that reached this leaf.
    Leaf { histogram: Vec<f64> },
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn leaf_histogram(&self, row: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { histogram } => return histogram,
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub feature_count: usize,
    pub class_count: usize,
    /// Accuracy on out-of-bag votes collected during training, if any
    /// sample was ever out of bag.
    pub oob_accuracy: Option<f64>,
}

impl ForestModel {
    /// Mean of per-tree normalized leaf histograms.
    pub fn predict_proba(&self, x: &Tensor2) -> Result<Vec<ClassDistribution>, ClassicalError> {
        if x.cols() != self.feature_count {
            return Err(ClassicalError::WidthMismatch {
                expected: self.feature_count,
                got: x.cols(),
            });
        }
        let mut out = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mut acc = vec![0.0; self.class_count];
            for tree in &self.trees {
                let hist = tree.leaf_histogram(row);
                let total: f64 = hist.iter().sum();
                for (a, &h) in acc.iter_mut().zip(hist) {
                    *a += h / total;
                }
            }
            let n = self.trees.len() as f64;
            out.push(ClassDistribution::new(
                acc.into_iter().map(|a| a / n).collect(),
            )?);
        }
        Ok(out)
    }

    pub fn save_json(&self, path: &std::path::Path) -> std::io::Result<()> {
        let json = serde_json::to_string(self).expect("forest serializes");
        std::fs::write(path, json)
    }

    pub fn load_json(path: &std::path::Path) -> std::io::Result<Self> {
        let json = std::fs::read_to_string(path)?;
        serde_json::from_str(&json)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Train a forest on rows of `x` with 0-based labels `y`.
pub fn train_forest(
    x: &Tensor2,
    y: &[usize],
    cfg: &ForestConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ForestModel, ClassicalError> {
    let m = x.rows();
    if m == 0 || y.len() != m {
        return Err(ClassicalError::EmptyInput);
    }
    let class_count = y.iter().max().expect("non-empty") + 1;
    let d = x.cols();
    let n_candidates = (d as f64).sqrt().ceil() as usize;

    let mut trees = Vec::with_capacity(cfg.n_trees);
    // out-of-bag vote accumulation: summed normalized histograms per sample
    let mut oob_votes = vec![vec![0.0f64; class_count]; m];
    let mut oob_seen = vec![false; m];

    for _ in 0..cfg.n_trees {
        let mut in_bag = vec![false; m];
        let bootstrap: Vec<usize> = (0..m)
            .map(|_| {
                let i = rng.gen_range(0..m);
                in_bag[i] = true;
                i
            })
            .collect();

        let mut builder = TreeBuilder {
            x,
            y,
            class_count,
            cfg,
            n_candidates,
            nodes: Vec::new(),
        };
        let mut indices = bootstrap;
        builder.build(&mut indices, 0, rng);
        let tree = Tree { nodes: builder.nodes };

        for i in 0..m {
            if in_bag[i] {
                continue;
            }
            let hist = tree.leaf_histogram(x.row(i));
            let total: f64 = hist.iter().sum();
            for (v, &h) in oob_votes[i].iter_mut().zip(hist) {
                *v += h / total;
            }
            oob_seen[i] = true;
        }
        trees.push(tree);
    }

    let mut counted = 0usize;
    let mut correct = 0usize;
    for i in 0..m {
        if !oob_seen[i] {
            continue;
        }
        counted += 1;
        let pred = argmax_lowest(&oob_votes[i]);
        if pred == y[i] {
            correct += 1;
        }
    }
    let oob_accuracy = (counted > 0).then(|| correct as f64 / counted as f64);

    Ok(ForestModel {
        trees,
        feature_count: d,
        class_count,
        oob_accuracy,
    })
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = i;
        }
    }
    best
}

struct TreeBuilder<'a> {
    x: &'a Tensor2,
    y: &'a [usize],
    class_count: usize,
    cfg: &'a ForestConfig,
    n_candidates: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    /// Grow a subtree over `indices`; returns its root node id.
    fn build(&mut self, indices: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let counts = self.class_counts(indices);
        let pure = counts.iter().filter(|&&c| c > 0.0).count() <= 1;
        if pure || depth >= self.cfg.max_depth || indices.len() < 2 * self.cfg.min_samples_leaf {
            return self.push_leaf(counts);
        }

        match self.best_split(indices, rng) {
            None => self.push_leaf(counts),
            Some((feature, threshold)) => {
                // partition in place: left half <= threshold
                let mut split_at = 0;
                for i in 0..indices.len() {
                    if self.x.row(indices[i])[feature] <= threshold {
                        indices.swap(i, split_at);
                        split_at += 1;
                    }
                }
                // reserve the slot so children ids are known after recursion
                let id = self.nodes.len();
                self.nodes.push(Node::Leaf { histogram: vec![] });
                let (left_idx, right_idx) = indices.split_at_mut(split_at);
                let left = self.build(left_idx, depth + 1, rng);
                let right = self.build(right_idx, depth + 1, rng);
                self.nodes[id] = Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                };
                id
            }
        }
    }

    fn push_leaf(&mut self, histogram: Vec<f64>) -> usize {
        self.nodes.push(Node::Leaf { histogram });
        self.nodes.len() - 1
    }

    fn class_counts(&self, indices: &[usize]) -> Vec<f64> {
        let mut counts = vec![0.0; self.class_count];
        for &i in indices {
            counts[self.y[i]] += 1.0;
        }
        counts
    }

    /// Best (feature, threshold) among sqrt-d random candidates by weighted
    /// Gini impurity; midpoint thresholds between consecutive distinct
    /// values. Ties prefer the lower feature index, then lower threshold.
    fn best_split(&self, indices: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let d = self.x.cols();
        let mut candidates: Vec<usize> =
            sample_without_replacement(rng, d, self.n_candidates.min(d)).into_vec();
        candidates.sort_unstable();

        let n = indices.len() as f64;
        let min_leaf = self.cfg.min_samples_leaf;
        let mut best: Option<(f64, usize, f64)> = None;

        let mut sorted: Vec<usize> = Vec::with_capacity(indices.len());
        for &feature in &candidates {
            sorted.clear();
            sorted.extend_from_slice(indices);
            sorted.sort_by(|&a, &b| {
                self.x.row(a)[feature]
                    .partial_cmp(&self.x.row(b)[feature])
                    .expect("finite features")
            });
            if self.x.row(sorted[0])[feature] == self.x.row(*sorted.last().unwrap())[feature] {
                continue; // constant feature at this node
            }

            // incremental sweep: move samples left one by one, evaluate at
            // each boundary between distinct values
            let mut left = vec![0.0; self.class_count];
            let mut right = self.class_counts(&sorted);
            for cut in 1..sorted.len() {
                let moved = sorted[cut - 1];
                left[self.y[moved]] += 1.0;
                right[self.y[moved]] -= 1.0;

                let prev = self.x.row(sorted[cut - 1])[feature];
                let next = self.x.row(sorted[cut])[feature];
                if prev == next {
                    continue;
                }
                if cut < min_leaf || sorted.len() - cut < min_leaf {
                    continue;
                }
                let nl = cut as f64;
                let nr = n - nl;
                let score = (nl / n) * gini(&left, nl) + (nr / n) * gini(&right, nr);
                let threshold = 0.5 * (prev + next);
                let better = match best {
                    None => true,
                    Some((bs, bf, bt)) => {
                        score < bs - 1e-12
                            || ((score - bs).abs() <= 1e-12
                                && (feature < bf || (feature == bf && threshold < bt)))
                    }
                };
                if better {
                    best = Some((score, feature, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

fn gini(counts: &[f64], total: f64) -> f64 {
    let mut sum_sq = 0.0;
    for &c in counts {
        let p = c / total;
        sum_sq += p * p;
    }
    1.0 - sum_sq
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Linearly separable 2-class set on one informative feature.
    fn separable() -> (Tensor2, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let cls = i / 10;
            // feature 0 separates; features 1-2 are constant noise
            rows.extend_from_slice(&[cls as f64, 0.0, 1.0]);
            labels.push(cls);
        }
        (Tensor2::from_vec(20, 3, rows).unwrap(), labels)
    }

    #[test]
    fn separable_data_is_fit_exactly() {
        let (x, y) = separable();
        let cfg = ForestConfig {
            n_trees: 25,
            ..ForestConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = train_forest(&x, &y, &cfg, &mut rng).unwrap();
        let probs = model.predict_proba(&x).unwrap();
        for (p, &label) in probs.iter().zip(&y) {
            assert_eq!(p.argmax0(), label);
        }
    }

    #[test]
    fn single_class_input_is_constant_predictor() {
        let x = Tensor2::from_fn(6, 2, |i, j| (i * 2 + j) as f64);
        let y = vec![0usize; 6];
        let cfg = ForestConfig {
            n_trees: 5,
            ..ForestConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = train_forest(&x, &y, &cfg, &mut rng).unwrap();
        for p in model.predict_proba(&x).unwrap() {
            assert_eq!(p.probs(), &[1.0]);
        }
    }

    #[test]
    fn hand_built_forest_averages_leaf_histograms() {
        // two stumps on feature 0 with different leaf histograms; the
        // prediction must equal the hand-computed average
        let stump = |l: Vec<f64>, r: Vec<f64>| Tree {
            nodes: vec![
                Node::Internal {
                    feature: 0,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { histogram: l },
                Node::Leaf { histogram: r },
            ],
        };
        let model = ForestModel {
            trees: vec![
                stump(vec![3.0, 1.0], vec![0.0, 2.0]),
                stump(vec![1.0, 1.0], vec![1.0, 3.0]),
            ],
            feature_count: 1,
            class_count: 2,
            oob_accuracy: None,
        };
        let x = Tensor2::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let probs = model.predict_proba(&x).unwrap();
        // left: avg(3/4, 1/2) = 0.625 for class 0
        assert!((probs[0].probs()[0] - 0.625).abs() < 1e-12);
        // right: avg(0, 1/4) = 0.125 for class 0
        assert!((probs[1].probs()[0] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn identical_trees_match_single_tree() {
        let tree = Tree {
            nodes: vec![Node::Leaf {
                histogram: vec![2.0, 6.0],
            }],
        };
        let one = ForestModel {
            trees: vec![tree.clone()],
            feature_count: 1,
            class_count: 2,
            oob_accuracy: None,
        };
        let two = ForestModel {
            trees: vec![tree.clone(), tree],
            feature_count: 1,
            class_count: 2,
            oob_accuracy: None,
        };
        let x = Tensor2::from_vec(1, 1, vec![0.0]).unwrap();
        assert_eq!(
            one.predict_proba(&x).unwrap()[0].probs(),
            two.predict_proba(&x).unwrap()[0].probs()
        );
    }

    #[test]
    fn width_mismatch_is_reported() {
        let model = ForestModel {
            trees: vec![Tree {
                nodes: vec![Node::Leaf {
                    histogram: vec![1.0],
                }],
            }],
            feature_count: 3,
            class_count: 1,
            oob_accuracy: None,
        };
        let x = Tensor2::zeros(1, 2);
        assert!(matches!(
            model.predict_proba(&x),
            Err(ClassicalError::WidthMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn json_roundtrip_preserves_predictions() {
        let (x, y) = separable();
        let cfg = ForestConfig {
            n_trees: 10,
            ..ForestConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = train_forest(&x, &y, &cfg, &mut rng).unwrap();
        let dir = std::env::temp_dir().join("forest-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("forest.json");
        model.save_json(&path).unwrap();
        let loaded = ForestModel::load_json(&path).unwrap();
        for (a, b) in model
            .predict_proba(&x)
            .unwrap()
            .iter()
            .zip(loaded.predict_proba(&x).unwrap())
        {
            assert_eq!(a.probs(), b.probs());
        }
    }
}
