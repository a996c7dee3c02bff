//! Conditional VAE that proposes import injections: given a malware
//! sample and a benign target class, the decoder emits per-feature scores
//! constrained to only ever add imports (relaxed output x~ = x + (1-x)*s).
//!
//! Training minimizes lambda_r * L_rec + beta * L_KL + lambda_s * L_sp +
//! lambda_c * L_cls, where reconstruction pulls absent-feature scores
//! toward a reference sample from the target class, the KL term anchors
//! the latent to a standard Gaussian, sparsity penalizes total added mass,
//! and classification pushes the binarized output (straight-through
//! estimator) into the target class under a frozen proxy classifier.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::distill::{DistillError, ProxyModel};
use crate::ensemble::TargetAssignment;
use crate::nn::layers::{linear, BoundParams};
use crate::nn::{
    Adam, ContainerError, Mode, NnError, ParamContainer, ParamSet, Tape, Tensor2, Var,
};

const LEAKY_SLOPE: f64 = 0.01;
/// Binarization threshold for the straight-through classification path
/// and for attack-time injection; ties round up.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum CvaeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    Diverged { epoch: usize, term: String },
}

/// Attribute a non-finite tape failure to the pipeline stage being built;
/// other tape errors pass through unchanged.
fn diverged_at<T>(
    epoch: usize,
    term: &'static str,
    r: Result<T, NnError>,
) -> Result<T, CvaeError> {
    r.map_err(|e| match e {
        NnError::NonFinite { op } => CvaeError::Diverged {
            epoch,
            term: format!("the {term} stage (op '{op}')"),
        },
        other => CvaeError::Nn(other),
    })
}

/// Weighted evasion objective used for early stopping and hyperparameter
/// ranking: mean over `ks` of w_tsr*TSR + w_uer*UER + w_cts*CTS, with an
/// undefined CTS contributing zero.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvasionObjective {
    pub ks: Vec<usize>,
    pub w_tsr: f64,
    pub w_uer: f64,
    pub w_cts: f64,
}

impl Default for EvasionObjective {
    fn default() -> Self {
        EvasionObjective {
            ks: vec![10, 20],
            w_tsr: 0.5,
            w_uer: 0.3,
            w_cts: 0.2,
        }
    }
}

/// Loss weights, dimensions, and training schedule.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub lambda_r: f64,
    pub beta: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
    /// Latent dimension.
    pub d: usize,
    /// Class-embedding dimension.
    pub d_e: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub enc_hidden: [usize; 2],
    pub dec_hidden: [usize; 3],
    pub objective: EvasionObjective,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            lambda_r: 1.0,
            beta: 0.01,
            lambda_s: 0.01,
            lambda_c: 1.0,
            d: 32,
            d_e: 16,
            lr: 1e-3,
            max_epochs: 300,
            patience: 15,
            batch_size: 64,
            enc_hidden: [1024, 512],
            dec_hidden: [1024, 1024, 2048],
            objective: EvasionObjective::default(),
        }
    }
}

/// Encoder (x, e_c) -> (mu, log sigma^2); decoder (x, z, e_c) -> scores.
#[derive(Debug, Clone)]
pub struct CvaeModel {
    params: ParamSet,
    n: usize,
    d: usize,
    d_e: usize,
    class_count: usize,
}

/// Tape vars produced by one forward pass.
struct CvaeForward {
    mu: Var,
    logvar: Var,
    scores: Var,
    relaxed: Var,
}

impl CvaeModel {
    /// `class_count` is the number of target (benign) classes the model
    /// conditions on; rows of the embedding table map 0-based targets.
    pub fn new(
        n: usize,
        class_count: usize,
        cfg: &CvaeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut params = ParamSet::new();
        params.insert(
            "embed.table",
            crate::nn::init::uniform(class_count, cfg.d_e, -0.05, 0.05, rng),
        );
        let [e1, e2] = cfg.enc_hidden;
        let [g1, g2, g3] = cfg.dec_hidden;
        params.add_linear_he("enc1", n + cfg.d_e, e1, rng);
        params.add_linear_he("enc2", e1, e2, rng);
        params.add_linear_xavier("enc3", e2, 2 * cfg.d, rng);
        params.add_linear_he("dec1", n + cfg.d + cfg.d_e, g1, rng);
        params.add_linear_he("dec2", g1, g2, rng);
        params.add_linear_he("dec3", g2, g3, rng);
        params.add_linear_xavier("dec4", g3, n, rng);
        CvaeModel {
            params,
            n,
            d: cfg.d,
            d_e: cfg.d_e,
            class_count,
        }
    }

    pub fn feature_count(&self) -> usize {
        self.n
    }

    pub fn latent_dim(&self) -> usize {
        self.d
    }

    pub fn embed_dim(&self) -> usize {
        self.d_e
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn check_classes(&self, classes0: &[usize]) -> Result<(), CvaeError> {
        if let Some(&bad) = classes0.iter().find(|&&c| c >= self.class_count) {
            return Err(CvaeError::Invalid(format!(
                "target class index {bad} out of {} classes",
                self.class_count
            )));
        }
        Ok(())
    }

    /// Build the full forward pass on a tape. `eps` supplies the
    /// reparameterization noise; `None` uses the mean directly (the
    /// deterministic inference path).
    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        one_minus_x: Var,
        classes0: &[usize],
        eps: Option<&Tensor2>,
    ) -> Result<CvaeForward, NnError> {
        let table = bound.var("embed.table");
        let embed = tape.gather_rows(table, classes0)?;

        let enc_in = tape.concat_cols(&[x, embed])?;
        let h = linear(tape, bound, "enc1", enc_in)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = linear(tape, bound, "enc2", h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let stats = linear(tape, bound, "enc3", h)?;
        let mu = tape.slice_cols(stats, 0, self.d)?;
        let logvar = tape.slice_cols(stats, self.d, 2 * self.d)?;

        let z = match eps {
            Some(e) => {
                let half = tape.affine(logvar, 0.5, 0.0)?;
                let sigma = tape.exp(half)?;
                let ev = tape.input(e.clone());
                let noise = tape.mul(sigma, ev)?;
                tape.add(mu, noise)?
            }
            None => mu,
        };

        let dec_in = tape.concat_cols(&[x, z, embed])?;
        let g = linear(tape, bound, "dec1", dec_in)?;
        let g = tape.leaky_relu(g, LEAKY_SLOPE)?;
        let g = linear(tape, bound, "dec2", g)?;
        let g = tape.leaky_relu(g, LEAKY_SLOPE)?;
        let g = linear(tape, bound, "dec3", g)?;
        let g = tape.leaky_relu(g, LEAKY_SLOPE)?;
        let g = linear(tape, bound, "dec4", g)?;
        let scores = tape.sigmoid(g)?;

        // x~ = x + (1 - x) * s: present features stay exactly 1
        let masked = tape.mul(one_minus_x, scores)?;
        let relaxed = tape.add(x, masked)?;

        Ok(CvaeForward {
            mu,
            logvar,
            scores,
            relaxed,
        })
    }

    /// Deterministic inference scores (z = mu). Rows of `x` are samples;
    /// `classes0` gives each row's 0-based target class.
    pub fn scores(&self, x: &Tensor2, classes0: &[usize]) -> Result<Tensor2, CvaeError> {
        if x.cols() != self.n {
            return Err(CvaeError::Invalid(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.n
            )));
        }
        if x.rows() != classes0.len() {
            return Err(CvaeError::Invalid("rows/classes mismatch".into()));
        }
        self.check_classes(classes0)?;
        const CHUNK: usize = 256;
        let mut out = Tensor2::zeros(x.rows(), self.n);
        let mut start = 0;
        while start < x.rows() {
            let end = (start + CHUNK).min(x.rows());
            let mut chunk = Tensor2::zeros(end - start, self.n);
            for i in start..end {
                chunk.row_mut(i - start).copy_from_slice(x.row(i));
            }
            let ones_minus = chunk.map(|v| 1.0 - v);
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let xv = tape.input(chunk);
            let mv = tape.input(ones_minus);
            let fwd = self.forward_on_tape(
                &mut tape,
                &bound,
                xv,
                mv,
                &classes0[start..end],
                None,
            )?;
            let vals = tape.value(fwd.scores);
            for i in start..end {
                out.row_mut(i).copy_from_slice(vals.row(i - start));
            }
            start = end;
        }
        Ok(out)
    }

    /// Deterministic (mu, log sigma^2) for inspection and tests.
    pub fn encode(
        &self,
        x: &Tensor2,
        classes0: &[usize],
    ) -> Result<(Tensor2, Tensor2), CvaeError> {
        if x.cols() != self.n || x.rows() != classes0.len() {
            return Err(CvaeError::Invalid("shape mismatch".into()));
        }
        self.check_classes(classes0)?;
        let ones_minus = x.map(|v| 1.0 - v);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.input(x.clone());
        let mv = tape.input(ones_minus);
        let fwd = self.forward_on_tape(&mut tape, &bound, xv, mv, classes0, None)?;
        Ok((
            tape.value(fwd.mu).clone(),
            tape.value(fwd.logvar).clone(),
        ))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CvaeError> {
        ParamContainer::save(path, "cvae", &self.params)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CvaeError> {
        let (module, params) = ParamContainer::load(path)?;
        if module != "cvae" {
            return Err(CvaeError::Invalid(format!(
                "container holds a '{module}' module, expected 'cvae'"
            )));
        }
        let missing = |n: &str| CvaeError::Invalid(format!("missing tensor {n}"));
        let table = params.get("embed.table").ok_or_else(|| missing("embed.table"))?;
        let (class_count, d_e) = table.shape();
        let enc3 = params.get("enc3.w").ok_or_else(|| missing("enc3.w"))?;
        let d = enc3.cols() / 2;
        let dec4 = params.get("dec4.w").ok_or_else(|| missing("dec4.w"))?;
        let n = dec4.cols();
        Ok(CvaeModel {
            params,
            n,
            d,
            d_e,
            class_count,
        })
    }
}

/// z = mu + exp(0.5 * logvar) * eps, elementwise.
pub fn reparameterize(mu: &Tensor2, logvar: &Tensor2, eps: &Tensor2) -> Tensor2 {
    assert!(mu.same_shape(logvar) && mu.same_shape(eps), "shape mismatch");
    let mut z = mu.clone();
    for ((zv, &lv), &ev) in z
        .as_mut_slice()
        .iter_mut()
        .zip(logvar.as_slice())
        .zip(eps.as_slice())
    {
        *zv += (0.5 * lv).exp() * ev;
    }
    z
}

/// x~ = x + (1 - x) * s.
pub fn relaxed_output(x: &Tensor2, scores: &Tensor2) -> Tensor2 {
    assert!(x.same_shape(scores), "shape mismatch");
    let mut out = x.clone();
    for (o, &s) in out.as_mut_slice().iter_mut().zip(scores.as_slice()) {
        *o += (1.0 - *o) * s;
    }
    out
}

/// Mean (over rows) of the per-row sum -1/2 * sum_i (1 + logvar - mu^2 -
/// sigma^2). Reference implementation for tests and reports.
pub fn loss_kl(mu: &Tensor2, logvar: &Tensor2) -> f64 {
    assert!(mu.same_shape(logvar), "shape mismatch");
    let mut total = 0.0;
    for (&m, &lv) in mu.as_slice().iter().zip(logvar.as_slice()) {
        total += 1.0 + lv - m * m - lv.exp();
    }
    -0.5 * total / mu.rows() as f64
}

/// Mean BCE between relaxed output and the reference sample over absent
/// features only, averaged across rows. Returns the loss and a flag set
/// when some row had no absent features (those rows contribute zero).
pub fn loss_reconstruction(
    relaxed: &Tensor2,
    x: &Tensor2,
    x_ref: &Tensor2,
) -> (f64, bool) {
    assert!(relaxed.same_shape(x) && x.same_shape(x_ref), "shape mismatch");
    const EPS: f64 = 1e-7;
    let mut total = 0.0;
    let mut saturated = false;
    for i in 0..x.rows() {
        let absent: Vec<usize> = (0..x.cols()).filter(|&j| x.at(i, j) == 0.0).collect();
        if absent.is_empty() {
            saturated = true;
            continue;
        }
        let mut row_loss = 0.0;
        for &j in &absent {
            let p = relaxed.at(i, j).clamp(EPS, 1.0 - EPS);
            let t = x_ref.at(i, j);
            row_loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        total += row_loss / absent.len() as f64;
    }
    (total / x.rows() as f64, saturated)
}

/// Mean (over rows) of the per-row added mass sum_j (x~_j - x_j).
pub fn loss_sparsity(relaxed: &Tensor2, x: &Tensor2) -> f64 {
    assert!(relaxed.same_shape(x), "shape mismatch");
    let diff: f64 = relaxed
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(r, v)| r - v)
        .sum();
    diff / x.rows() as f64
}

/// Select the k absent indices with the highest scores; ties prefer the
/// lowest feature index. Errors when fewer than k features are absent.
pub fn top_k_absent(
    x_bits: &[u8],
    scores: &[f64],
    k: usize,
) -> Result<Vec<usize>, CvaeError> {
    if x_bits.len() != scores.len() {
        return Err(CvaeError::Invalid("bits/scores length mismatch".into()));
    }
    let mut absent: Vec<usize> = (0..x_bits.len()).filter(|&j| x_bits[j] == 0).collect();
    if absent.len() < k {
        return Err(CvaeError::Invalid(format!(
            "k = {k} exceeds {} absent features",
            absent.len()
        )));
    }
    // stable sort by descending score keeps the lowest index first on ties
    absent.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    absent.truncate(k);
    absent.sort_unstable();
    Ok(absent)
}

/// Per-k evasion numbers against the frozen proxy.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProxyEvasion {
    pub k: usize,
    pub uer: f64,
    pub tsr: f64,
    pub cts: Option<f64>,
}

/// Attack every sample at each k in the objective and score the weighted
/// combination against the proxy. `malware_ids` index into `ds`; each must
/// have a target assignment. The proxy's last class is the malware class.
pub fn proxy_evasion_objective(
    model: &CvaeModel,
    proxy: &ProxyModel,
    ds: &LabeledDataset,
    malware_ids: &[usize],
    targets: &TargetAssignment,
    objective: &EvasionObjective,
) -> Result<(f64, Vec<ProxyEvasion>), CvaeError> {
    if malware_ids.is_empty() {
        return Err(CvaeError::Invalid("no malware samples to evaluate".into()));
    }
    let malware0 = proxy.class_count() - 1;
    let mut classes0 = Vec::with_capacity(malware_ids.len());
    for &id in malware_ids {
        let (c_star, _) = targets.get(id).ok_or_else(|| {
            CvaeError::Invalid(format!("sample {id} has no target assignment"))
        })?;
        classes0.push(c_star - 1);
    }
    let x = ds.batch(malware_ids);
    let scores = model.scores(&x, &classes0)?;

    let mut per_k = Vec::with_capacity(objective.ks.len());
    let mut total = 0.0;
    for &k in &objective.ks {
        let mut perturbed = x.clone();
        for (row, &id) in malware_ids.iter().enumerate() {
            let added = top_k_absent(ds.sample(id), scores.row(row), k)?;
            for j in added {
                perturbed.set(row, j, 1.0);
            }
        }
        let pred = proxy.predict(&perturbed)?;
        let m = malware_ids.len() as f64;
        let evaded = pred.iter().filter(|&&p| p != malware0).count() as f64;
        let hit = pred
            .iter()
            .zip(&classes0)
            .filter(|(&p, &c)| p != malware0 && p == c)
            .count() as f64;
        let uer = evaded / m;
        let tsr = hit / m;
        let cts = (evaded > 0.0).then(|| tsr / uer);
        total += objective.w_tsr * tsr + objective.w_uer * uer + objective.w_cts * cts.unwrap_or(0.0);
        per_k.push(ProxyEvasion { k, uer, tsr, cts });
    }
    Ok((total / objective.ks.len() as f64, per_k))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CvaeTrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_objective: f64,
    pub final_loss: f64,
    pub final_loss_terms: LossTerms,
    /// Some row had no absent features during reconstruction at least once.
    pub saw_saturated_rows: bool,
}

/// The four loss components, unweighted.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct LossTerms {
    pub reconstruction: f64,
    pub kl: f64,
    pub sparsity: f64,
    pub classification: f64,
}

/// Train on the malware rows of `train_idx`, early-stopping on the
/// proxy-scored evasion objective over the malware rows of `val_es_idx`.
/// Every malware sample involved must have a target assignment; reference
/// samples are drawn per step from the target class's rows in `train_idx`.
pub fn train_cvae(
    ds: &LabeledDataset,
    train_idx: &[usize],
    val_es_idx: &[usize],
    targets: &TargetAssignment,
    proxy: &ProxyModel,
    cfg: &CvaeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(CvaeModel, CvaeTrainReport), CvaeError> {
    let malware_class = ds.num_classes();
    let benign_count = malware_class - 1;
    if proxy.class_count() != malware_class {
        return Err(CvaeError::Invalid(format!(
            "proxy emits {} classes, dataset has {malware_class}",
            proxy.class_count()
        )));
    }

    let mal_train: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| ds.label(i) == malware_class)
        .collect();
    let mal_es: Vec<usize> = val_es_idx
        .iter()
        .copied()
        .filter(|&i| ds.label(i) == malware_class)
        .collect();
    if mal_train.is_empty() || mal_es.is_empty() {
        return Err(CvaeError::Invalid(
            "need malware samples in both the training and early-stop sets".into(),
        ));
    }

    // per benign class: training rows to draw reference samples from
    let mut ref_pools: Vec<Vec<usize>> = vec![Vec::new(); benign_count];
    for &i in train_idx {
        let label = ds.label(i);
        if label < malware_class {
            ref_pools[label - 1].push(i);
        }
    }
    let mut train_targets0 = Vec::with_capacity(mal_train.len());
    for &id in &mal_train {
        let (c_star, _) = targets.get(id).ok_or_else(|| {
            CvaeError::Invalid(format!("sample {id} has no target assignment"))
        })?;
        if ref_pools[c_star - 1].is_empty() {
            return Err(CvaeError::Invalid(format!(
                "target class {c_star} has no training samples to reference"
            )));
        }
        train_targets0.push(c_star - 1);
    }

    let mut model = CvaeModel::new(ds.n_features(), benign_count, cfg, rng);
    let mut adam = Adam::new(cfg.lr, 0.5, 0.999, Some(5.0));

    let mut best: Option<ParamSet> = None;
    let mut best_objective = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0usize;
    let mut epochs_run = 0;
    let mut final_loss = f64::NAN;
    let mut final_terms = LossTerms::default();
    let mut saw_saturated = false;

    let mut order: Vec<usize> = (0..mal_train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut term_sum = LossTerms::default();
        let mut batches = 0usize;
        for batch_pos in order.chunks(cfg.batch_size) {
            let b = batch_pos.len();
            let n = ds.n_features();
            let mut xb = Tensor2::zeros(b, n);
            let mut x_ref = Tensor2::zeros(b, n);
            let mut classes0 = Vec::with_capacity(b);
            let mut rec_weights = Tensor2::zeros(b, n);
            for (r, &pos) in batch_pos.iter().enumerate() {
                let id = mal_train[pos];
                let c0 = train_targets0[pos];
                classes0.push(c0);
                let bits = ds.sample(id);
                let mut absent = 0usize;
                for (j, &bit) in bits.iter().enumerate() {
                    if bit == 1 {
                        xb.set(r, j, 1.0);
                    } else {
                        absent += 1;
                    }
                }
                let pool = &ref_pools[c0];
                let ref_id = pool[rng.gen_range(0..pool.len())];
                for (j, &bit) in ds.sample(ref_id).iter().enumerate() {
                    if bit == 1 {
                        x_ref.set(r, j, 1.0);
                    }
                }
                if absent == 0 {
                    saw_saturated = true;
                } else {
                    // mean over this row's absent features, then over rows
                    let w = 1.0 / (absent as f64 * b as f64);
                    for (j, &bit) in bits.iter().enumerate() {
                        if bit == 0 {
                            rec_weights.set(r, j, w);
                        }
                    }
                }
            }
            let one_minus = xb.map(|v| 1.0 - v);
            let mut eps = Tensor2::zeros(b, cfg.d);
            for v in eps.as_mut_slice() {
                *v = normal_draw(rng);
            }

            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let proxy_bound = proxy.params().bind(&mut tape);
            let xv = tape.input(xb);
            let mv = tape.input(one_minus);
            let fwd = diverged_at(
                epoch,
                "forward pass",
                model.forward_on_tape(&mut tape, &bound, xv, mv, &classes0, Some(&eps)),
            )?;

            // reconstruction: weighted BCE sum equals the double mean
            let rec = diverged_at(
                epoch,
                "reconstruction loss",
                tape.masked_bce(fwd.relaxed, &x_ref, &rec_weights),
            )?;

            // KL: -1/2 mean over rows of sum(1 + logvar - mu^2 - sigma^2)
            let kl = diverged_at(epoch, "kl loss", (|| {
                let mu2 = tape.mul(fwd.mu, fwd.mu)?;
                let sigma2 = tape.exp(fwd.logvar)?;
                let t = tape.sub(fwd.logvar, mu2)?;
                let t = tape.sub(t, sigma2)?;
                let t = tape.affine(t, 1.0, 1.0)?;
                let t = tape.reduce_sum(t)?;
                tape.affine(t, -0.5 / b as f64, 0.0)
            })())?;

            // sparsity: mean over rows of the added mass
            let sp = diverged_at(epoch, "sparsity loss", (|| {
                let diff = tape.sub(fwd.relaxed, xv)?;
                let sp_sum = tape.reduce_sum(diff)?;
                tape.affine(sp_sum, 1.0 / b as f64, 0.0)
            })())?;

            // classification through the straight-through binarizer and
            // the frozen proxy (its gradients are computed and discarded)
            let cls = diverged_at(epoch, "classification loss", (|| {
                let xbin = tape.straight_through_binarize(fwd.relaxed, BINARIZE_THRESHOLD)?;
                // eval-mode forward never mutates the running stats; the
                // clone satisfies the &mut signature without touching the
                // frozen model
                let mut proxy_stats = proxy.stats_clone();
                let logits = ProxyModel::forward_on_tape(
                    &mut tape,
                    &proxy_bound,
                    &mut proxy_stats,
                    xbin,
                    0.0,
                    Mode::Eval,
                    None,
                )?;
                tape.softmax_cross_entropy(logits, &classes0)
            })())?;

            let loss = diverged_at(epoch, "total loss", (|| {
                let rec_w = tape.affine(rec, cfg.lambda_r, 0.0)?;
                let kl_w = tape.affine(kl, cfg.beta, 0.0)?;
                let sp_w = tape.affine(sp, cfg.lambda_s, 0.0)?;
                let cls_w = tape.affine(cls, cfg.lambda_c, 0.0)?;
                let partial = tape.add(rec_w, kl_w)?;
                let partial = tape.add(partial, sp_w)?;
                tape.add(partial, cls_w)
            })())?;

            let batch_terms = [
                ("reconstruction", tape.value(rec).item()),
                ("kl", tape.value(kl).item()),
                ("sparsity", tape.value(sp).item()),
                ("classification", tape.value(cls).item()),
                ("total", tape.value(loss).item()),
            ];
            for (term, value) in batch_terms {
                if !value.is_finite() {
                    return Err(CvaeError::Diverged {
                        epoch,
                        term: format!("the {term} term"),
                    });
                }
            }
            loss_sum += batch_terms[4].1;
            term_sum.reconstruction += batch_terms[0].1;
            term_sum.kl += batch_terms[1].1;
            term_sum.sparsity += batch_terms[2].1;
            term_sum.classification += batch_terms[3].1;
            batches += 1;

            let mut grads = diverged_at(epoch, "backward pass", tape.backward(loss))?;
            let mut grad_list = bound.grads_in_order(&mut grads);
            let mut tensors = model.params.tensors_mut();
            adam.step(&mut tensors, &mut grad_list);
        }
        let bf = batches as f64;
        final_loss = loss_sum / bf;
        final_terms = LossTerms {
            reconstruction: term_sum.reconstruction / bf,
            kl: term_sum.kl / bf,
            sparsity: term_sum.sparsity / bf,
            classification: term_sum.classification / bf,
        };

        let (objective, _) =
            proxy_evasion_objective(&model, proxy, ds, &mal_es, targets, &cfg.objective)?;
        if objective > best_objective {
            best_objective = objective;
            best_epoch = epoch;
            since_best = 0;
            best = Some(model.params.clone());
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    model.params = best.expect("at least one epoch ran");
    Ok((
        model,
        CvaeTrainReport {
            epochs_run,
            best_epoch,
            best_objective,
            final_loss,
            final_loss_terms: final_terms,
            saw_saturated_rows: saw_saturated,
        },
    ))
}

fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Hyperparameter search space bounds (log-uniform for the continuous
/// ranges) and the trial budget.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeSearchConfig {
    pub trials: usize,
    pub lambda_r: (f64, f64),
    pub beta: (f64, f64),
    pub lambda_s: (f64, f64),
    pub lambda_c: (f64, f64),
    pub d_choices: Vec<usize>,
    pub d_e_choices: Vec<usize>,
    pub lr: (f64, f64),
    /// Schedule template; sampled fields overwrite the rest.
    pub base: CvaeConfig,
}

impl Default for CvaeSearchConfig {
    fn default() -> Self {
        CvaeSearchConfig {
            trials: 30,
            lambda_r: (0.1, 10.0),
            beta: (1e-4, 1.0),
            lambda_s: (1e-4, 0.1),
            lambda_c: (0.1, 10.0),
            d_choices: vec![16, 32, 64],
            d_e_choices: vec![8, 16, 32],
            lr: (1e-4, 3e-3),
            base: CvaeConfig::default(),
        }
    }
}

fn log_uniform(range: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = range;
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// One tuning trial: the sampled config, its seed, and its score.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub config: CvaeConfig,
    pub objective: f64,
    pub per_k: Vec<ProxyEvasion>,
}

/// Seeded random search: sample `trials` configs, train each, and score
/// the tuning objective on the malware rows of `val_tune_idx`. Returns
/// the best config (ties keep the earliest trial) and the full log.
#[allow(clippy::too_many_arguments)]
pub fn tune_hyperparameters(
    ds: &LabeledDataset,
    train_idx: &[usize],
    val_tune_idx: &[usize],
    val_es_idx: &[usize],
    targets: &TargetAssignment,
    proxy: &ProxyModel,
    search: &CvaeSearchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(CvaeConfig, Vec<TrialRecord>), CvaeError> {
    if search.trials == 0 {
        return Err(CvaeError::Invalid("need at least one trial".into()));
    }
    let malware_class = ds.num_classes();
    let mal_tune: Vec<usize> = val_tune_idx
        .iter()
        .copied()
        .filter(|&i| ds.label(i) == malware_class)
        .collect();
    if mal_tune.is_empty() {
        return Err(CvaeError::Invalid(
            "no malware samples in the tuning set".into(),
        ));
    }

    let mut records = Vec::with_capacity(search.trials);
    let mut best: Option<(f64, CvaeConfig)> = None;
    for trial in 0..search.trials {
        let cfg = CvaeConfig {
            lambda_r: log_uniform(search.lambda_r, rng),
            beta: log_uniform(search.beta, rng),
            lambda_s: log_uniform(search.lambda_s, rng),
            lambda_c: log_uniform(search.lambda_c, rng),
            d: search.d_choices[rng.gen_range(0..search.d_choices.len())],
            d_e: search.d_e_choices[rng.gen_range(0..search.d_e_choices.len())],
            lr: log_uniform(search.lr, rng),
            ..search.base.clone()
        };
        let seed: u64 = rng.gen();
        let mut trial_rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, _) = train_cvae(
            ds,
            train_idx,
            val_es_idx,
            targets,
            proxy,
            &cfg,
            &mut trial_rng,
        )?;
        let (objective, per_k) = proxy_evasion_objective(
            &model,
            proxy,
            ds,
            &mal_tune,
            targets,
            &cfg.objective,
        )?;
        if best.as_ref().map_or(true, |(b, _)| objective > *b) {
            best = Some((objective, cfg.clone()));
        }
        records.push(TrialRecord {
            trial,
            seed,
            config: cfg,
            objective,
            per_k,
        });
    }
    Ok((best.expect("at least one trial").1, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ApiVocabulary;
    use crate::distill::ProxyConfig;
    use std::collections::BTreeMap;

    const TOL: f64 = 1e-9;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor2 {
        Tensor2::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    fn small_cfg() -> CvaeConfig {
        CvaeConfig {
            d: 4,
            d_e: 3,
            enc_hidden: [16, 8],
            dec_hidden: [16, 16, 16],
            batch_size: 8,
            max_epochs: 2,
            patience: 2,
            objective: EvasionObjective {
                ks: vec![2, 3],
                ..EvasionObjective::default()
            },
            ..CvaeConfig::default()
        }
    }

    /// 6-class toy dataset: five benign classes with distinct dense
    /// signatures, malware sparse so plenty of features stay absent.
    fn toy_dataset(n: usize, per_class: usize) -> LabeledDataset {
        let names: Vec<String> = (0..n).map(|j| format!("api_{j}")).collect();
        let vocab = ApiVocabulary::new(names).unwrap();
        let mut bits = Vec::new();
        let mut labels = Vec::new();
        for class in 1..=6usize {
            for s in 0..per_class {
                let mut row = vec![0u8; n];
                if class < 6 {
                    // benign class c populates its own block of features
                    let start = (class - 1) * n / 6;
                    for j in start..start + n / 4 {
                        row[j % n] = 1;
                    }
                    row[(start + s) % n] = 1;
                } else {
                    // malware keeps a small fixed signature
                    row[n - 1] = 1;
                    row[n - 2] = 1;
                    row[s % 3] = 1;
                }
                bits.extend_from_slice(&row);
                labels.push(class);
            }
        }
        LabeledDataset::from_parts(vocab, bits, labels).unwrap()
    }

    fn toy_targets(ds: &LabeledDataset) -> TargetAssignment {
        let mut entries = BTreeMap::new();
        for i in 0..ds.n_samples() {
            if ds.label(i) == 6 {
                // spread targets across benign classes
                entries.insert(i, (1 + i % 5, 0.9));
            }
        }
        TargetAssignment { entries }
    }

    fn tiny_proxy(n: usize, rng: &mut ChaCha8Rng) -> ProxyModel {
        ProxyModel::new(
            n,
            6,
            &ProxyConfig {
                hidden: [8, 8, 8],
                dropout: 0.0,
            },
            rng,
        )
    }

    #[test]
    fn kl_oracle_cases() {
        // -1/2 (1 + 0 - 1 - 1) = 1/2
        assert!((loss_kl(&t(1, 1, &[1.0]), &t(1, 1, &[0.0])) - 0.5).abs() < TOL);
        // standard normal matches the prior exactly
        assert!(loss_kl(&t(1, 1, &[0.0]), &t(1, 1, &[0.0])).abs() < TOL);
        // two dims: (1 + ln2 - 0.25 - 2) + (1 - 0.25 - 1) = ln2 - 1.5
        let expect = 0.75 - 0.5 * 2.0f64.ln();
        let got = loss_kl(
            &t(1, 2, &[0.5, -0.5]),
            &t(1, 2, &[2.0f64.ln(), 0.0]),
        );
        assert!((got - expect).abs() < TOL, "got {got}, expected {expect}");
        // batch mean over rows
        let got = loss_kl(&t(2, 1, &[1.0, 0.0]), &t(2, 1, &[0.0, 0.0]));
        assert!((got - 0.25).abs() < TOL);
    }

    #[test]
    fn kl_is_nonnegative_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mu = Tensor2::from_fn(3, 4, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
            let lv = Tensor2::from_fn(3, 4, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
            assert!(loss_kl(&mu, &lv) >= -TOL);
        }
    }

    #[test]
    fn reconstruction_oracle_cases() {
        // single absent feature, target present: -ln(1/2)
        let (loss, flag) = loss_reconstruction(
            &t(1, 2, &[1.0, 0.5]),
            &t(1, 2, &[1.0, 0.0]),
            &t(1, 2, &[1.0, 1.0]),
        );
        assert!((loss - std::f64::consts::LN_2).abs() < TOL);
        assert!(!flag);

        // present features are masked out: same loss with x~_0 changed
        let (loss2, _) = loss_reconstruction(
            &t(1, 2, &[0.2, 0.5]),
            &t(1, 2, &[1.0, 0.0]),
            &t(1, 2, &[1.0, 1.0]),
        );
        assert!((loss2 - std::f64::consts::LN_2).abs() < TOL);

        // a fully saturated row contributes zero and raises the flag
        let (loss3, flag3) = loss_reconstruction(
            &t(1, 2, &[1.0, 1.0]),
            &t(1, 2, &[1.0, 1.0]),
            &t(1, 2, &[0.0, 1.0]),
        );
        assert_eq!(loss3, 0.0);
        assert!(flag3);

        // two rows average their per-row means
        let row2 = 0.7f64.ln() + 0.6f64.ln();
        let expect = (std::f64::consts::LN_2 + (-row2) / 2.0) / 2.0;
        let (loss4, flag4) = loss_reconstruction(
            &t(2, 2, &[1.0, 0.5, 0.3, 0.6]),
            &t(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            &t(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        );
        assert!((loss4 - expect).abs() < TOL, "got {loss4}, expected {expect}");
        assert!(!flag4);
    }

    #[test]
    fn sparsity_oracle_cases() {
        let got = loss_sparsity(&t(1, 3, &[1.0, 0.9, 0.4]), &t(1, 3, &[1.0, 0.0, 0.0]));
        assert!((got - 1.3).abs() < TOL);
        // unchanged output costs nothing
        let x = t(1, 3, &[1.0, 0.0, 1.0]);
        assert!(loss_sparsity(&x, &x).abs() < TOL);
        // rows are averaged
        let got = loss_sparsity(
            &t(2, 3, &[1.0, 0.9, 0.4, 0.1, 0.2, 0.3]),
            &t(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        );
        assert!((got - 0.95).abs() < TOL);
    }

    #[test]
    fn relaxed_output_cases() {
        let out = relaxed_output(&t(1, 3, &[1.0, 0.0, 0.0]), &t(1, 3, &[0.2, 0.9, 0.4]));
        assert_eq!(out.as_slice(), &[1.0, 0.9, 0.4]);
        // all-absent input passes scores through
        let out = relaxed_output(&t(1, 2, &[0.0, 0.0]), &t(1, 2, &[0.3, 0.8]));
        assert_eq!(out.as_slice(), &[0.3, 0.8]);
        // all-present input ignores scores entirely
        let out = relaxed_output(&t(1, 2, &[1.0, 1.0]), &t(1, 2, &[0.3, 0.8]));
        assert_eq!(out.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn reparameterize_cases() {
        let mu = t(1, 2, &[0.4, -1.0]);
        // zero noise returns the mean
        let z = reparameterize(&mu, &t(1, 2, &[0.7, -0.3]), &t(1, 2, &[0.0, 0.0]));
        assert_eq!(z.as_slice(), mu.as_slice());
        // unit variance adds the noise directly
        let z = reparameterize(&mu, &t(1, 2, &[0.0, 0.0]), &t(1, 2, &[1.0, -1.0]));
        assert!((z.at(0, 0) - 1.4).abs() < TOL && (z.at(0, 1) + 2.0).abs() < TOL);
        // logvar = ln 4 scales noise by 2
        let z = reparameterize(&mu, &t(1, 2, &[4.0f64.ln(); 2]), &t(1, 2, &[1.0, 0.5]));
        assert!((z.at(0, 0) - 2.4).abs() < TOL && (z.at(0, 1) - 0.0).abs() < TOL);
    }

    #[test]
    fn reparameterize_monte_carlo_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 10_000;
        let mu = t(1, 1, &[0.3]);
        let logvar = t(1, 1, &[0.25f64.ln()]); // sigma = 1/2
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let eps = t(1, 1, &[normal_draw(&mut rng)]);
            let z = reparameterize(&mu, &logvar, &eps).item();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        // 3 sigma / sqrt(n) band around the true mean
        assert!((mean - 0.3).abs() < 3.0 * 0.5 / (n as f64).sqrt(), "mean {mean}");
        assert!((var.sqrt() - 0.5).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn top_k_prefers_low_index_on_ties_and_skips_present() {
        let x = [1u8, 0, 0, 0];
        let s = [0.99, 0.9, 0.9, 0.1];
        assert_eq!(top_k_absent(&x, &s, 1).unwrap(), vec![1]);
        assert_eq!(top_k_absent(&x, &s, 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_absent(&x, &s, 3).unwrap(), vec![1, 2, 3]);
        assert!(top_k_absent(&x, &s, 4).is_err());
        assert!(top_k_absent(&x, &s[..3], 1).is_err());
        assert_eq!(top_k_absent(&[0, 0], &[0.1, 0.9], 0).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn tape_losses_match_reference_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10;
        let cfg = small_cfg();
        let model = CvaeModel::new(n, 5, &cfg, &mut rng);
        let b = 3;
        let x = Tensor2::from_fn(b, n, |_, _| if rng.gen::<f64>() < 0.4 { 1.0 } else { 0.0 });
        let x_ref = Tensor2::from_fn(b, n, |_, _| if rng.gen::<f64>() < 0.4 { 1.0 } else { 0.0 });
        let eps = Tensor2::from_fn(b, cfg.d, |_, _| normal_draw(&mut rng));
        let classes0 = vec![0usize, 2, 4];

        let mut weights = Tensor2::zeros(b, n);
        for i in 0..b {
            let absent: Vec<usize> = (0..n).filter(|&j| x.at(i, j) == 0.0).collect();
            for &j in &absent {
                weights.set(i, j, 1.0 / (absent.len() as f64 * b as f64));
            }
        }

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let xv = tape.input(x.clone());
        let mv = tape.input(x.map(|v| 1.0 - v));
        let fwd = model
            .forward_on_tape(&mut tape, &bound, xv, mv, &classes0, Some(&eps))
            .unwrap();
        let rec = tape.masked_bce(fwd.relaxed, &x_ref, &weights).unwrap();

        let mu2 = tape.mul(fwd.mu, fwd.mu).unwrap();
        let sigma2 = tape.exp(fwd.logvar).unwrap();
        let t1 = tape.sub(fwd.logvar, mu2).unwrap();
        let t1 = tape.sub(t1, sigma2).unwrap();
        let t1 = tape.affine(t1, 1.0, 1.0).unwrap();
        let t1 = tape.reduce_sum(t1).unwrap();
        let kl = tape.affine(t1, -0.5 / b as f64, 0.0).unwrap();

        let diff = tape.sub(fwd.relaxed, xv).unwrap();
        let sp_sum = tape.reduce_sum(diff).unwrap();
        let sp = tape.affine(sp_sum, 1.0 / b as f64, 0.0).unwrap();

        let relaxed = tape.value(fwd.relaxed).clone();
        let mu = tape.value(fwd.mu).clone();
        let logvar = tape.value(fwd.logvar).clone();
        let scores = tape.value(fwd.scores).clone();

        // the tape's relaxed output obeys x~ = x + (1-x) s exactly
        let expect_relaxed = relaxed_output(&x, &scores);
        for (a, e) in relaxed.as_slice().iter().zip(expect_relaxed.as_slice()) {
            assert!((a - e).abs() < TOL);
        }
        // present features stay exactly one
        for i in 0..b {
            for j in 0..n {
                if x.at(i, j) == 1.0 {
                    assert_eq!(relaxed.at(i, j), 1.0);
                }
            }
        }

        let (rec_ref, _) = loss_reconstruction(&relaxed, &x, &x_ref);
        let kl_ref = loss_kl(&mu, &logvar);
        let sp_ref = loss_sparsity(&relaxed, &x);
        assert!((tape.value(rec).item() - rec_ref).abs() < 1e-7, "rec");
        assert!((tape.value(kl).item() - kl_ref).abs() < TOL, "kl");
        assert!((tape.value(sp).item() - sp_ref).abs() < TOL, "sp");
    }

    #[test]
    fn composite_equals_weighted_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let ds = toy_dataset(24, 6);
        let targets = toy_targets(&ds);
        let proxy = tiny_proxy(24, &mut rng);
        let all: Vec<usize> = (0..ds.n_samples()).collect();
        let cfg = CvaeConfig {
            lambda_r: 1.7,
            beta: 0.31,
            lambda_s: 0.013,
            lambda_c: 2.2,
            max_epochs: 1,
            patience: 1,
            batch_size: 64,
            ..small_cfg()
        };
        let (_, report) =
            train_cvae(&ds, &all, &all, &targets, &proxy, &cfg, &mut rng).unwrap();
        let lt = &report.final_loss_terms;
        let expect = cfg.lambda_r * lt.reconstruction
            + cfg.beta * lt.kl
            + cfg.lambda_s * lt.sparsity
            + cfg.lambda_c * lt.classification;
        assert!(
            (report.final_loss - expect).abs() < 1e-9,
            "total {} vs weighted sum {}",
            report.final_loss,
            expect
        );
    }

    #[test]
    fn additive_constraint_never_removes_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 18;
        let model = CvaeModel::new(n, 5, &small_cfg(), &mut rng);
        for trial in 0..20 {
            let x = Tensor2::from_fn(2, n, |_, _| if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 });
            let classes0 = vec![trial % 5, (trial + 2) % 5];
            let s = model.scores(&x, &classes0).unwrap();
            for v in s.as_slice() {
                assert!(*v >= 0.0 && *v <= 1.0, "score {v} outside [0,1]");
            }
            let relaxed = relaxed_output(&x, &s);
            for (r, xv) in relaxed.as_slice().iter().zip(x.as_slice()) {
                assert!(r >= xv, "relaxed output dropped below input");
            }
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 14;
        let model = CvaeModel::new(n, 5, &small_cfg(), &mut rng);
        let x = Tensor2::from_fn(3, n, |_, _| if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 });
        let classes0 = vec![0, 1, 4];
        let a = model.scores(&x, &classes0).unwrap();
        let b = model.scores(&x, &classes0).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn save_load_roundtrip_preserves_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 12;
        let model = CvaeModel::new(n, 5, &small_cfg(), &mut rng);
        let dir = std::env::temp_dir().join("cvae-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cvae.nnpc");
        model.save(&path).unwrap();
        let loaded = CvaeModel::load(&path).unwrap();
        assert_eq!(loaded.feature_count(), n);
        assert_eq!(loaded.latent_dim(), model.latent_dim());
        assert_eq!(loaded.embed_dim(), model.embed_dim());
        assert_eq!(loaded.class_count(), 5);
        let x = Tensor2::from_fn(2, n, |_, _| if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 });
        let a = model.scores(&x, &[1, 3]).unwrap();
        let b = loaded.scores(&x, &[1, 3]).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn training_leaves_proxy_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let ds = toy_dataset(24, 5);
        let targets = toy_targets(&ds);
        let proxy = tiny_proxy(24, &mut rng);
        let before = serde_json::to_vec(proxy.params()).unwrap();
        let all: Vec<usize> = (0..ds.n_samples()).collect();
        let cfg = small_cfg();
        let (model, report) =
            train_cvae(&ds, &all, &all, &targets, &proxy, &cfg, &mut rng).unwrap();
        let after = serde_json::to_vec(proxy.params()).unwrap();
        assert_eq!(before, after, "proxy parameters changed during training");
        assert!(report.epochs_run >= 1 && report.epochs_run <= cfg.max_epochs);
        assert!(report.best_epoch >= 1 && report.best_epoch <= report.epochs_run);
        assert!(report.final_loss.is_finite());
        assert!(report.best_objective.is_finite());
        // trained model still emits valid probability scores
        let x = ds.batch(&ds.class_indices(6));
        let s = model
            .scores(&x, &vec![0; ds.class_indices(6).len()])
            .unwrap();
        for v in s.as_slice() {
            assert!(*v >= 0.0 && *v <= 1.0);
        }
    }

    #[test]
    fn objective_runs_and_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let ds = toy_dataset(24, 5);
        let targets = toy_targets(&ds);
        let proxy = tiny_proxy(24, &mut rng);
        let model = CvaeModel::new(24, 5, &small_cfg(), &mut rng);
        let malware = ds.class_indices(6);
        let objective = EvasionObjective {
            ks: vec![2, 3],
            ..EvasionObjective::default()
        };
        let (score, per_k) =
            proxy_evasion_objective(&model, &proxy, &ds, &malware, &targets, &objective).unwrap();
        assert_eq!(per_k.len(), 2);
        assert!((0.0..=1.0).contains(&score));
        for pk in &per_k {
            assert!((0.0..=1.0).contains(&pk.uer));
            assert!((0.0..=1.0).contains(&pk.tsr));
            assert!(pk.tsr <= pk.uer + TOL);
            if let Some(cts) = pk.cts {
                assert!((cts * pk.uer - pk.tsr).abs() < 1e-12);
            } else {
                assert_eq!(pk.uer, 0.0);
            }
        }
    }

    #[test]
    fn tuning_returns_best_of_logged_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let ds = toy_dataset(24, 5);
        let targets = toy_targets(&ds);
        let proxy = tiny_proxy(24, &mut rng);
        let all: Vec<usize> = (0..ds.n_samples()).collect();
        let search = CvaeSearchConfig {
            trials: 2,
            base: CvaeConfig {
                max_epochs: 1,
                patience: 1,
                ..small_cfg()
            },
            ..CvaeSearchConfig::default()
        };
        let (best, records) =
            tune_hyperparameters(&ds, &all, &all, &all, &targets, &proxy, &search, &mut rng)
                .unwrap();
        assert_eq!(records.len(), 2);
        let best_score = records
            .iter()
            .map(|r| r.objective)
            .fold(f64::NEG_INFINITY, f64::max);
        let winner = records.iter().find(|r| r.objective == best_score).unwrap();
        assert_eq!(serde_json::to_string(&best).unwrap(), serde_json::to_string(&winner.config).unwrap());
        for r in &records {
            assert!(r.objective.is_finite());
            assert!(search.lambda_r.0 <= r.config.lambda_r && r.config.lambda_r <= search.lambda_r.1);
            assert!(search.d_choices.contains(&r.config.d));
            assert!(search.d_e_choices.contains(&r.config.d_e));
            // records serialize to JSON lines
            let line = serde_json::to_string(r).unwrap();
            assert!(!line.contains('\n'));
        }
    }

    #[test]
    fn longer_search_dominates_its_own_prefix() {
        let ds = toy_dataset(24, 5);
        let targets = toy_targets(&ds);
        let all: Vec<usize> = (0..ds.n_samples()).collect();
        let search_short = CvaeSearchConfig {
            trials: 2,
            base: CvaeConfig {
                max_epochs: 1,
                patience: 1,
                ..small_cfg()
            },
            ..CvaeSearchConfig::default()
        };
        let search_long = CvaeSearchConfig {
            trials: 4,
            ..search_short.clone()
        };
        // identical rng state for both searches
        let mut rng_a = ChaCha8Rng::seed_from_u64(71);
        let proxy = tiny_proxy(24, &mut rng_a);
        let mut rng_b = rng_a.clone();
        let (_, short) =
            tune_hyperparameters(&ds, &all, &all, &all, &targets, &proxy, &search_short, &mut rng_a)
                .unwrap();
        let (_, long) =
            tune_hyperparameters(&ds, &all, &all, &all, &targets, &proxy, &search_long, &mut rng_b)
                .unwrap();
        // the longer search replays the short one's trials first
        for (s, l) in short.iter().zip(&long) {
            assert_eq!(
                serde_json::to_string(s).unwrap(),
                serde_json::to_string(l).unwrap()
            );
        }
        let best = |rs: &[TrialRecord]| {
            rs.iter().map(|r| r.objective).fold(f64::NEG_INFINITY, f64::max)
        };
        assert!(best(&long) >= best(&short));
    }

    #[test]
    fn heavy_sparsity_weight_collapses_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let ds = toy_dataset(24, 6);
        let targets = toy_targets(&ds);
        let proxy = tiny_proxy(24, &mut rng);
        let all: Vec<usize> = (0..ds.n_samples()).collect();
        let malware = ds.class_indices(6);
        let targets0: Vec<usize> = malware.iter().map(|&i| targets.get(i).unwrap().0 - 1).collect();
        let cfg = CvaeConfig {
            lambda_r: 1e-6,
            beta: 1e-6,
            lambda_s: 10.0,
            lambda_c: 0.0,
            lr: 2e-2,
            max_epochs: 150,
            patience: 150,
            ..small_cfg()
        };
        let fresh = CvaeModel::new(24, 5, &cfg, &mut rng.clone());
        let x = ds.batch(&malware);
        let before = fresh.scores(&x, &targets0).unwrap();
        let mean_before: f64 =
            before.as_slice().iter().sum::<f64>() / before.as_slice().len() as f64;
        let (model, _) =
            train_cvae(&ds, &all, &all, &targets, &proxy, &cfg, &mut rng).unwrap();
        let after = model.scores(&x, &targets0).unwrap();
        let mean_after: f64 = after.as_slice().iter().sum::<f64>() / after.as_slice().len() as f64;
        assert!(
            mean_after < mean_before * 0.5,
            "sparsity-dominated training should push scores down: {mean_before} -> {mean_after}"
        );
    }

    #[test]
    fn divergence_names_the_offending_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let ds = toy_dataset(24, 5);
        let targets = toy_targets(&ds);
        let proxy = tiny_proxy(24, &mut rng);
        let all: Vec<usize> = (0..ds.n_samples()).collect();
        let cfg = CvaeConfig {
            lr: 1e9,
            max_epochs: 4,
            patience: 4,
            ..small_cfg()
        };
        match train_cvae(&ds, &all, &all, &targets, &proxy, &cfg, &mut rng) {
            Err(CvaeError::Diverged { epoch, term }) => {
                assert!((1..=4).contains(&epoch));
                assert!(!term.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
