//! The per-seed pipeline stages and the cross-seed report. Every stage
//! writes its artifacts under `out_dir/seed_<s>/<stage>/` together with a
//! manifest hashing everything it consumed and produced; reruns with
//! unchanged inputs are skipped (`status=cached`). Missing upstream
//! artifacts raise an error naming the subcommand that produces them.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use evade_core::attack::{self, AdversarialSample};
use evade_core::cvae::{self, CvaeConfig, CvaeModel};
use evade_core::data::{LabeledDataset, SplitManifest};
use evade_core::distill::{self, ProxyModel};
use evade_core::ensemble::{self, EnsembleModel, TargetAssignment};
use evade_core::eval::{self, MetricRecord};
use evade_core::nn::Tensor2;

use crate::cache;
use crate::config::RunConfig;

/// Subcommand names, used both for dispatch and in "run X first" errors.
pub const CMD_SPLIT: &str = "split";
pub const CMD_TRAIN_ENSEMBLE: &str = "train-ensemble";
pub const CMD_ASSIGN_TARGETS: &str = "assign-targets";
pub const CMD_DISTILL: &str = "distill";
pub const CMD_TUNE_CVAE: &str = "tune-cvae";
pub const CMD_TRAIN_CVAE: &str = "train-cvae";
pub const CMD_ATTACK: &str = "attack";
pub const CMD_EVALUATE: &str = "evaluate";

/// Everything a per-seed stage needs: the validated config, the run seed,
/// and the loaded dataset with its content hash.
pub struct StageCtx<'a> {
    pub cfg: &'a RunConfig,
    pub seed: u64,
    pub ds: &'a LabeledDataset,
    pub dataset_hash: &'a str,
}

impl<'a> StageCtx<'a> {
    pub fn seed_dir(&self) -> PathBuf {
        self.cfg.run.out_dir.join(format!("seed_{}", self.seed))
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.seed_dir().join(stage)
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        cache::stage_seed(self.seed, stage)
    }
}

/// Line-oriented key=value log, one line per stage event.
fn log_kv(stage: &str, seed: u64, status: &str, extra: &[(&str, String)]) {
    let mut line = format!("stage={stage} seed={seed} status={status}");
    for (k, v) in extra {
        line.push_str(&format!(" {k}={v}"));
    }
    println!("{line}");
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))
}

fn cfg_json<T: serde::Serialize>(value: &T) -> String {
    RunConfig::slice_json(value)
}

/// 1-based ids of samples labeled with the last (malware) class, restricted
/// to `within` and sorted ascending.
fn malware_ids_in(ds: &LabeledDataset, within: &[usize]) -> Vec<usize> {
    let malware = ds.num_classes();
    let mut ids: Vec<usize> = within
        .iter()
        .copied()
        .filter(|&i| ds.label(i) == malware)
        .collect();
    ids.sort_unstable();
    ids
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

pub fn split(ctx: &StageCtx) -> Result<()> {
    let stage = "split";
    let dir = ctx.dir(stage);
    let seed = ctx.stage_seed(stage);
    let inputs = cache::inputs_hash(&[
        ("stage", stage.to_string()),
        ("dataset", ctx.dataset_hash.to_string()),
        ("fractions", cfg_json(&ctx.cfg.split.fractions)),
        ("seed", seed.to_string()),
    ]);
    if cache::is_fresh(&dir, &inputs) {
        log_kv(stage, ctx.seed, "cached", &[]);
        return Ok(());
    }
    std::fs::create_dir_all(&dir)?;
    let manifest = evade_core::data::stratified_split(ctx.ds, ctx.cfg.split.fractions, seed)
        .context("stratified split failed")?;
    manifest.save(&dir.join("split.json"))?;
    cache::seal_stage(&dir, stage, ctx.seed, seed, &inputs, &["split.json"])?;
    log_kv(
        stage,
        ctx.seed,
        "done",
        &[
            ("train", manifest.train.len().to_string()),
            ("val_tune", manifest.val_tune.len().to_string()),
            ("val_es", manifest.val_es.len().to_string()),
            ("test", manifest.test.len().to_string()),
        ],
    );
    Ok(())
}

fn load_split(ctx: &StageCtx) -> Result<SplitManifest> {
    let path = ctx.dir("split").join("split.json");
    if !path.exists() {
        anyhow::bail!(
            "missing upstream artifact {}: run `{}` first",
            path.display(),
            CMD_SPLIT
        );
    }
    SplitManifest::load(&path).with_context(|| format!("loading {}", path.display()))
}

// ---------------------------------------------------------------------------
// train-ensemble
// ---------------------------------------------------------------------------

/// The detector covers every class; the guide covers only the benign ones
/// and supplies each malware sample's target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    Detector,
    Guide,
}

impl EnsembleKind {
    pub fn stage_name(self) -> &'static str {
        match self {
            EnsembleKind::Detector => "ensemble_a",
            EnsembleKind::Guide => "ensemble_b",
        }
    }

    fn class_set(self, num_classes: usize) -> Vec<usize> {
        match self {
            EnsembleKind::Detector => (1..=num_classes).collect(),
            EnsembleKind::Guide => (1..num_classes).collect(),
        }
    }
}

const ENSEMBLE_ARTIFACTS: [&str; 7] = [
    "model/forest_raw.json",
    "model/logistic_raw.nnpc",
    "model/encoder.nnpc",
    "model/forest_emb.json",
    "model/logistic_emb.nnpc",
    "model/manifest.json",
    "report.json",
];

pub fn train_ensemble(ctx: &StageCtx, kind: EnsembleKind) -> Result<()> {
    let stage = kind.stage_name();
    let dir = ctx.dir(stage);
    let seed = ctx.stage_seed(stage);
    let split_hash = cache::upstream_hash(&ctx.dir("split"), CMD_SPLIT)?;
    let inputs = cache::inputs_hash(&[
        ("stage", stage.to_string()),
        ("dataset", ctx.dataset_hash.to_string()),
        ("split", split_hash),
        ("encoder", cfg_json(&ctx.cfg.encoder)),
        ("forest", cfg_json(&ctx.cfg.forest)),
        ("logistic", cfg_json(&ctx.cfg.logistic)),
        ("seed", seed.to_string()),
    ]);
    if cache::is_fresh(&dir, &inputs) {
        log_kv(stage, ctx.seed, "cached", &[]);
        return Ok(());
    }
    std::fs::create_dir_all(dir.join("model"))?;
    let manifest = load_split(ctx)?;
    let class_set = kind.class_set(ctx.ds.num_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, report) = ensemble::build_ensemble(
        ctx.ds,
        &manifest.train,
        &manifest.val_tune,
        &class_set,
        &ctx.cfg.encoder,
        &ctx.cfg.forest,
        &ctx.cfg.logistic,
        &mut rng,
    )
    .with_context(|| format!("building {stage}"))?;
    model.save(&dir.join("model"))?;
    write_json(&dir.join("report.json"), &report)?;
    cache::seal_stage(&dir, stage, ctx.seed, seed, &inputs, &ENSEMBLE_ARTIFACTS)?;
    log_kv(
        stage,
        ctx.seed,
        "done",
        &[
            ("val_macro_f1", format!("{:.4}", report.ensemble_val_macro_f1)),
            (
                "member_val_acc",
                report
                    .member_val_accuracy
                    .iter()
                    .map(|a| format!("{a:.4}"))
                    .collect::<Vec<_>>()
                    .join("/"),
            ),
        ],
    );
    Ok(())
}

fn load_ensemble(ctx: &StageCtx, kind: EnsembleKind) -> Result<EnsembleModel> {
    let dir = ctx.dir(kind.stage_name()).join("model");
    if !dir.join("manifest.json").exists() {
        anyhow::bail!(
            "missing upstream artifact {}: run `{}` first",
            dir.join("manifest.json").display(),
            CMD_TRAIN_ENSEMBLE
        );
    }
    EnsembleModel::load(&dir).with_context(|| format!("loading {}", dir.display()))
}

// ---------------------------------------------------------------------------
// assign-targets
// ---------------------------------------------------------------------------

pub fn assign_targets(ctx: &StageCtx) -> Result<()> {
    let stage = "targets";
    let dir = ctx.dir(stage);
    let split_hash = cache::upstream_hash(&ctx.dir("split"), CMD_SPLIT)?;
    let guide_hash = cache::upstream_hash(&ctx.dir("ensemble_b"), CMD_TRAIN_ENSEMBLE)?;
    let inputs = cache::inputs_hash(&[
        ("stage", stage.to_string()),
        ("dataset", ctx.dataset_hash.to_string()),
        ("split", split_hash),
        ("guide", guide_hash),
    ]);
    if cache::is_fresh(&dir, &inputs) {
        log_kv(stage, ctx.seed, "cached", &[]);
        return Ok(());
    }
    std::fs::create_dir_all(&dir)?;
    let manifest = load_split(ctx)?;
    let guide = load_ensemble(ctx, EnsembleKind::Guide)?;
    // Targets are fixed once for the malware rows of every split, so later
    // stages (training, tuning, attacks) all see one consistent assignment.
    let mut malware_ids: Vec<usize> = Vec::new();
    for part in manifest.splits() {
        malware_ids.extend(malware_ids_in(ctx.ds, part));
    }
    malware_ids.sort_unstable();
    let assignment =
        ensemble::assign_targets(&guide, ctx.ds, &malware_ids, ctx.ds.num_classes())
            .context("assigning target classes")?;
    assignment.save_csv(&dir.join("targets.csv"))?;
    cache::seal_stage(&dir, stage, ctx.seed, 0, &inputs, &["targets.csv"])?;
    log_kv(
        stage,
        ctx.seed,
        "done",
        &[("assigned", assignment.entries.len().to_string())],
    );
    Ok(())
}

fn load_targets(ctx: &StageCtx) -> Result<TargetAssignment> {
    let path = ctx.dir("targets").join("targets.csv");
    if !path.exists() {
        anyhow::bail!(
            "missing upstream artifact {}: run `{}` first",
            path.display(),
            CMD_ASSIGN_TARGETS
        );
    }
    TargetAssignment::load_csv(&path).with_context(|| format!("loading {}", path.display()))
}

// ---------------------------------------------------------------------------
// distill
// ---------------------------------------------------------------------------

pub fn distill(ctx: &StageCtx) -> Result<()> {
    let stage = "distill";
    let dir = ctx.dir(stage);
    let seed = ctx.stage_seed(stage);
    let split_hash = cache::upstream_hash(&ctx.dir("split"), CMD_SPLIT)?;
    let detector_hash = cache::upstream_hash(&ctx.dir("ensemble_a"), CMD_TRAIN_ENSEMBLE)?;
    let inputs = cache::inputs_hash(&[
        ("stage", stage.to_string()),
        ("dataset", ctx.dataset_hash.to_string()),
        ("split", split_hash),
        ("detector", detector_hash.clone()),
        ("distill", cfg_json(&ctx.cfg.distill)),
        ("proxy", cfg_json(&ctx.cfg.proxy)),
        ("seed", seed.to_string()),
    ]);
    if cache::is_fresh(&dir, &inputs) {
        log_kv(stage, ctx.seed, "cached", &[]);
        return Ok(());
    }
    std::fs::create_dir_all(&dir)?;
    let manifest = load_split(ctx)?;
    let x_train = ctx.ds.batch(&manifest.train);
    let y_train = ctx.ds.labels0(&manifest.train);

    // Teacher distributions are cached keyed by the detector manifest hash,
    // so changing only the student schedule skips the ensemble forward pass.
    let q_path = dir.join("q_cache.nnpc");
    let mut teacher_cache = "miss";
    let q: Tensor2 = match distill::load_q_cache(&q_path) {
        Ok((key, cached))
            if key == detector_hash
                && cached.rows() == x_train.rows()
                && cached.cols() == ctx.ds.num_classes() =>
        {
            teacher_cache = "hit";
            cached
        }
        _ => {
            let detector = load_ensemble(ctx, EnsembleKind::Detector)?;
            let q = distill::collect_soft_targets(&detector, &x_train)
                .context("collecting teacher distributions")?;
            distill::save_q_cache(&q_path, &detector_hash, &q)?;
            q
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (proxy, report) = distill::train_proxy(
        &x_train,
        &y_train,
        &q,
        ctx.ds.num_classes(),
        &ctx.cfg.proxy,
        &ctx.cfg.distill,
        &mut rng,
    )
    .context("training the proxy")?;
    proxy.save(&dir.join("proxy.nnpc"))?;
    write_json(&dir.join("report.json"), &report)?;
    cache::seal_stage(
        &dir,
        stage,
        ctx.seed,
        seed,
        &inputs,
        &["q_cache.nnpc", "proxy.nnpc", "report.json"],
    )?;
    log_kv(
        stage,
        ctx.seed,
        "done",
        &[
            ("teacher_cache", teacher_cache.to_string()),
            ("epochs", report.epochs_run.to_string()),
            ("final_loss", format!("{:.6}", report.final_loss)),
        ],
    );
    Ok(())
}

fn load_proxy(ctx: &StageCtx) -> Result<ProxyModel> {
    let path = ctx.dir("distill").join("proxy.nnpc");
    if !path.exists() {
        anyhow::bail!(
            "missing upstream artifact {}: run `{}` first",
            path.display(),
            CMD_DISTILL
        );
    }
    ProxyModel::load(&path).with_context(|| format!("loading {}", path.display()))
}

// ---------------------------------------------------------------------------
// tune-cvae
// ---------------------------------------------------------------------------

pub fn tune_cvae(ctx: &StageCtx) -> Result<()> {
    let stage = "tune_cvae";
    let dir = ctx.dir(stage);
    let seed = ctx.stage_seed(stage);
    let split_hash = cache::upstream_hash(&ctx.dir("split"), CMD_SPLIT)?;
    let targets_hash = cache::upstream_hash(&ctx.dir("targets"), CMD_ASSIGN_TARGETS)?;
    let proxy_hash = cache::upstream_hash(&ctx.dir("distill"), CMD_DISTILL)?;
    let inputs = cache::inputs_hash(&[
        ("stage", stage.to_string()),
        ("dataset", ctx.dataset_hash.to_string()),
        ("split", split_hash),
        ("targets", targets_hash),
        ("proxy", proxy_hash),
        ("tuning", cfg_json(&ctx.cfg.tuning)),
        ("seed", seed.to_string()),
    ]);
    if cache::is_fresh(&dir, &inputs) {
        log_kv(stage, ctx.seed, "cached", &[]);
        return Ok(());
    }
    std::fs::create_dir_all(&dir)?;
    let manifest = load_split(ctx)?;
    let targets = load_targets(ctx)?;
    let proxy = load_proxy(ctx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (best, trials) = cvae::tune_hyperparameters(
        ctx.ds,
        &manifest.train,
        &manifest.val_tune,
        &manifest.val_es,
        &targets,
        &proxy,
        &ctx.cfg.tuning,
        &mut rng,
    )
    .context("hyperparameter search")?;

    let mut log = String::new();
    for t in &trials {
        log.push_str(&serde_json::to_string(t)?);
        log.push('\n');
    }
    std::fs::write(dir.join("trials.jsonl"), log)?;
    write_json(&dir.join("best_config.json"), &best)?;
    cache::seal_stage(
        &dir,
        stage,
        ctx.seed,
        seed,
        &inputs,
        &["trials.jsonl", "best_config.json"],
    )?;
    let best_objective = trials
        .iter()
        .map(|t| t.objective)
        .fold(f64::NEG_INFINITY, f64::max);
    log_kv(
        stage,
        ctx.seed,
        "done",
        &[
            ("trials", trials.len().to_string()),
            ("best_objective", format!("{best_objective:.4}")),
        ],
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-cvae
// ---------------------------------------------------------------------------

pub fn train_cvae(ctx: &StageCtx) -> Result<()> {
    let stage = "train_cvae";
    let dir = ctx.dir(stage);
    let seed = ctx.stage_seed(stage);
    let split_hash = cache::upstream_hash(&ctx.dir("split"), CMD_SPLIT)?;
    let targets_hash = cache::upstream_hash(&ctx.dir("targets"), CMD_ASSIGN_TARGETS)?;
    let proxy_hash = cache::upstream_hash(&ctx.dir("distill"), CMD_DISTILL)?;
    let tune_hash = cache::upstream_hash(&ctx.dir("tune_cvae"), CMD_TUNE_CVAE)?;
    let inputs = cache::inputs_hash(&[
        ("stage", stage.to_string()),
        ("dataset", ctx.dataset_hash.to_string()),
        ("split", split_hash),
        ("targets", targets_hash),
        ("proxy", proxy_hash),
        ("tuned", tune_hash),
        ("seed", seed.to_string()),
    ]);
    if cache::is_fresh(&dir, &inputs) {
        log_kv(stage, ctx.seed, "cached", &[]);
        return Ok(());
    }
    std::fs::create_dir_all(&dir)?;
    let best_path = ctx.dir("tune_cvae").join("best_config.json");
    if !best_path.exists() {
        anyhow::bail!(
            "missing upstream artifact {}: run `{}` first",
            best_path.display(),
            CMD_TUNE_CVAE
        );
    }
    let best: CvaeConfig = read_json(&best_path)?;
    let manifest = load_split(ctx)?;
    let targets = load_targets(ctx)?;
    let proxy = load_proxy(ctx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, report) = cvae::train_cvae(
        ctx.ds,
        &manifest.train,
        &manifest.val_es,
        &targets,
        &proxy,
        &best,
        &mut rng,
    )
    .context("generator training")?;
    model.save(&dir.join("cvae.nnpc"))?;
    write_json(&dir.join("train_report.json"), &report)?;
    write_json(&dir.join("config_used.json"), &best)?;
    cache::seal_stage(
        &dir,
        stage,
        ctx.seed,
        seed,
        &inputs,
        &["cvae.nnpc", "train_report.json", "config_used.json"],
    )?;
    log_kv(
        stage,
        ctx.seed,
        "done",
        &[
            ("epochs", report.epochs_run.to_string()),
            ("best_epoch", report.best_epoch.to_string()),
            ("best_objective", format!("{:.4}", report.best_objective)),
        ],
    );
    Ok(())
}

fn load_generator(ctx: &StageCtx) -> Result<CvaeModel> {
    let path = ctx.dir("train_cvae").join("cvae.nnpc");
    if !path.exists() {
        anyhow::bail!(
            "missing upstream artifact {}: run `{}` first",
            path.display(),
            CMD_TRAIN_CVAE
        );
    }
    CvaeModel::load(&path).with_context(|| format!("loading {}", path.display()))
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

/// Optional view filters. The full method x k grid is always computed and
/// cached so the record stream stays canonical; filters only select which
/// records land in `filtered_records.jsonl`.
#[derive(Debug, Clone, Default)]
pub struct AttackFilter {
    pub method: Option<attack::AttackMethod>,
    pub k: Option<usize>,
}

impl AttackFilter {
    fn is_some(&self) -> bool {
        self.method.is_some() || self.k.is_some()
    }

    fn keep(&self, r: &AdversarialSample) -> bool {
        self.method.is_none_or(|m| m == r.method) && self.k.is_none_or(|k| k == r.k)
    }
}

pub fn attack(ctx: &StageCtx, filter: &AttackFilter) -> Result<()> {
    let stage = "attack";
    let dir = ctx.dir(stage);
    let seed = ctx.stage_seed(stage);
    let split_hash = cache::upstream_hash(&ctx.dir("split"), CMD_SPLIT)?;
    let detector_hash = cache::upstream_hash(&ctx.dir("ensemble_a"), CMD_TRAIN_ENSEMBLE)?;
    let targets_hash = cache::upstream_hash(&ctx.dir("targets"), CMD_ASSIGN_TARGETS)?;
    let generator_hash = cache::upstream_hash(&ctx.dir("train_cvae"), CMD_TRAIN_CVAE)?;
    let inputs = cache::inputs_hash(&[
        ("stage", stage.to_string()),
        ("dataset", ctx.dataset_hash.to_string()),
        ("split", split_hash),
        ("detector", detector_hash),
        ("targets", targets_hash),
        ("generator", generator_hash),
        ("k_grid", cfg_json(&ctx.cfg.run.k_grid)),
        ("seed", seed.to_string()),
    ]);
    let fresh = cache::is_fresh(&dir, &inputs);
    if !fresh {
        std::fs::create_dir_all(&dir)?;
        let manifest = load_split(ctx)?;
        let detector = load_ensemble(ctx, EnsembleKind::Detector)?;
        let generator = load_generator(ctx)?;
        let targets = load_targets(ctx)?;
        let malware_test = malware_ids_in(ctx.ds, &manifest.test);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = attack::run_attack_grid(
            &detector,
            &generator,
            ctx.ds,
            &malware_test,
            &targets,
            &manifest.train,
            &ctx.cfg.run.k_grid,
            &mut rng,
        )
        .context("running the attack grid")?;
        attack::write_jsonl(&records, &dir.join("records.jsonl"))?;
        cache::seal_stage(&dir, stage, ctx.seed, seed, &inputs, &["records.jsonl"])?;
        log_kv(
            stage,
            ctx.seed,
            "done",
            &[
                ("samples", malware_test.len().to_string()),
                ("records", records.len().to_string()),
            ],
        );
    } else {
        log_kv(stage, ctx.seed, "cached", &[]);
    }

    if filter.is_some() {
        let records = attack::read_jsonl(&dir.join("records.jsonl"))?;
        let kept: Vec<AdversarialSample> =
            records.into_iter().filter(|r| filter.keep(r)).collect();
        attack::write_jsonl(&kept, &dir.join("filtered_records.jsonl"))?;
        log_kv(
            stage,
            ctx.seed,
            "filtered",
            &[
                (
                    "method",
                    filter
                        .method
                        .map_or("all".to_string(), |m| m.as_str().to_string()),
                ),
                ("k", filter.k.map_or("all".to_string(), |k| k.to_string())),
                ("records", kept.len().to_string()),
            ],
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Test-split diagnostics for one seed: the detector, its members, the
/// distilled proxy, and the embedding-vs-raw-bit centroid probe.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DetectorSummary {
    pub test_samples: usize,
    pub ensemble_test_accuracy: f64,
    pub ensemble_macro_f1: f64,
    /// Recall of the malware class (the last class).
    pub recall_malware: f64,
    /// Per 0-based class; `None` when absent from the test split.
    pub per_class_recall: Vec<Option<f64>>,
    /// Raw forest, raw logistic, embedded forest, embedded logistic.
    pub member_test_accuracy: [f64; ensemble::MEMBER_COUNT],
    /// Malware-class recall per member, same order as `member_test_accuracy`.
    #[serde(default)]
    pub member_recall_malware: [f64; ensemble::MEMBER_COUNT],
    pub proxy_test_accuracy: f64,
    /// |ensemble accuracy - proxy accuracy|.
    pub proxy_gap: f64,
    /// Nearest-centroid accuracy over encoder embeddings.
    pub centroid_embedding_accuracy: f64,
    /// Nearest-centroid accuracy over the raw bit vectors.
    pub centroid_rawbit_accuracy: f64,
}

pub fn evaluate(ctx: &StageCtx) -> Result<()> {
    let stage = "evaluate";
    let dir = ctx.dir(stage);
    let split_hash = cache::upstream_hash(&ctx.dir("split"), CMD_SPLIT)?;
    let detector_hash = cache::upstream_hash(&ctx.dir("ensemble_a"), CMD_TRAIN_ENSEMBLE)?;
    let proxy_hash = cache::upstream_hash(&ctx.dir("distill"), CMD_DISTILL)?;
    let attack_hash = cache::upstream_hash(&ctx.dir("attack"), CMD_ATTACK)?;
    let inputs = cache::inputs_hash(&[
        ("stage", stage.to_string()),
        ("dataset", ctx.dataset_hash.to_string()),
        ("split", split_hash),
        ("detector", detector_hash),
        ("proxy", proxy_hash),
        ("attack", attack_hash),
    ]);
    if cache::is_fresh(&dir, &inputs) {
        log_kv(stage, ctx.seed, "cached", &[]);
        return Ok(());
    }
    std::fs::create_dir_all(&dir)?;

    // Evasion metrics from the attack records.
    let records_path = ctx.dir("attack").join("records.jsonl");
    if !records_path.exists() {
        anyhow::bail!(
            "missing upstream artifact {}: run `{}` first",
            records_path.display(),
            CMD_ATTACK
        );
    }
    let adversarial = attack::read_jsonl(&records_path)?;
    let mut metric_records: Vec<MetricRecord> = Vec::new();
    for ((method, k), counts) in attack::tally(&adversarial, ctx.ds.num_classes()) {
        metric_records.push(MetricRecord::from_counts(
            method.as_str(),
            k,
            ctx.seed,
            counts,
        )?);
    }
    eval::write_records_csv(&metric_records, &dir.join("metrics.csv"))?;
    write_json(&dir.join("records.json"), &metric_records)?;

    // Detector-side diagnostics on the test split.
    let manifest = load_split(ctx)?;
    let detector = load_ensemble(ctx, EnsembleKind::Detector)?;
    let proxy = load_proxy(ctx)?;
    let x_train = ctx.ds.batch(&manifest.train);
    let y_train = ctx.ds.labels0(&manifest.train);
    let x_test = ctx.ds.batch(&manifest.test);
    let y_test = ctx.ds.labels0(&manifest.test);
    let class_count = ctx.ds.num_classes();

    let probs = detector.predict_proba(&x_test)?;
    let pred: Vec<usize> = ensemble::argmax_rows(&probs)
        .into_iter()
        .map(|p| detector.class_set[p] - 1)
        .collect();
    let metrics = eval::classification_metrics(&pred, &y_test, class_count)?;

    let member = detector.member_probs(&x_test)?;
    let mut member_test_accuracy = [0.0f64; ensemble::MEMBER_COUNT];
    let mut member_recall_malware = [0.0f64; ensemble::MEMBER_COUNT];
    for (m, probs_m) in member.iter().enumerate() {
        let pred_m: Vec<usize> = ensemble::argmax_rows(probs_m)
            .into_iter()
            .map(|p| detector.class_set[p] - 1)
            .collect();
        member_test_accuracy[m] = accuracy(&pred_m, &y_test);
        let metrics_m = eval::classification_metrics(&pred_m, &y_test, class_count)?;
        member_recall_malware[m] = metrics_m.per_class_recall[class_count - 1].unwrap_or(0.0);
    }

    let proxy_pred = proxy.predict(&x_test)?;
    let proxy_test_accuracy = accuracy(&proxy_pred, &y_test);

    let emb_train = detector.encoder.embed(&x_train)?;
    let emb_test = detector.encoder.embed(&x_test)?;
    let nc_emb = eval::nearest_centroid_predict(&emb_train, &y_train, &emb_test, class_count);
    let nc_raw = eval::nearest_centroid_predict(&x_train, &y_train, &x_test, class_count);

    let summary = DetectorSummary {
        test_samples: manifest.test.len(),
        ensemble_test_accuracy: metrics.accuracy,
        ensemble_macro_f1: metrics.macro_f1,
        recall_malware: metrics.per_class_recall[class_count - 1].unwrap_or(0.0),
        per_class_recall: metrics.per_class_recall.clone(),
        member_test_accuracy,
        member_recall_malware,
        proxy_test_accuracy,
        proxy_gap: (metrics.accuracy - proxy_test_accuracy).abs(),
        centroid_embedding_accuracy: accuracy(&nc_emb, &y_test),
        centroid_rawbit_accuracy: accuracy(&nc_raw, &y_test),
    };
    write_json(&dir.join("detector.json"), &summary)?;
    cache::seal_stage(
        &dir,
        stage,
        ctx.seed,
        0,
        &inputs,
        &["metrics.csv", "records.json", "detector.json"],
    )?;
    log_kv(
        stage,
        ctx.seed,
        "done",
        &[
            ("test_accuracy", format!("{:.4}", summary.ensemble_test_accuracy)),
            ("recall_malware", format!("{:.4}", summary.recall_malware)),
            ("proxy_gap", format!("{:.4}", summary.proxy_gap)),
            ("cells", metric_records.len().to_string()),
        ],
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report (cross-seed)
// ---------------------------------------------------------------------------

pub fn report(cfg: &RunConfig, ds: &LabeledDataset, dataset_hash: &str) -> Result<()> {
    let stage = "report";
    let dir = cfg.run.out_dir.join("report");
    let mut parts: Vec<(&str, String)> = vec![
        ("stage", stage.to_string()),
        ("dataset", dataset_hash.to_string()),
    ];
    let mut eval_hashes = Vec::new();
    for &seed in &cfg.run.seeds {
        let ctx = StageCtx {
            cfg,
            seed,
            ds,
            dataset_hash,
        };
        eval_hashes.push((seed, cache::upstream_hash(&ctx.dir("evaluate"), CMD_EVALUATE)?));
    }
    let joined = eval_hashes
        .iter()
        .map(|(s, h)| format!("{s}:{h}"))
        .collect::<Vec<_>>()
        .join(",");
    parts.push(("evaluations", joined));
    let inputs = cache::inputs_hash(&parts);
    if cache::is_fresh(&dir, &inputs) {
        log_kv(stage, 0, "cached", &[]);
        return Ok(());
    }
    std::fs::create_dir_all(&dir)?;

    let mut records: Vec<MetricRecord> = Vec::new();
    let mut detectors = serde_json::Map::new();
    for &seed in &cfg.run.seeds {
        let seed_dir = cfg.run.out_dir.join(format!("seed_{seed}"));
        let mut per_seed: Vec<MetricRecord> =
            read_json(&seed_dir.join("evaluate").join("records.json"))?;
        records.append(&mut per_seed);
        let detector: serde_json::Value =
            read_json(&seed_dir.join("evaluate").join("detector.json"))?;
        detectors.insert(seed.to_string(), detector);
    }
    let cells = eval::aggregate_runs(&records)?;
    eval::write_records_csv(&records, &dir.join("records.csv"))?;
    eval::write_aggregate_csv(&cells, &dir.join("aggregate.csv"))?;
    eval::write_plot_csv(&cells, &dir.join("plot.csv"))?;
    let summary = serde_json::json!({
        "seeds": cfg.run.seeds,
        "k_grid": cfg.run.k_grid,
        "aggregate": cells,
        "detectors": serde_json::Value::Object(detectors),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    cache::seal_stage(
        &dir,
        stage,
        0,
        0,
        &inputs,
        &["records.csv", "aggregate.csv", "plot.csv", "summary.json"],
    )?;
    log_kv(
        stage,
        0,
        "done",
        &[
            ("seeds", cfg.run.seeds.len().to_string()),
            ("cells", cells.len().to_string()),
        ],
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// export-embeddings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    ValTune,
    ValEs,
    Test,
    All,
}

impl SplitChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitChoice::Train => "train",
            SplitChoice::ValTune => "val-tune",
            SplitChoice::ValEs => "val-es",
            SplitChoice::Test => "test",
            SplitChoice::All => "all",
        }
    }

    fn indices(self, manifest: &SplitManifest) -> Vec<usize> {
        let mut ids: Vec<usize> = match self {
            SplitChoice::Train => manifest.train.clone(),
            SplitChoice::ValTune => manifest.val_tune.clone(),
            SplitChoice::ValEs => manifest.val_es.clone(),
            SplitChoice::Test => manifest.test.clone(),
            SplitChoice::All => manifest.splits().concat(),
        };
        ids.sort_unstable();
        ids
    }
}

pub fn export_embeddings(ctx: &StageCtx, choice: SplitChoice) -> Result<()> {
    let stage = "embeddings";
    let dir = ctx.dir(stage);
    let split_hash = cache::upstream_hash(&ctx.dir("split"), CMD_SPLIT)?;
    let detector_hash = cache::upstream_hash(&ctx.dir("ensemble_a"), CMD_TRAIN_ENSEMBLE)?;
    let inputs = cache::inputs_hash(&[
        ("stage", stage.to_string()),
        ("dataset", ctx.dataset_hash.to_string()),
        ("split", split_hash),
        ("detector", detector_hash),
        ("choice", choice.as_str().to_string()),
    ]);
    if cache::is_fresh(&dir, &inputs) {
        log_kv(stage, ctx.seed, "cached", &[]);
        return Ok(());
    }
    std::fs::create_dir_all(&dir)?;
    let manifest = load_split(ctx)?;
    let detector = load_ensemble(ctx, EnsembleKind::Detector)?;
    let ids = choice.indices(&manifest);
    let x = ctx.ds.batch(&ids);
    let emb = detector.encoder.embed(&x)?;
    let labels: Vec<usize> = ids.iter().map(|&i| ctx.ds.label(i)).collect();
    evade_core::representation::write_embeddings_csv(
        &ids,
        &emb,
        &labels,
        &dir.join("embeddings.csv"),
    )?;
    cache::seal_stage(&dir, stage, ctx.seed, 0, &inputs, &["embeddings.csv"])?;
    log_kv(
        stage,
        ctx.seed,
        "done",
        &[
            ("choice", choice.as_str().to_string()),
            ("rows", ids.len().to_string()),
        ],
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// full pipeline
// ---------------------------------------------------------------------------

/// All stages for one seed, in dependency order.
pub fn run_seed(ctx: &StageCtx) -> Result<()> {
    split(ctx)?;
    train_ensemble(ctx, EnsembleKind::Detector)?;
    train_ensemble(ctx, EnsembleKind::Guide)?;
    assign_targets(ctx)?;
    distill(ctx)?;
    tune_cvae(ctx)?;
    train_cvae(ctx)?;
    attack(ctx, &AttackFilter::default())?;
    evaluate(ctx)?;
    Ok(())
}

/// Every seed plus the cross-seed report.
pub fn run_all(cfg: &RunConfig, ds: &LabeledDataset, dataset_hash: &str) -> Result<()> {
    for &seed in &cfg.run.seeds {
        let ctx = StageCtx {
            cfg,
            seed,
            ds,
            dataset_hash,
        };
        run_seed(&ctx)?;
    }
    report(cfg, ds, dataset_hash)
}
