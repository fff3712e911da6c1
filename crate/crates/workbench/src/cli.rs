//! Command-line front end: one JSON config file describes one reproducible
//! experiment, and the commands (`gen-data`, `train`, `evaluate`, `report`)
//! turn it into artifacts. Every artifact embeds the config digest so a
//! report can always be traced back to the exact configuration — and seeds —
//! that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackBudget, ThreatModel};
use crate::defenses::{build_defense_with, DefenseResources, NegativeBank};
use crate::error::{Error, Result};
use crate::harness::{
    compile_report, measure_wall_overhead, render_markdown, run_plan, EvaluationContext,
    EvaluationPlan, EvaluationReport,
};
use crate::models::{
    clean_accuracy, data, fit_pca_embedding, init_network, load_checkpoint, save_checkpoint,
    train_adversarial, train_discriminator, train_score_network, train_standard, Activation,
    Classifier, Dataset, DatasetKind, DiscriminatorMode, LinearEmbedding, ScoreNetwork,
    TrainConfig,
};
use crate::stream_seed;
use crate::tensor::Tensor;

/// How a failed command should be reported to the shell. Exit code 2 is a
/// configuration or usage problem, 3 a missing or mismatched artifact, 4 an
/// attack that failed mid-evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Checkpoint,
    Attack,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Checkpoint => 3,
            FailureKind::Attack => 4,
        }
    }
}

/// A command failure: the underlying error plus its exit-code class.
#[derive(Debug)]
pub struct CliError {
    pub kind: FailureKind,
    pub error: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(error: Error) -> CliError {
    CliError { kind: FailureKind::Config, error }
}

fn checkpoint_err(error: Error) -> CliError {
    CliError { kind: FailureKind::Checkpoint, error }
}

fn attack_err(error: Error) -> CliError {
    CliError { kind: FailureKind::Attack, error }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// One of `gaussians2d`, `rings2d`, `gridpatterns64`.
    pub kind: String,
    pub size: usize,
    pub seed: u64,
}

fn default_activation() -> String {
    "relu".to_string()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden-layer widths; the input and output widths come from the data.
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default)]
    pub train: TrainSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub inner_attack_steps: usize,
    /// Train the classifier adversarially at the configured threat.
    #[serde(default = "default_true")]
    pub adversarial: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let base = TrainConfig::quick(0);
        TrainSpec {
            epochs: base.epochs,
            batch_size: base.batch_size,
            learning_rate: base.learning_rate,
            inner_attack_steps: base.inner_attack_steps,
            adversarial: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreatSpec {
    /// `linf` or `l2`.
    pub p: String,
    pub eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSpec {
    pub kind: String,
    /// Numeric overrides for the defense's documented defaults, by key.
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

fn default_stages() -> Vec<String> {
    ["transfer", "black-box", "white-box", "bpda", "randomness"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_iterations() -> usize {
    20
}

fn default_restarts() -> usize {
    2
}

fn default_n_eot() -> usize {
    4
}

fn default_eval_subset() -> usize {
    40
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    #[serde(default = "default_stages")]
    pub stages: Vec<String>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_n_eot")]
    pub n_eot: usize,
    /// Number of examples the evaluation runs on.
    #[serde(default = "default_eval_subset")]
    pub eval_subset: usize,
}

impl Default for PlanSpec {
    fn default() -> Self {
        PlanSpec {
            stages: default_stages(),
            iterations: default_iterations(),
            restarts: default_restarts(),
            n_eot: default_n_eot(),
            eval_subset: default_eval_subset(),
        }
    }
}

/// One reproducible experiment: data, model, threat, defense, plan, output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub threat: ThreatSpec,
    pub defense: DefenseSpec,
    #[serde(default)]
    pub plan: PlanSpec,
    pub output_dir: PathBuf,
    /// Base seed for everything not covered by the dataset seed: training,
    /// attacks, and the defense's pinned randomness.
    pub seed: u64,
}

impl RunConfig {
    pub fn threat_model(&self) -> Result<ThreatModel> {
        match self.threat.p.as_str() {
            "linf" => Ok(ThreatModel::linf(self.threat.eps)),
            "l2" => Ok(ThreatModel::l2(self.threat.eps)),
            other => Err(Error::invalid(format!("unknown norm '{other}' (use linf or l2)"))),
        }
    }

    fn activation(&self) -> Result<Activation> {
        match self.model.activation.as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }

    fn dataset_kind(&self) -> Result<DatasetKind> {
        DatasetKind::parse(&self.dataset.kind)
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.model.train.epochs,
            batch_size: self.model.train.batch_size,
            learning_rate: self.model.train.learning_rate,
            seed,
            inner_attack_steps: self.model.train.inner_attack_steps,
        }
    }

    fn override_or(&self, key: &str, default: f64) -> f64 {
        self.defense.overrides.get(key).copied().unwrap_or(default)
    }
}

/// Parses and validates a config file; any problem is a config failure.
pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(e.into()))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| config_err(e.into()))?;
    cfg.threat_model().map_err(config_err)?;
    cfg.activation().map_err(config_err)?;
    cfg.dataset_kind().map_err(config_err)?;
    for stage in &cfg.plan.stages {
        if !matches!(
            stage.as_str(),
            "transfer" | "black-box" | "white-box" | "bpda" | "randomness"
        ) {
            return Err(config_err(Error::invalid(format!("unknown stage '{stage}'"))));
        }
    }
    Ok(cfg)
}

/// Content hash of the effective configuration: SHA-256 over the canonical
/// re-serialization, so formatting and key order in the file don't matter.
pub fn config_digest(cfg: &RunConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    format!("{:x}", hasher.finalize())
}

/// Output directory, with the `WORKBENCH_OUT` environment variable taking
/// precedence over the config.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os("WORKBENCH_OUT") {
        Some(dir) => PathBuf::from(dir),
        None => cfg.output_dir.clone(),
    }
}

fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.bin")
}

fn dataset_meta_path(out: &Path) -> PathBuf {
    out.join("dataset.meta.json")
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    config_digest: String,
    kind: String,
    size: usize,
    seed: u64,
}

/// Generates the configured dataset and writes `dataset.bin` plus a JSON
/// sidecar carrying the config digest (the binary format has no room for it).
pub fn cmd_gen_data(cfg: &RunConfig) -> CliResult<PathBuf> {
    let kind = cfg.dataset_kind().map_err(config_err)?;
    let out = output_dir(cfg);
    std::fs::create_dir_all(&out).map_err(|e| checkpoint_err(e.into()))?;
    let ds = data::generate(kind, cfg.dataset.size, cfg.dataset.seed);
    let path = dataset_path(&out);
    data::save(&ds, &path).map_err(checkpoint_err)?;
    let meta = DatasetMeta {
        config_digest: config_digest(cfg),
        kind: kind.name().to_string(),
        size: cfg.dataset.size,
        seed: cfg.dataset.seed,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| checkpoint_err(e.into()))?;
    std::fs::write(dataset_meta_path(&out), json).map_err(|e| checkpoint_err(e.into()))?;
    Ok(path)
}

fn load_dataset(cfg: &RunConfig, digest: &str, force: bool) -> CliResult<Dataset> {
    let out = output_dir(cfg);
    let path = dataset_path(&out);
    if !path.exists() {
        return Err(checkpoint_err(Error::invalid(format!(
            "dataset {} not found; run gen-data first",
            path.display()
        ))));
    }
    let ds = data::load(&path).map_err(checkpoint_err)?;
    let meta_text =
        std::fs::read_to_string(dataset_meta_path(&out)).map_err(|e| checkpoint_err(e.into()))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| checkpoint_err(e.into()))?;
    if meta.config_digest != digest && !force {
        return Err(checkpoint_err(Error::DigestMismatch {
            expected: digest.to_string(),
            found: meta.config_digest,
        }));
    }
    Ok(ds)
}

fn save_model<T: Serialize>(dir: &Path, name: &str, model: &T, digest: &str) -> CliResult<()> {
    save_checkpoint(&dir.join(name), model, digest).map_err(checkpoint_err)
}

fn load_model<T: serde::de::DeserializeOwned>(
    dir: &Path,
    name: &str,
    digest: &str,
    force: bool,
) -> CliResult<T> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(checkpoint_err(Error::invalid(format!(
            "checkpoint {} not found; run train first",
            path.display()
        ))));
    }
    let ck = load_checkpoint::<T>(&path).map_err(checkpoint_err)?;
    if ck.config_digest != digest && !force {
        return Err(checkpoint_err(Error::DigestMismatch {
            expected: digest.to_string(),
            found: ck.config_digest,
        }));
    }
    Ok(ck.model)
}

/// Trains the classifier plus whatever resources the configured defense
/// needs, writing one checkpoint file per model and a training log.
pub fn cmd_train(cfg: &RunConfig, force: bool) -> CliResult<()> {
    let digest = config_digest(cfg);
    let ds = load_dataset(cfg, &digest, force)?;
    let threat = cfg.threat_model().map_err(config_err)?;
    let activation = cfg.activation().map_err(config_err)?;
    let out = output_dir(cfg);
    let dir = checkpoint_dir(&out);
    std::fs::create_dir_all(&dir).map_err(|e| checkpoint_err(e.into()))?;
    let mut log = String::new();

    let mut widths = vec![ds.dim];
    widths.extend_from_slice(&cfg.model.hidden);
    let init = init_network(&widths, ds.num_classes, cfg.seed, activation).map_err(config_err)?;
    let train_cfg = cfg.train_config(cfg.seed);
    let classifier = if cfg.model.train.adversarial {
        train_adversarial(&init, &ds, &threat, &train_cfg).map_err(config_err)?
    } else {
        train_standard(&init, &ds, &train_cfg).map_err(config_err)?
    };
    let acc = clean_accuracy(&classifier, &ds);
    log.push_str(&format!("classifier clean accuracy: {acc:.4}\n"));
    save_model(&dir, "classifier.json", &classifier, &digest)?;

    match cfg.defense.kind.as_str() {
        "aid" | "imf" => {
            let mode = if cfg.defense.kind == "aid" {
                DiscriminatorMode::Aid
            } else {
                DiscriminatorMode::Atld
            };
            let trained = train_discriminator(
                &classifier,
                &ds,
                &threat,
                mode,
                &cfg.model.hidden,
                &cfg.train_config(stream_seed(cfg.seed, 0xD1)),
            )
            .map_err(config_err)?;
            log.push_str(&format!(
                "discriminator heldout accuracy: {:.4}\n",
                trained.heldout_accuracy
            ));
            save_model(&dir, "discriminator.json", &trained.disc, &digest)?;
        }
        "adp" => {
            let sigma = cfg.override_or("sigma", 0.1);
            let trained = train_score_network(
                &ds,
                sigma,
                &cfg.model.hidden,
                &cfg.train_config(stream_seed(cfg.seed, 0xD2)),
            )
            .map_err(config_err)?;
            log.push_str(&format!(
                "score network heldout mse: initial {:.6}, final {:.6}\n",
                trained.initial_heldout, trained.final_heldout
            ));
            save_model(&dir, "score.json", &trained.score, &digest)?;
        }
        "clc" => {
            let rank = cfg.override_or("rank", 2.0).round() as usize;
            let embeddings = fit_layer_embeddings(&classifier, &ds, rank).map_err(config_err)?;
            log.push_str(&format!(
                "fitted {} layer embeddings at rank {rank}\n",
                embeddings.len()
            ));
            save_model(&dir, "embeddings.json", &embeddings, &digest)?;
        }
        "contrastive" => {
            let enc_init =
                init_network(&widths, ds.num_classes, stream_seed(cfg.seed, 0xD3), activation)
                    .map_err(config_err)?;
            let encoder =
                train_standard(&enc_init, &ds, &cfg.train_config(stream_seed(cfg.seed, 0xD3)))
                    .map_err(config_err)?;
            log.push_str(&format!(
                "encoder clean accuracy: {:.4}\n",
                clean_accuracy(&encoder, &ds)
            ));
            save_model(&dir, "encoder.json", &encoder, &digest)?;
            let bank_size = cfg.override_or("bank_size", 16.0).round() as usize;
            let kind = cfg.dataset_kind().map_err(config_err)?;
            let bank =
                data::generate(kind, bank_size, stream_seed(cfg.dataset.seed, 0xBA)).inputs;
            log.push_str(&format!("negative bank: {} examples\n", bank.len()));
            save_model(&dir, "bank.json", &bank, &digest)?;
        }
        _ => {}
    }

    std::fs::write(out.join("train.log"), log).map_err(|e| checkpoint_err(e.into()))?;
    Ok(())
}

/// Fits one linear embedding per hidden layer from the model's activations
/// on the training set.
fn fit_layer_embeddings(
    model: &Classifier,
    ds: &Dataset,
    rank: usize,
) -> Result<Vec<LinearEmbedding>> {
    let num_hidden = model.num_layers() - 1;
    let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); num_hidden];
    for (x, _) in ds.iter() {
        let (_, taps) = model.forward_taps(x);
        for (layer, tap) in taps.into_iter().enumerate() {
            per_layer[layer].push(tap);
        }
    }
    per_layer.into_iter().map(|acts| fit_pca_embedding(&acts, rank)).collect()
}

fn load_resources(
    cfg: &RunConfig,
    dir: &Path,
    digest: &str,
    force: bool,
) -> CliResult<DefenseResources> {
    let mut resources = DefenseResources::default();
    match cfg.defense.kind.as_str() {
        "aid" => {
            resources.aid_discriminator = Some(load_model(dir, "discriminator.json", digest, force)?)
        }
        "imf" => {
            resources.atld_discriminator =
                Some(load_model(dir, "discriminator.json", digest, force)?)
        }
        "adp" => {
            resources.score = Some(load_model::<ScoreNetwork>(dir, "score.json", digest, force)?)
        }
        "clc" => {
            resources.embeddings =
                Some(load_model::<Vec<LinearEmbedding>>(dir, "embeddings.json", digest, force)?)
        }
        "contrastive" => {
            resources.encoder = Some(load_model(dir, "encoder.json", digest, force)?);
            let bank: Vec<Tensor> = load_model(dir, "bank.json", digest, force)?;
            resources.bank = Some(NegativeBank::fixed(bank).map_err(checkpoint_err)?);
        }
        _ => {}
    }
    Ok(resources)
}

/// Wall-clock ratio and timestamps live here, outside `report.json`, so the
/// report itself is byte-identical across reruns.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_digest: String,
    pub wall_overhead_ratio: f64,
    pub finished_unix_secs: u64,
}

/// Runs the evaluation plan end to end and writes `report.json`,
/// `report.md`, and `metadata.json`.
pub fn cmd_evaluate(cfg: &RunConfig, force: bool) -> CliResult<EvaluationReport> {
    let digest = config_digest(cfg);
    let ds = load_dataset(cfg, &digest, force)?;
    let threat = cfg.threat_model().map_err(config_err)?;
    let out = output_dir(cfg);
    let dir = checkpoint_dir(&out);
    let classifier: Classifier = load_model(&dir, "classifier.json", &digest, force)?;
    if classifier.input_dim() != ds.dim || classifier.num_classes != ds.num_classes {
        return Err(checkpoint_err(Error::invalid(
            "classifier checkpoint does not match the dataset shape",
        )));
    }
    let resources = load_resources(cfg, &dir, &digest, force)?;

    let eval_set = ds.subset(cfg.plan.eval_subset.min(ds.len()));
    let ctx = EvaluationContext {
        model: &classifier,
        defense_name: &cfg.defense.kind,
        resources: &resources,
        threat,
        defense_seed: stream_seed(cfg.seed, 0xD5),
        overrides: cfg.defense.overrides.clone(),
    };
    // Reject unknown defenses and bad overrides as config errors before any
    // attack runs.
    build_defense_with(&cfg.defense.kind, &threat, &resources, &cfg.defense.overrides)
        .map_err(config_err)?;

    let enabled = |name: &str| cfg.plan.stages.iter().any(|s| s == name);
    let plan = EvaluationPlan {
        enable_transfer: enabled("transfer"),
        enable_blackbox: enabled("black-box"),
        enable_whitebox: enabled("white-box"),
        enable_bpda: enabled("bpda"),
        enable_randomness: enabled("randomness"),
        budget: AttackBudget::new(cfg.plan.iterations, cfg.plan.restarts, cfg.seed),
        n_eot: cfg.plan.n_eot,
        custom: None,
    };
    let run = run_plan(&ctx, &eval_set, &plan).map_err(attack_err)?;
    let report =
        compile_report(&cfg.defense.kind, &threat, &run, cfg.seed, &digest).map_err(attack_err)?;

    let json = serde_json::to_string_pretty(&report).map_err(|e| checkpoint_err(e.into()))?;
    std::fs::write(out.join("report.json"), json).map_err(|e| checkpoint_err(e.into()))?;
    std::fs::write(out.join("report.md"), render_markdown(&report))
        .map_err(|e| checkpoint_err(e.into()))?;

    let defended = ctx.eval_wrapper().map_err(attack_err)?;
    let wall = measure_wall_overhead(&classifier, &defended, &eval_set, cfg.seed)
        .map_err(attack_err)?;
    let meta = RunMetadata {
        config_digest: digest,
        wall_overhead_ratio: wall,
        finished_unix_secs: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let meta_json = serde_json::to_string_pretty(&meta).map_err(|e| checkpoint_err(e.into()))?;
    std::fs::write(out.join("metadata.json"), meta_json).map_err(|e| checkpoint_err(e.into()))?;
    Ok(report)
}

/// Re-renders `report.md` from an existing `report.json`.
pub fn cmd_report(cfg: &RunConfig) -> CliResult<()> {
    let out = output_dir(cfg);
    let path = out.join("report.json");
    if !path.exists() {
        return Err(checkpoint_err(Error::invalid(format!(
            "{} not found; run evaluate first",
            path.display()
        ))));
    }
    let json = std::fs::read_to_string(&path).map_err(|e| checkpoint_err(e.into()))?;
    let report: EvaluationReport =
        serde_json::from_str(&json).map_err(|e| checkpoint_err(e.into()))?;
    std::fs::write(out.join("report.md"), render_markdown(&report))
        .map_err(|e| checkpoint_err(e.into()))?;
    Ok(())
}
