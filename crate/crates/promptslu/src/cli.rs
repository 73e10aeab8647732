//! Operator surface: subcommands that wire the library modules into
//! reproducible experiments.
//!
//! Every command reads one optional TOML configuration file, applies flag
//! overrides on top (precedence: flags > file > built-in defaults), and
//! writes its outputs under a fresh timestamped run directory that echoes
//! the fully resolved configuration — so any run can be reproduced from its
//! own directory alone.
//!
//! Failures exit with distinct codes:
//!
//! | code | meaning                                           |
//! |------|---------------------------------------------------|
//! | 1    | command failed (training diverged, phrase audit failed, ...) |
//! | 2    | usage error (unknown flag or subcommand)          |
//! | 3    | a referenced file does not exist                  |
//! | 4    | a content hash does not match (checkpoint/vocabulary) |
//! | 5    | a file exists but violates its schema             |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{run_eval, EvalConfig, EvalError, EvalOutcome, EvalReport, PromptCondition};
use crate::model::{
    load_model, save_model, AdamConfig, DecodeConfig, ModelConfig, ModelError, Parameters,
    TransformerModel,
};
use crate::prompts::{OrderSampling, ParaphrasePool, PromptError};
use crate::tasks::{standard_suite, DatasetManifest, TaskDescriptor, TaskKind};
use crate::train::{PromptMode, TrainConfig, TrainError, Trainer};
use crate::vocab::{build_vocabulary, Vocabulary};

// ------------------------------------------------------------------
// errors and exit codes
// ------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Failed(String),
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("hash mismatch: {0}")]
    HashMismatch(String),
    #[error("schema violation in {path}: {detail}")]
    Schema { path: PathBuf, detail: String },
}

impl CliError {
    /// Process exit code for this failure; usage errors exit 2 via clap.
    #[must_use]
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Failed(_) => 1,
            Self::MissingFile(_) => 3,
            Self::HashMismatch(_) => 4,
            Self::Schema { .. } => 5,
        }
    }
}

fn schema(path: &Path, err: impl std::fmt::Display) -> CliError {
    CliError::Schema {
        path: path.to_owned(),
        detail: err.to_string(),
    }
}

fn require_exists(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_owned()))
    }
}

fn io_failed(err: std::io::Error) -> CliError {
    CliError::Failed(format!("i/o failure: {err}"))
}

// ------------------------------------------------------------------
// experiment configuration
// ------------------------------------------------------------------

/// Input and output locations. All data files a command consumes must exist
/// when it starts; `synth-data` is the command that creates them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Training-task datasets (JSONL manifests), one per task.
    pub manifests: Vec<PathBuf>,
    /// Paraphrase pools (JSON), one per task type.
    pub pools: Vec<PathBuf>,
    /// Relabeled variant used only for zero-shot evaluation; its label
    /// tokens are in the vocabulary but never in training data.
    pub zero_shot_manifest: PathBuf,
    /// Run directories are created under here.
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            manifests: ["scr-cmdset", "ic-homeset", "er-moodset", "ner-noteset"]
                .iter()
                .map(|n| PathBuf::from(format!("data/{n}.jsonl")))
                .collect(),
            pools: ["scr", "ic", "er", "ner"]
                .iter()
                .map(|n| PathBuf::from(format!("data/{n}-pool.json")))
                .collect(),
            zero_shot_manifest: PathBuf::from("data/scr-compass.jsonl"),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Architecture knobs; the vocabulary size is always taken from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ffn: 128,
            max_len: 160,
        }
    }
}

impl ModelSection {
    #[must_use]
    pub fn to_model_config(self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_encoder_layers: self.n_encoder_layers,
            n_decoder_layers: self.n_decoder_layers,
            d_ffn: self.d_ffn,
            max_len: self.max_len,
        }
    }
}

/// Schedule, batching, and sampling knobs. Seed and prompt mode live at the
/// top level of [`ExperimentConfig`] because every command shares them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub order_sampling: OrderSampling,
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub patience: u32,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            order_sampling: OrderSampling::Uniform,
            max_lr: 6e-4,
            warmup_steps: 200,
            batch_size: 32,
            label_smoothing: 0.1,
            max_steps: 5000,
            eval_every: 250,
            patience: 1000,
            adam: AdamConfig::default(),
        }
    }
}

fn default_decode() -> DecodeConfig {
    DecodeConfig {
        beam_size: 1,
        length_penalty: 0.0,
        maxlen_ratio: 4.0,
    }
}

/// One experiment, fully described: where data lives, what model to build,
/// how to train it, and how to decode at evaluation time. Every command
/// echoes the resolved value of this struct into its run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub prompt_mode: PromptMode,
    pub paths: PathsSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt_mode: PromptMode::InstructionPrev,
            paths: PathsSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            decode: default_decode(),
        }
    }
}

impl ExperimentConfig {
    /// Parses the TOML file at `path`; missing file and malformed content
    /// are distinct failures.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        require_exists(path)?;
        let text = std::fs::read_to_string(path).map_err(io_failed)?;
        toml::from_str(&text).map_err(|e| schema(path, e))
    }

    #[must_use]
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            prompt_mode: self.prompt_mode,
            order_sampling: self.train.order_sampling,
            max_lr: self.train.max_lr,
            warmup_steps: self.train.warmup_steps,
            batch_size: self.train.batch_size,
            label_smoothing: self.train.label_smoothing,
            max_steps: self.train.max_steps,
            eval_every: self.train.eval_every,
            patience: self.train.patience,
            adam: self.train.adam,
        }
    }
}

// ------------------------------------------------------------------
// command line
// ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Specifier,
    InstructionPrev,
    InstructionInline,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Specifier => PromptMode::Specifier,
            ModeArg::InstructionPrev => PromptMode::InstructionPrev,
            ModeArg::InstructionInline => PromptMode::InstructionInline,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConditionArg {
    /// Instructions the model trained on.
    Seen,
    /// Held-out paraphrases behind the novelty gate.
    Unseen,
    /// Unseen paraphrases crossed with two derived option orders.
    Order,
}

/// Flags shared by every subcommand; each overrides one configuration
/// field (precedence: flags > file > defaults).
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Experiment configuration file (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Prompt grammar override.
    #[arg(long, value_enum, global = true)]
    pub mode: Option<ModeArg>,
    /// Run-directory parent override.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.prompt_mode = mode.into();
        }
        if let Some(dir) = &self.output_dir {
            cfg.paths.output_dir = dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "promptslu",
    about = "Prompt-conditioned multi-task sequence learning experiments",
    after_help = "Exit codes: 1 failure, 2 usage, 3 missing file, 4 hash mismatch, 5 schema violation."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic datasets, pools, and zero-shot variant.
    SynthData,
    /// Train one model jointly over every configured task.
    Train,
    /// Evaluate a trained run's best checkpoint on every task's test split.
    Eval {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Prompt condition to evaluate under.
        #[arg(long, value_enum, default_value = "seen")]
        condition: ConditionArg,
        /// Constrain decoding to the legal answer set (the default).
        #[arg(long, overrides_with = "unconstrained")]
        constrained: bool,
        /// Decode freely over the whole vocabulary instead.
        #[arg(long)]
        unconstrained: bool,
    },
    /// Evaluate a trained run on the zero-shot variant, instruction prompts
    /// against task-specifier prompts, with random and majority baselines.
    ZeroShot {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Audit a paraphrase pool: per-unseen-phrase normalized edit distance
    /// and pass/fail against the novelty threshold.
    PromptAudit {
        /// Pool JSON file to audit.
        pool: PathBuf,
        /// Novelty threshold phrases must exceed.
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
    },
    /// Consolidate every evaluation report under a run directory into one
    /// aligned table.
    Report {
        /// Run directory holding `*.report.json` files.
        run: PathBuf,
    },
}

/// Entry point behind `main`: resolves configuration and dispatches.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.overrides.resolve()?;
    match &cli.command {
        Command::SynthData => cmd_synth_data(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval {
            run,
            condition,
            unconstrained,
            ..
        } => cmd_eval(&cfg, run, *condition, !*unconstrained),
        Command::ZeroShot { run } => cmd_zero_shot(&cfg, run),
        Command::PromptAudit { pool, threshold } => cmd_prompt_audit(pool, *threshold),
        Command::Report { run } => cmd_report(run),
    }
}

// ------------------------------------------------------------------
// run directories
// ------------------------------------------------------------------

/// What was asked of the CLI, echoed next to the configuration so a run
/// directory fully describes how to reproduce itself.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Invocation {
    subcommand: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_run: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    condition: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    constrained: Option<bool>,
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    invocation: &'a Invocation,
    config: &'a ExperimentConfig,
}

/// Creates `{output_dir}/{label}-{unix-seconds}[-{n}]` and writes the
/// resolved configuration into it.
fn new_run_dir(
    cfg: &ExperimentConfig,
    label: &str,
    invocation: &Invocation,
) -> Result<PathBuf, CliError> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("system clock before 1970")
        .as_secs();
    let mut dir = cfg.paths.output_dir.join(format!("{label}-{stamp}"));
    for n in 1.. {
        if !dir.exists() {
            break;
        }
        dir = cfg.paths.output_dir.join(format!("{label}-{stamp}-{n}"));
        if n > 10_000 {
            return Err(CliError::Failed("could not find a free run name".into()));
        }
    }
    std::fs::create_dir_all(&dir).map_err(io_failed)?;
    let echo = ConfigEcho {
        invocation,
        config: cfg,
    };
    let text = toml::to_string_pretty(&echo)
        .map_err(|e| CliError::Failed(format!("could not serialize config: {e}")))?;
    std::fs::write(dir.join("config.toml"), text).map_err(io_failed)?;
    Ok(dir)
}

// ------------------------------------------------------------------
// data loading
// ------------------------------------------------------------------

struct LoadedData {
    tasks: Vec<DatasetManifest>,
    zero_shot: DatasetManifest,
    pools: Vec<ParaphrasePool>,
    vocab: Vocabulary,
}

/// Loads every dataset and pool the configuration references and rebuilds
/// the vocabulary over all of it (zero-shot tokens included, training data
/// excluded — matching how training builds it).
fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData, CliError> {
    for path in cfg
        .paths
        .manifests
        .iter()
        .chain(cfg.paths.pools.iter())
        .chain(std::iter::once(&cfg.paths.zero_shot_manifest))
    {
        require_exists(path)?;
    }
    let mut tasks = Vec::with_capacity(cfg.paths.manifests.len());
    for path in &cfg.paths.manifests {
        tasks.push(DatasetManifest::load_jsonl(path).map_err(|e| schema(path, e))?);
    }
    let zero_shot = DatasetManifest::load_jsonl(&cfg.paths.zero_shot_manifest)
        .map_err(|e| schema(&cfg.paths.zero_shot_manifest, e))?;
    let mut pools = Vec::with_capacity(cfg.paths.pools.len());
    for path in &cfg.paths.pools {
        let text = std::fs::read_to_string(path).map_err(io_failed)?;
        pools.push(ParaphrasePool::from_json_str(&text).map_err(|e| schema(path, e))?);
    }
    let mut descriptors: Vec<TaskDescriptor> =
        tasks.iter().map(|m| m.descriptor.clone()).collect();
    descriptors.push(zero_shot.descriptor.clone());
    let vocab = build_vocabulary(&descriptors, &pools)
        .map_err(|e| CliError::Failed(format!("vocabulary construction failed: {e}")))?;
    Ok(LoadedData {
        tasks,
        zero_shot,
        pools,
        vocab,
    })
}

// ------------------------------------------------------------------
// synth-data
// ------------------------------------------------------------------

fn cmd_synth_data(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let suite = standard_suite(cfg.seed)
        .map_err(|e| CliError::Failed(format!("dataset synthesis failed: {e}")))?;
    if cfg.paths.manifests.len() != suite.tasks.len() {
        return Err(CliError::Failed(format!(
            "configuration names {} manifest paths but the standard suite has {} tasks",
            cfg.paths.manifests.len(),
            suite.tasks.len()
        )));
    }
    if cfg.paths.pools.len() != suite.pools.len() {
        return Err(CliError::Failed(format!(
            "configuration names {} pool paths but the standard suite has {} pools",
            cfg.paths.pools.len(),
            suite.pools.len()
        )));
    }
    let invocation = Invocation {
        subcommand: "synth-data".into(),
        ..Invocation::default()
    };
    let run_dir = new_run_dir(cfg, "synth", &invocation)?;

    let mut inventory = String::new();
    for (path, manifest) in cfg
        .paths
        .manifests
        .iter()
        .zip(&suite.tasks)
        .chain(std::iter::once((
            &cfg.paths.zero_shot_manifest,
            &suite.zero_shot,
        )))
    {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_failed)?;
        }
        manifest
            .save_jsonl(path)
            .map_err(|e| CliError::Failed(format!("could not write {}: {e}", path.display())))?;
        writeln!(
            inventory,
            "{}  {}/{}  train {}  dev {}  test {}",
            path.display(),
            manifest.descriptor.task_type,
            manifest.descriptor.dataset,
            manifest.train.len(),
            manifest.dev.len(),
            manifest.test.len()
        )
        .expect("writing to a string cannot fail");
    }
    for (path, pool) in cfg.paths.pools.iter().zip(&suite.pools) {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_failed)?;
        }
        std::fs::write(path, pool.to_json()).map_err(io_failed)?;
        writeln!(
            inventory,
            "{}  pool {}  seen {}  unseen {}",
            path.display(),
            pool.task_type,
            pool.seen.len(),
            pool.unseen.len()
        )
        .expect("writing to a string cannot fail");
    }
    std::fs::write(run_dir.join("inventory.txt"), &inventory).map_err(io_failed)?;
    print!("{inventory}");
    println!("run directory: {}", run_dir.display());
    Ok(())
}

// ------------------------------------------------------------------
// train
// ------------------------------------------------------------------

fn map_train_err(e: TrainError) -> CliError {
    CliError::Failed(format!("training failed: {e}"))
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let model_cfg = cfg.model.to_model_config(data.vocab.len());
    let vocab_copy = data.vocab.clone();
    let mut trainer = Trainer::new(
        model_cfg.clone(),
        cfg.train_config(),
        data.tasks,
        data.pools,
        data.vocab,
    )
    .map_err(map_train_err)?;

    let invocation = Invocation {
        subcommand: "train".into(),
        ..Invocation::default()
    };
    let run_dir = new_run_dir(cfg, "train", &invocation)?;

    let outcome = trainer.fit().map_err(map_train_err)?;
    for e in &outcome.evals {
        println!(
            "eval at step {:>6}: dev loss {}, pooled dev accuracy {}",
            e.step, e.dev_loss, e.dev_accuracy
        );
    }
    let last = trainer
        .log()
        .last()
        .ok_or_else(|| CliError::Failed("training ran no steps".into()))?;
    println!("final step {}: loss {}", last.step, last.loss);
    println!(
        "best pooled dev accuracy {} at {} steps{}",
        outcome.best_dev_accuracy,
        outcome.steps_run,
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        }
    );

    save_model(&run_dir.join("model"), &model_cfg, &outcome.best_params)
        .map_err(|e| CliError::Failed(format!("could not save checkpoint: {e}")))?;
    vocab_copy
        .save(&run_dir.join("vocab"))
        .map_err(|e| CliError::Failed(format!("could not save vocabulary: {e}")))?;
    trainer
        .save_snapshot(&run_dir.join("snapshot"))
        .map_err(map_train_err)?;
    let log_json = serde_json::json!({
        "steps": trainer.log(),
        "evals": outcome.evals,
        "best_dev_accuracy": outcome.best_dev_accuracy,
        "final_dev_accuracy": outcome.final_dev_accuracy,
        "stopped_early": outcome.stopped_early,
    });
    std::fs::write(
        run_dir.join("train-log.json"),
        serde_json::to_string_pretty(&log_json)
            .map_err(|e| CliError::Failed(format!("could not serialize log: {e}")))?,
    )
    .map_err(io_failed)?;
    println!("run directory: {}", run_dir.display());
    Ok(())
}

// ------------------------------------------------------------------
// eval and zero-shot
// ------------------------------------------------------------------

/// Loads the best checkpoint and vocabulary of a `train` run directory and
/// verifies the on-disk datasets still hash to the vocabulary the model
/// trained with.
fn load_checkpoint(
    cfg: &ExperimentConfig,
    run: &Path,
) -> Result<(TransformerModel, Parameters, LoadedData), CliError> {
    for name in ["model.json", "model.bin", "vocab.txt", "vocab.classes.json"] {
        require_exists(&run.join(name))?;
    }
    let (model_cfg, params) = load_model(&run.join("model")).map_err(|e| match e {
        ModelError::ChecksumMismatch => {
            CliError::HashMismatch("checkpoint blob does not match its header".into())
        }
        ModelError::MalformedCheckpoint(d) => schema(&run.join("model.json"), d),
        ModelError::Json(d) => schema(&run.join("model.json"), d),
        other => CliError::Failed(format!("could not load checkpoint: {other}")),
    })?;
    let stored = Vocabulary::load(&run.join("vocab"))
        .map_err(|e| schema(&run.join("vocab.txt"), e))?;
    let data = load_data(cfg)?;
    if data.vocab.hash() != stored.hash() {
        return Err(CliError::HashMismatch(format!(
            "vocabulary rebuilt from the configured datasets hashes to {} but the checkpoint trained with {}",
            data.vocab.hash(),
            stored.hash()
        )));
    }
    let model = TransformerModel::new(model_cfg)
        .map_err(|e| CliError::Failed(format!("checkpoint model config invalid: {e}")))?;
    Ok((model, params, data))
}

fn map_eval_err(e: EvalError) -> CliError {
    CliError::Failed(format!("evaluation failed: {e}"))
}

/// Writes one evaluation outcome into `dir` under `stem`, returning the
/// report for table rendering.
fn write_outcome(dir: &Path, stem: &str, outcome: &EvalOutcome) -> Result<(), CliError> {
    let report_json = serde_json::to_string_pretty(&outcome.report)
        .map_err(|e| CliError::Failed(format!("could not serialize report: {e}")))?;
    std::fs::write(dir.join(format!("{stem}.report.json")), report_json).map_err(io_failed)?;
    let jsonl = crate::eval::predictions_to_jsonl(&outcome.predictions)
        .map_err(|e| CliError::Failed(format!("could not serialize predictions: {e}")))?;
    std::fs::write(dir.join(format!("{stem}.predictions.jsonl")), jsonl).map_err(io_failed)?;
    Ok(())
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    run: &Path,
    condition: ConditionArg,
    constrained: bool,
) -> Result<(), CliError> {
    let (model, params, data) = load_checkpoint(cfg, run)?;
    // Specifier prompt mode evaluates specifier prompts regardless of the
    // phrase condition; there are no phrases to vary. Instruction prompts
    // are always evaluated in the previous-segment position.
    let cond = match cfg.prompt_mode {
        PromptMode::Specifier => PromptCondition::Specifier,
        PromptMode::InstructionPrev => match condition {
            ConditionArg::Seen => PromptCondition::Seen,
            ConditionArg::Unseen => PromptCondition::Unseen,
            ConditionArg::Order => PromptCondition::OptionOrderVariant,
        },
        other => {
            return Err(CliError::Failed(format!(
                "evaluation supports specifier and instruction_prev prompt modes, not {other:?}"
            )))
        }
    };
    let eval_cfg = EvalConfig {
        condition: cond,
        constrained,
        decode: cfg.decode,
        ..EvalConfig::default()
    };
    let invocation = Invocation {
        subcommand: "eval".into(),
        checkpoint_run: Some(run.to_owned()),
        condition: Some(format!("{cond:?}")),
        constrained: Some(constrained),
    };
    let run_dir = new_run_dir(cfg, "eval", &invocation)?;

    let mut reports = Vec::new();
    for manifest in &data.tasks {
        if cond == PromptCondition::OptionOrderVariant
            && manifest.descriptor.kind != TaskKind::Classification
        {
            println!(
                "skipping {}/{}: option orders apply to classification only",
                manifest.descriptor.task_type, manifest.descriptor.dataset
            );
            continue;
        }
        let pool = data
            .pools
            .iter()
            .find(|p| p.task_type == manifest.descriptor.task_type);
        let outcome = run_eval(&model, &params, manifest, pool, &data.vocab, &eval_cfg)
            .map_err(map_eval_err)?;
        let stem = format!(
            "{}-{}",
            manifest.descriptor.task_type, manifest.descriptor.dataset
        );
        write_outcome(&run_dir, &stem, &outcome)?;
        reports.push(outcome.report);
    }
    let table = crate::eval::render_table(&reports);
    std::fs::write(run_dir.join("table.txt"), &table).map_err(io_failed)?;
    print!("{table}");
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn cmd_zero_shot(cfg: &ExperimentConfig, run: &Path) -> Result<(), CliError> {
    let (model, params, data) = load_checkpoint(cfg, run)?;
    let manifest = &data.zero_shot;
    let pool = data
        .pools
        .iter()
        .find(|p| p.task_type == manifest.descriptor.task_type);
    let invocation = Invocation {
        subcommand: "zero-shot".into(),
        checkpoint_run: Some(run.to_owned()),
        ..Invocation::default()
    };
    let run_dir = new_run_dir(cfg, "zero-shot", &invocation)?;

    let mut reports = Vec::new();
    for (stem, condition) in [
        ("instruction", PromptCondition::Seen),
        ("specifier", PromptCondition::Specifier),
    ] {
        let eval_cfg = EvalConfig {
            condition,
            constrained: true,
            decode: cfg.decode,
            ..EvalConfig::default()
        };
        let outcome = run_eval(&model, &params, manifest, pool, &data.vocab, &eval_cfg)
            .map_err(map_eval_err)?;
        write_outcome(&run_dir, stem, &outcome)?;
        reports.push(outcome.report);
    }

    let table = crate::eval::render_table(&reports);
    std::fs::write(run_dir.join("table.txt"), &table).map_err(io_failed)?;
    print!("{table}");
    let baselines = reports[0]
        .baselines
        .as_ref()
        .expect("zero-shot variant is classification, so baselines exist");
    println!(
        "instruction {} vs specifier {} | chance {} (simulated {}), majority {}",
        reports[0].value,
        reports[1].value,
        baselines.random_analytic.unwrap_or(baselines.random),
        baselines.random,
        baselines.majority
    );
    println!("run directory: {}", run_dir.display());
    Ok(())
}

// ------------------------------------------------------------------
// prompt-audit and report
// ------------------------------------------------------------------

fn cmd_prompt_audit(pool_path: &Path, threshold: f64) -> Result<(), CliError> {
    require_exists(pool_path)?;
    let text = std::fs::read_to_string(pool_path).map_err(io_failed)?;
    // Parsed without the constructor's novelty validation: auditing a pool
    // that fails the gate is the point of this command.
    let pool: ParaphrasePool = serde_json::from_str(&text).map_err(|e| schema(pool_path, e))?;
    let rows = pool
        .audit(threshold)
        .map_err(|e: PromptError| schema(pool_path, e))?;
    let width = rows
        .iter()
        .map(|(p, _, _)| p.chars().count())
        .max()
        .unwrap_or(6)
        .max(6);
    println!("pool {} ({} seen phrases)", pool.task_type, pool.seen.len());
    println!("{:<width$}  distance  verdict", "phrase");
    let mut failures = 0usize;
    for (phrase, distance, passes) in &rows {
        println!(
            "{phrase:<width$}  {distance:.4}    {}",
            if *passes { "pass" } else { "FAIL" }
        );
        failures += usize::from(!passes);
    }
    if failures > 0 {
        return Err(CliError::Failed(format!(
            "{failures} of {} unseen phrases fail the {threshold} novelty gate",
            rows.len()
        )));
    }
    println!("all {} unseen phrases pass at {threshold}", rows.len());
    Ok(())
}

/// Collects `*.report.json` files under `dir` (one level of subdirectories
/// deep), sorted by path for deterministic output.
fn collect_reports(dir: &Path) -> Result<Vec<(PathBuf, EvalReport)>, CliError> {
    require_exists(dir)?;
    let mut paths = Vec::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(io_failed)?;
        for entry in entries {
            let path = entry.map_err(io_failed)?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".report.json"))
            {
                paths.push(path);
            }
        }
    }
    paths.sort();
    let mut reports = Vec::with_capacity(paths.len());
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(io_failed)?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| schema(&path, e))?;
        reports.push((path, report));
    }
    Ok(reports)
}

fn cmd_report(run: &Path) -> Result<(), CliError> {
    let found = collect_reports(run)?;
    if found.is_empty() {
        return Err(CliError::Failed(format!(
            "no *.report.json files under {}",
            run.display()
        )));
    }
    println!("consolidating {} reports under {}", found.len(), run.display());
    let reports: Vec<EvalReport> = found.into_iter().map(|(_, r)| r).collect();
    let table = crate::eval::render_table(&reports);
    std::fs::write(run.join("report.txt"), &table).map_err(io_failed)?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn file_fields_override_defaults_and_flags_override_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "seed = 9\n[train]\nmax_lr = 1e-3\n[model]\nd_model = 32\n",
        )
        .unwrap();
        let overrides = Overrides {
            config: Some(path),
            seed: Some(42),
            mode: Some(ModeArg::Specifier),
            output_dir: None,
        };
        let cfg = overrides.resolve().unwrap();
        // Flag beats file.
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.prompt_mode, PromptMode::Specifier);
        // File beats default.
        assert_eq!(cfg.train.max_lr, 1e-3);
        assert_eq!(cfg.model.d_model, 32);
        // Untouched fields keep defaults.
        assert_eq!(cfg.model.n_heads, ModelSection::default().n_heads);
        assert_eq!(cfg.paths, PathsSection::default());
    }

    #[test]
    fn unknown_config_keys_are_schema_violations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "sead = 9\n").unwrap();
        match ExperimentConfig::load(&path) {
            Err(e @ CliError::Schema { .. }) => assert_eq!(e.exit_code(), 5),
            other => panic!("expected schema violation, got {other:?}"),
        }
    }

    #[test]
    fn missing_config_file_is_its_own_failure() {
        match ExperimentConfig::load(Path::new("/nonexistent/exp.toml")) {
            Err(e @ CliError::MissingFile(_)) => assert_eq!(e.exit_code(), 3),
            other => panic!("expected missing file, got {other:?}"),
        }
    }

    #[test]
    fn cli_parses_spec_flags() {
        let cli = Cli::try_parse_from([
            "promptslu",
            "eval",
            "--run",
            "runs/train-1",
            "--condition",
            "unseen",
            "--unconstrained",
            "--mode",
            "instruction_prev",
            "--seed",
            "3",
        ])
        .unwrap();
        match cli.command {
            Command::Eval {
                condition,
                unconstrained,
                ..
            } => {
                assert_eq!(condition, ConditionArg::Unseen);
                assert!(unconstrained);
            }
            other => panic!("wrong command: {other:?}"),
        }
        assert_eq!(cli.overrides.seed, Some(3));
        assert_eq!(cli.overrides.mode, Some(ModeArg::InstructionPrev));
    }

    #[test]
    fn condition_flag_rejects_unknown_values() {
        assert!(Cli::try_parse_from(["promptslu", "eval", "--run", "r", "--condition", "odd"])
            .is_err());
    }
}
