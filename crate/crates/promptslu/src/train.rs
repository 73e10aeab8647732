//! Joint multi-task training.
//!
//! One model is trained across several datasets at once: every optimizer
//! step draws a batch from a shuffled joint epoch stream, compiles a prompt
//! for each drawn example (task specifier or sampled natural-language
//! instruction, with a sampled option order), and takes one AdamW step on
//! the token-mean label-smoothed loss over the batch's target positions.
//!
//! Determinism is a hard guarantee here, not an aspiration: the epoch
//! stream, the per-example prompt draws, and the parameter trajectory are
//! pure functions of the configuration seed, so two runs with the same
//! inputs produce bitwise-identical parameters, logs, and snapshots, and a
//! run resumed from a snapshot is bitwise-identical to one that never
//! stopped.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{count_correct, EvalError};
use crate::model::{
    blob_sha256, read_f64s, write_f64s, AdamConfig, AdamState, DecodeConfig, Layout, ModelConfig,
    ModelError, Parameters, TransformerModel,
};
use crate::prompts::{
    build_inline_instruction_prompt, build_instruction_prompt, build_specifier_prompt,
    sample_instruction, sample_option_order, CompiledPrompt, Instruction, InstructionSource,
    OrderSampling, ParaphrasePool, PromptError, TaskSpecifier,
};
use crate::tasks::{
    make_training_sequence, DatasetManifest, TaskDescriptor, TaskError, TaskKind, TrainingSequence,
};
use crate::vocab::Vocabulary;

const SNAPSHOT_FORMAT: &str = "slu-train-snapshot";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged to a non-finite value at step {step}")]
    Diverged { step: u64 },
    #[error("bad training configuration: {0}")]
    BadConfig(String),
    #[error("no training examples")]
    EmptyTraining,
    #[error("snapshot is malformed: {0}")]
    MalformedSnapshot(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}

/// Learning rate at `step` (counted from 1): linear warmup to `max_lr` over
/// `warmup_steps`, then inverse-square-root decay. In closed form,
/// `max_lr * min(step / warmup, sqrt(warmup / step))`.
#[must_use]
pub fn lr_at(step: u64, max_lr: f64, warmup_steps: u64) -> f64 {
    let s = step as f64;
    let w = warmup_steps as f64;
    max_lr * (s / w).min((w / s).sqrt())
}

/// Which prompt grammar training sequences are compiled under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Task-specifier prompts only.
    Specifier,
    /// Natural-language instructions in the previous-segment position.
    InstructionPrev,
    /// Instructions folded inline into the task frame.
    InstructionInline,
    /// A fair per-example coin between specifier and previous-segment
    /// instruction prompts.
    Mixed,
}

/// Training-loop hyperparameters. The model architecture is configured
/// separately; this struct holds only schedule, batching, and prompting
/// knobs, so it is cheap to copy and serialize into snapshots.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub prompt_mode: PromptMode,
    pub order_sampling: OrderSampling,
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub max_steps: u64,
    /// Dev-loss evaluation cadence in optimizer steps.
    pub eval_every: u64,
    /// Consecutive non-improving dev evaluations tolerated before stopping.
    pub patience: u32,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt_mode: PromptMode::InstructionPrev,
            order_sampling: OrderSampling::PrecomputedK { k: 2 },
            max_lr: 3e-4,
            warmup_steps: 200,
            batch_size: 32,
            label_smoothing: 0.1,
            max_steps: 5000,
            eval_every: 100,
            patience: 3,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::BadConfig(msg.into()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.warmup_steps == 0 {
            return bad("warmup must be at least 1 step");
        }
        if !self.max_lr.is_finite() || self.max_lr < 0.0 {
            return bad("peak learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label smoothing must lie in [0, 1)");
        }
        if self.max_steps == 0 {
            return bad("step budget must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("evaluation cadence must be at least 1 step");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1 evaluation");
        }
        Ok(())
    }

    /// Learning rate under this configuration's schedule at `step`
    /// (counted from 1).
    #[must_use]
    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self.max_lr, self.warmup_steps)
    }
}

/// One optimizer step as it appears in the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Token-mean label-smoothed loss over the batch.
    pub loss: f64,
    /// Target positions the batch contributed.
    pub n_positions: usize,
}

/// One dev evaluation as it appears in the fit history: the smoothed loss
/// plus decoded accuracy, pooled and per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub step: u64,
    pub dev_loss: f64,
    /// Fraction of all dev examples decoded correctly (pooled over tasks).
    pub dev_accuracy: f64,
    /// Per-task dev accuracy, in task order.
    pub task_accuracies: Vec<f64>,
}

/// Decoded dev-set quality: correct fraction pooled over every task's dev
/// split, plus the per-task breakdown in task order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevAccuracy {
    pub pooled: f64,
    pub per_task: Vec<f64>,
}

/// What a `fit` call did: how far it got, the evaluation trace, and the
/// parameters of the best checkpoint by pooled dev accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub steps_run: u64,
    pub stopped_early: bool,
    pub best_dev_accuracy: f64,
    pub final_dev_accuracy: f64,
    /// Parameters as of the evaluation that reached `best_dev_accuracy`.
    pub best_params: Parameters,
    pub evals: Vec<DevRecord>,
}

/// One entry of the shuffled joint epoch stream: a task and an index into
/// its upsampled train split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct EpochItem {
    task_idx: usize,
    example_idx: usize,
}

/// The shuffled order of every upsampled train example across all tasks,
/// as a pure function of the epoch seed.
fn epoch_plan(tasks: &[DatasetManifest], epoch_seed: u64) -> Vec<EpochItem> {
    let mut items = Vec::new();
    for (task_idx, manifest) in tasks.iter().enumerate() {
        for example_idx in 0..manifest.upsampled_train_len() {
            items.push(EpochItem {
                task_idx,
                example_idx,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    use rand::seq::SliceRandom;
    items.shuffle(&mut rng);
    items
}

/// Seed owned by epoch `epoch` under run seed `seed`. Epochs use distinct
/// generator streams of one seeded generator, so epoch seeds never collide
/// and never overlap the parameter-initialization draws (which use the run
/// seed directly).
fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    rng.gen()
}

/// Generator owning all random choices of the item at `position` within an
/// epoch: stream `position + 1` of the epoch-seeded generator (stream 0 is
/// the shuffle). Items are independent, so resuming mid-epoch replays
/// nothing.
fn item_rng(epoch_seed: u64, position: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    rng.set_stream(position.wrapping_add(1));
    rng
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    vocab_hash: String,
    step: u64,
    epoch: u64,
    step_in_epoch: u64,
    adam_t: u64,
    n_params: usize,
    blob_sha256: String,
    log: Vec<StepRecord>,
    evals: Vec<DevRecord>,
    best_dev_accuracy: Option<f64>,
    /// Parameter blob as of the best evaluation, when one happened.
    best_params: Option<Vec<f64>>,
    bad_evals: u32,
}

/// The joint training loop: model, optimizer, data, and stream position.
pub struct Trainer {
    model: TransformerModel,
    cfg: TrainConfig,
    tasks: Vec<DatasetManifest>,
    pools: Vec<ParaphrasePool>,
    vocab: Vocabulary,
    params: Parameters,
    opt: AdamState,
    /// Completed optimizer steps.
    step: u64,
    epoch: u64,
    /// Batches consumed from the current epoch.
    step_in_epoch: u64,
    epoch_seed_value: u64,
    plan: Vec<EpochItem>,
    log: Vec<StepRecord>,
    evals: Vec<DevRecord>,
    best_dev_accuracy: Option<f64>,
    /// Copy of the weights taken whenever pooled dev accuracy improves.
    best_params: Option<Vec<f64>>,
    bad_evals: u32,
}

impl Trainer {
    /// Fresh trainer with seeded parameter initialization.
    pub fn new(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        tasks: Vec<DatasetManifest>,
        pools: Vec<ParaphrasePool>,
        vocab: Vocabulary,
    ) -> Result<Self, TrainError> {
        let params = Parameters::init(&model_cfg, cfg.seed);
        let opt = AdamState::new(params.len(), cfg.adam);
        Self::assemble(
            model_cfg,
            cfg,
            tasks,
            pools,
            vocab,
            params,
            opt,
            0,
            0,
            0,
            Vec::new(),
            Vec::new(),
            None,
            None,
            0,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        tasks: Vec<DatasetManifest>,
        pools: Vec<ParaphrasePool>,
        vocab: Vocabulary,
        params: Parameters,
        opt: AdamState,
        step: u64,
        epoch: u64,
        step_in_epoch: u64,
        log: Vec<StepRecord>,
        evals: Vec<DevRecord>,
        best_dev_accuracy: Option<f64>,
        best_params: Option<Vec<f64>>,
        bad_evals: u32,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = TransformerModel::new(model_cfg)?;
        if model.cfg().vocab_size != vocab.len() {
            return Err(TrainError::BadConfig(format!(
                "model expects a vocabulary of {} tokens but was given {}",
                model.cfg().vocab_size,
                vocab.len()
            )));
        }
        if tasks.is_empty() || tasks.iter().any(|m| m.train.is_empty()) {
            return Err(TrainError::EmptyTraining);
        }
        if cfg.prompt_mode != PromptMode::Specifier {
            for manifest in &tasks {
                let t = &manifest.descriptor.task_type;
                if !pools.iter().any(|p| &p.task_type == t) {
                    return Err(TrainError::BadConfig(format!(
                        "no instruction pool for task type {t}"
                    )));
                }
            }
        }
        let plan_len: usize = tasks.iter().map(DatasetManifest::upsampled_train_len).sum();
        if plan_len < cfg.batch_size {
            return Err(TrainError::BadConfig(format!(
                "batch size {} exceeds the {plan_len} examples of one epoch",
                cfg.batch_size
            )));
        }
        let epoch_seed_value = epoch_seed(cfg.seed, epoch);
        let plan = epoch_plan(&tasks, epoch_seed_value);
        Ok(Self {
            model,
            cfg,
            tasks,
            pools,
            vocab,
            params,
            opt,
            step,
            epoch,
            step_in_epoch,
            epoch_seed_value,
            plan,
            log,
            evals,
            best_dev_accuracy,
            best_params,
            bad_evals,
        })
    }

    fn pool_for(&self, task_type: &str) -> Result<&ParaphrasePool, TrainError> {
        self.pools
            .iter()
            .find(|p| p.task_type == task_type)
            .ok_or_else(|| {
                TrainError::BadConfig(format!("no instruction pool for task type {task_type}"))
            })
    }

    /// Compiles the prompt for one drawn example. The draw order within the
    /// item's generator is fixed: grammar coin (mixed mode only), then
    /// instruction, then option order.
    fn draw_prompt(
        &self,
        task: &TaskDescriptor,
        rng: &mut ChaCha8Rng,
    ) -> Result<CompiledPrompt, TrainError> {
        let mode = match self.cfg.prompt_mode {
            PromptMode::Mixed => {
                if rng.gen_range(0..2) == 0 {
                    PromptMode::Specifier
                } else {
                    PromptMode::InstructionPrev
                }
            }
            fixed => fixed,
        };
        if mode == PromptMode::Specifier {
            return Ok(build_specifier_prompt(&TaskSpecifier::of(task), &self.vocab)?);
        }
        let pool = self.pool_for(&task.task_type)?;
        let instruction = sample_instruction(pool, rng)?;
        let permutation = match task.kind {
            TaskKind::Classification => sample_option_order(
                task.labels.len(),
                self.cfg.order_sampling,
                &task.dataset,
                &instruction.text,
                rng,
            ),
            TaskKind::SeqGen => Vec::new(),
        };
        let prompt = match mode {
            PromptMode::InstructionInline => {
                build_inline_instruction_prompt(&instruction, task, &permutation)?
            }
            _ => build_instruction_prompt(&instruction, task, &permutation)?,
        };
        Ok(prompt)
    }

    /// The fully assembled training sequence for `position` of the current
    /// epoch — the exact sequence `train_step` would consume there.
    pub fn planned_sequence(&self, position: usize) -> Result<TrainingSequence, TrainError> {
        let item = *self
            .plan
            .get(position)
            .ok_or_else(|| TrainError::BadConfig(format!("position {position} is past the epoch")))?;
        let mut rng = item_rng(self.epoch_seed_value, position as u64);
        let manifest = &self.tasks[item.task_idx];
        let prompt = self.draw_prompt(&manifest.descriptor, &mut rng)?;
        let example = manifest.train_example(item.example_idx);
        Ok(make_training_sequence(
            example,
            &manifest.descriptor,
            &prompt,
            &self.vocab,
        )?)
    }

    fn steps_per_epoch(&self) -> u64 {
        (self.plan.len() / self.cfg.batch_size) as u64
    }

    fn advance_epoch(&mut self) {
        self.epoch += 1;
        self.step_in_epoch = 0;
        self.epoch_seed_value = epoch_seed(self.cfg.seed, self.epoch);
        self.plan = epoch_plan(&self.tasks, self.epoch_seed_value);
    }

    /// One optimizer step over the next batch of the epoch stream. The
    /// gradient is scaled by the batch's total target-position count, so
    /// the update follows the exact token-mean loss.
    pub fn train_step(&mut self) -> Result<StepRecord, TrainError> {
        if self.step_in_epoch >= self.steps_per_epoch() {
            self.advance_epoch();
        }
        let batch = self.cfg.batch_size;
        let start = (self.step_in_epoch as usize) * batch;
        let failing_step = self.step + 1;
        let mut grads = Parameters::zeros(Arc::clone(self.params.layout()));
        let mut loss_sum = 0.0;
        let mut n_positions = 0usize;
        for offset in 0..batch {
            let position = start + offset;
            let seq = self.planned_sequence(position)?;
            let out = self
                .model
                .loss_and_grad(
                    &self.params,
                    &seq.encoder_input,
                    &seq.decoder_tokens,
                    &seq.loss_mask,
                    self.cfg.label_smoothing,
                    &mut grads,
                )
                .map_err(|e| match e {
                    ModelError::NonFinite(_) => TrainError::Diverged { step: failing_step },
                    other => TrainError::Model(other),
                })?;
            loss_sum += out.loss_sum;
            n_positions += out.n_positions;
        }
        grads.scale(1.0 / n_positions as f64);
        let lr = self.cfg.lr_at(failing_step);
        self.opt.step(&mut self.params.data, &grads.data, lr);
        self.step += 1;
        self.step_in_epoch += 1;
        let record = StepRecord {
            step: self.step,
            lr,
            loss: loss_sum / n_positions as f64,
            n_positions,
        };
        self.log.push(record);
        Ok(record)
    }

    /// The deterministic prompt dev evaluations use for `task`: the first
    /// seen instruction with options in canonical order, or the task
    /// specifier when training is specifier-only.
    fn fixed_eval_prompt(&self, task: &TaskDescriptor) -> Result<CompiledPrompt, TrainError> {
        if self.cfg.prompt_mode == PromptMode::Specifier {
            return Ok(build_specifier_prompt(&TaskSpecifier::of(task), &self.vocab)?);
        }
        let pool = self.pool_for(&task.task_type)?;
        let text = pool
            .seen
            .first()
            .ok_or_else(|| PromptError::EmptyPool(task.task_type.clone()))?
            .clone();
        let instruction = Instruction {
            task_type: task.task_type.clone(),
            text,
            source: InstructionSource::SeenPool,
        };
        let permutation: Vec<usize> = match task.kind {
            TaskKind::Classification => (0..task.labels.len()).collect(),
            TaskKind::SeqGen => Vec::new(),
        };
        let prompt = match self.cfg.prompt_mode {
            PromptMode::InstructionInline => {
                build_inline_instruction_prompt(&instruction, task, &permutation)?
            }
            _ => build_instruction_prompt(&instruction, task, &permutation)?,
        };
        Ok(prompt)
    }

    /// Token-mean label-smoothed loss over every dev example of every task
    /// under the fixed evaluation prompts. Pure function of the parameters.
    pub fn dev_loss(&self) -> Result<f64, TrainError> {
        let mut loss_sum = 0.0;
        let mut n_positions = 0usize;
        for manifest in &self.tasks {
            let prompt = self.fixed_eval_prompt(&manifest.descriptor)?;
            for example in &manifest.dev {
                let seq =
                    make_training_sequence(example, &manifest.descriptor, &prompt, &self.vocab)?;
                let out = self.model.loss_only(
                    &self.params,
                    &seq.encoder_input,
                    &seq.decoder_tokens,
                    &seq.loss_mask,
                    self.cfg.label_smoothing,
                )?;
                loss_sum += out.loss_sum;
                n_positions += out.n_positions;
            }
        }
        if n_positions == 0 {
            return Err(TrainError::EmptyTraining);
        }
        Ok(loss_sum / n_positions as f64)
    }

    /// Fraction of dev examples decoded correctly (greedy, constrained to
    /// the task's answer set) under the fixed evaluation prompts, pooled
    /// over every task's dev split and broken down per task. Pure function
    /// of the parameters.
    pub fn dev_accuracy(&self) -> Result<DevAccuracy, TrainError> {
        const PROBE_DECODE: DecodeConfig = DecodeConfig {
            beam_size: 1,
            length_penalty: 0.0,
            maxlen_ratio: 4.0,
        };
        let mut correct_sum = 0usize;
        let mut n_sum = 0usize;
        let mut per_task = Vec::with_capacity(self.tasks.len());
        for manifest in &self.tasks {
            let prompt = self.fixed_eval_prompt(&manifest.descriptor)?;
            let correct = count_correct(
                &self.model,
                &self.params,
                &self.vocab,
                &manifest.descriptor,
                &prompt,
                &manifest.dev,
                &PROBE_DECODE,
            )?;
            correct_sum += correct;
            n_sum += manifest.dev.len();
            per_task.push(correct as f64 / manifest.dev.len() as f64);
        }
        Ok(DevAccuracy {
            pooled: correct_sum as f64 / n_sum as f64,
            per_task,
        })
    }

    /// Trains until the step budget runs out or `patience` consecutive dev
    /// evaluations (every `eval_every` steps) fail to improve on the best
    /// pooled dev accuracy seen so far. Returns the parameters of the best
    /// evaluation, not necessarily the last — on a run whose dev accuracy
    /// oscillates between checkpoints, the returned weights are the peak.
    pub fn fit(&mut self) -> Result<FitOutcome, TrainError> {
        let mut stopped_early = false;
        while self.step < self.cfg.max_steps {
            self.train_step()?;
            if self.step % self.cfg.eval_every == 0 && self.record_dev_eval()? {
                stopped_early = true;
                break;
            }
        }
        // Close the trace with a final evaluation unless the last step was
        // already one.
        if self.evals.last().map(|e| e.step) != Some(self.step) {
            self.record_dev_eval()?;
        }
        let final_dev_accuracy = self
            .evals
            .last()
            .map(|e| e.dev_accuracy)
            .unwrap_or(f64::NAN);
        let best_params = match &self.best_params {
            Some(blob) => Parameters::from_data(Arc::clone(self.params.layout()), blob.clone())?,
            None => self.params.clone(),
        };
        Ok(FitOutcome {
            steps_run: self.step,
            stopped_early,
            best_dev_accuracy: self.best_dev_accuracy.unwrap_or(final_dev_accuracy),
            final_dev_accuracy,
            best_params,
            evals: self.evals.clone(),
        })
    }

    /// Runs one dev evaluation and updates the patience bookkeeping and the
    /// best-checkpoint stash. Returns true when patience is exhausted.
    fn record_dev_eval(&mut self) -> Result<bool, TrainError> {
        let dev_loss = self.dev_loss()?;
        let acc = self.dev_accuracy()?;
        self.evals.push(DevRecord {
            step: self.step,
            dev_loss,
            dev_accuracy: acc.pooled,
            task_accuracies: acc.per_task,
        });
        if self.best_dev_accuracy.is_none_or(|best| acc.pooled > best) {
            self.best_dev_accuracy = Some(acc.pooled);
            self.best_params = Some(self.params.data.clone());
            self.bad_evals = 0;
            Ok(false)
        } else {
            self.bad_evals += 1;
            Ok(self.bad_evals >= self.cfg.patience)
        }
    }

    /// Writes `{stem}.json` (run state) and `{stem}.bin` (parameters and
    /// optimizer moments, bitwise).
    pub fn save_snapshot(&self, stem: &Path) -> Result<(), TrainError> {
        let (m, v, t) = self.opt.parts();
        let mut blob = Vec::with_capacity(3 * self.params.len());
        blob.extend_from_slice(&self.params.data);
        blob.extend_from_slice(m);
        blob.extend_from_slice(v);
        let header = SnapshotHeader {
            format: SNAPSHOT_FORMAT.to_owned(),
            version: SNAPSHOT_VERSION,
            model: self.model.cfg().clone(),
            train: self.cfg,
            vocab_hash: self.vocab.hash(),
            step: self.step,
            epoch: self.epoch,
            step_in_epoch: self.step_in_epoch,
            adam_t: t,
            n_params: self.params.len(),
            blob_sha256: blob_sha256(&blob),
            log: self.log.clone(),
            evals: self.evals.clone(),
            best_dev_accuracy: self.best_dev_accuracy,
            best_params: self.best_params.clone(),
            bad_evals: self.bad_evals,
        };
        std::fs::write(
            with_ext(stem, "json"),
            serde_json::to_string_pretty(&header)?,
        )?;
        write_f64s(&with_ext(stem, "bin"), &blob)?;
        Ok(())
    }

    /// Rebuilds a trainer from a snapshot. The caller supplies the same
    /// datasets, pools, and vocabulary the snapshotted run trained on; the
    /// vocabulary is verified by content hash.
    pub fn resume(
        stem: &Path,
        tasks: Vec<DatasetManifest>,
        pools: Vec<ParaphrasePool>,
        vocab: Vocabulary,
    ) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(with_ext(stem, "json"))?;
        let header: SnapshotHeader = serde_json::from_str(&text)
            .map_err(|e| TrainError::MalformedSnapshot(e.to_string()))?;
        if header.format != SNAPSHOT_FORMAT || header.version != SNAPSHOT_VERSION {
            return Err(TrainError::MalformedSnapshot(format!(
                "unrecognized format {} version {}",
                header.format, header.version
            )));
        }
        if header.vocab_hash != vocab.hash() {
            return Err(TrainError::MalformedSnapshot(
                "vocabulary differs from the one the snapshot trained with".into(),
            ));
        }
        let blob = read_f64s(&with_ext(stem, "bin"))?;
        if blob.len() != 3 * header.n_params {
            return Err(TrainError::MalformedSnapshot(format!(
                "blob holds {} values, expected {}",
                blob.len(),
                3 * header.n_params
            )));
        }
        if blob_sha256(&blob) != header.blob_sha256 {
            return Err(TrainError::MalformedSnapshot(
                "blob content hash does not match the header".into(),
            ));
        }
        let n = header.n_params;
        let layout = Arc::new(Layout::of(&header.model));
        if layout.total_len() != n {
            return Err(TrainError::MalformedSnapshot(
                "parameter count does not match the model configuration".into(),
            ));
        }
        if header.best_params.as_ref().is_some_and(|b| b.len() != n) {
            return Err(TrainError::MalformedSnapshot(
                "best-checkpoint parameter count does not match the model".into(),
            ));
        }
        let params = Parameters::from_data(Arc::clone(&layout), blob[..n].to_vec())?;
        let opt = AdamState::from_parts(
            header.train.adam,
            blob[n..2 * n].to_vec(),
            blob[2 * n..].to_vec(),
            header.adam_t,
        )?;
        Self::assemble(
            header.model,
            header.train,
            tasks,
            pools,
            vocab,
            params,
            opt,
            header.step,
            header.epoch,
            header.step_in_epoch,
            header.log,
            header.evals,
            header.best_dev_accuracy,
            header.best_params,
            header.bad_evals,
        )
    }

    #[must_use]
    pub fn params(&self) -> &Parameters {
        &self.params
    }

    /// Mutable parameter access, for warm starts and fault-injection tests.
    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    #[must_use]
    pub fn model(&self) -> &TransformerModel {
        &self.model
    }

    #[must_use]
    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    #[must_use]
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    #[must_use]
    pub fn tasks(&self) -> &[DatasetManifest] {
        &self.tasks
    }

    #[must_use]
    pub fn pools(&self) -> &[ParaphrasePool] {
        &self.pools
    }

    #[must_use]
    pub fn step(&self) -> u64 {
        self.step
    }

    #[must_use]
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    #[must_use]
    pub fn step_in_epoch(&self) -> u64 {
        self.step_in_epoch
    }

    #[must_use]
    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    #[must_use]
    pub fn evals(&self) -> &[DevRecord] {
        &self.evals
    }
}

/// `stem` plus a dotted extension, preserving any existing path components.
fn with_ext(stem: &Path, ext: &str) -> std::path::PathBuf {
    let mut name = std::ffi::OsString::from(stem.as_os_str().to_owned());
    name.push(".");
    name.push(ext);
    std::path::PathBuf::from(name)
}
