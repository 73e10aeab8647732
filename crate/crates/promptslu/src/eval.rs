//! Metric suite and evaluation harness: per-task metrics, instruction
//! following rate, random/majority baselines, seen/unseen-paraphrase and
//! option-order sweeps, and a plain-text results table.
//!
//! `run_eval` is a pure function of (parameters, manifest, pool, config):
//! repeated runs produce bitwise-identical reports, which the end-to-end
//! reproducibility guarantee builds on.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    beam_search, greedy_decode, DecodeConfig, DecodeConstraint, Hypothesis, ModelError,
    ModelScorer, Parameters, TokenScorer, TransformerModel,
};
use crate::prompts::{
    build_instruction_prompt, build_specifier_prompt, decode_option, derived_order, is_novel,
    CompiledPrompt, Instruction, InstructionSource, OptionOutcome, ParaphrasePool, PromptError,
    TaskSpecifier,
};
use crate::tasks::{DatasetManifest, MetricKind, TaskDescriptor, TaskKind, FILL, SEP};
use crate::vocab::{TokenId, VocabError, Vocabulary, EOS};

/// How many uniform-guess simulations the random baseline averages over.
pub const RANDOM_BASELINE_SIMS: u64 = 1000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions and references differ in length ({preds} vs {refs})")]
    LengthMismatch { preds: usize, refs: usize },
    #[error("metric needs at least one example")]
    EmptyEvaluation,
    #[error("scores contain a single class; error rates are undefined")]
    DegenerateScores,
    #[error("reference sequence does not parse as entity runs: {0:?}")]
    MalformedReference(Vec<String>),
    #[error("metric {metric:?} is not defined for {kind:?} tasks")]
    MetricMismatch { metric: MetricKind, kind: TaskKind },
    #[error("task `{0}` needs an instruction pool for this condition")]
    MissingPool(String),
    #[error("phrase `{0}` fails the novelty gate against the seen pool")]
    PhraseNotNovel(String),
    #[error("option-order sweeps need at least two order slots")]
    NeedTwoOrders,
    #[error("task `{0}` has no option list to permute")]
    NoOptions(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

// ------------------------------------------------------------------
// predictions
// ------------------------------------------------------------------

/// What a decoded token stream resolved to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolved {
    /// Classification: the emitted option number (or specifier-mode label
    /// token) mapped back to a label.
    Label(String),
    /// Classification emission that does not name a listed option.
    NotAnOption,
    /// Sequence task: the raw decoded tokens stand as the prediction.
    Sequence(Vec<String>),
}

/// One scored example, self-contained enough for external re-scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Instruction phrase used, when the condition draws from a pool.
    pub phrase: Option<String>,
    /// Derived-order slot used, for option-order sweeps.
    pub order_slot: Option<usize>,
    /// Index of the example within the evaluated split.
    pub example: usize,
    pub reference: Vec<String>,
    /// Decoded tokens, end marker excluded.
    pub raw: Vec<String>,
    pub resolved: Resolved,
    /// Softmax probability of the positive class at the first emitted
    /// position; present only for EER tasks.
    pub positive_score: Option<f64>,
}

/// Serializes predictions as one JSON object per line.
pub fn predictions_to_jsonl(records: &[PredictionRecord]) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

// ------------------------------------------------------------------
// metrics over resolved predictions
// ------------------------------------------------------------------

fn check_lengths(preds: usize, refs: usize) -> Result<(), EvalError> {
    if preds != refs {
        return Err(EvalError::LengthMismatch { preds, refs });
    }
    if refs == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    Ok(())
}

/// Fraction of predictions exactly matching the reference label; anything
/// that is not a resolved label counts as wrong.
pub fn accuracy(preds: &[Resolved], refs: &[String]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), refs.len())?;
    let correct = preds
        .iter()
        .zip(refs)
        .filter(|(p, r)| matches!(p, Resolved::Label(l) if l == *r))
        .count();
    Ok(correct as f64 / refs.len() as f64)
}

fn class_f1(preds: &[Resolved], refs: &[String], class: &str) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, r) in preds.iter().zip(refs) {
        let hit = matches!(p, Resolved::Label(l) if l == class);
        match (hit, r == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Unweighted mean over `labels` of per-class F1. A class with neither
/// support nor predictions contributes 0 by definition.
pub fn macro_f1(preds: &[Resolved], refs: &[String], labels: &[String]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), refs.len())?;
    if labels.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let sum: f64 = labels.iter().map(|c| class_f1(preds, refs, c)).sum();
    Ok(sum / labels.len() as f64)
}

/// F1 of the positive class alone (two-class tasks).
pub fn binary_f1(preds: &[Resolved], refs: &[String], positive: &str) -> Result<f64, EvalError> {
    check_lengths(preds.len(), refs.len())?;
    Ok(class_f1(preds, refs, positive))
}

/// Equal error rate over (score, is_positive) pairs. Thresholds sweep the
/// observed scores with the rule "positive iff score >= t"; EER is
/// (FAR+FRR)/2 at the threshold minimizing |FAR-FRR|, ties resolved to the
/// lower threshold.
pub fn eer(scores: &[(f64, bool)]) -> Result<f64, EvalError> {
    let n_pos = scores.iter().filter(|(_, p)| *p).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateScores);
    }
    let mut thresholds: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best: Option<(f64, f64)> = None; // (|FAR-FRR|, EER)
    for &t in &thresholds {
        let fp = scores.iter().filter(|(s, p)| !*p && *s >= t).count();
        let fn_ = scores.iter().filter(|(s, p)| *p && *s < t).count();
        let far = fp as f64 / n_neg as f64;
        let frr = fn_ as f64 / n_pos as f64;
        let gap = (far - frr).abs();
        // Strict improvement keeps the lowest threshold on ties.
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, (far + frr) / 2.0));
        }
    }
    Ok(best.expect("at least one threshold").1)
}

// ------------------------------------------------------------------
// sequence metrics
// ------------------------------------------------------------------

/// Parses a decoded stream as entity runs `tag FILL char+ SEP`, returning
/// `(tag, phrase)` pairs with the phrase's characters concatenated. Returns
/// `None` when the stream deviates from that grammar anywhere.
#[must_use]
pub fn parse_entity_runs(tokens: &[String]) -> Option<Vec<(String, String)>> {
    let toks: Vec<&str> = tokens
        .iter()
        .map(String::as_str)
        .filter(|t| *t != EOS)
        .collect();
    let mut pairs = vec![];
    let mut i = 0usize;
    while i < toks.len() {
        let tag = toks[i];
        if tag == FILL || tag == SEP {
            return None;
        }
        if toks.get(i + 1) != Some(&FILL) {
            return None;
        }
        i += 2;
        let mut phrase = String::new();
        while i < toks.len() && toks[i] != SEP {
            if toks[i] == FILL {
                return None;
            }
            phrase.push_str(toks[i]);
            i += 1;
        }
        if i == toks.len() || phrase.is_empty() {
            return None; // ran out before SEP, or no characters at all
        }
        i += 1; // past SEP
        pairs.push((tag.to_owned(), phrase));
    }
    Some(pairs)
}

/// Corpus-level outcome of entity-pair scoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SluOutcome {
    /// Micro F1 over exact (tag, phrase) pairs with multiset matching.
    pub f1: f64,
    /// Fraction of predictions that failed to parse as entity runs.
    pub malformed_rate: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

fn pair_counts(pairs: &[(String, String)]) -> BTreeMap<&(String, String), usize> {
    let mut counts = BTreeMap::new();
    for p in pairs {
        *counts.entry(p).or_insert(0) += 1;
    }
    counts
}

/// Micro F1 over (tag, phrase) pairs: each reference pair matches at most
/// one predicted pair. A prediction that does not parse counts all its
/// reference's pairs as misses and contributes nothing else.
pub fn slu_f1(preds: &[Vec<String>], refs: &[Vec<String>]) -> Result<SluOutcome, EvalError> {
    check_lengths(preds.len(), refs.len())?;
    let (mut tp, mut fp, mut fn_, mut malformed) = (0usize, 0usize, 0usize, 0usize);
    for (pred, reference) in preds.iter().zip(refs) {
        let ref_pairs = parse_entity_runs(reference)
            .ok_or_else(|| EvalError::MalformedReference(reference.clone()))?;
        match parse_entity_runs(pred) {
            None => {
                malformed += 1;
                fn_ += ref_pairs.len();
            }
            Some(pred_pairs) => {
                let ref_counts = pair_counts(&ref_pairs);
                let pred_counts = pair_counts(&pred_pairs);
                let matched: usize = pred_counts
                    .iter()
                    .map(|(pair, &n)| n.min(ref_counts.get(*pair).copied().unwrap_or(0)))
                    .sum();
                tp += matched;
                fp += pred_pairs.len() - matched;
                fn_ += ref_pairs.len() - matched;
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(SluOutcome {
        f1: if denom == 0 {
            1.0 // nothing to find and nothing claimed
        } else {
            2.0 * tp as f64 / denom as f64
        },
        malformed_rate: malformed as f64 / preds.len() as f64,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    })
}

/// Equality after whitespace normalization: runs collapse, ends trim.
#[must_use]
pub fn exact_match(pred: &str, reference: &str) -> bool {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    norm(pred) == norm(reference)
}

/// Fraction of token sequences whose space-joined form exactly matches.
pub fn exact_match_rate(preds: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), refs.len())?;
    let hits = preds
        .iter()
        .zip(refs)
        .filter(|(p, r)| exact_match(&p.join(" "), &r.join(" ")))
        .count();
    Ok(hits as f64 / refs.len() as f64)
}

/// Fraction of predictions that resolved to a listed option.
pub fn following_rate(preds: &[Resolved]) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let followed = preds
        .iter()
        .filter(|p| matches!(p, Resolved::Label(_)))
        .count();
    Ok(followed as f64 / preds.len() as f64)
}

// ------------------------------------------------------------------
// baselines
// ------------------------------------------------------------------

fn label_metric(
    metric: MetricKind,
    preds: &[Resolved],
    refs: &[String],
    labels: &[String],
) -> Result<f64, EvalError> {
    match metric {
        MetricKind::Accuracy => accuracy(preds, refs),
        MetricKind::F1 if labels.len() == 2 => binary_f1(preds, refs, &labels[1]),
        MetricKind::F1 => macro_f1(preds, refs, labels),
        other => Err(EvalError::MetricMismatch {
            metric: other,
            kind: TaskKind::Classification,
        }),
    }
}

/// Expected metric when guessing uniformly over the option list: the mean
/// over [`RANDOM_BASELINE_SIMS`] seeded simulations.
pub fn random_baseline(
    metric: MetricKind,
    labels: &[String],
    refs: &[String],
    seed: u64,
) -> Result<f64, EvalError> {
    if labels.is_empty() || refs.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let mut total = 0.0;
    for sim in 0..RANDOM_BASELINE_SIMS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sim);
        let preds: Vec<Resolved> = refs
            .iter()
            .map(|_| Resolved::Label(labels[rng.gen_range(0..labels.len())].clone()))
            .collect();
        total += label_metric(metric, &preds, refs, labels)?;
    }
    Ok(total / RANDOM_BASELINE_SIMS as f64)
}

/// Closed-form value of the random baseline where one exists (uniform
/// guessing over n options scores accuracy 1/n in expectation).
#[must_use]
pub fn random_baseline_analytic(metric: MetricKind, labels: &[String]) -> Option<f64> {
    match metric {
        MetricKind::Accuracy if !labels.is_empty() => Some(1.0 / labels.len() as f64),
        _ => None,
    }
}

/// The single most frequent training-split label, ties broken
/// lexicographically.
pub fn majority_label(train_refs: &[String]) -> Result<String, EvalError> {
    if train_refs.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
    for r in train_refs {
        *counts.entry(r).or_insert(0) += 1;
    }
    // BTreeMap iterates labels in lexicographic order, so the first maximum
    // is the lexicographically smallest among tied labels.
    let (label, _) = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
        .expect("non-empty counts");
    Ok(label.clone())
}

/// Metric scored by constantly predicting the modal training label.
pub fn majority_baseline(
    metric: MetricKind,
    labels: &[String],
    train_refs: &[String],
    eval_refs: &[String],
) -> Result<f64, EvalError> {
    let majority = majority_label(train_refs)?;
    let preds = vec![Resolved::Label(majority); eval_refs.len()];
    label_metric(metric, &preds, eval_refs, labels)
}

// ------------------------------------------------------------------
// evaluation harness
// ------------------------------------------------------------------

/// Which prompts an evaluation sweep draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCondition {
    /// Every training-pool phrase, canonical option order.
    Seen,
    /// Every held-out paraphrase (novelty-gated), canonical option order.
    Unseen,
    /// Held-out paraphrases crossed with fixed derived option orders.
    OptionOrderVariant,
    /// The compact task-specifier prompt; no instruction text or options.
    Specifier,
}

/// Everything an evaluation sweep depends on besides model and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub condition: PromptCondition,
    /// Constrain decoding to the legal answer set (option numbers, label
    /// tokens, or task output tokens).
    pub constrained: bool,
    pub decode: DecodeConfig,
    /// Seed for the random-baseline simulations.
    pub baseline_seed: u64,
    /// Derived-order slots for [`PromptCondition::OptionOrderVariant`].
    pub order_slots: Vec<usize>,
    /// Novelty threshold unseen phrases must clear against the seen pool.
    pub novelty_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            condition: PromptCondition::Seen,
            constrained: true,
            decode: DecodeConfig {
                beam_size: 1,
                length_penalty: 0.0,
                maxlen_ratio: 4.0,
            },
            baseline_seed: 0,
            order_slots: vec![100, 101],
            novelty_threshold: 0.9,
        }
    }
}

/// One prompt's worth of evaluation inside a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubRun {
    pub phrase: Option<String>,
    pub order_slot: Option<usize>,
    pub value: f64,
    pub following_rate: Option<f64>,
    pub malformed_rate: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineValues {
    /// Mean metric over seeded uniform-guess simulations.
    pub random: f64,
    /// Closed-form expectation where one exists.
    pub random_analytic: Option<f64>,
    /// Metric of constantly predicting the modal training label.
    pub majority: f64,
}

/// Aggregated outcome of one evaluation sweep over a task's test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_type: String,
    pub dataset: String,
    pub language: String,
    pub condition: PromptCondition,
    pub constrained: bool,
    pub metric_name: String,
    /// Arithmetic mean of the sub-run values.
    pub value: f64,
    /// Mean fraction of predictions naming a listed option (classification).
    pub following_rate: Option<f64>,
    /// Mean fraction of unparseable outputs (entity-pair tasks).
    pub malformed_rate: Option<f64>,
    /// Per-order-slot means, for option-order sweeps.
    pub order_means: Option<Vec<(usize, f64)>>,
    /// Guessing baselines; absent for score- and sequence-valued metrics.
    pub baselines: Option<BaselineValues>,
    /// Total examples scored across sub-runs.
    pub n_examples: usize,
    pub sub_runs: Vec<SubRun>,
}

/// A finished sweep: the report plus every prediction that fed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub predictions: Vec<PredictionRecord>,
}

/// Name under which the report states its headline metric.
#[must_use]
pub fn metric_name(task: &TaskDescriptor) -> &'static str {
    match task.metric {
        MetricKind::Accuracy => "accuracy",
        MetricKind::F1 if task.labels.len() == 2 => "binary_f1",
        MetricKind::F1 => "macro_f1",
        MetricKind::Eer => "eer",
        MetricKind::SluF1 => "slu_f1_exact",
        MetricKind::ExactMatch => "exact_match",
    }
}

struct PromptPlan {
    phrase: Option<String>,
    order_slot: Option<usize>,
    prompt: CompiledPrompt,
}

fn instruction_for(task: &TaskDescriptor, text: &str, source: InstructionSource) -> Instruction {
    Instruction {
        task_type: task.task_type.clone(),
        text: text.to_owned(),
        source,
    }
}

fn canonical_order(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn plan_prompts(
    task: &TaskDescriptor,
    pool: Option<&ParaphrasePool>,
    vocab: &Vocabulary,
    cfg: &EvalConfig,
) -> Result<Vec<PromptPlan>, EvalError> {
    let need_pool = || {
        pool.filter(|p| p.task_type == task.task_type)
            .ok_or_else(|| EvalError::MissingPool(task.task_type.clone()))
    };
    match cfg.condition {
        PromptCondition::Specifier => Ok(vec![PromptPlan {
            phrase: None,
            order_slot: None,
            prompt: build_specifier_prompt(&TaskSpecifier::of(task), vocab)?,
        }]),
        PromptCondition::Seen => {
            let pool = need_pool()?;
            let order = canonical_order(task.labels.len());
            pool.seen
                .iter()
                .map(|text| {
                    let instr = instruction_for(task, text, InstructionSource::SeenPool);
                    Ok(PromptPlan {
                        phrase: Some(text.clone()),
                        order_slot: None,
                        prompt: build_instruction_prompt(&instr, task, &order)?,
                    })
                })
                .collect()
        }
        PromptCondition::Unseen => {
            let pool = need_pool()?;
            let order = canonical_order(task.labels.len());
            pool.unseen
                .iter()
                .map(|text| {
                    if !is_novel(text, &pool.seen, cfg.novelty_threshold)? {
                        return Err(EvalError::PhraseNotNovel(text.clone()));
                    }
                    let instr = instruction_for(task, text, InstructionSource::UnseenPool);
                    Ok(PromptPlan {
                        phrase: Some(text.clone()),
                        order_slot: None,
                        prompt: build_instruction_prompt(&instr, task, &order)?,
                    })
                })
                .collect()
        }
        PromptCondition::OptionOrderVariant => {
            if task.kind != TaskKind::Classification {
                return Err(EvalError::NoOptions(task.task_type.clone()));
            }
            if cfg.order_slots.len() < 2 {
                return Err(EvalError::NeedTwoOrders);
            }
            let pool = need_pool()?;
            let mut plans = vec![];
            for text in &pool.unseen {
                if !is_novel(text, &pool.seen, cfg.novelty_threshold)? {
                    return Err(EvalError::PhraseNotNovel(text.clone()));
                }
                for &slot in &cfg.order_slots {
                    let order = derived_order(task.labels.len(), &task.dataset, text, slot);
                    let instr = instruction_for(task, text, InstructionSource::UnseenPool);
                    plans.push(PromptPlan {
                        phrase: Some(text.clone()),
                        order_slot: Some(slot),
                        prompt: build_instruction_prompt(&instr, task, &order)?,
                    });
                }
            }
            Ok(plans)
        }
    }
}

/// Token ids decoding may be constrained to under this prompt.
fn constraint_for(
    task: &TaskDescriptor,
    prompt: &CompiledPrompt,
    vocab: &Vocabulary,
    constrained: bool,
) -> Result<DecodeConstraint, EvalError> {
    if !constrained {
        return Ok(DecodeConstraint::None);
    }
    Ok(match task.kind {
        TaskKind::Classification => {
            let ids = match &prompt.option_map {
                // Option prompts answer with the option's number.
                Some(map) => (0..map.len())
                    .map(|i| vocab.id(&i.to_string()))
                    .collect::<Result<Vec<TokenId>, _>>()?,
                // Specifier prompts answer with the label token itself.
                None => task
                    .labels
                    .iter()
                    .map(|l| vocab.id(l))
                    .collect::<Result<Vec<TokenId>, _>>()?,
            };
            DecodeConstraint::SingleChoice(ids)
        }
        TaskKind::SeqGen => {
            let ids = task
                .output_tokens
                .iter()
                .map(|t| vocab.id(t))
                .collect::<Result<Vec<TokenId>, _>>()?;
            DecodeConstraint::Restricted(ids)
        }
    })
}

fn resolve_classification(words: &[String], prompt: &CompiledPrompt, labels: &[String]) -> Resolved {
    match &prompt.option_map {
        Some(map) => match decode_option(words, map) {
            OptionOutcome::Label(l) => Resolved::Label(l),
            OptionOutcome::NotAnOption => Resolved::NotAnOption,
        },
        None => {
            let toks: Vec<&String> = words.iter().filter(|t| t.as_str() != EOS).collect();
            match &toks[..] {
                [one] if labels.contains(one) => Resolved::Label((*one).clone()),
                _ => Resolved::NotAnOption,
            }
        }
    }
}

/// Softmax probability the first emitted position assigns to the positive
/// class's answer token (its option number, or its label under specifiers).
fn positive_score(
    scorer: &mut ModelScorer,
    prompt: &CompiledPrompt,
    task: &TaskDescriptor,
    vocab: &Vocabulary,
) -> Result<f64, EvalError> {
    let positive = &task.labels[1];
    let token = match &prompt.option_map {
        Some(map) => {
            let idx = map
                .iter()
                .position(|l| l == positive)
                .expect("positive label listed in option map");
            idx.to_string()
        }
        None => positive.clone(),
    };
    let id = vocab.id(&token)?;
    let log_probs = scorer.step_log_probs(&[])?;
    Ok(log_probs[id.0].exp())
}

fn decode_one(
    scorer: &mut ModelScorer,
    cfg: &DecodeConfig,
    input_len: usize,
    eos: TokenId,
    constraint: &DecodeConstraint,
) -> Result<Hypothesis, ModelError> {
    if cfg.beam_size <= 1 {
        greedy_decode(scorer, cfg, input_len, eos, constraint)
    } else {
        let mut hyps = beam_search(scorer, cfg, input_len, eos, constraint)?;
        Ok(hyps.swap_remove(0))
    }
}

struct SubRunOutcome {
    value: f64,
    following: Option<f64>,
    malformed: Option<f64>,
    records: Vec<PredictionRecord>,
}

fn eval_one_prompt(
    model: &TransformerModel,
    params: &Parameters,
    manifest: &DatasetManifest,
    vocab: &Vocabulary,
    plan: &PromptPlan,
    cfg: &EvalConfig,
) -> Result<SubRunOutcome, EvalError> {
    let task = &manifest.descriptor;
    if manifest.test.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let prompt_ids = vocab.encode(&plan.prompt.tokens)?;
    let constraint = constraint_for(task, &plan.prompt, vocab, cfg.constrained)?;
    let want_score = task.metric == MetricKind::Eer;

    let mut records = Vec::with_capacity(manifest.test.len());
    for (idx, ex) in manifest.test.iter().enumerate() {
        let input = vocab.encode(&ex.input)?;
        let mut scorer = ModelScorer::new(model, params, &input, &prompt_ids)?;
        let score = if want_score {
            Some(positive_score(&mut scorer, &plan.prompt, task, vocab)?)
        } else {
            None
        };
        let hyp = decode_one(&mut scorer, &cfg.decode, input.len(), vocab.eos(), &constraint)?;
        let words = vocab.decode(&hyp.tokens)?;
        let resolved = match task.kind {
            TaskKind::Classification => resolve_classification(&words, &plan.prompt, &task.labels),
            TaskKind::SeqGen => Resolved::Sequence(words.clone()),
        };
        records.push(PredictionRecord {
            phrase: plan.phrase.clone(),
            order_slot: plan.order_slot,
            example: idx,
            reference: ex.target.clone(),
            raw: words,
            resolved,
            positive_score: score,
        });
    }

    let refs: Vec<String> = manifest.test.iter().map(|ex| ex.target[0].clone()).collect();
    let resolved: Vec<Resolved> = records.iter().map(|r| r.resolved.clone()).collect();
    let (value, malformed) = match task.metric {
        MetricKind::Accuracy | MetricKind::F1 => {
            (label_metric(task.metric, &resolved, &refs, &task.labels)?, None)
        }
        MetricKind::Eer => {
            let scores: Vec<(f64, bool)> = records
                .iter()
                .zip(&refs)
                .map(|(r, gold)| {
                    (
                        r.positive_score.expect("scores collected for EER"),
                        gold == &task.labels[1],
                    )
                })
                .collect();
            (eer(&scores)?, None)
        }
        MetricKind::SluF1 => {
            let preds: Vec<Vec<String>> = records.iter().map(|r| r.raw.clone()).collect();
            let targets: Vec<Vec<String>> =
                manifest.test.iter().map(|ex| ex.target.clone()).collect();
            let outcome = slu_f1(&preds, &targets)?;
            (outcome.f1, Some(outcome.malformed_rate))
        }
        MetricKind::ExactMatch => {
            let preds: Vec<Vec<String>> = records.iter().map(|r| r.raw.clone()).collect();
            let targets: Vec<Vec<String>> =
                manifest.test.iter().map(|ex| ex.target.clone()).collect();
            (exact_match_rate(&preds, &targets)?, None)
        }
    };
    let following = match task.kind {
        TaskKind::Classification => Some(following_rate(&resolved)?),
        TaskKind::SeqGen => None,
    };
    Ok(SubRunOutcome {
        value,
        following,
        malformed,
        records,
    })
}

/// How many of `examples` decode correctly under one fixed prompt with
/// constrained greedy/beam decoding: label match for classification, exact
/// token match for sequence tasks. The quick quality probe trainers run
/// between optimizer steps; full sweeps go through [`run_eval`].
pub fn count_correct(
    model: &TransformerModel,
    params: &Parameters,
    vocab: &Vocabulary,
    task: &TaskDescriptor,
    prompt: &CompiledPrompt,
    examples: &[crate::tasks::Example],
    decode: &DecodeConfig,
) -> Result<usize, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let prompt_ids = vocab.encode(&prompt.tokens)?;
    let constraint = constraint_for(task, prompt, vocab, true)?;
    let mut correct = 0usize;
    for ex in examples {
        let input = vocab.encode(&ex.input)?;
        let mut scorer = ModelScorer::new(model, params, &input, &prompt_ids)?;
        let hyp = decode_one(&mut scorer, decode, input.len(), vocab.eos(), &constraint)?;
        let words = vocab.decode(&hyp.tokens)?;
        let ok = match task.kind {
            TaskKind::Classification => {
                matches!(resolve_classification(&words, prompt, &task.labels),
                         Resolved::Label(l) if l == ex.target[0])
            }
            TaskKind::SeqGen => words == ex.target,
        };
        correct += usize::from(ok);
    }
    Ok(correct)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Evaluates one task's test split under the configured prompt condition.
///
/// Pure in all inputs: repeated calls return bitwise-identical outcomes.
pub fn run_eval(
    model: &TransformerModel,
    params: &Parameters,
    manifest: &DatasetManifest,
    pool: Option<&ParaphrasePool>,
    vocab: &Vocabulary,
    cfg: &EvalConfig,
) -> Result<EvalOutcome, EvalError> {
    let task = &manifest.descriptor;
    let plans = plan_prompts(task, pool, vocab, cfg)?;
    let mut sub_runs = vec![];
    let mut predictions = vec![];
    for plan in &plans {
        let outcome = eval_one_prompt(model, params, manifest, vocab, plan, cfg)?;
        sub_runs.push(SubRun {
            phrase: plan.phrase.clone(),
            order_slot: plan.order_slot,
            value: outcome.value,
            following_rate: outcome.following,
            malformed_rate: outcome.malformed,
            n: outcome.records.len(),
        });
        predictions.extend(outcome.records);
    }

    let order_means = (cfg.condition == PromptCondition::OptionOrderVariant).then(|| {
        cfg.order_slots
            .iter()
            .map(|&slot| {
                let m = mean(
                    sub_runs
                        .iter()
                        .filter(|s| s.order_slot == Some(slot))
                        .map(|s| s.value),
                )
                .expect("every slot has sub-runs");
                (slot, m)
            })
            .collect()
    });

    let baselines = match (task.kind, task.metric) {
        (TaskKind::Classification, MetricKind::Accuracy | MetricKind::F1) => {
            let test_refs: Vec<String> =
                manifest.test.iter().map(|ex| ex.target[0].clone()).collect();
            let train_refs: Vec<String> =
                manifest.train.iter().map(|ex| ex.target[0].clone()).collect();
            Some(BaselineValues {
                random: random_baseline(task.metric, &task.labels, &test_refs, cfg.baseline_seed)?,
                random_analytic: random_baseline_analytic(task.metric, &task.labels),
                majority: majority_baseline(task.metric, &task.labels, &train_refs, &test_refs)?,
            })
        }
        _ => None,
    };

    let report = EvalReport {
        task_type: task.task_type.clone(),
        dataset: task.dataset.clone(),
        language: task.language.clone(),
        condition: cfg.condition,
        constrained: cfg.constrained,
        metric_name: metric_name(task).to_owned(),
        value: mean(sub_runs.iter().map(|s| s.value)).expect("at least one sub-run"),
        following_rate: mean(sub_runs.iter().filter_map(|s| s.following_rate)),
        malformed_rate: mean(sub_runs.iter().filter_map(|s| s.malformed_rate)),
        order_means,
        baselines,
        n_examples: sub_runs.iter().map(|s| s.n).sum(),
        sub_runs,
    };
    Ok(EvalOutcome {
        report,
        predictions,
    })
}

// ------------------------------------------------------------------
// rendering
// ------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "—".to_owned(), |x| format!("{x:.3}"))
}

/// Renders reports as an aligned table with one row per task and one value
/// column per prompt condition, mirroring the seen / unseen / option-order
/// presentation, plus following rate and baselines.
#[must_use]
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut rows: BTreeMap<(String, String), BTreeMap<&'static str, &EvalReport>> = BTreeMap::new();
    for report in reports {
        let key = (report.task_type.clone(), report.dataset.clone());
        let col = match report.condition {
            PromptCondition::Seen => "seen",
            PromptCondition::Unseen => "unseen",
            PromptCondition::OptionOrderVariant => "diff_order",
            PromptCondition::Specifier => "specifier",
        };
        rows.entry(key).or_default().insert(col, report);
    }
    let headers = [
        "task", "dataset", "metric", "seen", "unseen", "diff_order", "specifier", "follow",
        "random", "majority",
    ];
    let mut table: Vec<Vec<String>> = vec![headers.iter().map(|s| (*s).to_owned()).collect()];
    for ((task, dataset), cols) in &rows {
        let any = cols.values().next().expect("non-empty row");
        let value_of = |c: &str| fmt_opt(cols.get(c).map(|r| r.value));
        let follow = mean(cols.values().filter_map(|r| r.following_rate));
        let baselines = cols.values().find_map(|r| r.baselines);
        table.push(vec![
            task.clone(),
            dataset.clone(),
            any.metric_name.clone(),
            value_of("seen"),
            value_of("unseen"),
            value_of("diff_order"),
            value_of("specifier"),
            fmt_opt(follow),
            fmt_opt(baselines.map(|b| b.random)),
            fmt_opt(baselines.map(|b| b.majority)),
        ]);
    }
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}", w = w))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

// ------------------------------------------------------------------
// tests
// ------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::{synth_classification, synth_seqgen, ClassificationSpec, SeqGenSpec};
    use rand::seq::SliceRandom;

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| (*s).to_owned()).collect()
    }

    fn lab(l: &str) -> Resolved {
        Resolved::Label(l.to_owned())
    }

    // -------------------------------------------------- accuracy

    #[test]
    fn accuracy_counts_matches_and_rejects_non_options() {
        let refs = labels(&["a", "b", "a", "c"]);
        let all = vec![lab("a"), lab("b"), lab("a"), lab("c")];
        assert_eq!(accuracy(&all, &refs).unwrap(), 1.0);
        let none = vec![lab("b"), lab("a"), lab("c"), lab("a")];
        assert_eq!(accuracy(&none, &refs).unwrap(), 0.0);
        let three = vec![lab("a"), lab("b"), lab("a"), Resolved::NotAnOption];
        assert_eq!(accuracy(&three, &refs).unwrap(), 0.75);
        assert!(matches!(
            accuracy(&all, &[]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    // -------------------------------------------------- F1

    #[test]
    fn macro_f1_hand_cases() {
        let refs = labels(&["x", "y"]);
        let perfect = vec![lab("x"), lab("y")];
        assert_eq!(macro_f1(&perfect, &refs, &labels(&["x", "y"])).unwrap(), 1.0);

        // Symmetric binary confusion: each class has TP=1, FP=1, FN=1.
        let refs = labels(&["x", "x", "y", "y"]);
        let preds = vec![lab("x"), lab("y"), lab("y"), lab("x")];
        assert_eq!(macro_f1(&preds, &refs, &labels(&["x", "y"])).unwrap(), 0.5);

        // A label never predicted nor present contributes 0 to the mean.
        let with_ghost = macro_f1(&preds, &refs, &labels(&["x", "y", "z"])).unwrap();
        assert!((with_ghost - (0.5 + 0.5) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn binary_f1_scores_the_positive_class_only() {
        // positive = "p": TP=2, FP=1, FN=0 -> P=2/3, R=1 -> F1=0.8.
        let refs = labels(&["p", "p", "n", "n"]);
        let preds = vec![lab("p"), lab("p"), lab("p"), lab("n")];
        assert!((binary_f1(&preds, &refs, "p").unwrap() - 0.8).abs() < 1e-12);
        // Inverting the positive class changes the score.
        assert!((binary_f1(&preds, &refs, "n").unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    /// Independent confusion-matrix oracle: builds the matrix by counting,
    /// then computes per-class P/R/F1 from raw definitions.
    fn confusion_oracle_macro_f1(preds: &[Resolved], refs: &[String], labels: &[String]) -> f64 {
        let mut f1_sum = 0.0;
        for class in labels {
            let mut tp = 0.0;
            let mut pred_pos = 0.0;
            let mut actual_pos = 0.0;
            for (p, r) in preds.iter().zip(refs) {
                let predicted = matches!(p, Resolved::Label(l) if l == class);
                if predicted {
                    pred_pos += 1.0;
                }
                if r == class {
                    actual_pos += 1.0;
                }
                if predicted && r == class {
                    tp += 1.0;
                }
            }
            let precision = if pred_pos == 0.0 { 0.0 } else { tp / pred_pos };
            let recall = if actual_pos == 0.0 { 0.0 } else { tp / actual_pos };
            f1_sum += if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
        }
        f1_sum / labels.len() as f64
    }

    #[test]
    fn f1_and_accuracy_match_confusion_matrix_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let alphabet = labels(&["a", "b", "c", "d", "e"]);
        for _ in 0..150 {
            let n_classes = rng.gen_range(2..=alphabet.len());
            let classes = &alphabet[..n_classes];
            let n = rng.gen_range(1..30);
            let refs: Vec<String> = (0..n)
                .map(|_| classes[rng.gen_range(0..n_classes)].clone())
                .collect();
            let preds: Vec<Resolved> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.1) {
                        Resolved::NotAnOption
                    } else {
                        lab(&classes[rng.gen_range(0..n_classes)])
                    }
                })
                .collect();
            let got = macro_f1(&preds, &refs, classes).unwrap();
            let want = confusion_oracle_macro_f1(&preds, &refs, classes);
            assert!((got - want).abs() < 1e-9, "macro F1 {got} vs oracle {want}");

            let hits = preds
                .iter()
                .zip(&refs)
                .filter(|(p, r)| matches!(p, Resolved::Label(l) if &l == r))
                .count();
            let acc = accuracy(&preds, &refs).unwrap();
            assert!((acc - hits as f64 / n as f64).abs() < 1e-12);
        }
    }

    // -------------------------------------------------- EER

    #[test]
    fn eer_separable_identical_and_hand_cases() {
        let sep = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        assert_eq!(eer(&sep).unwrap(), 0.0);

        let same = [(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(eer(&same).unwrap(), 0.5);

        // Frozen hand case: threshold 0.7 gives FAR = FRR = 1/3.
        let hand = [
            (0.9, true),
            (0.8, true),
            (0.4, true),
            (0.7, false),
            (0.3, false),
            (0.2, false),
        ];
        assert!((eer(&hand).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        assert!(matches!(
            eer(&[(0.5, true)]),
            Err(EvalError::DegenerateScores)
        ));
    }

    /// Dumb enumeration oracle: tries every observed threshold in ascending
    /// order and keeps the first minimizer of |FAR - FRR|.
    fn eer_oracle(scores: &[(f64, bool)]) -> f64 {
        let mut ts: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let n_pos = scores.iter().filter(|(_, p)| *p).count() as f64;
        let n_neg = scores.len() as f64 - n_pos;
        let mut best_gap = f64::INFINITY;
        let mut best_eer = f64::NAN;
        for t in ts {
            let mut fp = 0.0;
            let mut fn_ = 0.0;
            for &(s, p) in scores {
                if p && s < t {
                    fn_ += 1.0;
                }
                if !p && s >= t {
                    fp += 1.0;
                }
            }
            let far = fp / n_neg;
            let frr = fn_ / n_pos;
            if (far - frr).abs() < best_gap {
                best_gap = (far - frr).abs();
                best_eer = (far + frr) / 2.0;
            }
        }
        best_eer
    }

    #[test]
    fn eer_matches_threshold_enumeration_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..150 {
            let n = rng.gen_range(2..40);
            let mut scores: Vec<(f64, bool)> = (0..n)
                .map(|_| {
                    // Quantized scores force plenty of threshold ties.
                    let s = f64::from(rng.gen_range(0..10)) / 10.0;
                    (s, rng.gen_bool(0.5))
                })
                .collect();
            if !scores.iter().any(|(_, p)| *p) {
                scores[0].1 = true;
            }
            if scores.iter().all(|(_, p)| *p) {
                scores[0].1 = false;
            }
            if scores.len() < 2 {
                continue;
            }
            let got = eer(&scores).unwrap();
            let want = eer_oracle(&scores);
            assert!((got - want).abs() < 1e-9, "EER {got} vs oracle {want}");
        }
    }

    // -------------------------------------------------- SLU F1

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| (*s).to_owned()).collect()
    }

    #[test]
    fn entity_run_parser_accepts_grammar_and_rejects_deviations() {
        let good = toks(&["sl:date", "FILL", "m", "a", "y", "SEP"]);
        assert_eq!(
            parse_entity_runs(&good).unwrap(),
            vec![("sl:date".to_owned(), "may".to_owned())]
        );
        let two = toks(&[
            "sl:date", "FILL", "m", "a", "y", "SEP", "sl:place", "FILL", "o", "s", "SEP",
        ]);
        assert_eq!(parse_entity_runs(&two).unwrap().len(), 2);
        assert_eq!(parse_entity_runs(&[]).unwrap(), vec![]);
        // EOS tokens are ignored wherever they appear.
        let with_eos = toks(&["sl:date", "FILL", "m", "SEP", "EOS"]);
        assert_eq!(parse_entity_runs(&with_eos).unwrap().len(), 1);

        for bad in [
            toks(&["FILL", "m", "SEP"]),                 // missing tag
            toks(&["sl:date", "m", "SEP"]),              // missing FILL
            toks(&["sl:date", "FILL", "SEP"]),           // empty phrase
            toks(&["sl:date", "FILL", "m"]),             // no SEP
            toks(&["sl:date", "FILL", "m", "FILL"]),     // FILL inside phrase
            toks(&["sl:date", "FILL", "m", "SEP", "x"]), // trailing partial run
        ] {
            assert_eq!(parse_entity_runs(&bad), None, "{bad:?}");
        }
    }

    #[test]
    fn slu_f1_hand_cases() {
        let r = toks(&["sl:date", "FILL", "m", "SEP", "sl:place", "FILL", "o", "SEP"]);
        let perfect = slu_f1(&[r.clone()], &[r.clone()]).unwrap();
        assert_eq!(perfect.f1, 1.0);
        assert_eq!(perfect.malformed_rate, 0.0);

        // One of two reference pairs predicted, nothing spurious:
        // P=1, R=1/2, F1=2/3.
        let half = toks(&["sl:date", "FILL", "m", "SEP"]);
        let got = slu_f1(&[half], &[r.clone()]).unwrap();
        assert!((got.f1 - 2.0 / 3.0).abs() < 1e-12);

        // A pair predicted twice but present once: one TP, one FP.
        let twice = toks(&[
            "sl:date", "FILL", "m", "SEP", "sl:date", "FILL", "m", "SEP",
        ]);
        let once = toks(&["sl:date", "FILL", "m", "SEP"]);
        let dup = slu_f1(&[twice], &[once]).unwrap();
        assert_eq!((dup.true_positives, dup.false_positives, dup.false_negatives), (1, 1, 0));

        // Malformed prediction: all reference pairs count as misses.
        let broken = toks(&["sl:date", "m", "SEP"]);
        let missed = slu_f1(&[broken], &[r.clone()]).unwrap();
        assert_eq!(missed.f1, 0.0);
        assert_eq!(missed.malformed_rate, 1.0);
        assert_eq!(missed.false_negatives, 2);

        // Malformed reference is a caller bug, not scoreable data.
        assert!(matches!(
            slu_f1(&[r], &[toks(&["FILL"])]),
            Err(EvalError::MalformedReference(_))
        ));
    }

    /// Brute-force matcher oracle: maximum number of pred->ref matches over
    /// all injective assignments, found by recursive enumeration.
    fn match_oracle(preds: &[(String, String)], refs: &[(String, String)]) -> usize {
        fn go(preds: &[(String, String)], used: &mut Vec<bool>, refs: &[(String, String)]) -> usize {
            let Some(p) = preds.first() else { return 0 };
            let rest = &preds[1..];
            // Option 1: leave p unmatched.
            let mut best = go(rest, used, refs);
            // Option 2: match p to any unused equal reference pair.
            for (j, r) in refs.iter().enumerate() {
                if !used[j] && r == p {
                    used[j] = true;
                    best = best.max(1 + go(rest, used, refs));
                    used[j] = false;
                }
            }
            best
        }
        go(preds, &mut vec![false; refs.len()], refs)
    }

    #[test]
    fn slu_f1_matches_bipartite_matcher_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let tags = ["sl:a", "sl:b"];
        let phrases = ["x", "y", "xy"];
        let draw_pairs = |rng: &mut ChaCha8Rng| -> Vec<(String, String)> {
            (0..rng.gen_range(1..4))
                .map(|_| {
                    (
                        tags[rng.gen_range(0..tags.len())].to_owned(),
                        phrases[rng.gen_range(0..phrases.len())].to_owned(),
                    )
                })
                .collect()
        };
        let encode = |pairs: &[(String, String)]| -> Vec<String> {
            let mut out = vec![];
            for (tag, phrase) in pairs {
                out.push(tag.clone());
                out.push(FILL.to_owned());
                out.extend(phrase.chars().map(String::from));
                out.push(SEP.to_owned());
            }
            out
        };
        for _ in 0..120 {
            let n_examples = rng.gen_range(1..4);
            let mut pred_seqs = vec![];
            let mut ref_seqs = vec![];
            let mut tp_want = 0usize;
            let mut pred_total = 0usize;
            let mut ref_total = 0usize;
            for _ in 0..n_examples {
                let preds = draw_pairs(&mut rng);
                let refs = draw_pairs(&mut rng);
                tp_want += match_oracle(&preds, &refs);
                pred_total += preds.len();
                ref_total += refs.len();
                pred_seqs.push(encode(&preds));
                ref_seqs.push(encode(&refs));
            }
            let got = slu_f1(&pred_seqs, &ref_seqs).unwrap();
            assert_eq!(got.true_positives, tp_want, "TP disagrees with matcher");
            let denom = (2 * tp_want + (pred_total - tp_want) + (ref_total - tp_want)) as f64;
            let want_f1 = if denom == 0.0 { 1.0 } else { 2.0 * tp_want as f64 / denom };
            assert!((got.f1 - want_f1).abs() < 1e-9);
        }
    }

    // -------------------------------------------------- exact match

    #[test]
    fn exact_match_normalizes_whitespace() {
        assert!(exact_match("go to osaka", "go to osaka"));
        assert!(!exact_match("go to osaka", "go to paris"));
        assert!(exact_match("go  to   osaka", " go to osaka "));
        let rate = exact_match_rate(
            &[toks(&["a", "b"]), toks(&["a"])],
            &[toks(&["a", "b"]), toks(&["b"])],
        )
        .unwrap();
        assert_eq!(rate, 0.5);
    }

    // -------------------------------------------------- following rate

    #[test]
    fn following_rate_counts_resolved_options() {
        let preds = vec![lab("a"), Resolved::NotAnOption, lab("b"), lab("a")];
        assert_eq!(following_rate(&preds).unwrap(), 0.75);
        let ten: Vec<Resolved> = (0..10)
            .map(|i| if i < 9 { lab("a") } else { Resolved::NotAnOption })
            .collect();
        assert!((following_rate(&ten).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(
            following_rate(&[Resolved::NotAnOption, Resolved::NotAnOption]).unwrap(),
            0.0
        );
        assert!(matches!(following_rate(&[]), Err(EvalError::EmptyEvaluation)));
    }

    // -------------------------------------------------- baselines

    #[test]
    fn random_baseline_agrees_with_analytic_accuracy() {
        let classes = labels(&["a", "b", "c", "d"]);
        let refs: Vec<String> = (0..200).map(|i| classes[i % 4].clone()).collect();
        let sim = random_baseline(MetricKind::Accuracy, &classes, &refs, 9).unwrap();
        let analytic = random_baseline_analytic(MetricKind::Accuracy, &classes).unwrap();
        assert_eq!(analytic, 0.25);
        // SE of the mean over 1000 sims of 200 Bernoulli(1/4) draws.
        let sigma = (0.25_f64 * 0.75 / (200.0 * 1000.0)).sqrt();
        assert!(
            (sim - analytic).abs() < 3.0 * sigma,
            "simulated {sim} vs analytic {analytic}"
        );
        // Determinism in the seed.
        assert_eq!(
            sim,
            random_baseline(MetricKind::Accuracy, &classes, &refs, 9).unwrap()
        );
        assert_ne!(
            sim,
            random_baseline(MetricKind::Accuracy, &classes, &refs, 10).unwrap()
        );
    }

    #[test]
    fn majority_baseline_equals_modal_class_frequency() {
        // 45.5% = 91/200 of the most common class.
        let mut refs: Vec<String> = vec![];
        refs.extend(std::iter::repeat_n("yes".to_owned(), 91));
        refs.extend(std::iter::repeat_n("no".to_owned(), 60));
        refs.extend(std::iter::repeat_n("maybe".to_owned(), 49));
        let classes = labels(&["maybe", "no", "yes"]);
        let acc = majority_baseline(MetricKind::Accuracy, &classes, &refs, &refs).unwrap();
        assert!((acc - 0.455).abs() < 1e-12);

        // Ties break lexicographically.
        let tied = labels(&["b", "a", "b", "a"]);
        assert_eq!(majority_label(&tied).unwrap(), "a");

        // Majority macro-F1 stays low on a skewed split even though its
        // accuracy is high; verified against the confusion oracle.
        let preds = vec![lab("yes"); refs.len()];
        let f1 = majority_baseline(MetricKind::F1, &classes, &refs, &refs).unwrap();
        let want = confusion_oracle_macro_f1(&preds, &refs, &classes);
        assert!((f1 - want).abs() < 1e-12);
        assert!(f1 < 0.25, "skewed-majority macro F1 should be low, got {f1}");
    }

    // -------------------------------------------------- harness

    fn tiny_classification() -> DatasetManifest {
        synth_classification(&ClassificationSpec {
            task_type: "scr".into(),
            dataset: "tinyset".into(),
            language: "en".into(),
            labels: labels(&["down", "go", "up"]),
            metric: MetricKind::Accuracy,
            n_train_per_class: 3,
            n_dev_per_class: 1,
            n_test_per_class: 2,
            noise_units: 3,
            max_pad: 1,
            upsample_factor: 1,
            seed: 5,
        })
        .unwrap()
    }

    fn tiny_seqgen() -> DatasetManifest {
        synth_seqgen(&SeqGenSpec {
            task_type: "ner".into(),
            dataset: "tinynotes".into(),
            language: "en".into(),
            lexicon: vec![
                ("may".into(), "sl:date".into()),
                ("osaka".into(), "sl:place".into()),
            ],
            metric: MetricKind::SluF1,
            n_train: 6,
            n_dev: 2,
            n_test: 3,
            max_entities: 2,
            noise_units: 3,
            max_pad: 1,
            upsample_factor: 1,
            seed: 6,
        })
        .unwrap()
    }

    fn tiny_pool() -> ParaphrasePool {
        ParaphrasePool::unchecked(
            "scr",
            vec![
                "which keyword was spoken".into(),
                "name the spoken command word".into(),
            ],
            vec![
                "judge the clip fast".into(),
                "identify this utterance".into(),
            ],
        )
    }

    fn tiny_world() -> (TransformerModel, Parameters, DatasetManifest, Vocabulary) {
        let manifest = tiny_classification();
        let vocab =
            crate::vocab::build_vocabulary(&[manifest.descriptor.clone()], &[tiny_pool()])
                .unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ffn: 32,
            max_len: 96,
        };
        let params = Parameters::init(&cfg, 3);
        let model = TransformerModel::new(cfg).unwrap();
        (model, model_params_fix(params), manifest, vocab)
    }

    // Random init is fine for harness tests: they check structure and
    // invariants, not quality.
    fn model_params_fix(p: Parameters) -> Parameters {
        p
    }

    #[test]
    fn run_eval_is_bitwise_reproducible_and_counts_sub_runs() {
        let (model, params, manifest, vocab) = tiny_world();
        let pool = tiny_pool();
        for (condition, expect_runs) in [
            (PromptCondition::Seen, 2),
            (PromptCondition::Unseen, 2),
            (PromptCondition::OptionOrderVariant, 4),
            (PromptCondition::Specifier, 1),
        ] {
            let cfg = EvalConfig {
                condition,
                ..EvalConfig::default()
            };
            let a = run_eval(&model, &params, &manifest, Some(&pool), &vocab, &cfg).unwrap();
            let b = run_eval(&model, &params, &manifest, Some(&pool), &vocab, &cfg).unwrap();
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                serde_json::to_string(&b).unwrap(),
                "repeated runs must serialize identically"
            );
            assert_eq!(a.report.sub_runs.len(), expect_runs, "{condition:?}");
            assert_eq!(a.report.n_examples, 6 * expect_runs);
            assert_eq!(a.predictions.len(), 6 * expect_runs);
            let mean_of_runs =
                a.report.sub_runs.iter().map(|s| s.value).sum::<f64>() / expect_runs as f64;
            assert_eq!(a.report.value, mean_of_runs);
        }
    }

    #[test]
    fn constrained_classification_always_follows_instructions() {
        // Arbitrary (untrained) parameters: constrained decoding still
        // resolves to a listed option every time.
        let (model, params, manifest, vocab) = tiny_world();
        let pool = tiny_pool();
        for condition in [
            PromptCondition::Seen,
            PromptCondition::Unseen,
            PromptCondition::OptionOrderVariant,
            PromptCondition::Specifier,
        ] {
            let cfg = EvalConfig {
                condition,
                constrained: true,
                ..EvalConfig::default()
            };
            let out = run_eval(&model, &params, &manifest, Some(&pool), &vocab, &cfg).unwrap();
            assert_eq!(out.report.following_rate, Some(1.0), "{condition:?}");
            assert!(out
                .predictions
                .iter()
                .all(|p| matches!(p.resolved, Resolved::Label(_))));
        }
    }

    #[test]
    fn option_order_sweep_reports_per_order_means() {
        let (model, params, manifest, vocab) = tiny_world();
        let pool = tiny_pool();
        let cfg = EvalConfig {
            condition: PromptCondition::OptionOrderVariant,
            order_slots: vec![100, 101, 102],
            ..EvalConfig::default()
        };
        let out = run_eval(&model, &params, &manifest, Some(&pool), &vocab, &cfg).unwrap();
        assert_eq!(out.report.sub_runs.len(), 2 * 3);
        let means = out.report.order_means.as_ref().unwrap();
        assert_eq!(means.len(), 3);
        for (slot, value) in means {
            let expect = mean(
                out.report
                    .sub_runs
                    .iter()
                    .filter(|s| s.order_slot == Some(*slot))
                    .map(|s| s.value),
            )
            .unwrap();
            assert_eq!(*value, expect);
        }
        // Fewer than two slots is a configuration error.
        let bad = EvalConfig {
            condition: PromptCondition::OptionOrderVariant,
            order_slots: vec![100],
            ..EvalConfig::default()
        };
        assert!(matches!(
            run_eval(&model, &params, &manifest, Some(&pool), &vocab, &bad),
            Err(EvalError::NeedTwoOrders)
        ));
    }

    #[test]
    fn pool_conditions_demand_a_matching_pool_and_novel_phrases() {
        let (model, params, manifest, vocab) = tiny_world();
        let cfg = EvalConfig::default();
        assert!(matches!(
            run_eval(&model, &params, &manifest, None, &vocab, &cfg),
            Err(EvalError::MissingPool(_))
        ));
        let wrong_task = ParaphrasePool::unchecked("ic", vec!["a b".into()], vec![]);
        assert!(matches!(
            run_eval(&model, &params, &manifest, Some(&wrong_task), &vocab, &cfg),
            Err(EvalError::MissingPool(_))
        ));

        // An unseen phrase too close to the seen pool fails the gate.
        let mut pool = tiny_pool();
        pool.unseen[0] = format!("{}s", pool.seen[0]);
        let cfg = EvalConfig {
            condition: PromptCondition::Unseen,
            ..EvalConfig::default()
        };
        assert!(matches!(
            run_eval(&model, &params, &manifest, Some(&pool), &vocab, &cfg),
            Err(EvalError::PhraseNotNovel(_))
        ));
    }

    #[test]
    fn classification_baselines_are_present_and_sane() {
        let (model, params, manifest, vocab) = tiny_world();
        let pool = tiny_pool();
        let out = run_eval(
            &model,
            &params,
            &manifest,
            Some(&pool),
            &vocab,
            &EvalConfig::default(),
        )
        .unwrap();
        let baselines = out.report.baselines.unwrap();
        assert_eq!(baselines.random_analytic, Some(1.0 / 3.0));
        assert!((baselines.random - 1.0 / 3.0).abs() < 0.05);
        // Balanced splits: majority accuracy = 1/3 exactly.
        assert!((baselines.majority - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(out.report.metric_name, "accuracy");
    }

    #[test]
    fn seqgen_eval_reports_malformed_rate_instead_of_following() {
        let manifest = tiny_seqgen();
        let pool = ParaphrasePool::unchecked(
            "ner",
            vec!["transcribe and tag the named entities".into()],
            vec!["spell out every entity the audio mentions with its tag".into()],
        );
        let vocab =
            crate::vocab::build_vocabulary(&[manifest.descriptor.clone()], &[pool.clone()])
                .unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ffn: 32,
            max_len: 96,
        };
        let params = Parameters::init(&cfg, 4);
        let model = TransformerModel::new(cfg).unwrap();
        let out = run_eval(
            &model,
            &params,
            &manifest,
            Some(&pool),
            &vocab,
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(out.report.metric_name, "slu_f1_exact");
        assert_eq!(out.report.following_rate, None);
        assert!(out.report.malformed_rate.is_some());
        assert!(out.report.baselines.is_none());
        // Sequence predictions resolve to their raw tokens.
        assert!(out
            .predictions
            .iter()
            .all(|p| matches!(&p.resolved, Resolved::Sequence(s) if *s == p.raw)));
        // Option-order sweeps are meaningless without options.
        let bad = EvalConfig {
            condition: PromptCondition::OptionOrderVariant,
            ..EvalConfig::default()
        };
        assert!(matches!(
            run_eval(&model, &params, &manifest, Some(&pool), &vocab, &bad),
            Err(EvalError::NoOptions(_))
        ));
    }

    #[test]
    fn eer_tasks_score_the_positive_class_probability() {
        let mut manifest = tiny_classification();
        manifest.descriptor.metric = MetricKind::Eer;
        manifest.descriptor.labels = labels(&["down", "go"]);
        // Keep only two classes in the splits.
        for split in [&mut manifest.train, &mut manifest.dev, &mut manifest.test] {
            split.retain(|ex| ex.target[0] != "up");
        }
        let pool = tiny_pool();
        let vocab =
            crate::vocab::build_vocabulary(&[manifest.descriptor.clone()], &[pool.clone()])
                .unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ffn: 32,
            max_len: 96,
        };
        let params = Parameters::init(&cfg, 8);
        let model = TransformerModel::new(cfg).unwrap();
        let out = run_eval(
            &model,
            &params,
            &manifest,
            Some(&pool),
            &vocab,
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(out.report.metric_name, "eer");
        assert!(out.report.value >= 0.0 && out.report.value <= 1.0);
        assert!(out
            .predictions
            .iter()
            .all(|p| p.positive_score.is_some_and(|s| (0.0..=1.0).contains(&s))));
        assert!(out.report.baselines.is_none());
    }

    // -------------------------------------------------- rendering

    #[test]
    fn table_renders_aligned_rows_for_all_conditions() {
        let (model, params, manifest, vocab) = tiny_world();
        let pool = tiny_pool();
        let mut reports = vec![];
        for condition in [
            PromptCondition::Seen,
            PromptCondition::Unseen,
            PromptCondition::OptionOrderVariant,
            PromptCondition::Specifier,
        ] {
            let cfg = EvalConfig {
                condition,
                ..EvalConfig::default()
            };
            reports.push(
                run_eval(&model, &params, &manifest, Some(&pool), &vocab, &cfg)
                    .unwrap()
                    .report,
            );
        }
        let table = render_table(&reports);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("task"));
        assert!(lines[1].chars().all(|c| c == '-'));
        assert_eq!(lines.len(), 3, "one data row for the single task");
        assert!(lines[2].contains("scr") && lines[2].contains("tinyset"));
        for col in ["seen", "unseen", "diff_order", "specifier", "follow"] {
            assert!(lines[0].contains(col));
        }
        // No condition missing: every value column shows a number.
        assert!(!lines[2].contains('—'));
    }

    #[test]
    fn predictions_serialize_one_json_object_per_line() {
        let recs = vec![PredictionRecord {
            phrase: Some("which keyword was spoken".into()),
            order_slot: None,
            example: 0,
            reference: toks(&["down"]),
            raw: toks(&["0"]),
            resolved: lab("down"),
            positive_score: None,
        }];
        let jsonl = predictions_to_jsonl(&recs).unwrap();
        assert_eq!(jsonl.lines().count(), 1);
        let back: PredictionRecord = serde_json::from_str(jsonl.trim()).unwrap();
        assert_eq!(back, recs[0]);
    }

    // Deterministic ordering helper used in several tests above.
    #[allow(dead_code)]
    fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = items.to_vec();
        v.shuffle(&mut rng);
        v
    }
}
