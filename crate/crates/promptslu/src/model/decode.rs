//! Greedy and beam decoding over an abstract next-token scorer.
//!
//! Scoring convention: every emitted non-end token contributes its log
//! probability plus the additive length penalty; choosing the end marker
//! contributes its log probability alone; a hypothesis that reaches the
//! step budget is force-finished with no end-marker term. Greedy decoding
//! takes the per-step argmax of exactly those contributions, which makes it
//! equal to beam search with beam size one, expansion by expansion.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelError, Parameters, TransformerModel};
use crate::vocab::TokenId;

/// Anything that can score the next emission given what was emitted so far.
/// Implementations must be pure functions of the emitted prefix.
pub trait TokenScorer {
    fn vocab_size(&self) -> usize;
    /// Log probabilities over the vocabulary for the next emission.
    fn step_log_probs(&mut self, emitted: &[TokenId]) -> Result<Vec<f64>, ModelError>;
    /// Hard cap on emissions (prompt budget), if any.
    fn emission_budget(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Additive bonus per emitted non-end token; positive favors longer
    /// outputs.
    pub length_penalty: f64,
    /// Step budget as a ratio of the source length, rounded up.
    pub maxlen_ratio: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            length_penalty: 0.0,
            maxlen_ratio: 1.0,
        }
    }
}

/// Which emissions are legal at each step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeConstraint {
    None,
    /// Exactly one emission from this set, then the end marker. Guarantees
    /// the output resolves to a listed choice.
    SingleChoice(Vec<TokenId>),
    /// Every emission from this set; the end marker is always allowed.
    Restricted(Vec<TokenId>),
}

impl DecodeConstraint {
    fn allows(&self, token: TokenId, eos: TokenId, n_emitted: usize) -> bool {
        match self {
            Self::None => true,
            Self::SingleChoice(set) => {
                if n_emitted == 0 {
                    token != eos && set.contains(&token)
                } else {
                    token == eos
                }
            }
            Self::Restricted(set) => token == eos || set.contains(&token),
        }
    }
}

/// A finished decode: emitted tokens (end marker excluded) and the total
/// score under the penalty convention above.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub ended_with_eos: bool,
}

fn step_budget(cfg: &DecodeConfig, input_len: usize, scorer_budget: Option<usize>) -> usize {
    let by_ratio = (cfg.maxlen_ratio * input_len as f64).ceil() as usize;
    let steps = by_ratio.max(1);
    match scorer_budget {
        Some(b) => steps.min(b),
        None => steps,
    }
}

/// Per-step argmax decode.
pub fn greedy_decode<S: TokenScorer>(
    scorer: &mut S,
    cfg: &DecodeConfig,
    input_len: usize,
    eos: TokenId,
    constraint: &DecodeConstraint,
) -> Result<Hypothesis, ModelError> {
    let max_steps = step_budget(cfg, input_len, scorer.emission_budget());
    if max_steps == 0 {
        return Err(ModelError::SequenceTooLong { len: 0, max: 0 });
    }
    let mut tokens: Vec<TokenId> = vec![];
    let mut score = 0.0;
    for _ in 0..max_steps {
        let logp = scorer.step_log_probs(&tokens)?;
        let mut best: Option<(f64, TokenId)> = None;
        for (id, &lp) in logp.iter().enumerate() {
            let tok = TokenId(id);
            if !constraint.allows(tok, eos, tokens.len()) {
                continue;
            }
            let gain = if tok == eos { lp } else { lp + cfg.length_penalty };
            // Strict greater-than: ties resolve to the lowest token id.
            if best.map_or(true, |(b, _)| gain > b) {
                best = Some((gain, tok));
            }
        }
        let (gain, tok) = best.ok_or(ModelError::BadConfig(
            "decoding constraint admits no token".into(),
        ))?;
        score += gain;
        if tok == eos {
            return Ok(Hypothesis {
                tokens,
                score,
                ended_with_eos: true,
            });
        }
        tokens.push(tok);
    }
    Ok(Hypothesis {
        tokens,
        score,
        ended_with_eos: false,
    })
}

/// Standard beam search. Each step expands every active hypothesis over the
/// admissible vocabulary, keeps the best `beam_size` expansions overall,
/// finishes those that chose the end marker, and continues with the rest.
/// Returns finished hypotheses best-first (at most `beam_size`).
pub fn beam_search<S: TokenScorer>(
    scorer: &mut S,
    cfg: &DecodeConfig,
    input_len: usize,
    eos: TokenId,
    constraint: &DecodeConstraint,
) -> Result<Vec<Hypothesis>, ModelError> {
    if cfg.beam_size == 0 {
        return Err(ModelError::BadConfig("beam size must be at least 1".into()));
    }
    let max_steps = step_budget(cfg, input_len, scorer.emission_budget());
    if max_steps == 0 {
        return Err(ModelError::SequenceTooLong { len: 0, max: 0 });
    }
    let mut active: Vec<Hypothesis> = vec![Hypothesis {
        tokens: vec![],
        score: 0.0,
        ended_with_eos: false,
    }];
    let mut finished: Vec<Hypothesis> = vec![];
    for _ in 0..max_steps {
        if active.is_empty() {
            break;
        }
        let mut candidates: Vec<Hypothesis> = vec![];
        for hyp in &active {
            let logp = scorer.step_log_probs(&hyp.tokens)?;
            for (id, &lp) in logp.iter().enumerate() {
                let tok = TokenId(id);
                if !constraint.allows(tok, eos, hyp.tokens.len()) {
                    continue;
                }
                // Compute the per-step gain before adding it so the float
                // arithmetic associates exactly as in greedy_decode.
                let gain = if tok == eos { lp } else { lp + cfg.length_penalty };
                if tok == eos {
                    candidates.push(Hypothesis {
                        tokens: hyp.tokens.clone(),
                        score: hyp.score + gain,
                        ended_with_eos: true,
                    });
                } else {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    candidates.push(Hypothesis {
                        tokens,
                        score: hyp.score + gain,
                        ended_with_eos: false,
                    });
                }
            }
        }
        sort_hypotheses(&mut candidates);
        candidates.truncate(cfg.beam_size);
        active = vec![];
        for c in candidates {
            if c.ended_with_eos {
                finished.push(c);
            } else {
                active.push(c);
            }
        }
    }
    // Step budget exhausted: force-finish what is still active.
    finished.extend(active);
    sort_hypotheses(&mut finished);
    finished.truncate(cfg.beam_size);
    if finished.is_empty() {
        return Err(ModelError::BadConfig(
            "decoding constraint admits no token".into(),
        ));
    }
    Ok(finished)
}

fn sort_hypotheses(hyps: &mut [Hypothesis]) {
    // Score descending; ties broken by token ids ascending so runs are
    // deterministic.
    hyps.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Scorer backed by the transformer: encodes the input once, then runs the
/// decoder over prompt plus emitted tokens for each step.
pub struct ModelScorer<'a> {
    model: &'a TransformerModel,
    params: &'a Parameters,
    memory: Array2<f64>,
    prompt: Vec<TokenId>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(
        model: &'a TransformerModel,
        params: &'a Parameters,
        input: &[TokenId],
        prompt: &[TokenId],
    ) -> Result<Self, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let max = model.cfg().max_len;
        if prompt.len() >= max {
            return Err(ModelError::SequenceTooLong {
                len: prompt.len(),
                max,
            });
        }
        let memory = model.encode(params, input)?;
        Ok(Self {
            model,
            params,
            memory,
            prompt: prompt.to_vec(),
        })
    }
}

impl TokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.cfg().vocab_size
    }

    fn step_log_probs(&mut self, emitted: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let mut dec = self.prompt.clone();
        dec.extend_from_slice(emitted);
        let logits = self
            .model
            .position_logits(self.params, &self.memory, &dec, &[dec.len() - 1])?;
        let row = logits.row(0);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_z = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        Ok(row.iter().map(|&x| x - log_z).collect())
    }

    fn emission_budget(&self) -> Option<usize> {
        Some(self.model.cfg().max_len - self.prompt.len())
    }
}
