//! Prompt-conditioned multi-task sequence learning on synthetic
//! spoken-language-understanding tasks.
//!
//! One encoder-decoder model serves several tasks at once; the task is
//! selected purely by the decoder prompt, either a compact specifier
//! (`SOT ⟨en⟩ ⟨scr⟩ ⟨cmdset⟩ NT`) or a natural-language instruction with an
//! enumerated option list whose option number the model predicts. The crate
//! contains the whole loop at desk scale: prompt compilation, synthetic
//! dataset generation, a from-scratch transformer with manual gradients,
//! training with loss masking over prompt positions, beam/greedy decoding,
//! and the evaluation protocol (seen and unseen paraphrases, option-order
//! robustness, following rate, zero-shot relabeling, baselines).
//!
//! Start from the runnable examples:
//!
//! * `compile_prompts`: render the prompt grammars for every task.
//! * `audit_pools`: novelty-gate report for paraphrase pools.
//! * `synth_data`: generate the standard suite as JSONL manifests.
//! * `train_toy`: train the joint toy model and save a checkpoint.
//! * `evaluate`: full evaluation report for a checkpoint.
//! * `zero_shot`: instruction vs specifier prompts on relabeled data.
//! * `check_gradients`: finite-difference audit of the backward pass.

pub mod cli;
pub mod eval;
pub mod model;
pub mod prompts;
pub mod tasks;
pub mod train;
pub mod vocab;
