//! Trains one small encoder-decoder jointly on the standard four-task suite
//! (three classification tasks plus one sequence-tagging task) using
//! previous-segment instruction prompts, then saves the best-dev checkpoint.
//!
//! The trainer evaluates decoded dev accuracy at a fixed cadence and keeps
//! the parameters of the best pooled evaluation, so the saved checkpoint is
//! the peak of the run rather than wherever step 5000 happened to land.
//!
//!     cargo run --release --example train_toy \
//!         [-- STEPS [MAX_LR [D_MODEL [N_HEADS [D_FFN [EVAL_EVERY [SEQGEN_TRAIN]]]]]]]

use std::time::Instant;

use promptslu::model::{save_model, ModelConfig};
use promptslu::prompts::OrderSampling;
use promptslu::tasks::{standard_specs, standard_suite_from};
use promptslu::train::{PromptMode, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arg = |i: usize| std::env::args().nth(i);
    let max_steps: u64 = arg(1).map(|s| s.parse()).transpose()?.unwrap_or(5000);
    let max_lr: f64 = arg(2).map(|s| s.parse()).transpose()?.unwrap_or(6e-4);
    let d_model: usize = arg(3).map(|s| s.parse()).transpose()?.unwrap_or(64);
    let n_heads: usize = arg(4).map(|s| s.parse()).transpose()?.unwrap_or(4);
    let d_ffn: usize = arg(5).map(|s| s.parse()).transpose()?.unwrap_or(d_model * 2);
    let eval_every: u64 = arg(6).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let seqgen_train: usize = arg(7).map(|s| s.parse()).transpose()?.unwrap_or(200);

    let mut specs = standard_specs(0);
    specs.ner.n_train = seqgen_train;
    let suite = standard_suite_from(&specs, 0)?;

    let model_cfg = ModelConfig {
        vocab_size: suite.vocab.len(),
        d_model,
        n_heads,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        d_ffn,
        max_len: 160,
    };
    let train_cfg = TrainConfig {
        seed: 0,
        prompt_mode: PromptMode::InstructionPrev,
        order_sampling: OrderSampling::Uniform,
        max_lr,
        max_steps,
        eval_every,
        patience: 1000,
        ..TrainConfig::default()
    };
    println!(
        "model: d{d_model} h{n_heads} ffn{d_ffn}, vocab {}; max_lr {max_lr:.1e}, steps {max_steps}, eval every {eval_every}, seqgen train {seqgen_train}"
    , suite.vocab.len());

    let mut trainer = Trainer::new(
        model_cfg,
        train_cfg,
        suite.tasks,
        suite.pools,
        suite.vocab,
    )?;

    let t0 = Instant::now();
    let outcome = trainer.fit()?;
    let secs = t0.elapsed().as_secs_f64();

    for e in &outcome.evals {
        let per: Vec<String> = e
            .task_accuracies
            .iter()
            .map(|a| format!("{:5.1}%", 100.0 * a))
            .collect();
        println!(
            "step {:>5}  dev loss {:.4}  pooled {:5.1}%  [{}]",
            e.step,
            e.dev_loss,
            100.0 * e.dev_accuracy,
            per.join(" ")
        );
    }
    println!(
        "trained {} steps in {secs:.1}s ({:.1} ms/step incl. evals)",
        outcome.steps_run,
        1000.0 * secs / outcome.steps_run as f64
    );
    println!(
        "best pooled dev accuracy {:.2}% (final {:.2}%)",
        100.0 * outcome.best_dev_accuracy,
        100.0 * outcome.final_dev_accuracy
    );

    let stem = std::env::temp_dir().join("slu-toy-model");
    save_model(&stem, trainer.model().cfg(), &outcome.best_params)?;
    println!("best checkpoint saved to {}.json / .bin", stem.display());
    Ok(())
}
