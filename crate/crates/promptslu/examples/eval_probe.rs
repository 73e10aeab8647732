//! Scratch probe against the checkpoint saved by train_toy: per-task dev and
//! test rates under the trainer's fixed evaluation prompt.

use promptslu::eval::count_correct;
use promptslu::model::{load_model, DecodeConfig, TransformerModel};
use promptslu::prompts::{build_instruction_prompt, Instruction, InstructionSource};
use promptslu::tasks::{standard_suite, TaskKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let suite = standard_suite(0)?;
    let (cfg, params) = load_model(&std::env::temp_dir().join("slu-toy-model"))?;
    let model = TransformerModel::new(cfg)?;
    let vocab = &suite.vocab;
    let dcfg = DecodeConfig {
        beam_size: 1,
        length_penalty: 0.0,
        maxlen_ratio: 4.0,
    };

    for manifest in &suite.tasks {
        let task = &manifest.descriptor;
        let pool = suite
            .pools
            .iter()
            .find(|p| p.task_type == task.task_type)
            .unwrap();
        let instruction = Instruction {
            task_type: task.task_type.clone(),
            text: pool.seen[0].clone(),
            source: InstructionSource::SeenPool,
        };
        let perm: Vec<usize> = match task.kind {
            TaskKind::Classification => (0..task.labels.len()).collect(),
            TaskKind::SeqGen => vec![],
        };
        let prompt = build_instruction_prompt(&instruction, task, &perm)?;
        let mut line = format!("{}/{}", task.task_type, task.dataset);
        for (split, examples) in [("dev", &manifest.dev), ("test", &manifest.test)] {
            let correct = count_correct(&model, &params, vocab, task, &prompt, examples, &dcfg)?;
            line.push_str(&format!(
                "  {split} {:.1}% ({correct}/{})",
                100.0 * correct as f64 / examples.len() as f64,
                examples.len()
            ));
        }
        println!("{line}");
    }
    Ok(())
}
