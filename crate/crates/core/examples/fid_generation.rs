//! Builds Fusion-in-Decoder inputs from retrieved stories, a persona and a
//! dialogue context, then trains a tiny generator on one response and
//! decodes it.

use std::sync::Arc;

use lapdog::corpus::DialogueSample;
use lapdog::corpus::{Story, Turn};
use lapdog::generator::{assemble_fid, ModelConfig, Seq2SeqModel};
use lapdog::trainer::{Stage1Trainer, TrainConfig};
use lapdog::vocab::Vocab;

fn main() -> lapdog::Result<()> {
    let story = Story::new(
        "mechanic",
        "Mechanic",
        [
            "i am a mechanic .",
            "i work in a shop .",
            "i fix cars for people .",
            "i work fast .",
            "i love it .",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    )?;
    let persona = vec!["i like cars .".to_string(), "i have a dog .".to_string()];
    let context = vec![Turn::human("hello , what do you do for fun ?")];
    let target = "i fix cars for people .";

    let vocab = Vocab::build([
        story.text(),
        "story: persona: context: human: machine:",
        &persona.join(" "),
        &context[0].text,
    ]);
    let mut model = Seq2SeqModel::new(ModelConfig::tiny(), Arc::new(vocab), 3);
    let input = assemble_fid(&[&story], &persona, &context, &model.template());
    for (i, seg) in input.segments.iter().enumerate() {
        println!("segment {i}: {seg}");
    }
    println!("encoder states: {:?}", model.encoder_states(&input)?.dim());

    // stage-1 style training on a single sample, without retrieval
    let sample = DialogueSample {
        dialogue_id: "d".into(),
        turn_index: 1,
        persona: persona.clone(),
        context: context.clone(),
        target: target.into(),
    };
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let mut trainer = Stage1Trainer::new(&model, &cfg)?;
    for step in 0..60 {
        let loss = trainer.step(&mut model, &[&sample])?;
        if step % 20 == 0 {
            println!("step {step:2} nll {loss:.3}");
        }
    }
    let plain = assemble_fid(&[], &persona, &context, &model.template());
    println!("nll with the story: {:.3}", model.nll(&input, target)?);
    println!("greedy response: {}", model.generate(&plain, 12)?);
    Ok(())
}
