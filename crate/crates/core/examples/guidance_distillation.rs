//! Distills a metric-derived guidance distribution into retriever scores:
//! the KL loss between `softmax(m / tau_g)` and `softmax(s / tau_s)` is
//! minimized over the encoder parameters with AdamW.

use std::sync::Arc;

use lapdog::autograd::Graph;
use lapdog::corpus::Story;
use lapdog::nn::Forward;
use lapdog::optim::{AdamW, AdamWConfig};
use lapdog::retriever::{score_candidates, score_candidates_var, EncoderConfig, TextEncoder};
use lapdog::textmetrics::guidance_metric;
use lapdog::trainer::{guidance_distribution, retriever_loss};
use lapdog::vocab::Vocab;

fn main() -> lapdog::Result<()> {
    let lines = |w: &str| (0..5).map(|i| format!("{w} sentence {i} .")).collect::<Vec<_>>();
    let stories: Vec<Story> = ["cars", "bread", "races", "seeds"]
        .iter()
        .map(|w| Story::new(*w, *w, lines(w)))
        .collect::<lapdog::Result<_>>()?;
    let refs: Vec<&Story> = stories.iter().collect();
    let query = "i like cars .";
    let target = "i fix cars every day .";

    // stand-in generator outputs, one per candidate story
    let outputs = [
        "i fix cars daily .",
        "i bake bread .",
        "i run fast .",
        "i plant seeds .",
    ];
    let metrics: Vec<f64> = outputs.iter().map(|o| guidance_metric(o, target)).collect();
    let guidance = guidance_distribution(&metrics, 0.85)?;
    println!("metric values {metrics:.3?}");
    println!("guidance      {:.3?}", guidance.p);

    let mut texts: Vec<String> = stories.iter().map(|s| s.text().to_string()).collect();
    texts.push(query.into());
    let mut enc = TextEncoder::new(EncoderConfig::tiny(), Arc::new(Vocab::build(texts)), 11);
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: 5e-3,
            ..Default::default()
        },
        enc.params(),
    );
    for step in 0..=60 {
        let mut g = Graph::new();
        let s = score_candidates_var(&mut g, &mut Forward::inference(), &enc, query, &refs)?;
        let loss = retriever_loss(&mut g, s, &guidance, 0.8);
        if step % 20 == 0 {
            println!("step {step:2} KL {:.5}", g.scalar(loss));
        }
        let grads = g.backward(loss).dense_for(enc.params());
        opt.step(enc.params_mut(), &grads);
    }
    let s: Vec<f64> = score_candidates(&enc, query, &refs)?.iter().map(|x| x / 0.8).collect();
    println!("retriever     {:.3?}", lapdog::autograd::softmax(&s));
    Ok(())
}
