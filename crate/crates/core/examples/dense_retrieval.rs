//! Embeds a small story corpus with a randomly initialized dual encoder,
//! retrieves the top stories for a persona query and applies candidate
//! augmentation.

use std::sync::Arc;

use lapdog::corpus::{Corpus, Story};
use lapdog::retriever::{build_index, candidate_augment, retrieve_text, EncoderConfig, TextEncoder};
use lapdog::trainer::substream;
use lapdog::vocab::Vocab;

const STORIES: [[&str; 5]; 6] = [
    [
        "i fixed a car .",
        "it was red .",
        "my hands got dirty .",
        "i washed them .",
        "then i slept .",
    ],
    [
        "i baked bread .",
        "the oven was hot .",
        "i burned a loaf .",
        "my dog ate it .",
        "we laughed .",
    ],
    [
        "i ran a race .",
        "the track was wet .",
        "i slipped once .",
        "i still finished .",
        "i felt proud .",
    ],
    [
        "i planted seeds .",
        "rain came early .",
        "the garden grew .",
        "i picked beans .",
        "dinner was good .",
    ],
    [
        "i adopted a cat .",
        "she was shy .",
        "she hid for days .",
        "then she purred .",
        "now she sleeps on me .",
    ],
    [
        "i sold my car .",
        "i bought a bike .",
        "my legs got strong .",
        "i ride to work .",
        "i save money .",
    ],
];

fn main() -> lapdog::Result<()> {
    let stories = STORIES
        .iter()
        .enumerate()
        .map(|(i, s)| Story::new(format!("s{i}"), "", s.iter().map(|x| x.to_string()).collect()))
        .collect::<lapdog::Result<Vec<_>>>()?;
    let corpus = Corpus::new(stories)?;
    let query = "i like cars . i have a dog .";
    let mut texts: Vec<String> = corpus.stories().iter().map(|s| s.text().to_string()).collect();
    texts.push(query.into());
    let encoder = TextEncoder::new(EncoderConfig::tiny(), Arc::new(Vocab::build(texts)), 7);

    let index = build_index(&encoder, &corpus)?;
    println!(
        "index: {} stories, dim {}, corpus fingerprint {}",
        index.len(),
        index.dim(),
        &index.fingerprint()[..12]
    );
    let top = retrieve_text(&encoder, &index, query, 3)?;
    println!("top 3 for `{query}`:");
    for item in &top.items {
        println!(
            "  {} score {:+.4}  {}",
            item.id,
            item.score,
            corpus.lookup(&item.id).unwrap().text()
        );
    }
    let augmented = candidate_augment(&top, &corpus, 0.5, &mut substream(0, "example.augment"))?;
    let shown: Vec<String> = augmented
        .items
        .iter()
        .map(|i| {
            if i.score.is_nan() {
                format!("{} (random)", i.id)
            } else {
                i.id.clone()
            }
        })
        .collect();
    println!("after augmentation (rho 0.5): {}", shown.join(", "));
    Ok(())
}
