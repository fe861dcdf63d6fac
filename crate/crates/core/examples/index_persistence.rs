//! Saves a story index with its id sidecar, reloads it against the corpus
//! and shows that a different corpus is refused.

use std::sync::Arc;

use lapdog::corpus::{Corpus, Story};
use lapdog::retriever::{build_index, EncoderConfig, StoryIndex, TextEncoder};
use lapdog::vocab::Vocab;

fn corpus(words: &[&str]) -> lapdog::Result<Corpus> {
    let stories = words
        .iter()
        .map(|w| Story::new(*w, *w, (0..5).map(|i| format!("the {w} story line {i} .")).collect()))
        .collect::<lapdog::Result<Vec<_>>>()?;
    Corpus::new(stories)
}

fn main() -> lapdog::Result<()> {
    let stories = corpus(&["cars", "bread", "races", "seeds"])?;
    let texts: Vec<String> = stories.stories().iter().map(|s| s.text().to_string()).collect();
    let enc = TextEncoder::new(EncoderConfig::tiny(), Arc::new(Vocab::build(texts)), 5);
    let index = build_index(&enc, &stories)?;

    let dir = std::env::temp_dir().join(format!("lapdog-index-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| lapdog::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join("index.bin");
    index.save(&path)?;
    println!(
        "saved {} rows to {} (+ {})",
        index.len(),
        path.display(),
        StoryIndex::sidecar_path(&path).display()
    );

    let loaded = StoryIndex::load(&path, &stories)?;
    println!("reloaded identical index: {}", loaded == index);
    match StoryIndex::load(&path, &corpus(&["cars", "bread", "races", "boats"])?) {
        Ok(_) => println!("unexpected: mismatched corpus accepted"),
        Err(e) => println!("mismatched corpus refused: {e}"),
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
