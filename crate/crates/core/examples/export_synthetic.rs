//! Writes the synthetic persona task as JSON-lines files, plus the matching
//! training config, for the `lapdog` binary.
//!
//! ```text
//! cargo run --release --example export_synthetic -- data/synthetic
//! ```

use std::path::PathBuf;

use lapdog::cli::RunConfig;
use lapdog::corpus::{write_dialogues, write_stories};
use lapdog::synthetic::{ExperimentConfig, SyntheticTask};

fn main() -> lapdog::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/synthetic".into()));
    std::fs::create_dir_all(&dir).map_err(|e| lapdog::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let cfg = ExperimentConfig::default();
    let task = SyntheticTask::build(&cfg.data)?;
    write_stories(dir.join("stories.jsonl"), task.corpus.stories())?;
    write_dialogues(dir.join("copy.jsonl"), &task.copy_records)?;
    write_dialogues(dir.join("pet.jsonl"), &task.pet_records)?;
    write_dialogues(dir.join("heldout.jsonl"), &task.heldout_records)?;
    let run = RunConfig {
        train: cfg.train,
        model: cfg.model,
        retriever: cfg.retriever,
        pretrain: cfg.pretrain,
    };
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&run)? + "\n")
        .map_err(|e| lapdog::Error::Io { path: dir.join("config.json"), source: e })?;
    println!(
        "{} stories, {} copy dialogues, {} pet dialogues, {} held-out dialogues in {}",
        task.corpus.len(),
        task.copy_records.len(),
        task.pet_records.len(),
        task.heldout_records.len(),
        dir.display()
    );
    Ok(())
}
