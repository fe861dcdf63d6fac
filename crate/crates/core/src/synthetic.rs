//! A small persona task where retrieval is necessary.
//!
//! Every story describes one (color, animal) pair and the pair's keyword,
//! e.g. "the red fox is sleepy .". Each persona loves one pair, and when
//! asked about its pet the persona answers "the red fox is sleepy ." The
//! keyword appears nowhere but in that one story, so the stage-1 generator
//! can only get it right by retrieving the story and copying.
//!
//! Stage-1 data are copy dialogues: the human first shares a short text
//! holding the persona's pair with a fresh random keyword next to a
//! distractor pair, then asks about the pet. They teach the copy skill
//! (standing in for pretraining) without revealing any corpus keyword.
//! Stage-2 and held-out data are the pet dialogues. Every pair has two
//! personas: one trains, the other is held out.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{samples_from_records, Corpus, DialogueRecord, DialogueSample, Story, Turn};
use crate::error::Result;
use crate::generator::{ModelConfig, Seq2SeqModel};
use crate::retriever::{build_index, pretrain_contrastive, EncoderConfig, PretrainConfig, StoryIndex, TextEncoder};
use crate::trainer::{
    count_unique_retrievals, evaluate, evaluation_query, substream, train_stage1, train_stage2, StepReport, TrainConfig,
};
use crate::vocab::Vocab;

pub const COLORS: [&str; 10] = [
    "red", "blue", "green", "yellow", "purple", "orange", "pink", "black", "white", "brown",
];
pub const ANIMALS: [&str; 10] = [
    "cat", "dog", "fox", "owl", "frog", "bear", "wolf", "duck", "goat", "horse",
];
pub const KEYWORDS: [&str; 100] = [
    "sleepy", "brave", "tiny", "noisy", "clever", "fluffy", "shy", "happy", "grumpy", "spotted", "quick", "lazy",
    "gentle", "curious", "wild", "calm", "proud", "silly", "strong", "hungry", "angry", "bold", "bright", "busy",
    "cheerful", "chubby", "clumsy", "cozy", "crafty", "cranky", "daring", "dizzy", "eager", "fancy", "fierce", "fuzzy",
    "giant", "glad", "graceful", "greedy", "grouchy", "hairy", "handsome", "humble", "jolly", "jumpy", "keen", "kind",
    "lively", "lonely", "loud", "loyal", "lucky", "messy", "mighty", "modest", "moody", "muddy", "nervous", "nimble",
    "patient", "peaceful", "perky", "playful", "plump", "polite", "quiet", "rowdy", "rusty", "scruffy", "sharp",
    "shiny", "skinny", "slow", "smart", "smelly", "sneaky", "snowy", "soft", "speedy", "sporty", "steady", "stinky",
    "striped", "sturdy", "sunny", "sweet", "swift", "tame", "thirsty", "tidy", "timid", "tough", "tricky", "trusty",
    "wacky", "warm", "wise", "witty", "zany",
];
const PLACES: [&str; 8] = [
    "park", "beach", "market", "library", "lake", "garden", "school", "forest",
];
const THINGS: [&str; 8] = ["boat", "kite", "bell", "lamp", "drum", "cart", "tent", "flag"];
const FOODS: [&str; 8] = ["pizza", "apples", "soup", "rice", "cake", "bread", "pasta", "tacos"];
const JOBS: [&str; 8] = [
    "baker", "nurse", "teacher", "farmer", "pilot", "chef", "driver", "painter",
];
const HOBBIES: [&str; 8] = [
    "chess", "music", "running", "drawing", "reading", "cooking", "hiking", "swimming",
];
const PROMPTS: [&str; 4] = [
    "tell me about your pet .",
    "what is your pet like ?",
    "how is your pet ?",
    "describe your pet .",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub personas_per_pair: usize,
    /// Personas per pair held out for evaluation; the rest train.
    pub heldout_per_pair: usize,
    /// Pet dialogues per training persona in the stage-2 data.
    pub dialogues_per_persona: usize,
    pub copy_dialogues: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 17,
            personas_per_pair: 2,
            heldout_per_pair: 1,
            dialogues_per_persona: 24,
            copy_dialogues: 1600,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub corpus: Corpus,
    pub stage1: Vec<DialogueSample>,
    pub stage2: Vec<DialogueSample>,
    pub heldout: Vec<DialogueSample>,
    /// Raw dialogues behind `stage1`, `stage2` and `heldout`.
    pub copy_records: Vec<DialogueRecord>,
    pub pet_records: Vec<DialogueRecord>,
    pub heldout_records: Vec<DialogueRecord>,
    /// Dialogue id → corpus position of the story holding its keyword.
    pub oracle: HashMap<String, usize>,
}

fn pair_sentence(c: &str, a: &str, k: &str) -> String {
    format!("the {c} {a} is {k} .")
}

/// Filler for copy-dialogue texts; shares no content word with personas.
fn filler<R: Rng + ?Sized>(rng: &mut R) -> String {
    let p = PLACES.choose(rng).unwrap();
    let t = THINGS.choose(rng).unwrap();
    match rng.gen_range(0..4) {
        0 => format!("it walked to the {p} ."),
        1 => format!("it found a {t} at the {p} ."),
        2 => format!("a {t} was near the {p} ."),
        _ => format!("it slept by the {t} ."),
    }
}

/// Every story carries the same four filler sentences in a random order.
const STORY_FILLERS: [&str; 4] = [
    "it was a long day .",
    "we walked home .",
    "the sun was out .",
    "then it rained .",
];

fn story_sentences<R: Rng + ?Sized>(rng: &mut R, key: String) -> Vec<String> {
    let mut s: Vec<String> = STORY_FILLERS.iter().map(|f| f.to_string()).collect();
    s.shuffle(rng);
    let at = rng.gen_range(0..5);
    s.insert(at, key);
    s
}

fn persona<R: Rng + ?Sized>(rng: &mut R, c: &str, a: &str) -> Vec<String> {
    let mut p = vec![
        format!("i work as a {} .", JOBS.choose(rng).unwrap()),
        format!("i like {} .", FOODS.choose(rng).unwrap()),
        format!("my hobby is {} .", HOBBIES.choose(rng).unwrap()),
    ];
    p.shuffle(rng);
    p.insert(0, format!("i love the {c} {a} ."));
    p
}

impl SyntheticTask {
    pub fn build(cfg: &SyntheticConfig) -> Result<Self> {
        let mut rng = substream(cfg.seed, "synthetic.data");
        let pairs: Vec<(usize, usize)> = (0..COLORS.len())
            .flat_map(|c| (0..ANIMALS.len()).map(move |a| (c, a)))
            .collect();
        let mut stories = Vec::with_capacity(pairs.len());
        let mut keyword = KEYWORDS.to_vec();
        keyword.shuffle(&mut rng);
        for (i, &(c, a)) in pairs.iter().enumerate() {
            let k = keyword[i];
            let sents = story_sentences(&mut rng, pair_sentence(COLORS[c], ANIMALS[a], k));
            stories.push(Story::new(
                format!("story{i:03}"),
                format!("the {} {}", COLORS[c], ANIMALS[a]),
                sents,
            )?);
        }
        let corpus = Corpus::new(stories)?;

        let mut oracle = HashMap::new();
        let (mut stage2_records, mut heldout_records) = (Vec::new(), Vec::new());
        let heldout_from = cfg.personas_per_pair.saturating_sub(cfg.heldout_per_pair);
        for (pi, &(c, a)) in pairs.iter().enumerate() {
            for n in 0..cfg.personas_per_pair {
                let p = persona(&mut rng, COLORS[c], ANIMALS[a]);
                let (tag, count, out) = if n < heldout_from {
                    ("pet", cfg.dialogues_per_persona, &mut stage2_records)
                } else {
                    ("heldout", 1, &mut heldout_records)
                };
                for d in 0..count {
                    let id = format!("{tag}-{pi:03}-{n}-{d}");
                    oracle.insert(id.clone(), pi);
                    out.push(DialogueRecord {
                        id,
                        persona: p.clone(),
                        turns: vec![
                            Turn::human(*PROMPTS.choose(&mut rng).unwrap()),
                            Turn::machine(pair_sentence(COLORS[c], ANIMALS[a], keyword[pi])),
                        ],
                    });
                }
            }
        }

        let copy_records: Vec<DialogueRecord> = (0..cfg.copy_dialogues)
            .map(|i| {
                let (c, a) = pairs[rng.gen_range(0..pairs.len())];
                let (dc, da) = loop {
                    let d = pairs[rng.gen_range(0..pairs.len())];
                    if d != (c, a) {
                        break d;
                    }
                };
                let k = *KEYWORDS.choose(&mut rng).unwrap();
                let dk = *KEYWORDS.choose(&mut rng).unwrap();
                let mut text = vec![
                    pair_sentence(COLORS[c], ANIMALS[a], k),
                    pair_sentence(COLORS[dc], ANIMALS[da], dk),
                ];
                text.extend((0..3).map(|_| filler(&mut rng)));
                text.shuffle(&mut rng);
                DialogueRecord {
                    id: format!("copy-{i:05}"),
                    persona: persona(&mut rng, COLORS[c], ANIMALS[a]),
                    turns: vec![
                        Turn::human(text.join(" ")),
                        Turn::machine("nice ."),
                        Turn::human(*PROMPTS.choose(&mut rng).unwrap()),
                        Turn::machine(pair_sentence(COLORS[c], ANIMALS[a], k)),
                    ],
                }
            })
            .collect();
        let stage1 = samples_from_records(&copy_records, 3)?
            .into_iter()
            .filter(|s| s.turn_index == 3)
            .collect();
        Ok(SyntheticTask {
            corpus,
            stage1,
            stage2: samples_from_records(&stage2_records, 3)?,
            heldout: samples_from_records(&heldout_records, 3)?,
            copy_records,
            pet_records: stage2_records,
            heldout_records,
            oracle,
        })
    }

    /// Vocabulary over every text in the task plus the segment field markers.
    pub fn vocab(&self) -> Vocab {
        let mut texts: Vec<String> = vec!["story : persona : context : human : machine :".into()];
        texts.extend(self.corpus.stories().iter().map(|s| s.text().to_string()));
        for s in self.stage1.iter().chain(&self.stage2).chain(&self.heldout) {
            texts.extend(s.persona.iter().cloned());
            texts.extend(s.context.iter().map(|t| t.text.clone()));
            texts.push(s.target.clone());
        }
        Vocab::build(texts)
    }

    pub fn oracle_position(&self, sample: &DialogueSample) -> usize {
        self.oracle[&sample.dialogue_id]
    }
}

/// Mean over `samples` of the retriever's probability on the oracle story,
/// `softmax(scores / tau_s)` over the whole corpus with the given index.
pub fn oracle_probability(
    gen: &Seq2SeqModel,
    enc: &TextEncoder,
    index: &StoryIndex,
    task: &SyntheticTask,
    samples: &[DialogueSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let q = enc.embed(&evaluation_query(gen, s, cfg)?)?;
        let scores: Vec<f64> = (0..index.len()).map(|i| index.score(i, &q) / cfg.tau_s).collect();
        let p = crate::autograd::softmax(&scores);
        total += p[task.oracle_position(s)];
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub retriever: EncoderConfig,
    pub pretrain: PretrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SyntheticConfig::default(),
            train: TrainConfig {
                batch_size: 8,
                index_refresh_steps: 10,
                stage1_epochs: 6,
                dropout: 0.0,
                learning_rate: 2e-3,
                max_source_len: 128,
                max_target_len: 12,
                ..TrainConfig::default()
            },
            model: ModelConfig {
                d_model: 32,
                heads: 2,
                d_ff: 64,
                encoder_layers: 2,
                decoder_layers: 2,
                max_source_len: 128,
                max_target_len: 12,
                dropout: 0.0,
            },
            retriever: EncoderConfig {
                d_model: 32,
                heads: 2,
                d_ff: 64,
                layers: 1,
                max_len: 64,
                dropout: 0.0,
                output_scale: 0.1,
            },
            pretrain: PretrainConfig {
                steps: 0,
                ..PretrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub stage1_losses: Vec<f64>,
    pub steps: Vec<StepReport>,
    /// Oracle probability on the stage-2 personas before and after stage 2.
    pub oracle_prob_before: f64,
    pub oracle_prob_after: f64,
    pub heldout_oracle_prob_before: f64,
    pub heldout_oracle_prob_after: f64,
    /// Held-out token F1 of the stage-1 generator without retrieval.
    pub baseline_f1: f64,
    /// Held-out token F1 after stage 2 with retrieval.
    pub final_f1: f64,
    pub unique_retrievals: usize,
}

/// Trained models from [`run_stage1`], reusable across stage-2 variants.
#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub generator: Seq2SeqModel,
    pub encoder: TextEncoder,
    pub losses: Vec<f64>,
}

pub fn run_stage1(task: &SyntheticTask, cfg: &ExperimentConfig) -> Result<Stage1Outcome> {
    let vocab = std::sync::Arc::new(task.vocab());
    let seed = cfg.train.seed;
    let init = |name: &str| {
        use rand::RngCore;
        substream(seed, name).next_u64()
    };
    let mut generator = Seq2SeqModel::new(cfg.model.clone(), vocab.clone(), init("init.generator"));
    let mut encoder = TextEncoder::new(cfg.retriever.clone(), vocab, init("init.retriever"));
    let texts: Vec<&str> = task.corpus.stories().iter().map(|s| s.text()).collect();
    pretrain_contrastive(
        &mut encoder,
        &texts,
        &cfg.pretrain,
        &mut substream(seed, "pretrain.retriever"),
    )?;
    let losses = train_stage1(&mut generator, &task.stage1, &cfg.train)?;
    Ok(Stage1Outcome {
        generator,
        encoder,
        losses,
    })
}

/// Stage 2 on the pet dialogues from a stage-1 outcome, with before/after
/// measurements.
pub fn run_stage2(task: &SyntheticTask, stage1: &Stage1Outcome, train: &TrainConfig) -> Result<ExperimentReport> {
    let evaluator = stage1.generator.clone();
    let mut generator = stage1.generator.clone();
    let mut encoder = stage1.encoder.clone();
    let index0 = build_index(&encoder, &task.corpus)?;
    let probe = |enc: &TextEncoder, index: &StoryIndex, samples: &[DialogueSample]| {
        oracle_probability(&evaluator, enc, index, task, samples, train)
    };
    let oracle_prob_before = probe(&encoder, &index0, &task.stage2)?;
    let heldout_oracle_prob_before = probe(&encoder, &index0, &task.heldout)?;
    let baseline = evaluate(&evaluator, None, &task.heldout, train)?;

    let (steps, index) = train_stage2(
        &mut generator,
        &evaluator,
        &mut encoder,
        &task.corpus,
        &task.stage2,
        train,
        |_, _| {},
    )?;
    let final_eval = evaluate(&generator, Some((&encoder, &index, &task.corpus)), &task.heldout, train)?;
    Ok(ExperimentReport {
        stage1_losses: stage1.losses.clone(),
        steps,
        oracle_prob_before,
        oracle_prob_after: probe(&encoder, &index, &task.stage2)?,
        heldout_oracle_prob_before,
        heldout_oracle_prob_after: probe(&encoder, &index, &task.heldout)?,
        baseline_f1: baseline.metrics.f1,
        final_f1: final_eval.metrics.f1,
        unique_retrievals: count_unique_retrievals(&generator, &encoder, &index, &task.heldout, train)?,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let task = SyntheticTask::build(&cfg.data)?;
    let stage1 = run_stage1(&task, cfg)?;
    run_stage2(&task, &stage1, &cfg.train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_shape() {
        let t = SyntheticTask::build(&SyntheticConfig::default()).unwrap();
        assert_eq!(t.corpus.len(), 100);
        assert_eq!(t.heldout.len(), 100);
        assert_eq!(t.stage2.len(), 100 * 24);
        for s in t.heldout.iter().chain(&t.stage2) {
            let story = t.corpus.get(t.oracle_position(s)).unwrap();
            let key = s.target.trim_end_matches(" .");
            assert!(story.text().contains(key));
            let hits = t.corpus.stories().iter().filter(|d| d.text().contains(key)).count();
            assert_eq!(hits, 1);
        }
        let train_personas: std::collections::HashSet<_> = t.stage2.iter().map(|s| s.persona.clone()).collect();
        assert!(t.heldout.iter().all(|s| !train_personas.contains(&s.persona)));
    }
}
