//! Command-line runs.
//!
//! Every command writes into one run directory, `<root>/<run name>`, where the
//! root is `runs` unless `LAPDOG_RUN_DIR` says otherwise. A `manifest.json`
//! recording the command, configuration, input fingerprints and timestamps
//! is written last, so its presence marks a completed run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_generator, load_retriever, save_generator, save_retriever};
use crate::corpus::{
    first_personify_counted, load_dialogues, load_stories, samples_from_records, write_stories, Corpus, DialogueRecord,
    DialogueSample, PersonifyRules, QueryMode, Story,
};
use crate::generator::{assemble_fid, ModelConfig, Seq2SeqModel};
use crate::retriever::{
    build_index, pretrain_contrastive, retrieve, EncoderConfig, PretrainConfig, StoryIndex, TextEncoder,
};
use crate::textmetrics::{corpus_eval, MetricBundle};
use crate::trainer::{
    count_unique_retrievals, evaluate, evaluation_query, substream, train_stage1, train_stage2, RetrieverUpdate,
    TrainConfig,
};
use crate::vocab::Vocab;

/// Environment variable overriding the output root.
pub const RUN_DIR_ENV: &str = "LAPDOG_RUN_DIR";
const DEFAULT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(
    name = "lapdog",
    version,
    about = "Metric-guided story retrieval for persona dialogue"
)]
pub struct Cli {
    /// Run directory name under the output root (defaults to the command name).
    #[arg(long, global = true)]
    pub run_name: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rewrite third-person stories in the first person.
    Preprocess(PreprocessArgs),
    /// Embed a story corpus with a retriever checkpoint and save the index.
    Index(IndexArgs),
    /// Run stage 1 (generator only) or stage 2 (joint) training.
    Train(TrainArgs),
    /// Decode responses for a dialogue file.
    Generate(GenerateArgs),
    /// Corpus metrics and unique-retrieval count on a dialogue file.
    Evaluate(EvaluateArgs),
    /// Number of distinct stories retrieved over a dialogue file.
    DiversityReport(DiversityArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON rules: `{"names": [...], "verbs": {"hums": "hum"}}`.
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Retriever checkpoint, or a run directory holding `retriever/`.
    #[arg(long)]
    pub retriever: PathBuf,
    #[arg(long)]
    pub stories: PathBuf,
    /// Index path (defaults to `index.bin` in the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One flag per configuration field; a flag wins over the config file.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// JSON file with TrainConfig fields and optional `model`, `retriever`
    /// and `pretrain` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau_g: Option<f64>,
    #[arg(long)]
    pub tau_s: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long = "k")]
    pub k: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_turns: Option<usize>,
    #[arg(long)]
    pub max_source_len: Option<usize>,
    #[arg(long)]
    pub max_target_len: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub query_mode: Option<QueryMode>,
    #[arg(long)]
    pub retriever_update: Option<RetrieverUpdate>,
    #[arg(long)]
    pub index_refresh_steps: Option<usize>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub stories: PathBuf,
    /// Training dialogues (JSON lines).
    #[arg(long)]
    pub dialogues: PathBuf,
    /// Dialogues evaluated after training; the report lands in `evaluation.json`.
    #[arg(long)]
    pub eval_dialogues: Option<PathBuf>,
    /// Stage-1 run directory; required by stage 2 unless `--scratch`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Stage 2 from random initialization, without a stage-1 checkpoint.
    #[arg(long)]
    pub scratch: bool,
    /// Earlier run directory of the same stage whose weights initialize this run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    /// Run directory (or generator checkpoint) to decode with.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dialogues: PathBuf,
    #[arg(long)]
    pub stories: Option<PathBuf>,
    /// Saved index; rebuilt from the retriever checkpoint when absent.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Plain generator without retrieved stories.
    #[arg(long)]
    pub no_retrieval: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: RetrievalArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: RetrievalArgs,
    /// Score these hypotheses (one per line, in sample order) instead of decoding.
    #[arg(long)]
    pub hyp_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    #[command(flatten)]
    pub common: RetrievalArgs,
}

/// Configuration file layout: TrainConfig fields at the top level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub retriever: EncoderConfig,
    #[serde(default = "no_pretraining")]
    pub pretrain: PretrainConfig,
}

fn no_pretraining() -> PretrainConfig {
    PretrainConfig {
        steps: 0,
        ..PretrainConfig::default()
    }
}

impl RunConfig {
    /// Copies the shared fields of the training config into the model configs.
    pub fn synced(mut self) -> Self {
        self.model.max_source_len = self.train.max_source_len;
        self.model.max_target_len = self.train.max_target_len;
        self.model.dropout = self.train.dropout;
        self.retriever.dropout = self.train.dropout;
        self
    }
}

impl ConfigArgs {
    /// Config file (or `fallback` when no file is given, or defaults), then flags.
    pub fn resolve(&self, fallback: Option<&Path>) -> anyhow::Result<RunConfig> {
        let mut rc = match self.config.as_deref().or(fallback.filter(|p| p.exists())) {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        let t = &mut rc.train;
        macro_rules! apply {
            ($($field:ident),*) => { $( if let Some(v) = self.$field.clone() { t.$field = v; } )* };
        }
        apply!(
            seed,
            tau_g,
            tau_s,
            rho,
            k,
            learning_rate,
            weight_decay,
            dropout,
            max_turns,
            max_source_len,
            max_target_len,
            batch_size,
            query_mode,
            retriever_update,
            index_refresh_steps,
            stage1_epochs,
            stage2_epochs
        );
        if let Some(v) = self.max_grad_norm {
            t.max_grad_norm = (v > 0.0).then_some(v);
        }
        t.validate()?;
        Ok(rc.synced())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFingerprint {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFingerprint>,
    pub seed: Option<u64>,
    /// Milliseconds since the Unix epoch.
    pub started_at_ms: u128,
    pub finished_at_ms: u128,
    pub outputs: Vec<PathBuf>,
}

/// Report written by `evaluate` and by `train --eval-dialogues`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metrics: MetricBundle,
    pub unique_retrievals: Option<usize>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub unique_retrievals: usize,
    pub samples: usize,
    pub k: usize,
    pub corpus_size: usize,
}

/// One line of `generations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub retrieved: Vec<String>,
    pub response: String,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

/// Output root: `LAPDOG_RUN_DIR` if set, else `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_ROOT), PathBuf::from)
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Fingerprints a file, or every file under a directory in sorted order.
fn fingerprint(path: &Path, out: &mut Vec<InputFingerprint>) -> anyhow::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            fingerprint(&e, out)?;
        }
    } else {
        out.push(InputFingerprint {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
    }
    Ok(())
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Accumulates what a command read and wrote, then writes the manifest.
struct Run {
    dir: PathBuf,
    command: &'static str,
    started_at_ms: u128,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, name: Option<&str>) -> anyhow::Result<Self> {
        let dir = output_root().join(name.unwrap_or(command));
        fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        let stale = dir.join("manifest.json");
        if stale.exists() {
            fs::remove_file(&stale).with_context(|| format!("removing {}", stale.display()))?;
        }
        Ok(Run {
            dir,
            command,
            started_at_ms: now_ms(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn output(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }

    fn finish(self, config: serde_json::Value, seed: Option<u64>) -> anyhow::Result<RunManifest> {
        let mut inputs = Vec::new();
        for p in &self.inputs {
            fingerprint(p, &mut inputs)?;
        }
        let manifest = RunManifest {
            command: self.command.to_string(),
            config,
            inputs,
            seed,
            started_at_ms: self.started_at_ms,
            finished_at_ms: now_ms(),
            outputs: self.outputs,
        };
        write_json(&self.dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }
}

/// A checkpoint directory, or the `sub` directory of a run directory.
fn model_dir(path: &Path, sub: &str) -> PathBuf {
    if path.join("manifest.json").exists() && path.join("params.bin").exists() {
        path.to_path_buf()
    } else {
        path.join(sub)
    }
}

/// Vocabulary over stories, personas, turns and the segment field markers.
pub fn data_vocab(corpus: &Corpus, records: &[DialogueRecord]) -> Vocab {
    let mut texts: Vec<String> = vec!["story: persona: context: human: machine:".into()];
    texts.extend(corpus.stories().iter().map(|s| s.text().to_string()));
    for r in records {
        texts.extend(r.persona.iter().cloned());
        texts.extend(r.turns.iter().map(|t| t.text.clone()));
    }
    Vocab::build(texts)
}

fn fresh_models(rc: &RunConfig, vocab: Vocab) -> (Seq2SeqModel, TextEncoder) {
    use rand::RngCore;
    let vocab = Arc::new(vocab);
    let seed = rc.train.seed;
    let gen = Seq2SeqModel::new(
        rc.model.clone(),
        vocab.clone(),
        substream(seed, "init.generator").next_u64(),
    );
    let enc = TextEncoder::new(
        rc.retriever.clone(),
        vocab,
        substream(seed, "init.retriever").next_u64(),
    );
    (gen, enc)
}

fn load_models(run: &Path) -> anyhow::Result<(Seq2SeqModel, TextEncoder)> {
    let gen_dir = model_dir(run, "generator");
    let (gen, _) = load_generator(&gen_dir).with_context(|| format!("loading generator from {}", gen_dir.display()))?;
    let enc_dir = run.join("retriever");
    let (enc, _) = load_retriever(&enc_dir).with_context(|| format!("loading retriever from {}", enc_dir.display()))?;
    Ok((gen, enc))
}

fn load_samples(path: &Path, max_turns: usize) -> anyhow::Result<Vec<DialogueSample>> {
    let records = load_dialogues(path).with_context(|| format!("reading dialogues {}", path.display()))?;
    samples_from_records(&records, max_turns).with_context(|| format!("slicing dialogues {}", path.display()))
}

fn read_corpus(path: &Path) -> anyhow::Result<Corpus> {
    load_stories(path).with_context(|| format!("reading stories {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn cmd_preprocess(args: &PreprocessArgs, run_name: Option<&str>) -> anyhow::Result<RunManifest> {
    let mut run = Run::start("preprocess", run_name)?;
    run.input(&args.input);
    let rules = match &args.rules {
        Some(p) => {
            run.input(p);
            PersonifyRules::load(p).with_context(|| format!("reading rules {}", p.display()))?
        }
        None => PersonifyRules::default(),
    };
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let mut stories = Vec::new();
    let mut bad = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Story>(line) {
            Ok(s) => stories.push(s),
            Err(e) => {
                eprintln!("{}:{}: {e}", args.input.display(), i + 1);
                bad += 1;
            }
        }
    }
    if bad > 0 {
        bail!("{bad} malformed story line(s) in {}", args.input.display());
    }
    let (tagger, corrector) = (rules.tagger(), rules.corrector());
    let mut replaced = 0;
    let out: Vec<Story> = stories
        .iter()
        .map(|s| {
            let (p, n) = first_personify_counted(s, &tagger, &corrector);
            replaced += n;
            p
        })
        .collect();
    write_stories(&args.out, &out)?;
    run.output(args.out.clone());
    println!("stories processed: {}\nentities replaced: {replaced}", out.len());
    run.finish(serde_json::to_value(&rules)?, None)
}

pub fn cmd_index(args: &IndexArgs, run_name: Option<&str>) -> anyhow::Result<RunManifest> {
    let mut run = Run::start("index", run_name)?;
    let enc_dir = model_dir(&args.retriever, "retriever");
    run.input(&enc_dir);
    run.input(&args.stories);
    let (enc, manifest) =
        load_retriever(&enc_dir).with_context(|| format!("loading retriever {}", enc_dir.display()))?;
    let corpus = read_corpus(&args.stories)?;
    let index = build_index(&enc, &corpus)?;
    let path = args.out.clone().unwrap_or_else(|| run.dir.join("index.bin"));
    index.save(&path)?;
    run.output(StoryIndex::sidecar_path(&path));
    run.output(path);
    println!(
        "indexed {} stories (dim {}, fingerprint {})",
        index.len(),
        index.dim(),
        index.fingerprint()
    );
    run.finish(serde_json::to_value(&manifest)?, None)
}

pub fn cmd_train(args: &TrainArgs, run_name: Option<&str>) -> anyhow::Result<RunManifest> {
    if args.stage == 2 && args.checkpoint.is_none() && !args.scratch {
        bail!("stage 2 needs a stage-1 checkpoint (--checkpoint <run dir>) or --scratch");
    }
    let default_name = if args.stage == 1 {
        "train-stage1"
    } else {
        "train-stage2"
    };
    let mut run = Run::start("train", Some(run_name.unwrap_or(default_name)))?;
    let rc = args.cfg.resolve(None)?;
    let cfg = &rc.train;
    if let Some(p) = &args.cfg.config {
        run.input(p);
    }
    run.input(&args.stories);
    run.input(&args.dialogues);
    let corpus = read_corpus(&args.stories)?;
    let records = load_dialogues(&args.dialogues).with_context(|| format!("reading {}", args.dialogues.display()))?;
    let samples = samples_from_records(&records, cfg.max_turns)?;
    write_json(&run.output(run.dir.join("config.json")), &rc)?;

    let stage1_dir = args.checkpoint.as_deref().filter(|_| !args.scratch);
    let (mut gen, mut enc) = match (&args.resume, stage1_dir) {
        (Some(prev), _) => {
            run.input(prev);
            load_models(prev)?
        }
        (None, Some(ckpt)) if args.stage == 2 => {
            run.input(ckpt);
            load_models(ckpt)?
        }
        _ => {
            let (gen, mut enc) = fresh_models(&rc, data_vocab(&corpus, &records));
            if rc.pretrain.steps > 0 {
                let texts: Vec<&str> = corpus.stories().iter().map(|s| s.text()).collect();
                pretrain_contrastive(
                    &mut enc,
                    &texts,
                    &rc.pretrain,
                    &mut substream(cfg.seed, "pretrain.retriever"),
                )?;
            }
            (gen, enc)
        }
    };

    let metrics_path = run.output(run.dir.join("metrics.jsonl"));
    let eval_samples = match &args.eval_dialogues {
        Some(p) => {
            run.input(p);
            Some(load_samples(p, cfg.max_turns)?)
        }
        None => None,
    };
    let mut report = None;
    if args.stage == 1 {
        let losses = train_stage1(&mut gen, &samples, cfg)?;
        let rows: Vec<serde_json::Value> = losses
            .iter()
            .enumerate()
            .map(|(step, loss)| serde_json::json!({ "step": step, "loss": loss }))
            .collect();
        write_jsonl(&metrics_path, &rows)?;
        save_generator(run.output(run.dir.join("generator")), &gen, 1, losses.len())?;
        save_retriever(run.output(run.dir.join("retriever")), &enc, 1, 0)?;
        if let Some(eval) = &eval_samples {
            let r = evaluate(&gen, None, eval, cfg)?;
            report = Some(EvaluationReport {
                metrics: r.metrics,
                unique_retrievals: None,
                samples: eval.len(),
            });
        }
    } else {
        let evaluator = match stage1_dir {
            Some(ckpt) => load_models(ckpt)?.0,
            None => gen.clone(),
        };
        let file = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
        let mut log = std::io::BufWriter::new(file);
        let mut log_err = None;
        let (steps, index) = train_stage2(&mut gen, &evaluator, &mut enc, &corpus, &samples, cfg, |r, _| {
            if log_err.is_none() {
                let line = serde_json::to_string(r).map_err(anyhow::Error::from);
                if let Err(e) = line.and_then(|l| writeln!(log, "{l}").map_err(anyhow::Error::from)) {
                    log_err = Some(e);
                }
            }
        })?;
        if let Some(e) = log_err {
            return Err(e.context("writing the step log"));
        }
        log.flush()?;
        save_generator(run.output(run.dir.join("generator")), &gen, 2, steps.len())?;
        save_retriever(run.output(run.dir.join("retriever")), &enc, 2, steps.len())?;
        let index_path = run.output(run.dir.join("index.bin"));
        index.save(&index_path)?;
        run.output(StoryIndex::sidecar_path(&index_path));
        if let Some(eval) = &eval_samples {
            let r = evaluate(&gen, Some((&enc, &index, &corpus)), eval, cfg)?;
            report = Some(EvaluationReport {
                metrics: r.metrics,
                unique_retrievals: r.unique_retrievals,
                samples: eval.len(),
            });
        }
    }
    if let Some(r) = &report {
        write_json(&run.output(run.dir.join("evaluation.json")), r)?;
        println!("{}", serde_json::to_string_pretty(r)?);
    }
    run.finish(serde_json::to_value(&rc)?, Some(cfg.seed))
}

/// Models, config and retrieval state shared by generate, evaluate and
/// diversity-report.
struct Loaded {
    rc: RunConfig,
    gen: Seq2SeqModel,
    retrieval: Option<(TextEncoder, StoryIndex, Corpus)>,
    samples: Vec<DialogueSample>,
}

fn load_for_decoding(args: &RetrievalArgs, run: &mut Run, need_retrieval: bool) -> anyhow::Result<Loaded> {
    let ckpt = args.checkpoint.as_deref().context("--checkpoint is required")?;
    run.input(ckpt);
    let rc = args.cfg.resolve(Some(&ckpt.join("config.json")))?;
    if let Some(p) = &args.cfg.config {
        run.input(p);
    }
    let gen_dir = model_dir(ckpt, "generator");
    let (gen, _) = load_generator(&gen_dir).with_context(|| format!("loading generator {}", gen_dir.display()))?;
    run.input(&args.dialogues);
    let samples = load_samples(&args.dialogues, rc.train.max_turns)?;
    let retrieval = if need_retrieval {
        let stories = args.stories.as_deref().context("--stories is required for retrieval")?;
        run.input(stories);
        let corpus = read_corpus(stories)?;
        let (enc, _) = load_retriever(ckpt.join("retriever"))
            .with_context(|| format!("loading retriever from {}", ckpt.join("retriever").display()))?;
        let index = match &args.index {
            Some(p) => {
                run.input(p);
                StoryIndex::load(p, &corpus).with_context(|| format!("loading index {}", p.display()))?
            }
            None => build_index(&enc, &corpus)?,
        };
        Some((enc, index, corpus))
    } else {
        None
    };
    Ok(Loaded {
        rc,
        gen,
        retrieval,
        samples,
    })
}

pub fn cmd_generate(args: &GenerateArgs, run_name: Option<&str>) -> anyhow::Result<RunManifest> {
    let args = &args.common;
    let mut run = Run::start("generate", run_name)?;
    let l = load_for_decoding(args, &mut run, !args.no_retrieval)?;
    let cfg = &l.rc.train;
    let template = l.gen.template();
    let max_len = l.gen.config().max_target_len;
    let mut rows = Vec::with_capacity(l.samples.len());
    for s in &l.samples {
        let (input, retrieved) = match &l.retrieval {
            Some((enc, index, corpus)) => {
                let q = evaluation_query(&l.gen, s, cfg)?;
                let set = retrieve(index, &enc.embed(&q)?, cfg.k)?;
                let stories = set.stories(corpus);
                let ids = stories.iter().map(|d| d.id().to_string()).collect();
                (assemble_fid(&stories, &s.persona, &s.context, &template), ids)
            }
            None => (assemble_fid(&[], &s.persona, &s.context, &template), Vec::new()),
        };
        rows.push(Generation {
            dialogue_id: s.dialogue_id.clone(),
            turn_index: s.turn_index,
            retrieved,
            response: l.gen.generate(&input, max_len)?,
        });
    }
    let path = run.output(run.dir.join("generations.jsonl"));
    write_jsonl(&path, &rows)?;
    println!("wrote {} responses to {}", rows.len(), path.display());
    run.finish(serde_json::to_value(&l.rc)?, Some(cfg.seed))
}

pub fn cmd_evaluate(args: &EvaluateArgs, run_name: Option<&str>) -> anyhow::Result<RunManifest> {
    let mut run = Run::start("evaluate", run_name)?;
    let (report, rc) = match &args.hyp_file {
        Some(hyp_path) => {
            let common = &args.common;
            let fallback = common.checkpoint.as_ref().map(|c| c.join("config.json"));
            let rc = common.cfg.resolve(fallback.as_deref())?;
            run.input(hyp_path);
            run.input(&common.dialogues);
            let samples = load_samples(&common.dialogues, rc.train.max_turns)?;
            let text = fs::read_to_string(hyp_path).with_context(|| format!("reading {}", hyp_path.display()))?;
            let hyps: Vec<&str> = text.lines().collect();
            let refs: Vec<&str> = samples.iter().map(|s| s.target.as_str()).collect();
            let report = EvaluationReport {
                metrics: corpus_eval(&hyps, &refs)?,
                unique_retrievals: None,
                samples: samples.len(),
            };
            (report, rc)
        }
        None => {
            let l = load_for_decoding(&args.common, &mut run, !args.common.no_retrieval)?;
            let r = evaluate(
                &l.gen,
                l.retrieval.as_ref().map(|(e, i, c)| (e, i, c)),
                &l.samples,
                &l.rc.train,
            )?;
            let report = EvaluationReport {
                metrics: r.metrics,
                unique_retrievals: r.unique_retrievals,
                samples: l.samples.len(),
            };
            (report, l.rc)
        }
    };
    write_json(&run.output(run.dir.join("evaluation.json")), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    run.finish(serde_json::to_value(&rc)?, Some(rc.train.seed))
}

pub fn cmd_diversity_report(args: &DiversityArgs, run_name: Option<&str>) -> anyhow::Result<RunManifest> {
    let mut run = Run::start("diversity-report", run_name)?;
    let l = load_for_decoding(&args.common, &mut run, true)?;
    let (enc, index, corpus) = l.retrieval.as_ref().expect("retrieval loaded");
    let report = DiversityReport {
        unique_retrievals: count_unique_retrievals(&l.gen, enc, index, &l.samples, &l.rc.train)?,
        samples: l.samples.len(),
        k: l.rc.train.k,
        corpus_size: corpus.len(),
    };
    write_json(&run.output(run.dir.join("diversity.json")), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    run.finish(serde_json::to_value(&l.rc)?, Some(l.rc.train.seed))
}

pub fn run(cli: &Cli) -> anyhow::Result<RunManifest> {
    let name = cli.run_name.as_deref();
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a, name),
        Command::Index(a) => cmd_index(a, name),
        Command::Train(a) => cmd_train(a, name),
        Command::Generate(a) => cmd_generate(a, name),
        Command::Evaluate(a) => cmd_evaluate(a, name),
        Command::DiversityReport(a) => cmd_diversity_report(a, name),
    }
}

/// Parses the process arguments, runs the command and maps errors to a
/// nonzero exit status.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"rho": 0.25, "K": 4, "seed": 3, "model": {"d_model": 16, "heads": 2}}"#,
        )
        .unwrap();
        let args = ConfigArgs {
            config: Some(path),
            rho: Some(0.0),
            max_target_len: Some(9),
            ..Default::default()
        };
        let rc = args.resolve(None).unwrap();
        assert_eq!((rc.train.rho, rc.train.k, rc.train.seed), (0.0, 4, 3));
        assert_eq!(rc.model.d_model, 16);
        assert_eq!(rc.model.max_target_len, 9);
        assert_eq!(rc.pretrain.steps, 0);
    }

    #[test]
    fn zero_clip_disables_clipping() {
        let args = ConfigArgs {
            max_grad_norm: Some(0.0),
            ..Default::default()
        };
        assert_eq!(args.resolve(None).unwrap().train.max_grad_norm, None);
    }

    #[test]
    fn invalid_override_is_rejected() {
        let args = ConfigArgs {
            rho: Some(1.5),
            ..Default::default()
        };
        assert!(args.resolve(None).is_err());
    }
}
