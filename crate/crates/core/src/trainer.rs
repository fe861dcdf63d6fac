//! Two-stage training.
//!
//! Stage 1 fits the generator on (persona, context) → response with no
//! retrieval. Stage 2 trains the retriever and generator jointly: for every
//! retrieved (and randomly augmented) candidate story, a frozen copy of the
//! stage-1 generator drafts a response, the drafts are graded against the
//! reference, the grades become a softmax target for the retriever scores,
//! and the generator is trained on all candidates at once.

use std::collections::BTreeSet;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{softmax, Gradients, Graph, ParamSet, Var};
use crate::corpus::{make_query, Corpus, DialogueSample, QueryMode, Story};
use crate::error::{Error, Result};
use crate::generator::{assemble_fid, Seq2SeqModel};
use crate::nn::Forward;
use crate::optim::{AdamW, AdamWConfig};
use crate::retriever::{build_index, candidate_augment, retrieve, score_candidates_var, StoryIndex, TextEncoder};
use crate::textmetrics::{corpus_eval, guidance_metric, MetricBundle};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverUpdate {
    /// Retriever frozen; only the generator trains in stage 2.
    None,
    #[default]
    Lapdog,
}

impl FromStr for RetrieverUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RetrieverUpdate::None),
            "lapdog" => Ok(RetrieverUpdate::Lapdog),
            other => Err(Error::Config(format!("unknown retriever update `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau_g: f64,
    pub tau_s: f64,
    pub rho: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_turns: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub batch_size: usize,
    pub query_mode: QueryMode,
    pub retriever_update: RetrieverUpdate,
    pub index_refresh_steps: usize,
    pub seed: u64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau_g: 0.85,
            tau_s: 0.8,
            rho: 0.5,
            k: 6,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            dropout: 0.1,
            max_turns: 3,
            max_source_len: 512,
            max_target_len: 32,
            batch_size: 8,
            query_mode: QueryMode::Persona,
            retriever_update: RetrieverUpdate::Lapdog,
            index_refresh_steps: 200,
            seed: 0,
            stage1_epochs: 1,
            stage2_epochs: 1,
            max_grad_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau_g > 0.0 && self.tau_s > 0.0) {
            return bad(format!(
                "temperatures must be positive (tau_g {}, tau_s {})",
                self.tau_g, self.tau_s
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.k < 2 {
            return bad(format!("K must be at least 2, got {}", self.k));
        }
        if self.batch_size == 0 || self.max_turns == 0 || self.index_refresh_steps == 0 {
            return bad("batch_size, max_turns and index_refresh_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..Default::default()
        }
    }
}

/// Independent RNG stream derived from the run seed and a stream name, so
/// that changing how one stream is consumed leaves the others untouched.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Metric-derived target distribution over K candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceDistribution {
    pub p: Vec<f64>,
}

/// `softmax(metric_values / tau_g)`.
pub fn guidance_distribution(metric_values: &[f64], tau_g: f64) -> Result<GuidanceDistribution> {
    if let Some(i) = metric_values.iter().position(|m| !m.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    if metric_values.is_empty() {
        return Err(Error::Empty("metric values"));
    }
    if tau_g <= 0.0 {
        return Err(Error::Config(format!("tau_g must be positive, got {tau_g}")));
    }
    let scaled: Vec<f64> = metric_values.iter().map(|m| m / tau_g).collect();
    Ok(GuidanceDistribution { p: softmax(&scaled) })
}

/// `KL(guidance ‖ softmax(scores / tau_s))` as a graph node; the guidance
/// side is a constant.
pub fn retriever_loss(g: &mut Graph, scores: Var, guidance: &GuidanceDistribution, tau_s: f64) -> Var {
    g.kl_to_softmax(scores, &guidance.p, tau_s)
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Batch mean of the KL retriever loss.
    pub retriever_loss: f64,
    /// Batch mean of the retrieval-augmented generator NLL.
    pub generator_loss: f64,
    pub joint_loss: f64,
    pub replaced_slots: usize,
    /// One K-vector of guidance metric values per batch sample.
    pub metric_values: Vec<Vec<f64>>,
}

fn accumulate(into: &mut Vec<Array2<f64>>, grads: &Gradients, set: &ParamSet, weight: f64) {
    let dense = grads.dense_for(set);
    if into.is_empty() {
        *into = dense.into_iter().map(|g| g * weight).collect();
    } else {
        for (a, g) in into.iter_mut().zip(dense) {
            a.scaled_add(weight, &g);
        }
    }
}

/// Supervised generator training without retrieval.
pub struct Stage1Trainer {
    cfg: TrainConfig,
    opt: AdamW,
    dropout_rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
    step: usize,
}

impl Stage1Trainer {
    pub fn new(model: &Seq2SeqModel, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Stage1Trainer {
            cfg: cfg.clone(),
            opt: AdamW::new(cfg.optimizer(), model.params()),
            dropout_rng: substream(cfg.seed, "stage1.dropout"),
            order_rng: substream(cfg.seed, "stage1.order"),
            step: 0,
        })
    }

    /// One optimizer step on the batch mean of the summed NLL; returns the
    /// pre-update loss.
    pub fn step(&mut self, model: &mut Seq2SeqModel, batch: &[&DialogueSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let weight = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut acc = Vec::new();
        for s in batch {
            let input = assemble_fid(&[], &s.persona, &s.context, &model.template());
            let mut g = Graph::new();
            let mut fwd = Forward::train(self.cfg.dropout, &mut self.dropout_rng);
            let loss = model.nll_var(&mut g, &mut fwd, &input, &s.target)?;
            total += g.scalar(loss) * weight;
            accumulate(&mut acc, &g.backward(loss), model.params(), weight);
        }
        self.opt.step(model.params_mut(), &acc);
        self.step += 1;
        Ok(total)
    }

    /// Shuffled mini-batches, one entry per step.
    pub fn epoch_batches<'a>(&mut self, samples: &'a [DialogueSample]) -> Vec<Vec<&'a DialogueSample>> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.order_rng);
        order
            .chunks(self.cfg.batch_size)
            .map(|c| c.iter().map(|&i| &samples[i]).collect())
            .collect()
    }
}

/// Runs `cfg.stage1_epochs` epochs; returns the per-step losses.
pub fn train_stage1(model: &mut Seq2SeqModel, samples: &[DialogueSample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("stage-1 samples"));
    }
    let mut trainer = Stage1Trainer::new(model, cfg)?;
    let mut losses = Vec::new();
    for _ in 0..cfg.stage1_epochs {
        for batch in trainer.epoch_batches(samples) {
            losses.push(trainer.step(model, &batch)?);
        }
    }
    Ok(losses)
}

/// Mutable stage-2 state: both models' optimizers, the index and RNG streams.
pub struct Stage2Trainer {
    cfg: TrainConfig,
    gen_opt: AdamW,
    enc_opt: AdamW,
    index: StoryIndex,
    augment_rng: ChaCha8Rng,
    query_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
    step: usize,
    refreshes: usize,
}

impl Stage2Trainer {
    pub fn new(gen: &Seq2SeqModel, enc: &TextEncoder, corpus: &Corpus, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.k > corpus.len() {
            return Err(Error::KTooLarge {
                k: cfg.k,
                n: corpus.len(),
            });
        }
        Ok(Stage2Trainer {
            cfg: cfg.clone(),
            gen_opt: AdamW::new(cfg.optimizer(), gen.params()),
            enc_opt: AdamW::new(cfg.optimizer(), enc.params()),
            index: build_index(enc, corpus)?,
            augment_rng: substream(cfg.seed, "stage2.augment"),
            query_rng: substream(cfg.seed, "stage2.query"),
            dropout_rng: substream(cfg.seed, "stage2.dropout"),
            order_rng: substream(cfg.seed, "stage2.order"),
            step: 0,
            refreshes: 0,
        })
    }

    pub fn index(&self) -> &StoryIndex {
        &self.index
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Number of full index rebuilds after the initial build.
    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    pub fn epoch_batches<'a>(&mut self, samples: &'a [DialogueSample]) -> Vec<Vec<&'a DialogueSample>> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.order_rng);
        order
            .chunks(self.cfg.batch_size)
            .map(|c| c.iter().map(|&i| &samples[i]).collect())
            .collect()
    }

    /// One joint update over a batch. `evaluator` is the frozen stage-1
    /// generator that grades candidates; it is only read.
    pub fn step(
        &mut self,
        gen: &mut Seq2SeqModel,
        evaluator: &Seq2SeqModel,
        enc: &mut TextEncoder,
        corpus: &Corpus,
        batch: &[&DialogueSample],
    ) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let cfg = &self.cfg;
        let weight = 1.0 / batch.len() as f64;
        let template = gen.template();
        let max_len = gen.config().max_target_len;
        let (mut gen_acc, mut enc_acc) = (Vec::new(), Vec::new());
        let mut report = StepReport {
            step: self.step,
            retriever_loss: 0.0,
            generator_loss: 0.0,
            joint_loss: 0.0,
            replaced_slots: 0,
            metric_values: Vec::with_capacity(batch.len()),
        };
        for s in batch {
            let draft = match cfg.query_mode {
                QueryMode::Generated => {
                    Some(evaluator.generate(&assemble_fid(&[], &s.persona, &s.context, &template), max_len)?)
                }
                _ => None,
            };
            let query = make_query(s, cfg.query_mode, &mut self.query_rng, draft.as_deref())?;
            let top = retrieve(&self.index, &enc.embed(&query)?, cfg.k)?;
            let cands = candidate_augment(&top, corpus, cfg.rho, &mut self.augment_rng)?;
            report.replaced_slots += cands.items.iter().filter(|i| i.score.is_nan()).count();
            let stories: Vec<&Story> = cands.stories(corpus);

            let metrics = stories
                .iter()
                .map(|d| {
                    let input = assemble_fid(&[d], &s.persona, &s.context, &template);
                    Ok(guidance_metric(&evaluator.generate(&input, max_len)?, &s.target))
                })
                .collect::<Result<Vec<f64>>>()?;
            let guidance = guidance_distribution(&metrics, cfg.tau_g)?;

            let mut g = Graph::new();
            let mut fwd = Forward::train(cfg.dropout, &mut self.dropout_rng);
            let scores = score_candidates_var(&mut g, &mut fwd, enc, &query, &stories)?;
            let lr = retriever_loss(&mut g, scores, &guidance, cfg.tau_s);
            let input = assemble_fid(&stories, &s.persona, &s.context, &template);
            let lg = gen.nll_var(&mut g, &mut fwd, &input, &s.target)?;
            let joint = g.add(lr, lg);
            let grads = g.backward(joint);
            accumulate(&mut gen_acc, &grads, gen.params(), weight);
            if cfg.retriever_update == RetrieverUpdate::Lapdog {
                accumulate(&mut enc_acc, &grads, enc.params(), weight);
            }
            report.retriever_loss += g.scalar(lr) * weight;
            report.generator_loss += g.scalar(lg) * weight;
            report.metric_values.push(metrics);
        }
        report.joint_loss = report.retriever_loss + report.generator_loss;

        self.gen_opt.step(gen.params_mut(), &gen_acc);
        if cfg.retriever_update == RetrieverUpdate::Lapdog {
            self.enc_opt.step(enc.params_mut(), &enc_acc);
        }
        self.step += 1;
        if self.step.is_multiple_of(cfg.index_refresh_steps) && self.index.is_stale(enc) {
            self.index = build_index(enc, corpus)?;
            self.refreshes += 1;
        }
        Ok(report)
    }

    /// Rebuilds the index if the encoder changed since the last build.
    pub fn refresh_index(&mut self, enc: &TextEncoder, corpus: &Corpus) -> Result<()> {
        if self.index.is_stale(enc) {
            self.index = build_index(enc, corpus)?;
            self.refreshes += 1;
        }
        Ok(())
    }
}

/// Runs `cfg.stage2_epochs` epochs of joint training and returns the
/// per-step reports; `on_step` sees every report together with the
/// current encoder. The index is refreshed once more at the end.
pub fn train_stage2(
    gen: &mut Seq2SeqModel,
    evaluator: &Seq2SeqModel,
    enc: &mut TextEncoder,
    corpus: &Corpus,
    samples: &[DialogueSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepReport, &TextEncoder),
) -> Result<(Vec<StepReport>, StoryIndex)> {
    let mut trainer = Stage2Trainer::new(gen, enc, corpus, cfg)?;
    let mut reports = Vec::new();
    for _ in 0..cfg.stage2_epochs {
        for batch in trainer.epoch_batches(samples) {
            let r = trainer.step(gen, evaluator, enc, corpus, &batch)?;
            on_step(&r, enc);
            reports.push(r);
        }
    }
    trainer.refresh_index(enc, corpus)?;
    Ok((reports, trainer.index))
}

/// Retrieval query for evaluation. One-persona queries draw from a fixed
/// stream keyed by the sample, so every evaluation sees the same queries.
pub fn evaluation_query(gen: &Seq2SeqModel, sample: &DialogueSample, cfg: &TrainConfig) -> Result<String> {
    let mut rng = substream(
        cfg.seed,
        &format!("eval.query/{}/{}", sample.dialogue_id, sample.turn_index),
    );
    let draft = match cfg.query_mode {
        QueryMode::Generated => {
            let input = assemble_fid(&[], &sample.persona, &sample.context, &gen.template());
            Some(gen.generate(&input, gen.config().max_target_len)?)
        }
        _ => None,
    };
    make_query(sample, cfg.query_mode, &mut rng, draft.as_deref())
}

/// Size of the union of top-K story ids over `samples` (no augmentation).
pub fn count_unique_retrievals(
    gen: &Seq2SeqModel,
    enc: &TextEncoder,
    index: &StoryIndex,
    samples: &[DialogueSample],
    cfg: &TrainConfig,
) -> Result<usize> {
    let mut seen = BTreeSet::new();
    for s in samples {
        let q = evaluation_query(gen, s, cfg)?;
        for item in retrieve(index, &enc.embed(&q)?, cfg.k)?.items {
            seen.insert(item.position);
        }
    }
    Ok(seen.len())
}

/// Retrieval side of an evaluation; `None` evaluates the plain generator.
pub type RetrievalContext<'a> = Option<(&'a TextEncoder, &'a StoryIndex, &'a Corpus)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricBundle,
    pub unique_retrievals: Option<usize>,
    pub hypotheses: Vec<String>,
}

/// Greedy decoding over `samples` and corpus-level metrics.
pub fn evaluate(
    gen: &Seq2SeqModel,
    retrieval: RetrievalContext,
    samples: &[DialogueSample],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    let template = gen.template();
    let max_len = gen.config().max_target_len;
    let mut hyps = Vec::with_capacity(samples.len());
    let mut seen = BTreeSet::new();
    for s in samples {
        let input = match retrieval {
            Some((enc, index, corpus)) => {
                let q = evaluation_query(gen, s, cfg)?;
                let set = retrieve(index, &enc.embed(&q)?, cfg.k)?;
                seen.extend(set.positions());
                assemble_fid(&set.stories(corpus), &s.persona, &s.context, &template)
            }
            None => assemble_fid(&[], &s.persona, &s.context, &template),
        };
        hyps.push(gen.generate(&input, max_len)?);
    }
    let refs: Vec<&str> = samples.iter().map(|s| s.target.as_str()).collect();
    Ok(EvalReport {
        metrics: corpus_eval(&hyps, &refs)?,
        unique_retrievals: retrieval.map(|_| seen.len()),
        hypotheses: hyps,
    })
}
