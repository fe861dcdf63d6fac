//! Encoder–decoder response generator with Fusion-in-Decoder inputs.
//!
//! Each (story, persona, context) segment is encoded on its own; the encoder
//! states are concatenated along the position axis and the decoder
//! cross-attends over the whole concatenation. Input and output embeddings
//! are tied.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, ParamSet, Var};
use crate::corpus::{Story, Turn};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, embed_tokens, init_uniform, DecoderLayer, EncoderLayer, Forward, LayerNorm};
use crate::textmetrics::normalize;
use crate::vocab::{Vocab, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            d_ff: 256,
            encoder_layers: 2,
            decoder_layers: 2,
            max_source_len: 512,
            max_target_len: 32,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Two-layer, width-32 model used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 2,
            d_ff: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            max_source_len: 128,
            max_target_len: 16,
            dropout: 0.0,
        }
    }
}

/// Serialized segments for one Fusion-in-Decoder call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiDInput {
    pub segments: Vec<String>,
}

/// Segment field markers and the per-segment token budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentTemplate {
    pub story_field: String,
    pub persona_field: String,
    pub context_field: String,
    pub max_tokens: usize,
}

impl Default for SegmentTemplate {
    fn default() -> Self {
        SegmentTemplate {
            story_field: "story:".into(),
            persona_field: "persona:".into(),
            context_field: "context:".into(),
            max_tokens: 512,
        }
    }
}

impl SegmentTemplate {
    pub fn with_max_tokens(max_tokens: usize) -> Self {
        SegmentTemplate {
            max_tokens,
            ..Default::default()
        }
    }

    fn render(&self, story: Option<&Story>, persona: &str, context: &[Turn]) -> String {
        let turns: Vec<String> = context.iter().map(Turn::tagged).collect();
        let mut parts = Vec::with_capacity(6);
        if let Some(s) = story {
            parts.push(self.story_field.clone());
            parts.push(s.text().to_string());
        }
        parts.push(self.persona_field.clone());
        parts.push(persona.to_string());
        parts.push(self.context_field.clone());
        parts.push(turns.join(" "));
        parts.join(" ")
    }

    /// Renders one segment, dropping the oldest context turns (never the
    /// newest, never persona or story) until it fits the token budget.
    pub fn segment(&self, story: Option<&Story>, persona: &[String], context: &[Turn]) -> String {
        let persona = persona.join(" ");
        let mut start = 0;
        loop {
            let text = self.render(story, &persona, &context[start..]);
            if normalize(&text).len() <= self.max_tokens || start + 1 >= context.len() {
                return text;
            }
            start += 1;
        }
    }
}

/// One segment per story; a single story-less segment when `stories` is empty.
pub fn assemble_fid(stories: &[&Story], persona: &[String], context: &[Turn], template: &SegmentTemplate) -> FiDInput {
    let segments = if stories.is_empty() {
        vec![template.segment(None, persona, context)]
    } else {
        stories
            .iter()
            .map(|s| template.segment(Some(s), persona, context))
            .collect()
    };
    FiDInput { segments }
}

#[derive(Debug)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    vocab: Arc<Vocab>,
    params: ParamSet,
    embedding: usize,
    out_bias: usize,
    encoder: Vec<EncoderLayer>,
    encoder_ln: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_ln: LayerNorm,
    target_truncations: AtomicUsize,
}

impl Clone for Seq2SeqModel {
    fn clone(&self) -> Self {
        Seq2SeqModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            embedding: self.embedding,
            out_bias: self.out_bias,
            encoder: self.encoder.clone(),
            encoder_ln: self.encoder_ln.clone(),
            decoder: self.decoder.clone(),
            decoder_ln: self.decoder_ln.clone(),
            target_truncations: AtomicUsize::new(self.target_truncations()),
        }
    }
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig, vocab: Arc<Vocab>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.d_model;
        let embedding = ps.add(
            "embedding",
            init_uniform(&mut rng, vocab.len(), d, (d as f64).powf(-0.5)),
        );
        let out_bias = ps.add("out_bias", Array2::zeros((1, vocab.len())));
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut ps, &format!("enc{i}"), d, config.heads, config.d_ff, &mut rng))
            .collect();
        let encoder_ln = LayerNorm::new(&mut ps, "enc_ln", d);
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut ps, &format!("dec{i}"), d, config.heads, config.d_ff, &mut rng))
            .collect();
        let decoder_ln = LayerNorm::new(&mut ps, "dec_ln", d);
        Seq2SeqModel {
            config,
            vocab,
            params: ps,
            embedding,
            out_bias,
            encoder,
            encoder_ln,
            decoder,
            decoder_ln,
            target_truncations: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// How many targets were cut to `max_target_len`.
    pub fn target_truncations(&self) -> usize {
        self.target_truncations.load(Ordering::Relaxed)
    }

    pub fn template(&self) -> SegmentTemplate {
        SegmentTemplate::with_max_tokens(self.config.max_source_len)
    }

    /// Source token ids of one segment, capped at `max_source_len`.
    pub fn segment_ids(&self, segment: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(segment);
        ids.truncate(self.config.max_source_len);
        if ids.is_empty() {
            ids.push(EOS);
        }
        ids
    }

    fn encode_ids(&self, g: &mut Graph, fwd: &mut Forward, ids: &[usize]) -> Var {
        let mut x = embed_tokens(g, &self.params, self.embedding, ids);
        x = fwd.dropout(g, x);
        for layer in &self.encoder {
            x = layer.forward(g, &self.params, fwd, x);
        }
        self.encoder_ln.forward(g, &self.params, x)
    }

    /// Encodes each segment independently and concatenates the states in
    /// segment order. Returns the memory and the per-segment lengths.
    pub fn encode_concat(&self, g: &mut Graph, fwd: &mut Forward, input: &FiDInput) -> Result<(Var, Vec<usize>)> {
        if input.segments.is_empty() {
            return Err(Error::Empty("fusion-in-decoder input"));
        }
        let mut parts = Vec::with_capacity(input.segments.len());
        let mut lengths = Vec::with_capacity(input.segments.len());
        for seg in &input.segments {
            let ids = self.segment_ids(seg);
            lengths.push(ids.len());
            parts.push(self.encode_ids(g, fwd, &ids));
        }
        Ok((g.concat_rows(&parts), lengths))
    }

    /// Inference-mode encoder states (`sum of lengths x d_model`).
    pub fn encoder_states(&self, input: &FiDInput) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let (mem, _) = self.encode_concat(&mut g, &mut Forward::inference(), input)?;
        Ok(g.value(mem).clone())
    }

    /// Logits (`len(decoder_in) x V`) for a teacher-forced decoder input.
    pub fn decode_logits(&self, g: &mut Graph, fwd: &mut Forward, memory: Var, decoder_in: &[usize]) -> Var {
        let mut x = embed_tokens(g, &self.params, self.embedding, decoder_in);
        x = fwd.dropout(g, x);
        let mask = causal_mask(decoder_in.len());
        for layer in &self.decoder {
            x = layer.forward(g, &self.params, fwd, x, memory, &mask);
        }
        let h = self.decoder_ln.forward(g, &self.params, x);
        let table = g.param(&self.params, self.embedding);
        let logits = g.matmul_t(h, table);
        let bias = g.param(&self.params, self.out_bias);
        g.add_row(logits, bias)
    }

    /// Target ids followed by end-of-sequence, cut to `max_target_len`.
    pub fn target_ids(&self, target: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(target);
        let budget = self.config.max_target_len.saturating_sub(1).max(1);
        if ids.len() > budget {
            ids.truncate(budget);
            self.target_truncations.fetch_add(1, Ordering::Relaxed);
        }
        ids.push(EOS);
        ids
    }

    /// Teacher-forced summed negative log-likelihood of `target` (including
    /// the end-of-sequence token) as a graph node.
    pub fn nll_var(&self, g: &mut Graph, fwd: &mut Forward, input: &FiDInput, target: &str) -> Result<Var> {
        if normalize(target).is_empty() {
            return Err(Error::Empty("target"));
        }
        let labels = self.target_ids(target);
        let mut decoder_in = Vec::with_capacity(labels.len());
        decoder_in.push(BOS);
        decoder_in.extend_from_slice(&labels[..labels.len() - 1]);
        let (memory, _) = self.encode_concat(g, fwd, input)?;
        let logits = self.decode_logits(g, fwd, memory, &decoder_in);
        Ok(g.cross_entropy_sum(logits, &labels))
    }

    /// Inference-mode negative log-likelihood.
    pub fn nll(&self, input: &FiDInput, target: &str) -> Result<f64> {
        let mut g = Graph::new();
        let v = self.nll_var(&mut g, &mut Forward::inference(), input, target)?;
        Ok(g.scalar(v))
    }

    /// Per-step output distributions under teacher forcing (rows sum to 1).
    pub fn step_distributions(&self, input: &FiDInput, target: &str) -> Result<(Array2<f64>, Vec<usize>)> {
        let labels = self.target_ids(target);
        let mut decoder_in = vec![BOS];
        decoder_in.extend_from_slice(&labels[..labels.len() - 1]);
        let mut g = Graph::new();
        let mut fwd = Forward::inference();
        let (memory, _) = self.encode_concat(&mut g, &mut fwd, input)?;
        let logits = self.decode_logits(&mut g, &mut fwd, memory, &decoder_in);
        Ok((softmax_rows(g.value(logits)), labels))
    }

    /// Greedy decoding until end-of-sequence or `max_len` tokens.
    pub fn generate(&self, input: &FiDInput, max_len: usize) -> Result<String> {
        let mut g = Graph::new();
        let mut fwd = Forward::inference();
        let (memory, _) = self.encode_concat(&mut g, &mut fwd, input)?;
        let mut out: Vec<usize> = Vec::new();
        let mut decoder_in = vec![BOS];
        while out.len() < max_len {
            let logits = self.decode_logits(&mut g, &mut fwd, memory, &decoder_in);
            let last = g.value(logits).row(decoder_in.len() - 1).to_owned();
            let mut best = 0;
            for (i, v) in last.iter().enumerate() {
                if *v > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            decoder_in.push(best);
        }
        Ok(self.vocab.decode(&out))
    }
}
