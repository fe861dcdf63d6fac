//! Dense dual-encoder story retrieval.
//!
//! Queries and stories go through the same [`TextEncoder`]; a text's
//! embedding is the mean of its final hidden states and relevance is the dot
//! product. [`StoryIndex`] holds precomputed story embeddings for exact top-K
//! search, while [`score_candidates_var`] recomputes candidate scores with
//! live parameters so the loss can reach the encoder.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamSet, Var};
use crate::corpus::{Corpus, Story};
use crate::error::{Error, Result};
use crate::nn::{embed_tokens, init_uniform, EncoderLayer, Forward, LayerNorm, Linear};
use crate::optim::{AdamW, AdamWConfig};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Standard deviation of the output projection at initialization.
    pub output_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            heads: 4,
            d_ff: 256,
            layers: 2,
            max_len: 256,
            dropout: 0.1,
            output_scale: 0.125,
        }
    }
}

impl EncoderConfig {
    pub fn tiny() -> Self {
        EncoderConfig {
            d_model: 32,
            heads: 2,
            d_ff: 64,
            layers: 2,
            max_len: 64,
            dropout: 0.0,
            output_scale: 0.25,
        }
    }
}

/// Transformer text encoder with mean pooling.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: EncoderConfig,
    vocab: Arc<Vocab>,
    params: ParamSet,
    embedding: usize,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    projection: Linear,
    version: u64,
}

impl TextEncoder {
    pub fn new(config: EncoderConfig, vocab: Arc<Vocab>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.d_model;
        let embedding = ps.add(
            "embedding",
            init_uniform(&mut rng, vocab.len(), d, (d as f64).powf(-0.5)),
        );
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut ps, &format!("layer{i}"), d, config.heads, config.d_ff, &mut rng))
            .collect();
        let final_ln = LayerNorm::new(&mut ps, "final_ln", d);
        let projection = Linear {
            w: ps.add("projection.w", init_uniform(&mut rng, d, d, config.output_scale)),
            b: None,
        };
        TextEncoder {
            config,
            vocab,
            params: ps,
            embedding,
            layers,
            final_ln,
            projection,
            version: 0,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.config.d_model
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameters; bumps the version stamp.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.version += 1;
        &mut self.params
    }

    /// Incremented on every mutable parameter access.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    fn ids(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = self.vocab.encode(text);
        if ids.is_empty() {
            return Err(Error::Empty("text to embed"));
        }
        ids.truncate(self.config.max_len);
        Ok(ids)
    }

    /// Final hidden states, one row per token.
    pub fn hidden_states_var(&self, g: &mut Graph, fwd: &mut Forward, text: &str) -> Result<Var> {
        let ids = self.ids(text)?;
        let mut x = embed_tokens(g, &self.params, self.embedding, &ids);
        x = fwd.dropout(g, x);
        for layer in &self.layers {
            x = layer.forward(g, &self.params, fwd, x);
        }
        let h = self.final_ln.forward(g, &self.params, x);
        Ok(self.projection.forward(g, &self.params, h))
    }

    /// Mean-pooled embedding as a `1 x d` node.
    pub fn embed_var(&self, g: &mut Graph, fwd: &mut Forward, text: &str) -> Result<Var> {
        let h = self.hidden_states_var(g, fwd, text)?;
        Ok(g.mean_rows(h))
    }

    pub fn hidden_states(&self, text: &str) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let h = self.hidden_states_var(&mut g, &mut Forward::inference(), text)?;
        Ok(g.value(h).clone())
    }

    /// Inference-mode embedding.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let e = self.embed_var(&mut g, &mut Forward::inference(), text)?;
        Ok(g.value(e).iter().copied().collect())
    }
}

/// Settings for [`pretrain_contrastive`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    /// Shortest crop as a fraction of the text length.
    pub min_crop: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch_size: 16,
            learning_rate: 2e-3,
            temperature: 0.8,
            min_crop: 0.3,
        }
    }
}

fn random_crop<R: Rng + ?Sized>(tokens: &[String], min_crop: f64, rng: &mut R) -> String {
    let n = tokens.len();
    let shortest = ((n as f64 * min_crop).ceil() as usize).clamp(1, n);
    let len = rng.gen_range(shortest..=n);
    let start = rng.gen_range(0..=n - len);
    tokens[start..start + len].join(" ")
}

/// Unsupervised contrastive warm-up: two random crops of the same text are
/// positives, crops of the other texts in the batch are negatives. Returns
/// the per-step mean InfoNCE loss.
pub fn pretrain_contrastive<R: Rng + ?Sized>(
    encoder: &mut TextEncoder,
    texts: &[&str],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if texts.len() < 2 {
        return Err(Error::Empty("pretraining texts"));
    }
    let tokenized: Vec<Vec<String>> = texts.iter().map(|t| crate::textmetrics::normalize(t)).collect();
    if tokenized.iter().any(Vec::is_empty) {
        return Err(Error::Empty("pretraining text"));
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            ..Default::default()
        },
        encoder.params(),
    );
    let b = cfg.batch_size.min(texts.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let picks = rand::seq::index::sample(rng, texts.len(), b).into_vec();
        let anchors: Vec<String> = picks
            .iter()
            .map(|&i| random_crop(&tokenized[i], cfg.min_crop, rng))
            .collect();
        let positives: Vec<String> = picks
            .iter()
            .map(|&i| random_crop(&tokenized[i], cfg.min_crop, rng))
            .collect();
        let mut g = Graph::new();
        let mut fwd = Forward::inference();
        let pos = positives
            .iter()
            .map(|t| encoder.embed_var(&mut g, &mut fwd, t))
            .collect::<Result<Vec<_>>>()?;
        let pos = g.concat_rows(&pos);
        let mut total = None;
        for (i, a) in anchors.iter().enumerate() {
            let q = encoder.embed_var(&mut g, &mut fwd, a)?;
            let s = g.matmul_t(q, pos);
            let mut target = vec![0.0; b];
            target[i] = 1.0;
            let l = g.kl_to_softmax(s, &target, cfg.temperature);
            total = Some(match total {
                Some(t) => g.add(t, l),
                None => l,
            });
        }
        let loss = g.scale(total.expect("nonempty batch"), 1.0 / b as f64);
        losses.push(g.scalar(loss));
        let grads = g.backward(loss).dense_for(encoder.params());
        opt.step(encoder.params_mut(), &grads);
    }
    Ok(losses)
}

/// Dot-product scores of `stories` against `query` with live parameters,
/// as a differentiable `1 x K` row.
pub fn score_candidates_var(
    g: &mut Graph,
    fwd: &mut Forward,
    encoder: &TextEncoder,
    query: &str,
    stories: &[&Story],
) -> Result<Var> {
    if stories.is_empty() {
        return Err(Error::Empty("candidate stories"));
    }
    let q = encoder.embed_var(g, fwd, query)?;
    let docs = stories
        .iter()
        .map(|s| encoder.embed_var(g, fwd, s.text()))
        .collect::<Result<Vec<_>>>()?;
    let docs = g.concat_rows(&docs);
    Ok(g.matmul_t(q, docs))
}

pub fn score_candidates(encoder: &TextEncoder, query: &str, stories: &[&Story]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let s = score_candidates_var(&mut g, &mut Forward::inference(), encoder, query, stories)?;
    Ok(g.value(s).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedStory {
    pub position: usize,
    pub id: String,
    /// Index score; `NaN` for augmentation replacements until rescored.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub query: String,
    pub items: Vec<RetrievedStory>,
    pub augmented: bool,
}

impl RetrievalSet {
    pub fn positions(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.position).collect()
    }

    pub fn stories<'c>(&self, corpus: &'c Corpus) -> Vec<&'c Story> {
        self.items
            .iter()
            .map(|i| corpus.get(i.position).expect("retrieved position in corpus"))
            .collect()
    }
}

/// Story embeddings (row i = corpus position i) stored at 32-bit precision,
/// the same precision as the on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct StoryIndex {
    rows: Array2<f32>,
    ids: Vec<String>,
    version: u64,
    fingerprint: String,
}

const INDEX_MAGIC: &[u8; 8] = b"LPDXIDX1";

impl StoryIndex {
    /// Index over precomputed rows; `fingerprint` is the 64-hex-digit
    /// fingerprint of the corpus the rows describe.
    pub fn from_rows(rows: Array2<f32>, ids: Vec<String>, fingerprint: impl Into<String>) -> Result<Self> {
        let fingerprint = fingerprint.into();
        if ids.len() != rows.nrows() {
            return Err(Error::IndexFormat(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.nrows()
            )));
        }
        if fingerprint.len() != 64 || hex::decode(&fingerprint).is_err() {
            return Err(Error::IndexFormat("fingerprint must be 64 hex digits".into()));
        }
        Ok(StoryIndex {
            rows,
            ids,
            version: 0,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, position: usize) -> ArrayView1<'_, f32> {
        self.rows.row(position)
    }

    /// Whether the encoder has moved on since this index was built.
    pub fn is_stale(&self, encoder: &TextEncoder) -> bool {
        self.version < encoder.version()
    }

    pub fn score(&self, position: usize, query: &[f64]) -> f64 {
        self.rows
            .row(position)
            .iter()
            .zip(query)
            .map(|(a, b)| *a as f64 * b)
            .sum()
    }

    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        let fp = corpus.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                index: self.fingerprint.clone(),
                corpus: fp,
            });
        }
        Ok(())
    }

    /// Path of the row → story-id sidecar for an index file.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".ids.json");
        PathBuf::from(s)
    }

    /// Binary layout (little-endian): magic `LPDXIDX1`, u64 N, u64 d,
    /// u64 version, 32 raw fingerprint bytes, then N·d f32 values row-major.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fp = hex::decode(&self.fingerprint).map_err(|e| Error::IndexFormat(e.to_string()))?;
        let mut buf = Vec::with_capacity(64 + self.rows.len() * 4);
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        buf.extend_from_slice(&self.version.to_le_bytes());
        buf.extend_from_slice(&fp);
        for v in self.rows.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        let sidecar = IndexSidecar {
            fingerprint: self.fingerprint.clone(),
            rows: self.ids.clone(),
        };
        let side = Self::sidecar_path(path);
        fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    /// Loads an index and validates it against `corpus`.
    pub fn load(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 64 || &bytes[..8] != INDEX_MAGIC {
            return Err(Error::IndexFormat("bad header".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let (n, d, version) = (u64_at(8) as usize, u64_at(16) as usize, u64_at(24));
        let fingerprint = hex::encode(&bytes[32..64]);
        let body = &bytes[64..];
        if body.len() != n * d * 4 {
            return Err(Error::IndexFormat(format!(
                "expected {} float bytes, found {}",
                n * d * 4,
                body.len()
            )));
        }
        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let rows = Array2::from_shape_vec((n, d), values).map_err(|e| Error::IndexFormat(e.to_string()))?;
        let side = Self::sidecar_path(path);
        let sidecar: IndexSidecar = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
        if sidecar.fingerprint != fingerprint || sidecar.rows.len() != n {
            return Err(Error::IndexFormat("sidecar does not match index header".into()));
        }
        let index = StoryIndex {
            rows,
            ids: sidecar.rows,
            version,
            fingerprint,
        };
        index.check_corpus(corpus)?;
        Ok(index)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexSidecar {
    fingerprint: String,
    rows: Vec<String>,
}

/// Embeds every story with the current encoder parameters.
pub fn build_index(encoder: &TextEncoder, corpus: &Corpus) -> Result<StoryIndex> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let d = encoder.dim();
    let mut rows = Array2::<f32>::zeros((corpus.len(), d));
    for (i, s) in corpus.stories().iter().enumerate() {
        let e = encoder.embed(s.text())?;
        for (j, v) in e.into_iter().enumerate() {
            rows[[i, j]] = v as f32;
        }
    }
    Ok(StoryIndex {
        rows,
        ids: corpus.stories().iter().map(|s| s.id().to_string()).collect(),
        version: encoder.version(),
        fingerprint: corpus.fingerprint(),
    })
}

/// Exact top-K by dot product; ties go to the lower corpus position.
pub fn retrieve(index: &StoryIndex, query_vec: &[f64], k: usize) -> Result<RetrievalSet> {
    let n = index.len();
    if k > n {
        return Err(Error::KTooLarge { k, n });
    }
    if k == 0 {
        return Err(Error::Empty("top-k request"));
    }
    let mut scored: Vec<(usize, f64)> = (0..n).map(|i| (i, index.score(i, query_vec))).collect();
    if k < n {
        scored.select_nth_unstable_by(k - 1, score_order);
        scored.truncate(k);
    }
    scored.sort_by(score_order);
    Ok(RetrievalSet {
        query: String::new(),
        items: scored
            .into_iter()
            .map(|(position, score)| RetrievedStory {
                position,
                id: index.ids[position].clone(),
                score,
            })
            .collect(),
        augmented: false,
    })
}

/// Embeds `query` and retrieves from `index`.
pub fn retrieve_text(encoder: &TextEncoder, index: &StoryIndex, query: &str, k: usize) -> Result<RetrievalSet> {
    let q = encoder.embed(query)?;
    let mut set = retrieve(index, &q, k)?;
    set.query = query.to_string();
    Ok(set)
}

/// Replaces each slot with probability `rho` by a uniformly drawn story that
/// is not already in the set (original or replacement).
pub fn candidate_augment<R: Rng + ?Sized>(
    set: &RetrievalSet,
    corpus: &Corpus,
    rho: f64,
    rng: &mut R,
) -> Result<RetrievalSet> {
    let k = set.items.len();
    if corpus.len() < 2 * k {
        return Err(Error::CorpusTooSmall { n: corpus.len(), k });
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho must lie in [0, 1], got {rho}")));
    }
    let mut taken: HashSet<usize> = set.items.iter().map(|i| i.position).collect();
    let mut items = set.items.clone();
    for item in &mut items {
        if rng.gen::<f64>() < rho {
            let position = loop {
                let p = rng.gen_range(0..corpus.len());
                if !taken.contains(&p) {
                    break p;
                }
            };
            taken.insert(position);
            *item = RetrievedStory {
                position,
                id: corpus.get(position).expect("in range").id().to_string(),
                score: f64::NAN,
            };
        }
    }
    Ok(RetrievalSet {
        query: set.query.clone(),
        items,
        augmented: true,
    })
}

/// Higher score first, then lower position.
fn score_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}
