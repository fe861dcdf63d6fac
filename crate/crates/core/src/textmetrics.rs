//! Word-overlap generation metrics: token F1, BLEU-4 and ROUGE-L.
//!
//! All metrics share [`normalize`] so that the guidance objective and the
//! evaluation report agree on what a "token" is. The empty-input convention
//! is uniform: if either side normalizes to no tokens, the score is 0.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest n-gram order used by BLEU.
pub const BLEU_MAX_ORDER: usize = 4;

/// Additive floor used for zero-match n-gram orders when smoothing is on.
pub const BLEU_SMOOTHING_EPSILON: f64 = 0.1;

/// Lowercases, splits punctuation into standalone tokens and collapses
/// whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn counts<T: AsRef<str>>(tokens: &[T]) -> HashMap<&str, usize> {
    let mut map = HashMap::new();
    for t in tokens {
        *map.entry(t.as_ref()).or_insert(0) += 1;
    }
    map
}

fn harmonic(overlap: usize, hyp_len: usize, ref_len: usize) -> f64 {
    if overlap == 0 || hyp_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / hyp_len as f64;
    let recall = overlap as f64 / ref_len as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Unigram F1 over the multiset overlap of normalized tokens.
pub fn token_f1(hyp: &str, reference: &str) -> f64 {
    let h = normalize(hyp);
    let r = normalize(reference);
    let hc = counts(&h);
    let rc = counts(&r);
    let overlap = hc.iter().map(|(tok, n)| rc.get(tok).map_or(0, |m| (*n).min(*m))).sum();
    harmonic(overlap, h.len(), r.len())
}

/// Length of the longest common subsequence of two token sequences.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (beta = 1) over normalized tokens.
pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    let h = normalize(hyp);
    let r = normalize(reference);
    harmonic(lcs_len(&h, &r), h.len(), r.len())
}

/// Per-order clipped n-gram statistics for one hypothesis/reference pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_ORDER],
    pub totals: [usize; BLEU_MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn from_tokens<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> Self {
        let mut stats = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=BLEU_MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            stats.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            stats.matches[n - 1] = h.iter().map(|(g, c)| r.get(g).map_or(0, |rc| (*c).min(*rc))).sum();
        }
        stats
    }

    fn accumulate(&mut self, other: &BleuStats) {
        for n in 0..BLEU_MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU in [0, 100] from these statistics. Orders the hypothesis is too
    /// short to contain are left out of the geometric mean.
    pub fn score(&self, smoothing: bool) -> f64 {
        if self.hyp_len == 0 || self.ref_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..BLEU_MAX_ORDER {
            let (m, c) = (self.matches[n], self.totals[n]);
            if c == 0 {
                break;
            }
            orders += 1;
            let p = if m > 0 {
                m as f64 / c as f64
            } else if smoothing {
                BLEU_SMOOTHING_EPSILON / (c as f64 + BLEU_SMOOTHING_EPSILON)
            } else {
                return 0.0;
            };
            log_sum += p.ln();
        }
        let brevity = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        (100.0 * brevity * (log_sum / orders as f64).exp()).min(100.0)
    }
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *map.entry(key).or_insert(0) += 1;
        }
    }
    map
}

/// Sentence-level BLEU-4 in [0, 100].
///
/// With `smoothing`, an order with no clipped match contributes
/// `eps / (total + eps)` instead of zeroing the geometric mean.
pub fn sentence_bleu(hyp: &str, reference: &str, smoothing: bool) -> f64 {
    BleuStats::from_tokens(&normalize(hyp), &normalize(reference)).score(smoothing)
}

/// Corpus-level unsmoothed BLEU-4: statistics are pooled over all pairs
/// before precisions and the brevity penalty are taken.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    check_lengths(hyps.len(), refs.len())?;
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        let stats = BleuStats::from_tokens(&normalize(h.as_ref()), &normalize(r.as_ref()));
        total.accumulate(&stats);
    }
    Ok(total.score(false))
}

/// The summed objective that grades retrieval candidates:
/// `token_f1 + smoothed_bleu / 100 + rouge_l`, in [0, 3].
pub fn guidance_metric(hyp: &str, reference: &str) -> f64 {
    token_f1(hyp, reference) + sentence_bleu(hyp, reference, true) / 100.0 + rouge_l(hyp, reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub f1: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub guidance: f64,
}

/// Corpus evaluation: mean per-pair F1, ROUGE-L and guidance; corpus BLEU.
pub fn corpus_eval<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<MetricBundle> {
    check_lengths(hyps.len(), refs.len())?;
    let n = hyps.len() as f64;
    let (mut f1, mut rl, mut guidance) = (0.0, 0.0, 0.0);
    for (h, r) in hyps.iter().zip(refs) {
        f1 += token_f1(h.as_ref(), r.as_ref());
        rl += rouge_l(h.as_ref(), r.as_ref());
        guidance += guidance_metric(h.as_ref(), r.as_ref());
    }
    Ok(MetricBundle {
        f1: f1 / n,
        bleu: corpus_bleu(hyps, refs)?,
        rouge_l: rl / n,
        guidance: guidance / n,
    })
}

fn check_lengths(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::LengthMismatch { hyps, refs });
    }
    if hyps == 0 {
        return Err(Error::Empty("metric corpus"));
    }
    Ok(())
}
