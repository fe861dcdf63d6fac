//! Brute-force reference implementations used to cross-check the library.
//! Inputs are pre-normalized: tokens separated by single spaces.

use rand::seq::SliceRandom;
use rand::Rng;

const WORDS: [&str; 14] = [
    "i", "you", "the", "a", "cat", "dog", "likes", "went", "home", "red", ",", ".", "?", "and",
];

/// A random pre-normalized sentence of `lo..=hi` tokens (possibly empty).
pub fn sentence<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A hypothesis that copies most of `reference`, so n-gram matches occur.
pub fn noisy_copy<R: Rng>(rng: &mut R, reference: &str) -> String {
    let mut out = Vec::new();
    for w in reference.split_whitespace() {
        if rng.gen::<f64>() < 0.15 {
            continue;
        }
        out.push(if rng.gen::<f64>() < 0.2 {
            *WORDS.choose(rng).unwrap()
        } else {
            w
        });
    }
    if rng.gen::<f64>() < 0.3 {
        out.push(*WORDS.choose(rng).unwrap());
    }
    out.join(" ")
}

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn f_measure(overlap: usize, h: usize, r: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let (p, rc) = (overlap as f64 / h as f64, overlap as f64 / r as f64);
    2.0 * p * rc / (p + rc)
}

/// Multiset overlap by repeatedly removing matched reference tokens.
pub fn token_f1(hyp: &str, reference: &str) -> f64 {
    let h = toks(hyp);
    let mut pool = toks(reference);
    let r_len = pool.len();
    let mut overlap = 0;
    for t in &h {
        if let Some(i) = pool.iter().position(|x| x == t) {
            pool.swap_remove(i);
            overlap += 1;
        }
    }
    f_measure(overlap, h.len(), r_len)
}

/// Full (|a|+1)×(|b|+1) dynamic-programming table.
pub fn lcs(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    let (h, r) = (toks(hyp), toks(reference));
    f_measure(lcs(&h, &r), h.len(), r.len())
}

fn ngrams<'a>(t: &[&'a str], n: usize) -> Vec<Vec<&'a str>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

/// (clipped matches, hypothesis n-gram count) for each order 1..=4, each
/// distinct n-gram counted by linear scans.
pub fn clipped_counts(hyp: &str, reference: &str) -> [(usize, usize); 4] {
    let (h, r) = (toks(hyp), toks(reference));
    let mut out = [(0, 0); 4];
    for n in 1..=4 {
        let hg = ngrams(&h, n);
        let rg = ngrams(&r, n);
        let mut seen: Vec<&Vec<&str>> = Vec::new();
        let mut matched = 0;
        for g in &hg {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let in_h = hg.iter().filter(|x| *x == g).count();
            let in_r = rg.iter().filter(|x| *x == g).count();
            matched += in_h.min(in_r);
        }
        out[n - 1] = (matched, hg.len());
    }
    out
}

fn bleu_from(counts: &[(usize, usize); 4], hyp_len: usize, ref_len: usize, smoothing: bool) -> f64 {
    if hyp_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let mut logs = Vec::new();
    for &(m, c) in counts {
        if c == 0 {
            break;
        }
        let p = if m > 0 {
            m as f64 / c as f64
        } else if smoothing {
            0.1 / (c as f64 + 0.1)
        } else {
            return 0.0;
        };
        logs.push(p.ln());
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

/// Sentence BLEU-4 with effective order and the epsilon floor.
pub fn sentence_bleu(hyp: &str, reference: &str, smoothing: bool) -> f64 {
    bleu_from(
        &clipped_counts(hyp, reference),
        toks(hyp).len(),
        toks(reference).len(),
        smoothing,
    )
}

/// Unsmoothed corpus BLEU-4 over pooled counts.
pub fn corpus_bleu(pairs: &[(String, String)]) -> f64 {
    let mut pooled = [(0, 0); 4];
    let (mut hl, mut rl) = (0, 0);
    for (h, r) in pairs {
        for (acc, c) in pooled.iter_mut().zip(clipped_counts(h, r)) {
            acc.0 += c.0;
            acc.1 += c.1;
        }
        hl += toks(h).len();
        rl += toks(r).len();
    }
    bleu_from(&pooled, hl, rl, false)
}

/// A random exact-retrieval instance: rows, query and K.
pub struct RetrievalInstance {
    pub rows: ndarray::Array2<f32>,
    pub query: Vec<f64>,
    pub k: usize,
}

/// Corpus up to `max_n` rows, d up to 64, K up to 6. Every fourth instance
/// uses small integer entries so that exact score ties occur.
pub fn retrieval_instance<R: Rng>(rng: &mut R, i: usize, max_n: usize) -> RetrievalInstance {
    let n = rng.gen_range(6..=max_n);
    let d = rng.gen_range(1..=64);
    let k = rng.gen_range(1..=6);
    let ties = i.is_multiple_of(4);
    let draw = |rng: &mut R| {
        if ties {
            rng.gen_range(-2..=2) as f32
        } else {
            rng.gen_range(-1.0f32..1.0)
        }
    };
    let mut rows = ndarray::Array2::<f32>::zeros((n, d));
    rows.iter_mut().for_each(|x| *x = draw(rng));
    let query = (0..d)
        .map(|_| {
            if ties {
                rng.gen_range(-1..=1) as f64
            } else {
                rng.gen_range(-1.0..1.0)
            }
        })
        .collect();
    RetrievalInstance { rows, query, k }
}

/// Full argsort: every row scored, the whole list sorted by descending
/// score then ascending position, first K kept.
pub fn argsort_top_k(rows: &ndarray::Array2<f32>, query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = rows
        .outer_iter()
        .enumerate()
        .map(|(i, r)| (i, r.iter().zip(query).map(|(a, b)| *a as f64 * b).sum()))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// `n` (hypothesis, reference) pairs; two in three hypotheses are noisy
/// copies of their reference.
pub fn random_pairs(n: usize, seed: u64) -> Vec<(String, String)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let r = sentence(&mut rng, 0, 12);
            let h = if i % 3 == 0 {
                sentence(&mut rng, 0, 12)
            } else {
                noisy_copy(&mut rng, &r)
            };
            (h, r)
        })
        .collect()
}
