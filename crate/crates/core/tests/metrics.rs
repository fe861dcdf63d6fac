//! Metrics against brute-force oracles and a frozen sacrebleu value.

mod common;

use common::oracles;
use lapdog::textmetrics::{corpus_bleu, corpus_eval, guidance_metric, rouge_l, sentence_bleu, token_f1};
use proptest::prelude::*;

const TOL: f64 = 1e-9;

#[derive(serde::Deserialize)]
struct BleuFixture {
    corpus_bleu: f64,
    pairs: Vec<Pair>,
}

#[derive(serde::Deserialize)]
struct Pair {
    hyp: String,
    #[serde(rename = "ref")]
    reference: String,
}

fn bleu_fixture() -> BleuFixture {
    serde_json::from_str(include_str!("fixtures/bleu_pairs.json")).unwrap()
}

#[test]
fn sentence_metrics_match_oracles_on_random_pairs() {
    for (h, r) in oracles::random_pairs(500, 1) {
        assert!(
            (token_f1(&h, &r) - oracles::token_f1(&h, &r)).abs() <= TOL,
            "f1 `{h}` / `{r}`"
        );
        assert!(
            (rouge_l(&h, &r) - oracles::rouge_l(&h, &r)).abs() <= TOL,
            "rouge `{h}` / `{r}`"
        );
        for smoothing in [false, true] {
            let (a, b) = (
                sentence_bleu(&h, &r, smoothing),
                oracles::sentence_bleu(&h, &r, smoothing),
            );
            assert!((a - b).abs() <= TOL, "bleu({smoothing}) `{h}` / `{r}`: {a} vs {b}");
        }
    }
}

#[test]
fn corpus_bleu_matches_frozen_sacrebleu() {
    let f = bleu_fixture();
    let hyps: Vec<&str> = f.pairs.iter().map(|p| p.hyp.as_str()).collect();
    let refs: Vec<&str> = f.pairs.iter().map(|p| p.reference.as_str()).collect();
    let ours = corpus_bleu(&hyps, &refs).unwrap();
    assert!(
        (ours - f.corpus_bleu).abs() <= 1e-6,
        "{ours} vs sacrebleu {}",
        f.corpus_bleu
    );
    let pairs: Vec<(String, String)> = f.pairs.iter().map(|p| (p.hyp.clone(), p.reference.clone())).collect();
    assert!((ours - oracles::corpus_bleu(&pairs)).abs() <= 1e-9);
}

#[test]
fn corpus_eval_guidance_is_mean_of_sentence_guidance() {
    let pairs = oracles::random_pairs(40, 2);
    let hyps: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
    let refs: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
    let b = corpus_eval(&hyps, &refs).unwrap();
    let mean = pairs.iter().map(|(h, r)| guidance_metric(h, r)).sum::<f64>() / pairs.len() as f64;
    assert!((b.guidance - mean).abs() < 1e-12);
}

#[test]
fn normalization_is_applied_before_scoring() {
    assert_eq!(token_f1("I like CATS!", "i like cats !"), 1.0);
    assert_eq!(rouge_l("Hello,world", "hello , world"), 1.0);
}

fn sentence_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", ".", ","]), 0..10).prop_map(|v| v.join(" "))
}

proptest! {
    #[test]
    fn metrics_are_bounded(h in sentence_strategy(), r in sentence_strategy()) {
        for v in [token_f1(&h, &r), rouge_l(&h, &r)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let b = sentence_bleu(&h, &r, true);
        prop_assert!((0.0..=100.0).contains(&b));
        let g = guidance_metric(&h, &r);
        prop_assert!((0.0..=3.0 + 1e-12).contains(&g));
    }

    #[test]
    fn f1_and_rouge_are_symmetric(h in sentence_strategy(), r in sentence_strategy()) {
        prop_assert!((token_f1(&h, &r) - token_f1(&r, &h)).abs() < 1e-12);
        prop_assert!((rouge_l(&h, &r) - rouge_l(&r, &h)).abs() < 1e-12);
    }

    #[test]
    fn identical_nonempty_text_is_perfect(r in sentence_strategy()) {
        prop_assume!(!r.is_empty());
        prop_assert!((guidance_metric(&r, &r) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_never_exceeds_f1(h in sentence_strategy(), r in sentence_strategy()) {
        prop_assert!(rouge_l(&h, &r) <= token_f1(&h, &r) + 1e-12);
    }
}
