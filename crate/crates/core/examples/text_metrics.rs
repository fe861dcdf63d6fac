//! Scores a few responses with token F1, BLEU-4, ROUGE-L and the combined
//! guidance metric, then reports corpus-level numbers.

use lapdog::textmetrics::{corpus_eval, guidance_metric, normalize, rouge_l, sentence_bleu, token_f1};

fn main() -> lapdog::Result<()> {
    let pairs = [
        ("I love fixing old cars!", "i love fixing old cars ."),
        ("My dog is named Max.", "my dog max is a good dog ."),
        ("I work at a bakery downtown", "i work in a shop three days a week"),
        ("hello", "goodbye"),
    ];
    println!(
        "{:<32} {:>6} {:>7} {:>7} {:>8}",
        "hypothesis", "F1", "BLEU", "ROUGE-L", "guidance"
    );
    for (h, r) in pairs {
        println!(
            "{:<32} {:>6.3} {:>7.2} {:>7.3} {:>8.3}",
            h,
            token_f1(h, r),
            sentence_bleu(h, r, true),
            rouge_l(h, r),
            guidance_metric(h, r)
        );
    }
    println!("normalized: {:?}", normalize(pairs[0].0));
    let (hyps, refs): (Vec<&str>, Vec<&str>) = pairs.iter().copied().unzip();
    let c = corpus_eval(&hyps, &refs)?;
    println!(
        "corpus: F1 {:.3}, BLEU {:.2}, ROUGE-L {:.3}, mean guidance {:.3}",
        c.f1, c.bleu, c.rouge_l, c.guidance
    );
    Ok(())
}
