"""Regenerates bleu_pairs.json: 50 pre-normalized hypothesis/reference
pairs and their corpus BLEU as computed by sacrebleu."""

import json
import random

import sacrebleu

WORDS = "i you we the a my cat dog red blue like love went home to park today , . ? and is was".split()

rng = random.Random(20240917)
pairs = []
for _ in range(50):
    ref = [rng.choice(WORDS) for _ in range(rng.randint(4, 14))]
    hyp = [w if rng.random() < 0.7 else rng.choice(WORDS) for w in ref]
    if rng.random() < 0.3:
        hyp = hyp[: rng.randint(2, len(hyp))]
    if rng.random() < 0.3:
        hyp += [rng.choice(WORDS) for _ in range(rng.randint(1, 4))]
    pairs.append({"hyp": " ".join(hyp), "ref": " ".join(ref)})

bleu = sacrebleu.corpus_bleu(
    [p["hyp"] for p in pairs],
    [[p["ref"] for p in pairs]],
    tokenize="none",
    smooth_method="none",
    force=True,
)
out = {"sacrebleu_version": sacrebleu.__version__, "corpus_bleu": bleu.score, "pairs": pairs}
with open("bleu_pairs.json", "w") as f:
    json.dump(out, f, indent=1)
    f.write("\n")
print(bleu)
