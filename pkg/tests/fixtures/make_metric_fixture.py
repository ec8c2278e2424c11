"""Regenerate metric_fixture.json with the reference scorer (sacrebleu 2.3.1).

Run once by hand; the tests only read the committed JSON.
"""

import json
import random
from pathlib import Path

import sacrebleu
from sacrebleu.tokenizers.tokenizer_13a import Tokenizer13a

WORDS = ("the cat sat on mat dog ran fast slow big small red house tree river "
         "Paris London it's don't e-mail 3.14 1,000 $5 (note) [x] {y} a-b well-known "
         "U.S. end. yes, no; what? wow! \"quoted\" 'single' 50% x/y &amp; <tag> 2-3").split()


def corpus(seed: int, n: int = 20):
    rng = random.Random(seed)
    refs, hyps = [], []
    for _ in range(n):
        ref = [rng.choice(WORDS) for _ in range(rng.randint(4, 14))]
        hyp = list(ref)
        for _ in range(rng.randint(0, 4)):
            op = rng.random()
            i = rng.randrange(len(hyp)) if hyp else 0
            if op < 0.4 and hyp:
                hyp[i] = rng.choice(WORDS)
            elif op < 0.7 and hyp:
                del hyp[i]
            else:
                hyp.insert(i, rng.choice(WORDS))
        refs.append(" ".join(ref))
        hyps.append(" ".join(hyp))
    return refs, hyps


def main():
    refs, hyps = corpus(2024)
    cases = {"corpus20": (refs, hyps),
             "the_cat": (["the cat"], ["the the the the"]),
             "empty_hyp": (["a b c d"], [""]),
             "short": (["one two three four five six"], ["one two"])}
    out = {"scorer": f"sacrebleu {sacrebleu.__version__}", "cases": {}}
    for name, (r, h) in cases.items():
        bm, cm = sacrebleu.BLEU(), sacrebleu.CHRF()
        b, c = bm.corpus_score(h, [r]), cm.corpus_score(h, [r])
        out["cases"][name] = {"refs": r, "hyps": h, "bleu": b.score, "chrf2": c.score,
                              "bleu_signature": str(bm.get_signature()),
                              "chrf_signature": str(cm.get_signature())}
    tok = Tokenizer13a()
    out["tokenize_13a"] = {s: tok(s) for s in set(refs + hyps) | {
        "Hello, world. It's 3.14!", "a-b 1-2 x.y 1,000 end.", "&quot;q&quot; &lt;t&gt; &amp;",
        "tab\there  two  spaces", "<skipped> kept", "(paren) [brack] {brace} ~tilde` @at"}}
    path = Path(__file__).with_name("metric_fixture.json")
    path.write_text(json.dumps(out, indent=1, sort_keys=True, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
