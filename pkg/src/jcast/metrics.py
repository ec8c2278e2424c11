"""Error rates and sacrebleu-compatible BLEU / chrF scoring.

BLEU follows the ``nrefs:1|case:mixed|eff:no|tok:13a|smooth:exp`` setting
and chrF the ``nrefs:1|case:mixed|eff:yes|nc:6|nw:0|space:no`` setting.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, DataError

BLEU_SIGNATURE = "nrefs:1|case:mixed|eff:no|tok:13a|smooth:exp|version:2.3.1"
CHRF_SIGNATURE = "nrefs:1|case:mixed|eff:yes|nc:6|nw:0|space:no|version:2.3.1"


@dataclass
class ScoreReport:
    metric: str
    value: float
    signature: str
    stats: list[float] = field(default_factory=list)
    sentences: list[float] | None = None

    def to_record(self) -> dict:
        return {"metric": self.metric, "value": self.value, "signature": self.signature,
                "stats": self.stats, "sentences": self.sentences}


def _check_pair(refs: Sequence[str], hyps: Sequence[str]) -> None:
    if len(refs) != len(hyps):
        raise ContractError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise DataError("empty corpus")


# ---------------------------------------------------------------- error rates


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Unit-cost Levenshtein distance between two sequences of hashables."""
    table: dict = {}
    a = np.array([table.setdefault(x, len(table)) for x in ref], dtype=np.int64)
    b = np.array([table.setdefault(x, len(table)) for x in hyp], dtype=np.int64)
    return int(_kernels.edit_distance(a, b))


def _units(text: str, unit: str) -> list[str]:
    if unit == "word":
        return text.split()
    if unit == "char":
        return list(" ".join(text.split()))
    raise ValueError(f"unit must be 'word' or 'char', got {unit!r}")


def error_rate_stats(refs: Sequence[str], hyps: Sequence[str], unit: str = "word") -> tuple[int, int]:
    _check_pair(refs, hyps)
    errors = total = 0
    for r, h in zip(refs, hyps):
        ru = _units(r, unit)
        errors += edit_distance(ru, _units(h, unit))
        total += len(ru)
    return errors, total


def wer(refs: Sequence[str], hyps: Sequence[str], unit: str = "word") -> float:
    """Corpus error rate in percent: total edits over total reference units.

    For ``unit="char"`` whitespace runs collapse to one space, which counts
    as a character.
    """
    errors, total = error_rate_stats(refs, hyps, unit)
    if total == 0:
        raise DataError("error rate undefined: references contain no units")
    return 100.0 * errors / total


def cer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    return wer(refs, hyps, unit="char")


# ---------------------------------------------------------------- BLEU

_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(line: str) -> str:
    """The mteval-v13a tokenizer."""
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = (line.replace("&quot;", '"').replace("&amp;", "&")
                .replace("&lt;", "<").replace("&gt;", ">"))
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return " ".join(line.split())


def _ngrams(words: list[str], max_order: int) -> Counter:
    c: Counter = Counter()
    for n in range(1, max_order + 1):
        for i in range(len(words) - n + 1):
            c[tuple(words[i:i + n])] += 1
    return c


def bleu_stats(ref: str, hyp: str, max_order: int = 4) -> list[int]:
    """[hyp_len, ref_len, correct_1..N, total_1..N] for one sentence pair."""
    h = tokenize_13a(hyp).split()
    r = tokenize_13a(ref).split()
    hc, rc = _ngrams(h, max_order), _ngrams(r, max_order)
    correct = [0] * max_order
    total = [max(len(h) - n, 0) for n in range(max_order)]
    for g, cnt in hc.items():
        correct[len(g) - 1] += min(cnt, rc.get(g, 0))
    return [len(h), len(r), *correct, *total]


def bleu_from_stats(stats: Sequence[int], max_order: int = 4) -> float:
    sys_len, ref_len = stats[0], stats[1]
    correct = stats[2:2 + max_order]
    total = stats[2 + max_order:2 + 2 * max_order]
    if not any(correct):
        return 0.0
    precisions = [0.0] * max_order
    smooth = 1.0
    for n in range(max_order):
        if total[n] == 0:
            break
        if correct[n] == 0:
            smooth *= 2
            precisions[n] = 100.0 / (smooth * total[n])
        else:
            precisions[n] = 100.0 * correct[n] / total[n]
    if sys_len == 0:
        bp = 0.0
    elif sys_len < ref_len:
        bp = math.exp(1.0 - ref_len / sys_len)
    else:
        bp = 1.0
    logs = [math.log(p) if p > 0 else -9999999999.0 for p in precisions]
    return bp * math.exp(sum(logs) / max_order)


def bleu_report(refs: Sequence[str], hyps: Sequence[str]) -> ScoreReport:
    _check_pair(refs, hyps)
    agg = [0] * 10
    for r, h in zip(refs, hyps):
        agg = [a + s for a, s in zip(agg, bleu_stats(r, h))]
    return ScoreReport("bleu", bleu_from_stats(agg), BLEU_SIGNATURE, [float(s) for s in agg])


def bleu(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """Corpus BLEU-4 in [0, 100]."""
    return bleu_report(refs, hyps).value


# ---------------------------------------------------------------- chrF


def _char_ngrams(text: str, n: int) -> Counter:
    s = "".join(text.split())
    return Counter(s[i:i + n] for i in range(len(s) - n + 1))


def chrf_stats(ref: str, hyp: str, order: int = 6) -> list[int]:
    """Per order: hypothesis n-grams, reference n-grams, matches."""
    out = []
    for n in range(1, order + 1):
        hc, rc = _char_ngrams(hyp, n), _char_ngrams(ref, n)
        match = sum(min(c, rc[g]) for g, c in hc.items() if g in rc)
        out += [sum(hc.values()), sum(rc.values()), match]
    return out


def chrf_from_stats(stats: Sequence[int], order: int = 6, beta: float = 2.0) -> float:
    factor = beta ** 2
    avg_p = avg_r = 0.0
    eff = 0
    for i in range(order):
        n_hyp, n_ref, n_match = stats[3 * i:3 * i + 3]
        if n_hyp > 0 and n_ref > 0:
            avg_p += n_match / n_hyp
            avg_r += n_match / n_ref
            eff += 1
    if eff == 0:
        return 0.0
    avg_p /= eff
    avg_r /= eff
    if avg_p + avg_r == 0:
        return 0.0
    return 100.0 * (1 + factor) * avg_p * avg_r / (factor * avg_p + avg_r)


def chrf2_report(refs: Sequence[str], hyps: Sequence[str]) -> ScoreReport:
    _check_pair(refs, hyps)
    agg = [0] * 18
    for r, h in zip(refs, hyps):
        agg = [a + s for a, s in zip(agg, chrf_stats(r, h))]
    return ScoreReport("chrf2", chrf_from_stats(agg), CHRF_SIGNATURE, [float(s) for s in agg])


def chrf2(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """Corpus chrF2 in [0, 100]."""
    return chrf2_report(refs, hyps).value


def wer_report(refs: Sequence[str], hyps: Sequence[str], unit: str = "word") -> ScoreReport:
    errors, total = error_rate_stats(refs, hyps, unit)
    if total == 0:
        raise DataError("error rate undefined: references contain no units")
    name = "wer" if unit == "word" else "cer"
    sig = "unit:word" if unit == "word" else "unit:char|space:collapsed"
    sents = []
    for r, h in zip(refs, hyps):
        n = len(_units(r, unit))
        sents.append(100.0 * edit_distance(_units(r, unit), _units(h, unit)) / n if n else float("nan"))
    return ScoreReport(name, 100.0 * errors / total, sig, [float(errors), float(total)], sents)


METRICS = {
    "bleu": bleu_report,
    "chrf2": chrf2_report,
    "wer": lambda r, h: wer_report(r, h, "word"),
    "cer": lambda r, h: wer_report(r, h, "char"),
}
