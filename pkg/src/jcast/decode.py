"""Joint CTC/attention decoding.

Hypotheses are ranked by ``beta * log p_ctc + (1 - beta) * log p_att``.
The CTC part of a live hypothesis is its prefix score, which bounds the
score of every completion, so the search can stop as soon as no live
hypothesis beats the best finished one. Ties go to the lower token ids.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .ctc import PrefixScorerState, ctc_log_prob, prefix_score_extend_many, prefix_score_init
from .data import BLANK, EOS, N_RESERVED, SOS, Utterance
from .errors import ConfigError, SearchSpaceError
from .model import EncoderStates, Model

logger = logging.getLogger(__name__)

MAX_EXHAUSTIVE = 10 ** 6


@dataclass
class DecodeConfig:
    beam: int = 10
    ctc_weight: float = 0.3
    lang: str | None = None
    maxlen_factor: float = 1.5
    maxlen_bias: int = 10
    max_len: int | None = None
    pre_beam: int | str | None = None  # None: 2 * beam; "full": every token

    def validate(self) -> None:
        if self.beam < 1:
            raise ConfigError(f"beam must be >= 1, got {self.beam}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight must be in [0, 1], got {self.ctc_weight}")
        if self.pre_beam not in (None, "full") and (not isinstance(self.pre_beam, int)
                                                    or self.pre_beam < 1):
            raise ConfigError(f"pre_beam must be a positive int, 'full' or None, got {self.pre_beam!r}")

    def output_limit(self, frames: int) -> int:
        if self.max_len is not None:
            return self.max_len
        return int(self.maxlen_factor * frames + self.maxlen_bias)


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    att_score: float
    ctc_score: float
    score: float
    ended: bool = False
    ctc_state: PrefixScorerState | None = field(default=None, repr=False, compare=False)


def combine(ctc: float, att: float, beta: float) -> float:
    if beta == 0.0:
        return att
    if beta == 1.0:
        return ctc
    return beta * ctc + (1.0 - beta) * att


def _ranked(items, key_score, key_tokens):
    return sorted(items, key=lambda h: (-key_score(h), key_tokens(h)))


def _utterance_ctc(model: Model, enc: EncoderStates, lang: str) -> np.ndarray:
    with T.no_grad():
        lp = model.ctc_logits(enc, lang).data[0]
    return lp[: int(enc.lengths[0])]


def joint_beam_search(model: Model, enc: EncoderStates, cfg: DecodeConfig) -> list[Hypothesis]:
    """Beam search over one encoded utterance; finished hypotheses, best first."""
    cfg.validate()
    lang = cfg.lang or model.languages()[0]
    V = len(model.vocab(lang))
    beta = cfg.ctc_weight
    labels = np.arange(N_RESERVED, V)
    allowed = np.concatenate([labels, [EOS]])
    x = _utterance_ctc(model, enc, lang)
    maxlen = cfg.output_limit(x.shape[0])
    if cfg.pre_beam == "full" or beta == 1.0:
        pre_beam = len(allowed)
    else:
        pre_beam = min(len(allowed), cfg.pre_beam or 2 * cfg.beam)

    root = prefix_score_init(x) if beta > 0 else None
    live = [Hypothesis((), 0.0, 0.0, 0.0, ctc_state=root)]
    ended: list[Hypothesis] = []
    for i in range(maxlen + 1):
        if not live:
            break
        prefixes = np.array([[SOS, *h.tokens] for h in live], dtype=np.int64)
        att = model.decode_step_batch(enc, prefixes, lang)
        cands = []
        for n, h in enumerate(live):
            if i == maxlen:
                toks = np.array([EOS])
            elif pre_beam < len(allowed):
                row = att[n, allowed]
                order = np.lexsort((allowed, -row))[:pre_beam]
                toks = allowed[order]
            else:
                toks = allowed
            if beta > 0:
                states, ctc_cum = prefix_score_extend_many(h.ctc_state, toks, EOS)
            else:
                states, ctc_cum = [None] * len(toks), np.zeros(len(toks))
            for j, tok in enumerate(toks):
                a = h.att_score + float(att[n, tok])
                c = float(ctc_cum[j])
                tok = int(tok)
                done = tok == EOS
                cands.append(Hypothesis(h.tokens if done else h.tokens + (tok,), a, c,
                                        combine(c, a, beta), done, states[j]))
        kept = _ranked(cands, lambda h: h.score, lambda h: (h.tokens, not h.ended))[: cfg.beam]
        live = [h for h in kept if not h.ended]
        ended += [h for h in kept if h.ended]
        if ended and live:
            best_end = max(h.score for h in ended)
            if max(h.score for h in live) < best_end:
                break
    ended = _ranked(ended, lambda h: h.score, lambda h: h.tokens)
    if beta == 0.0:
        for h in ended:
            h.ctc_score = ctc_log_prob(x, h.tokens)
    return ended


def exhaustive_decode(model: Model, enc: EncoderStates, cfg: DecodeConfig, max_len: int,
                      guard: int = MAX_EXHAUSTIVE) -> Hypothesis:
    """Exact maximizer of the joint score over all label sequences up to ``max_len``."""
    cfg.validate()
    lang = cfg.lang or model.languages()[0]
    V = len(model.vocab(lang))
    labels = list(range(N_RESERVED, V))
    if len(labels) ** max_len > guard:
        raise SearchSpaceError(f"{len(labels)}^{max_len} sequences exceed the guard of {guard}")
    x = _utterance_ctc(model, enc, lang)
    best: Hypothesis | None = None
    for length in range(max_len + 1):
        seqs = np.array(list(itertools.product(labels, repeat=length)), dtype=np.int64)
        seqs = seqs.reshape(len(labels) ** length, length)
        ys_in = np.concatenate([np.full((len(seqs), 1), SOS), seqs], axis=1)
        ys_out = np.concatenate([seqs, np.full((len(seqs), 1), EOS)], axis=1)
        att = np.empty(len(seqs))
        for lo in range(0, len(seqs), 512):
            chunk = slice(lo, lo + 512)
            with T.no_grad():
                lp = model.decoder_forward(enc, ys_in[chunk], lang,
                                           memory_index=np.zeros(len(ys_in[chunk]), dtype=np.int64)).data
            att[chunk] = np.take_along_axis(lp, ys_out[chunk][..., None], axis=-1)[..., 0].sum(axis=1)
        for seq, a in zip(seqs, att):
            c = ctc_log_prob(x, seq) if cfg.ctc_weight > 0 else 0.0
            h = Hypothesis(tuple(int(t) for t in seq), float(a), c,
                           combine(c, float(a), cfg.ctc_weight), True)
            if best is None or (-h.score, h.tokens) < (-best.score, best.tokens):
                best = h
    if cfg.ctc_weight == 0.0:
        best.ctc_score = ctc_log_prob(x, best.tokens)
    return best


def ctc_greedy(model: Model, enc: EncoderStates, lang: str) -> list[int]:
    """Best-path CTC decoding: frame-wise argmax, merge repeats, drop blanks."""
    return collapse_path(np.argmax(_utterance_ctc(model, enc, lang), axis=-1))


def collapse_path(path: Sequence[int], blank: int = BLANK) -> list[int]:
    out, prev = [], None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def decode_utterances(model: Model, utts: Sequence[Utterance], cfg: DecodeConfig) -> list[dict]:
    """Decode each utterance; records come back in input order."""
    lang = cfg.lang or model.languages()[0]
    vocab = model.vocab(lang)
    out = []
    for u in utts:
        with T.no_grad():
            enc = model.encode(u.features.astype(np.float64))
        hyps = joint_beam_search(model, enc, cfg)
        best = hyps[0] if hyps else Hypothesis((), float("-inf"), float("-inf"), float("-inf"))
        out.append({"id": u.id, "text": vocab.decode(best.tokens), "tokens": list(best.tokens),
                    "score": best.score, "att_score": best.att_score,
                    "ctc_score": best.ctc_score, "beta": cfg.ctc_weight, "beam": cfg.beam})
    return out
