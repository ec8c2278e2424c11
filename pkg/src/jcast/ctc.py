"""Connectionist temporal classification.

Two routes to the same quantity live here. :func:`ctc_loss_batch` runs the
forward recursion as ordinary tensor ops so gradients come from the
autodiff graph. :func:`ctc_log_prob` and :func:`ctc_forward_backward`
use the compiled alpha/beta kernels and never touch the graph; they serve
evaluation, decoding and the gradient cross-check.

The prefix scorer gives, for a label prefix ``g``, the log-probability
that the collapsed CTC output starts with ``g``. Querying ``eos`` turns it
into the probability that the output equals ``g`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import AlignmentError, ContractError
from .tensor import Tensor

BLANK = 0
NEG_INF = -np.inf


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can carry ``target``: its length plus one blank per repeat."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def check_target(target: Sequence[int], vocab_size: int) -> None:
    for tok in target:
        if not 1 <= tok < vocab_size:
            raise ContractError(f"CTC target id {tok} outside [1, {vocab_size})")


def ctc_loss_batch(log_probs: Tensor, input_lengths: Sequence[int],
                   targets: Sequence[Sequence[int]], blank: int = BLANK) -> Tensor:
    """Per-utterance CTC negative log-likelihood, shape (B,).

    ``log_probs`` is (B, T, V); frames past ``input_lengths[b]`` are ignored.
    Raises :class:`AlignmentError` when some utterance is too short.
    """
    B, Tmax, V = log_probs.shape
    input_lengths = np.asarray(input_lengths, dtype=np.int64)
    if len(targets) != B or input_lengths.shape != (B,):
        raise ContractError(f"batch of {B} needs {B} lengths and targets")
    for b, tgt in enumerate(targets):
        check_target(tgt, V)
        need = min_frames(tgt)
        if need > input_lengths[b]:
            raise AlignmentError(f"utterance {b}: {input_lengths[b]} frames < {need} required")
    Lmax = max((len(t) for t in targets), default=0)
    S = 2 * Lmax + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    skip = np.zeros((B, S), dtype=bool)
    target_len = np.array([len(t) for t in targets], dtype=np.int64)
    for b, tgt in enumerate(targets):
        e, k = _kernels.extend_with_blanks(tgt, blank)
        ext[b, :len(e)] = e
        skip[b, :len(k)] = k

    emit = T.take_last(log_probs, ext[:, None, :])  # (B, T, S)
    start = np.zeros((B, S), dtype=bool)
    start[:, 0] = True
    if S > 1:
        start[:, 1] = target_len > 0
    alpha = T.masked_fill(emit[:, 0, :], ~start, NEG_INF)
    pad = Tensor(np.full((B, 2), NEG_INF, dtype=log_probs.dtype))
    for t in range(1, Tmax):
        padded = T.concat([pad, alpha], axis=1)
        from_prev = padded[:, 1:S + 1]
        from_skip = T.masked_fill(padded[:, 0:S], ~skip, NEG_INF)
        stacked = T.stack([alpha, from_prev, from_skip], axis=-1)
        step = T.add(T.log_sum_exp(stacked, axis=-1), emit[:, t, :])
        active = (t < input_lengths)[:, None]
        alpha = step if active.all() else T.where(active, step, alpha)

    last = 2 * target_len
    ends = np.stack([last, np.maximum(last - 1, 0)], axis=1)
    final = T.take_last(alpha, ends)
    final = T.masked_fill(final, np.stack([np.zeros(B, bool), target_len == 0], axis=1), NEG_INF)
    return T.mul(T.log_sum_exp(final, axis=-1), -1.0)


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int = BLANK) -> Tensor:
    """Scalar CTC loss of one (T, V) log-probability matrix against ``target``."""
    Tn, V = log_probs.shape
    batched = T.reshape(log_probs, (1, Tn, V))
    return T.reshape(ctc_loss_batch(batched, [Tn], [list(target)], blank), ())


def ctc_log_prob(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> float:
    """log P(target | x) via the alpha kernel; -inf when no alignment exists."""
    log_probs = np.ascontiguousarray(log_probs, dtype=np.float64)
    if min_frames(target) > log_probs.shape[0]:
        return NEG_INF
    ext, skip = _kernels.extend_with_blanks(target, blank)
    total, _, _ = _kernels.ctc_alpha_beta(log_probs, ext, skip)
    return float(total)


def ctc_forward_backward(log_probs: np.ndarray, target: Sequence[int],
                         blank: int = BLANK) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. ``log_probs`` from the alpha-beta posteriors.

    Only used to cross-check the autodiff gradient.
    """
    log_probs = np.ascontiguousarray(log_probs, dtype=np.float64)
    if min_frames(target) > log_probs.shape[0]:
        raise AlignmentError(f"{log_probs.shape[0]} frames < {min_frames(target)} required")
    ext, skip = _kernels.extend_with_blanks(target, blank)
    total, alpha, beta = _kernels.ctc_alpha_beta(log_probs, ext, skip)
    post = np.exp(alpha + beta - total)  # (T, S) state occupancy
    grad = np.zeros_like(log_probs)
    for s, k in enumerate(ext):
        grad[:, k] -= post[:, s]
    return -float(total), grad


# ---------------------------------------------------------------- prefix scoring


@dataclass
class PrefixScorerState:
    """Lattice of one hypothesis: ``r[t] = (ends in label, ends in blank)``."""

    log_probs: np.ndarray
    r: np.ndarray
    last: int
    score: float
    length: int = 0
    ended: bool = False


def prefix_score_init(log_probs: np.ndarray, blank: int = BLANK) -> PrefixScorerState:
    x = np.ascontiguousarray(log_probs, dtype=np.float64)
    r = np.full((x.shape[0], 2), NEG_INF)
    r[:, 1] = np.cumsum(x[:, blank])
    return PrefixScorerState(log_probs=x, r=r, last=-1, score=0.0)


def prefix_score_extend_many(state: PrefixScorerState, tokens: Sequence[int], eos: int,
                             blank: int = BLANK) -> tuple[list[PrefixScorerState], np.ndarray]:
    """Extend ``state`` by every token in ``tokens``; returns states and cumulative scores."""
    if state.ended:
        raise ContractError("cannot extend a prefix that already ended with eos")
    tokens = np.asarray(tokens, dtype=np.int64)
    x = state.log_probs
    scores = np.empty(len(tokens))
    states: list[PrefixScorerState | None] = [None] * len(tokens)
    labels = tokens != eos
    if labels.any():
        lab = np.ascontiguousarray(tokens[labels])
        if lab.min() < 1 or lab.max() >= x.shape[1] or (lab == blank).any():
            raise ContractError(f"prefix extension token out of range: {lab}")
        r_new, psi = _kernels.ctc_prefix_extend(x, state.r, state.last, lab, blank, state.length == 0)
        for j, i in enumerate(np.flatnonzero(labels)):
            scores[i] = psi[j]
            states[i] = PrefixScorerState(x, r_new[j], int(lab[j]), float(psi[j]), state.length + 1)
    if (~labels).any():
        done = float(np.logaddexp(state.r[-1, 0], state.r[-1, 1]))
        for i in np.flatnonzero(~labels):
            scores[i] = done
            states[i] = PrefixScorerState(x, state.r, state.last, done, state.length, ended=True)
    return states, scores


def prefix_score_extend(state: PrefixScorerState, token: int, eos: int,
                        blank: int = BLANK) -> tuple[PrefixScorerState, float]:
    """Extend by one token; returns the new state and the incremental log-score."""
    states, scores = prefix_score_extend_many(state, [token], eos, blank)
    return states[0], float(scores[0]) - state.score
