"""Joint CTC/attention objectives, optimization and transfer initialization."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, OptimizerState
from .ctc import ctc_loss_batch, min_frames
from .data import EOS, SOS, Utterance, Vocabulary
from .errors import ConfigError, ContractError, DataError, InitializationError
from .model import Model, ModelConfig, head_names
from .tensor import Tensor

logger = logging.getLogger(__name__)

CTC_SIDES = ("transcript", "translation")


@dataclass
class TrainConfig:
    mode: str = "asr"
    ctc_weight: float = 0.3
    ctc_target_side: str = "translation"
    epochs: int = 20
    warmup_steps: int = 400
    peak_lr: float = 5e-3
    batch_size: int = 16
    seed: int = 0
    freeze_non_target: bool = False
    grad_clip: float | None = 5.0
    skip_infeasible: bool = True
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9

    def validate(self) -> None:
        if self.mode not in ("asr", "st"):
            raise ConfigError(f"train.mode must be 'asr' or 'st', got {self.mode!r}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"train.ctc_weight must be in [0, 1], got {self.ctc_weight}")
        if self.ctc_target_side not in CTC_SIDES:
            raise ConfigError(f"train.ctc_target_side must be one of {CTC_SIDES}")
        if self.warmup_steps < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.warmup_steps and batch_size must be >= 1, epochs >= 0")
        if not self.peak_lr > 0:
            raise ConfigError(f"train.peak_lr must be > 0, got {self.peak_lr}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train fields {sorted(unknown)}")
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


# ---------------------------------------------------------------- objectives


def joint_loss(ctc, att, weight: float):
    """``weight * ctc + (1 - weight) * att``; a zero-weight term is left out entirely."""
    if weight == 0.0:
        return att
    if weight == 1.0:
        return ctc
    return weight * ctc + (1.0 - weight) * att


def attention_loss(model: Model, enc, targets: Sequence[Sequence[int]], lang: str) -> Tensor:
    """Label-smoothed decoder cross entropy, summed per utterance, averaged over the batch."""
    B = len(targets)
    L = max(len(t) for t in targets) + 1
    ys_in = np.full((B, L), EOS, dtype=np.int64)
    ys_out = np.full((B, L), EOS, dtype=np.int64)
    lengths = np.array([len(t) + 1 for t in targets], dtype=np.int64)
    for b, tgt in enumerate(targets):
        ys_in[b, :len(tgt) + 1] = [SOS, *tgt]
        ys_out[b, :len(tgt) + 1] = [*tgt, EOS]
    lp = model.decoder_forward(enc, ys_in, lang, ys_lengths=lengths)
    ce = T.cross_entropy_with_label_smoothing(lp, ys_out, model.config.label_smoothing)
    ce = T.masked_fill(ce, np.arange(L)[None, :] >= lengths[:, None], 0.0)
    return T.mul(T.sum(ce), 1.0 / B)


def ctc_objective(model: Model, enc, targets: Sequence[Sequence[int]], lang: str) -> Tensor:
    """CTC negative log-likelihood averaged over the batch."""
    nll = ctc_loss_batch(model.ctc_logits(enc, lang), enc.lengths, targets)
    return T.mul(T.sum(nll), 1.0 / len(targets))


def _ids(vocab: Vocabulary, text: str | None, what: str, uid: str) -> list[int]:
    if text is None:
        raise DataError(f"utterance {uid} has no {what}")
    return vocab.encode(text)


def asr_loss(model: Model, batch: Sequence[Utterance], lam: float, lang: str,
             enc=None) -> Tensor:
    """Joint ASR objective on transcripts through ``lang``'s heads."""
    vocab = model.vocab(lang)
    targets = [_ids(vocab, u.transcript, "transcript", u.id) for u in batch]
    if enc is None:
        enc = model.encode([u.features.astype(np.float64) for u in batch])
    ctc = ctc_objective(model, enc, targets, lang) if lam > 0 else None
    att = attention_loss(model, enc, targets, lang) if lam < 1 else None
    return joint_loss(ctc, att, lam)


def st_loss(model: Model, batch: Sequence[Utterance], alpha: float, lang_tgt: str,
            ctc_target_side: str = "translation", lang_src: str | None = None,
            enc=None) -> Tensor:
    """Joint ST objective: attention on translations, CTC on the chosen side.

    With ``ctc_target_side="transcript"`` the CTC targets are source-language
    transcripts scored through the ``lang_src`` CTC head.
    """
    if ctc_target_side not in CTC_SIDES:
        raise ConfigError(f"ctc_target_side must be one of {CTC_SIDES}")
    vocab = model.vocab(lang_tgt)
    targets = [_ids(vocab, u.translation, "translation", u.id) for u in batch]
    if enc is None:
        enc = model.encode([u.features.astype(np.float64) for u in batch])
    ctc = None
    if alpha > 0:
        if ctc_target_side == "translation":
            ctc = ctc_objective(model, enc, targets, lang_tgt)
        else:
            src = lang_src or batch[0].lang_src
            sv = model.vocab(src)
            ctc = ctc_objective(model, enc, [_ids(sv, u.transcript, "transcript", u.id)
                                             for u in batch], src)
    att = attention_loss(model, enc, targets, lang_tgt) if alpha < 1 else None
    return joint_loss(ctc, att, alpha)


def lr_schedule(step: int, warmup: int, peak: float) -> float:
    """Linear warmup to ``peak`` at ``warmup`` steps, then inverse square-root decay."""
    if step < 1:
        raise ContractError(f"lr_schedule step must be >= 1, got {step}")
    return peak * min(step / warmup, math.sqrt(warmup / step))


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam without weight decay; frozen parameters keep zero moments."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.98), eps=1e-9,
                 state: OptimizerState | None = None):
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        if state is not None:
            self.step_count = state.step
            for k in params:
                if k in state.m:
                    self.m[k] = state.m[k].copy()
                    self.v[k] = state.v[k].copy()

    def step(self, params: dict[str, Tensor], lr: float, frozen: set[str] = frozenset()) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in params.items():
            if k in frozen or p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> OptimizerState:
        return OptimizerState(self.step_count, {k: v.copy() for k, v in self.m.items()},
                              {k: v.copy() for k, v in self.v.items()}, self.betas, self.eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: Model
    log: list[dict] = field(default_factory=list)
    optimizer: OptimizerState | None = None
    best_epoch: int = 0
    steps: int = 0

    def checkpoint(self, meta: dict | None = None) -> Checkpoint:
        return Checkpoint(self.model, self.optimizer, dict(meta or {}))

    def log_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def make_batches(utts: Sequence[Utterance], batch_size: int, seed: int, epoch: int,
                 group_key=None) -> list[list[Utterance]]:
    """Sort by frame count, cut into fixed-size batches, shuffle batch order.

    ``group_key`` keeps utterances with different keys in separate batches.
    """
    groups: dict = {}
    for u in utts:
        groups.setdefault(group_key(u) if group_key else None, []).append(u)
    batches = []
    for key in sorted(groups, key=lambda k: (k is None, k)):
        ordered = sorted(groups[key], key=lambda u: (u.frames, u.id))
        batches += [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    perm = np.random.default_rng([seed, epoch, 2718]).permutation(len(batches))
    return [batches[i] for i in perm]


class _Objective:
    """Binds a TrainConfig to per-batch losses and target feasibility checks."""

    def __init__(self, model: Model, cfg: TrainConfig, lang_tgt: str | None):
        self.model, self.cfg, self.lang_tgt = model, cfg, lang_tgt
        self._cache: dict[str, list[int]] = {}

    def out_lang(self, u: Utterance) -> str:
        if self.cfg.mode == "asr":
            return u.lang_src
        return self.lang_tgt or u.lang_tgt

    def ctc_target(self, u: Utterance) -> list[int]:
        key = u.id
        if key not in self._cache:
            if self.cfg.mode == "asr" or self.cfg.ctc_target_side == "transcript":
                self._cache[key] = self.model.vocab(u.lang_src).encode(u.transcript or "")
            else:
                self._cache[key] = self.model.vocab(self.out_lang(u)).encode(u.translation or "")
        return self._cache[key]

    def feasible(self, u: Utterance) -> bool:
        if self.cfg.ctc_weight == 0.0:
            return True
        return min_frames(self.ctc_target(u)) <= self.model.config.subsampled_length(u.frames)

    def loss(self, batch: Sequence[Utterance]) -> Tensor:
        lang = self.out_lang(batch[0])
        if self.cfg.mode == "asr":
            return asr_loss(self.model, batch, self.cfg.ctc_weight, lang)
        return st_loss(self.model, batch, self.cfg.ctc_weight, lang, self.cfg.ctc_target_side,
                       batch[0].lang_src)


def evaluate_loss(model: Model, cfg: TrainConfig, utts: Sequence[Utterance],
                  lang_tgt: str | None = None) -> float:
    """Objective averaged over utterances, without dropout or graph recording."""
    obj = _Objective(model, cfg, lang_tgt)
    keep = [u for u in utts if obj.feasible(u)]
    if not keep:
        return float("nan")
    total = 0.0
    with T.no_grad():
        for batch in make_batches(keep, cfg.batch_size, 0, 0, group_key=obj.out_lang):
            total += obj.loss(batch).item() * len(batch)
    return total / len(keep)


def _check_init_vocabs(model: Model, vocabs: dict[str, Vocabulary]) -> None:
    bad = []
    for lang, v in vocabs.items():
        if lang in model.vocabs and model.vocabs[lang].tokens != v.tokens:
            bad.append(f"{lang}: checkpoint |V|={len(model.vocabs[lang])}, data |V|={len(v)}")
    if bad:
        raise InitializationError("vocabulary mismatch with init checkpoint: " + "; ".join(bad))


def train(cfg: TrainConfig, train_utts: Sequence[Utterance], dev_utts: Sequence[Utterance],
          vocabs: dict[str, Vocabulary], model_config: ModelConfig | None = None,
          init: Model | None = None, lang_tgt: str | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Train from ``init`` (copied, never mutated) or from a fresh model.

    Returns the parameters with the best dev loss plus a per-epoch log of
    ``{epoch, train_loss, dev_loss, lr, skipped_utterances}`` records.
    """
    cfg.validate()
    if init is not None:
        _check_init_vocabs(init, vocabs)
        model = copy.deepcopy(init)
        for lang, v in vocabs.items():
            if lang not in model.vocabs:
                model.add_language(v)
    else:
        model = Model(model_config or ModelConfig(), list(vocabs.values()))
    if cfg.freeze_non_target and cfg.mode == "st":
        target = lang_tgt or train_utts[0].lang_tgt
        model.frozen = {n for lang in model.languages() if lang != target for n in head_names(lang)}
        if cfg.ctc_target_side == "transcript":
            src_langs = {u.lang_src for u in train_utts}
            model.frozen -= {n for lang in src_langs for n in head_names(lang)}
    obj = _Objective(model, cfg, lang_tgt)
    keep, skipped = [], 0
    for u in train_utts:
        if obj.feasible(u):
            keep.append(u)
        elif cfg.skip_infeasible:
            skipped += 1
        else:
            raise DataError(f"utterance {u.id}: too short for its CTC target")
    if skipped:
        logger.warning("skipping %d utterances too short for their CTC targets", skipped)
    if not keep:
        raise DataError("no trainable utterances")
    opt = Adam(model.params, cfg.adam_betas, cfg.adam_eps)
    result = TrainResult(model)
    best_loss, best_state = math.inf, None
    step = 0
    lr = 0.0
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for batch in make_batches(keep, cfg.batch_size, cfg.seed, epoch, group_key=obj.out_lang):
            if max_steps is not None and step >= max_steps:
                break
            step += 1
            lr = lr_schedule(step, cfg.warmup_steps, cfg.peak_lr)
            model.zero_grad()
            with model.train_mode(cfg.seed, step):
                loss = obj.loss(batch)
            T.backward(loss)
            live = [p for k, p in model.params.items() if k not in model.frozen]
            if cfg.grad_clip:
                clip_grad_norm(live, cfg.grad_clip)
            opt.step(model.params, lr, model.frozen)
            total += loss.item() * len(batch)
            count += len(batch)
        dev_loss = evaluate_loss(model, cfg, dev_utts, lang_tgt) if dev_utts else math.nan
        rec = {"epoch": epoch, "train_loss": total / max(count, 1), "dev_loss": dev_loss,
               "lr": lr, "skipped_utterances": skipped}
        result.log.append(rec)
        logger.info("epoch %d train %.4f dev %.4f lr %.2e", epoch, rec["train_loss"], dev_loss, lr)
        score = dev_loss if not math.isnan(dev_loss) else rec["train_loss"]
        if score < best_loss:
            best_loss, result.best_epoch = score, epoch
            best_state = {k: p.data.copy() for k, p in model.params.items()}
        if max_steps is not None and step >= max_steps:
            break
    model.zero_grad()
    if best_state is not None:
        for k, p in model.params.items():
            p.data = best_state[k]
    result.optimizer = opt.state()
    result.steps = step
    return result


# ---------------------------------------------------------------- transfer


def init_st_from_asr(asr: Model | Checkpoint, target_lang: str, retain_ctc: bool = True,
                     freeze_non_target: bool = True) -> Model:
    """Build an ST model whose encoder, decoder and heads come from an ASR model.

    With ``retain_ctc=False`` the target-language CTC projection is reset to
    its seeded initial value. Heads of every other language are copied and,
    with ``freeze_non_target``, excluded from updates.
    """
    src = asr.model if isinstance(asr, Checkpoint) else asr
    if target_lang not in src.vocabs:
        raise InitializationError(f"target language {target_lang!r} not in ASR model "
                                  f"(has {sorted(src.vocabs)})")
    model = copy.deepcopy(src)
    model.zero_grad()
    model.frozen = set()
    if not retain_ctc:
        model.reset_params([f"heads.{target_lang}.ctc.w", f"heads.{target_lang}.ctc.b"])
    if freeze_non_target:
        model.frozen = {n for lang in model.languages() if lang != target_lang
                        for n in head_names(lang)}
    return model
