"""Transformer encoder-decoder with per-language output heads.

The encoder body (conv subsampling + self-attention stack) and the decoder
body (masked self-attention, cross-attention, feed-forward) are shared by
all languages. Each registered language owns three heads: the CTC
projection on top of the encoder, the decoder input embedding, and the
decoder output projection.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import EOS, SOS, Vocabulary
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

NEG_INF = -np.inf


@dataclass
class ModelConfig:
    input_dim: int = 8
    d_model: int = 64
    d_ff: int = 256
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    conv_channels: int = 64
    conv_kernel: int = 3
    conv_stride: int = 2
    conv_blocks: int = 1
    dropout_ff: float = 0.1
    dropout_att: float = 0.0
    label_smoothing: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        dims = ("input_dim", "d_model", "d_ff", "heads", "enc_layers", "dec_layers",
                "conv_channels", "conv_kernel", "conv_stride", "conv_blocks")
        for name in dims:
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        for name in ("dropout_ff", "dropout_att", "label_smoothing"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"model.{name} must be in [0, 1)")

    @classmethod
    def preset(cls, name: str = "desk", **overrides) -> "ModelConfig":
        if name == "desk":
            base = cls()
        elif name == "full":
            base = cls(input_dim=83, d_model=256, d_ff=2048, heads=4, enc_layers=12,
                       dec_layers=6, conv_channels=256)
        else:
            raise ConfigError(f"unknown model preset {name!r}")
        unknown = set(overrides) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model fields {sorted(unknown)}")
        cfg = replace(base, **overrides)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def subsampled_length(self, frames: int) -> int:
        for _ in range(self.conv_blocks):
            frames = (frames - self.conv_kernel) // self.conv_stride + 1
        return frames

    def min_input_frames(self) -> int:
        n = 1
        for _ in range(self.conv_blocks):
            n = (n - 1) * self.conv_stride + self.conv_kernel
        return n

    def subsampled_dim(self) -> int:
        f = self.input_dim
        for _ in range(self.conv_blocks):
            f = (f + 2 - self.conv_kernel) // self.conv_stride + 1
        return f


@dataclass
class EncoderStates:
    """Encoder output (B, T', d_model) with valid lengths per utterance."""

    states: Tensor
    lengths: np.ndarray
    frames: np.ndarray

    def utterance(self, b: int) -> "EncoderStates":
        n = int(self.lengths[b])
        return EncoderStates(T.getitem(self.states, (slice(b, b + 1), slice(0, n))),
                             self.lengths[b:b + 1].copy(), self.frames[b:b + 1].copy())


def sinusoidal_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    return pe


def _name_seed(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def head_names(lang: str) -> list[str]:
    p = f"heads.{lang}"
    return [f"{p}.ctc.w", f"{p}.ctc.b", f"{p}.embed", f"{p}.out.w", f"{p}.out.b"]


class Model:
    """Parameters plus forward passes; parameters live in ``self.params``."""

    def __init__(self, config: ModelConfig, vocabs: Iterable[Vocabulary] = ()):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.vocabs: dict[str, Vocabulary] = {}
        self.frozen: set[str] = set()
        self._kinds: dict[str, str] = {}
        self._drop_key: tuple | None = None
        self._drop_count = 0
        self._build_body()
        for v in vocabs:
            self.add_language(v)

    # ------------------------------------------------------------ parameters

    def init_param(self, name: str, shape: tuple, kind: str) -> np.ndarray:
        """Seeded initial value of parameter ``name``; depends only on seed and name."""
        rng = _name_seed(self.config.seed, name)
        if kind == "zeros":
            return np.zeros(shape)
        if kind == "ones":
            return np.ones(shape)
        if kind == "embed":
            return rng.normal(0.0, self.config.d_model ** -0.5, size=shape)
        if kind == "xavier":
            if len(shape) == 4:
                rf = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            else:
                fan_in, fan_out = shape
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape)
        raise ValueError(kind)

    def _add(self, name: str, shape: tuple, kind: str) -> None:
        self.params[name] = Tensor(self.init_param(name, shape, kind), requires_grad=True, name=name)
        self._kinds[name] = kind

    def _add_linear(self, name: str, n_in: int, n_out: int) -> None:
        self._add(f"{name}.w", (n_in, n_out), "xavier")
        self._add(f"{name}.b", (n_out,), "zeros")

    def _add_ln(self, name: str) -> None:
        self._add(f"{name}.g", (self.config.d_model,), "ones")
        self._add(f"{name}.b", (self.config.d_model,), "zeros")

    def _add_attention(self, name: str) -> None:
        d = self.config.d_model
        for proj in ("q", "k", "v", "o"):
            self._add_linear(f"{name}.{proj}", d, d)

    def _add_ff(self, name: str) -> None:
        self._add_linear(f"{name}.w1", self.config.d_model, self.config.d_ff)
        self._add_linear(f"{name}.w2", self.config.d_ff, self.config.d_model)

    def _build_body(self) -> None:
        c = self.config
        cin = 1
        for i in range(c.conv_blocks):
            self._add(f"enc.conv{i}.w", (c.conv_channels, cin, c.conv_kernel, c.conv_kernel), "xavier")
            self._add(f"enc.conv{i}.b", (c.conv_channels,), "zeros")
            cin = c.conv_channels
        self._add_linear("enc.proj", c.conv_channels * c.subsampled_dim(), c.d_model)
        for i in range(c.enc_layers):
            p = f"enc.layer{i}"
            self._add_ln(f"{p}.ln1")
            self._add_attention(f"{p}.att")
            self._add_ln(f"{p}.ln2")
            self._add_ff(f"{p}.ff")
        self._add_ln("enc.ln")
        for i in range(c.dec_layers):
            p = f"dec.layer{i}"
            self._add_ln(f"{p}.ln1")
            self._add_attention(f"{p}.self_att")
            self._add_ln(f"{p}.ln2")
            self._add_attention(f"{p}.src_att")
            self._add_ln(f"{p}.ln3")
            self._add_ff(f"{p}.ff")
        self._add_ln("dec.ln")

    def add_language(self, vocab: Vocabulary) -> None:
        """Register a language and create its CTC, embedding and output heads."""
        lang, V, d = vocab.language, len(vocab), self.config.d_model
        if lang in self.vocabs:
            raise ConfigError(f"language {lang!r} already registered")
        self.vocabs[lang] = vocab
        p = f"heads.{lang}"
        self._add_linear(f"{p}.ctc", d, V)
        self._add(f"{p}.embed", (V, d), "embed")
        self._add_linear(f"{p}.out", d, V)

    def reset_params(self, names: Iterable[str]) -> None:
        """Restore ``names`` to their seeded initial values."""
        for name in names:
            t = self.params[name]
            t.data = self.init_param(name, t.shape, self._kinds[name])

    def languages(self) -> list[str]:
        return list(self.vocabs)

    def vocab(self, lang: str) -> Vocabulary:
        try:
            return self.vocabs[lang]
        except KeyError:
            raise KeyError(f"language {lang!r} not registered; have {sorted(self.vocabs)}") from None

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    # ------------------------------------------------------------ dropout

    @contextlib.contextmanager
    def train_mode(self, seed: int, step: int):
        """Enable dropout keyed by (seed, step); masks are replayable."""
        prev = self._drop_key, self._drop_count
        self._drop_key, self._drop_count = (int(seed), int(step)), 0
        try:
            yield
        finally:
            self._drop_key, self._drop_count = prev

    def _dropout(self, x: Tensor, p: float) -> Tensor:
        if self._drop_key is None or p <= 0.0:
            return x
        self._drop_count += 1
        return T.dropout(x, p, (*self._drop_key, self._drop_count))

    # ------------------------------------------------------------ blocks

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return T.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attention(self, name: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray) -> Tensor:
        """Multi-head attention; ``mask`` broadcasts to (B, heads, Tq, Tk), true = visible."""
        B, Tq, d = q_in.shape
        Tk = kv_in.shape[1]
        H = self.config.heads
        dk = d // H
        q = T.transpose(T.reshape(self._linear(q_in, f"{name}.q"), (B, Tq, H, dk)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self._linear(kv_in, f"{name}.k"), (B, Tk, H, dk)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(self._linear(kv_in, f"{name}.v"), (B, Tk, H, dk)), (0, 2, 1, 3))
        scores = T.mul(T.matmul(q, k), 1.0 / math.sqrt(dk))
        scores = T.masked_fill(scores, ~mask, NEG_INF)
        att = self._dropout(T.softmax(scores, axis=-1), self.config.dropout_att)
        ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, Tq, d))
        return self._linear(ctx, f"{name}.o")

    def _feed_forward(self, x: Tensor, name: str) -> Tensor:
        h = T.relu(self._linear(x, f"{name}.w1"))
        return self._linear(h, f"{name}.w2")

    # ------------------------------------------------------------ encoder

    def encode(self, features: np.ndarray | Sequence[np.ndarray]) -> EncoderStates:
        """Encode one (T, D) matrix or a list of them (zero-padded into a batch)."""
        c = self.config
        feats = [features] if isinstance(features, np.ndarray) and features.ndim == 2 else list(features)
        frames = np.array([f.shape[0] for f in feats], dtype=np.int64)
        for f in feats:
            if f.ndim != 2 or f.shape[1] != c.input_dim:
                raise ShapeError(f"features of shape {f.shape} do not match input_dim={c.input_dim}")
        need = c.min_input_frames()
        if frames.min() < need:
            raise ShapeError(f"input of {frames.min()} frames is too short; the conv stack "
                             f"needs at least {need}")
        Tmax = int(frames.max())
        x = np.zeros((len(feats), 1, Tmax, c.input_dim))
        for b, f in enumerate(feats):
            x[b, 0, :f.shape[0]] = f
        h = Tensor(x)
        for i in range(c.conv_blocks):
            h = T.relu(T.conv2d(h, self.params[f"enc.conv{i}.w"], self.params[f"enc.conv{i}.b"],
                                stride=(c.conv_stride, c.conv_stride), pad_f=1))
        B, C, Tp, Fp = h.shape
        h = T.reshape(T.transpose(h, (0, 2, 1, 3)), (B, Tp, C * Fp))
        h = self._linear(h, "enc.proj")
        h = T.add(h, sinusoidal_encoding(Tp, c.d_model))
        h = self._dropout(h, c.dropout_ff)
        lengths = np.array([c.subsampled_length(int(n)) for n in frames], dtype=np.int64)
        mask = (np.arange(Tp)[None, :] < lengths[:, None])[:, None, None, :]
        for i in range(c.enc_layers):
            p = f"enc.layer{i}"
            y = self._ln(h, f"{p}.ln1")
            h = T.add(h, self._dropout(self._attention(f"{p}.att", y, y, mask), c.dropout_ff))
            h = T.add(h, self._dropout(self._feed_forward(self._ln(h, f"{p}.ln2"), f"{p}.ff"),
                                       c.dropout_ff))
        h = self._ln(h, "enc.ln")
        return EncoderStates(h, lengths, frames)

    # ------------------------------------------------------------ heads

    def ctc_logits(self, enc: EncoderStates, lang: str) -> Tensor:
        """Log-softmax CTC distributions (B, T', |V_lang|) from ``lang``'s CTC head."""
        self.vocab(lang)
        return T.log_softmax(self._linear(enc.states, f"heads.{lang}.ctc"), axis=-1)

    def decoder_forward(self, enc: EncoderStates, ys_in: np.ndarray, lang: str,
                        ys_lengths: np.ndarray | None = None,
                        memory_index: np.ndarray | None = None) -> Tensor:
        """Teacher-forced decoder log-probabilities (N, L, |V_lang|).

        ``ys_in`` holds sos-prefixed input ids (N, L). ``memory_index`` picks
        the encoder row for each decoder row; by default row ``n`` uses
        utterance ``n``.
        """
        c = self.config
        V = len(self.vocab(lang))
        ys_in = np.asarray(ys_in, dtype=np.int64)
        if ys_in.ndim != 2:
            raise ShapeError(f"ys_in must be (N, L), got {ys_in.shape}")
        if ys_in.size and (ys_in.min() < 0 or ys_in.max() >= V):
            raise ShapeError(f"decoder input ids outside [0, {V}) for language {lang!r}")
        N, L = ys_in.shape
        if ys_lengths is None:
            ys_lengths = np.full(N, L, dtype=np.int64)
        mem, mem_len = enc.states, enc.lengths
        if memory_index is not None:
            memory_index = np.asarray(memory_index, dtype=np.int64)
            mem = T.getitem(mem, memory_index)
            mem_len = mem_len[memory_index]
        elif mem.shape[0] != N:
            raise ShapeError(f"{N} decoder rows but {mem.shape[0]} encoder rows")
        Tk = mem.shape[1]
        src_mask = (np.arange(Tk)[None, :] < mem_len[:, None])[:, None, None, :]
        causal = np.tril(np.ones((L, L), dtype=bool))
        self_mask = causal[None, None] & (np.arange(L)[None, :] < ys_lengths[:, None])[:, None, None, :]

        h = T.mul(T.embedding_lookup(self.params[f"heads.{lang}.embed"], ys_in), math.sqrt(c.d_model))
        h = T.add(h, sinusoidal_encoding(L, c.d_model))
        h = self._dropout(h, c.dropout_ff)
        for i in range(c.dec_layers):
            p = f"dec.layer{i}"
            y = self._ln(h, f"{p}.ln1")
            h = T.add(h, self._dropout(self._attention(f"{p}.self_att", y, y, self_mask), c.dropout_ff))
            y = self._ln(h, f"{p}.ln2")
            h = T.add(h, self._dropout(self._attention(f"{p}.src_att", y, mem, src_mask), c.dropout_ff))
            h = T.add(h, self._dropout(self._feed_forward(self._ln(h, f"{p}.ln3"), f"{p}.ff"),
                                       c.dropout_ff))
        h = self._ln(h, "dec.ln")
        return T.log_softmax(self._linear(h, f"heads.{lang}.out"), axis=-1)

    def decode_step(self, enc: EncoderStates, prefix: Sequence[int], lang: str) -> np.ndarray:
        """Next-token log-probabilities after ``prefix`` (which starts with sos)."""
        prefix = list(prefix)
        if not prefix or prefix[0] != SOS:
            raise ContractError("decoder prefix must start with <sos>")
        with T.no_grad():
            out = self.decoder_forward(enc, np.array([prefix]), lang,
                                       memory_index=np.zeros(1, dtype=np.int64))
        return out.data[0, -1]

    def decode_step_batch(self, enc: EncoderStates, prefixes: np.ndarray, lang: str) -> np.ndarray:
        """:meth:`decode_step` for N equal-length prefixes of utterance 0."""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        with T.no_grad():
            out = self.decoder_forward(enc, prefixes, lang,
                                       memory_index=np.zeros(len(prefixes), dtype=np.int64))
        return out.data[:, -1]

    def sequence_log_prob(self, enc: EncoderStates, tokens: Sequence[int], lang: str,
                          with_eos: bool = True) -> float:
        """Teacher-forced log p_att(tokens [+ eos] | x) for utterance 0."""
        tokens = list(tokens)
        ys_in = [SOS] + tokens
        ys_out = tokens + ([EOS] if with_eos else [])
        if not with_eos:
            ys_in = ys_in[:-1]
        if not ys_out:
            return 0.0
        with T.no_grad():
            lp = self.decoder_forward(enc, np.array([ys_in]), lang,
                                      memory_index=np.zeros(1, dtype=np.int64)).data[0]
        return float(np.sum(lp[np.arange(len(ys_out)), ys_out]))
