"""Vocabularies, segmentation, manifests and the synthetic task generator."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, IntegrityError

logger = logging.getLogger(__name__)

RESERVED = ("<blank>", "<unk>", "<sos>", "<eos>")
BLANK, UNK, SOS, EOS = 0, 1, 2, 3
N_RESERVED = len(RESERVED)
WORD_BOUNDARY = "▁"
VOCAB_KINDS = ("char", "word", "unigram")


@dataclass
class Vocabulary:
    """Token inventory of one language; ids 0-3 are blank/unk/sos/eos."""

    language: str
    tokens: list[str]
    log_probs: list[float] | None = None
    kind: str = "char"
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.tokens = list(self.tokens)
        if tuple(self.tokens[:N_RESERVED]) != RESERVED:
            raise DataError(f"vocabulary {self.language!r} must start with {RESERVED}")
        if len(self.tokens) <= N_RESERVED:
            raise DataError(f"vocabulary {self.language!r} has no regular tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError(f"vocabulary {self.language!r} has duplicate tokens")
        if self.log_probs is not None:
            self.log_probs = [float(v) for v in self.log_probs]
            if len(self.log_probs) != len(self.tokens):
                raise DataError("log_probs length differs from token count")
        if self.kind not in VOCAB_KINDS:
            raise DataError(f"unknown vocabulary kind {self.kind!r}")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def encode(self, text: str) -> list[int]:
        """Text to token ids; unknown units map to ``<unk>``."""
        if self.kind == "word":
            return [self.id(w) for w in text.split()]
        if self.kind == "char":
            return [self.id(c) for c in text]
        return viterbi_segment(text.replace(" ", WORD_BOUNDARY), self)

    def count_unk(self, text: str) -> int:
        return sum(1 for i in self.encode(text) if i == UNK)

    def decode(self, ids: Iterable[int]) -> str:
        """Token ids to text, dropping reserved tokens other than ``<unk>``."""
        toks = [self.tokens[i] for i in ids if i == UNK or i >= N_RESERVED]
        if self.kind == "word":
            return " ".join(toks)
        text = "".join(toks)
        if self.kind == "unigram":
            text = text.replace(WORD_BOUNDARY, " ").strip()
        return text

    def to_record(self) -> dict:
        return {"language": self.language, "kind": self.kind, "tokens": self.tokens,
                "log_probs": self.log_probs}

    @classmethod
    def from_record(cls, rec: dict) -> "Vocabulary":
        return cls(rec["language"], rec["tokens"], rec.get("log_probs"), rec.get("kind", "char"))

    def save(self, path: str | os.PathLike) -> None:
        """One token per line, optionally followed by a tab and its log-probability."""
        with open(path, "w", encoding="utf-8") as f:
            for i, tok in enumerate(self.tokens):
                if self.log_probs is None:
                    f.write(f"{tok}\n")
                else:
                    f.write(f"{tok}\t{self.log_probs[i]!r}\n")

    @classmethod
    def load(cls, path: str | os.PathLike, language: str, kind: str = "char") -> "Vocabulary":
        tokens, lps = [], []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, lp = line.partition("\t")
                tokens.append(tok)
                lps.append(float(lp) if lp else None)
        has = [v is not None for v in lps]
        if any(has) and not all(has[N_RESERVED:]):
            raise DataError(f"{path}: log-probs given for some tokens only")
        log_probs = [v if v is not None else 0.0 for v in lps] if any(has) else None
        return cls(language, tokens, log_probs, kind)


def build_char_vocab(corpus: Sequence[str], language: str) -> Vocabulary:
    """One token per distinct character, codepoint-sorted after the reserved ids."""
    chars = sorted({c for line in corpus for c in line})
    if not chars:
        raise DataError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(language, list(RESERVED) + chars, kind="char")


def build_word_vocab(corpus: Sequence[str], language: str) -> Vocabulary:
    words = sorted({w for line in corpus for w in line.split()})
    if not words:
        raise DataError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(language, list(RESERVED) + words, kind="word")


def viterbi_segment(text: str, vocab: Vocabulary) -> list[int]:
    """Most probable segmentation of ``text`` under a unigram vocabulary.

    Maximizes the summed token log-probabilities. Ties go to fewer tokens,
    then to the longest leftmost token. Characters that no vocabulary token
    covers become ``<unk>`` with a score below every real token.
    """
    if vocab.log_probs is None:
        raise DataError(f"vocabulary {vocab.language!r} carries no log-probabilities")
    if not text:
        return []
    lp = vocab.log_probs
    regular = lp[N_RESERVED:]
    unk_score = min(regular) - 10.0
    max_len = max(len(t) for t in vocab.tokens[N_RESERVED:])
    n = len(text)
    # best[i]: (score, -n_tokens, first_len) of the best segmentation of text[i:]
    best: list[tuple[float, int, int] | None] = [None] * (n + 1)
    choice = [0] * (n + 1)
    ids = [0] * (n + 1)
    best[n] = (0.0, 0, 0)
    for i in range(n - 1, -1, -1):
        cand = None
        for j in range(min(n, i + max_len), i, -1):
            tok = vocab._index.get(text[i:j])
            if tok is None or tok < N_RESERVED or best[j] is None:
                continue
            rest = best[j]
            key = (lp[tok] + rest[0], rest[1] - 1, j - i)
            if cand is None or key > cand:
                cand, choice[i], ids[i] = key, j, tok
        if cand is None:
            rest = best[i + 1]
            cand, choice[i], ids[i] = (unk_score + rest[0], rest[1] - 1, 1), i + 1, UNK
        best[i] = cand
    out, i = [], 0
    while i < n:
        out.append(ids[i])
        i = choice[i]
    return out


# ---------------------------------------------------------------- utterances and manifests


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    lang_src: str
    lang_tgt: str | None = None
    transcript: str | None = None
    translation: str | None = None

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def write_manifest(path: str | os.PathLike, utts: Sequence[Utterance],
                   feat_dir: str = "feats") -> None:
    """Write features as raw little-endian f32 files plus a JSON-lines manifest."""
    path = Path(path)
    (path.parent / feat_dir).mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for u in utts:
            rel = f"{feat_dir}/{u.id}.f32"
            np.ascontiguousarray(u.features, dtype="<f4").tofile(path.parent / rel)
            rec = {"id": u.id, "feat": rel, "frames": u.frames, "dim": u.dim,
                   "lang_src": u.lang_src, "lang_tgt": u.lang_tgt,
                   "transcript": u.transcript, "translation": u.translation}
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _read_features(base: Path, rec: dict) -> np.ndarray:
    fpath = base / rec["feat"]
    if not fpath.exists():
        raise FileNotFoundError(f"feature file missing: {fpath}")
    frames, dim = int(rec["frames"]), int(rec["dim"])
    expected = frames * dim * 4
    actual = fpath.stat().st_size
    if actual != expected:
        raise IntegrityError(f"{fpath}: {actual} bytes, expected {frames}x{dim}x4 = {expected}")
    return np.fromfile(fpath, dtype="<f4").reshape(frames, dim)


def load_manifest(path: str | os.PathLike, workers: int = 1) -> list[Utterance]:
    """Read a manifest; order follows the file regardless of ``workers``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest missing: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                records.append(rec)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{n}: {e}") from None
    base = path.parent
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            feats = list(pool.map(lambda r: _read_features(base, r), records))
    else:
        feats = [_read_features(base, r) for r in records]
    dims = {x.shape[1] for x in feats}
    if len(dims) > 1:
        raise DataError(f"{path}: mixed feature dims {sorted(dims)}")
    return [Utterance(r["id"], x, r["lang_src"], r.get("lang_tgt"), r.get("transcript"),
                      r.get("translation")) for r, x in zip(records, feats)]


# ---------------------------------------------------------------- synthetic tasks


@dataclass
class SynthTaskSpec:
    """Parameters of a seeded speech-like sequence task.

    Each source token owns a fixed template vector; an utterance repeats
    each token's template for a random number of frames and adds Gaussian
    noise. The translation maps every token through a fixed seeded table
    and then applies ``reorder``.
    """

    seed: int = 0
    lang_src: str = "src"
    lang_tgt: str | None = "tgt"
    src_vocab_size: int = 20
    tgt_vocab_size: int = 20
    num_train: int = 200
    num_dev: int = 50
    num_test: int = 50
    min_len: int = 3
    max_len: int = 8
    r_min: int = 4
    r_max: int = 6
    noise: float = 0.1
    feat_dim: int = 8
    reorder: str = "none"
    mapping_seed: int = 0
    template_seed: int | None = None

    def validate(self) -> None:
        if self.r_min < 1 or self.r_max < self.r_min:
            raise ConfigError(f"frames-per-token range [{self.r_min}, {self.r_max}] invalid")
        if self.src_vocab_size < 1 or (self.lang_tgt and self.tgt_vocab_size < 1):
            raise ConfigError("synthetic vocabularies must be non-empty")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError(f"token-length range [{self.min_len}, {self.max_len}] invalid")
        if self.feat_dim < 1 or self.noise < 0:
            raise ConfigError("feat_dim must be >= 1 and noise >= 0")
        parse_reorder(self.reorder)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTaskSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth fields {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def parse_reorder(rule: str) -> int:
    """Window width of a reorder rule: 1 for none, 2 for reverse-pairs."""
    if rule == "none":
        return 1
    if rule == "reverse-pairs":
        return 2
    if rule.startswith("reverse-windows"):
        try:
            w = int(rule.split(":", 1)[1])
        except (IndexError, ValueError):
            raise ConfigError(f"reorder rule {rule!r}: expected reverse-windows:<w>") from None
        if w < 1:
            raise ConfigError(f"reorder window must be >= 1, got {w}")
        return w
    raise ConfigError(f"unknown reorder rule {rule!r}")


def apply_reorder(seq: Sequence, rule: str) -> list:
    """Reverse consecutive windows; a short tail window is reversed too."""
    w = parse_reorder(rule)
    seq = list(seq)
    return [x for i in range(0, len(seq), w) for x in reversed(seq[i:i + w])]


def synthetic_vocab(language: str, size: int) -> Vocabulary:
    return Vocabulary(language, list(RESERVED) + [f"{language}{i:02d}" for i in range(size)],
                      kind="word")


def token_mapping(spec: SynthTaskSpec) -> np.ndarray:
    """Source token index -> target token index (indices exclude reserved ids)."""
    rng = np.random.default_rng([spec.mapping_seed, 7919])
    if spec.tgt_vocab_size >= spec.src_vocab_size:
        return rng.permutation(spec.tgt_vocab_size)[:spec.src_vocab_size]
    return rng.integers(0, spec.tgt_vocab_size, size=spec.src_vocab_size)


def token_templates(spec: SynthTaskSpec) -> np.ndarray:
    seed = spec.seed if spec.template_seed is None else spec.template_seed
    return np.random.default_rng([seed, 104729]).standard_normal((spec.src_vocab_size, spec.feat_dim))


@dataclass
class SynthCorpus:
    spec: SynthTaskSpec
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    vocabs: dict[str, Vocabulary]

    def splits(self) -> dict[str, list[Utterance]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}

    def write(self, outdir: str | os.PathLike) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        for name, utts in self.splits().items():
            write_manifest(outdir / f"{name}.jsonl", utts)
        for lang, v in self.vocabs.items():
            v.save(outdir / f"vocab.{lang}.txt")
        meta = {"spec": self.spec.to_dict(),
                "vocabs": {lang: {"file": f"vocab.{lang}.txt", "kind": v.kind}
                           for lang, v in self.vocabs.items()}}
        (outdir / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_corpus(corpus_dir: str | os.PathLike) -> SynthCorpus:
    """Load a corpus directory written by :meth:`SynthCorpus.write`."""
    corpus_dir = Path(corpus_dir)
    meta_path = corpus_dir / "corpus.json"
    if not meta_path.exists():
        raise DataError(f"{corpus_dir} is not a corpus directory (no corpus.json)")
    meta = json.loads(meta_path.read_text())
    vocabs = {lang: Vocabulary.load(corpus_dir / v["file"], lang, v["kind"])
              for lang, v in meta["vocabs"].items()}
    splits = {name: load_manifest(corpus_dir / f"{name}.jsonl") for name in ("train", "dev", "test")}
    return SynthCorpus(SynthTaskSpec.from_dict(meta["spec"]), splits["train"], splits["dev"],
                       splits["test"], vocabs)


def generate_synthetic(spec: SynthTaskSpec) -> SynthCorpus:
    """Deterministically generate train/dev/test utterances for ``spec``."""
    spec.validate()
    templates = token_templates(spec)
    src_vocab = synthetic_vocab(spec.lang_src, spec.src_vocab_size)
    vocabs = {spec.lang_src: src_vocab}
    mapping = None
    if spec.lang_tgt:
        vocabs[spec.lang_tgt] = synthetic_vocab(spec.lang_tgt, spec.tgt_vocab_size)
        mapping = token_mapping(spec)
    splits = []
    for k, (name, count) in enumerate((("train", spec.num_train), ("dev", spec.num_dev),
                                       ("test", spec.num_test))):
        rng = np.random.default_rng([spec.seed, k])
        utts = []
        for i in range(count):
            n = int(rng.integers(spec.min_len, spec.max_len + 1))
            toks = rng.integers(0, spec.src_vocab_size, size=n)
            reps = rng.integers(spec.r_min, spec.r_max + 1, size=n)
            feats = np.repeat(templates[toks], reps, axis=0)
            if spec.noise > 0:
                feats = feats + spec.noise * rng.standard_normal(feats.shape)
            transcript = " ".join(f"{spec.lang_src}{t:02d}" for t in toks)
            translation = None
            if mapping is not None:
                mapped = apply_reorder(mapping[toks], spec.reorder)
                translation = " ".join(f"{spec.lang_tgt}{t:02d}" for t in mapped)
            utts.append(Utterance(f"{spec.lang_src}-{name}-{i:05d}", feats.astype(np.float32),
                                  spec.lang_src, spec.lang_tgt, transcript, translation))
        splits.append(utts)
    return SynthCorpus(spec, splits[0], splits[1], splits[2], vocabs)
