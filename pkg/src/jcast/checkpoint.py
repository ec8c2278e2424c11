"""Bit-exact binary checkpoints.

Layout (all integers little-endian)::

    b"JCAST001"                      magic
    u32  format version
    u64  n, then n bytes of UTF-8 JSON (model config, languages,
         vocabularies, frozen set, optimizer scalars, free-form meta)
    u32  tensor count
    per tensor, sorted by name:
        u16 name length, name (UTF-8)
        u8  dtype code (0 = f32, 1 = f64)
        u8  rank, then rank x u64 dims
        row-major little-endian payload

Model parameters are stored as ``param/<name>``; Adam moments as
``adam.m/<name>`` and ``adam.v/<name>``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .data import Vocabulary
from .errors import IntegrityError
from .model import Model, ModelConfig

MAGIC = b"JCAST001"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_OF = {"f32": 0, "f64": 1}


@dataclass
class OptimizerState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9


@dataclass
class Checkpoint:
    model: Model
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)
    dtype: str = "f64"


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _write_tensor(f: BinaryIO, name: str, arr: np.ndarray, code: int) -> None:
    arr = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code])
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<BB", code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes(order="C"))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IntegrityError(f"checkpoint truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_tensor(f: BinaryIO) -> tuple[str, np.ndarray, int]:
    (nlen,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, nlen).decode("utf-8")
    code, rank = struct.unpack("<BB", _read_exact(f, 2))
    if code not in DTYPE_CODES:
        raise IntegrityError(f"tensor {name!r}: unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    dt = DTYPE_CODES[code]
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt).reshape(dims)
    return name, arr.copy(), code


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    model, opt = ckpt.model, ckpt.optimizer
    code = CODE_OF[ckpt.dtype]
    header = {
        "model": model.config.to_dict(),
        "languages": model.languages(),
        "vocabs": {lang: v.to_record() for lang, v in model.vocabs.items()},
        "frozen": sorted(model.frozen),
        "dtype": ckpt.dtype,
        "optimizer": None if opt is None else {"step": opt.step, "betas": list(opt.betas),
                                               "eps": opt.eps},
        "meta": ckpt.meta,
    }
    tensors = {f"param/{k}": v.data for k, v in model.params.items()}
    if opt is not None:
        tensors.update({f"adam.m/{k}": v for k, v in opt.m.items()})
        tensors.update({f"adam.v/{k}": v for k, v in opt.v.items()})
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        blob = _dumps(header)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(f, name, tensors[name], code)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, 8) != MAGIC:
            raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise IntegrityError(f"{path}: unsupported format version {version}")
        (n,) = struct.unpack("<Q", _read_exact(f, 8))
        header = json.loads(_read_exact(f, n).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            name, arr, _ = _read_tensor(f)
            tensors[name] = arr
        if f.read(1):
            raise IntegrityError(f"{path}: trailing bytes after last tensor")

    vocabs = {lang: Vocabulary.from_record(header["vocabs"][lang]) for lang in header["languages"]}
    model = Model(ModelConfig(**header["model"]), [vocabs[lang] for lang in header["languages"]])
    for name, t in model.params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise IntegrityError(f"{path}: missing tensor {key}")
        arr = tensors[key]
        if arr.shape != t.shape:
            raise IntegrityError(f"{path}: {key} has shape {arr.shape}, model expects {t.shape}")
        t.data = arr.astype(np.float64)
    model.frozen = set(header["frozen"])
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = OptimizerState(
            step=o["step"],
            m={k[len("adam.m/"):]: v.astype(np.float64) for k, v in tensors.items() if k.startswith("adam.m/")},
            v={k[len("adam.v/"):]: v.astype(np.float64) for k, v in tensors.items() if k.startswith("adam.v/")},
            betas=tuple(o["betas"]), eps=o["eps"])
    return Checkpoint(model, opt, header["meta"], header["dtype"])
