"""Experiment runners shared by the CLI and the sweep harness.

Every runner takes a plain JSON-compatible config and an output location,
so a sweep cell can be replayed by hand from its logged ``config.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthCorpus, SynthTaskSpec, Utterance, generate_synthetic, load_corpus, load_manifest
from .decode import DecodeConfig, decode_utterances
from .errors import ConfigError, DataError
from .metrics import METRICS
from .model import ModelConfig
from .train import TrainConfig, init_st_from_asr, train

logger = logging.getLogger(__name__)

INIT_SOURCES = ("random", "mono-asr", "multi-asr")
CTC_CHOICES = ("retain-ctc", "discard-ctc")
SPLITS = ("dev", "test")


def load_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return obj


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _at(path: str, fn, *args):
    try:
        return fn(*args)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None


def model_config_from(d: dict, path: str = "model") -> ModelConfig:
    d = dict(d or {})
    preset = d.pop("preset", "desk")
    return _at(path, lambda: ModelConfig.preset(preset, **d))


def train_config_from(d: dict, mode: str, path: str) -> TrainConfig:
    d = dict(d or {})
    if d.get("mode", mode) != mode:
        raise ConfigError(f"{path}.mode: expected {mode!r}, got {d['mode']!r}")
    d["mode"] = mode
    return _at(path, TrainConfig.from_dict, d)


def decode_config_from(d: dict, path: str = "decode") -> DecodeConfig:
    d = dict(d or {})
    unknown = set(d) - set(DecodeConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"{path}: unknown fields {sorted(unknown)}")
    cfg = DecodeConfig(**d)
    _at(path, cfg.validate)
    return cfg


# ---------------------------------------------------------------- corpora


def materialize_corpus(entry: dict, out_dir: Path, path: str) -> Path:
    """Write a synthetic corpus (or validate an existing one); returns its directory."""
    if "corpus_dir" in entry:
        d = Path(entry["corpus_dir"])
        if not (d / "corpus.json").exists():
            raise ConfigError(f"{path}.corpus_dir: {d} is not a corpus directory")
        return d
    spec = _at(path, SynthTaskSpec.from_dict, entry)
    _at(path, spec.validate)
    done = out_dir / "done.json"
    key = sha256_json(spec.to_dict())
    if done.exists() and json.loads(done.read_text()).get("spec_sha") == key:
        return out_dir
    if out_dir.exists():
        shutil.rmtree(out_dir)
    generate_synthetic(spec).write(out_dir)
    dump_json({"spec_sha": key}, done)
    return out_dir


def cmd_synth(spec: dict, out_dir: Path) -> SynthCorpus:
    s = _at("synth", SynthTaskSpec.from_dict, spec)
    corpus = generate_synthetic(s)
    corpus.write(out_dir)
    return corpus


# ---------------------------------------------------------------- training


def _finish_training(result, ckpt: Path, meta: dict) -> None:
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, result.checkpoint(meta))
    ckpt.with_suffix(".log.jsonl").write_text(result.log_lines())


def run_train_asr(config: dict, ckpt: Path) -> int:
    """Train an ASR model on one or more corpus directories; returns steps taken.

    ``config``: ``{"corpora": [dir, ...], "model": {...}, "train": {...}}``.
    """
    dirs = config.get("corpora")
    if not dirs:
        raise ConfigError("corpora: at least one corpus directory is required")
    mcfg = model_config_from(config.get("model"))
    tcfg = train_config_from(config.get("train"), "asr", "train")
    train_utts: list[Utterance] = []
    dev_utts: list[Utterance] = []
    vocabs = {}
    for d in dirs:
        c = load_corpus(d)
        train_utts += c.train
        dev_utts += c.dev
        lang = c.spec.lang_src
        vocabs[lang] = c.vocabs[lang]
    result = train(tcfg, train_utts, dev_utts, vocabs, mcfg)
    _finish_training(result, ckpt, {"kind": "asr", "config": config})
    return result.steps


def run_train_st(config: dict, ckpt: Path) -> int:
    """Fine-tune (or train from scratch) an ST model; returns steps taken.

    ``config``: ``{"corpus": dir, "init": ckpt | null, "retain_ctc": bool,
    "model": {...}, "train": {...}}``. ``model`` only applies without ``init``.
    """
    if "corpus" not in config:
        raise ConfigError("corpus: required")
    c = load_corpus(config["corpus"])
    lang_tgt = c.spec.lang_tgt
    if not lang_tgt:
        raise DataError(f"{config['corpus']}: corpus has no translation side")
    tcfg = train_config_from(config.get("train"), "st", "train")
    init = None
    if config.get("init"):
        asr = load_checkpoint(config["init"])
        init = init_st_from_asr(asr, lang_tgt, retain_ctc=bool(config.get("retain_ctc", True)),
                                freeze_non_target=tcfg.freeze_non_target)
    result = train(tcfg, c.train, c.dev, c.vocabs, model_config_from(config.get("model")),
                   init=init, lang_tgt=lang_tgt)
    _finish_training(result, ckpt, {"kind": "st", "config": config})
    return result.steps


# ---------------------------------------------------------------- decoding and scoring


def write_jsonl(records: Sequence[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def run_decode(ckpt: Path, manifest: Path, decode: dict, out: Path) -> list[dict]:
    model = load_checkpoint(ckpt).model
    cfg = decode_config_from(decode)
    utts = load_manifest(manifest)
    if cfg.lang is None:
        cfg.lang = utts[0].lang_tgt or utts[0].lang_src if utts else None
    records = decode_utterances(model, utts, cfg)
    write_jsonl(records, out)
    return records


def references(manifest: Path, side: str) -> dict[str, str]:
    if side not in ("transcript", "translation"):
        raise ConfigError(f"reference side must be transcript or translation, got {side!r}")
    refs = {}
    with open(manifest, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                if rec.get(side) is None:
                    raise DataError(f"{manifest}: utterance {rec['id']} has no {side}")
                refs[rec["id"]] = rec[side]
    return refs


def run_score(hyps: Sequence[dict], refs: dict[str, str], metrics: Sequence[str]) -> dict[str, dict]:
    missing = [h["id"] for h in hyps if h["id"] not in refs]
    if missing:
        raise DataError(f"hypotheses without references: {missing[:5]}")
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses for {len(refs)} references")
    r = [refs[h["id"]] for h in hyps]
    h = [x["text"] for x in hyps]
    out = {}
    for m in metrics:
        if m not in METRICS:
            raise ConfigError(f"unknown metric {m!r} (have {sorted(METRICS)})")
        out[m] = METRICS[m](r, h).to_record()
    return out


# ---------------------------------------------------------------- sweep


@dataclass
class ExperimentSpec:
    asr_corpora: list[dict]
    st_corpus: dict
    model: dict = field(default_factory=lambda: {"preset": "desk"})
    asr_train: dict = field(default_factory=dict)
    st_train: dict = field(default_factory=dict)
    init_schemes: list[str] = field(default_factory=lambda: ["random", "mono-asr+retain-ctc"])
    alpha_grid: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.5])
    beta_grid: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.3, 0.5, 0.7, 0.9])
    decode: dict = field(default_factory=lambda: {"beam": 10})
    metrics: list[str] = field(default_factory=lambda: ["bleu", "chrf2"])
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment fields {sorted(unknown)}")
        if "st_corpus" not in d:
            raise ConfigError("st_corpus: required")
        spec = cls(**{"asr_corpora": [], **d})
        spec.validate()
        return spec

    def validate(self) -> None:
        for name in ("alpha_grid", "beta_grid", "init_schemes", "metrics"):
            v = getattr(self, name)
            if not isinstance(v, list) or not v:
                raise ConfigError(f"{name}: must be a non-empty list")
        for name in ("alpha_grid", "beta_grid"):
            for i, x in enumerate(getattr(self, name)):
                if not isinstance(x, (int, float)) or not 0.0 <= x <= 1.0:
                    raise ConfigError(f"{name}[{i}]: {x!r} is not a weight in [0, 1]")
            if len(set(getattr(self, name))) != len(getattr(self, name)):
                raise ConfigError(f"{name}: duplicate values")
        for i, s in enumerate(self.init_schemes):
            parse_scheme(s, f"init_schemes[{i}]")
        for i, m in enumerate(self.metrics):
            if m not in METRICS:
                raise ConfigError(f"metrics[{i}]: unknown metric {m!r}")
        if "bleu" not in self.metrics:
            raise ConfigError("metrics: must include 'bleu' (used for beta selection)")
        if not isinstance(self.st_corpus, dict):
            raise ConfigError("st_corpus: must be an object")
        for i, c in enumerate(self.asr_corpora):
            if not isinstance(c, dict):
                raise ConfigError(f"asr_corpora[{i}]: must be an object")
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed: must be an integer, got {self.seed!r}")
        needs_asr = any(parse_scheme(s)[0] != "random" for s in self.init_schemes)
        if needs_asr and not self.asr_corpora:
            raise ConfigError("asr_corpora: ASR init schemes need at least one ASR corpus")
        model_config_from(self.model)
        train_config_from(self.asr_train, "asr", "asr_train")
        train_config_from({**self.st_train, "ctc_weight": self.alpha_grid[0]}, "st", "st_train")
        decode_config_from(self.decode)

    def resolved(self) -> dict:
        """All defaults filled in, as written to the output directory."""
        d = asdict(self)
        mcfg = model_config_from(self.model)
        d["model"] = {"preset": self.model.get("preset", "desk"),
                      **{**mcfg.to_dict(), "seed": self.model.get("seed", self.seed)}}
        d["asr_train"] = {**train_config_from(self.asr_train, "asr", "asr_train").to_dict(),
                          "seed": self.asr_train.get("seed", self.seed)}
        st = train_config_from({**self.st_train, "ctc_weight": 0.0}, "st", "st_train").to_dict()
        st.pop("ctc_weight")
        st["seed"] = self.st_train.get("seed", self.seed)
        d["st_train"] = st
        dec = asdict(decode_config_from(self.decode))
        dec.pop("ctc_weight")
        d["decode"] = dec
        d["asr_corpora"] = [c if "corpus_dir" in c else SynthTaskSpec.from_dict(c).to_dict()
                            for c in self.asr_corpora]
        st_c = self.st_corpus
        d["st_corpus"] = st_c if "corpus_dir" in st_c else SynthTaskSpec.from_dict(st_c).to_dict()
        return d


def parse_scheme(scheme: str, path: str = "init_scheme") -> tuple[str, bool]:
    """``"random"`` or ``"<mono|multi>-asr+<retain|discard>-ctc"`` -> (source, retain_ctc)."""
    if scheme == "random":
        return "random", False
    src, _, ctc = scheme.partition("+")
    if src not in INIT_SOURCES[1:] or ctc not in CTC_CHOICES:
        raise ConfigError(f"{path}: unknown init scheme {scheme!r}; expected 'random' or "
                          f"'<mono-asr|multi-asr>+<retain-ctc|discard-ctc>'")
    return src, ctc == "retain-ctc"


def fmt_weight(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".") if x else "0"


@dataclass
class Cell:
    name: str
    kind: str  # "asr" or "st"
    config: dict
    deps: list[str] = field(default_factory=list)


def _cell_key(cell: Cell, out: Path) -> str:
    """Hash of the cell config plus the checksums of the checkpoints it reads."""
    dep = {d: json.loads((out / d / "done.json").read_text())["artifacts"] for d in cell.deps}
    return sha256_json({"config": cell.config, "deps": dep})


def cell_is_done(cell: Cell, out: Path) -> bool:
    done = out / cell.name / "done.json"
    if not done.exists():
        return False
    try:
        rec = json.loads(done.read_text())
        if rec["key"] != _cell_key(cell, out):
            return False
        return all((out / cell.name / f).exists() and sha256_file(out / cell.name / f) == h
                   for f, h in rec["artifacts"].items())
    except (json.JSONDecodeError, KeyError, OSError):
        return False


def run_cell(cell: Cell, out: Path) -> int:
    """Run one cell unless its artifacts are intact; returns training steps executed."""
    if cell_is_done(cell, out):
        logger.info("cell %s: up to date", cell.name)
        return 0
    cdir = out / cell.name
    if cdir.exists():
        shutil.rmtree(cdir)
    cdir.mkdir(parents=True)
    dump_json(cell.config, cdir / "config.json")
    logger.info("cell %s: running", cell.name)
    if cell.kind == "asr":
        steps = run_train_asr(cell.config["train_config"], cdir / "model.ckpt")
        artifacts = ["config.json", "model.ckpt", "model.log.jsonl"]
    else:
        steps = run_train_st(cell.config["train_config"], cdir / "model.ckpt")
        artifacts = ["config.json", "model.ckpt", "model.log.jsonl", "scores.json"]
        scores = {}
        for split, manifest in cell.config["eval"].items():
            refs = references(Path(manifest), "translation")
            for beta in cell.config["beta_grid"]:
                fname = f"hyps.{split}.beta{fmt_weight(beta)}.jsonl"
                recs = run_decode(cdir / "model.ckpt", Path(manifest),
                                  {**cell.config["decode"], "ctc_weight": beta}, cdir / fname)
                scores[f"{split}/{fmt_weight(beta)}"] = run_score(recs, refs, cell.config["metrics"])
                artifacts.append(fname)
        dump_json(scores, cdir / "scores.json")
    dump_json({"key": _cell_key(cell, out),
               "artifacts": {f: sha256_file(cdir / f) for f in sorted(artifacts)}},
              cdir / "done.json")
    return steps


def plan_cells(spec: ExperimentSpec, out: Path) -> tuple[list[Cell], list[Cell]]:
    """Materialize corpora and return (ASR cells, ST cells)."""
    res = spec.resolved()
    data = out / "data"
    asr_dirs = [str(materialize_corpus(c, data / f"asr{i}", f"asr_corpora[{i}]"))
                for i, c in enumerate(spec.asr_corpora)]
    st_dir = materialize_corpus(spec.st_corpus, data / "st", "st_corpus")
    lang_tgt = load_corpus(st_dir).spec.lang_tgt
    model = res["model"]
    asr_cells = {}
    for s in spec.init_schemes:
        src, _ = parse_scheme(s)
        if src == "random" or src in asr_cells:
            continue
        if src == "mono-asr":
            dirs = [d for d in asr_dirs if load_corpus(d).spec.lang_src == lang_tgt]
            if not dirs:
                raise ConfigError(f"init_schemes: mono-asr needs an ASR corpus in the target "
                                  f"language {lang_tgt!r}")
        else:
            dirs = asr_dirs
        asr_cells[src] = Cell(f"asr-{src.split('-')[0]}", "asr",
                              {"train_config": {"corpora": dirs, "model": model,
                                                "train": res["asr_train"]}})
    st_cells = []
    for s in spec.init_schemes:
        src, retain = parse_scheme(s)
        for alpha in spec.alpha_grid:
            deps = [] if src == "random" else [asr_cells[src].name]
            tc = {"corpus": str(st_dir), "model": model,
                  "train": {**res["st_train"], "ctc_weight": alpha},
                  "init": None if src == "random" else str(out / deps[0] / "model.ckpt"),
                  "retain_ctc": retain}
            st_cells.append(Cell(f"st-{s}-alpha{fmt_weight(alpha)}", "st", {
                "scheme": s, "alpha": alpha, "train_config": tc, "decode": res["decode"],
                "beta_grid": list(spec.beta_grid), "metrics": list(spec.metrics),
                "eval": {split: str(st_dir / f"{split}.jsonl") for split in SPLITS}}, deps))
    return list(asr_cells.values()), st_cells


@dataclass
class SweepResult:
    table: str
    records: list[dict]
    steps: int


def _run_all(cells: list[Cell], out: Path, jobs: int) -> int:
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(min(jobs, len(cells))) as pool:
            return sum(pool.map(run_cell, cells, [out] * len(cells)))
    return sum(run_cell(c, out) for c in cells)


def select_beta(dev_bleu: dict[float, float]) -> float:
    """Argmax of dev BLEU over the beta grid; ties go to the smaller beta."""
    return min(dev_bleu, key=lambda b: (-dev_bleu[b], b))


def run_sweep(spec: ExperimentSpec, out: str | Path, jobs: int = 1) -> SweepResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(spec.resolved(), out / "experiment.resolved.json")
    asr_cells, st_cells = plan_cells(spec, out)
    steps = _run_all(asr_cells, out, jobs)
    steps += _run_all(st_cells, out, jobs)
    records = []
    for cell in st_cells:
        scores = json.loads((out / cell.name / "scores.json").read_text())
        dev = {b: scores[f"dev/{fmt_weight(b)}"]["bleu"]["value"] for b in spec.beta_grid}
        best = select_beta(dev)
        for b in spec.beta_grid:
            rec = {"scheme": cell.config["scheme"], "alpha": cell.config["alpha"], "beta": b,
                   "best_on_dev": b == best}
            for split in SPLITS:
                for m in spec.metrics:
                    rec[f"{split}_{m}"] = scores[f"{split}/{fmt_weight(b)}"][m]["value"]
            records.append(rec)
    table = format_table(records, spec.beta_grid)
    (out / "results.txt").write_text(table)
    write_jsonl(records, out / "results.jsonl")
    return SweepResult(table, records, steps)


def format_table(records: list[dict], betas: Sequence[float]) -> str:
    """Rows: scheme x alpha; columns: beta; cells: dev/test BLEU, ``*`` = best beta on dev."""
    rows: dict = {}
    for r in records:
        rows.setdefault((r["scheme"], r["alpha"]), {})[r["beta"]] = r
    header = ["scheme", "alpha"] + [f"beta={fmt_weight(b)}" for b in betas]
    lines = [header]
    for (scheme, alpha), cells in rows.items():
        line = [scheme, fmt_weight(alpha)]
        for b in betas:
            r = cells[b]
            mark = "*" if r["best_on_dev"] else ""
            line.append(f"{r['dev_bleu']:.2f}/{r['test_bleu']:.2f}{mark}")
        lines.append(line)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    text = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines]
    text.append("cells: dev/test BLEU; * marks the beta selected on dev")
    return "\n".join(text) + "\n"


def mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)
