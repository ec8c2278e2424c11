"""Brute-force references: enumerate every frame-level CTC path."""

import itertools

import numpy as np


def collapse(path, blank=0):
    out, prev = [], None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return tuple(out)


def path_table(log_probs, blank=0):
    """{collapsed label sequence: log of total path probability}."""
    T, V = log_probs.shape
    acc = {}
    for path in itertools.product(range(V), repeat=T):
        lp = float(sum(log_probs[t, k] for t, k in enumerate(path)))
        key = collapse(path, blank)
        acc[key] = np.logaddexp(acc.get(key, -np.inf), lp)
    return acc


def brute_ctc_log_prob(log_probs, target, blank=0):
    return path_table(log_probs, blank).get(tuple(target), -np.inf)


def brute_prefix_log_prob(table, prefix):
    """log P(collapsed output starts with ``prefix``)."""
    prefix = tuple(prefix)
    vals = [v for k, v in table.items() if k[:len(prefix)] == prefix]
    return float(np.logaddexp.reduce(vals)) if vals else -np.inf


def random_log_probs(rng, T, V, scale=1.5):
    z = rng.normal(size=(T, V)) * scale
    return z - np.logaddexp.reduce(z, axis=-1, keepdims=True)


def tiny_model(seed, labels=5, lang="x"):
    """A 1-layer model over ``labels`` output tokens plus a seeded encoded input."""
    from jcast import tensor as T
    from jcast.data import synthetic_vocab
    from jcast.model import Model, ModelConfig

    cfg = ModelConfig(d_model=8, d_ff=16, heads=2, enc_layers=1, dec_layers=1,
                      conv_channels=4, dropout_ff=0.0, seed=seed)
    m = Model(cfg, [synthetic_vocab(lang, labels)])
    rng = np.random.default_rng(seed)
    with T.no_grad():
        enc = m.encode(3.0 * rng.normal(size=(int(rng.integers(7, 14)), 8)))
    return m, enc
