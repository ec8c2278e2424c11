import struct

import numpy as np
import pytest

from jcast.checkpoint import MAGIC, Checkpoint, OptimizerState, load_checkpoint, save_checkpoint
from jcast.data import synthetic_vocab
from jcast.errors import IntegrityError
from jcast.model import Model, ModelConfig
from jcast.train import init_st_from_asr

TINY = ModelConfig(d_model=8, d_ff=16, heads=2, enc_layers=1, dec_layers=1, conv_channels=4)


@pytest.fixture
def ckpt():
    m = Model(TINY, [synthetic_vocab("aa", 4), synthetic_vocab("bb", 5)])
    m.frozen = {"heads.aa.embed"}
    rng = np.random.default_rng(1)
    for p in m.params.values():  # pretend it was trained
        p.data = p.data + 0.01 * rng.normal(size=p.shape)
    opt = OptimizerState(step=7, m={k: rng.normal(size=p.shape) for k, p in m.params.items()},
                         v={k: rng.random(p.shape) for k, p in m.params.items()})
    return Checkpoint(m, opt, {"epoch": 3, "note": "é"})


def test_round_trip_is_bitwise(tmp_path, ckpt):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, ckpt)
    loaded = load_checkpoint(a)
    save_checkpoint(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    for k, p in ckpt.model.params.items():
        assert loaded.model.params[k].data.tobytes() == p.data.tobytes()
        assert loaded.optimizer.m[k].tobytes() == ckpt.optimizer.m[k].tobytes()
    assert loaded.model.config == ckpt.model.config
    assert loaded.model.languages() == ["aa", "bb"]
    assert loaded.model.vocab("bb").to_record() == ckpt.model.vocab("bb").to_record()
    assert loaded.model.frozen == {"heads.aa.embed"}
    assert loaded.optimizer.step == 7 and loaded.meta == ckpt.meta


def test_f32_storage(tmp_path, ckpt):
    ckpt.dtype = "f32"
    save_checkpoint(tmp_path / "a", ckpt)
    loaded = load_checkpoint(tmp_path / "a")
    w = next(iter(ckpt.model.params))
    np.testing.assert_array_equal(loaded.model.params[w].data,
                                  ckpt.model.params[w].data.astype(np.float32))
    save_checkpoint(tmp_path / "b", loaded)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_rejects_damaged_files(tmp_path, ckpt):
    p = tmp_path / "a"
    save_checkpoint(p, ckpt)
    raw = p.read_bytes()
    for name, blob in {"truncated": raw[:-3], "magic": b"NOTJCAST" + raw[8:],
                       "trailing": raw + b"\0", "empty": b"",
                       "version": MAGIC + struct.pack("<I", 99) + raw[12:]}.items():
        bad = tmp_path / name
        bad.write_bytes(blob)
        with pytest.raises(IntegrityError):
            load_checkpoint(bad)


def test_shape_mismatch(tmp_path, ckpt):
    big = Model(TINY, [synthetic_vocab("aa", 4), synthetic_vocab("bb", 5)])
    small = Model(TINY, [synthetic_vocab("aa", 4), synthetic_vocab("bb", 3)])
    save_checkpoint(tmp_path / "a", Checkpoint(big))
    raw = (tmp_path / "a").read_bytes()
    # header from the small model, tensors from the big one
    save_checkpoint(tmp_path / "b", Checkpoint(small))
    n_a = struct.unpack("<Q", raw[12:20])[0]
    raw_b = (tmp_path / "b").read_bytes()
    n_b = struct.unpack("<Q", raw_b[12:20])[0]
    (tmp_path / "c").write_bytes(raw_b[:20 + n_b] + raw[20 + n_a:])
    with pytest.raises(IntegrityError, match="shape"):
        load_checkpoint(tmp_path / "c")


def test_load_into_st_retain_and_discard(tmp_path, ckpt):
    save_checkpoint(tmp_path / "asr", ckpt)
    asr = load_checkpoint(tmp_path / "asr").model
    keep = init_st_from_asr(asr, "bb", retain_ctc=True)
    drop = init_st_from_asr(asr, "bb", retain_ctc=False)
    w = ckpt.model.params["heads.bb.ctc.w"].data
    assert keep.params["heads.bb.ctc.w"].data.tobytes() == w.tobytes()
    assert not np.array_equal(drop.params["heads.bb.ctc.w"].data, w)
    np.testing.assert_array_equal(drop.params["heads.bb.ctc.w"].data,
                                  asr.init_param("heads.bb.ctc.w", w.shape, "xavier"))
