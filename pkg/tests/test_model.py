import numpy as np
import pytest

from jcast import tensor as T
from jcast.data import EOS, SOS, synthetic_vocab
from jcast.errors import ConfigError, ContractError, ShapeError
from jcast.model import Model, ModelConfig, head_names

SMALL = dict(d_model=16, d_ff=32, heads=2, enc_layers=2, dec_layers=1, conv_channels=4)
VA, VB = synthetic_vocab("aa", 5), synthetic_vocab("bb", 3)


def small_model(**kw):
    return Model(ModelConfig(**{**SMALL, **kw}), [VA, VB])


def feats(T_, seed=0, dim=8):
    return np.random.default_rng(seed).normal(size=(T_, dim))


def test_subsampling_arithmetic():
    one = ModelConfig(conv_blocks=1)
    two = ModelConfig(conv_blocks=2)
    assert one.subsampled_length(11) == 5
    assert two.subsampled_length(11) == 2
    assert one.min_input_frames() == 3 and two.min_input_frames() == 7
    m = small_model()
    assert m.encode(feats(11)).states.shape == (1, 5, 16)
    assert small_model(conv_blocks=2).encode(feats(11)).states.shape == (1, 2, 16)


def test_too_short_input_names_the_minimum():
    with pytest.raises(ShapeError, match="at least 7"):
        small_model(conv_blocks=2).encode(feats(6))
    with pytest.raises(ShapeError):
        small_model().encode(feats(10, dim=5))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(enc_layers=0).validate()
    with pytest.raises(ConfigError):
        ModelConfig.preset("huge")
    with pytest.raises(ConfigError):
        ModelConfig.preset("desk", depth=3)
    p = ModelConfig.preset("full")
    assert (p.d_model, p.d_ff, p.heads, p.enc_layers, p.dec_layers, p.conv_channels) == \
           (256, 2048, 4, 12, 6, 256)


def test_zero_input_is_finite():
    enc = small_model().encode(np.zeros((9, 8)))
    assert np.all(np.isfinite(enc.states.data))


def test_ctc_rows_are_normalized():
    m = small_model()
    enc = m.encode(feats(11))
    lp = m.ctc_logits(enc, "aa").data[0]
    assert lp.shape == (5, len(VA))
    np.testing.assert_allclose(np.exp(lp).sum(axis=-1), 1.0, atol=1e-9)
    with pytest.raises(KeyError):
        m.ctc_logits(enc, "zz")


def test_language_heads_are_isolated():
    m = small_model()
    enc = m.encode(feats(11))
    before = m.ctc_logits(enc, "bb").data.copy()
    before_att = m.decode_step(enc, [SOS], "bb").copy()
    m.params["heads.aa.ctc.w"].data += 1.0
    m.params["heads.aa.out.w"].data += 1.0
    np.testing.assert_array_equal(m.ctc_logits(enc, "bb").data, before)
    np.testing.assert_array_equal(m.decode_step(enc, [SOS], "bb"), before_att)


def test_bodies_hold_no_language_parameters():
    m = small_model()
    for name in m.params:
        if not name.startswith("heads."):
            assert "aa" not in name and "bb" not in name


def test_adding_a_language_adds_only_heads():
    cfg = ModelConfig(**SMALL)
    m = Model(cfg, [VA])
    before = {k: v.data.copy() for k, v in m.params.items()}
    n0 = m.num_params()
    m.add_language(VB)
    V, d = len(VB), cfg.d_model
    assert m.num_params() - n0 == V * d * 2 + (d + 1) * V + V
    assert set(m.params) - set(before) == set(head_names("bb"))
    for k, v in before.items():
        np.testing.assert_array_equal(m.params[k].data, v)
    with pytest.raises(ConfigError):
        m.add_language(VB)


def test_desk_parameter_count():
    assert Model(ModelConfig(), [synthetic_vocab("fr", 20)]).num_params() == 355440


def test_initialization_is_seeded_by_name():
    a, b = small_model(seed=3), small_model(seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    c = small_model(seed=4)
    assert not np.array_equal(a.params["enc.proj.w"].data, c.params["enc.proj.w"].data)
    assert np.all(a.params["enc.proj.b"].data == 0)
    emb = Model(ModelConfig(), [synthetic_vocab("x", 400)]).params["heads.x.embed"].data
    assert abs(emb.std() - 64 ** -0.5) < 0.01


def test_reset_params_restores_initial_values():
    m = small_model()
    init = m.params["heads.aa.ctc.w"].data.copy()
    m.params["heads.aa.ctc.w"].data += 3.0
    m.reset_params(["heads.aa.ctc.w"])
    np.testing.assert_array_equal(m.params["heads.aa.ctc.w"].data, init)


def test_decoder_is_causal_and_normalized():
    m = small_model()
    enc = m.encode(feats(13))
    first = m.decode_step(enc, [SOS], "aa")
    np.testing.assert_allclose(np.logaddexp.reduce(first), 0.0, atol=1e-9)
    long = m.decoder_forward(enc, np.array([[SOS, 5, 7, 4]]), "aa").data[0]
    np.testing.assert_allclose(long[0], first, atol=1e-12)
    np.testing.assert_allclose(long[2], m.decode_step(enc, [SOS, 5, 7], "aa"), atol=1e-12)
    with pytest.raises(ContractError):
        m.decode_step(enc, [5], "aa")
    with pytest.raises(ShapeError):
        m.decode_step(enc, [SOS, len(VA)], "aa")


def test_teacher_forced_likelihood_equals_stepwise_sum():
    m = small_model()
    enc = m.encode(feats(13))
    toks = [6, 4, 8]
    step = 0.0
    prefix = [SOS]
    for k in toks + [EOS]:
        step += m.decode_step(enc, prefix, "aa")[k]
        prefix.append(k)
    assert m.sequence_log_prob(enc, toks, "aa") == pytest.approx(step, abs=1e-10)


def test_batched_encode_matches_single_utterances():
    m = small_model()
    xs = [feats(n, seed=n) for n in (13, 7, 10)]
    batch = m.encode(xs)
    for b, x in enumerate(xs):
        single = m.encode(x).states.data[0]
        got = batch.utterance(b).states.data[0]
        np.testing.assert_allclose(got, single, atol=1e-10)


def test_padded_decoder_rows_match_unpadded():
    m = small_model()
    enc = m.encode([feats(13), feats(9, seed=1)])
    ys = np.array([[SOS, 5, 6, 7], [SOS, 4, 0, 0]])
    out = m.decoder_forward(enc, ys, "aa", ys_lengths=np.array([4, 2])).data
    alone = m.decoder_forward(enc.utterance(1), ys[1:, :2], "aa").data
    np.testing.assert_allclose(out[1, :2], alone[0], atol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_forward_is_nan_free_on_perturbed_parameters(seed):
    m = small_model(seed=seed)
    rng = np.random.default_rng(seed)
    for p in m.params.values():
        scale = max(float(np.std(p.data)), 0.1)
        p.data = p.data + rng.uniform(-5, 5, size=p.shape) * scale
    enc = m.encode(feats(15, seed=seed) * 5)
    assert np.all(np.isfinite(m.ctc_logits(enc, "aa").data))
    assert np.all(np.isfinite(m.decoder_forward(enc, np.array([[SOS, 4, 5]]), "aa").data))


def test_dropout_only_in_train_mode_and_replayable():
    m = small_model(dropout_ff=0.3)
    x = feats(11)
    a = m.encode(x).states.data
    np.testing.assert_array_equal(a, m.encode(x).states.data)
    with m.train_mode(seed=1, step=5):
        d1 = m.encode(x).states.data
    with m.train_mode(seed=1, step=5):
        d2 = m.encode(x).states.data
    with m.train_mode(seed=1, step=6):
        d3 = m.encode(x).states.data
    np.testing.assert_array_equal(d1, d2)
    assert not np.array_equal(d1, a) and not np.array_equal(d1, d3)


def test_encoder_gradient_flows_to_every_body_parameter():
    m = small_model()
    enc = m.encode(feats(11))
    loss = T.sum(m.ctc_logits(enc, "aa"))
    loss = T.add(loss, T.sum(m.decoder_forward(enc, np.array([[SOS, 4]]), "aa")))
    T.backward(loss)
    missing = [k for k, p in m.params.items() if p.grad is None and not k.startswith("heads.bb")]
    assert missing == []
