import numpy as np
import numpy.testing as npt
import pytest

from moss.encoder import (EncoderParams, encode_learned, encode_mean_pool,
                          encode_vectorize, encoder_param_names, init_encoder)
from moss.stss import WindowSpec, stss_forward
from moss.tensor import (ConfigError, OpGraph, ParamStore, gradient_rel_err,
                         numeric_gradient)

W333 = WindowSpec(3, 3, 3)


def zero_encoder_store(window, params, dtype=np.float64):
    store = ParamStore()
    init_encoder(store, "enc1", window, params, np.random.default_rng(0), dtype)
    for name, p in store.entries.items():
        if name.endswith(".bn.rvar"):
            p.value[...] = 1.0
        else:
            p.value[...] = 0.0
    # batch-norm scale back to its init so only weights are zeroed
    for name, p in store.entries.items():
        if name.endswith(".bn.gamma"):
            p.value[...] = 1.0
    return store


def test_encoder_params_validation():
    with pytest.raises(ConfigError):
        EncoderParams(width=4, channels=4, blocks=0)
    with pytest.raises(ConfigError):
        EncoderParams(width=0, channels=4)


def test_param_names_match_created_entries():
    params = EncoderParams(width=3, channels=2, blocks=2)
    store = ParamStore()
    init_encoder(store, "enc1", W333, params, np.random.default_rng(0))
    assert store.names() == encoder_param_names("enc1", params)
    # conv blocks carry no bias entry
    assert not any(name.endswith("conv.b") for name in store.names())


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_zero_parameters_give_zero_output(mode):
    params = EncoderParams(width=4, channels=3, blocks=2)
    store = zero_encoder_store(W333, params)
    rng = np.random.default_rng(1)
    s = rng.standard_normal((2, 4, 4, 3, 3, 3))
    g = OpGraph()
    out = encode_learned(g, g.input(s), W333, params, store, "enc1", mode)
    npt.assert_array_equal(out.data, np.zeros((2, 4, 4, 3)))


def test_shape_contract_paper_scale():
    window = WindowSpec(5, 9, 9)
    params = EncoderParams(width=64, channels=64, blocks=3)
    store = ParamStore()
    init_encoder(store, "enc1", window, params, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    s = rng.uniform(-1, 1, (8, 14, 14, 5, 9, 9)).astype(np.float32)
    g = OpGraph()
    out = encode_learned(g, g.input(s), window, params, store, "enc1", "eval")
    assert out.data.shape == (8, 14, 14, 64)


def test_window_mismatch_is_config_error():
    params = EncoderParams(width=4, channels=3, blocks=1)
    store = ParamStore()
    init_encoder(store, "enc1", W333, params, np.random.default_rng(4))
    g = OpGraph()
    s = np.zeros((1, 2, 2, 3, 5, 5), dtype=np.float64)
    with pytest.raises(ConfigError):
        encode_learned(g, g.input(s), WindowSpec(3, 5, 5), params, store,
                       "enc1", "eval")
    with pytest.raises(ConfigError):
        encode_learned(g, g.input(np.zeros((1, 2, 2, 3, 3, 3))), W333,
                       params, store, "missing", "eval")


def test_encoder_full_gradient_check():
    params = EncoderParams(width=3, channels=2, blocks=1)
    store = ParamStore()
    init_encoder(store, "enc1", W333, params, np.random.default_rng(5),
                 dtype=np.float64)
    rng = np.random.default_rng(5)
    s0 = rng.standard_normal((2, 3, 3, 3, 3, 3))

    def run(s):
        g = OpGraph()
        return g, encode_learned(g, g.input(s), W333, params, store, "enc1",
                                 "train")

    g, out = run(s0)
    r = rng.standard_normal(out.data.shape)
    store.zero_grads()
    g.backward(r)
    snapshot = {n: p.value.copy() for n, p in store.entries.items()}

    def loss_s(v):
        for n, p in store.entries.items():
            p.value[...] = snapshot[n]
        _, o = run(v)
        return float((r * o.data).sum())

    assert gradient_rel_err(g.grad_of(g.nodes[0]),
                            numeric_gradient(loss_s, s0)) <= 1e-5


def test_translation_equivariance_on_interior():
    # Shift the similarity volume spatially; interior outputs must shift
    # identically (eval-mode batch norm so statistics stay fixed).
    params = EncoderParams(width=4, channels=3, blocks=3)
    store = ParamStore()
    init_encoder(store, "enc1", W333, params, np.random.default_rng(6))
    rng = np.random.default_rng(7)
    h = w = 12
    s = rng.standard_normal((2, h, w, 3, 3, 3)).astype(np.float32)
    shifted = np.zeros_like(s)
    shifted[:, 1:, 1:] = s[:, :-1, :-1]

    def run(v):
        g = OpGraph()
        return encode_learned(g, g.input(v), W333, params, store, "enc1",
                              "eval").data

    base = run(s)
    moved = run(shifted)
    margin = params.blocks + 1
    npt.assert_allclose(moved[:, 1 + margin:h - margin, 1 + margin:w - margin],
                        base[:, margin:h - 1 - margin, margin:w - 1 - margin],
                        atol=1e-5)


def test_vectorize_is_bitwise_reshape():
    rng = np.random.default_rng(8)
    s = rng.standard_normal((3, 4, 4, 3, 3, 3)).astype(np.float32)
    v = encode_vectorize(s)
    assert v.shape == (3, 4, 4, 27)
    npt.assert_array_equal(v.reshape(s.shape), s)
    npt.assert_array_equal(v[1, 2, 3], s[1, 2, 3].reshape(-1))


def test_vectorize_feeds_forward_transform():
    rng = np.random.default_rng(9)
    f = rng.standard_normal((2, 3, 3, 2)).astype(np.float32)
    s1 = stss_forward(f, W333)
    m1 = encode_vectorize(s1)
    s2 = stss_forward(m1, W333)
    assert s2.shape == (2, 3, 3, 3, 3, 3)


def test_mean_pool_constant():
    s = np.full((2, 3, 3, 3, 5, 5), 0.25, dtype=np.float32)
    out = encode_mean_pool(s)
    assert out.shape == (2, 3, 3, 3)
    npt.assert_allclose(out, 0.25, rtol=1e-7)


def test_mean_pool_impulse():
    s = np.zeros((1, 2, 2, 3, 3, 3), dtype=np.float64)
    s[..., 1, 1] = 1.0  # one hit per (U, V) map
    npt.assert_allclose(encode_mean_pool(s), 1.0 / 9.0, rtol=1e-12)


def test_mean_pool_matches_loop_oracle():
    rng = np.random.default_rng(10)
    s = rng.standard_normal((2, 3, 3, 3, 5, 5)).astype(np.float32)
    got = encode_mean_pool(s)
    for t in range(2):
        for h in range(3):
            for w in range(3):
                for l in range(3):
                    acc = 0.0
                    for u in range(5):
                        for v in range(5):
                            acc += float(s[t, h, w, l, u, v])
                    assert abs(got[t, h, w, l] - acc / 25.0) <= 1e-6
