import io

import numpy as np
import numpy.testing as npt
import pytest

from moss.stss import (DEFAULT_POLICY, SimilarityPolicy, WindowSpec,
                       read_stss, stss_backward, stss_forward, stss_node,
                       stss_oracle, write_stss)
from moss.tensor import (ConfigError, OpGraph, ShapeError, gradient_rel_err,
                         numeric_gradient)

from helpers import stss_invariant_battery

W333 = WindowSpec(3, 3, 3)


def test_window_spec_rejects_even_extent():
    with pytest.raises(ConfigError):
        WindowSpec(2, 3, 3)
    with pytest.raises(ConfigError):
        WindowSpec(3, 4, 3)
    with pytest.raises(ConfigError):
        WindowSpec(3, 3, 0)


@pytest.mark.parametrize("fn", [stss_forward, stss_oracle])
def test_constant_map_all_ones(fn):
    f = np.ones((3, 4, 4, 2), dtype=np.float32)
    s = fn(f, W333)
    t_n, h_n, w_n = 3, 4, 4
    for t in range(t_n):
        for h in range(h_n):
            for w in range(w_n):
                for l in range(-1, 2):
                    for u in range(-1, 2):
                        for v in range(-1, 2):
                            inside = (0 <= t + l < t_n and 0 <= h + u < h_n
                                      and 0 <= w + v < w_n)
                            got = s[t, h, w, l + 1, u + 1, v + 1]
                            assert got == (1.0 if inside else 0.0)
    assert np.array_equal(s[:, :, :, 1, 1, 1], np.ones((3, 4, 4)))


def test_checkerboard_orthogonal_vectors():
    h_n = w_n = 4
    f = np.zeros((1, h_n, w_n, 2), dtype=np.float32)
    for h in range(h_n):
        for w in range(w_n):
            f[0, h, w, (h + w) % 2] = 1.0
    s = stss_forward(f, WindowSpec(1, 3, 3))
    for h in range(h_n):
        for w in range(w_n):
            for u in range(-1, 2):
                for v in range(-1, 2):
                    if not (0 <= h + u < h_n and 0 <= w + v < w_n):
                        continue
                    got = s[0, h, w, 0, u + 1, v + 1]
                    assert got == (0.0 if (abs(u) + abs(v)) % 2 else 1.0)


def test_forward_matches_oracle_seed42():
    rng = np.random.default_rng(42)
    f = rng.uniform(-1, 1, (2, 3, 3, 4)).astype(np.float32)
    assert np.abs(stss_forward(f, W333) - stss_oracle(f, W333)).max() <= 1e-6


def test_forward_shape_contract_large():
    rng = np.random.default_rng(0)
    f = rng.uniform(-1, 1, (8, 14, 14, 64)).astype(np.float32)
    s = stss_forward(f, WindowSpec(5, 9, 9))
    assert s.shape == (8, 14, 14, 5, 9, 9)


def test_backward_zero_upstream():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((2, 3, 3, 3))
    ds = np.zeros((2, 3, 3, 3, 3, 3))
    npt.assert_array_equal(stss_backward(f, W333, DEFAULT_POLICY, ds),
                           np.zeros_like(f))


def test_backward_constant_map_is_stationary():
    f = np.full((2, 3, 3, 3), 0.7)
    ds = np.random.default_rng(2).standard_normal((2, 3, 3, 3, 3, 3))
    npt.assert_array_equal(stss_backward(f, W333, DEFAULT_POLICY, ds),
                           np.zeros_like(f))


def test_backward_finite_difference_seed3():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((2, 3, 3, 3))
    ds = rng.standard_normal((2, 3, 3, 3, 3, 3))
    analytic = stss_backward(f, W333, DEFAULT_POLICY, ds)
    numeric = numeric_gradient(
        lambda v: float((ds * stss_forward(v, W333)).sum()), f, h=1e-6)
    assert gradient_rel_err(analytic, numeric) <= 1e-5


def test_backward_with_zero_norm_positions():
    # The loss is not differentiable at zero-norm positions (the policy
    # defines their gradient as 0), so finite differences are compared only
    # away from the killed positions.
    rng = np.random.default_rng(4)
    f = rng.standard_normal((2, 3, 3, 2))
    f[0, 1, 1] = 0.0
    f[1, 0, 2] = 0.0
    ds = rng.standard_normal((2, 3, 3, 3, 3, 3))
    analytic = stss_backward(f, W333, DEFAULT_POLICY, ds)
    npt.assert_array_equal(analytic[0, 1, 1], np.zeros(2))
    npt.assert_array_equal(analytic[1, 0, 2], np.zeros(2))
    numeric = numeric_gradient(
        lambda v: float((ds * stss_forward(v, W333)).sum()), f, h=1e-6)
    mask = np.ones(f.shape, dtype=bool)
    mask[0, 1, 1] = False
    mask[1, 0, 2] = False
    assert gradient_rel_err(analytic[mask], numeric[mask]) <= 1e-5


def test_backward_shape_mismatch():
    with pytest.raises(ShapeError):
        stss_backward(np.ones((2, 3, 3, 2)), W333, DEFAULT_POLICY,
                      np.zeros((2, 3, 3, 3, 3, 5)))


def test_oracle_scale_invariance():
    rng = np.random.default_rng(5)
    f = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    alpha = rng.uniform(0.1, 9.0, (2, 3, 3, 1)).astype(np.float32)
    a = stss_oracle(f, W333)
    b = stss_oracle(f * alpha, W333)
    assert np.abs(a - b).max() <= 1e-6


def test_single_frame_is_spatial_self_similarity():
    rng = np.random.default_rng(6)
    f = rng.standard_normal((1, 5, 5, 3)).astype(np.float32)
    s = stss_oracle(f, WindowSpec(1, 3, 3))
    fh = f[0] / np.linalg.norm(f[0], axis=-1, keepdims=True)
    for h in range(5):
        for w in range(5):
            for u in range(-1, 2):
                for v in range(-1, 2):
                    if not (0 <= h + u < 5 and 0 <= w + v < 5):
                        continue
                    if u == 0 and v == 0:
                        assert s[0, h, w, 0, 1, 1] == 1.0
                        continue
                    ref = float(fh[h, w] @ fh[h + u, w + v])
                    assert abs(s[0, h, w, 0, u + 1, v + 1] - ref) <= 1e-6


def test_zero_norm_policy_cutoff():
    f = np.ones((1, 2, 2, 2), dtype=np.float64)
    f[0, 0, 0] = 0.0
    f[0, 1, 1] = 1e-13  # below the default norm_eps
    s = stss_forward(f, WindowSpec(1, 3, 3))
    assert s[0, 0, 0].max() == 0.0
    assert s[0, 1, 1].max() == 0.0
    assert s[0, 0, 1, 0, 1, 1] == 1.0
    custom = SimilarityPolicy(norm_eps=1e-14)
    s2 = stss_forward(f, WindowSpec(1, 3, 3), custom)
    assert s2[0, 1, 1, 0, 1, 1] == 1.0


def test_invariant_battery_100_instances():
    assert stss_invariant_battery(100, seed=0) == 100


def test_stss_node_gradients_flow():
    rng = np.random.default_rng(7)
    f = rng.standard_normal((2, 3, 3, 2))
    g = OpGraph()
    x = g.input(f)
    s = stss_node(g, x, W333)
    r = rng.standard_normal(s.data.shape)
    g.backward(r)
    direct = stss_backward(f, W333, DEFAULT_POLICY, r)
    npt.assert_array_equal(g.grad_of(x), direct)


def test_serialization_round_trip():
    rng = np.random.default_rng(8)
    f = rng.uniform(-1, 1, (2, 3, 3, 4)).astype(np.float32)
    s = stss_forward(f, W333)
    buf = io.BytesIO()
    write_stss(buf, s, W333)
    buf.seek(0)
    back, window = read_stss(buf)
    npt.assert_array_equal(back, s)
    assert window == W333


def test_serialization_bad_window_tag():
    buf = io.BytesIO()
    write_stss(buf, np.zeros((1, 1, 1, 1, 1, 1), dtype=np.float32), WindowSpec(1, 1, 1))
    raw = bytearray(buf.getvalue())
    raw[-16:-12] = b"XXXX"
    with pytest.raises(ValueError):
        read_stss(io.BytesIO(bytes(raw)))
