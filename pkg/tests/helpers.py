"""Shared test utilities: naive loop oracles and random-instance batteries."""

from __future__ import annotations

import numpy as np

from moss.stss import SimilarityPolicy, WindowSpec, stss_forward

SMALL_WINDOWS = (WindowSpec(1, 3, 3), WindowSpec(3, 3, 3), WindowSpec(3, 5, 5))


def loop_matmul(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]), dtype=x.dtype)
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            acc = 0.0
            for k in range(x.shape[1]):
                acc += x[i, k] * w[k, j]
            out[i, j] = acc + b[j]
    return out


def loop_conv3x3(x, k, b=None):
    t_n, h_n, w_n, cin = x.shape
    cout = k.shape[3]
    out = np.zeros((t_n, h_n, w_n, cout), dtype=x.dtype)
    for t in range(t_n):
        for h in range(h_n):
            for w in range(w_n):
                for co in range(cout):
                    acc = 0.0
                    for di in range(3):
                        for dj in range(3):
                            hi = h + di - 1
                            wi = w + dj - 1
                            if 0 <= hi < h_n and 0 <= wi < w_n:
                                for ci in range(cin):
                                    acc += x[t, hi, wi, ci] * k[di, dj, ci, co]
                    out[t, h, w, co] = acc + (b[co] if b is not None else 0.0)
    return out


def random_feature_map(rng, max_t=4, max_hw=7, max_c=6, dtype=np.float32,
                       zero_fraction=0.0):
    t = int(rng.integers(1, max_t + 1))
    h = int(rng.integers(1, max_hw + 1))
    w = int(rng.integers(1, max_hw + 1))
    c = int(rng.integers(1, max_c + 1))
    f = rng.uniform(-1.0, 1.0, size=(t, h, w, c)).astype(dtype)
    if zero_fraction > 0.0:
        kill = rng.random((t, h, w)) < zero_fraction
        f[kill] = 0.0
    return f


def stss_invariant_battery(n_instances, seed=0, norm_eps=1e-12):
    """Checks boundedness, self-match, reciprocity, positive-scale
    invariance, and static-map temporal nullity on random instances.
    Returns the number of instances checked; raises AssertionError on any
    violation.
    """
    rng = np.random.default_rng(seed)
    policy = SimilarityPolicy(norm_eps)
    for i in range(n_instances):
        window = SMALL_WINDOWS[i % len(SMALL_WINDOWS)]
        f = random_feature_map(rng, zero_fraction=0.15 if i % 3 == 0 else 0.0)
        s = stss_forward(f, window, policy)
        t_n, h_n, w_n, _ = f.shape
        hl, hu, hv = window.half

        assert s.min() >= -1.0 and s.max() <= 1.0, "boundedness violated"

        norms = np.sqrt((f.astype(np.float64) ** 2).sum(-1))
        self_match = s[:, :, :, hl, hu, hv]
        expected = (norms > norm_eps).astype(s.dtype)
        assert np.array_equal(self_match, expected), "self-match violated"

        # reciprocity: S[p, d] == S[p + d, -d] bitwise for in-bounds pairs
        for _ in range(20):
            t = int(rng.integers(0, t_n))
            h = int(rng.integers(0, h_n))
            w = int(rng.integers(0, w_n))
            l = int(rng.integers(-hl, hl + 1))
            u = int(rng.integers(-hu, hu + 1))
            v = int(rng.integers(-hv, hv + 1))
            tn, hn, wn = t + l, h + u, w + v
            if not (0 <= tn < t_n and 0 <= hn < h_n and 0 <= wn < w_n):
                continue
            a = s[t, h, w, l + hl, u + hu, v + hv]
            b = s[tn, hn, wn, -l + hl, -u + hu, -v + hv]
            assert a == b, f"reciprocity violated: {a} vs {b}"

        scale = rng.uniform(0.2, 5.0, size=f.shape[:3] + (1,)).astype(f.dtype)
        s_scaled = stss_forward(f * scale, window, policy)
        assert np.abs(s_scaled - s).max() <= 1e-6, "scale invariance violated"

        static = np.broadcast_to(f[:1], f.shape).copy()
        s_static = stss_forward(static, window, policy)
        for l in range(-hl, hl + 1):
            lo_t = max(0, -l)
            hi_t = min(t_n, t_n - l)
            if lo_t >= hi_t:
                continue
            got = s_static[lo_t:hi_t, :, :, l + hl]
            ref = s_static[lo_t:hi_t, :, :, hl]
            assert np.array_equal(got, ref), "static-map temporal nullity violated"
    return n_instances
