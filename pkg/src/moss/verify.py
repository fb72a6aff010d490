"""Independent verification routes: oracle comparison, finite-difference
gradient checks, and the two-set-scene separability analysis.

These back both the command-line check commands and the test suite, so a
single implementation defines what "passing" means everywhere.
"""

from __future__ import annotations

import numpy as np

from .encoder import EncoderParams, encode_learned, encode_vectorize, init_encoder
from .module import MossConfig, init_params, moss_forward
from .stss import (DEFAULT_POLICY, WindowSpec, stss_backward, stss_forward,
                   stss_oracle)
from .synthdata import gen_toy_scene, make_patch_embed, masks_to_grid, patch_embed
from .tensor import OpGraph, ParamStore, gradient_rel_err, numeric_gradient

ORACLE_WINDOWS = (WindowSpec(1, 3, 3), WindowSpec(3, 3, 3),
                  WindowSpec(3, 5, 5), WindowSpec(5, 9, 9))


# ---------------------------------------------------------------------------
# Oracle comparison


def oracle_sweep(seed: int = 42, instances: int = 50,
                 include_large: bool = True) -> dict:
    """Blocked kernel vs the literal loop reference over random instances.

    Instances cycle through the window set; a fraction get zero-norm
    positions to exercise the degenerate-vector rule. When include_large is
    set, one (8, 14, 14, 64) case per window is appended.
    """
    rng = np.random.default_rng(seed)
    max_diff = 0.0
    cases = []
    for i in range(instances):
        window = ORACLE_WINDOWS[i % len(ORACLE_WINDOWS)]
        t = int(rng.integers(1, 5))
        h = int(rng.integers(1, 9))
        w = int(rng.integers(1, 9))
        c = int(rng.integers(1, 9))
        f = rng.uniform(-1.0, 1.0, size=(t, h, w, c)).astype(np.float32)
        if i % 5 == 0:
            kill = rng.random((t, h, w)) < 0.2
            f[kill] = 0.0
        diff = float(np.abs(
            stss_forward(f, window) - stss_oracle(f, window)
        ).max())
        cases.append({"shape": (t, h, w, c), "window": window.as_tuple(),
                      "diff": diff})
        max_diff = max(max_diff, diff)
    if include_large:
        for window in ORACLE_WINDOWS:
            f = rng.uniform(-1.0, 1.0, size=(8, 14, 14, 64)).astype(np.float32)
            diff = float(np.abs(
                stss_forward(f, window) - stss_oracle(f, window)
            ).max())
            cases.append({"shape": (8, 14, 14, 64), "window": window.as_tuple(),
                          "diff": diff})
            max_diff = max(max_diff, diff)
    return {"max_diff": max_diff, "cases": cases}


# ---------------------------------------------------------------------------
# Finite-difference gradient suite (f64 throughout)


def _snapshot(store: ParamStore) -> dict[str, np.ndarray]:
    return {name: p.value.copy() for name, p in store.entries.items()}


def _restore(store: ParamStore, snap: dict[str, np.ndarray]) -> None:
    for name, p in store.entries.items():
        p.value[...] = snap[name]


def _check_graph(build, x0, store: ParamStore | None, rng, h=1e-5) -> float:
    """Max relative FD error over the input and every trainable parameter.

    `build(x_array)` must run one forward and return (graph, output node).
    The loss is sum(R * output) for a fixed random R, so the seeded
    upstream gradient is exactly R.
    """
    snap = _snapshot(store) if store is not None else {}
    graph, out = build(np.asarray(x0, dtype=np.float64))
    r = rng.standard_normal(out.data.shape)
    if store is not None:
        store.zero_grads()
    graph.backward(r)
    x_node = graph.nodes[0]
    analytic = {"__input__": graph.grad_of(x_node).copy()}
    if store is not None:
        for name, p in store.entries.items():
            if p.trainable:
                analytic[name] = p.grad.copy()

    def loss_for_input(x):
        if store is not None:
            _restore(store, snap)
        g, o = build(x)
        return float((r * o.data).sum())

    worst = gradient_rel_err(analytic["__input__"],
                             numeric_gradient(loss_for_input, x0, h))
    if store is not None:
        for name, p in store.entries.items():
            if not p.trainable:
                continue

            def loss_for_param(vals, _name=name):
                _restore(store, snap)
                store[_name].value[...] = vals
                g, o = build(np.asarray(x0, dtype=np.float64))
                return float((r * o.data).sum())

            err = gradient_rel_err(analytic[name],
                                   numeric_gradient(loss_for_param,
                                                    snap[name], h))
            worst = max(worst, err)
        _restore(store, snap)
    return worst


def _tiny_store(entries, rng) -> ParamStore:
    store = ParamStore()
    for name, shape, trainable in entries:
        store.add(name, rng.standard_normal(shape) * 0.5, trainable)
    return store


def gradient_suite(seed: int = 0) -> dict[str, float]:
    """Finite-difference checks for every primitive and composed pipeline.

    Returns an ordered mapping component -> max relative error; all values
    are expected to fall at or below 1e-5 in f64.
    """
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    # linear
    store = _tiny_store([("w", (4, 3), True), ("b", (3,), True)], rng)
    x0 = rng.standard_normal((2, 5, 4))

    def build_linear(x):
        g = OpGraph()
        return g, g.linear(g.input(x), g.param(store, "w"), g.param(store, "b"))

    results["linear"] = _check_graph(build_linear, x0, store, rng)

    # conv2d_3x3
    store = _tiny_store([("k", (3, 3, 3, 2), True), ("b", (2,), True)], rng)
    x0 = rng.standard_normal((2, 4, 5, 3))

    def build_conv(x):
        g = OpGraph()
        return g, g.conv2d_3x3(g.input(x), g.param(store, "k"), g.param(store, "b"))

    results["conv2d_3x3"] = _check_graph(build_conv, x0, store, rng)

    # batchnorm, both modes
    for mode in ("train", "eval"):
        store = _tiny_store([("gamma", (3,), True), ("beta", (3,), True)], rng)
        store.add("rmean", rng.standard_normal(3) * 0.1, trainable=False)
        store.add("rvar", np.abs(rng.standard_normal(3)) + 0.5, trainable=False)
        x0 = rng.standard_normal((2, 3, 4, 3))

        def build_bn(x, _mode=mode, _store=store):
            g = OpGraph()
            return g, g.batchnorm2d(g.input(x), g.param(_store, "gamma"),
                                    g.param(_store, "beta"), _store["rmean"],
                                    _store["rvar"], _mode)

        results[f"batchnorm_{mode}"] = _check_graph(build_bn, x0, store, rng)

    # gelu
    x0 = rng.standard_normal((3, 7))

    def build_gelu(x):
        g = OpGraph()
        return g, g.gelu(g.input(x))

    results["gelu"] = _check_graph(build_gelu, x0, None, rng)

    # composed gelu(linear(x)) with a scalar-ish output
    store = _tiny_store([("w", (5, 2), True), ("b", (2,), True)], rng)
    x0 = rng.standard_normal((4, 5))

    def build_composed(x):
        g = OpGraph()
        y = g.linear(g.input(x), g.param(store, "w"), g.param(store, "b"))
        return g, g.gelu(y)

    results["linear_gelu"] = _check_graph(build_composed, x0, store, rng)

    # similarity volume backward
    window = WindowSpec(3, 3, 3)
    x0 = rng.standard_normal((2, 3, 3, 3))
    ds = rng.standard_normal((2, 3, 3, 3, 3, 3))
    analytic = stss_backward(np.asarray(x0, dtype=np.float64), window,
                             DEFAULT_POLICY, ds)
    numeric = numeric_gradient(
        lambda f: float((ds * stss_forward(f, window)).sum()), x0, h=1e-6)
    results["stss_backward"] = gradient_rel_err(analytic, numeric)

    # full learned encoder
    window = WindowSpec(3, 3, 3)
    params = EncoderParams(width=3, channels=2, blocks=2)
    store = ParamStore()
    init_encoder(store, "enc1", window, params, rng, dtype=np.float64)
    f0 = rng.standard_normal((2, 3, 3, 2))
    s0 = stss_forward(np.asarray(f0, dtype=np.float64), window)

    def build_encoder(s):
        g = OpGraph()
        return g, encode_learned(g, g.input(s), window, params, store, "enc1",
                                 "train")

    results["encoder_learned"] = _check_graph(build_encoder, s0, store, rng)

    # full module, two order sets and every fusion variant
    combos = [((1, 2), "no_fusion", "moss_orders_1_2"),
              ((1, 2, 3), "no_fusion", "moss_orders_1_2_3"),
              ((1, 2), "addition", "fusion_addition"),
              ((1, 2), "mlp", "fusion_mlp"),
              ((1, 2), "conv", "fusion_conv")]
    for orders, fusion, tag in combos:
        cfg = MossConfig(channels=2, orders=orders, window=WindowSpec(3, 3, 3),
                         width=3, blocks=1, fusion=fusion, zero_branch=False,
                         visual_identity=False, seed=seed)
        store = init_params(cfg, dtype=np.float64)
        f0 = rng.standard_normal((2, 3, 3, 2))

        def build_moss(f, _cfg=cfg, _store=store):
            out, _, g = moss_forward(f, _cfg, _store, mode="train")
            return g, out

        results[tag] = _check_graph(build_moss, f0, store, rng)
    return results


# ---------------------------------------------------------------------------
# Two-set-scene separability


def mask_mean_similarity(s: np.ndarray, query: tuple[int, int, int],
                         grid_mask: np.ndarray) -> float | None:
    """Mean similarity from a query to the in-window cells of one mask.

    grid_mask is (T, Hg, Wg) for a single object; offsets landing outside
    the grid do not count. Returns None when no masked cell is reachable.
    """
    t, h, w = query
    t_n, h_n, w_n, l_n, u_n, v_n = s.shape
    hl, hu, hv = l_n // 2, u_n // 2, v_n // 2
    total = 0.0
    count = 0
    for l in range(-hl, hl + 1):
        tn = t + l
        if not 0 <= tn < t_n:
            continue
        for u in range(-hu, hu + 1):
            hn = h + u
            if not 0 <= hn < h_n:
                continue
            for v in range(-hv, hv + 1):
                wn = w + v
                if not 0 <= wn < w_n:
                    continue
                if grid_mask[tn, hn, wn]:
                    total += float(s[t, h, w, l + hl, u + hu, v + hv])
                    count += 1
    if count == 0:
        return None
    return total / count


def toy_separability(window: WindowSpec = WindowSpec(5, 9, 9),
                     channels: int = 16, seed: int = 0,
                     frames: tuple[int, ...] = (0, 1, 2, 3)) -> dict:
    """Order-1 vs order-2 similarity orderings on the two-set scene.

    For each query cell on a moving object, compares the mean similarity to
    same-motion companions (other objects of the query's set) against the
    matched-appearance twin in the other set. A query counts as separated
    when the order-2 mean favors the same-motion companions while the
    order-1 mean favors the same-appearance twin. Queries that cannot reach
    one of the two groups within the window are skipped.
    """
    pixels, masks, meta = gen_toy_scene(seed)
    # Exact-isometry embedding with zero bias: the zero background becomes
    # zero-norm, so only object structure enters the similarity vectors.
    embed = make_patch_embed(channels, seed, orthogonal=True, bias_scale=0.0)
    f = patch_embed(pixels, embed)
    grid = masks_to_grid(masks, min_pixels=4)
    s1 = stss_forward(f, window)
    s2 = stss_forward(encode_vectorize(s1), window)
    n_ok = 0
    n_total = 0
    rows = []
    for i, info in enumerate(meta):
        companions = np.zeros(grid.shape[1:], dtype=bool)
        for j, other in enumerate(meta):
            if j != i and other["set"] == info["set"]:
                companions |= grid[j]
        twin = grid[info["twin"]]
        for t in frames:
            for h, w in zip(*np.nonzero(grid[i, t])):
                q = (t, int(h), int(w))
                m2_same = mask_mean_similarity(s2, q, companions)
                m2_twin = mask_mean_similarity(s2, q, twin)
                m1_same = mask_mean_similarity(s1, q, companions)
                m1_twin = mask_mean_similarity(s1, q, twin)
                if None in (m2_same, m2_twin, m1_same, m1_twin):
                    continue
                ok = (m2_same > m2_twin) and (m1_twin > m1_same)
                n_ok += ok
                n_total += 1
                rows.append({"object": i, "query": q, "ok": bool(ok),
                             "m1_twin": m1_twin, "m1_same": m1_same,
                             "m2_twin": m2_twin, "m2_same": m2_same})
    return {"fraction": n_ok / n_total if n_total else 0.0,
            "n_queries": n_total, "rows": rows}
