"""Multi-order self-similarity: recursion over orders, fusion variants,
and the residual combination with the visual features.

Order 1 is the similarity volume of the input feature map itself. Each
higher order n re-applies the similarity transform to the encoded
representation of order n-1, so order 2 correlates motion patterns and
order 3 correlates motion segments. The module output adds a linear
projection of the visual features to linear projections of every active
order's encoded map; with the default initialization (zero branch
projections, identity visual projection) the module is an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .encoder import (EncoderParams, encode_learned, encode_mean_pool_node,
                      encode_vectorize_node, init_encoder)
from .stss import DEFAULT_POLICY, DEFAULT_WINDOW, SimilarityPolicy, WindowSpec, stss_node
from .tensor import ConfigError, Node, OpGraph, ParamStore

MAX_ORDER = 4
FUSION_KINDS = ("no_fusion", "addition", "mlp", "conv")
ENCODER_KINDS = ("learned", "vectorize", "mean_pool")


@dataclass(frozen=True)
class MossConfig:
    """Configuration of the multi-order module.

    channels: feature-map channel count C (kept by every encoder)
    orders:   strictly increasing subset of {1..4} whose features feed the output
    window:   one WindowSpec for all orders, or a per-order mapping
    width:    encoder internal width D
    blocks:   conv blocks per encoder
    fusion:   how order n >= 2 re-injects the visual features ("no_fusion"
              computes each order purely from the previous order's encoding)
    zero_branch / visual_identity: initialization policy of the final
              projections (defaults give an exact identity module)
    """

    channels: int
    orders: tuple[int, ...] = (1, 2)
    window: WindowSpec | Mapping[int, WindowSpec] = DEFAULT_WINDOW
    width: int = 64
    blocks: int = 3
    fusion: str = "no_fusion"
    zero_branch: bool = True
    visual_identity: bool = True
    seed: int = 0

    def __post_init__(self):
        orders = tuple(self.orders)
        object.__setattr__(self, "orders", orders)
        if not orders:
            raise ConfigError("orders must be non-empty")
        if any(n < 1 or n > MAX_ORDER for n in orders):
            raise ConfigError(
                f"orders must lie in 1..{MAX_ORDER}, got {orders}"
            )
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise ConfigError(f"orders must be strictly increasing, got {orders}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(
                f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}"
            )
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if isinstance(self.window, WindowSpec):
            windows = {n: self.window for n in range(1, self.max_order + 1)}
        else:
            windows = {int(n): w for n, w in dict(self.window).items()}
            missing = [n for n in range(1, self.max_order + 1) if n not in windows]
            if missing:
                raise ConfigError(f"window mapping misses orders {missing}")
        object.__setattr__(self, "window", windows)

    @property
    def max_order(self) -> int:
        return max(self.orders)

    def window_for(self, n: int) -> WindowSpec:
        return self.window[n]

    @property
    def encoder_params(self) -> EncoderParams:
        return EncoderParams(width=self.width, channels=self.channels,
                             blocks=self.blocks)


def config_to_json(cfg: MossConfig) -> dict:
    return {
        "orders": list(cfg.orders),
        "windows": {
            str(n): {"L": w.L, "U": w.U, "V": w.V}
            for n, w in sorted(cfg.window.items())
        },
        "D": cfg.width,
        "C": cfg.channels,
        "blocks": cfg.blocks,
        "fusion": cfg.fusion,
        "zero_branch": cfg.zero_branch,
        "visual_identity": cfg.visual_identity,
        "seed": cfg.seed,
    }


def config_from_json(doc: dict) -> MossConfig:
    windows = {
        int(n): WindowSpec(w["L"], w["U"], w["V"])
        for n, w in doc["windows"].items()
    }
    return MossConfig(
        channels=doc["C"],
        orders=tuple(doc["orders"]),
        window=windows,
        width=doc["D"],
        blocks=doc.get("blocks", 3),
        fusion=doc.get("fusion", "no_fusion"),
        zero_branch=doc.get("zero_branch", True),
        visual_identity=doc.get("visual_identity", True),
        seed=doc.get("seed", 0),
    )


@dataclass
class OrderOutputs:
    """Cached per-order tensors: s[n] is the order-n similarity volume,
    m[n] its encoded feature map. Nodes keep the backward closures alive,
    so one graph serves gradients and visualization."""

    s: dict[int, Node] = field(default_factory=dict)
    m: dict[int, Node] = field(default_factory=dict)
    graph: OpGraph | None = None
    input: Node | None = None


def init_params(cfg: MossConfig, seed: int | None = None,
                dtype=np.float32) -> ParamStore:
    """Deterministic parameter store for the full module.

    Encoders exist for every order up to max(orders) (the recursion needs
    them); branch projections exist only for the active orders. Non-final
    layers draw from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); the final
    projections honor the zero_branch / visual_identity flags.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = ParamStore()
    c = cfg.channels
    for n in range(1, cfg.max_order + 1):
        init_encoder(store, f"enc{n}", cfg.window_for(n), cfg.encoder_params,
                     rng, dtype)
    if cfg.fusion in ("mlp", "conv"):
        for n in range(2, cfg.max_order + 1):
            if cfg.fusion == "mlp":
                store.add(f"fuse{n}.fc1.w", _uniform(rng, 2 * c, (2 * c, c), dtype))
                store.add(f"fuse{n}.fc1.b", _uniform(rng, 2 * c, (c,), dtype))
                store.add(f"fuse{n}.fc2.w", _uniform(rng, c, (c, c), dtype))
                store.add(f"fuse{n}.fc2.b", _uniform(rng, c, (c,), dtype))
            else:
                store.add(f"fuse{n}.conv.w",
                          _uniform(rng, 9 * 2 * c, (3, 3, 2 * c, c), dtype))
                store.add(f"fuse{n}.conv.b", _uniform(rng, 9 * 2 * c, (c,), dtype))
    if cfg.visual_identity:
        store.add("visual_fc.w", np.eye(c, dtype=dtype))
        store.add("visual_fc.b", np.zeros(c, dtype=dtype))
    else:
        store.add("visual_fc.w", _uniform(rng, c, (c, c), dtype))
        store.add("visual_fc.b", _uniform(rng, c, (c,), dtype))
    for n in cfg.orders:
        if cfg.zero_branch:
            store.add(f"out_fc{n}.w", np.zeros((c, c), dtype=dtype))
            store.add(f"out_fc{n}.b", np.zeros(c, dtype=dtype))
        else:
            store.add(f"out_fc{n}.w", _uniform(rng, c, (c, c), dtype))
            store.add(f"out_fc{n}.b", _uniform(rng, c, (c,), dtype))
    return store


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def fuse_variant(graph: OpGraph, m_prev: Node, f_node: Node, kind: str,
                 store: ParamStore | None = None,
                 prefix: str | None = None, mode: str = "eval") -> Node:
    """Combine the previous order's encoding with the visual features.

    no_fusion returns m_prev untouched; addition needs matching channel
    counts; mlp and conv operate on the channel concatenation [F, M].
    """
    if kind == "no_fusion":
        return m_prev
    if kind == "addition":
        return graph.add(m_prev, f_node)
    if kind == "mlp":
        cat = graph.concat_last(f_node, m_prev)
        x = graph.linear(cat, graph.param(store, f"{prefix}.fc1.w"),
                         graph.param(store, f"{prefix}.fc1.b"))
        x = graph.gelu(x)
        return graph.linear(x, graph.param(store, f"{prefix}.fc2.w"),
                            graph.param(store, f"{prefix}.fc2.b"))
    if kind == "conv":
        cat = graph.concat_last(f_node, m_prev)
        return graph.conv2d_3x3(cat, graph.param(store, f"{prefix}.conv.w"),
                                graph.param(store, f"{prefix}.conv.b"))
    raise ConfigError(f"unknown fusion kind {kind!r}")


def high_order_stss(f_map, cfg: MossConfig, store: ParamStore | None = None,
                    up_to: int | None = None, mode: str = "eval",
                    encoder_kind: str = "learned",
                    graph: OpGraph | None = None,
                    policy: SimilarityPolicy = DEFAULT_POLICY) -> OrderOutputs:
    """Build the recursive order stack up to `up_to` in one operation graph.

    Every intermediate similarity volume and encoded map is cached in the
    returned OrderOutputs for visualization and for the gradient sweep.
    """
    n_top = cfg.max_order if up_to is None else up_to
    if n_top < 1 or n_top > MAX_ORDER:
        raise ConfigError(f"order must lie in 1..{MAX_ORDER}, got {n_top}")
    if n_top > cfg.max_order:
        raise ConfigError(
            f"order {n_top} exceeds the configured maximum {cfg.max_order}; "
            f"lower orders must be constructible"
        )
    if encoder_kind not in ENCODER_KINDS:
        raise ConfigError(
            f"encoder kind must be one of {ENCODER_KINDS}, got {encoder_kind!r}"
        )
    if encoder_kind == "learned" and store is None:
        raise ConfigError("a parameter store is required for the learned encoder")
    if graph is None:
        graph = OpGraph()
    x = graph.input(f_map) if not isinstance(f_map, Node) else f_map
    outputs = OrderOutputs(graph=graph, input=x)
    for n in range(1, n_top + 1):
        if n == 1:
            src = x
        else:
            src = fuse_variant(graph, outputs.m[n - 1], x, cfg.fusion,
                               store, f"fuse{n}", mode)
        s_n = stss_node(graph, src, cfg.window_for(n), policy)
        if encoder_kind == "learned":
            m_n = encode_learned(graph, s_n, cfg.window_for(n),
                                 cfg.encoder_params, store, f"enc{n}", mode)
        elif encoder_kind == "vectorize":
            m_n = encode_vectorize_node(graph, s_n)
        else:
            m_n = encode_mean_pool_node(graph, s_n)
        outputs.s[n] = s_n
        outputs.m[n] = m_n
    return outputs


def moss_forward(f_map, cfg: MossConfig, store: ParamStore,
                 mode: str = "train",
                 policy: SimilarityPolicy = DEFAULT_POLICY
                 ) -> tuple[Node, OrderOutputs, OpGraph]:
    """Full module: visual_fc(F) + sum over active orders of out_fc_n(M^(n)).

    Returns the output node, the cached per-order tensors, and the graph
    (one differentiable program end to end).
    """
    f_arr = np.ascontiguousarray(f_map)
    if f_arr.ndim != 4 or f_arr.shape[-1] != cfg.channels:
        raise ConfigError(
            f"feature map shape {f_arr.shape} does not match the configured "
            f"channel count C={cfg.channels}"
        )
    graph = OpGraph()
    outputs = high_order_stss(f_arr, cfg, store, up_to=cfg.max_order,
                              mode=mode, encoder_kind="learned", graph=graph,
                              policy=policy)
    y = graph.linear(outputs.input, graph.param(store, "visual_fc.w"),
                     graph.param(store, "visual_fc.b"))
    for n in cfg.orders:
        branch = graph.linear(outputs.m[n], graph.param(store, f"out_fc{n}.w"),
                              graph.param(store, f"out_fc{n}.b"))
        y = graph.add(y, branch)
    return y, outputs, graph
