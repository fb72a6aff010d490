"""Encoders mapping a 6D similarity tensor back to a (T, H, W, C) feature map.

The learned encoder works late-fusion style: each of the L temporal-offset
slices is processed spatially first (a fully connected layer over the
flattened (U, V) window, then shared Conv2d-BatchNorm-GELU blocks over
(H, W)), and the refined slices are concatenated on channels and integrated
by a final fully connected layer. The simple encoders (vectorization and
mean pooling) have no parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stss import WindowSpec
from .tensor import ConfigError, Node, OpGraph, ParamStore

DEFAULT_WIDTH = 64
DEFAULT_BLOCKS = 3


@dataclass(frozen=True)
class EncoderParams:
    """Hyperparameters of the learned encoder.

    width:    internal channel count D kept by every conv block
    channels: output channel count C of the encoded feature map
    blocks:   number of Conv2d-BatchNorm-GELU triples (shared across slices)
    """

    width: int = DEFAULT_WIDTH
    channels: int = DEFAULT_WIDTH
    blocks: int = DEFAULT_BLOCKS

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError(f"encoder needs at least 1 conv block, got {self.blocks}")
        if self.width < 1 or self.channels < 1:
            raise ConfigError(
                f"encoder width/channels must be positive, got D={self.width} "
                f"C={self.channels}"
            )


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_encoder(store: ParamStore, prefix: str, window: WindowSpec,
                 params: EncoderParams, rng: np.random.Generator,
                 dtype=np.float32) -> None:
    """Create the encoder's entries under `prefix` with the checkpoint names.

    The conv blocks carry no bias (batch norm's beta immediately follows);
    running stats start at mean 0, variance 1.
    """
    d = params.width
    uv = window.U * window.V
    store.add(f"{prefix}.spatial_fc.w", _uniform(rng, uv, (uv, d), dtype))
    store.add(f"{prefix}.spatial_fc.b", _uniform(rng, uv, (d,), dtype))
    for i in range(params.blocks):
        store.add(f"{prefix}.block{i}.conv.w", _uniform(rng, 9 * d, (3, 3, d, d), dtype))
        store.add(f"{prefix}.block{i}.bn.gamma", np.ones(d, dtype=dtype))
        store.add(f"{prefix}.block{i}.bn.beta", np.zeros(d, dtype=dtype))
        store.add(f"{prefix}.block{i}.bn.rmean", np.zeros(d, dtype=dtype), trainable=False)
        store.add(f"{prefix}.block{i}.bn.rvar", np.ones(d, dtype=dtype), trainable=False)
    ld = window.L * d
    store.add(f"{prefix}.temporal_fc.w", _uniform(rng, ld, (ld, params.channels), dtype))
    store.add(f"{prefix}.temporal_fc.b", _uniform(rng, ld, (params.channels,), dtype))


def encoder_param_names(prefix: str, params: EncoderParams) -> list[str]:
    names = [f"{prefix}.spatial_fc.w", f"{prefix}.spatial_fc.b"]
    for i in range(params.blocks):
        names += [
            f"{prefix}.block{i}.conv.w",
            f"{prefix}.block{i}.bn.gamma",
            f"{prefix}.block{i}.bn.beta",
            f"{prefix}.block{i}.bn.rmean",
            f"{prefix}.block{i}.bn.rvar",
        ]
    names += [f"{prefix}.temporal_fc.w", f"{prefix}.temporal_fc.b"]
    return names


def encode_learned(graph: OpGraph, s: Node, window: WindowSpec,
                   params: EncoderParams, store: ParamStore, prefix: str,
                   mode: str) -> Node:
    """Learned late-fusion encoder: (T,H,W,L,U,V) -> (T,H,W,C).

    Pipeline: flatten (U,V) -> spatial FC to D -> shared conv blocks applied
    to each temporal-offset slice (slices fold into the frame axis, so batch
    norm pools statistics over T, H, W and all L slices) -> concatenate the
    L slices on channels in ascending offset order -> temporal FC to C.
    """
    if s.data.ndim != 6:
        raise ConfigError(f"encoder expects a 6D similarity tensor, got {s.data.shape}")
    t, h, w, l, u, v = s.data.shape
    if (l, u, v) != window.as_tuple():
        raise ConfigError(
            f"similarity window {(l, u, v)} does not match the configured "
            f"window {window.as_tuple()}"
        )
    d = params.width
    sw = store[f"{prefix}.spatial_fc.w"]
    if sw.value.shape[0] != u * v:
        raise ConfigError(
            f"encoder {prefix} was built for a {sw.value.shape[0]}-cell spatial "
            f"window, input has {u * v}"
        )
    tw = store[f"{prefix}.temporal_fc.w"]
    if tw.value.shape[0] != l * d:
        raise ConfigError(
            f"encoder {prefix} was built for temporal width {tw.value.shape[0]}, "
            f"input needs {l * d}"
        )

    x = graph.reshape(s, (t, h, w, l, u * v))
    x = graph.linear(x, graph.param(store, f"{prefix}.spatial_fc.w"),
                     graph.param(store, f"{prefix}.spatial_fc.b"))
    # Fold the offset axis into the frame axis for the shared conv stack.
    x = graph.transpose(x, (0, 3, 1, 2, 4))
    x = graph.reshape(x, (t * l, h, w, d))
    for i in range(params.blocks):
        x = graph.conv2d_3x3(x, graph.param(store, f"{prefix}.block{i}.conv.w"))
        x = graph.batchnorm2d(
            x,
            graph.param(store, f"{prefix}.block{i}.bn.gamma"),
            graph.param(store, f"{prefix}.block{i}.bn.beta"),
            store[f"{prefix}.block{i}.bn.rmean"],
            store[f"{prefix}.block{i}.bn.rvar"],
            mode,
        )
        x = graph.gelu(x)
    x = graph.reshape(x, (t, l, h, w, d))
    x = graph.transpose(x, (0, 2, 3, 1, 4))
    x = graph.reshape(x, (t, h, w, l * d))  # concat on channels, ascending l
    return graph.linear(x, graph.param(store, f"{prefix}.temporal_fc.w"),
                        graph.param(store, f"{prefix}.temporal_fc.b"))


def encode_vectorize(s: np.ndarray) -> np.ndarray:
    """Pure reshape (T,H,W,L,U,V) -> (T,H,W,L*U*V); values preserved bitwise."""
    s = np.ascontiguousarray(s)
    if s.ndim != 6:
        raise ConfigError(f"vectorize expects a 6D similarity tensor, got {s.shape}")
    t, h, w, l, u, v = s.shape
    return s.reshape(t, h, w, l * u * v)


def encode_mean_pool(s: np.ndarray) -> np.ndarray:
    """Mean over the (U, V) window per temporal offset: (T,H,W,L,U,V) -> (T,H,W,L)."""
    s = np.ascontiguousarray(s)
    if s.ndim != 6:
        raise ConfigError(f"mean pool expects a 6D similarity tensor, got {s.shape}")
    return s.mean(axis=(4, 5))


def encode_vectorize_node(graph: OpGraph, s: Node) -> Node:
    t, h, w, l, u, v = s.data.shape
    return graph.reshape(s, (t, h, w, l * u * v))


def encode_mean_pool_node(graph: OpGraph, s: Node) -> Node:
    return graph.mean_over(s, (4, 5))
