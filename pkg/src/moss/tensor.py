"""Dense tensor substrate with reverse-mode differentiation.

Provides the neural primitives the similarity encoders are built from
(linear, 3x3 same-padding convolution, batch normalization, tanh-GELU),
an explicitly recorded operation graph with exact analytic gradients,
a named parameter store, and the binary tensor container used by
checkpoints, datasets and golden files.

Arrays are plain C-contiguous numpy ndarrays in float32 or float64.
There is no broadcasting beyond what the listed primitives need; shape
mismatches raise ShapeError with both shapes in the message.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

GELU_A = 0.044715
GELU_C = float(np.sqrt(2.0 / np.pi))

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

FLOAT_DTYPES = (np.dtype("float32"), np.dtype("float64"))


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


class GraphStateError(RuntimeError):
    """The operation graph is in the wrong state for the requested call."""


class DegenerateStatsError(ValueError):
    """Batch statistics requested over fewer than two sample positions."""


def _as_float_array(array, what="array"):
    arr = np.ascontiguousarray(array)
    if arr.dtype not in FLOAT_DTYPES:
        raise ConfigError(f"{what} must be float32 or float64, got {arr.dtype}")
    return arr


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class Param:
    """A named learnable (or state) tensor with a matching gradient buffer."""

    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True


class ParamStore:
    """Named parameter tensors. Gradient buffers always match value shapes."""

    def __init__(self):
        self.entries: dict[str, Param] = {}

    def add(self, name: str, value, trainable: bool = True) -> Param:
        if name in self.entries:
            raise ConfigError(f"duplicate parameter name: {name}")
        value = _as_float_array(value, f"parameter {name}")
        param = Param(value, np.zeros_like(value), trainable)
        self.entries[name] = param
        return param

    def __getitem__(self, name: str) -> Param:
        try:
            return self.entries[name]
        except KeyError:
            raise ConfigError(f"unknown parameter name: {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grads(self) -> None:
        for param in self.entries.values():
            param.grad[...] = 0.0

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, param in self.entries.items():
            other.add(name, param.value.copy(), param.trainable)
        return other


# ---------------------------------------------------------------------------
# Operation graph


class Node:
    """One value in the operation graph."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, parents=(), backward_fn=None, op="input"):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.data.shape})"


class OpGraph:
    """Records primitive applications in execution order.

    The recording order is the topological order; the gradient sweep replays
    it exactly in reverse, accumulating into parent nodes and finally into the
    bound ParamStore entries. Sequential replay makes forward and backward
    bitwise reproducible for identical inputs.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.flops = 0
        self._param_nodes: list[tuple[Node, Param]] = []
        self._backward_done = False

    # -- leaves

    def input(self, array) -> Node:
        node = Node(_as_float_array(array, "graph input"))
        self.nodes.append(node)
        return node

    def param(self, store: ParamStore, name: str) -> Node:
        param = store[name]
        node = Node(param.value, op=f"param:{name}")
        self.nodes.append(node)
        self._param_nodes.append((node, param))
        return node

    # -- generic registration (used by ops defined in other modules)

    def apply(self, data, parents, backward_fn, op, flops=0) -> Node:
        node = Node(data, tuple(parents), backward_fn, op)
        self.nodes.append(node)
        self.flops += flops
        return node

    @staticmethod
    def accumulate(node: Node, grad) -> None:
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += grad

    # -- primitives

    def linear(self, x: Node, w: Node, b: Node | None = None) -> Node:
        """y[..., j] = sum_i x[..., i] w[i, j] + b[j]."""
        cin = x.data.shape[-1]
        if w.data.ndim != 2 or w.data.shape[0] != cin:
            raise ShapeError(
                f"linear: input ends in {cin} channels (shape {x.data.shape}) "
                f"but weight has shape {w.data.shape}"
            )
        cout = w.data.shape[1]
        if b is not None and b.data.shape != (cout,):
            raise ShapeError(
                f"linear: weight {w.data.shape} expects bias ({cout},), "
                f"got {b.data.shape}"
            )
        lead = x.data.shape[:-1]
        x2 = x.data.reshape(-1, cin)
        y2 = x2 @ w.data
        if b is not None:
            y2 = y2 + b.data
        rows = x2.shape[0]

        def backward_fn(dy):
            dy2 = dy.reshape(-1, cout)
            self.accumulate(x, (dy2 @ w.data.T).reshape(x.data.shape))
            self.accumulate(w, x2.T @ dy2)
            if b is not None:
                self.accumulate(b, dy2.sum(axis=0))

        parents = (x, w) if b is None else (x, w, b)
        return self.apply(
            y2.reshape(*lead, cout), parents, backward_fn, "linear",
            flops=2 * rows * cin * cout,
        )

    def conv2d_3x3(self, x: Node, k: Node, b: Node | None = None) -> Node:
        """Stride-1, zero-padding-1 cross-correlation over (H, W) per frame.

        x: (T, H, W, Cin), k: (3, 3, Cin, Cout). Spatial shape is preserved.
        """
        if x.data.ndim != 4:
            raise ShapeError(f"conv2d_3x3 expects a (T,H,W,C) input, got {x.data.shape}")
        t, h, w_, cin = x.data.shape
        if k.data.ndim != 4 or k.data.shape[:3] != (3, 3, cin):
            raise ShapeError(
                f"conv2d_3x3: input has {cin} channels (shape {x.data.shape}) "
                f"but kernel has shape {k.data.shape}"
            )
        cout = k.data.shape[3]
        if b is not None and b.data.shape != (cout,):
            raise ShapeError(
                f"conv2d_3x3: kernel {k.data.shape} expects bias ({cout},), "
                f"got {b.data.shape}"
            )
        xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
        y = np.zeros((t, h, w_, cout), dtype=x.data.dtype)
        for di in range(3):
            for dj in range(3):
                slab = xp[:, di:di + h, dj:dj + w_, :].reshape(-1, cin)
                y += (slab @ k.data[di, dj]).reshape(t, h, w_, cout)
        if b is not None:
            y += b.data

        def backward_fn(dy):
            dy2 = dy.reshape(-1, cout)
            dxp = np.zeros_like(xp)
            dk = np.empty_like(k.data)
            for di in range(3):
                for dj in range(3):
                    slab = xp[:, di:di + h, dj:dj + w_, :].reshape(-1, cin)
                    dk[di, dj] = slab.T @ dy2
                    dxp[:, di:di + h, dj:dj + w_, :] += (
                        dy2 @ k.data[di, dj].T
                    ).reshape(t, h, w_, cin)
            self.accumulate(x, dxp[:, 1:1 + h, 1:1 + w_, :])
            self.accumulate(k, dk)
            if b is not None:
                self.accumulate(b, dy.sum(axis=(0, 1, 2)))

        parents = (x, k) if b is None else (x, k, b)
        return self.apply(
            y, parents, backward_fn, "conv2d_3x3",
            flops=2 * 9 * t * h * w_ * cin * cout,
        )

    def batchnorm2d(self, x: Node, gamma: Node, beta: Node,
                    running_mean: Param, running_var: Param, mode: str,
                    momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Node:
        """Per-channel normalization over all (t, h, w) positions.

        Train mode uses biased batch statistics and updates the running
        state in place; eval mode normalizes with the running state.
        """
        if x.data.ndim != 4:
            raise ShapeError(f"batchnorm2d expects a (T,H,W,C) input, got {x.data.shape}")
        d = x.data.shape[3]
        for name, node in (("gamma", gamma), ("beta", beta)):
            if node.data.shape != (d,):
                raise ShapeError(
                    f"batchnorm2d: input has {d} channels but {name} has shape "
                    f"{node.data.shape}"
                )
        if mode == "train":
            n = x.data.shape[0] * x.data.shape[1] * x.data.shape[2]
            if n < 2:
                raise DegenerateStatsError(
                    "batchnorm2d train mode needs at least 2 sample positions, "
                    f"got T*H*W = {n}"
                )
            mu = x.data.mean(axis=(0, 1, 2))
            var = x.data.var(axis=(0, 1, 2))
            running_mean.value[...] = (1 - momentum) * running_mean.value + momentum * mu
            running_var.value[...] = (1 - momentum) * running_var.value + momentum * var
        elif mode == "eval":
            n = 0
            mu = running_mean.value
            var = running_var.value
        else:
            raise ConfigError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        y = gamma.data * xhat + beta.data

        def backward_fn(dy):
            self.accumulate(gamma, (dy * xhat).sum(axis=(0, 1, 2)))
            self.accumulate(beta, dy.sum(axis=(0, 1, 2)))
            dxhat = dy * gamma.data
            if mode == "train":
                m = float(n)
                dx = (inv_std / m) * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 1, 2))
                    - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
                )
            else:
                dx = dxhat * inv_std
            self.accumulate(x, dx)

        return self.apply(y, (x, gamma, beta), backward_fn, "batchnorm2d",
                          flops=8 * x.data.size)

    def gelu(self, x: Node) -> Node:
        """Tanh-approximation GELU: 0.5 x (1 + tanh(c (x + a x^3)))."""
        u = GELU_C * (x.data + GELU_A * x.data ** 3)
        th = np.tanh(u)
        y = 0.5 * x.data * (1.0 + th)

        def backward_fn(dy):
            du = GELU_C * (1.0 + 3.0 * GELU_A * x.data ** 2)
            self.accumulate(
                x, dy * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th ** 2) * du)
            )

        return self.apply(y, (x,), backward_fn, "gelu", flops=12 * x.data.size)

    def add(self, a: Node, b: Node) -> Node:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"add: shapes differ, {a.data.shape} vs {b.data.shape}")

        def backward_fn(dy):
            self.accumulate(a, dy)
            self.accumulate(b, dy)

        return self.apply(a.data + b.data, (a, b), backward_fn, "add",
                          flops=a.data.size)

    def reshape(self, x: Node, shape) -> Node:
        shape = tuple(shape)
        y = x.data.reshape(shape)

        def backward_fn(dy):
            self.accumulate(x, dy.reshape(x.data.shape))

        return self.apply(y, (x,), backward_fn, "reshape")

    def transpose(self, x: Node, axes) -> Node:
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        y = np.ascontiguousarray(x.data.transpose(axes))

        def backward_fn(dy):
            self.accumulate(x, dy.transpose(inv))

        return self.apply(y, (x,), backward_fn, "transpose")

    def concat_last(self, a: Node, b: Node) -> Node:
        if a.data.shape[:-1] != b.data.shape[:-1]:
            raise ShapeError(
                f"concat_last: leading shapes differ, {a.data.shape} vs {b.data.shape}"
            )
        split = a.data.shape[-1]

        def backward_fn(dy):
            self.accumulate(a, dy[..., :split])
            self.accumulate(b, dy[..., split:])

        return self.apply(np.concatenate([a.data, b.data], axis=-1),
                          (a, b), backward_fn, "concat_last")

    def mean_over(self, x: Node, axes) -> Node:
        axes = tuple(sorted(axes))
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]
        y = x.data.mean(axis=axes)

        def backward_fn(dy):
            dye = np.expand_dims(dy, axes)
            self.accumulate(x, np.broadcast_to(dye / count, x.data.shape))

        return self.apply(y, (x,), backward_fn, "mean_over", flops=x.data.size)

    # -- gradient sweep

    def backward(self, loss_grad, output: Node | None = None) -> None:
        """Reverse sweep seeding the output with loss_grad.

        Accumulates exact gradients into every node and into the ParamStore
        entries bound via param(). May be called once per recorded graph.
        """
        if not self.nodes:
            raise GraphStateError("backward called before any forward pass was recorded")
        if self._backward_done:
            raise GraphStateError("backward already run for this graph")
        out = output if output is not None else self.nodes[-1]
        loss_grad = np.asarray(loss_grad, dtype=out.data.dtype)
        if loss_grad.shape != out.data.shape:
            raise ShapeError(
                f"backward: loss_grad shape {loss_grad.shape} does not match "
                f"output shape {out.data.shape}"
            )
        self.accumulate(out, loss_grad)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)
        for node, param in self._param_nodes:
            if node.grad is not None:
                param.grad += node.grad
        self._backward_done = True

    @staticmethod
    def grad_of(node: Node) -> np.ndarray:
        return node.grad if node.grad is not None else np.zeros_like(node.data)


# ---------------------------------------------------------------------------
# Finite differences

def numeric_gradient(func, x, h=1e-5):
    """Central-difference gradient of a scalar function of one f64 array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = func(x)
        flat[i] = orig - h
        fm = func(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_rel_err(analytic, numeric):
    """||a - n||_2 / max(||a||_2, ||n||_2); 0 when both are exactly zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    num = float(np.linalg.norm((a - n).reshape(-1)))
    denom = max(float(np.linalg.norm(a.reshape(-1))),
                float(np.linalg.norm(n.reshape(-1))))
    if denom == 0.0:
        return 0.0
    return num / denom


# ---------------------------------------------------------------------------
# Binary tensor container
#
# Layout: magic "MOSST\0", u8 dtype tag (0 = f32, 1 = f64), u8 rank,
# rank little-endian u32 extents, then raw little-endian values.

TENSOR_MAGIC = b"MOSST\x00"
_TAG_FOR_DTYPE = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DTYPE_FOR_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(fh, arr) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR_DTYPE:
        raise ConfigError(f"tensor container supports f32/f64 only, got {arr.dtype}")
    if not 1 <= arr.ndim <= 6:
        raise ShapeError(f"tensor container supports rank 1-6, got shape {arr.shape}")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BB", _TAG_FOR_DTYPE[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor container magic: {magic!r}")
    tag, rank = struct.unpack("<BB", fh.read(2))
    if tag not in _DTYPE_FOR_TAG:
        raise ValueError(f"unknown dtype tag {tag}")
    if not 1 <= rank <= 6:
        raise ValueError(f"unsupported tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    dtype = _DTYPE_FOR_TAG[tag]
    count = 1
    for extent in shape:
        if extent < 1:
            raise ValueError(f"non-positive extent in shape {shape}")
        count *= extent
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ValueError("tensor container truncated")
    data = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return np.ascontiguousarray(data.astype(dtype.newbyteorder("=")))


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
