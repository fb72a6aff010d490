"""Space-time self-similarity: the 6D local correlation volume.

For feature maps F of shape (T, H, W, C) and an odd local window (L, U, V),
the similarity tensor S has shape (T, H, W, L, U, V) with

    S[t,h,w,l,u,v] = cos(F[t,h,w], F[t+l, h+u, w+v])

where the offsets (l, u, v) are centered at zero. Out-of-bounds neighbors
contribute exactly 0, vectors with norm <= norm_eps are treated as
zero-similarity partners, the zero offset is exact self-similarity
(1 where the norm exceeds norm_eps, else 0), and all values are clamped
to [-1, 1].

Three routes are provided: a blocked kernel (stss_forward) that
precomputes per-position inverse norms once and splits the query grid
across workers, its analytic adjoint (stss_backward), and a literal
six-nested-loop reference (stss_oracle) used to verify the kernel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .tensor import ConfigError, Node, OpGraph, ShapeError, read_tensor, write_tensor


@dataclass(frozen=True)
class WindowSpec:
    """Local spatio-temporal window extents; all odd so offset 0 is included."""

    L: int
    U: int
    V: int

    def __post_init__(self):
        for name, extent in (("L", self.L), ("U", self.U), ("V", self.V)):
            if extent < 1 or extent % 2 == 0:
                raise ConfigError(
                    f"window extent {name}={extent} must be odd and >= 1"
                )

    @property
    def half(self) -> tuple[int, int, int]:
        return self.L // 2, self.U // 2, self.V // 2

    def as_tuple(self) -> tuple[int, int, int]:
        return self.L, self.U, self.V


@dataclass(frozen=True)
class SimilarityPolicy:
    """Cosine similarity with a hard zero-norm cutoff.

    Vectors with L2 norm <= norm_eps yield similarity 0 with any partner
    and pass zero gradient. Self-similarity of a non-degenerate vector is
    exactly 1.
    """

    norm_eps: float = 1e-12


DEFAULT_WINDOW = WindowSpec(5, 9, 9)
DEFAULT_POLICY = SimilarityPolicy()


def _check_feature_map(f_map) -> np.ndarray:
    f_map = np.ascontiguousarray(f_map)
    if f_map.ndim != 4:
        raise ShapeError(f"feature map must be (T,H,W,C), got shape {f_map.shape}")
    return f_map


def _normalize(f_map: np.ndarray, eps: float):
    """Unit-normalized features, per-position inverse norms, nonzero mask.

    Normalization runs in f64 regardless of the input dtype so that
    self-similarities round to exactly 1 after the cast back, and so the
    blocked route tracks the pairwise-cosine reference tightly.
    """
    f64 = f_map.astype(np.float64)
    norms = np.sqrt((f64 * f64).sum(axis=-1))
    nonzero = norms > eps
    inv = np.zeros_like(norms)
    inv[nonzero] = 1.0 / norms[nonzero]
    fhat = f64 * inv[..., None]
    return (np.ascontiguousarray(fhat), np.ascontiguousarray(inv),
            np.ascontiguousarray(nonzero))


@njit(cache=True, parallel=True)
def _forward_kernel(fhat, nonzero, hl, hu, hv, out):
    t_n, h_n, w_n, c_n = fhat.shape
    for idx in prange(t_n * h_n * w_n):
        t = idx // (h_n * w_n)
        h = (idx // w_n) % h_n
        w = idx % w_n
        if not nonzero[t, h, w]:
            continue
        out[t, h, w, hl, hu, hv] = 1.0
        for l in range(-hl, hl + 1):
            tn = t + l
            if tn < 0 or tn >= t_n:
                continue
            for u in range(-hu, hu + 1):
                hn = h + u
                if hn < 0 or hn >= h_n:
                    continue
                for v in range(-hv, hv + 1):
                    if l == 0 and u == 0 and v == 0:
                        continue
                    wn = w + v
                    if wn < 0 or wn >= w_n:
                        continue
                    if not nonzero[tn, hn, wn]:
                        continue
                    s = 0.0
                    for c in range(c_n):
                        s += fhat[t, h, w, c] * fhat[tn, hn, wn, c]
                    if s > 1.0:
                        s = 1.0
                    elif s < -1.0:
                        s = -1.0
                    out[t, h, w, l + hl, u + hu, v + hv] = s


@njit(cache=True, parallel=True)
def _backward_kernel(fhat, inv, nonzero, s, ds, hl, hu, hv, out):
    # Pure gather: position p collects its query-side terms and, for each
    # offset, the neighbor-side term of the query at p - offset. Every
    # worker writes only its own (t, h, w) row, so the reduction order per
    # output element is fixed and results are bitwise reproducible.
    t_n, h_n, w_n, c_n = fhat.shape
    for idx in prange(t_n * h_n * w_n):
        t = idx // (h_n * w_n)
        h = (idx // w_n) % h_n
        w = idx % w_n
        if not nonzero[t, h, w]:
            continue
        inv_p = inv[t, h, w]
        acc = np.zeros(c_n, dtype=np.float64)
        for l in range(-hl, hl + 1):
            for u in range(-hu, hu + 1):
                for v in range(-hv, hv + 1):
                    if l == 0 and u == 0 and v == 0:
                        continue
                    li = l + hl
                    ui = u + hu
                    vi = v + hv
                    tn = t + l
                    hn = h + u
                    wn = w + v
                    if (0 <= tn < t_n and 0 <= hn < h_n and 0 <= wn < w_n
                            and nonzero[tn, hn, wn]):
                        g = ds[t, h, w, li, ui, vi]
                        if g != 0.0:
                            sv = s[t, h, w, li, ui, vi]
                            for c in range(c_n):
                                acc[c] += g * inv_p * (
                                    fhat[tn, hn, wn, c] - sv * fhat[t, h, w, c]
                                )
                    tq = t - l
                    hq = h - u
                    wq = w - v
                    if (0 <= tq < t_n and 0 <= hq < h_n and 0 <= wq < w_n
                            and nonzero[tq, hq, wq]):
                        g = ds[tq, hq, wq, li, ui, vi]
                        if g != 0.0:
                            sv = s[tq, hq, wq, li, ui, vi]
                            for c in range(c_n):
                                acc[c] += g * inv_p * (
                                    fhat[tq, hq, wq, c] - sv * fhat[t, h, w, c]
                                )
        for c in range(c_n):
            out[t, h, w, c] = acc[c]


def stss_forward(f_map, window: WindowSpec = DEFAULT_WINDOW,
                 policy: SimilarityPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Blocked similarity-volume kernel; output shape (T,H,W,L,U,V)."""
    f_map = _check_feature_map(f_map)
    hl, hu, hv = window.half
    fhat, _, nonzero = _normalize(f_map, policy.norm_eps)
    t, h, w, _ = f_map.shape
    out = np.zeros((t, h, w, window.L, window.U, window.V), dtype=f_map.dtype)
    _forward_kernel(fhat, nonzero, hl, hu, hv, out)
    return out


def stss_backward(f_map, window: WindowSpec, policy: SimilarityPolicy,
                  d_s, s: np.ndarray | None = None) -> np.ndarray:
    """Gradient of sum(d_s * S) with respect to the feature map.

    Uses the cosine derivative d cos(a,b)/da = (b_hat - cos * a_hat)/||a||;
    each position receives contributions both as query and as neighbor.
    Entries clamped to 0 by the norm or boundary rule pass zero gradient.
    """
    f_map = _check_feature_map(f_map)
    d_s = np.ascontiguousarray(d_s)
    t, h, w, _ = f_map.shape
    expect = (t, h, w, window.L, window.U, window.V)
    if d_s.shape != expect:
        raise ShapeError(
            f"stss_backward: d_s shape {d_s.shape} does not match the forward "
            f"output shape {expect}"
        )
    if s is None:
        s = stss_forward(f_map, window, policy)
    hl, hu, hv = window.half
    fhat, inv, nonzero = _normalize(f_map, policy.norm_eps)
    out = np.zeros_like(f_map)
    _backward_kernel(fhat, inv, nonzero,
                     np.ascontiguousarray(s), d_s, hl, hu, hv, out)
    return out


def stss_oracle(f_map, window: WindowSpec = DEFAULT_WINDOW,
                policy: SimilarityPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Literal six-nested-loop reference, no blocking or norm reuse.

    Intended for small instances (T*H*W*L*U*V up to ~1e7).
    """
    f_map = _check_feature_map(f_map)
    hl, hu, hv = window.half
    t_n, h_n, w_n, _ = f_map.shape
    eps = policy.norm_eps
    out = np.zeros((t_n, h_n, w_n, window.L, window.U, window.V), dtype=f_map.dtype)
    for t in range(t_n):
        for h in range(h_n):
            for w in range(w_n):
                a = f_map[t, h, w]
                na = float(np.sqrt(np.dot(a, a)))
                for l in range(-hl, hl + 1):
                    for u in range(-hu, hu + 1):
                        for v in range(-hv, hv + 1):
                            if l == 0 and u == 0 and v == 0:
                                out[t, h, w, hl, hu, hv] = 1.0 if na > eps else 0.0
                                continue
                            tn, hn, wn = t + l, h + u, w + v
                            if not (0 <= tn < t_n and 0 <= hn < h_n and 0 <= wn < w_n):
                                continue
                            b = f_map[tn, hn, wn]
                            nb = float(np.sqrt(np.dot(b, b)))
                            if na <= eps or nb <= eps:
                                continue
                            s = float(np.dot(a, b)) / (na * nb)
                            out[t, h, w, l + hl, u + hu, v + hv] = min(1.0, max(-1.0, s))
    return out


def stss_node(graph: OpGraph, x: Node, window: WindowSpec = DEFAULT_WINDOW,
              policy: SimilarityPolicy = DEFAULT_POLICY) -> Node:
    """Differentiable similarity volume as an operation-graph node."""
    s = stss_forward(x.data, window, policy)

    def backward_fn(ds):
        graph.accumulate(x, stss_backward(x.data, window, policy, ds, s=s))

    c = x.data.shape[-1]
    return graph.apply(s, (x,), backward_fn, "stss", flops=2 * c * s.size)


# ---------------------------------------------------------------------------
# Serialization: tensor container plus a "WNDW" extension holding (L, U, V).

WINDOW_TAG = b"WNDW"


def write_stss(fh, s, window: WindowSpec) -> None:
    write_tensor(fh, s)
    fh.write(WINDOW_TAG)
    fh.write(struct.pack("<3I", *window.as_tuple()))


def read_stss(fh) -> tuple[np.ndarray, WindowSpec]:
    s = read_tensor(fh)
    tag = fh.read(4)
    if tag != WINDOW_TAG:
        raise ValueError(f"bad window extension tag: {tag!r}")
    l, u, v = struct.unpack("<3I", fh.read(12))
    return s, WindowSpec(l, u, v)


def save_stss(path, s, window: WindowSpec) -> None:
    with open(path, "wb") as fh:
        write_stss(fh, s, window)


def load_stss(path) -> tuple[np.ndarray, WindowSpec]:
    with open(path, "rb") as fh:
        return read_stss(fh)
