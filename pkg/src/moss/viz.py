"""Heatmap rendering of similarity volumes and feature norms as P6 pixmaps.

A query's similarity maps are drawn by pasting its (U, V) window patch, one
canvas per temporal offset, at the query's spatial location (clipped at the
borders). Signed data uses a fixed blue-white-red table, norms a black-white
ramp; rendering depends only on the values, the min-max normalization, and
the colormap, so files are byte-identical across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .module import OrderOutputs


@dataclass(frozen=True)
class QuerySelector:
    """Feature-grid coordinates of a query plus the order to inspect."""

    t: int
    h: int
    w: int
    order: int = 1


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (H, W)
    kind: str = "signed"  # "signed" | "norm"


def _build_signed_colormap() -> np.ndarray:
    table = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        x = i / 255.0
        if x < 0.5:
            f = x / 0.5
            rgb = (round(255 * f), round(255 * f), 255)
        else:
            f = (x - 0.5) / 0.5
            rgb = (255, round(255 * (1 - f)), round(255 * (1 - f)))
        table[i] = rgb
    return table


SIGNED_COLORMAP = _build_signed_colormap()
NORM_COLORMAP = np.stack([np.arange(256, dtype=np.uint8)] * 3, axis=1)


def render_heatmap(heatmap: Heatmap) -> np.ndarray:
    """Min-max normalize to colormap indices; constant maps go to the
    midpoint (signed) or the zero entry (norm). Returns (H, W, 3) uint8."""
    values = np.asarray(heatmap.values, dtype=np.float64)
    vmin = float(values.min())
    vmax = float(values.max())
    if vmax > vmin:
        idx = np.rint(255.0 * (values - vmin) / (vmax - vmin)).astype(np.int64)
        idx = np.clip(idx, 0, 255)
    else:
        idx = np.full(values.shape, 128 if heatmap.kind == "signed" else 0,
                      dtype=np.int64)
    table = SIGNED_COLORMAP if heatmap.kind == "signed" else NORM_COLORMAP
    return table[idx]


def write_ppm(heatmap: Heatmap, path: str) -> None:
    """Binary P6 pixmap: "P6\\n{W} {H}\\n255\\n" then RGB bytes row-major."""
    rgb = render_heatmap(heatmap)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def stss_query_maps(outputs: OrderOutputs, q: QuerySelector) -> list[Heatmap]:
    """One heatmap per temporal offset for the chosen query and order.

    Each (U, V) patch is pasted on an all-zero H x W canvas centered at the
    query position; portions falling outside the canvas are clipped.
    """
    if q.order not in outputs.s:
        raise ValueError(f"order {q.order} not present in outputs "
                         f"(have {sorted(outputs.s)})")
    s = outputs.s[q.order].data
    t_n, h_n, w_n, l_n, u_n, v_n = s.shape
    if not (0 <= q.t < t_n and 0 <= q.h < h_n and 0 <= q.w < w_n):
        raise ValueError(f"query {(q.t, q.h, q.w)} out of range for grid "
                         f"{(t_n, h_n, w_n)}")
    hu, hv = u_n // 2, v_n // 2
    maps = []
    for li in range(l_n):
        canvas = np.zeros((h_n, w_n), dtype=s.dtype)
        patch = s[q.t, q.h, q.w, li]
        row_lo = max(0, q.h - hu)
        row_hi = min(h_n, q.h + hu + 1)
        col_lo = max(0, q.w - hv)
        col_hi = min(w_n, q.w + hv + 1)
        canvas[row_lo:row_hi, col_lo:col_hi] = patch[
            row_lo - (q.h - hu):row_hi - (q.h - hu),
            col_lo - (q.w - hv):col_hi - (q.w - hv),
        ]
        maps.append(Heatmap(canvas, "signed"))
    return maps


def l2norm_map(m: np.ndarray, t: int) -> Heatmap:
    """Per-position feature L2 norm of frame t: values[h, w] = ||M[t,h,w,:]||."""
    m = np.asarray(m)
    if not 0 <= t < m.shape[0]:
        raise ValueError(f"frame {t} out of range for {m.shape[0]} frames")
    return Heatmap(np.sqrt((m[t].astype(np.float64) ** 2).sum(axis=-1)), "norm")


def query_map_name(prefix: str, order: int, q: QuerySelector, offset: int) -> str:
    return f"{prefix}_order{order}_q{q.t}-{q.h}-{q.w}_l{offset}.ppm"


def norm_map_name(prefix: str, order: int, t: int) -> str:
    return f"{prefix}_norm_order{order}_t{t}.ppm"
