"""Correlation heatmaps: per-row top-n masking, value truncation, deterministic rendering."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np


def mask_matrix(values: np.ndarray, top_n: int | None = None, truncate: float | None = None) -> np.ndarray:
    """Keep the ``top_n`` largest off-diagonal cells of each row; masked cells become NaN.

    The diagonal is always masked. ``truncate`` clips kept values from above.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {values.shape}")
    n = values.shape[0]
    out = np.full_like(values, np.nan)
    for i in range(n):
        cols = np.array([j for j in range(n) if j != i], dtype=int)
        if cols.size == 0:
            continue
        row = values[i, cols]
        # stable: equal values keep column order
        ranked = cols[np.argsort(-row, kind="stable")]
        keep = ranked if top_n is None else ranked[: max(top_n, 0)]
        out[i, keep] = values[i, keep]
    if truncate is not None:
        out = np.where(np.isnan(out), np.nan, np.minimum(out, truncate))
    return out


def reorder(values: np.ndarray, names: Sequence[str], order: Sequence[int]) -> tuple[np.ndarray, list[str]]:
    order = np.asarray(order, dtype=int)
    return values[np.ix_(order, order)], [names[i] for i in order]


def render_heatmap(masked: np.ndarray, names: Sequence[str], path: str | Path, title: str = "") -> None:
    """Write SVG or PNG (chosen by suffix) with timestamps and random ids suppressed."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fmt = path.suffix.lstrip(".").lower()
    if fmt not in ("svg", "png"):
        raise ValueError(f"unsupported image format {fmt!r}; use .svg or .png")
    n = len(names)
    size = max(4.0, 0.25 * n + 2.0)
    with plt.rc_context({"svg.hashsalt": "relcorrel", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(size, size))
        data = np.ma.masked_invalid(masked)
        im = ax.imshow(data, cmap="Blues", interpolation="nearest")
        ax.set_xticks(range(n))
        ax.set_yticks(range(n))
        ax.set_xticklabels(names, rotation=90, fontsize=6)
        ax.set_yticklabels(names, fontsize=6)
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        metadata = {"Date": None} if fmt == "svg" else {"Software": None}
        fig.savefig(path, format=fmt, metadata=metadata)
        plt.close(fig)
