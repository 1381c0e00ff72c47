"""CSV matrices, SVG heatmaps and run manifests.

CSV values are written with ``repr(float)``, which always uses a dot decimal
separator and round-trips exactly. Heatmaps are rendered with matplotlib's SVG
backend directly (no pyplot state) with fixed metadata and hash salt, so the
same matrix always produces the same bytes. Every cell rectangle carries a
``gid`` of the form ``cell-<row>-<col>``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from . import __version__
from .errors import DataError, ShapeError

CELL_GID = "cell-{row}-{col}"
_SVG_RC = {"svg.hashsalt": "biomeshift", "svg.fonttype": "none", "font.size": 8}


def _check(matrix, rows: Sequence[str], cols: Sequence[str]) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"heatmap needs a 2-D matrix, got shape {m.shape}")
    if m.shape != (len(rows), len(cols)):
        raise ShapeError(f"matrix shape {m.shape} does not match {len(rows)} row and {len(cols)} column names")
    return m


def write_matrix_csv(matrix, rows: Sequence[str], cols: Sequence[str], path) -> Path:
    m = _check(matrix, rows, cols)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(cols))
    for name, row in zip(rows, m):
        w.writerow([name] + [repr(float(v)) for v in row])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_matrix_csv(path):
    """Inverse of :func:`write_matrix_csv`: ``(matrix, row_names, col_names)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        table = list(csv.reader(fh))
    if not table or len(table) < 2:
        raise DataError(f"{path}: expected a header and at least one row")
    cols = table[0][1:]
    rows, values = [], []
    for i, rec in enumerate(table[1:], start=2):
        if len(rec) != len(cols) + 1:
            raise DataError(f"{path}:{i}: expected {len(cols) + 1} fields, got {len(rec)}")
        rows.append(rec[0])
        try:
            values.append([float(v) for v in rec[1:]])
        except ValueError as exc:
            raise DataError(f"{path}:{i}: {exc}") from None
    return np.array(values, dtype=np.float64), rows, cols


def render_heatmap_svg(matrix, rows: Sequence[str], cols: Sequence[str], path, title: str = "",
                       cmap: str = "viridis") -> Path:
    m = _check(matrix, rows, cols)
    finite = m[np.isfinite(m)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    norm = matplotlib.colors.Normalize(vmin=lo, vmax=hi if hi > lo else lo + 1.0)
    ramp = matplotlib.colormaps[cmap]
    nr, nc = m.shape
    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(1.2 + 0.55 * nc, 1.2 + 0.45 * nr))
        FigureCanvasSVG(fig)
        ax = fig.add_subplot(1, 1, 1)
        for i in range(nr):
            for j in range(nc):
                v = m[i, j]
                color = ramp(norm(v)) if np.isfinite(v) else (0.8, 0.8, 0.8, 1.0)
                ax.add_patch(Rectangle((j, i), 1, 1, facecolor=color, edgecolor="white", linewidth=0.5,
                                       gid=CELL_GID.format(row=i, col=j)))
                text_color = "white" if np.isfinite(v) and norm(v) < 0.5 else "black"
                ax.text(j + 0.5, i + 0.5, f"{v:.3f}", ha="center", va="center", color=text_color,
                        fontsize=6)
        if finite.size:
            imin = np.unravel_index(np.nanargmin(np.where(np.isfinite(m), m, np.inf)), m.shape)
            imax = np.unravel_index(np.nanargmax(np.where(np.isfinite(m), m, -np.inf)), m.shape)
            for (i, j), tag, col in ((imin, "min", "red"), (imax, "max", "black")):
                ax.add_patch(Rectangle((j, i), 1, 1, fill=False, edgecolor=col, linewidth=1.5, gid=f"mark-{tag}"))
            caption = (f"min {lo:.3f} ({rows[imin[0]]} -> {cols[imin[1]]})   "
                       f"max {hi:.3f} ({rows[imax[0]]} -> {cols[imax[1]]})")
        else:
            caption = "no finite values"
        ax.set_xlim(0, nc)
        ax.set_ylim(nr, 0)
        ax.set_xticks(np.arange(nc) + 0.5, labels=list(cols), rotation=90)
        ax.set_yticks(np.arange(nr) + 0.5, labels=list(rows))
        ax.set_aspect("equal")
        ax.set_xlabel(caption)
        if title:
            ax.set_title(title)
        sm = matplotlib.cm.ScalarMappable(norm=norm, cmap=ramp)
        fig.colorbar(sm, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    return path


def count_svg_cells(path) -> int:
    """Number of heatmap cell groups in an SVG written by :func:`render_heatmap_svg`."""
    import xml.etree.ElementTree as ET

    root = ET.parse(path).getroot()
    return sum(1 for el in root.iter() if (el.get("id") or "").startswith("cell-"))


def emit_heatmap(matrix, rows: Sequence[str], cols: Sequence[str], stem, title: str = "") -> tuple:
    """Write ``<stem>.csv`` and ``<stem>.svg``; returns both paths."""
    stem = Path(stem)
    csv_path = write_matrix_csv(matrix, rows, cols, stem.with_suffix(".csv"))
    svg_path = render_heatmap_svg(matrix, rows, cols, stem.with_suffix(".svg"), title or stem.name)
    return csv_path, svg_path


# ------------------------------------------------------------------ manifests

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    import scipy

    return {
        "biomeshift": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
    }


def write_manifest(path, command: str, config: Mapping, seed: int, inputs: Iterable = (),
                   outputs: Iterable = (), extra: Optional[Mapping] = None) -> Path:
    """JSON manifest listing the resolved config, seed, versions, input hashes and outputs.

    Paths are stored as given (relative paths stay relative) so reruns in a
    different directory produce the same manifest.
    """
    manifest = {
        "command": command,
        "seed": int(seed),
        "config": dict(config),
        "versions": versions(),
        "inputs": {str(p): file_sha256(p) for p in sorted(map(str, inputs))},
        "outputs": sorted(str(p) for p in outputs),
    }
    if extra:
        manifest["extra"] = dict(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
