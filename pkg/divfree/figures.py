# figures.py
"""
Field maps and loss curves.

- generate_*_svg(...) render with matplotlib (Agg), save under the given directory
  and return (svg_bytes, file_path).
- write_pgm16 / read_pgm16 store a scalar map losslessly as a 16-bit binary
  portable graymap with a sidecar JSON holding the min/max used for scaling.
"""
import io
import json
import os
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

# Matplotlib without a display
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from divfree.common import DataIOError

_COMPONENT_LABELS = {(0, 0): "P11", (0, 1): "P12", (1, 0): "P21", (1, 1): "P22", (2, 2): "P33"}


def _fig_to_svg_bytes(fig: plt.Figure) -> bytes:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", bbox_inches="tight")
    plt.close(fig)
    return buf.getvalue().encode("utf-8")


def _ensure_dir(path: str):
    os.makedirs(path, exist_ok=True)


def _save(svg: bytes, save_dir: str, name: str) -> str:
    _ensure_dir(save_dir)
    path = os.path.join(save_dir, name)
    with open(path, "wb") as f:
        f.write(svg)
    return path


# ---------- SVG figures (save + return bytes) ----------

def generate_map_svg(field: np.ndarray, title: str, save_dir: str, name: str,
                     cmap: str = "viridis", unit: str = "") -> Tuple[bytes, str]:
    """
    Single scalar map on the grid, x1 vertical like the array layout.
    Saved as <save_dir>/<name>. Returns (svg_bytes, file_path).
    """
    fig, ax = plt.subplots(figsize=(4, 3.4))
    im = ax.imshow(np.asarray(field), origin="lower", cmap=cmap, interpolation="nearest")
    cb = fig.colorbar(im, ax=ax)
    if unit:
        cb.set_label(unit)
    ax.set_title(title)
    ax.set_xlabel("x2 (pixel)")
    ax.set_ylabel("x1 (pixel)")
    svg = _fig_to_svg_bytes(fig)
    return svg, _save(svg, save_dir, name)


def generate_stress_svg(P: np.ndarray, title: str, save_dir: str, name: str,
                        unit: str = "") -> Tuple[bytes, str]:
    """The five active plane-stress components side by side, each with its own scale."""
    fig, axes = plt.subplots(1, len(_COMPONENT_LABELS), figsize=(3.2 * len(_COMPONENT_LABELS), 3))
    for ax, ((i, j), label) in zip(axes, _COMPONENT_LABELS.items()):
        im = ax.imshow(P[..., i, j], origin="lower", cmap="viridis", interpolation="nearest")
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title(label)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(title + (f" ({unit})" if unit else ""))
    svg = _fig_to_svg_bytes(fig)
    return svg, _save(svg, save_dir, name)


def generate_loss_svg(history: Sequence[Dict[str, float]], title: str, save_dir: str,
                      name: str = "loss.svg") -> Tuple[bytes, str]:
    """L_dat and L_div per epoch (train solid, test dashed) on a log axis."""
    fig, ax = plt.subplots(figsize=(5, 3))
    if history:
        epochs = [row["epoch"] for row in history]
        for key, style in (("train_L_dat", "-"), ("test_L_dat", "--")):
            ax.semilogy(epochs, [row[key] for row in history], style, color="C0", label=key)
        for key, style in (("train_L_div", "-"), ("test_L_div", "--")):
            ax.semilogy(epochs, [row[key] for row in history], style, color="C1", label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.grid(True, linestyle=":", linewidth=0.6)
        ax.legend(fontsize=7)
        ax.set_title(title)
    else:
        ax.set_title(f"{title} (no data)")
        ax.axis("off")
    svg = _fig_to_svg_bytes(fig)
    return svg, _save(svg, save_dir, name)


def generate_tradeoff_svg(rows: List[Dict[str, float]], save_dir: str,
                          name: str = "tradeoff.svg") -> Tuple[bytes, str]:
    """Test L_dat and L_div of the pi runs against c_div, pg/pe as reference lines."""
    fig, ax = plt.subplots(figsize=(5, 3))
    pi = sorted((r for r in rows if r["variant"] == "pi"), key=lambda r: r["c_div"])
    if pi:
        c = [r["c_div"] for r in pi]
        ax.loglog(c, [r["test_L_dat"] for r in pi], "o-", label="pi test L_dat")
        ax.loglog(c, [r["test_L_div"] for r in pi], "s-", label="pi test L_div")
    for r in rows:
        if r["variant"] in ("pg", "pe"):
            ax.axhline(r["test_L_div"], linestyle="--", linewidth=0.8,
                       color="C2" if r["variant"] == "pg" else "C3", label=f"{r['variant']} test L_div")
    ax.set_xlabel("c_div")
    ax.grid(True, which="both", linestyle=":", linewidth=0.6)
    ax.legend(fontsize=7)
    svg = _fig_to_svg_bytes(fig)
    return svg, _save(svg, save_dir, name)


# ---------- Lossless maps ----------

def write_pgm16(field: np.ndarray, path) -> Tuple[Path, Path]:
    """
    Binary 16-bit PGM (P5, maxval 65535, big endian) plus <path>.json with min/max.
    Rows of the image are grid rows (axis 0).
    """
    field = np.asarray(field, dtype=float)
    if field.ndim != 2:
        raise DataIOError(f"PGM export needs a 2-D map, got shape {field.shape}")
    lo, hi = float(field.min()), float(field.max())
    span = hi - lo
    scaled = np.zeros(field.shape) if span == 0.0 else (field - lo) / span
    pixels = np.rint(scaled * 65535.0).astype(">u2")
    path = Path(path)
    header = f"P5\n{field.shape[1]} {field.shape[0]}\n65535\n".encode("ascii")
    sidecar = path.with_suffix(path.suffix + ".json")
    try:
        path.write_bytes(header + pixels.tobytes())
        sidecar.write_text(json.dumps({"min": lo, "max": hi, "shape": list(field.shape)},
                                      sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {str(e)}") from e
    return path, sidecar


def read_pgm16(path) -> Tuple[np.ndarray, Optional[Dict[str, float]]]:
    """Inverse of write_pgm16; values are rescaled when the sidecar exists."""
    path = Path(path)
    data = path.read_bytes()
    header = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if header is None:
        raise DataIOError(f"{path} is not a binary PGM")
    width, height, maxval = (int(g) for g in header.groups())
    start = header.end()
    raw = np.frombuffer(data[start:start + width * height * 2], dtype=">u2").reshape(height, width)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.is_file():
        return raw.astype(float) / maxval, None
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    return raw.astype(float) / maxval * (meta["max"] - meta["min"]) + meta["min"], meta
