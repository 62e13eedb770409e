"""Routing-map and expert-kernel exports (CSV and 8-bit PGM)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .layer import SMoELayer


def routing_csv(selected: np.ndarray) -> str:
    """``selected`` is [E, H, W]; one CSV row per grid row.

    With E=1 each cell is the expert index, otherwise the E indices joined by '|'.
    """
    sel = np.asarray(selected)
    if sel.ndim == 2:
        sel = sel[None]
    rows = []
    for i in range(sel.shape[1]):
        cells = ("|".join(str(int(e)) for e in sel[:, i, j]) for j in range(sel.shape[2]))
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"


def parse_routing_csv(text: str) -> np.ndarray:
    """Inverse of :func:`routing_csv`; returns [E, H, W]."""
    rows = [r for r in text.splitlines() if r.strip()]
    cells = [[[int(e) for e in c.split("|")] for c in r.split(",")] for r in rows]
    return np.asarray(cells, dtype=np.int64).transpose(2, 0, 1)


def routing_pgm(winner: np.ndarray, num_experts: int) -> bytes:
    """Binary 8-bit PGM of the winning expert per cell, scaled to 0..255."""
    win = np.asarray(winner)
    if win.ndim != 2:
        raise ValueError("PGM export needs an [H, W] map")
    scale = 255.0 / max(num_experts - 1, 1)
    pix = np.rint(win * scale).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def read_pgm(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def export_routing(layer: SMoELayer, path) -> Path:
    path = Path(path)
    sel = layer.route().selected
    if path.suffix == ".csv":
        path.write_text(routing_csv(sel))
    elif path.suffix == ".pgm":
        path.write_bytes(routing_pgm(sel[0], layer.num_experts))
    else:
        raise ValueError(f"routing export must end in .csv or .pgm, got {path.name!r}")
    return path


def kernel_csv(kernel: np.ndarray) -> str:
    """A [k, k] kernel as k CSV rows, values written with full float32 precision."""
    return "\n".join(",".join(repr(float(v)) for v in row) for row in np.asarray(kernel)) + "\n"


def export_experts(layer: SMoELayer, out_dir) -> list[Path]:
    """One CSV per (expert, output channel, input channel) kernel."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    k = layer.kernels
    for e in range(k.shape[0]):
        for f in range(k.shape[1]):
            for c in range(k.shape[2]):
                name = f"expert{e}.csv" if k.shape[1] == k.shape[2] == 1 else f"expert{e}_f{f}_c{c}.csv"
                p = out / name
                p.write_text(kernel_csv(k[e, f, c]))
                paths.append(p)
    return paths


def best_assignment_agreement(winner: np.ndarray, grid: np.ndarray) -> tuple[float, dict]:
    """Fraction of cells on which ``winner`` matches ``grid`` under the best
    one-to-one relabelling of experts to region types (Hungarian matching).

    Returns ``(fraction, {region type: expert})``.
    """
    winner = np.asarray(winner)
    grid = np.asarray(grid)
    if winner.shape != grid.shape:
        raise ValueError(f"map shapes differ: {winner.shape} vs {grid.shape}")
    n_t, n_e = int(grid.max()) + 1, int(winner.max()) + 1
    conf = np.zeros((n_t, n_e), dtype=np.int64)
    np.add.at(conf, (grid.ravel(), winner.ravel()), 1)
    rows, cols = linear_sum_assignment(-conf)
    return conf[rows, cols].sum() / grid.size, {int(r): int(c) for r, c in zip(rows, cols)}
