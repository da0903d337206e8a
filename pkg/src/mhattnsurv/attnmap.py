"""Whole-bag attention maps via repeated grouped sampling.

Attention weights are only defined relative to the patches that share a
softmax, so scoring a big bag means choosing a grouping. Here every pass
shuffles all patch indices and cuts them into groups of ``group_size``
(the final short group keeps its natural size); each group runs one
forward pass and contributes one weight per patch per head. After
``passes`` rounds every patch has exactly ``passes`` weights; their mean
times ``group_size`` is the exported rescaled weight, so a patch drawing
average attention in a full group exports exactly 1.0.
"""

from __future__ import annotations

import numpy as np

from .data import fmt_float, write_pgm
from .errors import DomainError, FormatError, UsageError
from .model import EmbeddingBag, ModelParams, mh_forward
from .numerics import RngStream


def attention_map_export(
    params: ModelParams,
    bag: EmbeddingBag,
    stream: RngStream,
    passes: int = 10,
    group_size: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Rescaled attention weights, shape (heads, n), plus per-patch sample
    counts (all equal to ``passes`` by construction)."""
    if passes < 1:
        raise DomainError(f"passes must be >= 1, got {passes}")
    if group_size < 1:
        raise DomainError(f"group size must be >= 1, got {group_size}")
    n = bag.n
    totals = np.zeros((params.heads, n))
    counts = np.zeros(n, dtype=np.int64)
    for p in range(passes):
        perm = stream.child(p).generator().permutation(n)
        for start in range(0, n, group_size):
            idx = perm[start : start + group_size]
            out = mh_forward(EmbeddingBag(bag.patient_id, bag.X[idx]), params)
            totals[:, idx] += out.attn
            counts[idx] += 1
    weights = totals / passes * group_size
    return weights, counts


def load_coords_csv(path) -> dict[int, tuple[int, int]]:
    """Patch grid coordinates from a 'patch,row,col' CSV."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "patch,row,col":
        raise FormatError(f"{path}: coordinate CSV must start with header 'patch,row,col'")
    coords: dict[int, tuple[int, int]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            patch, row, col = (int(v) for v in parts)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}")
        if row < 0 or col < 0:
            raise FormatError(f"{path}:{lineno}: grid coordinates must be >= 0")
        if patch in coords:
            raise FormatError(f"{path}:{lineno}: duplicate patch index {patch}")
        coords[patch] = (row, col)
    return coords


def attnmap_csv(weights: np.ndarray, coords: dict[int, tuple[int, int]] | None = None) -> str:
    """One row per (patch, head): patch index, grid row/col (blank without
    coordinates), head, rescaled weight."""
    h, n = weights.shape
    lines = ["patch,row,col,head,weight"]
    for patch in range(n):
        if coords is not None and patch in coords:
            row, col = coords[patch]
            rc = f"{row},{col}"
        else:
            rc = ","
        for head in range(h):
            lines.append(f"{patch},{rc},{head + 1},{fmt_float(weights[head, patch])}")
    return "\n".join(lines) + "\n"


def weights_to_grid(head_weights: np.ndarray, coords: dict[int, tuple[int, int]]) -> np.ndarray:
    """Arrange one head's patch weights on the slide grid; empty cells are 0."""
    if not coords:
        raise UsageError("grid rendering requires patch coordinates")
    rows = max(r for r, _ in coords.values()) + 1
    cols = max(c for _, c in coords.values()) + 1
    grid = np.zeros((rows, cols))
    for patch, (r, c) in coords.items():
        if 0 <= patch < head_weights.shape[0]:
            grid[r, c] = head_weights[patch]
    return grid


def grid_to_gray(grid: np.ndarray) -> np.ndarray:
    """Map rescaled weights linearly from [0, 2] onto gray [0, 255],
    saturating above 2 (the hot end of the reference color scale)."""
    clipped = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 2.0)
    return np.round(clipped / 2.0 * 255.0).astype(np.uint8)


def render_head_pgm(head_weights: np.ndarray, coords, path) -> None:
    write_pgm(path, grid_to_gray(weights_to_grid(head_weights, coords)))
