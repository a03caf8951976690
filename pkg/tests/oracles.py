"""Independent test oracles (kept free of the production code paths)."""

from __future__ import annotations

import numpy as np


def neighbor_offsets(connectivity: int) -> np.ndarray:
    offs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                order = abs(dx) + abs(dy) + abs(dz)
                if connectivity == 6 and order > 1:
                    continue
                if connectivity == 18 and order > 2:
                    continue
                offs.append((dx, dy, dz))
    return np.asarray(offs, dtype=np.int64)


def flood_fill_labels(mask: np.ndarray, connectivity: int) -> np.ndarray:
    """Breadth-first flood fill with frontier index arrays.

    Works on a zero-padded copy so neighbor indexing needs no bounds checks.
    Labels are assigned in scan-order discovery, then canonicalized by
    (-size, first scan index) to match the contract under test.
    """
    fg = np.asarray(mask) != 0
    padded = np.pad(fg, 1)
    pny, pnz = padded.shape[1], padded.shape[2]
    offs = neighbor_offsets(connectivity)
    flat_offs = (offs[:, 0] * pny + offs[:, 1]) * pnz + offs[:, 2]

    remaining = padded.ravel().copy()
    labels_flat = np.zeros(padded.size, dtype=np.int64)
    next_label = 0
    for seed in np.flatnonzero(padded.ravel()):
        if not remaining[seed]:
            continue
        next_label += 1
        frontier = np.array([seed], dtype=np.int64)
        remaining[seed] = False
        labels_flat[seed] = next_label
        while frontier.size:
            cand = (frontier[:, None] + flat_offs[None, :]).ravel()
            cand = np.unique(cand)
            cand = cand[remaining[cand]]
            remaining[cand] = False
            labels_flat[cand] = next_label
            frontier = cand

    labels = labels_flat.reshape(padded.shape)[1:-1, 1:-1, 1:-1]
    # canonical relabel: size-descending, ties by first scan index
    if next_label == 0:
        return labels
    counts = np.bincount(labels.ravel(), minlength=next_label + 1)[1:]
    order = np.lexsort((np.arange(1, next_label + 1), -counts))
    remap = np.zeros(next_label + 1, dtype=np.int64)
    for new_id, old in enumerate(order + 1, start=1):
        remap[old] = new_id
    return remap[labels]


def mask_scores_pixel_loop(pred: np.ndarray, gt: np.ndarray):
    """Per-pixel python loop; returns (dice, iou, tp, fp, fn)."""
    tp = fp = fn = 0
    for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        p = bool(p)
        g = bool(g)
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif g and not p:
            fn += 1
    if tp + fp + fn == 0:
        return 1.0, 1.0, 0, 0, 0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn), tp, fp, fn


def sphere_volume(radius: float) -> float:
    return 4.0 / 3.0 * np.pi * radius**3


def sphere_area(radius: float) -> float:
    return 4.0 * np.pi * radius**2
