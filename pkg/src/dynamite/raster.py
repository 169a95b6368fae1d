"""Exact binary-raster algorithms: connected components, Euclidean distance
transform, error regions, simulated click placement.

Conventions: 8-connectivity for components; the image border counts as
background for the distance transform (RITM-lineage behavior).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Component:
    """One 8-connected region of a binary mask."""

    area: int
    seed: tuple  # smallest (row, col) pixel
    rows: np.ndarray
    cols: np.ndarray

    def mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.rows, self.cols] = True
        return m


def connected_components(mask: np.ndarray) -> list:
    """8-connected components, sorted by area descending, ties by smallest
    (row, col) seed pixel."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    padded = np.concatenate([mask, np.zeros((h, 1), dtype=bool)], axis=1).ravel()
    diff = np.diff(padded.astype(np.int8), prepend=0)
    starts = np.flatnonzero(diff == 1)
    ends = np.flatnonzero(diff == -1)

    # union-find over row runs; 8-connectivity joins runs whose column spans
    # intersect when extended by one
    parent = list(range(len(starts)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    run_row = starts // (w + 1)
    run_c0 = starts % (w + 1)
    run_c1 = ends % (w + 1)  # exclusive
    rows_to_runs: dict = {}
    for idx, r in enumerate(run_row):
        rows_to_runs.setdefault(int(r), []).append(idx)
    for r, here in rows_to_runs.items():
        above = rows_to_runs.get(r - 1, ())
        for i in here:
            for j in above:
                if run_c0[i] <= run_c1[j] and run_c0[j] <= run_c1[i]:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)

    groups: dict = {}
    for idx in range(len(starts)):
        groups.setdefault(find(idx), []).append(idx)

    out = []
    for run_ids in groups.values():
        rows = np.concatenate(
            [np.full(run_c1[i] - run_c0[i], run_row[i], dtype=np.intp) for i in run_ids]
        )
        cols = np.concatenate(
            [np.arange(run_c0[i], run_c1[i], dtype=np.intp) for i in run_ids]
        )
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        out.append(Component(int(rows.size), (int(rows[0]), int(cols[0])), rows, cols))
    out.sort(key=lambda c: (-c.area, c.seed))
    return out


def _vertical_pass(mask: np.ndarray) -> np.ndarray:
    """Per-column distance (in rows) to the nearest false pixel, with virtual
    false rows just outside the grid."""
    h, w = mask.shape
    g = np.empty((h, w), dtype=np.int64)
    prev = np.ones(w, dtype=np.int64)
    for i in range(h):
        cur = np.where(mask[i], prev, 0)
        g[i] = cur
        prev = cur + 1
    prev = np.ones(w, dtype=np.int64)
    for i in range(h - 1, -1, -1):
        cur = np.where(mask[i], np.minimum(g[i], prev), 0)
        g[i] = cur
        prev = cur + 1
    return g


def _envelope_row(f: list, n: int) -> list:
    """1-D squared distance transform of sampled function f via the
    lower envelope of parabolas."""
    v = [0] * n
    z = [0.0] * (n + 1)
    z[0] = -np.inf
    z[1] = np.inf
    k = 0
    for q in range(1, n):
        fq = f[q] + q * q
        s = (fq - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = (fq - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    out = [0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        dq = q - v[k]
        out[q] = dq * dq + f[v[k]]
    return out


def distance_transform_sq(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance from each true pixel to the nearest
    false pixel (border counts as false); 0 on false pixels."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    g = _vertical_pass(mask)
    out = np.zeros((h, w), dtype=np.int64)
    n = w + 2
    for i in range(h):
        # pad with zero-distance sites for the virtual false columns
        f = [0] * n
        row = (g[i] * g[i]).tolist()
        f[1 : w + 1] = row
        if not any(row):
            continue
        out[i] = _envelope_row(f, n)[1 : w + 1]
    return out


def distance_transform(mask: np.ndarray) -> np.ndarray:
    return np.sqrt(distance_transform_sq(mask))


def error_region(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Symmetric difference of two same-shaped binary masks."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"error_region: shape mismatch {pred.shape} vs {gt.shape}")
    return pred ^ gt


def click_point(region: np.ndarray, exclude=None) -> tuple:
    """The region pixel deepest inside it (max distance transform), ties
    broken toward smallest row, then col. `exclude` optionally removes
    candidate pixels (already-clicked positions) from consideration."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("click_point: empty region")
    d = distance_transform_sq(region)
    if exclude:
        rows, cols = zip(*exclude)
        d = d.copy()
        d[list(rows), list(cols)] = -1
        if (d[region] < 0).all():
            raise LookupError("click_point: every region pixel is excluded")
    d = np.where(region, d, -1)
    flat = int(np.argmax(d))  # first occurrence = smallest (row, col)
    return flat // region.shape[1], flat % region.shape[1]
