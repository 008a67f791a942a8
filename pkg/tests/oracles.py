"""Independent brute-force oracles: slow, obvious, and trusted.

Each oracle re-derives an expected result from first principles without
touching the implementation's data structures, so a test that compares
the two genuinely checks the fast path.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np


def persistence_by_threshold_sweep(scores: np.ndarray, floor: float) -> list[tuple[int, int, float, float]]:
    """All local maxima of the superlevel filtration with birth and death.

    Sweeps every distinct retained value from high to low, labels the
    4-connected components of each superlevel set from scratch, and
    tracks component identity through the peaks they contain. Returns
    (row, col, birth, death) sorted like the production code: decreasing
    persistence, then higher birth, then row-major peak location.
    """
    h, w = scores.shape
    retained = scores >= floor
    if not retained.any():
        raise ValueError("nothing retained")
    values = sorted({float(v) for v in scores[retained]}, reverse=True)
    lowest = values[-1]

    alive: dict[tuple[int, int], float] = {}  # peak -> birth
    dead: list[tuple[int, int, float, float]] = []
    for level in values:
        mask = retained & (scores >= level)
        labels = _label_components(mask)
        comp_peaks: dict[int, list[tuple[int, int]]] = {}
        for peak in alive:
            comp_peaks.setdefault(labels[peak], []).append(peak)
        for comp in np.unique(labels[labels >= 0]):
            peaks = comp_peaks.get(int(comp), [])
            if not peaks:
                # Fresh component: all its pixels sit at this level; its
                # row-major-first pixel is the new maximum.
                cells = np.argwhere(labels == comp)
                first = min((int(r) * w + int(c)) for r, c in cells)
                alive[(first // w, first % w)] = level
            elif len(peaks) > 1:
                survivor = max(peaks, key=lambda p: (alive[p], -(p[0] * w + p[1])))
                for peak in peaks:
                    if peak != survivor:
                        dead.append((peak[0], peak[1], alive.pop(peak), level))
    for peak, birth in alive.items():
        dead.append((peak[0], peak[1], birth, lowest))
    dead.sort(key=lambda m: (-(m[2] - m[3]), -m[2], m[0] * w + m[1]))
    return dead


def _label_components(mask: np.ndarray) -> np.ndarray:
    """Naive 4-connected labeling; -1 outside the mask."""
    h, w = mask.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    current = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] and labels[r, c] < 0:
                stack = [(r, c)]
                labels[r, c] = current
                while stack:
                    rr, cc = stack.pop()
                    for nr, nc in ((rr - 1, cc), (rr + 1, cc), (rr, cc - 1), (rr, cc + 1)):
                        if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and labels[nr, nc] < 0:
                            labels[nr, nc] = current
                            stack.append((nr, nc))
                current += 1
    return labels


def dense_objective(x: dict, e: dict, dense_scores: dict) -> float:
    """Objective evaluated on dense matrices with plain Python loops."""
    total = 0.0
    for i, outs in e.items():
        for j in outs:
            mat = dense_scores.get((i, j))
            if mat is None:
                continue
            for k in x.get(i, []):
                for l in x.get(j, []):
                    total += float(mat[k, l])
    return total


def feasible_region_subsets(p: int, groups: list[int] | None, nu: int):
    """Every subset of at most nu proposals honoring the group constraint."""
    indices = list(range(p))
    for size in range(0, min(nu, p) + 1):
        for subset in combinations(indices, size):
            if groups is not None:
                used = [groups[k] for k in subset]
                if len(set(used)) != len(used):
                    continue
            yield list(subset)


def best_region_block(
    i: str,
    p: int,
    x: dict,
    e: dict,
    dense_scores: dict,
    groups: list[int] | None,
    nu: int,
) -> float:
    """Exhaustive best objective over feasible selections for image i."""
    best = -np.inf
    for subset in feasible_region_subsets(p, groups, nu):
        trial = dict(x)
        trial[i] = subset
        best = max(best, dense_objective(trial, e, dense_scores))
    return best


def best_edge_block(i: str, x: dict, e: dict, dense_scores: dict, neighbors: list[str], tau: int) -> float:
    """Exhaustive best objective over out-edge sets of size up to tau for image i."""
    best = -np.inf
    for size in range(0, min(tau, len(neighbors)) + 1):
        for subset in combinations(neighbors, size):
            trial = dict(e)
            trial[i] = list(subset)
            best = max(best, dense_objective(x, trial, dense_scores))
    return best
