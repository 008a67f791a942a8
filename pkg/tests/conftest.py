from __future__ import annotations

import numpy as np
import pytest

from objdiscover.matching import ScoreMatrix, ScoreSet


def make_instance(
    seed: int,
    n: int = 4,
    p_max: int = 6,
    max_groups: int = 3,
    dense_neighbors: bool = True,
    integer_scores: bool = True,
    p_fixed: int | None = None,
):
    """Random discovery instance: ids, group labels, neighborhoods, scores.

    Returns both the sparse ScoreSet the solver consumes and plain dense
    matrices (both edge directions) for the brute-force oracles.
    """
    rng = np.random.default_rng(seed)
    ids = [f"im{a:02d}" for a in range(n)]
    p = {i: p_fixed if p_fixed else int(rng.integers(1, p_max + 1)) for i in ids}
    groups = {}
    for i in ids:
        n_groups = int(rng.integers(1, min(max_groups, p[i]) + 1))
        labels = list(rng.integers(0, n_groups, size=p[i]))
        labels[: n_groups] = range(n_groups)  # every group nonempty, ids dense
        groups[i] = [int(g) for g in labels]
    neighbors = {}
    for i in ids:
        others = [j for j in ids if j != i]
        if dense_neighbors:
            neighbors[i] = others
        else:
            keep = max(1, int(rng.integers(1, len(others) + 1)))
            neighbors[i] = sorted(rng.choice(others, size=keep, replace=False).tolist())
    dense = {}
    scores = ScoreSet()
    for a in range(n):
        for b in range(a + 1, n):
            i, j = ids[a], ids[b]
            if integer_scores:
                mat = rng.integers(0, 10, size=(p[i], p[j])).astype(np.float32)
            else:
                mat = np.clip(rng.normal(0.3, 1.0, size=(p[i], p[j])), 0.0, None).astype(np.float32)
            dense[(i, j)] = mat
            dense[(j, i)] = mat.T
            rows, cols = np.nonzero(mat > 0)
            scores.add(ScoreMatrix(i, j, mat.shape, rows.astype(np.int32), cols.astype(np.int32),
                                   mat[rows, cols]))
    return {"ids": ids, "p": p, "groups": groups, "neighbors": neighbors,
            "scores": scores, "dense": dense}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
