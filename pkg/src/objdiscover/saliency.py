"""Saliency maps and robust local maxima via 2D topological persistence.

The global saliency map of a feature tensor is its depthwise sum; a local
saliency map holds normalized dot products against the feature vector at
one chosen location. Persistence ranks the local maxima of a map by how
long the superlevel-set component born at each maximum survives before
merging into a component with a higher peak: robust peaks live long even
when taller ones sit on noisy ridges nearby.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor_store import FeatureTensor


class SaliencyError(Exception):
    pass


class ZeroNormAtMaximum(SaliencyError):
    pass


class EmptyAfterFloor(SaliencyError):
    """All grid locations fell below the persistence floor."""


@dataclass(frozen=True)
class SaliencyMap:
    scores: np.ndarray  # (H, W) float64
    kind: str  # "global" or "local"
    source: tuple[int, int] | None = None  # local maps: the maximum's (row, col)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class LocalMaximum:
    """A peak of the superlevel filtration.

    ``saliency`` is the birth time (the peak's own score), ``death`` the
    level at which its component merges into one with a higher peak (or
    the lowest retained score if it never does), and
    ``persistence == saliency - death``.
    """

    row: int
    col: int
    saliency: float
    death: float
    persistence: float
    rank: int


def global_saliency(tensor: FeatureTensor) -> SaliencyMap:
    """Sum the tensor along its depth axis."""
    scores = tensor.values.astype(np.float64).sum(axis=2)
    return SaliencyMap(scores=scores, kind="global")


def local_saliency(tensor: FeatureTensor, maximum: "LocalMaximum | tuple[int, int]") -> SaliencyMap:
    """Normalized dot products against the feature vector at ``maximum``.

    Locations with a zero-norm feature vector score 0; a zero-norm vector
    at the maximum itself raises :class:`ZeroNormAtMaximum`.
    """
    if isinstance(maximum, LocalMaximum):
        row, col = maximum.row, maximum.col
    else:
        row, col = maximum
    if not (0 <= row < tensor.height and 0 <= col < tensor.width):
        raise SaliencyError(f"maximum ({row}, {col}) outside {tensor.height}x{tensor.width} grid")
    feats = tensor.values.astype(np.float64)
    norms = np.linalg.norm(feats, axis=2)
    anchor = feats[row, col]
    anchor_norm = norms[row, col]
    if anchor_norm == 0.0:
        raise ZeroNormAtMaximum(f"zero-norm feature vector at ({row}, {col})")
    scores = feats @ (anchor / anchor_norm)
    nonzero = norms > 0.0
    scores[nonzero] /= norms[nonzero]
    scores[~nonzero] = 0.0
    return SaliencyMap(scores=scores, kind="local", source=(row, col))


class _UnionFind:
    """Union-find over flat pixel indices; roots carry (birth, peak)."""

    __slots__ = ("parent", "birth", "peak")

    def __init__(self, size: int):
        self.parent = np.full(size, -1, dtype=np.int64)
        self.birth = np.empty(size, dtype=np.float64)
        self.peak = np.empty(size, dtype=np.int64)

    def make(self, idx: int, value: float) -> None:
        self.parent[idx] = idx
        self.birth[idx] = value
        self.peak[idx] = idx

    def active(self, idx: int) -> bool:
        return self.parent[idx] >= 0

    def find(self, idx: int) -> int:
        root = idx
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[idx] != root:
            self.parent[idx], idx = root, self.parent[idx]
        return root


def compute_persistence(saliency_map: SaliencyMap, floor: float) -> list[LocalMaximum]:
    """Find all local maxima of the superlevel filtration and their persistence.

    Locations scoring below ``floor`` are discarded before anything else;
    the filtration runs on the 4-neighborhood graph of the survivors.
    Results are sorted by decreasing persistence, ties broken by higher
    saliency then row-major location. The returned ``rank`` is the index
    in that order.

    Equal-valued pixels are processed as one value class, so a plateau
    contributes at most one maximum (its row-major-first pixel) and a
    plateau touching a higher region contributes none.
    """
    scores = saliency_map.scores
    h, w = scores.shape
    flat = scores.ravel()
    retained = np.flatnonzero(flat >= floor)
    if retained.size == 0:
        raise EmptyAfterFloor(f"no location reaches floor {floor}")
    is_retained = np.zeros(flat.size, dtype=bool)
    is_retained[retained] = True
    lowest_retained = float(flat[retained].min())

    # Decreasing score, row-major within a value class.
    order = retained[np.argsort(-flat[retained], kind="stable")]
    uf = _UnionFind(flat.size)
    died: list[tuple[int, float, float]] = []  # (peak index, birth, death)

    def survives(root_a: int, root_b: int) -> int:
        """Pick the surviving root: higher birth, then row-major-first peak."""
        ka = (uf.birth[root_a], -uf.peak[root_a])
        kb = (uf.birth[root_b], -uf.peak[root_b])
        return root_a if ka > kb else root_b

    pos = 0
    n = order.size
    while pos < n:
        value = flat[order[pos]]
        end = pos
        while end < n and flat[order[end]] == value:
            end += 1
        batch = order[pos:end]
        for idx in batch:
            uf.make(idx, value)
        for idx in batch:
            r, c = divmod(int(idx), w)
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if not (0 <= nr < h and 0 <= nc < w):
                    continue
                nidx = nr * w + nc
                if not is_retained[nidx] or not uf.active(nidx):
                    continue
                ra, rb = uf.find(int(idx)), uf.find(nidx)
                if ra == rb:
                    continue
                keep = survives(ra, rb)
                lose = rb if keep == ra else ra
                # A component born above this level dies here; one born at
                # this level is a plateau fragment and merges silently.
                if uf.birth[lose] > value:
                    died.append((int(uf.peak[lose]), float(uf.birth[lose]), float(value)))
                uf.parent[lose] = keep
        pos = end

    maxima = list(died)
    roots = {uf.find(int(idx)) for idx in retained}
    for root in roots:
        maxima.append((int(uf.peak[root]), float(uf.birth[root]), lowest_retained))

    maxima.sort(key=lambda m: (-(m[1] - m[2]), -m[1], m[0]))
    return [
        LocalMaximum(
            row=peak // w,
            col=peak % w,
            saliency=birth,
            death=death,
            persistence=birth - death,
            rank=rank,
        )
        for rank, (peak, birth, death) in enumerate(maxima)
    ]


def select_maxima(candidates: list[LocalMaximum], max_count: int) -> list[LocalMaximum]:
    """Greedy 3x3 non-maximum suppression in persistence order.

    A candidate is dropped when it lies within Chebyshev distance 1 of an
    already kept maximum; at most ``max_count`` survive. Ranks are
    reassigned to the kept order, which preserves the input order.
    """
    if max_count < 1:
        raise ValueError("max_count must be >= 1")
    kept: list[LocalMaximum] = []
    for cand in candidates:
        if len(kept) >= max_count:
            break
        suppressed = any(max(abs(cand.row - k.row), abs(cand.col - k.col)) <= 1 for k in kept)
        if not suppressed:
            kept.append(replace(cand, rank=len(kept)))
    return kept
