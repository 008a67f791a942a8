"""Sparse region-similarity matrices and image neighborhood prefiltering.

A score matrix for an image pair keeps only the K largest positive
cosine similarities between the two images' region descriptors; the
transpose direction is never recomputed. The similarity kernel is
pluggable: anything mapping two descriptor lists to a dense matrix can
replace the cosine default.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .region_features import RegionDescriptor
from .tensor_store import GlobalDescriptor

DenseKernel = Callable[[Sequence[RegionDescriptor], Sequence[RegionDescriptor]], np.ndarray]


class MatchingError(Exception):
    pass


@dataclass
class ScoreMatrix:
    """Top-K sparse similarity entries between regions of an ordered image pair."""

    i: str
    j: str
    shape: tuple[int, int]
    rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int32))
    cols: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int32))
    scores: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.float32))

    def __len__(self) -> int:
        return len(self.scores)

    def entries(self) -> Iterator[tuple[int, int, float]]:
        for k, l, s in zip(self.rows, self.cols, self.scores):
            yield int(k), int(l), float(s)

    def transpose(self) -> "ScoreMatrix":
        return ScoreMatrix(self.j, self.i, (self.shape[1], self.shape[0]), self.cols, self.rows, self.scores)

    def validate(self, budget: int | None = None) -> None:
        if np.any(self.scores <= 0.0):
            raise MatchingError(f"({self.i}, {self.j}): non-positive stored score")
        if budget is not None and len(self) > budget:
            raise MatchingError(f"({self.i}, {self.j}): {len(self)} entries exceed budget {budget}")
        if len(self) and (self.rows.max(initial=0) >= self.shape[0] or self.cols.max(initial=0) >= self.shape[1]):
            raise MatchingError(f"({self.i}, {self.j}): entry outside {self.shape}")
        if len(set(zip(self.rows.tolist(), self.cols.tolist()))) != len(self):
            raise MatchingError(f"({self.i}, {self.j}): duplicate entry")


def cosine_kernel(descs_i: Sequence[RegionDescriptor], descs_j: Sequence[RegionDescriptor]) -> np.ndarray:
    """Dense cosine similarities; zero-norm descriptors yield zero rows/cols."""
    if not descs_i or not descs_j:
        return np.zeros((len(descs_i), len(descs_j)), dtype=np.float64)

    def unit_rows(descs):
        mat = np.stack([d.vector for d in descs]).astype(np.float64)
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        np.divide(mat, norms, out=mat, where=norms > 0)
        mat[norms.ravel() == 0] = 0.0
        return mat

    return unit_rows(descs_i) @ unit_rows(descs_j).T


def score_pair(
    descs_i: Sequence[RegionDescriptor],
    descs_j: Sequence[RegionDescriptor],
    budget: int,
    image_i: str | None = None,
    image_j: str | None = None,
    kernel: DenseKernel = cosine_kernel,
) -> ScoreMatrix:
    """Top ``budget`` positive entries of the dense kernel matrix.

    Negative similarities are clamped to zero and never stored; ties on
    score break by row-major (k, l) position. Scores are stored as
    float32, the on-disk dtype, so in-memory and file-backed runs agree
    exactly.
    """
    if budget < 1:
        raise MatchingError("budget must be >= 1")
    iid = image_i if image_i is not None else (descs_i[0].image_id if descs_i else "")
    jid = image_j if image_j is not None else (descs_j[0].image_id if descs_j else "")
    dense = np.asarray(kernel(descs_i, descs_j), dtype=np.float64)
    if dense.shape != (len(descs_i), len(descs_j)):
        raise MatchingError(f"kernel returned shape {dense.shape}, expected {(len(descs_i), len(descs_j))}")
    dense = dense.astype(np.float32)
    flat = dense.ravel()
    # Stable sort on the negated scores keeps row-major order among ties.
    order = np.argsort(-flat, kind="stable")[:budget]
    order = order[flat[order] > 0.0]
    rows = (order // max(dense.shape[1], 1)).astype(np.int32)
    cols = (order % max(dense.shape[1], 1)).astype(np.int32)
    return ScoreMatrix(iid, jid, dense.shape, rows, cols, flat[order].astype(np.float32))


def prefilter_neighbors(descriptors: Sequence[GlobalDescriptor], n_max: int) -> dict[str, list[str]]:
    """The ``n_max`` most cosine-similar images to each image, self excluded.

    Ties break by lexicographic image id. Returns an ordered neighbor
    list per image id.
    """
    if len(descriptors) < 2:
        raise MatchingError("need at least 2 descriptors to build neighborhoods")
    if n_max < 1:
        raise MatchingError("n_max must be >= 1")
    ids = [d.image_id for d in descriptors]
    if len(set(ids)) != len(ids):
        raise MatchingError("duplicate image ids in descriptor list")
    mat = np.stack([d.vector.astype(np.float64) for d in descriptors])
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    np.divide(mat, norms, out=mat, where=norms > 0)
    sims = mat @ mat.T
    neighbors: dict[str, list[str]] = {}
    for a, ida in enumerate(ids):
        ranked = sorted(
            ((float(sims[a, b]), ids[b]) for b in range(len(ids)) if b != a),
            key=lambda t: (-t[0], t[1]),
        )
        neighbors[ida] = [idb for _, idb in ranked[:n_max]]
    return neighbors


def memory_cost(neighbor_sets: Mapping[str, Sequence[str]], budget: int) -> int:
    """Total score entries the model charges: (sum of |N(i)|) * K."""
    return sum(len(v) for v in neighbor_sets.values()) * budget


def canonical_pairs(neighbor_sets: Mapping[str, Sequence[str]]) -> list[tuple[str, str]]:
    """Unordered image pairs implied by the neighborhoods, lexicographic order."""
    pairs = {(min(i, j), max(i, j)) for i, js in neighbor_sets.items() for j in js if i != j}
    return sorted(pairs)


class ScoreSet:
    """Score matrices for all canonical pairs, with transparent transposition."""

    def __init__(self) -> None:
        self._matrices: dict[tuple[str, str], ScoreMatrix] = {}

    def add(self, matrix: ScoreMatrix) -> None:
        key = (matrix.i, matrix.j)
        if matrix.i > matrix.j:
            key, matrix = (matrix.j, matrix.i), matrix.transpose()
        self._matrices[key] = matrix

    def get(self, i: str, j: str) -> ScoreMatrix | None:
        """S_ij if any entries were stored for the pair, else None."""
        if i == j:
            return None
        if i < j:
            return self._matrices.get((i, j))
        m = self._matrices.get((j, i))
        return m.transpose() if m is not None else None

    def pairs(self) -> list[tuple[str, str]]:
        return sorted(self._matrices)

    def entry_count(self) -> int:
        return sum(len(m) for m in self._matrices.values())

    def validate(self, budget: int | None = None) -> None:
        for m in self._matrices.values():
            m.validate(budget)


def compute_scores(
    descriptors: Mapping[str, Sequence[RegionDescriptor]],
    neighbor_sets: Mapping[str, Sequence[str]],
    budget: int,
    kernel: DenseKernel = cosine_kernel,
    workers: int = 1,
) -> ScoreSet:
    """Score every canonical pair once; parallel over pairs when workers > 1."""
    pairs = canonical_pairs(neighbor_sets)

    def one(pair: tuple[str, str]) -> ScoreMatrix:
        i, j = pair
        return score_pair(descriptors[i], descriptors[j], budget, i, j, kernel)

    result = ScoreSet()
    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for matrix in pool.map(one, pairs):
                result.add(matrix)
    else:
        for pair in pairs:
            result.add(one(pair))
    return result


# ---------------------------------------------------------------------------
# Binary persistence: one triplet blob per canonical pair plus a JSON index
# ---------------------------------------------------------------------------

_TRIPLET = np.dtype([("k", "<u4"), ("l", "<u4"), ("s", "<f4")])


def save_scores(scores: ScoreSet, data_path: str | os.PathLike, index_path: str | os.PathLike) -> None:
    data_path, index_path = Path(data_path), Path(index_path)
    index = []
    tmp = data_path.with_suffix(data_path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        for i, j in scores.pairs():
            m = scores.get(i, j)
            assert m is not None
            block = np.empty(len(m), dtype=_TRIPLET)
            block["k"], block["l"], block["s"] = m.rows, m.cols, m.scores
            index.append({"i": i, "j": j, "offset": fh.tell(), "count": len(m),
                          "pi": m.shape[0], "pj": m.shape[1]})
            fh.write(block.tobytes())
    os.replace(tmp, data_path)
    tmp_idx = index_path.with_suffix(index_path.suffix + ".tmp")
    tmp_idx.write_text(json.dumps({"pairs": index}, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    os.replace(tmp_idx, index_path)


def load_scores(data_path: str | os.PathLike, index_path: str | os.PathLike) -> ScoreSet:
    raw = Path(data_path).read_bytes()
    index = json.loads(Path(index_path).read_text(encoding="utf-8"))
    result = ScoreSet()
    for rec in index["pairs"]:
        count, offset = int(rec["count"]), int(rec["offset"])
        block = np.frombuffer(raw, dtype=_TRIPLET, count=count, offset=offset)
        result.add(
            ScoreMatrix(
                rec["i"],
                rec["j"],
                (int(rec["pi"]), int(rec["pj"])),
                block["k"].astype(np.int32),
                block["l"].astype(np.int32),
                block["s"].copy(),
            )
        )
    return result
