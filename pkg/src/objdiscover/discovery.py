"""Joint selection of image regions and an image graph by block-coordinate ascent.

The objective sums, over directed edges e_ij between images, the sparse
similarity mass between the regions selected in both endpoints:

    maximize  sum_i sum_{j in N(i)} e_ij * x_i' S_ij x_j
    subject to  |x_i| <= nu,  |e_i| <= tau,
                and optionally at most one selected region per group.

Starting from everything selected, a sweep visits images in a fresh
seeded permutation, re-picking each image's regions optimally given its
neighbors, then re-picks every image's out-edges. Each block update is
exactly optimal given the rest, so the objective never decreases once the
initial all-ones infeasibility has been swept away.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box
from .matching import ScoreSet
from .proposals import ProposalSet


class DiscoveryError(Exception):
    pass


class EmptySelection(DiscoveryError):
    pass


@dataclass(frozen=True)
class DiscoveryConfig:
    """Solver knobs.

    ``mode`` is "standard" for final-object selection or "proxy" when the
    selections are read as shortlists of promising regions (typically with
    a much larger ``nu``); both run the same algorithm.
    """

    nu: int = 5
    tau: int = 10
    use_groups: bool = True
    max_sweeps: int = 50
    seed: int = 0
    mode: str = "standard"

    def validate(self) -> None:
        if self.nu < 1 or self.tau < 1 or self.max_sweeps < 1:
            raise DiscoveryError("nu, tau and max_sweeps must all be >= 1")
        if self.mode not in ("standard", "proxy"):
            raise DiscoveryError(f"unknown mode {self.mode!r}")


@dataclass
class DiscoverySolution:
    x: dict[str, list[int]]  # selected proposal indices per image, ascending
    e: dict[str, list[str]]  # out-neighbors per image, best first
    objective: float
    sweeps_run: int
    objective_per_sweep: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class RankedRegion:
    proposal_index: int
    rank_score: float


def _mask(size: int, selected: Sequence[int]) -> np.ndarray:
    mask = np.zeros(size, dtype=bool)
    kept = [k for k in selected if 0 <= k < size]
    if kept:
        mask[np.asarray(kept, dtype=np.int64)] = True
    return mask


def _pair_mass(m, mask_i: np.ndarray, mask_j: np.ndarray) -> float:
    keep = mask_i[m.rows] & mask_j[m.cols]
    return float(m.scores[keep].astype(np.float64).sum())


def objective(
    x: Mapping[str, Sequence[int]],
    e: Mapping[str, Sequence[str]],
    scores: ScoreSet,
) -> float:
    """Exact sparse evaluation of the objective for a given (x, e)."""
    masks: dict[str, np.ndarray] = {}

    def mask_for(img: str, size: int) -> np.ndarray:
        cached = masks.get(img)
        if cached is None or cached.size != size:
            cached = _mask(size, x.get(img, ()))
            masks[img] = cached
        return cached

    total = 0.0
    for i in sorted(e):
        for j in e[i]:
            m = scores.get(i, j)
            if m is None:
                continue
            total += _pair_mass(m, mask_for(i, m.shape[0]), mask_for(j, m.shape[1]))
    return total


def _region_scores(
    i: str,
    p_i: int,
    x_mask: Mapping[str, np.ndarray],
    out_edges: Mapping[str, Sequence[str]],
    in_edges: Mapping[str, Sequence[str]],
    scores: ScoreSet,
) -> np.ndarray:
    """Accumulated similarity of each region of i to selected regions over active edges."""
    r = np.zeros(p_i, dtype=np.float64)
    for j in out_edges[i]:
        m = scores.get(i, j)
        if m is None:
            continue
        keep = x_mask[j][m.cols]
        np.add.at(r, m.rows[keep], m.scores[keep].astype(np.float64))
    for j in in_edges[i]:
        m = scores.get(j, i)  # S_ji; transposing swaps the roles of rows/cols
        if m is None:
            continue
        keep = x_mask[j][m.rows]
        np.add.at(r, m.cols[keep], m.scores[keep].astype(np.float64))
    return r


def _select_regions(r: np.ndarray, groups: Sequence[int] | None, nu: int) -> list[int]:
    """Optimal feasible selection for nonnegative region scores.

    With groups: best region per group enters the candidate set, then the
    ``nu`` highest-scoring candidates win. Ties always break toward the
    lower proposal index.
    """
    p = len(r)
    if p == 0:
        return []
    if groups is None:
        candidates = list(range(p))
    else:
        best: dict[int, int] = {}
        for idx in range(p):
            g = groups[idx]
            if g not in best or r[idx] > r[best[g]]:
                best[g] = idx
        candidates = sorted(best.values())
    candidates.sort(key=lambda idx: (-r[idx], idx))
    return sorted(candidates[:nu])


def update_regions(
    i: str,
    x: Mapping[str, Sequence[int]],
    e: Mapping[str, Sequence[str]],
    scores: ScoreSet,
    groups: Mapping[str, Sequence[int]],
    config: DiscoveryConfig,
) -> list[int]:
    """Re-pick image i's regions optimally, everything else fixed."""
    p = {img: len(g) for img, g in groups.items()}
    x_mask = {img: _mask(p[img], x.get(img, ())) for img in groups}
    in_edges = {i: [j for j, outs in e.items() if i in outs]}
    r = _region_scores(i, p[i], x_mask, {i: list(e.get(i, ()))}, in_edges, scores)
    return _select_regions(r, groups[i] if config.use_groups else None, config.nu)


def update_edges(
    i: str,
    x: Mapping[str, Sequence[int]],
    scores: ScoreSet,
    config: DiscoveryConfig,
    neighbor_sets: Mapping[str, Sequence[str]],
) -> list[str]:
    """Keep the tau neighbors with the largest selected-region similarity mass.

    Exactly min(tau, |N(i)|) edges are kept regardless of score; ties
    break by lexicographic image id.
    """
    weights = []
    for j in neighbor_sets[i]:
        m = scores.get(i, j)
        w = 0.0
        if m is not None:
            w = _pair_mass(m, _mask(m.shape[0], x.get(i, ())), _mask(m.shape[1], x.get(j, ())))
        weights.append((-w, j))
    weights.sort()
    return [j for _, j in weights[: config.tau]]


def run(
    scores: ScoreSet,
    neighbor_sets: Mapping[str, Sequence[str]],
    groups: Mapping[str, Sequence[int]],
    config: DiscoveryConfig,
) -> DiscoverySolution:
    """Block-coordinate ascent from the all-selected initialization.

    Every sweep draws a fresh permutation from the seeded generator,
    updates each image's regions in that order, then updates all edges.
    Stops at a fixed point of (x, e) or after ``max_sweeps``. Same seed,
    same solution.
    """
    config.validate()
    images = sorted(neighbor_sets)
    if not set(groups) >= set(images):
        raise DiscoveryError("groups missing for some images")
    p = {i: len(groups[i]) for i in images}
    for a, b in scores.pairs():
        m = scores.get(a, b)
        if (a in p and m.shape[0] != p[a]) or (b in p and m.shape[1] != p[b]):
            raise DiscoveryError(f"score matrix ({a}, {b}) shape {m.shape} disagrees with proposal counts")
    rng = np.random.default_rng(config.seed)

    x_mask = {i: np.ones(p[i], dtype=bool) for i in images}
    out_edges: dict[str, list[str]] = {i: list(neighbor_sets[i]) for i in images}
    in_edges = _reverse_neighbors_active(out_edges, images)

    objective_per_sweep: list[float] = []
    sweeps = 0
    for _ in range(config.max_sweeps):
        sweeps += 1
        before = ({i: x_mask[i].copy() for i in images}, {i: list(out_edges[i]) for i in images})

        for idx in rng.permutation(len(images)):
            i = images[idx]
            r = _region_scores(i, p[i], x_mask, out_edges, in_edges, scores)
            selected = _select_regions(r, groups[i] if config.use_groups else None, config.nu)
            x_mask[i] = _mask(p[i], selected)

        x_lists = {i: [int(k) for k in np.flatnonzero(x_mask[i])] for i in images}
        for i in images:
            out_edges[i] = update_edges(i, x_lists, scores, config, neighbor_sets)
        in_edges = _reverse_neighbors_active(out_edges, images)

        objective_per_sweep.append(objective(x_lists, out_edges, scores))
        unchanged = all(np.array_equal(before[0][i], x_mask[i]) for i in images) and all(
            before[1][i] == out_edges[i] for i in images
        )
        if unchanged:
            break

    x_lists = {i: [int(k) for k in np.flatnonzero(x_mask[i])] for i in images}
    return DiscoverySolution(
        x=x_lists,
        e={i: list(out_edges[i]) for i in images},
        objective=objective_per_sweep[-1] if objective_per_sweep else 0.0,
        sweeps_run=sweeps,
        objective_per_sweep=objective_per_sweep,
    )


def _reverse_neighbors_active(out_edges: Mapping[str, Sequence[str]], images: Sequence[str]) -> dict[str, list[str]]:
    rev: dict[str, list[str]] = {i: [] for i in images}
    for i in images:
        for j in out_edges[i]:
            if j in rev:
                rev[j].append(i)
    return rev


def rank_regions(
    solution: DiscoverySolution,
    scores: ScoreSet,
    image: str,
) -> list[RankedRegion]:
    """Score each retained region of an image against its graph neighbors.

    The score of region k sums, over every in- or out-neighbor j, the best
    similarity between k and any region retained in j.
    """
    selected = solution.x.get(image, [])
    if not selected:
        raise EmptySelection(f"no retained regions for image {image!r}")
    partners = set(solution.e.get(image, []))
    partners.update(j for j, outs in solution.e.items() if image in outs)
    totals = {k: 0.0 for k in selected}
    for j in sorted(partners):
        m = scores.get(image, j)
        if m is None:
            continue
        sel_j = set(solution.x.get(j, []))
        best: dict[int, float] = {}
        for k, l, s in m.entries():
            if k in totals and l in sel_j and s > best.get(k, 0.0):
                best[k] = s
        for k, s in best.items():
            totals[k] += s
    return [RankedRegion(k, totals[k]) for k in selected]


def postprocess_single(
    solution: DiscoverySolution,
    scores: ScoreSet,
    proposal_set: ProposalSet,
) -> Box:
    """The retained region most similar to the neighbors' retained regions."""
    ranked = rank_regions(solution, scores, proposal_set.image_id)
    best = max(ranked, key=lambda rr: (rr.rank_score, -rr.proposal_index))
    return proposal_set.proposals[best.proposal_index].box


def postprocess_multi(
    solution: DiscoverySolution,
    scores: ScoreSet,
    proposal_set: ProposalSet,
    nms_iou: float = 0.7,
    max_regions: int = 5,
) -> list[Box]:
    """Rank retained regions, then greedy IoU suppression, top survivors first."""
    from .geometry import iou as box_iou

    if not (0.0 < nms_iou <= 1.0):
        raise DiscoveryError("nms_iou must lie in (0, 1]")
    if max_regions < 1:
        raise DiscoveryError("max_regions must be >= 1")
    ranked = rank_regions(solution, scores, proposal_set.image_id)
    ranked.sort(key=lambda rr: (-rr.rank_score, rr.proposal_index))
    kept: list[Box] = []
    for rr in ranked:
        box = proposal_set.proposals[rr.proposal_index].box
        if all(box_iou(box, other) <= nms_iou for other in kept):
            kept.append(box)
        if len(kept) == max_regions:
            break
    return kept


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

def write_solution_jsonl(
    solution: DiscoverySolution,
    scores: ScoreSet,
    path: str | os.PathLike,
) -> None:
    """One line per image: selections, out-neighbors and per-region rank scores."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for image in sorted(solution.x):
            try:
                ranked = rank_regions(solution, scores, image)
                rank_scores = {str(rr.proposal_index): round(rr.rank_score, 6) for rr in ranked}
            except EmptySelection:
                rank_scores = {}
            fh.write(
                json.dumps(
                    {
                        "image_id": image,
                        "selected": solution.x[image],
                        "out_neighbors": solution.e.get(image, []),
                        "rank_scores": rank_scores,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    os.replace(tmp, path)


def read_solution_jsonl(path: str | os.PathLike) -> DiscoverySolution:
    x: dict[str, list[int]] = {}
    e: dict[str, list[str]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            x[doc["image_id"]] = [int(k) for k in doc["selected"]]
            e[doc["image_id"]] = list(doc["out_neighbors"])
    return DiscoverySolution(x=x, e=e, objective=0.0, sweeps_run=0)
