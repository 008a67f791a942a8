"""Two-stage discovery for collections too large for dense score matrices.

Memory is modeled as the number of stored score entries,
M = (sum of |N(i)|) * K. Stage one splits the collection into random
parts and runs proxy discovery inside each with a per-part entry budget
K1, shortlisting each image's most promising proposals. Stage two scores
the shortlists across the whole collection at the leaner budget K2 and
runs the final discovery. Both stages fit the same budget M.
"""

from __future__ import annotations

import json
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .discovery import DiscoveryConfig, DiscoverySolution, objective, read_solution_jsonl, run, \
    write_solution_jsonl
from .matching import ScoreSet, compute_scores, load_scores, prefilter_neighbors, save_scores
from .proposals import ProposalSet, proposal_set_from_dict, proposal_set_to_dict
from .region_features import build_region_descriptors
from .seeds import derive_seed
from .tensor_store import DatasetManifest, load_image_descriptor, load_image_tensor


class LargeScaleError(Exception):
    pass


class ZeroBudget(LargeScaleError):
    pass


class PartTooSmall(LargeScaleError):
    pass


@dataclass
class BudgetPlan:
    memory_limit: int  # M, in stored score entries
    parts: int  # k
    neighbor_cap: int  # N
    stage1_budget: int  # K1, per-part entries per matrix
    stage2_budget: int  # K2, whole-collection entries per matrix
    part_assignment: dict[str, int] = field(default_factory=dict)

    def members(self, part: int) -> list[str]:
        return sorted(i for i, p in self.part_assignment.items() if p == part)

    def validate(self) -> None:
        n = len(self.part_assignment)
        if n < self.parts:
            raise LargeScaleError(f"{n} images cannot fill {self.parts} parts")
        sizes = [len(self.members(p)) for p in range(self.parts)]
        if sum(sizes) != n or max(sizes) - min(sizes) > 1:
            raise LargeScaleError(f"part sizes {sizes} are not a near-equal partition")
        if self.stage1_budget != self.memory_limit // (self.neighbor_cap * (n // self.parts)):
            raise LargeScaleError("stage1 budget disagrees with the memory formula")
        if self.stage2_budget != self.memory_limit // (n * self.neighbor_cap):
            raise LargeScaleError("stage2 budget disagrees with the memory formula")

    def to_dict(self) -> dict:
        return {
            "memory_limit": self.memory_limit,
            "parts": self.parts,
            "neighbor_cap": self.neighbor_cap,
            "stage1_budget": self.stage1_budget,
            "stage2_budget": self.stage2_budget,
            "part_assignment": dict(sorted(self.part_assignment.items())),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BudgetPlan":
        return cls(
            memory_limit=int(doc["memory_limit"]),
            parts=int(doc["parts"]),
            neighbor_cap=int(doc["neighbor_cap"]),
            stage1_budget=int(doc["stage1_budget"]),
            stage2_budget=int(doc["stage2_budget"]),
            part_assignment={str(k): int(v) for k, v in doc["part_assignment"].items()},
        )


def plan_budget(
    n: int,
    k: int,
    neighbor_cap: int,
    memory_limit: int,
    seed: int,
    image_ids: Sequence[str] | None = None,
) -> BudgetPlan:
    """Seeded random partition into k near-equal parts plus entry budgets.

    K1 = M // (N * floor(n/k)) governs stage-one matrices, K2 = M // (n*N)
    stage-two ones. A K2 of zero means the memory limit cannot hold even
    one entry per matrix and raises :class:`ZeroBudget`.
    """
    if k < 1 or n < k:
        raise LargeScaleError(f"need 1 <= k <= n, got k={k}, n={n}")
    if image_ids is None:
        image_ids = [f"{i}" for i in range(n)]
    if len(image_ids) != n or len(set(image_ids)) != n:
        raise LargeScaleError("image_ids must be n distinct ids")
    k2 = memory_limit // (n * neighbor_cap)
    if k2 == 0:
        raise ZeroBudget(f"memory limit {memory_limit} allows no entries at collection scale")
    k1 = memory_limit // (neighbor_cap * (n // k))
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    assignment: dict[str, int] = {}
    base, extra = divmod(n, k)
    cursor = 0
    for part in range(k):
        size = base + (1 if part < extra else 0)
        for idx in order[cursor:cursor + size]:
            assignment[image_ids[int(idx)]] = part
        cursor += size
    plan = BudgetPlan(memory_limit, k, neighbor_cap, k1, k2, assignment)
    plan.validate()
    return plan


@dataclass
class TwoStageResult:
    solution: DiscoverySolution
    shortlists: dict[str, ProposalSet]
    scores: ScoreSet
    plan: BudgetPlan
    peak_entries: int


def shrink_to_selection(proposal_set: ProposalSet, selected: Sequence[int]) -> ProposalSet:
    """Keep only the selected proposals; group labels survive untouched."""
    return ProposalSet(
        image_id=proposal_set.image_id,
        proposals=[proposal_set.proposals[k] for k in selected],
        group_count=proposal_set.group_count,
        warnings=list(proposal_set.warnings),
    )


def _config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def _load_phase(path: Path, meta_path: Path, config_hash: str) -> list[dict] | None:
    if not (path.exists() and meta_path.exists()):
        return None
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None
    if meta.get("config_hash") != config_hash:
        return None
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _store_phase(path: Path, meta_path: Path, config_hash: str, lines: list[dict]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for doc in lines:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
    os.replace(tmp, path)
    meta_path.write_text(json.dumps({"config_hash": config_hash}, sort_keys=True) + "\n", encoding="utf-8")


def run_two_stage(
    manifest: DatasetManifest,
    proposals: Mapping[str, ProposalSet],
    plan: BudgetPlan,
    stage1_cfg: DiscoveryConfig | None,
    stage2_cfg: DiscoveryConfig,
    roi_layer: str,
    pool_grid: int = 3,
    state_dir: str | os.PathLike | None = None,
    workers: int = 1,
    prefilter_globally: bool = False,
) -> TwoStageResult:
    """Shortlist proposals per part with proxy discovery, then discover globally.

    Stage one prefilters neighbors inside each part (capped at the plan's
    neighbor cap), scores pairs at budget K1, and keeps each image's
    retained regions as its new proposal set. Stage two prefilters over
    the whole collection, scores the shortlists at budget K2 and runs the
    final configuration. When ``state_dir`` is given, each completed phase
    is written there and skipped on rerun while its config hash matches.

    With ``prefilter_globally``, stage-one neighborhoods are instead the
    whole-collection ranking intersected with each part, mimicking a
    prefilter computed before partitioning.
    """
    plan.validate()
    if stage1_cfg is None:
        stage1_cfg = DiscoveryConfig(
            nu=plan.stage2_budget,
            tau=stage2_cfg.tau,
            use_groups=stage2_cfg.use_groups,
            max_sweeps=stage2_cfg.max_sweeps,
            seed=stage2_cfg.seed,
            mode="proxy",
        )
    base_doc = {
        "plan": plan.to_dict(),
        "stage1": asdict(stage1_cfg),
        "stage2": asdict(stage2_cfg),
        "roi_layer": roi_layer,
        "pool_grid": pool_grid,
        "prefilter_globally": prefilter_globally,
    }
    state = Path(state_dir) if state_dir is not None else None
    if state is not None:
        state.mkdir(parents=True, exist_ok=True)
        (state / "plan.json").write_text(json.dumps(plan.to_dict(), sort_keys=True, indent=1) + "\n",
                                         encoding="utf-8")

    global_neighbors: dict[str, list[str]] | None = None
    if prefilter_globally:
        everyone = sorted(plan.part_assignment)
        global_neighbors = prefilter_neighbors(
            [load_image_descriptor(manifest, i) for i in everyone],
            min(plan.neighbor_cap, len(everyone) - 1),
        )

    # Peak entries seen in any freshly computed phase (cached parts do not count).
    phase_entry_counts: list[int] = []

    def shortlist_part(part: int) -> list[dict]:
        members = plan.members(part)
        if len(members) < 2:
            raise PartTooSmall(f"part {part} has {len(members)} image(s); need at least 2")
        cap = min(plan.neighbor_cap, len(members) - 1)
        if global_neighbors is not None:
            in_part = set(members)
            neighbor_sets = {i: [j for j in global_neighbors[i] if j in in_part][:cap] for i in members}
        else:
            neighbor_sets = prefilter_neighbors([load_image_descriptor(manifest, i) for i in members], cap)
        descs = {}
        for i in members:
            rec = manifest.record(i)
            tensor = load_image_tensor(manifest, i, roi_layer)
            descs[i] = build_region_descriptors(
                tensor, proposals[i], (rec.original_width, rec.original_height), pool_grid
            )
        part_scores = compute_scores(descs, neighbor_sets, plan.stage1_budget, workers=1)
        phase_entry_counts.append(part_scores.entry_count())
        cfg = replace(stage1_cfg, seed=derive_seed(stage1_cfg.seed, f"part{part}"))
        part_solution = run(part_scores, neighbor_sets, {i: proposals[i].groups() for i in members}, cfg)
        return [
            proposal_set_to_dict(shrink_to_selection(proposals[i], part_solution.x[i]))
            for i in members
        ]

    stage1_hash = _config_hash(base_doc | {"phase": "stage1"})
    shortlists: dict[str, ProposalSet] = {}
    part_ids = list(range(plan.parts))

    def load_or_run(part: int) -> list[dict]:
        if state is not None:
            cached = _load_phase(state / f"part_{part:03d}_shortlist.jsonl",
                                 state / f"part_{part:03d}_shortlist.meta.json", stage1_hash)
            if cached is not None:
                return cached
        docs = shortlist_part(part)
        if state is not None:
            _store_phase(state / f"part_{part:03d}_shortlist.jsonl",
                         state / f"part_{part:03d}_shortlist.meta.json", stage1_hash, docs)
        return docs

    if workers > 1 and len(part_ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            part_docs = list(pool.map(load_or_run, part_ids))
    else:
        part_docs = [load_or_run(part) for part in part_ids]
    for docs in part_docs:
        for doc in docs:
            pset = proposal_set_from_dict(doc)
            shortlists[pset.image_id] = pset

    # Stage two: whole-collection run over the shortlisted proposals only.
    all_ids = sorted(plan.part_assignment)
    stage2_hash = _config_hash(base_doc | {"phase": "stage2"})
    stage2_files = None
    if state is not None:
        stage2_files = (state / "stage2_solution.jsonl", state / "stage2_scores.bin",
                        state / "stage2_scores.index.json", state / "stage2.meta.json")
        if all(p.exists() for p in stage2_files):
            try:
                meta = json.loads(stage2_files[3].read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                meta = {}
            if meta.get("config_hash") == stage2_hash:
                stage2_scores = load_scores(stage2_files[1], stage2_files[2])
                solution = read_solution_jsonl(stage2_files[0])
                solution.objective = objective(solution.x, solution.e, stage2_scores)
                return TwoStageResult(solution, shortlists, stage2_scores, plan, max(phase_entry_counts, default=0))
    cap = min(plan.neighbor_cap, len(all_ids) - 1)
    neighbor_sets = prefilter_neighbors([load_image_descriptor(manifest, i) for i in all_ids], cap)
    descs = {}
    for i in all_ids:
        rec = manifest.record(i)
        tensor = load_image_tensor(manifest, i, roi_layer)
        descs[i] = build_region_descriptors(
            tensor, shortlists[i], (rec.original_width, rec.original_height), pool_grid
        )
    stage2_scores = compute_scores(descs, neighbor_sets, plan.stage2_budget, workers=workers)
    phase_entry_counts.append(stage2_scores.entry_count())
    solution = run(stage2_scores, neighbor_sets, {i: shortlists[i].groups() for i in all_ids}, stage2_cfg)
    if stage2_files is not None:
        write_solution_jsonl(solution, stage2_scores, stage2_files[0])
        save_scores(stage2_scores, stage2_files[1], stage2_files[2])
        stage2_files[3].write_text(json.dumps({"config_hash": stage2_hash}, sort_keys=True) + "\n",
                                   encoding="utf-8")
    return TwoStageResult(solution, shortlists, stage2_scores, plan, max(phase_entry_counts))
