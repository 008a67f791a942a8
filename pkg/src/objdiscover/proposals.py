"""Region proposal generation from feature tensors.

Proposals come from threshold sweeps over local saliency maps: for each
robust local maximum of the global saliency map, the 4-connected
superlevel component containing the maximum is boxed at a ladder of
thresholds. Proposals inherit the maximum they came from as their group
id, giving every image a partition of its proposals into groups.
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box
from .saliency import (
    EmptyAfterFloor,
    SaliencyMap,
    compute_persistence,
    global_saliency,
    local_saliency,
    select_maxima,
)
from .tensor_store import FeatureTensor


class ProposalError(Exception):
    pass


class DegenerateTensor(ProposalError):
    pass


class MixedImageIds(ProposalError):
    pass


@dataclass(frozen=True)
class Proposal:
    box: Box
    group_id: int
    layer_tag: str
    threshold_index: int


@dataclass
class ProposalSet:
    image_id: str
    proposals: list[Proposal] = field(default_factory=list)
    group_count: int = 0
    warnings: list[str] = field(default_factory=list)

    def groups(self) -> list[int]:
        """Group id per proposal, aligned with proposal indices."""
        return [p.group_id for p in self.proposals]

    def validate(self) -> None:
        seen: set[tuple[Box, int]] = set()
        for p in self.proposals:
            if not 0 <= p.group_id < self.group_count:
                raise ProposalError(f"{self.image_id}: group id {p.group_id} outside [0, {self.group_count})")
            key = (p.box, p.group_id)
            if key in seen:
                raise ProposalError(f"{self.image_id}: duplicate (box, group) {p.box.as_list()}, {p.group_id}")
            seen.add(key)


@dataclass(frozen=True)
class ProposalParams:
    """Knobs of the generation process.

    ``mask_mode`` selects how the two elimination conditions combine when
    masking a local saliency map: "and" masks a location only when its
    local score is below the local mean AND its global score is below
    ``beta`` times the global mean; "or" masks when either holds.
    ``means_over_all`` computes those means over every grid location
    (False restricts them to locations that survived the alpha floor).
    """

    alpha: float = 0.3
    beta: float = 0.5
    max_maxima: int = 20
    threshold_count: int = 50
    mask_mode: str = "and"
    means_over_all: bool = True

    def validate(self) -> None:
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.max_maxima < 1 or self.threshold_count < 1:
            raise ValueError("max_maxima and threshold_count must be >= 1")
        if self.mask_mode not in ("and", "or"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")


def map_grid_box_to_image(
    grid_box: tuple[int, int, int, int],
    grid_shape: tuple[int, int],
    image_size: tuple[int, int],
) -> Box:
    """Map an inclusive grid-cell box (rmin, cmin, rmax, cmax) to image pixels.

    Cell (r, c) covers the pixel rectangle
    [c*W_img/W, (c+1)*W_img/W) x [r*H_img/H, (r+1)*H_img/H); the result is
    the union rectangle rounded outward to integer pixels and clamped.
    """
    rmin, cmin, rmax, cmax = grid_box
    grid_h, grid_w = grid_shape
    img_w, img_h = image_size
    if not (0 <= rmin <= rmax < grid_h and 0 <= cmin <= cmax < grid_w):
        raise ProposalError(f"grid box {grid_box} outside {grid_shape} grid")
    xmin = (cmin * img_w) // grid_w
    ymin = (rmin * img_h) // grid_h
    xmax = -((-(cmax + 1) * img_w) // grid_w)  # ceil division
    ymax = -((-(rmax + 1) * img_h) // grid_h)
    return Box(xmin, ymin, xmax, ymax).clamped(img_w, img_h)


def _component_box(mask: np.ndarray, seed: tuple[int, int]) -> tuple[int, int, int, int]:
    """Bounding box of the 4-connected True-component of ``mask`` containing ``seed``."""
    h, w = mask.shape
    visited = np.zeros_like(mask, dtype=bool)
    queue = deque([seed])
    visited[seed] = True
    rmin, cmin = seed
    rmax, cmax = seed
    while queue:
        r, c = queue.popleft()
        rmin, rmax = min(rmin, r), max(rmax, r)
        cmin, cmax = min(cmin, c), max(cmax, c)
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not visited[nr, nc]:
                visited[nr, nc] = True
                queue.append((nr, nc))
    return rmin, cmin, rmax, cmax


def generate_for_layer(
    tensor: FeatureTensor,
    params: ProposalParams,
    image_size: tuple[int, int],
) -> ProposalSet:
    """Run the full per-layer pipeline: saliency, persistence, threshold sweep.

    Steps: (1) global saliency; (2) drop locations below alpha times its
    maximum; (3) persistence plus 3x3 suppression, keeping at most
    ``max_maxima`` peaks; (4) per peak, mask its local saliency map with
    the joint local/global filter; (5) sweep ``threshold_count`` linearly
    spaced thresholds over the masked map, boxing the component containing
    the peak at each level; (6) drop duplicate boxes within a group,
    keeping the lowest threshold index.
    """
    params.validate()
    h, w = tensor.height, tensor.width
    if h * w == 1:
        raise DegenerateTensor("1x1 feature grid cannot produce proposals")
    result = ProposalSet(image_id="", group_count=0)

    sg = global_saliency(tensor).scores
    floor = params.alpha * float(sg.max())
    try:
        candidates = compute_persistence(SaliencyMap(scores=sg, kind="global"), floor)
    except EmptyAfterFloor:
        result.warnings.append(f"layer {tensor.layer_tag!r}: no location reaches the saliency floor")
        return result
    maxima = select_maxima(candidates, params.max_maxima)

    retained = sg >= floor
    sg_mean = float(sg.mean()) if params.means_over_all else float(sg[retained].mean())
    globally_weak = sg < params.beta * sg_mean

    proposals: list[Proposal] = []
    for maximum in maxima:
        sy = local_saliency(tensor, maximum).scores
        sy_mean = float(sy.mean()) if params.means_over_all else float(sy[retained].mean())
        locally_weak = sy < sy_mean
        if params.mask_mode == "and":
            masked = locally_weak & globally_weak
        else:
            masked = locally_weak | globally_weak
        masked[maximum.row, maximum.col] = False  # the peak anchors every component
        valid = ~masked
        vals = sy[valid]
        thresholds = np.linspace(float(vals.min()), float(vals.max()), params.threshold_count)
        seen_boxes: set[Box] = set()
        for t_idx, threshold in enumerate(thresholds):
            if sy[maximum.row, maximum.col] < threshold:
                continue
            grid_box = _component_box(valid & (sy >= threshold), (maximum.row, maximum.col))
            box = map_grid_box_to_image(grid_box, (h, w), image_size)
            if box not in seen_boxes:
                seen_boxes.add(box)
                proposals.append(
                    Proposal(box=box, group_id=maximum.rank, layer_tag=tensor.layer_tag, threshold_index=t_idx)
                )

    result.proposals = proposals
    result.group_count = len(maxima)
    return result


def fuse_layers(sets: list[ProposalSet]) -> ProposalSet:
    """Concatenate per-layer proposal sets, keeping groups distinct."""
    if not sets:
        raise ProposalError("nothing to fuse")
    image_ids = {s.image_id for s in sets}
    if len(image_ids) > 1:
        raise MixedImageIds(f"cannot fuse sets from different images: {sorted(image_ids)}")
    fused = ProposalSet(image_id=sets[0].image_id)
    offset = 0
    for s in sets:
        for p in s.proposals:
            fused.proposals.append(
                Proposal(box=p.box, group_id=p.group_id + offset, layer_tag=p.layer_tag,
                         threshold_index=p.threshold_index)
            )
        offset += s.group_count
        fused.warnings.extend(s.warnings)
    fused.group_count = offset
    return fused


# ---------------------------------------------------------------------------
# JSONL persistence: one line per image
# ---------------------------------------------------------------------------

def proposal_set_to_dict(pset: ProposalSet) -> dict:
    return {
        "image_id": pset.image_id,
        "group_count": pset.group_count,
        "warnings": list(pset.warnings),
        "proposals": [
            {
                "box": p.box.as_list(),
                "group_id": p.group_id,
                "layer_tag": p.layer_tag,
                "threshold_index": p.threshold_index,
            }
            for p in pset.proposals
        ],
    }


def proposal_set_from_dict(doc: dict) -> ProposalSet:
    return ProposalSet(
        image_id=doc["image_id"],
        group_count=int(doc["group_count"]),
        warnings=list(doc.get("warnings", [])),
        proposals=[
            Proposal(
                box=Box.from_list(p["box"]),
                group_id=int(p["group_id"]),
                layer_tag=p.get("layer_tag", ""),
                threshold_index=int(p["threshold_index"]),
            )
            for p in doc["proposals"]
        ],
    )


def write_proposals_jsonl(sets: list[ProposalSet], path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for pset in sets:
            fh.write(json.dumps(proposal_set_to_dict(pset), sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_proposals_jsonl(path: str | os.PathLike) -> list[ProposalSet]:
    sets = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                sets.append(proposal_set_from_dict(json.loads(line)))
    return sets
