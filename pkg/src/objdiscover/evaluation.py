"""Localization metrics and the synthetic planted-object dataset generator.

Metrics report percentages in [0, 100]. Correct localization counts an
image as a hit when any predicted box overlaps any ground-truth box with
IoU strictly greater than the threshold; detection rate counts covered
ground-truth boxes instead of images; neighbor purity (CorRet) measures
how often graph neighbors share the image's class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box, iou
from .proposals import map_grid_box_to_image
from .tensor_store import (
    DatasetManifest,
    FeatureTensor,
    GlobalDescriptor,
    GroundTruthBox,
    ImageRecord,
)

__all__ = [
    "EvalReport",
    "EvaluationError",
    "MissingGroundTruth",
    "UnlabeledImage",
    "iou",
    "corloc",
    "detection_rate",
    "corret",
    "summarize_over_seeds",
    "SyntheticDataset",
    "generate_synthetic",
]


class EvaluationError(Exception):
    pass


class MissingGroundTruth(EvaluationError):
    pass


class UnlabeledImage(EvaluationError):
    pass


@dataclass
class EvalReport:
    metric_kind: str
    per_class: dict[str, float]
    overall: float
    params: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric_kind,
            "params": self.params,
            "per_class": {k: round(v, 4) for k, v in sorted(self.per_class.items())},
            "overall": round(self.overall, 4),
        }

    def to_text(self) -> str:
        width = max([len("class")] + [len(c) for c in self.per_class])
        lines = [f"{self.metric_kind}  " + " ".join(f"{k}={v}" for k, v in sorted(self.params.items()))]
        lines.append(f"{'class'.ljust(width)}  value")
        for cls in sorted(self.per_class):
            lines.append(f"{cls.ljust(width)}  {self.per_class[cls]:6.2f}")
        lines.append(f"{'OVERALL'.ljust(width)}  {self.overall:6.2f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["metric,class,value"]
        for cls in sorted(self.per_class):
            rows.append(f"{self.metric_kind},{cls},{self.per_class[cls]:.4f}")
        rows.append(f"{self.metric_kind},OVERALL,{self.overall:.4f}")
        return "\n".join(rows) + "\n"


def _group_by_class(ids: Sequence[str], classes: Mapping[str, str] | None) -> dict[str, list[str]]:
    if classes is None:
        return {"all": list(ids)}
    grouped: dict[str, list[str]] = {}
    for image_id in ids:
        grouped.setdefault(classes.get(image_id, "unlabeled"), []).append(image_id)
    return grouped


def corloc(
    predictions: Mapping[str, Sequence[Box]],
    ground_truth: Mapping[str, Sequence[GroundTruthBox]],
    classes: Mapping[str, str] | None = None,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Percentage of images with some prediction overlapping some truth at IoU > threshold."""
    for image_id in predictions:
        if image_id not in ground_truth or not ground_truth[image_id]:
            raise MissingGroundTruth(f"image {image_id!r} has no ground-truth boxes")
    per_class: dict[str, float] = {}
    for cls, ids in _group_by_class(sorted(ground_truth), classes).items():
        hits = 0
        for image_id in ids:
            if not ground_truth[image_id]:
                raise MissingGroundTruth(f"image {image_id!r} has no ground-truth boxes")
            preds = predictions.get(image_id, [])
            if any(iou(p, gt.box) > iou_threshold for p in preds for gt in ground_truth[image_id]):
                hits += 1
        per_class[cls] = 100.0 * hits / len(ids)
    return EvalReport("corloc", per_class, float(np.mean(list(per_class.values()))),
                      {"iou_threshold": iou_threshold})


def detection_rate(
    predictions: Mapping[str, Sequence[Box]],
    ground_truth: Mapping[str, Sequence[GroundTruthBox]],
    classes: Mapping[str, str] | None = None,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Percentage of ground-truth boxes covered by some prediction at IoU > threshold.

    Boxes group by their own label when present, else by the image's class.
    """
    counts: dict[str, list[int]] = {}
    for image_id in sorted(ground_truth):
        boxes = ground_truth[image_id]
        if not boxes:
            raise MissingGroundTruth(f"image {image_id!r} has no ground-truth boxes")
        preds = predictions.get(image_id, [])
        image_class = classes.get(image_id, "unlabeled") if classes is not None else "all"
        for gt in boxes:
            cls = gt.label if (classes is not None and gt.label is not None) else image_class
            covered = any(iou(p, gt.box) > iou_threshold for p in preds)
            hit, total = counts.setdefault(cls, [0, 0])
            counts[cls] = [hit + int(covered), total + 1]
    per_class = {cls: 100.0 * hit / total for cls, (hit, total) in counts.items()}
    return EvalReport("detection_rate", per_class, float(np.mean(list(per_class.values()))),
                      {"iou_threshold": iou_threshold})


def corret(
    solution_edges: Mapping[str, Sequence[str]],
    class_labels: Mapping[str, str],
) -> EvalReport:
    """Mean percentage of out-neighbors sharing the image's class.

    Images without out-edges are excluded from the mean.
    """
    fractions = []
    for image_id in sorted(solution_edges):
        if image_id not in class_labels:
            raise UnlabeledImage(f"image {image_id!r} has no class label")
        outs = solution_edges[image_id]
        if not outs:
            continue
        for j in outs:
            if j not in class_labels:
                raise UnlabeledImage(f"image {j!r} has no class label")
        same = sum(1 for j in outs if class_labels[j] == class_labels[image_id])
        fractions.append(100.0 * same / len(outs))
    overall = float(np.mean(fractions)) if fractions else 0.0
    return EvalReport("corret", {"all": overall}, overall)


def summarize_over_seeds(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation across per-seed metric values."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


# ---------------------------------------------------------------------------
# Synthetic planted-object datasets
# ---------------------------------------------------------------------------

GRID_SIZE = 16
FEATURE_DEPTH = 32
IMAGE_SIZE = 128
DESCRIPTOR_DIM = 64
BLOB_AMPLITUDE = 4.0


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    tensors: dict[str, FeatureTensor]
    descriptors: dict[str, GlobalDescriptor]
    ground_truth: dict[str, list[GroundTruthBox]]

    @property
    def class_labels(self) -> dict[str, str]:
        return {rec.image_id: rec.class_label or "unlabeled" for rec in self.manifest.images}


def _blob_envelope(height: int, width: int) -> np.ndarray:
    """Separable triangular bump, strictly positive, peaked at the center."""
    def axis(n: int) -> np.ndarray:
        center = (n - 1) / 2.0
        return 1.0 - np.abs(np.arange(n) - center) / (n / 2.0 + 0.5)

    return np.outer(axis(height), axis(width))


def _place_blobs(
    rng: np.random.Generator,
    count: int,
    occupied: list[tuple[int, int, int, int]],
) -> list[tuple[int, int, int, int]]:
    """Blob cell rectangles (rmin, cmin, rmax, cmax) not touching ``occupied``; best effort."""
    placed: list[tuple[int, int, int, int]] = []
    for _ in range(count):
        for _attempt in range(60):
            bh = int(rng.integers(3, 7))
            bw = int(rng.integers(3, 7))
            rmin = int(rng.integers(0, GRID_SIZE - bh + 1))
            cmin = int(rng.integers(0, GRID_SIZE - bw + 1))
            cand = (rmin, cmin, rmin + bh - 1, cmin + bw - 1)
            clear = all(
                cand[0] > p[2] + 2 or p[0] > cand[2] + 2 or cand[1] > p[3] + 2 or p[1] > cand[3] + 2
                for p in occupied + placed
            )
            if clear:
                placed.append(cand)
                break
    return placed


def generate_synthetic(
    n_images: int,
    classes: int,
    noise_level: float,
    seed: int,
) -> SyntheticDataset:
    """Feature tensors with 1-3 planted class-specific blobs plus clutter.

    Images of one class share the blob feature direction, so cosine
    matching can pair their regions; the planted cell rectangles, mapped
    to pixel coordinates, are recorded as ground truth. ``noise_level``
    scales both a wideband noise floor and image-specific distractor
    blobs whose directions are drawn fresh per image: boxes hugging a
    planted blob keep the shared class direction, while sloppy boxes max
    pool the distractors in and stop matching across images. Same seed,
    same dataset, byte for byte.
    """
    if classes < 1:
        raise ValueError("classes must be >= 1")
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng(seed)
    class_names = [f"class{c:02d}" for c in range(classes)]
    directions = np.abs(rng.normal(size=(classes, FEATURE_DEPTH)))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    global_directions = rng.normal(size=(classes, DESCRIPTOR_DIM))
    global_directions /= np.linalg.norm(global_directions, axis=1, keepdims=True)

    records: list[ImageRecord] = []
    tensors: dict[str, FeatureTensor] = {}
    descriptors: dict[str, GlobalDescriptor] = {}
    ground_truth: dict[str, list[GroundTruthBox]] = {}
    for idx in range(n_images):
        image_id = f"img_{idx:04d}"
        cls = idx % classes
        values = 0.1 * noise_level * rng.normal(size=(GRID_SIZE, GRID_SIZE, FEATURE_DEPTH))
        blobs = _place_blobs(rng, int(rng.integers(1, 4)), [])
        boxes = []
        for rmin, cmin, rmax, cmax in blobs:
            env = _blob_envelope(rmax - rmin + 1, cmax - cmin + 1)
            values[rmin:rmax + 1, cmin:cmax + 1, :] += (
                BLOB_AMPLITUDE * env[:, :, None] * directions[cls][None, None, :]
            )
            box = map_grid_box_to_image((rmin, cmin, rmax, cmax), (GRID_SIZE, GRID_SIZE),
                                        (IMAGE_SIZE, IMAGE_SIZE))
            boxes.append(GroundTruthBox(box, class_names[cls]))
        if noise_level > 0:
            for rmin, cmin, rmax, cmax in _place_blobs(rng, int(rng.integers(2, 5)), blobs):
                direction = np.abs(rng.normal(size=FEATURE_DEPTH))
                direction /= np.linalg.norm(direction)
                env = _blob_envelope(rmax - rmin + 1, cmax - cmin + 1)
                values[rmin:rmax + 1, cmin:cmax + 1, :] += (
                    noise_level * BLOB_AMPLITUDE * env[:, :, None] * direction[None, None, :]
                )
        tensor = FeatureTensor.from_array(values.astype(np.float32), layer_tag="feat")
        vec = global_directions[cls] + 0.25 * noise_level * rng.normal(size=DESCRIPTOR_DIM)
        tensors[image_id] = tensor
        descriptors[image_id] = GlobalDescriptor.from_vector(image_id, vec.astype(np.float32))
        ground_truth[image_id] = boxes
        records.append(
            ImageRecord(
                image_id=image_id,
                original_width=IMAGE_SIZE,
                original_height=IMAGE_SIZE,
                tensor_paths={"feat": f"tensors/{image_id}_feat.npy"},
                descriptor_path=f"descriptors/{image_id}.npy",
                ground_truth=boxes,
                class_label=class_names[cls],
            )
        )
    manifest = DatasetManifest(images=records, root=None)
    return SyntheticDataset(manifest, tensors, descriptors, ground_truth)


def write_synthetic_dataset(dataset: SyntheticDataset, out_dir) -> DatasetManifest:
    """Materialize a synthetic dataset under ``out_dir`` and return the bound manifest."""
    from pathlib import Path

    from .tensor_store import save_global_descriptor, save_manifest, save_tensor

    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    (out_dir / "descriptors").mkdir(parents=True, exist_ok=True)
    for rec in dataset.manifest.images:
        for _layer, rel in rec.tensor_paths.items():
            save_tensor(dataset.tensors[rec.image_id], out_dir / rel)
        if rec.descriptor_path:
            save_global_descriptor(dataset.descriptors[rec.image_id], out_dir / rec.descriptor_path)
    dataset.manifest.root = out_dir
    save_manifest(dataset.manifest, out_dir / "manifest.json")
    return dataset.manifest
