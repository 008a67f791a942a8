"""File-based pipeline stages over a state directory.

Every stage reads the previous stage's outputs from the state directory,
writes its own, and records a meta file echoing the full configuration
plus its content hash. Rerunning a stage with an unchanged hash is a
no-op: nothing is recomputed and no output byte changes. All randomness
derives from one master seed through named per-stage derivations
(see :mod:`objdiscover.seeds`).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from . import evaluation
from .discovery import (
    DiscoveryConfig,
    EmptySelection,
    postprocess_multi,
    postprocess_single,
    read_solution_jsonl,
    run,
    write_solution_jsonl,
)
from .geometry import Box
from .largescale import plan_budget, run_two_stage
from .matching import compute_scores, load_scores, memory_cost, prefilter_neighbors, save_scores
from .proposals import ProposalParams, fuse_layers, generate_for_layer, read_proposals_jsonl, write_proposals_jsonl
from .region_features import build_region_descriptors
from .seeds import derive_seed
from .tensor_store import (
    DatasetManifest,
    load_image_descriptor,
    load_image_tensor,
    load_manifest,
    validate_manifest,
)


class PipelineError(Exception):
    """Runtime failure inside a stage."""


class ValidationFailure(PipelineError):
    """Bad inputs or configuration; maps to exit code 2 in the CLI."""


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of every stage, hashed as one document."""

    alpha: float = 0.3
    beta: float = 0.5
    max_maxima: int = 20
    threshold_count: int = 50
    pool_grid: int = 3
    neighbor_cap: int = 50
    score_budget: int = 50
    roi_layer: str = "auto"
    nu: int = 5
    tau: int = 10
    use_groups: bool = True
    max_sweeps: int = 50
    multi: bool = False
    nms_iou: float = 0.7
    max_regions: int = 5
    parts: int = 2
    memory_limit: int = 0  # 0 derives M = n * neighbor_cap * score_budget
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValidationFailure("alpha and beta must lie in [0, 1]")
        for name in ("max_maxima", "threshold_count", "pool_grid", "neighbor_cap", "score_budget",
                     "nu", "tau", "max_sweeps", "max_regions", "parts"):
            if getattr(self, name) < 1:
                raise ValidationFailure(f"{name} must be >= 1")
        if not (0.0 < self.nms_iou <= 1.0):
            raise ValidationFailure("nms_iou must lie in (0, 1]")

    def content_hash(self) -> str:
        doc = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()

    @classmethod
    def from_document(cls, doc: dict, overrides: dict | None = None) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationFailure(f"unknown config fields: {sorted(unknown)}")
        merged = dict(doc)
        if overrides:
            merged.update({k: v for k, v in overrides.items() if k in known})
        cfg = cls(**merged)
        cfg.validate()
        return cfg


def _meta_path(state_dir: Path, stage: str) -> Path:
    return state_dir / f"{stage}.meta.json"


def stage_is_current(state_dir: Path, stage: str, config_hash: str, outputs: list[Path]) -> bool:
    meta = _meta_path(state_dir, stage)
    if not meta.exists() or not all(p.exists() for p in outputs):
        return False
    try:
        doc = json.loads(meta.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False
    return doc.get("config_hash") == config_hash


def write_stage_meta(state_dir: Path, stage: str, config: PipelineConfig, extra: dict | None = None) -> None:
    doc = {
        "stage": stage,
        "config_hash": config.content_hash(),
        "config": dataclasses.asdict(config),
    }
    if extra:
        doc.update(extra)
    tmp = _meta_path(state_dir, stage).with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    os.replace(tmp, _meta_path(state_dir, stage))


def _load_validated_manifest(state_dir: Path) -> DatasetManifest:
    manifest_path = state_dir / "manifest.json"
    if not manifest_path.exists():
        raise ValidationFailure(f"no manifest at {manifest_path}")
    manifest = load_manifest(manifest_path)
    violations = validate_manifest(manifest)
    if violations:
        raise ValidationFailure("manifest invalid: " + "; ".join(violations[:10]))
    return manifest


def _require_inputs(state_dir: Path, stage: str, names: list[str]) -> None:
    missing = [n for n in names if not (state_dir / n).exists()]
    if missing:
        raise ValidationFailure(f"{stage} needs prior-stage outputs {missing}; run the earlier stages first")


def resolve_roi_layer(manifest: DatasetManifest, requested: str) -> str:
    if requested != "auto":
        return requested
    tags = sorted({tag for rec in manifest.images for tag in rec.tensor_paths})
    if len(tags) == 1:
        return tags[0]
    for preferred in ("relu5_3", "relu5_4"):
        if preferred in tags:
            return preferred
    raise ValidationFailure(f"cannot pick an RoI layer among {tags}; set roi_layer explicitly")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_synth(state_dir: Path, images: int, classes: int, noise: float, seed: int) -> bool:
    """Generate and persist a synthetic dataset. Returns False when skipped."""
    state_dir.mkdir(parents=True, exist_ok=True)
    marker = state_dir / "synth.meta.json"
    params = {"images": images, "classes": classes, "noise": noise, "seed": seed}
    params_hash = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()
    if marker.exists() and (state_dir / "manifest.json").exists():
        try:
            if json.loads(marker.read_text())["config_hash"] == params_hash:
                return False
        except (OSError, json.JSONDecodeError, KeyError):
            pass
    dataset = evaluation.generate_synthetic(images, classes, noise, derive_seed(seed, "synth"))
    evaluation.write_synthetic_dataset(dataset, state_dir)
    marker.write_text(json.dumps({"stage": "synth", "config_hash": params_hash, "config": params},
                                 sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return True


def stage_propose(state_dir: Path, config: PipelineConfig) -> bool:
    config.validate()
    outputs = [state_dir / "proposals.jsonl"]
    if stage_is_current(state_dir, "propose", config.content_hash(), outputs):
        return False
    manifest = _load_validated_manifest(state_dir)
    params = ProposalParams(
        alpha=config.alpha,
        beta=config.beta,
        max_maxima=config.max_maxima,
        threshold_count=config.threshold_count,
    )
    sets = []
    for rec in manifest.images:
        per_layer = []
        for layer in sorted(rec.tensor_paths):
            tensor = load_image_tensor(manifest, rec.image_id, layer)
            pset = generate_for_layer(tensor, params, (rec.original_width, rec.original_height))
            pset.image_id = rec.image_id
            per_layer.append(pset)
        fused = fuse_layers(per_layer)
        fused.validate()
        sets.append(fused)
    write_proposals_jsonl(sets, outputs[0])
    write_stage_meta(state_dir, "propose", config)
    return True


def stage_score(state_dir: Path, config: PipelineConfig) -> bool:
    config.validate()
    outputs = [state_dir / "neighbors.json", state_dir / "scores.bin", state_dir / "scores.index.json"]
    if stage_is_current(state_dir, "score", config.content_hash(), outputs):
        return False
    _require_inputs(state_dir, "score", ["proposals.jsonl"])
    manifest = _load_validated_manifest(state_dir)
    proposal_sets = {p.image_id: p for p in read_proposals_jsonl(state_dir / "proposals.jsonl")}
    missing = [rec.image_id for rec in manifest.images if rec.image_id not in proposal_sets]
    if missing:
        raise ValidationFailure(f"proposals missing for images: {missing[:5]}")
    ids = sorted(proposal_sets)
    if len(ids) < 2:
        raise ValidationFailure("need at least 2 images to score pairs")
    roi_layer = resolve_roi_layer(manifest, config.roi_layer)
    cap = min(config.neighbor_cap, len(ids) - 1)
    neighbor_sets = prefilter_neighbors([load_image_descriptor(manifest, i) for i in ids], cap)
    descriptors = {}
    for i in ids:
        rec = manifest.record(i)
        tensor = load_image_tensor(manifest, i, roi_layer)
        descriptors[i] = build_region_descriptors(
            tensor, proposal_sets[i], (rec.original_width, rec.original_height), config.pool_grid
        )
    scores = compute_scores(descriptors, neighbor_sets, config.score_budget, workers=config.workers)
    tmp = outputs[0].with_suffix(".tmp")
    tmp.write_text(json.dumps(neighbor_sets, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    os.replace(tmp, outputs[0])
    save_scores(scores, outputs[1], outputs[2])
    write_stage_meta(state_dir, "score", config,
                     {"memory_cost": memory_cost(neighbor_sets, config.score_budget),
                      "stored_entries": scores.entry_count()})
    return True


def _write_predictions(path: Path, predictions: dict[str, list[Box]]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for image_id in sorted(predictions):
            fh.write(json.dumps({"image_id": image_id,
                                 "boxes": [b.as_list() for b in predictions[image_id]]}) + "\n")
    os.replace(tmp, path)


def read_predictions(path: Path) -> dict[str, list[Box]]:
    predictions: dict[str, list[Box]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                doc = json.loads(line)
                predictions[doc["image_id"]] = [Box.from_list(b) for b in doc["boxes"]]
    return predictions


def _postprocess(solution, scores, proposal_sets, config: PipelineConfig) -> dict[str, list[Box]]:
    predictions: dict[str, list[Box]] = {}
    for image_id in sorted(solution.x):
        pset = proposal_sets[image_id]
        try:
            if config.multi:
                predictions[image_id] = postprocess_multi(solution, scores, pset,
                                                          config.nms_iou, config.max_regions)
            else:
                predictions[image_id] = [postprocess_single(solution, scores, pset)]
        except EmptySelection:
            predictions[image_id] = []
    return predictions


def stage_discover(state_dir: Path, config: PipelineConfig) -> bool:
    config.validate()
    outputs = [state_dir / "solution.jsonl", state_dir / "predictions.jsonl"]
    if stage_is_current(state_dir, "discover", config.content_hash(), outputs):
        return False
    _require_inputs(state_dir, "discover", ["neighbors.json", "scores.bin", "scores.index.json",
                                            "proposals.jsonl"])
    neighbor_sets = json.loads((state_dir / "neighbors.json").read_text(encoding="utf-8"))
    scores = load_scores(state_dir / "scores.bin", state_dir / "scores.index.json")
    proposal_sets = {p.image_id: p for p in read_proposals_jsonl(state_dir / "proposals.jsonl")}
    groups = {i: proposal_sets[i].groups() for i in neighbor_sets}
    cfg = DiscoveryConfig(
        nu=config.nu,
        tau=config.tau,
        use_groups=config.use_groups,
        max_sweeps=config.max_sweeps,
        seed=derive_seed(config.seed, "discover"),
    )
    solution = run(scores, neighbor_sets, groups, cfg)
    write_solution_jsonl(solution, scores, outputs[0])
    _write_predictions(outputs[1], _postprocess(solution, scores, proposal_sets, config))
    write_stage_meta(state_dir, "discover", config,
                     {"objective": solution.objective, "sweeps": solution.sweeps_run})
    return True


def stage_discover_large(state_dir: Path, config: PipelineConfig) -> bool:
    config.validate()
    outputs = [state_dir / "solution.jsonl", state_dir / "predictions.jsonl",
               state_dir / "largescale" / "plan.json"]
    if stage_is_current(state_dir, "discover-large", config.content_hash(), outputs):
        return False
    _require_inputs(state_dir, "discover-large", ["proposals.jsonl"])
    manifest = _load_validated_manifest(state_dir)
    proposal_sets = {p.image_id: p for p in read_proposals_jsonl(state_dir / "proposals.jsonl")}
    ids = sorted(proposal_sets)
    n = len(ids)
    if config.parts > n:
        raise ValidationFailure(f"cannot split {n} images into {config.parts} parts")
    cap = min(config.neighbor_cap, n - 1)
    memory = config.memory_limit or n * cap * config.score_budget
    plan = plan_budget(n, config.parts, cap, memory, derive_seed(config.seed, "partition"), ids)
    stage2_cfg = DiscoveryConfig(
        nu=config.nu,
        tau=config.tau,
        use_groups=config.use_groups,
        max_sweeps=config.max_sweeps,
        seed=derive_seed(config.seed, "discover"),
    )
    roi_layer = resolve_roi_layer(manifest, config.roi_layer)
    result = run_two_stage(
        manifest,
        proposal_sets,
        plan,
        None,
        stage2_cfg,
        roi_layer,
        pool_grid=config.pool_grid,
        state_dir=state_dir / "largescale",
        workers=config.workers,
    )
    write_solution_jsonl(result.solution, result.scores, outputs[0])
    _write_predictions(outputs[1], _postprocess(result.solution, result.scores, result.shortlists, config))
    write_stage_meta(state_dir, "discover-large", config,
                     {"objective": result.solution.objective,
                      "stage1_budget": plan.stage1_budget,
                      "stage2_budget": plan.stage2_budget,
                      "peak_entries": result.peak_entries})
    return True


def stage_evaluate(state_dir: Path, config: PipelineConfig, metric: str, per_class: bool) -> dict:
    config.validate()
    manifest = _load_validated_manifest(state_dir)
    ground_truth = {rec.image_id: rec.ground_truth or [] for rec in manifest.images}
    classes = {rec.image_id: rec.class_label for rec in manifest.images}
    have_labels = all(v is not None for v in classes.values())
    class_map = {k: str(v) for k, v in classes.items()} if (per_class and have_labels) else None
    if metric in ("corloc", "detection-rate"):
        _require_inputs(state_dir, "evaluate", ["predictions.jsonl"])
    if metric == "corloc":
        predictions = read_predictions(state_dir / "predictions.jsonl")
        report = evaluation.corloc(predictions, ground_truth, class_map)
    elif metric == "detection-rate":
        predictions = read_predictions(state_dir / "predictions.jsonl")
        report = evaluation.detection_rate(predictions, ground_truth, class_map)
    elif metric == "corret":
        if not have_labels:
            raise ValidationFailure("corret needs class labels on every image")
        _require_inputs(state_dir, "evaluate", ["solution.jsonl"])
        solution = read_solution_jsonl(state_dir / "solution.jsonl")
        report = evaluation.corret(solution.e, {k: str(v) for k, v in classes.items()})
    else:
        raise ValidationFailure(f"unknown metric {metric!r}")
    doc = report.to_dict()
    (state_dir / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    (state_dir / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    (state_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    return doc
