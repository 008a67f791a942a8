"""File-backed storage for feature tensors, descriptors and dataset manifests.

Tensor files use a deliberately small subset of the NPY v1.0 format:
little-endian float32, C-contiguous, with a 3-axis (H, W, D) shape for
feature tensors, 1-axis for global descriptor vectors and 2-axis for
per-image descriptor caches. Anything numpy's ``np.save`` emits for such
arrays loads here, and files written here load with ``np.load``.

Manifests are UTF-8 JSON documents; all paths inside a manifest are
relative to the manifest's own directory, so datasets can be relocated
wholesale.
"""

from __future__ import annotations

import ast
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import Box

_MAGIC = b"\x93NUMPY"
_HEADER_ALIGN = 64


class TensorStoreError(Exception):
    """Base class for storage failures."""


class MalformedHeader(TensorStoreError):
    pass


class ShapeMismatch(TensorStoreError):
    pass


class NonFiniteValue(TensorStoreError):
    pass


class IoFailure(TensorStoreError):
    pass


class ParseError(TensorStoreError):
    """Raised when a manifest document cannot be interpreted."""


@dataclass
class FeatureTensor:
    """A dense H x W x D activation volume for one image."""

    height: int
    width: int
    depth: int
    values: np.ndarray  # float32, shape (H, W, D), C-contiguous
    layer_tag: str = ""

    @classmethod
    def from_array(cls, values: np.ndarray, layer_tag: str = "") -> "FeatureTensor":
        arr = np.ascontiguousarray(values, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeMismatch(f"feature tensor must have 3 axes, got {arr.ndim}")
        t = cls(arr.shape[0], arr.shape[1], arr.shape[2], arr, layer_tag)
        t.validate()
        return t

    def validate(self) -> None:
        if min(self.height, self.width, self.depth) < 1:
            raise ShapeMismatch(f"all dimensions must be >= 1, got {(self.height, self.width, self.depth)}")
        if self.values.shape != (self.height, self.width, self.depth):
            raise ShapeMismatch(f"values shape {self.values.shape} != {(self.height, self.width, self.depth)}")
        if not np.isfinite(self.values).all():
            raise NonFiniteValue("tensor contains non-finite values")


@dataclass
class GlobalDescriptor:
    """Whole-image descriptor used for neighbor prefiltering."""

    image_id: str
    vector: np.ndarray
    norm: float

    @classmethod
    def from_vector(cls, image_id: str, vector: np.ndarray) -> "GlobalDescriptor":
        vec = np.asarray(vector, dtype=np.float32).ravel()
        if vec.size == 0:
            raise ValueError(f"empty descriptor for image {image_id!r}")
        return cls(image_id, vec, float(np.linalg.norm(vec.astype(np.float64))))


@dataclass
class GroundTruthBox:
    box: Box
    label: str | None = None


@dataclass
class ImageRecord:
    image_id: str
    original_width: int
    original_height: int
    tensor_paths: dict[str, str] = field(default_factory=dict)
    descriptor_path: str | None = None
    ground_truth: list[GroundTruthBox] | None = None
    class_label: str | None = None


@dataclass
class DatasetManifest:
    """Catalog binding image ids to tensor files, descriptors and ground truth."""

    images: list[ImageRecord]
    root: Path | None = None  # directory paths are resolved against

    def record(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)

    def resolve(self, relative: str) -> Path:
        if self.root is None:
            return Path(relative)
        return self.root / relative


# ---------------------------------------------------------------------------
# NPY subset reader / writer
# ---------------------------------------------------------------------------

def _format_header(shape: tuple[int, ...]) -> bytes:
    shape_repr = "(" + ", ".join(str(int(s)) for s in shape) + ("," if len(shape) == 1 else "") + ")"
    header = "{'descr': '<f4', 'fortran_order': False, 'shape': %s, }" % shape_repr
    prefix_len = len(_MAGIC) + 2 + 2  # magic + version + header-length field
    total = prefix_len + len(header) + 1
    pad = (-total) % _HEADER_ALIGN
    header = header + " " * pad + "\n"
    if len(header) > 0xFFFF:
        raise IoFailure("header too large for NPY v1.0")
    return _MAGIC + bytes((1, 0)) + struct.pack("<H", len(header)) + header.encode("latin1")


def _read_header(raw: bytes, path: str) -> tuple[tuple[int, ...], int]:
    """Parse the NPY v1.0 header; returns (shape, data_offset)."""
    if len(raw) < 10:
        raise MalformedHeader(f"{path}: truncated at offset {len(raw)} (no NPY header)")
    if raw[:6] != _MAGIC:
        raise MalformedHeader(f"{path}: bad magic at offset 0")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise MalformedHeader(f"{path}: unsupported NPY version {major}.{minor} at offset 6")
    (header_len,) = struct.unpack("<H", raw[8:10])
    data_offset = 10 + header_len
    if len(raw) < data_offset:
        raise MalformedHeader(f"{path}: header truncated at offset {len(raw)}, expected {data_offset} bytes")
    try:
        meta = ast.literal_eval(raw[10:data_offset].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise MalformedHeader(f"{path}: unparsable header dict at offset 10: {exc}") from exc
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise MalformedHeader(f"{path}: header at offset 10 missing required keys")
    if meta["descr"] != "<f4":
        raise MalformedHeader(f"{path}: unsupported dtype {meta['descr']!r} (only '<f4')")
    if meta["fortran_order"] is not False:
        raise MalformedHeader(f"{path}: fortran_order must be False")
    shape = meta["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 1 for s in shape):
        raise MalformedHeader(f"{path}: invalid shape {shape!r}")
    return shape, data_offset


def save_array(values: np.ndarray, path: str | os.PathLike) -> None:
    """Write a float32 array atomically (temp file + rename)."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(_format_header(arr.shape))
                fh.write(arr.tobytes(order="C"))
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_array(path: str | os.PathLike, expect_ndim: int | None = None) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    shape, data_offset = _read_header(raw, str(path))
    if expect_ndim is not None and len(shape) != expect_ndim:
        raise ShapeMismatch(f"{path}: expected {expect_ndim} axes, header says {shape}")
    count = int(np.prod(shape))
    payload = raw[data_offset:]
    if len(payload) != 4 * count:
        raise ShapeMismatch(
            f"{path}: shape {shape} needs {4 * count} data bytes, found {len(payload)} at offset {data_offset}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    finite = np.isfinite(arr)
    if not finite.all():
        bad = int(np.flatnonzero(~finite.ravel())[0])
        raise NonFiniteValue(f"{path}: non-finite value at element {bad} (byte offset {data_offset + 4 * bad})")
    return arr.copy()


def save_tensor(tensor: FeatureTensor, path: str | os.PathLike) -> None:
    tensor.validate()
    save_array(tensor.values, path)


def load_tensor(path: str | os.PathLike, layer_tag: str = "") -> FeatureTensor:
    values = load_array(path, expect_ndim=3)
    return FeatureTensor.from_array(values, layer_tag=layer_tag)


def save_global_descriptor(desc: GlobalDescriptor, path: str | os.PathLike) -> None:
    save_array(desc.vector, path)


def load_global_descriptor(path: str | os.PathLike, image_id: str) -> GlobalDescriptor:
    return GlobalDescriptor.from_vector(image_id, load_array(path, expect_ndim=1))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def _require(doc: dict, key: str, ctx: str):
    if key not in doc:
        raise ParseError(f"{ctx}: missing field {key!r}")
    return doc[key]


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    images = []
    for rec in manifest.images:
        entry: dict = {
            "image_id": rec.image_id,
            "original_width": rec.original_width,
            "original_height": rec.original_height,
            "tensor_paths": dict(rec.tensor_paths),
        }
        if rec.descriptor_path is not None:
            entry["descriptor_path"] = rec.descriptor_path
        if rec.class_label is not None:
            entry["class_label"] = rec.class_label
        if rec.ground_truth is not None:
            entry["ground_truth"] = [
                {"box": gt.box.as_list(), **({"label": gt.label} if gt.label is not None else {})}
                for gt in rec.ground_truth
            ]
        images.append(entry)
    return {"version": 1, "images": images}


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    try:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Parse a manifest document; structural problems raise ParseError.

    Invariant checks (duplicate ids, unresolvable paths, out-of-bounds
    ground truth) are the job of :func:`validate_manifest`.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: manifest must be a JSON object")
    raw_images = _require(doc, "images", str(path))
    if not isinstance(raw_images, list):
        raise ParseError(f"{path}: field 'images' must be a list")
    images: list[ImageRecord] = []
    for idx, entry in enumerate(raw_images):
        ctx = f"{path}: images[{idx}]"
        if not isinstance(entry, dict):
            raise ParseError(f"{ctx}: must be an object")
        image_id = _require(entry, "image_id", ctx)
        if not isinstance(image_id, str) or not image_id:
            raise ParseError(f"{ctx}: field 'image_id' must be a non-empty string")
        ctx = f"{path}: image {image_id!r}"
        try:
            width = int(_require(entry, "original_width", ctx))
            height = int(_require(entry, "original_height", ctx))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{ctx}: image size fields must be integers") from exc
        tensor_paths = _require(entry, "tensor_paths", ctx)
        if not isinstance(tensor_paths, dict):
            raise ParseError(f"{ctx}: field 'tensor_paths' must be an object")
        ground_truth = None
        if entry.get("ground_truth") is not None:
            ground_truth = []
            for gt_idx, gt in enumerate(entry["ground_truth"]):
                gt_ctx = f"{ctx}: ground_truth[{gt_idx}]"
                try:
                    box = Box.from_list(_require(gt, "box", gt_ctx))
                except (TypeError, ValueError) as exc:
                    raise ParseError(f"{gt_ctx}: field 'box': {exc}") from exc
                ground_truth.append(GroundTruthBox(box, gt.get("label")))
        images.append(
            ImageRecord(
                image_id=image_id,
                original_width=width,
                original_height=height,
                tensor_paths={str(k): str(v) for k, v in tensor_paths.items()},
                descriptor_path=entry.get("descriptor_path"),
                ground_truth=ground_truth,
                class_label=entry.get("class_label"),
            )
        )
    return DatasetManifest(images=images, root=path.parent)


def load_image_tensor(manifest: DatasetManifest, image_id: str, layer_tag: str) -> FeatureTensor:
    rec = manifest.record(image_id)
    if layer_tag not in rec.tensor_paths:
        raise IoFailure(f"image {image_id!r} has no tensor for layer {layer_tag!r}")
    return load_tensor(manifest.resolve(rec.tensor_paths[layer_tag]), layer_tag=layer_tag)


def load_image_descriptor(manifest: DatasetManifest, image_id: str) -> GlobalDescriptor:
    rec = manifest.record(image_id)
    if not rec.descriptor_path:
        raise IoFailure(f"image {image_id!r} has no descriptor path")
    return load_global_descriptor(manifest.resolve(rec.descriptor_path), image_id)


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Check manifest invariants; returns human-readable violations."""
    violations: list[str] = []
    seen: set[str] = set()
    for rec in manifest.images:
        if rec.image_id in seen:
            violations.append(f"image {rec.image_id!r}: duplicate id")
        seen.add(rec.image_id)
        if rec.original_width < 1 or rec.original_height < 1:
            violations.append(f"image {rec.image_id!r}: non-positive image size")
        paths: Iterable[str] = list(rec.tensor_paths.values())
        if rec.descriptor_path is not None:
            paths = [*paths, rec.descriptor_path]
        if manifest.root is not None:
            for rel in paths:
                if not manifest.resolve(rel).exists():
                    violations.append(f"image {rec.image_id!r}: path {rel!r} does not resolve")
        if rec.ground_truth:
            for gt in rec.ground_truth:
                if not gt.box.inside(rec.original_width, rec.original_height):
                    violations.append(
                        f"image {rec.image_id!r}: ground_truth box {gt.box.as_list()} exceeds image bounds"
                    )
    return violations
