"""Export VGG16/VGG19 activations for a directory of images.

Per image, one NPY tensor file per requested convolutional layer (shape
H x W x D, float32, channels last) plus one 4096-d fc6 descriptor, and a
manifest.json binding it all together — the exact file formats the
discovery pipeline reads.

Convolutional layers see the image at its native aspect ratio with the
long side capped; fc6 needs the fixed 224x224 input, so the descriptor
comes from a separate square-resized forward pass. Inputs are scaled to
[0, 1] and normalized with the standard ImageNet channel statistics.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger("vggexport")

# Output indices of the wanted activations inside torchvision's
# Sequential feature stacks.
LAYER_INDICES = {
    "vgg16": {"relu4_3": 22, "relu5_3": 29},
    "vgg19": {"relu4_4": 26, "relu5_4": 35},
}
DEFAULT_LAYERS = {
    "vgg16": ["relu4_3", "relu5_3"],
    "vgg19": ["relu4_4", "relu5_4"],
}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
FC_INPUT_SIDE = 224


class ExtractionError(Exception):
    pass


class MissingWeights(ExtractionError):
    pass


class UnreadableImage(ExtractionError):
    pass


@dataclass
class ExtractionSpec:
    network: str  # "vgg16" | "vgg19"
    images_dir: Path
    out_dir: Path
    layers: list[str] = field(default_factory=list)
    weights: str = "pretrained"  # "pretrained" | "none" | path to a state dict
    long_side: int = 1024

    def __post_init__(self) -> None:
        if self.network not in LAYER_INDICES:
            raise ExtractionError(f"unknown network {self.network!r}")
        if not self.layers:
            self.layers = list(DEFAULT_LAYERS[self.network])
        known = LAYER_INDICES[self.network]
        bad = [t for t in self.layers if t not in known]
        if bad:
            raise ExtractionError(f"layers {bad} not valid for {self.network}; choose from {sorted(known)}")
        if self.long_side < 32:
            raise ExtractionError("long_side must be >= 32")


def build_model(spec: ExtractionSpec) -> torch.nn.Module:
    from torchvision import models

    factory = models.vgg16 if spec.network == "vgg16" else models.vgg19
    if spec.weights == "none":
        # Deterministic random initialization; useful for wiring tests
        # when no pretrained weights are reachable.
        torch.manual_seed(0)
        model = factory(weights=None)
    elif spec.weights == "pretrained":
        try:
            model = factory(weights="IMAGENET1K_V1")
        except Exception as exc:
            raise MissingWeights(
                f"cannot obtain pretrained {spec.network} weights ({exc}); "
                "pass --weights PATH for a local state dict or --weights none"
            ) from exc
    else:
        path = Path(spec.weights)
        if not path.exists():
            raise MissingWeights(f"no weights file at {path}")
        model = factory(weights=None)
        model.load_state_dict(torch.load(path, map_location="cpu"))
    model.eval()
    return model


def load_image(path: Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except Exception as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc


def _to_input(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGENET_MEAN, dtype=np.float32)) / np.asarray(IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def _capped_size(width: int, height: int, long_side: int) -> tuple[int, int]:
    longest = max(width, height)
    if longest <= long_side:
        return width, height
    scale = long_side / longest
    return max(32, round(width * scale)), max(32, round(height * scale))


@torch.no_grad()
def conv_activations(model: torch.nn.Module, img: Image.Image, spec: ExtractionSpec) -> dict[str, np.ndarray]:
    """Channels-last float32 feature tensors for every requested layer."""
    width, height = _capped_size(*img.size, spec.long_side)
    x = _to_input(img.resize((width, height), Image.BILINEAR))
    wanted = {LAYER_INDICES[spec.network][t]: t for t in spec.layers}
    out: dict[str, np.ndarray] = {}
    for idx, module in enumerate(model.features):
        x = module(x)
        if idx in wanted:
            out[wanted[idx]] = np.ascontiguousarray(
                x.squeeze(0).permute(1, 2, 0).numpy().astype(np.float32)
            )
        if idx >= max(wanted):
            break
    return out


@torch.no_grad()
def fc6_descriptor(model: torch.nn.Module, img: Image.Image) -> np.ndarray:
    """4096-d activation of the first fully connected layer (after its ReLU)."""
    x = _to_input(img.resize((FC_INPUT_SIDE, FC_INPUT_SIDE), Image.BILINEAR))
    x = model.features(x)
    x = model.avgpool(x)
    x = torch.flatten(x, 1)
    x = model.classifier[1](model.classifier[0](x))
    return x.squeeze(0).numpy().astype(np.float32)


def save_npy(values: np.ndarray, path: Path) -> None:
    """NPY v1.0, little-endian float32, C-order — what the pipeline reads."""
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        np.save(fh, np.ascontiguousarray(values, dtype=np.float32))
    tmp.replace(path)


IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tiff", ".webp"}


def extract(spec: ExtractionSpec) -> dict:
    """Run the export; returns the manifest document that was written."""
    images = sorted(p for p in spec.images_dir.iterdir()
                    if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise ExtractionError(f"no images found under {spec.images_dir}")
    model = build_model(spec)
    (spec.out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    (spec.out_dir / "descriptors").mkdir(parents=True, exist_ok=True)

    records = []
    skipped = 0
    for path in images:
        image_id = path.stem
        try:
            img = load_image(path)
        except UnreadableImage as exc:
            skipped += 1
            log.warning("skipping unreadable image: %s", exc)
            continue
        tensor_paths = {}
        for tag, values in conv_activations(model, img, spec).items():
            rel = f"tensors/{image_id}_{tag}.npy"
            save_npy(values, spec.out_dir / rel)
            tensor_paths[tag] = rel
        descriptor_rel = f"descriptors/{image_id}.npy"
        save_npy(fc6_descriptor(model, img), spec.out_dir / descriptor_rel)
        records.append({
            "image_id": image_id,
            "original_width": img.size[0],
            "original_height": img.size[1],
            "tensor_paths": tensor_paths,
            "descriptor_path": descriptor_rel,
        })
    if not records:
        raise ExtractionError("every image was unreadable")
    manifest = {"version": 1, "images": records}
    manifest_path = spec.out_dir / "manifest.json"
    tmp = manifest_path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(manifest_path)
    log.info("extracted %d image(s), skipped %d", len(records), skipped)
    return manifest
