"""Fixed-size region descriptors by max pooling feature tensors over boxes."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .geometry import Box
from .proposals import ProposalSet
from .tensor_store import FeatureTensor, load_array, save_array


@dataclass
class RegionDescriptor:
    image_id: str
    proposal_index: int
    vector: np.ndarray  # float32, length pool_grid**2 * D
    norm: float

    @classmethod
    def from_vector(cls, vector: np.ndarray, image_id: str = "", proposal_index: int = -1) -> "RegionDescriptor":
        vec = np.ascontiguousarray(vector, dtype=np.float32).ravel()
        return cls(image_id, proposal_index, vec, float(np.linalg.norm(vec.astype(np.float64))))

    def normalized(self) -> "RegionDescriptor":
        """Unit-norm copy; a zero vector stays zero."""
        if self.norm == 0.0:
            return RegionDescriptor(self.image_id, self.proposal_index, self.vector.copy(), 0.0)
        vec = (self.vector.astype(np.float64) / self.norm).astype(np.float32)
        return RegionDescriptor(self.image_id, self.proposal_index, vec, float(np.linalg.norm(vec.astype(np.float64))))


def _axis_range(lo_px: int, hi_px: int, cells: int, extent: int) -> tuple[int, int]:
    """Inward-rounded inclusive cell range covered by [lo_px, hi_px); never empty.

    A cell is kept only when it lies fully inside the pixel span; when no
    cell does, the cell containing the span center is used.
    """
    lo = -((-lo_px * cells) // extent)  # ceil(lo_px * cells / extent)
    hi = (hi_px * cells) // extent - 1  # floor(hi_px * cells / extent) - 1
    if lo > hi:
        center = ((lo_px + hi_px) * cells) // (2 * extent)
        center = min(max(center, 0), cells - 1)
        return center, center
    return lo, hi


def _axis_bins(start: int, stop: int, bins: int) -> list[tuple[int, int]]:
    """Split the inclusive cell range into ``bins`` near-equal windows.

    Windows left empty by the split borrow the nearest nonempty window on
    the same axis (lower index on ties).
    """
    length = stop - start + 1
    raw = [(start + (b * length) // bins, start + ((b + 1) * length) // bins) for b in range(bins)]
    nonempty = [b for b, (lo, hi) in enumerate(raw) if hi > lo]
    out = []
    for b, (lo, hi) in enumerate(raw):
        if hi > lo:
            out.append((lo, hi))
        else:
            nearest = min(nonempty, key=lambda idx: (abs(idx - b), idx))
            out.append(raw[nearest])
    return out


def roi_pool(
    tensor: FeatureTensor,
    box: Box,
    image_size: tuple[int, int],
    pool_grid: int = 3,
    image_id: str = "",
    proposal_index: int = -1,
) -> RegionDescriptor:
    """Channelwise max pooling of the box region on a pool_grid x pool_grid layout.

    The box is mapped to feature-grid cells by inward rounding (minimum
    one cell), the cell region is split into near-equal sub-windows, and
    each sub-window contributes the channelwise maximum. The descriptor is
    the row-major concatenation of sub-window maxima, unnormalized.
    """
    if pool_grid < 1:
        raise ValueError("pool_grid must be >= 1")
    img_w, img_h = image_size
    clamped = box.clamped(img_w, img_h)
    cmin, cmax = _axis_range(clamped.xmin, clamped.xmax, tensor.width, img_w)
    rmin, rmax = _axis_range(clamped.ymin, clamped.ymax, tensor.height, img_h)
    row_bins = _axis_bins(rmin, rmax, pool_grid)
    col_bins = _axis_bins(cmin, cmax, pool_grid)
    parts = []
    for r_lo, r_hi in row_bins:
        for c_lo, c_hi in col_bins:
            window = tensor.values[r_lo:r_hi, c_lo:c_hi]
            parts.append(window.max(axis=(0, 1)))
    return RegionDescriptor.from_vector(np.concatenate(parts), image_id, proposal_index)


def cosine(a: RegionDescriptor, b: RegionDescriptor) -> float:
    """Cosine similarity in [-1, 1]; zero-norm inputs score 0."""
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    dot = float(np.dot(a.vector.astype(np.float64), b.vector.astype(np.float64)))
    return dot / (a.norm * b.norm)


def build_region_descriptors(
    tensor: FeatureTensor,
    proposal_set: ProposalSet,
    image_size: tuple[int, int],
    pool_grid: int = 3,
    normalize: bool = True,
) -> list[RegionDescriptor]:
    """Descriptors for every proposal of one image, normalized by default."""
    descs = []
    for idx, proposal in enumerate(proposal_set.proposals):
        desc = roi_pool(tensor, proposal.box, image_size, pool_grid, proposal_set.image_id, idx)
        descs.append(desc.normalized() if normalize else desc)
    return descs


def save_descriptor_cache(descriptors: list[RegionDescriptor], path: str | os.PathLike) -> None:
    """Persist an image's region descriptors as a (num_proposals, dim) array."""
    if not descriptors:
        raise ValueError("nothing to save")
    save_array(np.stack([d.vector for d in descriptors]), path)


def load_descriptor_cache(path: str | os.PathLike, image_id: str) -> list[RegionDescriptor]:
    matrix = load_array(path, expect_ndim=2)
    return [RegionDescriptor.from_vector(row, image_id, idx) for idx, row in enumerate(matrix)]
