"""Axis-aligned boxes in image pixel coordinates, shared by all stages.

Boxes are half-open: a box covers pixels with x in [xmin, xmax) and
y in [ymin, ymax), so its area is (xmax - xmin) * (ymax - ymin).
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True, order=True)
class Box:
    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def __post_init__(self) -> None:
        if self.xmin >= self.xmax or self.ymin >= self.ymax:
            raise ValueError(f"box has no area: {self.as_list()}")

    @property
    def width(self) -> int:
        return self.xmax - self.xmin

    @property
    def height(self) -> int:
        return self.ymax - self.ymin

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_list(self) -> list[int]:
        return [self.xmin, self.ymin, self.xmax, self.ymax]

    @classmethod
    def from_list(cls, coords) -> "Box":
        xmin, ymin, xmax, ymax = (int(c) for c in coords)
        return cls(xmin, ymin, xmax, ymax)

    def clamped(self, image_width: int, image_height: int) -> "Box":
        """Clamp to [0, image_width] x [0, image_height]."""
        return Box(
            max(0, min(self.xmin, image_width - 1)),
            max(0, min(self.ymin, image_height - 1)),
            max(1, min(self.xmax, image_width)),
            max(1, min(self.ymax, image_height)),
        )

    def inside(self, image_width: int, image_height: int) -> bool:
        return 0 <= self.xmin and 0 <= self.ymin and self.xmax <= image_width and self.ymax <= image_height


def intersection_area(a: Box, b: Box) -> int:
    w = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    h = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if w <= 0 or h <= 0:
        return 0
    return w * h


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    return inter / float(a.area + b.area - inter)
