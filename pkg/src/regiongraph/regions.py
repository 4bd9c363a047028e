"""Object proposal geometry: boxes, IoU, frame projection and RoIAlign."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)


@dataclass
class RegionProposal:
    frame: int
    box: BoundingBox
    feature: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if self.frame < 0:
            raise ValueError(f"negative frame index {self.frame}")
        if self.feature.ndim != 1 or not np.all(np.isfinite(self.feature)):
            raise ValueError(f"proposal {self.source_id!r}: feature must be a finite vector")


@dataclass
class FeatureVolume:
    """Dense T x H x W x C feature map."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ValueError(f"feature volume must be 4-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature volume contains non-finite values")

    @property
    def t_dim(self) -> int:
        return self.data.shape[0]

    @property
    def h_dim(self) -> int:
        return self.data.shape[1]

    @property
    def w_dim(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def global_feature(self) -> np.ndarray:
        return self.data.reshape(-1, self.channels).mean(axis=0)


@dataclass
class ProjectionReport:
    kept: list[tuple[int, BoundingBox]] = field(default_factory=list)
    # (position in the input list, reason)
    dropped: list[tuple[int, str]] = field(default_factory=list)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a: Sequence[BoundingBox], boxes_b: Sequence[BoundingBox]) -> np.ndarray:
    """Pairwise IoU, vectorized; agrees with :func:`iou` entry by entry."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([bx.as_list() for bx in boxes_a], dtype=np.float64)
    b = np.array([bx.as_list() for bx in boxes_b], dtype=np.float64)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=overlap & (union > 0))
    return out


def project_boxes(boxes: Iterable[tuple[int, BoundingBox]], input_frames: int,
                  feature_frames: int, spatial_stride: float,
                  map_height: float | None = None,
                  map_width: float | None = None) -> ProjectionReport:
    """Map input-frame boxes onto the feature volume's frames and grid.

    Frame indices are divided by the temporal stride (``input_frames //
    feature_frames``) and coordinates by ``spatial_stride``.  When the map
    size is given, boxes are clipped to it; boxes left with no overlap are
    dropped and recorded in the report.
    """
    if feature_frames <= 0 or input_frames % feature_frames:
        raise ValueError(f"input_frames={input_frames} not divisible by feature_frames={feature_frames}")
    if spatial_stride <= 0:
        raise ValueError("spatial_stride must be positive")
    t_stride = input_frames // feature_frames
    report = ProjectionReport()
    for pos, (frame, box) in enumerate(boxes):
        if not 0 <= frame < input_frames:
            report.dropped.append((pos, f"input frame {frame} outside [0, {input_frames})"))
            log.warning("dropping box %d: frame %d out of range", pos, frame)
            continue
        x1, y1, x2, y2 = (c / spatial_stride for c in box.as_list())
        if map_width is not None:
            if x2 <= 0 or x1 >= map_width:
                report.dropped.append((pos, "outside feature map horizontally"))
                log.warning("dropping box %d: outside feature map", pos)
                continue
            x1, x2 = max(x1, 0.0), min(x2, float(map_width))
        if map_height is not None:
            if y2 <= 0 or y1 >= map_height:
                report.dropped.append((pos, "outside feature map vertically"))
                log.warning("dropping box %d: outside feature map", pos)
                continue
            y1, y2 = max(y1, 0.0), min(y2, float(map_height))
        report.kept.append((frame // t_stride, BoundingBox(x1, y1, x2, y2)))
    return report


def bilinear(plane: np.ndarray, y: float, x: float) -> np.ndarray:
    """Bilinear sample of an H x W x C plane at continuous (y, x).

    Pixel centers sit at integer + 0.5; samples beyond the outer centers are
    clamped to the border.
    """
    h, w = plane.shape[:2]
    y = min(max(y - 0.5, 0.0), h - 1.0)
    x = min(max(x - 0.5, 0.0), w - 1.0)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    ly, lx = y - y0, x - x0
    return ((1 - ly) * (1 - lx) * plane[y0, x0] + (1 - ly) * lx * plane[y0, x1]
            + ly * (1 - lx) * plane[y1, x0] + ly * lx * plane[y1, x1])


def roi_align(volume: FeatureVolume, frame: int, box: BoundingBox,
              bins: int = 7, samples_per_bin: int = 1) -> np.ndarray:
    """Pool one box to a C-vector.

    The box is split into ``bins x bins`` cells, each cell averages
    ``samples_per_bin**2`` bilinear samples on a regular interior grid, and
    the result is the channelwise max over all cells.
    """
    if not 0 <= frame < volume.t_dim:
        raise IndexError(f"frame {frame} outside [0, {volume.t_dim})")
    if bins < 1 or samples_per_bin < 1:
        raise ValueError("bins and samples_per_bin must be >= 1")
    plane = volume.data[frame]
    if box.area == 0:
        return bilinear(plane, 0.5 * (box.y1 + box.y2), 0.5 * (box.x1 + box.x2))

    bin_h = (box.y2 - box.y1) / bins
    bin_w = (box.x2 - box.x1) / bins
    s = samples_per_bin
    # sample offsets inside a cell, as fractions of the cell size
    offsets = (np.arange(s) + 0.5) / s
    ys = box.y1 + (np.arange(bins)[:, None] + offsets[None, :]).ravel() * bin_h
    xs = box.x1 + (np.arange(bins)[:, None] + offsets[None, :]).ravel() * bin_w
    samples = _bilinear_grid(plane, ys, xs)  # (bins*s, bins*s, C)
    c = plane.shape[2]
    cells = samples.reshape(bins, s, bins, s, c).mean(axis=(1, 3))
    return cells.reshape(-1, c).max(axis=0)


def _bilinear_grid(plane: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = plane.shape[:2]
    y = np.clip(ys - 0.5, 0.0, h - 1.0)
    x = np.clip(xs - 0.5, 0.0, w - 1.0)
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ly = (y - y0)[:, None, None]
    lx = (x - x0)[None, :, None]
    top = (1 - lx) * plane[y0][:, x0] + lx * plane[y0][:, x1]
    bottom = (1 - lx) * plane[y1][:, x0] + lx * plane[y1][:, x1]
    return (1 - ly) * top + ly * bottom
