"""Shape and occlusion statistics of amodal datasets.

Discrete definitions used throughout:

* area is the pixel count;
* the convex hull is taken over the four corner points of every set pixel,
  so filled rectangles (and single pixels) are exactly convex;
* the perimeter is the number of unit pixel edges separating a set pixel from
  an unset pixel or from the image border.

Under that perimeter an ``n x n`` square has simplicity ``sqrt(pi) / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from apseval import _exact
from apseval.core import AmodalImageAnnotation, AmodalSegment, BinaryMask, ClassTaxonomy, TaxonomyError

DEFAULT_BINS = 20


def _cross(o, a, b) -> int:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> list[tuple[int, int]]:
    """Andrew's monotone chain; returns hull vertices counter-clockwise."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def polygon_area2(vertices) -> int:
    """Twice the shoelace area of a simple polygon with integer vertices."""
    n = len(vertices)
    s = 0
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return abs(s)


def _corner_points(mask: BinaryMask) -> list[tuple[int, int]]:
    # Only the leftmost and rightmost pixel of each row can contribute hull corners.
    y0, x0, _, _ = mask.bbox
    crop = mask.crop
    rows = np.flatnonzero(crop.any(axis=1))
    first = crop[rows].argmax(axis=1)
    last = crop.shape[1] - 1 - crop[rows, ::-1].argmax(axis=1)
    pts = []
    for r, a, b in zip(rows.tolist(), first.tolist(), last.tolist()):
        y = y0 + r
        pts += [(x0 + a, y), (x0 + a, y + 1), (x0 + b + 1, y), (x0 + b + 1, y + 1)]
    return pts


def _require(mask) -> BinaryMask:
    if not isinstance(mask, BinaryMask):
        mask = BinaryMask.from_array(mask)
    if mask.area == 0:
        raise ValueError("shape statistics are undefined for an empty mask")
    return mask


def hull_area(mask) -> float:
    mask = _require(mask)
    return polygon_area2(convex_hull(_corner_points(mask))) / 2


def convexity(mask) -> float:
    """Area over convex hull area, in (0, 1]."""
    mask = _require(mask)
    area2 = polygon_area2(convex_hull(_corner_points(mask)))
    return 2 * mask.area / area2


def perimeter(mask) -> int:
    mask = _require(mask)
    p = np.pad(mask.crop, 1)
    return int(np.count_nonzero(p[:, 1:] != p[:, :-1]) + np.count_nonzero(p[1:, :] != p[:-1, :]))


def simplicity(mask) -> float:
    """``sqrt(4 pi area) / perimeter``."""
    mask = _require(mask)
    return math.sqrt(4 * math.pi * mask.area) / perimeter(mask)


def occlusion_level(seg: AmodalSegment) -> float:
    """Fraction of the amodal area that is not visible."""
    if seg.amodal.area == 0:
        raise ValueError("occlusion level is undefined for an empty amodal mask")
    return (seg.amodal.area - seg.amodal.intersection_area(seg.visible)) / seg.amodal.area


def occlusion_bin(seg: AmodalSegment, bins: int) -> int:
    """Equal-width bin over [0, 1]; the last bin is closed on the right."""
    occluded = seg.amodal.area - seg.amodal.intersection_area(seg.visible)
    return min(occluded * bins // seg.amodal.area, bins - 1)


def truncate_percent(count: int, total: int, decimals: int = 1) -> float:
    """``100 * count / total`` cut (not rounded) to ``decimals`` places.

    Published class-distribution tables commonly truncate; e.g. 192624 of
    215342 instances is 89.450...% and is reported as 89.4.
    """
    if total <= 0:
        return 0.0
    scale = 10 ** decimals
    return (count * 100 * scale // total) / scale


# ---------------------------------------------------------------------------
# Dataset aggregates


@dataclass
class ShapeTally:
    count: int = 0
    inmodal_convexity: int = 0  # fixed-point sums
    inmodal_simplicity: int = 0
    amodal_convexity: int = 0
    amodal_simplicity: int = 0

    def add(self, seg: AmodalSegment) -> None:
        self.count += 1
        self.inmodal_convexity += _exact.to_fixed(convexity(seg.visible))
        self.inmodal_simplicity += _exact.to_fixed(simplicity(seg.visible))
        self.amodal_convexity += _exact.to_fixed(convexity(seg.amodal))
        self.amodal_simplicity += _exact.to_fixed(simplicity(seg.amodal))

    def __add__(self, other: ShapeTally) -> ShapeTally:
        return ShapeTally(*(a + b for a, b in zip(self._values(), other._values())))

    def _values(self):
        return (self.count, self.inmodal_convexity, self.inmodal_simplicity,
                self.amodal_convexity, self.amodal_simplicity)

    def means(self) -> dict[str, float | None]:
        keys = ("inmodal_convexity", "inmodal_simplicity", "amodal_convexity", "amodal_simplicity")
        if not self.count:
            return {k: None for k in keys}
        return {k: float(_exact.ratio(getattr(self, k), self.count)) for k in keys}


@dataclass
class StatsTally:
    """Mergeable dataset statistics; :meth:`report` finalizes them."""

    taxonomy: ClassTaxonomy
    bins: int = DEFAULT_BINS
    histogram: list[int] = field(default_factory=list)
    per_class: dict[int, ShapeTally] = field(default_factory=dict)
    images: int = 0

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if not self.histogram:
            self.histogram = [0] * self.bins
        for c in self.taxonomy.thing_ids:
            self.per_class.setdefault(c, ShapeTally())

    def add(self, ann: AmodalImageAnnotation) -> None:
        self.images += 1
        for seg in ann.segments:
            if seg.class_id not in self.per_class:
                raise TaxonomyError(f"segment class {seg.class_id} is not a thing class of the taxonomy")
            self.per_class[seg.class_id].add(seg)
            self.histogram[occlusion_bin(seg, self.bins)] += 1

    def merge(self, other: StatsTally) -> StatsTally:
        if self.taxonomy != other.taxonomy or self.bins != other.bins:
            raise ValueError("cannot merge stats built with different taxonomies or bin counts")
        return StatsTally(
            taxonomy=self.taxonomy,
            bins=self.bins,
            histogram=[a + b for a, b in zip(self.histogram, other.histogram)],
            per_class={c: self.per_class[c] + other.per_class[c] for c in self.per_class},
            images=self.images + other.images,
        )

    def report(self) -> StatsReport:
        total = sum(t.count for t in self.per_class.values())
        overall = ShapeTally()
        for t in self.per_class.values():
            overall = overall + t
        classes = tuple(
            ClassStats(
                class_id=c,
                name=self.taxonomy.name(c),
                count=t.count,
                ratio=t.count / total if total else 0.0,
                **t.means(),
            )
            for c, t in self.per_class.items()
        )
        return StatsReport(
            images=self.images,
            instances=total,
            bin_edges=tuple(i / self.bins for i in range(self.bins + 1)),
            histogram=tuple(self.histogram),
            classes=classes,
            **overall.means(),
        )


@dataclass(frozen=True)
class ClassStats:
    class_id: int
    name: str
    count: int
    ratio: float
    inmodal_convexity: float | None = None
    inmodal_simplicity: float | None = None
    amodal_convexity: float | None = None
    amodal_simplicity: float | None = None



@dataclass(frozen=True)
class StatsReport:
    images: int
    instances: int
    bin_edges: tuple[float, ...]
    histogram: tuple[int, ...]
    classes: tuple[ClassStats, ...]
    inmodal_convexity: float | None = None
    inmodal_simplicity: float | None = None
    amodal_convexity: float | None = None
    amodal_simplicity: float | None = None

    def ratios(self) -> dict[str, float]:
        return {c.name: c.ratio for c in self.classes}


def dataset_stats(annotations: Iterable[AmodalImageAnnotation], tax: ClassTaxonomy,
                  bins: int = DEFAULT_BINS) -> StatsReport:
    tally = StatsTally(tax, bins)
    for ann in annotations:
        tally.add(ann)
    return tally.report()


def class_distribution(counts: dict[str, int]) -> dict[str, float]:
    """Instance ratios from published per-class counts."""
    total = sum(counts.values())
    if total == 0:
        return {k: 0.0 for k in counts}
    return {k: v / total for k, v in counts.items()}
