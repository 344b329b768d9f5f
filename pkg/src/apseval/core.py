"""Domain types for amodal panoptic annotations and the mask algebra behind them.

A pixel of an annotated image carries at most one *visible* (class, instance)
label, stored in ``visible_map`` with the encoding ``class_id * 1000 +
instance_index`` (0 is void, stuff pixels use instance 0).  Thing instances
additionally carry an amodal mask; the occluded region is always derived as
``amodal - visible`` and never stored on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

LABEL_DIVISOR = 1000
MAX_CLASS_ID = 65
MAX_INSTANCE_INDEX = 999


class TaxonomyError(ValueError):
    """Raised for malformed class taxonomies or unknown class ids."""


# ---------------------------------------------------------------------------
# Taxonomy


@dataclass(frozen=True)
class ClassTaxonomy:
    """Stuff/thing class split.

    ``stuff_classes`` and ``thing_classes`` are ordered ``(class_id, name)``
    pairs. The order matters for semantic logit channels in fusion.
    """

    stuff_classes: tuple[tuple[int, str], ...]
    thing_classes: tuple[tuple[int, str], ...]
    void_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stuff_classes", tuple((int(c), str(n)) for c, n in self.stuff_classes))
        object.__setattr__(self, "thing_classes", tuple((int(c), str(n)) for c, n in self.thing_classes))
        ids = [c for c, _ in self.stuff_classes + self.thing_classes]
        if len(set(ids)) != len(ids):
            raise TaxonomyError(f"duplicate class ids in taxonomy: {sorted(ids)}")
        if self.void_id != 0:
            raise TaxonomyError("void id must be 0 (label code 0 marks void pixels)")
        for c in ids:
            if c == self.void_id:
                raise TaxonomyError(f"class id {c} collides with void id")
            if not 1 <= c <= MAX_CLASS_ID:
                raise TaxonomyError(f"class id {c} outside [1, {MAX_CLASS_ID}]")

    @property
    def stuff_ids(self) -> tuple[int, ...]:
        return tuple(c for c, _ in self.stuff_classes)

    @property
    def thing_ids(self) -> tuple[int, ...]:
        return tuple(c for c, _ in self.thing_classes)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return self.stuff_ids + self.thing_ids

    def is_stuff(self, class_id: int) -> bool:
        return class_id in self.stuff_ids

    def is_thing(self, class_id: int) -> bool:
        return class_id in self.thing_ids

    def name(self, class_id: int) -> str:
        for c, n in self.stuff_classes + self.thing_classes:
            if c == class_id:
                return n
        raise TaxonomyError(f"unknown class id {class_id}")

    def check_class(self, class_id: int) -> None:
        if class_id not in self.class_ids:
            raise TaxonomyError(f"class id {class_id} not present in taxonomy")

    def to_dict(self) -> dict:
        return {
            "stuff": [{"id": c, "name": n} for c, n in self.stuff_classes],
            "things": [{"id": c, "name": n} for c, n in self.thing_classes],
            "void_id": self.void_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClassTaxonomy:
        try:
            return cls(
                stuff_classes=tuple((e["id"], e["name"]) for e in d["stuff"]),
                thing_classes=tuple((e["id"], e["name"]) for e in d["things"]),
                void_id=int(d.get("void_id", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise TaxonomyError(f"malformed taxonomy document: {exc!r}") from exc


# ---------------------------------------------------------------------------
# Binary masks


def _tight_bbox(arr: np.ndarray) -> tuple[int, int, int, int] | None:
    rows = np.flatnonzero(arr.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(arr.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


class BinaryMask:
    """Immutable binary pixel set over an ``height x width`` grid.

    Internally the mask is kept as a boolean crop over its tight bounding box,
    which keeps set algebra on small instances cheap in large images. The
    canonical serialized form is the row-major run-length encoding exposed by
    :attr:`runs`: alternating counts of unset and set pixels, starting with
    the (possibly zero) count of unset pixels.
    """

    __slots__ = ("height", "width", "_bbox", "_crop", "_area", "_runs")

    def __init__(self, height: int, width: int, bbox, crop: np.ndarray | None):
        # Use the classmethod constructors; this assumes a tight, normalized bbox.
        self.height = int(height)
        self.width = int(width)
        self._bbox = bbox
        if crop is not None:
            crop.setflags(write=False)
        self._crop = crop
        self._area = int(np.count_nonzero(crop)) if crop is not None else 0
        self._runs = None

    # -- constructors -------------------------------------------------------

    @classmethod
    def empty(cls, height: int, width: int) -> BinaryMask:
        return cls(height, width, None, None)

    @classmethod
    def from_array(cls, arr) -> BinaryMask:
        arr = np.asarray(arr, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask array must be 2-D, got shape {arr.shape}")
        return cls.from_crop(arr.shape[0], arr.shape[1], 0, 0, arr)

    @classmethod
    def from_crop(cls, height: int, width: int, y0: int, x0: int, crop) -> BinaryMask:
        """Build a mask from a boolean window whose top-left pixel is ``(y0, x0)``.

        The window must lie inside the image; it is trimmed to its tight bbox.
        """
        crop = np.asarray(crop, dtype=bool)
        h, w = crop.shape
        if y0 < 0 or x0 < 0 or y0 + h > height or x0 + w > width:
            raise ValueError("crop window exceeds image bounds")
        tb = _tight_bbox(crop)
        if tb is None:
            return cls.empty(height, width)
        r0, c0, r1, c1 = tb
        return cls(height, width, (y0 + r0, x0 + c0, y0 + r1, x0 + c1), crop[r0:r1, c0:c1].copy())

    @classmethod
    def from_box(cls, height: int, width: int, y0: int, x0: int, y1: int, x1: int) -> BinaryMask:
        y0, x0 = max(y0, 0), max(x0, 0)
        y1, x1 = min(y1, height), min(x1, width)
        if y1 <= y0 or x1 <= x0:
            return cls.empty(height, width)
        return cls(height, width, (y0, x0, y1, x1), np.ones((y1 - y0, x1 - x0), dtype=bool))

    @classmethod
    def from_runs(cls, height: int, width: int, runs: Sequence[int]) -> BinaryMask:
        runs = [int(r) for r in runs]
        n = height * width
        if any(r < 0 for r in runs):
            raise ValueError("negative run length in RLE")
        if any(r == 0 for r in runs[1:]):
            raise ValueError("zero-length run after the leading zero-count in RLE")
        if sum(runs) != n:
            raise ValueError(f"RLE runs sum to {sum(runs)}, expected {n} for {height}x{width}")
        values = np.arange(len(runs)) % 2 == 1
        flat = np.repeat(values, runs)
        mask = cls.from_array(flat.reshape(height, width))
        mask._runs = tuple(runs)
        return mask

    # -- accessors ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def area(self) -> int:
        return self._area

    @property
    def bbox(self) -> tuple[int, int, int, int] | None:
        """Tight ``(y0, x0, y1, x1)`` half-open box, or None when empty."""
        return self._bbox

    @property
    def crop(self) -> np.ndarray | None:
        return self._crop

    def __bool__(self) -> bool:
        return self._area > 0

    def to_array(self) -> np.ndarray:
        out = np.zeros((self.height, self.width), dtype=bool)
        if self._bbox is not None:
            y0, x0, y1, x1 = self._bbox
            out[y0:y1, x0:x1] = self._crop
        return out

    @property
    def runs(self) -> tuple[int, ...]:
        if self._runs is None:
            flat = self.to_array().ravel()
            n = flat.size
            padded = np.concatenate(([False], flat, [False]))
            idx = np.flatnonzero(padded[1:] != padded[:-1])
            runs = np.diff(np.concatenate(([0], idx, [n])))
            if runs.size > 1 and runs[-1] == 0:
                runs = runs[:-1]
            self._runs = tuple(int(r) for r in runs)
        return self._runs

    def window(self, y0: int, x0: int, y1: int, x1: int) -> np.ndarray:
        """Dense boolean view of the mask restricted to an arbitrary window."""
        out = np.zeros((y1 - y0, x1 - x0), dtype=bool)
        if self._bbox is None:
            return out
        by0, bx0, by1, bx1 = self._bbox
        iy0, ix0, iy1, ix1 = max(y0, by0), max(x0, bx0), min(y1, by1), min(x1, bx1)
        if iy1 > iy0 and ix1 > ix0:
            out[iy0 - y0:iy1 - y0, ix0 - x0:ix1 - x0] = self._crop[iy0 - by0:iy1 - by0, ix0 - bx0:ix1 - bx0]
        return out

    # -- algebra ------------------------------------------------------------

    def _check_same_grid(self, other: BinaryMask) -> None:
        if self.shape != other.shape:
            raise ValueError(f"mask dimension mismatch: {self.shape} vs {other.shape}")

    def intersection_area(self, other: BinaryMask) -> int:
        self._check_same_grid(other)
        if self._bbox is None or other._bbox is None:
            return 0
        a, b = self._bbox, other._bbox
        y0, x0, y1, x1 = max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3])
        if y1 <= y0 or x1 <= x0:
            return 0
        sa = self._crop[y0 - a[0]:y1 - a[0], x0 - a[1]:x1 - a[1]]
        sb = other._crop[y0 - b[0]:y1 - b[0], x0 - b[1]:x1 - b[1]]
        return int(np.count_nonzero(sa & sb))

    def _combine(self, other: BinaryMask, op) -> BinaryMask:
        self._check_same_grid(other)
        boxes = [b for b in (self._bbox, other._bbox) if b is not None]
        if not boxes:
            return BinaryMask.empty(self.height, self.width)
        y0 = min(b[0] for b in boxes)
        x0 = min(b[1] for b in boxes)
        y1 = max(b[2] for b in boxes)
        x1 = max(b[3] for b in boxes)
        res = op(self.window(y0, x0, y1, x1), other.window(y0, x0, y1, x1))
        return BinaryMask.from_crop(self.height, self.width, y0, x0, res)

    def __and__(self, other: BinaryMask) -> BinaryMask:
        return self._combine(other, np.logical_and)

    def __or__(self, other: BinaryMask) -> BinaryMask:
        return self._combine(other, np.logical_or)

    def __sub__(self, other: BinaryMask) -> BinaryMask:
        if self._bbox is None:
            return self
        y0, x0, y1, x1 = self._bbox
        return BinaryMask.from_crop(self.height, self.width, y0, x0, self._crop & ~other.window(y0, x0, y1, x1))

    def issubset(self, other: BinaryMask) -> bool:
        return self.intersection_area(other) == self._area

    def translate(self, dy: int, dx: int) -> BinaryMask:
        """Shift by ``(dy, dx)`` pixels; pixels leaving the image are dropped."""
        if self._bbox is None:
            return self
        y0, x0, y1, x1 = self._bbox
        ny0, nx0, ny1, nx1 = y0 + dy, x0 + dx, y1 + dy, x1 + dx
        cy0, cx0 = max(ny0, 0), max(nx0, 0)
        cy1, cx1 = min(ny1, self.height), min(nx1, self.width)
        if cy1 <= cy0 or cx1 <= cx0:
            return BinaryMask.empty(self.height, self.width)
        sub = self._crop[cy0 - ny0:cy1 - ny0, cx0 - nx0:cx1 - nx0]
        return BinaryMask.from_crop(self.height, self.width, cy0, cx0, sub)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        if self.shape != other.shape or self._bbox != other._bbox:
            return False
        return self._bbox is None or bool(np.array_equal(self._crop, other._crop))

    def __hash__(self) -> int:
        return hash((self.height, self.width, self.runs))

    def __repr__(self) -> str:
        return f"BinaryMask({self.height}x{self.width}, area={self._area}, bbox={self._bbox})"


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two masks; 0.0 when both are empty."""
    inter = a.intersection_area(b)
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# Annotations


@dataclass(frozen=True, eq=False)
class AmodalSegment:
    class_id: int
    instance_index: int
    visible: BinaryMask
    amodal: BinaryMask
    confidence: float | None = None

    @property
    def key(self) -> tuple[int, int]:
        return self.class_id, self.instance_index

    @property
    def code(self) -> int:
        return self.class_id * LABEL_DIVISOR + self.instance_index

    @property
    def occluded(self) -> BinaryMask:
        return self.amodal - self.visible

    def __eq__(self, other) -> bool:
        if not isinstance(other, AmodalSegment):
            return NotImplemented
        return (
            self.key == other.key
            and self.confidence == other.confidence
            and self.visible == other.visible
            and self.amodal == other.amodal
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class AmodalImageAnnotation:
    """Groundtruth or prediction for one image.

    ``visible_map`` holds ``class_id * 1000 + instance_index`` per pixel with
    0 for void. Segments are listed back-to-front where depth order matters
    (synthetic scenes and perturbations rely on it).
    """

    visible_map: np.ndarray
    segments: tuple[AmodalSegment, ...] = field(default=())

    def __post_init__(self):
        vm = np.asarray(self.visible_map)
        if vm.ndim != 2:
            raise ValueError(f"visible_map must be 2-D, got shape {vm.shape}")
        if not np.issubdtype(vm.dtype, np.integer):
            raise ValueError("visible_map must hold integer label codes")
        vm = vm.astype(np.int32, copy=True)
        vm.setflags(write=False)
        object.__setattr__(self, "visible_map", vm)
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def height(self) -> int:
        return self.visible_map.shape[0]

    @property
    def width(self) -> int:
        return self.visible_map.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.visible_map.shape

    @property
    def class_map(self) -> np.ndarray:
        return self.visible_map // LABEL_DIVISOR

    @property
    def instance_map(self) -> np.ndarray:
        return self.visible_map % LABEL_DIVISOR

    def __eq__(self, other) -> bool:
        if not isinstance(other, AmodalImageAnnotation):
            return NotImplemented
        return (
            self.shape == other.shape
            and bool(np.array_equal(self.visible_map, other.visible_map))
            and self.segments == other.segments
        )

    __hash__ = None

    @classmethod
    def from_segments(
        cls, stuff_map: np.ndarray, segments: Iterable[AmodalSegment]
    ) -> AmodalImageAnnotation:
        """Paint segments' visible masks over a stuff class map.

        ``stuff_map`` holds bare stuff class ids (0 = void). Later segments
        overwrite earlier ones, so pass disjoint visible masks unless that is
        intended.
        """
        segments = tuple(segments)
        vm = np.asarray(stuff_map, dtype=np.int32) * LABEL_DIVISOR
        for seg in segments:
            if seg.visible.bbox is None:
                continue
            y0, x0, y1, x1 = seg.visible.bbox
            region = vm[y0:y1, x0:x1]
            region[seg.visible.crop] = seg.code
        return cls(vm, segments)


# ---------------------------------------------------------------------------
# Segment sets


@dataclass(frozen=True)
class ThingRegion:
    visible: BinaryMask
    occluded: BinaryMask
    instance_index: int
    amodal: BinaryMask


@dataclass(frozen=True)
class SegmentSets:
    """Per-class stuff masks and thing visible/occluded regions of one image."""

    stuff_masks: dict[int, BinaryMask]
    things: dict[int, list[ThingRegion]]
    thing_ids: tuple[int, ...] = ()


def extract_segments(ann: AmodalImageAnnotation, tax: ClassTaxonomy) -> SegmentSets:
    """Split an annotation into per-class stuff masks and thing regions.

    Each stuff class present yields one (possibly disconnected) mask. Void
    pixels belong to no mask.
    """
    classes = np.unique(ann.class_map)
    stuff_masks: dict[int, BinaryMask] = {}
    for c in classes.tolist():
        if c == tax.void_id:
            continue
        tax.check_class(c)
        if tax.is_stuff(c):
            stuff_masks[c] = BinaryMask.from_array(ann.visible_map == c * LABEL_DIVISOR)
    things: dict[int, list[ThingRegion]] = {}
    for seg in ann.segments:
        tax.check_class(seg.class_id)
        if not tax.is_thing(seg.class_id):
            raise TaxonomyError(f"segment class {seg.class_id} is not a thing class")
        things.setdefault(seg.class_id, []).append(
            ThingRegion(seg.visible, seg.occluded, seg.instance_index, seg.amodal)
        )
    return SegmentSets(stuff_masks, things, tax.thing_ids)


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Violation:
    rule: str
    segment: tuple[int, int] | None
    pixel: tuple[int, int] | None
    detail: str = ""

    def __str__(self) -> str:
        where = f" segment={self.segment}" if self.segment is not None else ""
        at = f" pixel={self.pixel}" if self.pixel is not None else ""
        return f"{self.rule}:{where}{at} {self.detail}".rstrip()


def _first_pixel(mask_or_arr, offset=(0, 0)) -> tuple[int, int] | None:
    idx = np.argwhere(mask_or_arr)
    if idx.size == 0:
        return None
    return int(idx[0][0]) + offset[0], int(idx[0][1]) + offset[1]


def validate_annotation(ann: AmodalImageAnnotation, tax: ClassTaxonomy) -> list[Violation]:
    """Check every annotation invariant; return the violations found (empty if valid)."""
    out: list[Violation] = []
    vm = ann.visible_map
    if vm.size and (vm.min() < 0):
        out.append(Violation("negative label code", None, _first_pixel(vm < 0)))
        return out
    counts = np.bincount(vm.ravel(), minlength=1) if vm.size else np.zeros(1, dtype=np.int64)
    codes = np.flatnonzero(counts)
    known = set(tax.class_ids)
    seg_codes = {}
    for code in codes.tolist():
        if code == 0:
            continue
        c, i = divmod(code, LABEL_DIVISOR)
        if c not in known:
            out.append(Violation("unknown class id", None, _first_pixel(vm == code), f"class {c}"))
        elif tax.is_stuff(c) and i != 0:
            out.append(Violation("stuff pixel with instance index", (c, i), _first_pixel(vm == code)))
        elif tax.is_thing(c) and i == 0:
            out.append(Violation("thing pixel without instance index", (c, 0), _first_pixel(vm == code)))
        elif tax.is_thing(c):
            seg_codes[code] = int(counts[code])

    seen: set[tuple[int, int]] = set()
    for seg in ann.segments:
        key = seg.key
        if seg.visible.shape != ann.shape or seg.amodal.shape != ann.shape:
            out.append(Violation("mask dimension mismatch", key, None))
            continue
        if key in seen:
            out.append(Violation("duplicate (class, instance) key", key, _first_pixel(seg.visible.to_array())))
            continue
        seen.add(key)
        if not tax.is_thing(seg.class_id):
            out.append(Violation("segment class is not a thing class", key, None))
            continue
        if not 1 <= seg.instance_index <= MAX_INSTANCE_INDEX:
            out.append(Violation("instance index out of range", key, None))
            continue
        if seg.confidence is not None and not 0.0 <= seg.confidence <= 1.0:
            out.append(Violation("confidence outside [0, 1]", key, None))
        if seg.visible.area == 0:
            out.append(Violation("empty visible region", key, None))
        elif not seg.visible.issubset(seg.amodal):
            bad = seg.visible - seg.amodal
            y0, x0, _, _ = bad.bbox
            out.append(Violation("visible ⊄ amodal", key, _first_pixel(bad.crop, (y0, x0))))
        # visible mask must equal the visible_map pixels carrying this key
        code = seg.code
        if seg.visible.area:
            y0, x0, y1, x1 = seg.visible.bbox
            window = vm[y0:y1, x0:x1]
            wrong = seg.visible.crop & (window != code)
            if wrong.any():
                out.append(Violation("visible mask disagrees with visible_map", key, _first_pixel(wrong, (y0, x0))))
                continue
        if seg_codes.get(code, 0) != seg.visible.area:
            extra = (vm == code) & ~seg.visible.to_array()
            out.append(Violation("visible_map pixels outside visible mask", key, _first_pixel(extra)))
    for code in seg_codes:
        key = divmod(code, LABEL_DIVISOR)
        if key not in seen:
            out.append(Violation("thing pixels without segment", key, _first_pixel(vm == code)))
    return out


class AnnotationError(ValueError):
    """An annotation failed validation; ``violations`` lists every problem."""

    def __init__(self, violations: list[Violation], context: str = ""):
        self.violations = list(violations)
        head = f"{context}: " if context else ""
        super().__init__(head + "; ".join(str(v) for v in self.violations[:5])
                         + (f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""))


def check_annotation(ann: AmodalImageAnnotation, tax: ClassTaxonomy, context: str = "") -> None:
    violations = validate_annotation(ann, tax)
    if violations:
        raise AnnotationError(violations, context)
