"""Deterministic layered synthetic scenes and controlled prediction perturbations.

Scenes are painted back to front (painter's algorithm) so each thing's amodal
mask is its full shape and its visible mask is whatever no later shape covers.
Randomness comes from numpy's ``PCG64`` bit generator seeded with
``SeedSequence([seed])``; only integer draws are used so streams are stable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from apseval.core import (
    AmodalImageAnnotation,
    AmodalSegment,
    BinaryMask,
    ClassTaxonomy,
)

STUFF_LAYOUTS = ("horizontal_bands", "single_background")
SHAPE_KINDS = ("rectangle", "ellipse")


def default_taxonomy() -> ClassTaxonomy:
    """Urban driving classes: ten stuff classes and seven thing classes."""
    stuff = ["road", "sidewalk", "building", "wall", "fence", "pole", "traffic sign",
             "vegetation", "terrain", "sky"]
    things = ["car", "pedestrian", "cyclist", "two-wheeler", "van", "truck", "other vehicle"]
    return ClassTaxonomy(
        stuff_classes=tuple((i + 1, n) for i, n in enumerate(stuff)),
        thing_classes=tuple((len(stuff) + i + 1, n) for i, n in enumerate(things)),
    )


def _rng(*seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(s) & (2**64 - 1) for s in seed])))


@dataclass(frozen=True)
class SceneSpec:
    height: int = 376
    width: int = 1408
    stuff_layout: str = "horizontal_bands"
    min_things: int = 0
    max_things: int = 10
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    min_size: int = 8
    max_size: int = 120
    seed: int = 0
    max_bands: int = 4

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image dimensions must be positive")
        if self.stuff_layout not in STUFF_LAYOUTS:
            raise ValueError(f"stuff_layout must be one of {STUFF_LAYOUTS}")
        if not 0 <= self.min_things <= self.max_things:
            raise ValueError("need 0 <= min_things <= max_things")
        if not self.shape_kinds or any(k not in SHAPE_KINDS for k in self.shape_kinds):
            raise ValueError(f"shape_kinds must be a non-empty subset of {SHAPE_KINDS}")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError("need 1 <= min_size <= max_size")


def _shape_crop(kind: str, h: int, w: int) -> np.ndarray:
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    yy = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xx = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    crop = yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0
    return crop


def _stuff_map(spec: SceneSpec, tax: ClassTaxonomy, rng: np.random.Generator) -> np.ndarray:
    stuff = np.asarray(tax.stuff_ids, dtype=np.int32)
    out = np.zeros((spec.height, spec.width), dtype=np.int32)
    if stuff.size == 0:
        return out
    if spec.stuff_layout == "single_background":
        out[:] = stuff[rng.integers(stuff.size)]
        return out
    n = int(rng.integers(1, min(spec.max_bands, spec.height) + 1))
    cuts = np.sort(rng.choice(np.arange(1, spec.height), size=n - 1, replace=False)) if n > 1 else []
    edges = [0, *[int(c) for c in cuts], spec.height]
    for k in range(n):
        out[edges[k]:edges[k + 1]] = stuff[rng.integers(stuff.size)]
    return out


def generate_scene(spec: SceneSpec, tax: ClassTaxonomy | None = None) -> AmodalImageAnnotation:
    """Paint a random layered scene; identical ``spec`` gives an identical scene.

    Things fully hidden by later shapes are omitted (a segment needs a visible
    part). Segments are listed back to front.
    """
    tax = tax or default_taxonomy()
    if spec.min_size > min(spec.height, spec.width) and spec.max_things > 0:
        raise ValueError(f"shapes of size >= {spec.min_size} cannot be placed in a {spec.height}x{spec.width} image")
    if spec.max_things > 0 and not tax.thing_ids:
        raise ValueError("taxonomy has no thing classes to place")
    rng = _rng(spec.seed)
    stuff = _stuff_map(spec, tax, rng)
    things = tax.thing_ids
    count = int(rng.integers(spec.min_things, spec.max_things + 1))

    shapes = []  # (class_id, y0, x0, crop)
    owner = np.full((spec.height, spec.width), -1, dtype=np.int32)
    for k in range(count):
        c = things[int(rng.integers(len(things)))]
        kind = spec.shape_kinds[int(rng.integers(len(spec.shape_kinds)))]
        h = int(rng.integers(spec.min_size, min(spec.max_size, spec.height) + 1))
        w = int(rng.integers(spec.min_size, min(spec.max_size, spec.width) + 1))
        y0 = int(rng.integers(0, spec.height - h + 1))
        x0 = int(rng.integers(0, spec.width - w + 1))
        crop = _shape_crop(kind, h, w)
        owner[y0:y0 + h, x0:x0 + w][crop] = k
        shapes.append((c, y0, x0, crop))

    segments = []
    next_index: dict[int, int] = {}
    for k, (c, y0, x0, crop) in enumerate(shapes):
        h, w = crop.shape
        vis = owner[y0:y0 + h, x0:x0 + w] == k
        if not vis.any():
            continue
        idx = next_index.get(c, 0) + 1
        next_index[c] = idx
        segments.append(AmodalSegment(
            class_id=c,
            instance_index=idx,
            visible=BinaryMask.from_crop(spec.height, spec.width, y0, x0, vis),
            amodal=BinaryMask.from_crop(spec.height, spec.width, y0, x0, crop),
        ))
    return AmodalImageAnnotation.from_segments(stuff, segments)


def generate_scenes(spec: SceneSpec, count: int, tax: ClassTaxonomy | None = None) -> list[AmodalImageAnnotation]:
    """``count`` scenes; scene ``k`` uses seed ``(spec.seed, k)``."""
    out = []
    for k in range(count):
        seed = int(_rng(spec.seed, k).integers(0, 2**63))
        out.append(generate_scene(replace(spec, seed=seed), tax))
    return out


# ---------------------------------------------------------------------------
# Perturbations


@dataclass(frozen=True)
class PerturbationSpec:
    """Random edits turning groundtruth into a plausible prediction.

    ``morph_radius`` > 0 dilates, < 0 erodes every mask by that many pixels
    (square structuring element). Each thing is translated by an independent
    integer offset drawn from ``[-translate, translate]`` per axis.
    """

    drop_probability: float = 0.0
    spawn_probability: float = 0.0
    morph_radius: int = 0
    translate: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("drop_probability", "spawn_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.translate < 0:
            raise ValueError("translate must be non-negative")

    @property
    def is_identity(self) -> bool:
        return (self.drop_probability == 0 and self.spawn_probability == 0
                and self.morph_radius == 0 and self.translate == 0)


def _morph(mask: BinaryMask, radius: int) -> BinaryMask:
    if radius == 0 or not mask:
        return mask
    r = abs(radius)
    y0, x0, y1, x1 = mask.bbox
    wy0, wx0 = max(y0 - r, 0), max(x0 - r, 0)
    wy1, wx1 = min(y1 + r, mask.height), min(x1 + r, mask.width)
    win = mask.window(wy0, wx0, wy1, wx1)
    struct = np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
    if radius > 0:
        res = ndimage.binary_dilation(win, structure=struct)
    else:
        # pad with unset pixels so the image border erodes like background
        res = ndimage.binary_erosion(np.pad(win, r), structure=struct)[r:-r, r:-r]
    return BinaryMask.from_crop(mask.height, mask.width, wy0, wx0, res)


def _stuff_beneath(ann: AmodalImageAnnotation) -> np.ndarray:
    """Stuff class map with thing pixels filled by their nearest stuff label."""
    cls = ann.class_map
    is_stuff = (cls > 0) & (ann.instance_map == 0)
    thing_px = ann.instance_map > 0
    stuff = np.where(is_stuff, cls, 0).astype(np.int32)
    if thing_px.any() and is_stuff.any():
        _, (iy, ix) = ndimage.distance_transform_edt(~is_stuff, return_indices=True)
        stuff = np.where(thing_px, stuff[iy, ix], stuff)
    return stuff


def perturb(gt: AmodalImageAnnotation, p: PerturbationSpec, tax: ClassTaxonomy | None = None) -> AmodalImageAnnotation:
    """Seeded drops, spawns, morphology and translation of thing segments.

    The result is repaired to validity: segments are re-painted in list order
    (later ones on top), visible masks are what remains uncovered, and every
    amodal mask is united with its visible mask. Segments whose visible part
    vanishes are dropped. Stuff labels are unchanged; pixels a moved thing
    uncovers take the nearest stuff label.
    """
    if p.is_identity:
        return gt
    rng = _rng(p.seed)
    h, w = gt.shape
    items: list[tuple[int, int, BinaryMask, BinaryMask, float | None]] = []
    for seg in gt.segments:
        drop = rng.random() < p.drop_probability
        dy, dx = (int(v) for v in rng.integers(-p.translate, p.translate + 1, size=2))
        if drop:
            continue
        vis = _morph(seg.visible, p.morph_radius).translate(dy, dx)
        amo = _morph(seg.amodal, p.morph_radius).translate(dy, dx)
        items.append((seg.class_id, seg.instance_index, vis, amo, seg.confidence))

    spawn_classes = sorted({s.class_id for s in gt.segments}) or (list(tax.thing_ids) if tax else [])
    if spawn_classes:
        next_index = {}
        for c, i, *_ in items:
            next_index[c] = max(next_index.get(c, 0), i)
        for seg in gt.segments:
            next_index[seg.class_id] = max(next_index.get(seg.class_id, 0), seg.instance_index)
        for _ in range(len(gt.segments) or 1):
            if not rng.random() < p.spawn_probability:
                continue
            c = spawn_classes[int(rng.integers(len(spawn_classes)))]
            sh = int(rng.integers(1, max(2, h // 4) + 1))
            sw = int(rng.integers(1, max(2, w // 4) + 1))
            y0 = int(rng.integers(0, h - min(sh, h) + 1))
            x0 = int(rng.integers(0, w - min(sw, w) + 1))
            box = BinaryMask.from_box(h, w, y0, x0, y0 + sh, x0 + sw)
            next_index[c] = next_index.get(c, 0) + 1
            items.append((c, next_index[c], box, box, None))

    owner = np.full((h, w), -1, dtype=np.int32)
    for k, (_, _, vis, _, _) in enumerate(items):
        if vis:
            y0, x0, y1, x1 = vis.bbox
            owner[y0:y1, x0:x1][vis.crop] = k
    segments = []
    for k, (c, i, vis, amo, conf) in enumerate(items):
        if not vis:
            continue
        y0, x0, y1, x1 = vis.bbox
        new_vis = BinaryMask.from_crop(h, w, y0, x0, vis.crop & (owner[y0:y1, x0:x1] == k))
        if not new_vis:
            continue
        segments.append(AmodalSegment(c, i, new_vis, amo | new_vis, conf))
    return AmodalImageAnnotation.from_segments(_stuff_beneath(gt), segments)


def add_segment(ann: AmodalImageAnnotation, class_id: int, visible: BinaryMask, amodal: BinaryMask | None = None,
                instance_index: int | None = None) -> AmodalImageAnnotation:
    """Paint one extra thing on top of an annotation (covered pixels of others are removed)."""
    amodal = visible if amodal is None else amodal | visible
    if instance_index is None:
        instance_index = 1 + max((s.instance_index for s in ann.segments if s.class_id == class_id), default=0)
    segments = []
    for s in ann.segments:
        vis = s.visible - visible
        if vis:
            segments.append(AmodalSegment(s.class_id, s.instance_index, vis, s.amodal, s.confidence))
    segments.append(AmodalSegment(class_id, instance_index, visible, amodal))
    return AmodalImageAnnotation.from_segments(_stuff_beneath(ann), segments)


def remove_segment(ann: AmodalImageAnnotation, index: int) -> AmodalImageAnnotation:
    """Drop the ``index``-th segment; its visible pixels revert to the nearest stuff label."""
    segments = [s for k, s in enumerate(ann.segments) if k != index]
    return AmodalImageAnnotation.from_segments(_stuff_beneath(ann), segments)

