"""Inference-time fusion of semantic logits with amodal instance predictions.

The pipeline mirrors the logit-fusion heuristic used by top-down panoptic
networks: confidence filtering, ROI resampling of 28x28 mask logits to the
image, overlap suppression, ``FL = (sigmoid(A) + sigmoid(B)) * (A + B)`` per
instance, a per-pixel argmax against the stuff logits, and finally amodal
masks whose pixels outside the winning visible region become the occluded
part.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from apseval.core import (
    AmodalImageAnnotation,
    AmodalSegment,
    BinaryMask,
    ClassTaxonomy,
    TaxonomyError,
)

BBox = tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open


@dataclass(frozen=True)
class FusionConfig:
    confidence_threshold: float = 0.5
    overlap_threshold: float = 0.5
    mask_threshold: float = 0.5
    fill_logit: float = -10000.0

    def __post_init__(self):
        for name in ("confidence_threshold", "overlap_threshold", "mask_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass(frozen=True, eq=False)
class InstancePrediction:
    class_id: int
    confidence: float
    amodal_bbox: BBox
    inmodal_logits: np.ndarray
    amodal_logits: np.ndarray

    def __post_init__(self):
        for name in ("inmodal_logits", "amodal_logits"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.ndim != 2 or arr.size == 0:
                raise ValueError(f"{name} must be a non-empty 2-D grid, got shape {arr.shape}")
            object.__setattr__(self, name, arr)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "amodal_bbox", tuple(int(v) for v in self.amodal_bbox))


def sigmoid(x):
    return expit(x)


def fused_logit(ml_a, ml_b):
    """``(sigmoid(A) + sigmoid(B)) * (A + B)``, elementwise."""
    ml_a = np.asarray(ml_a, dtype=np.float64)
    ml_b = np.asarray(ml_b, dtype=np.float64)
    return (expit(ml_a) + expit(ml_b)) * (ml_a + ml_b)


def clip_bbox(bbox: BBox, height: int, width: int) -> BBox:
    x0, y0, x1, y1 = bbox
    x0, x1 = max(0, min(x0, width)), max(0, min(x1, width))
    y0, y1 = max(0, min(y0, height)), max(0, min(y1, height))
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate bounding box {bbox} in {height}x{width} image")
    return x0, y0, x1, y1


def _interp_matrix(n_dst: int, n_src: int) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) * n_src / n_dst - 0.5, clamped to the grid
    src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = src - lo
    m = np.zeros((n_dst, n_src))
    rows = np.arange(n_dst)
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    return m


def resample_mask_logits(logits, bbox: BBox, height: int, width: int, fill: float = -10000.0) -> np.ndarray:
    """Bilinearly place a small logit grid onto ``bbox`` of an ``height x width`` map.

    Pixels outside the box take ``fill``. Returns float32.
    """
    grid = np.asarray(logits, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"logit grid must be 2-D, got shape {grid.shape}")
    x0, y0, x1, y1 = bbox
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ValueError(f"degenerate or out-of-image bounding box {bbox} for {height}x{width}")
    out = np.full((height, width), fill, dtype=np.float32)
    wy = _interp_matrix(y1 - y0, grid.shape[0])
    wx = _interp_matrix(x1 - x0, grid.shape[1])
    out[y0:y1, x0:x1] = wy @ grid @ wx.T
    return out


def derive_inmodal_bbox(mask) -> BBox:
    """Tight half-open ``(x0, y0, x1, y1)`` box around the set pixels."""
    if not isinstance(mask, BinaryMask):
        mask = BinaryMask.from_array(mask)
    if mask.bbox is None:
        raise ValueError("cannot derive a bounding box from an empty mask")
    y0, x0, y1, x1 = mask.bbox
    return x0, y0, x1, y1


@dataclass
class _Candidate:
    inst: InstancePrediction
    order: int
    inmodal_logit: np.ndarray
    inmodal_mask: np.ndarray
    inmodal_bbox: BBox


def fuse(semantic_logits, instances, tax: ClassTaxonomy, cfg: FusionConfig | None = None) -> AmodalImageAnnotation:
    """Fuse semantic logits (stuff channels, then thing channels, taxonomy order)
    with instance predictions into an amodal panoptic annotation."""
    cfg = cfg or FusionConfig()
    sem = np.asarray(semantic_logits, dtype=np.float64)
    n_stuff, n_thing = len(tax.stuff_ids), len(tax.thing_ids)
    if sem.ndim != 3:
        raise ValueError(f"semantic logits must be C x H x W, got shape {sem.shape}")
    if sem.shape[0] != n_stuff + n_thing:
        raise TaxonomyError(f"semantic logits have {sem.shape[0]} channels, taxonomy needs {n_stuff + n_thing}")
    _, height, width = sem.shape
    thing_channel = {c: n_stuff + k for k, c in enumerate(tax.thing_ids)}

    cands: list[_Candidate] = []
    for order, inst in enumerate(instances):
        if inst.class_id not in thing_channel:
            raise TaxonomyError(f"instance class {inst.class_id} is not a thing class")
        if inst.confidence < cfg.confidence_threshold:
            continue
        box = clip_bbox(inst.amodal_bbox, height, width)
        logit = resample_mask_logits(inst.inmodal_logits, box, height, width, cfg.fill_logit)
        mask = sigmoid(logit) > cfg.mask_threshold
        if not mask.any():
            continue
        cands.append(_Candidate(inst, order, logit, mask, derive_inmodal_bbox(mask)))

    cands.sort(key=lambda c: -c.inst.confidence)  # stable: ties keep input order

    # Overlap suppression and per-instance fused logits, with a running argmax.
    if n_stuff:
        best = sem[:n_stuff].max(axis=0)
        stuff_label = np.asarray(tax.stuff_ids, dtype=np.int32)[sem[:n_stuff].argmax(axis=0)]
    else:
        best = np.zeros((height, width))  # virtual void channel
        stuff_label = np.zeros((height, width), dtype=np.int32)
    winner = np.full((height, width), -1, dtype=np.int64)
    occupied = np.zeros((height, width), dtype=bool)
    kept: list[_Candidate] = []
    for cand in cands:
        area = int(cand.inmodal_mask.sum())
        overlap = int(np.count_nonzero(cand.inmodal_mask & occupied))
        if overlap > cfg.overlap_threshold * area:
            continue
        ml_a = cand.inmodal_logit.astype(np.float64)
        ml_a[occupied] = cfg.fill_logit  # earlier, more confident instances own these pixels
        occupied |= cand.inmodal_mask
        x0, y0, x1, y1 = cand.inmodal_bbox
        ml_b = np.zeros((height, width))
        ml_b[y0:y1, x0:x1] = sem[thing_channel[cand.inst.class_id], y0:y1, x0:x1]
        fl = fused_logit(ml_a, ml_b)
        upd = fl > best
        best[upd] = fl[upd]
        winner[upd] = len(kept)
        kept.append(cand)

    # Pixels won by a stuff channel keep the stuff argmax of the semantic head.
    segments: list[AmodalSegment] = []
    next_index: dict[int, int] = {}
    for k, cand in enumerate(kept):
        visible = winner == k
        if not visible.any():
            continue
        inst = cand.inst
        amodal_logit = resample_mask_logits(inst.amodal_logits, clip_bbox(inst.amodal_bbox, height, width),
                                            height, width, cfg.fill_logit)
        amodal = (sigmoid(amodal_logit) > cfg.mask_threshold) | visible
        idx = next_index.get(inst.class_id, 0) + 1
        next_index[inst.class_id] = idx
        segments.append(AmodalSegment(
            class_id=inst.class_id,
            instance_index=idx,
            visible=BinaryMask.from_array(visible),
            amodal=BinaryMask.from_array(amodal),
            confidence=float(inst.confidence),
        ))
    return AmodalImageAnnotation.from_segments(stuff_label, segments)
