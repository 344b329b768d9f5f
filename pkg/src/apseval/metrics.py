"""Amodal panoptic quality (APQ), amodal parsing coverage (APC) and mIoU.

Per-image work produces a :class:`MetricAccumulator`; accumulators merge by
field-wise addition and :func:`finalize` turns the totals into a
:class:`MetricReport` of percentages. Real-valued tallies are exact
fixed-point integers (see :mod:`apseval._exact`), so any partition of an image
set merges to the same report, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Iterable

import numpy as np

from apseval import _exact
from apseval.core import (
    LABEL_DIVISOR,
    MAX_CLASS_ID,
    AmodalImageAnnotation,
    ClassTaxonomy,
    SegmentSets,
    TaxonomyError,
    ThingRegion,
    check_annotation,
    mask_iou,
)
from apseval.matching import Matching, max_weight_matching

MATCHING_WEIGHTS = ("visible", "amodal")


@dataclass(frozen=True)
class EvalConfig:
    matching_weight: str = "visible"
    min_match_iou: float = 0.0
    include_miou: bool = True

    def __post_init__(self):
        if self.matching_weight not in MATCHING_WEIGHTS:
            raise ValueError(f"matching_weight must be one of {MATCHING_WEIGHTS}, got {self.matching_weight!r}")
        if not 0.0 <= self.min_match_iou < 1.0:
            raise ValueError("min_match_iou must lie in [0, 1)")


# ---------------------------------------------------------------------------
# Accumulators


@dataclass
class StuffTally:
    iou_sum: int = 0  # fixed-point
    gt_count: int = 0
    cov_weighted: int = 0  # fixed-point, sum of |X| * IoU
    cov_pixels: int = 0


@dataclass
class ThingTally:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    amodal_iou_sum: int = 0
    visible_iou_sum: int = 0
    tp_visible: int = 0
    fp_visible: int = 0
    fn_visible: int = 0
    occluded_iou_sum: int = 0
    tp_occluded: int = 0
    fp_occluded: int = 0
    fn_occluded: int = 0
    cov_visible_weighted: int = 0
    cov_visible_pixels: int = 0
    cov_occluded_weighted: int = 0
    cov_occluded_pixels: int = 0


def _add_tallies(a, b):
    return type(a)(**{f.name: getattr(a, f.name) + getattr(b, f.name) for f in fields(a)})


@dataclass
class MetricAccumulator:
    """Mergeable per-class tallies for one image or a set of images."""

    taxonomy: ClassTaxonomy
    stuff: dict[int, StuffTally] = field(default_factory=dict)
    things: dict[int, ThingTally] = field(default_factory=dict)
    miou_intersection: dict[int, int] = field(default_factory=dict)
    miou_union: dict[int, int] = field(default_factory=dict)
    images: int = 0

    @classmethod
    def empty(cls, tax: ClassTaxonomy) -> MetricAccumulator:
        return cls(
            taxonomy=tax,
            stuff={c: StuffTally() for c in tax.stuff_ids},
            things={c: ThingTally() for c in tax.thing_ids},
            miou_intersection={c: 0 for c in tax.class_ids},
            miou_union={c: 0 for c in tax.class_ids},
        )

    def merge(self, other: MetricAccumulator) -> MetricAccumulator:
        return merge(self, other)

    __add__ = merge


def merge(a: MetricAccumulator, b: MetricAccumulator) -> MetricAccumulator:
    """Field-wise sum of two accumulators built under the same taxonomy."""
    if a.taxonomy != b.taxonomy:
        raise TaxonomyError("cannot merge accumulators built with different taxonomies")
    return MetricAccumulator(
        taxonomy=a.taxonomy,
        stuff={c: _add_tallies(a.stuff[c], b.stuff[c]) for c in a.stuff},
        things={c: _add_tallies(a.things[c], b.things[c]) for c in a.things},
        miou_intersection={c: a.miou_intersection[c] + b.miou_intersection[c] for c in a.miou_intersection},
        miou_union={c: a.miou_union[c] + b.miou_union[c] for c in a.miou_union},
        images=a.images + b.images,
    )


def merge_all(accs: Iterable[MetricAccumulator], tax: ClassTaxonomy) -> MetricAccumulator:
    out = MetricAccumulator.empty(tax)
    for acc in accs:
        out = merge(out, acc)
    return out


# ---------------------------------------------------------------------------
# Per-image evaluation


def _iou_matrix(gts: list, preds: list) -> np.ndarray:
    w = np.zeros((len(gts), len(preds)))
    for i, g in enumerate(gts):
        if not g:
            continue
        for j, p in enumerate(preds):
            if p:
                w[i, j] = mask_iou(g, p)
    return w


def match_thing_segments(gt: SegmentSets, pred: SegmentSets, class_id: int,
                         cfg: EvalConfig | None = None) -> Matching:
    """Bipartite matching of one thing class; the pairs are that class's TPs."""
    cfg = cfg or EvalConfig()
    if class_id not in gt.thing_ids:
        raise TaxonomyError(f"class id {class_id} is not a thing class of the taxonomy")
    g = gt.things.get(class_id, [])
    p = pred.things.get(class_id, [])
    attr = cfg.matching_weight
    w = _iou_matrix([getattr(r, attr) for r in g], [getattr(r, attr) for r in p])
    return max_weight_matching(w, cfg.min_match_iou)


def _things_by_class(ann: AmodalImageAnnotation) -> dict[int, list[ThingRegion]]:
    out: dict[int, list[ThingRegion]] = {}
    for seg in ann.segments:
        out.setdefault(seg.class_id, []).append(
            ThingRegion(seg.visible, seg.occluded, seg.instance_index, seg.amodal)
        )
    return out


def _accumulate_thing_class(t: ThingTally, gts: list[ThingRegion], preds: list[ThingRegion],
                            cfg: EvalConfig) -> None:
    vis = _iou_matrix([r.visible for r in gts], [r.visible for r in preds])
    occ = _iou_matrix([r.occluded for r in gts], [r.occluded for r in preds])
    if cfg.matching_weight == "visible":
        m = max_weight_matching(vis, cfg.min_match_iou)
    else:
        m = max_weight_matching(_iou_matrix([r.amodal for r in gts], [r.amodal for r in preds]),
                                cfg.min_match_iou)

    t.tp += len(m.pairs)
    t.fn += len(m.unmatched_gt)
    t.fp += len(m.unmatched_pred)
    # every segment has a nonempty visible region, so visible counts follow the main split
    t.tp_visible += len(m.pairs)
    t.fn_visible += len(m.unmatched_gt)
    t.fp_visible += len(m.unmatched_pred)
    for gi, pi, _ in m.pairs:
        t.amodal_iou_sum += _exact.to_fixed(mask_iou(gts[gi].amodal, preds[pi].amodal))
        t.visible_iou_sum += _exact.to_fixed(vis[gi, pi])
        g_occ, p_occ = bool(gts[gi].occluded), bool(preds[pi].occluded)
        if g_occ and p_occ:
            t.tp_occluded += 1
            t.occluded_iou_sum += _exact.to_fixed(occ[gi, pi])
        elif g_occ:
            t.fn_occluded += 1
        elif p_occ:
            t.fp_occluded += 1
    t.fn_occluded += sum(1 for gi in m.unmatched_gt if gts[gi].occluded)
    t.fp_occluded += sum(1 for pi in m.unmatched_pred if preds[pi].occluded)

    for gi, r in enumerate(gts):
        best_v = float(vis[gi].max()) if preds else 0.0
        t.cov_visible_weighted += _exact.to_fixed(best_v, r.visible.area)
        t.cov_visible_pixels += r.visible.area
        if r.occluded:
            best_o = float(occ[gi].max()) if preds else 0.0
            t.cov_occluded_weighted += _exact.to_fixed(best_o, r.occluded.area)
            t.cov_occluded_pixels += r.occluded.area


def evaluate_image(gt: AmodalImageAnnotation, pred: AmodalImageAnnotation, tax: ClassTaxonomy,
                   cfg: EvalConfig | None = None) -> MetricAccumulator:
    """Tally APQ/APC/mIoU contributions of one groundtruth/prediction pair."""
    cfg = cfg or EvalConfig()
    if gt.shape != pred.shape:
        raise ValueError(f"image dimension mismatch: groundtruth {gt.shape} vs prediction {pred.shape}")
    check_annotation(gt, tax, "groundtruth")
    check_annotation(pred, tax, "prediction")
    acc = MetricAccumulator.empty(tax)
    acc.images = 1

    # Class-level confusion over visible labels: stuff segments are whole
    # classes, so stuff IoUs and mIoU both come from this one table.
    k = MAX_CLASS_ID + 1
    gt_cls = (gt.visible_map // LABEL_DIVISOR).ravel()
    pred_cls = (pred.visible_map // LABEL_DIVISOR).ravel()
    cm = np.bincount(gt_cls * k + pred_cls, minlength=k * k).reshape(k, k)
    gt_area = cm.sum(axis=1)
    pred_area = cm.sum(axis=0)

    for c in tax.stuff_ids:
        s = acc.stuff[c]
        if gt_area[c] == 0:
            continue
        inter = int(cm[c, c])
        iou = inter / int(gt_area[c] + pred_area[c] - inter)
        s.gt_count += 1
        if iou > 0:
            s.iou_sum += _exact.to_fixed(iou)
        s.cov_weighted += _exact.to_fixed(iou, int(gt_area[c]))
        s.cov_pixels += int(gt_area[c])

    if cfg.include_miou:
        pred_area_valid = cm[1:, :].sum(axis=0)  # ignore pixels that are void in groundtruth
        for c in tax.class_ids:
            acc.miou_intersection[c] += int(cm[c, c])
            acc.miou_union[c] += int(gt_area[c] + pred_area_valid[c] - cm[c, c])

    gt_things = _things_by_class(gt)
    pred_things = _things_by_class(pred)
    for c in tax.thing_ids:
        gts, preds = gt_things.get(c, []), pred_things.get(c, [])
        if gts or preds:
            _accumulate_thing_class(acc.things[c], gts, preds, cfg)
    return acc


def evaluate(pairs: Iterable[tuple[AmodalImageAnnotation, AmodalImageAnnotation]], tax: ClassTaxonomy,
             cfg: EvalConfig | None = None) -> MetricAccumulator:
    return merge_all((evaluate_image(g, p, tax, cfg) for g, p in pairs), tax)


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class ClassScores:
    class_id: int
    name: str
    kind: str  # "stuff" or "thing"
    APQ: float | None
    APC: float | None
    APQ_visible: float | None = None
    APQ_occluded: float | None = None
    APC_visible: float | None = None
    APC_occluded: float | None = None
    IoU: float | None = None

    @property
    def evaluated(self) -> bool:
        return self.APQ is not None or self.APC is not None


SUMMARY_FIELDS = (
    "APQ", "APC", "APQ_S", "APQ_T", "APC_S", "APC_T",
    "APQ_T_visible", "APQ_T_occluded", "APC_T_visible", "APC_T_occluded", "mIoU",
)


@dataclass(frozen=True)
class MetricReport:
    """Finalized percentages. Undefined values (zero denominators) are None."""

    APQ: float | None
    APC: float | None
    APQ_S: float | None
    APQ_T: float | None
    APC_S: float | None
    APC_T: float | None
    APQ_T_visible: float | None
    APQ_T_occluded: float | None
    APC_T_visible: float | None
    APC_T_occluded: float | None
    mIoU: float | None
    classes: tuple[ClassScores, ...]
    classes_evaluated: tuple[int, ...]
    classes_skipped: tuple[int, ...]
    images: int = 0

    def summary(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in SUMMARY_FIELDS}

    def summary_line(self) -> str:
        keys = ("APQ", "APC", "APQ_S", "APQ_T", "APC_S", "APC_T", "mIoU")
        return " ".join(f"{k}={'n/a' if getattr(self, k) is None else format(getattr(self, k), '.4f')}"
                        for k in keys)

    def scores(self, class_id: int) -> ClassScores:
        for s in self.classes:
            if s.class_id == class_id:
                return s
        raise KeyError(class_id)


def _div(fixed_sum: int, count: int) -> Fraction | None:
    return _exact.ratio(fixed_sum, count) if count else None


def finalize(acc: MetricAccumulator, tax: ClassTaxonomy | None = None) -> MetricReport:
    """Reduce accumulated tallies to APQ/APC/mIoU percentages."""
    tax = tax or acc.taxonomy
    if tax != acc.taxonomy:
        raise TaxonomyError("accumulator was built with a different taxonomy")
    exact: dict[int, dict[str, Fraction | None]] = {}
    for c in tax.stuff_ids:
        s = acc.stuff[c]
        exact[c] = {"APQ": _div(s.iou_sum, s.gt_count), "APC": _div(s.cov_weighted, s.cov_pixels)}
    for c in tax.thing_ids:
        t = acc.things[c]
        exact[c] = {
            "APQ": _div(t.amodal_iou_sum, t.tp + t.fp + t.fn),
            "APQ_visible": _div(t.visible_iou_sum, t.tp_visible + t.fp_visible + t.fn_visible),
            "APQ_occluded": _div(t.occluded_iou_sum, t.tp_occluded + t.fp_occluded + t.fn_occluded),
            "APC_visible": _div(t.cov_visible_weighted, t.cov_visible_pixels),
            "APC_occluded": _div(t.cov_occluded_weighted, t.cov_occluded_pixels),
            # N_v*Cov_v + N_o*Cov_o over N_v + N_o reduces to the summed weighted tallies
            "APC": _div(t.cov_visible_weighted + t.cov_occluded_weighted,
                        t.cov_visible_pixels + t.cov_occluded_pixels),
        }
    ious: dict[int, Fraction | None] = {
        c: Fraction(acc.miou_intersection[c], acc.miou_union[c]) if acc.miou_union[c] else None
        for c in tax.class_ids
    }

    def agg(ids, key):
        return _exact.percent(_exact.mean(exact[c][key] for c in ids if exact[c].get(key) is not None))

    classes = []
    for c in tax.class_ids:
        e = exact[c]
        classes.append(ClassScores(
            class_id=c,
            name=tax.name(c),
            kind="stuff" if tax.is_stuff(c) else "thing",
            APQ=_exact.percent(e["APQ"]),
            APC=_exact.percent(e["APC"]),
            APQ_visible=_exact.percent(e.get("APQ_visible")),
            APQ_occluded=_exact.percent(e.get("APQ_occluded")),
            APC_visible=_exact.percent(e.get("APC_visible")),
            APC_occluded=_exact.percent(e.get("APC_occluded")),
            IoU=_exact.percent(ious[c]),
        ))
    any_miou = any(acc.miou_union.values())
    return MetricReport(
        APQ=agg(tax.class_ids, "APQ"),
        APC=agg(tax.class_ids, "APC"),
        APQ_S=agg(tax.stuff_ids, "APQ"),
        APQ_T=agg(tax.thing_ids, "APQ"),
        APC_S=agg(tax.stuff_ids, "APC"),
        APC_T=agg(tax.thing_ids, "APC"),
        APQ_T_visible=agg(tax.thing_ids, "APQ_visible"),
        APQ_T_occluded=agg(tax.thing_ids, "APQ_occluded"),
        APC_T_visible=agg(tax.thing_ids, "APC_visible"),
        APC_T_occluded=agg(tax.thing_ids, "APC_occluded"),
        mIoU=_exact.percent(_exact.mean(v for v in ious.values() if v is not None)) if any_miou else None,
        classes=tuple(classes),
        classes_evaluated=tuple(s.class_id for s in classes if s.evaluated),
        classes_skipped=tuple(s.class_id for s in classes if not s.evaluated),
        images=acc.images,
    )

