"""File formats: annotations (16-bit PNG + JSON sidecar), APST tensors, reports.

Annotation file set for a path stem ``s``:

* ``s.png`` -- single-channel 16-bit PNG, pixel = ``class_id * 1000 +
  instance_index``, 0 = void;
* ``s.json`` -- sidecar listing every thing segment of the PNG once, in depth
  order (back to front)::

      {"format": "apseval.annotation", "version": 1, "height": H, "width": W,
       "segments": [{"class_id": 3, "instance_index": 42,
                     "amodal": {"size": [H, W], "counts": [...]},
                     "confidence": 0.9}]}

  ``counts`` is the row-major RLE of the amodal mask starting with a count of
  unset pixels. ``confidence`` is optional.

APST tensor: ``b"APST"``, u32 version (1), u32 rank, rank x u32 dims, then
row-major float32 payload; everything little-endian.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from apseval.core import (
    LABEL_DIVISOR,
    AmodalImageAnnotation,
    AmodalSegment,
    BinaryMask,
    ClassTaxonomy,
    TaxonomyError,
    check_annotation,
)
from apseval.fusion import InstancePrediction
from apseval.metrics import SUMMARY_FIELDS, ClassScores, MetricReport
from apseval.stats import ClassStats, StatsReport, truncate_percent

ANNOTATION_FORMAT = "apseval.annotation"
METRIC_SCHEMA = "apseval.metric_report"
STATS_SCHEMA = "apseval.stats_report"
SCHEMA_VERSION = 1
TENSOR_MAGIC = b"APST"
TENSOR_VERSION = 1
MAX_PNG_CODE = 65535
MAX_TENSOR_ELEMENTS = 1 << 34


class FormatError(ValueError):
    """Malformed file content; the message names the byte offset or JSON path."""


class EncodingError(ValueError):
    """A value cannot be represented in the target file format."""


# ---------------------------------------------------------------------------
# Taxonomy


def read_taxonomy(path) -> ClassTaxonomy:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    return ClassTaxonomy.from_dict(doc)


def write_taxonomy(tax: ClassTaxonomy, path) -> None:
    Path(path).write_text(json.dumps(tax.to_dict(), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Annotations


def annotation_paths(path_stem) -> tuple[Path, Path]:
    stem = Path(path_stem)
    return stem.with_name(stem.name + ".png"), stem.with_name(stem.name + ".json")


def write_annotation(ann: AmodalImageAnnotation, tax: ClassTaxonomy, path_stem) -> tuple[Path, Path]:
    check_annotation(ann, tax, str(path_stem))
    vm = ann.visible_map
    if vm.size and int(vm.max()) > MAX_PNG_CODE:
        y, x = np.argwhere(vm > MAX_PNG_CODE)[0]
        raise EncodingError(f"label code {int(vm[y, x])} at pixel ({y}, {x}) exceeds the 16-bit PNG range")
    png_path, json_path = annotation_paths(path_stem)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(vm.astype(np.uint16)).save(png_path, format="PNG")
    segments = []
    for seg in ann.segments:
        entry = {
            "class_id": seg.class_id,
            "instance_index": seg.instance_index,
            "amodal": {"size": [ann.height, ann.width], "counts": list(seg.amodal.runs)},
        }
        if seg.confidence is not None:
            entry["confidence"] = seg.confidence
        segments.append(entry)
    doc = {"format": ANNOTATION_FORMAT, "version": SCHEMA_VERSION,
           "height": ann.height, "width": ann.width, "segments": segments}
    json_path.write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")
    return png_path, json_path


def _read_label_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise FormatError(f"{path}: not a PNG file")
            if im.mode not in ("I;16", "I;16B", "I", "L"):
                raise FormatError(f"{path}: expected a single-channel label PNG, got mode {im.mode}")
            arr = np.array(im)
    except FormatError:
        raise
    except Exception as exc:  # Pillow raises a zoo of exception types
        raise FormatError(f"{path}: unreadable PNG: {exc}") from exc
    return arr.astype(np.int32)


def _get(doc, key, path: str, kind):
    if not isinstance(doc, dict) or key not in doc:
        raise FormatError(f"{path}.{key}: missing")
    v = doc[key]
    if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise FormatError(f"{path}.{key}: expected integer, got {v!r}")
    if kind is list and not isinstance(v, list):
        raise FormatError(f"{path}.{key}: expected array")
    return v


def read_annotation(path_stem, tax: ClassTaxonomy, validate: bool = True) -> AmodalImageAnnotation:
    """Load an annotation file set.

    Raises :class:`FormatError` for malformed files and orphan or missing
    sidecar entries. With ``validate`` (the default) the decoded annotation is
    also checked and :class:`~apseval.core.AnnotationError` lists every
    violated invariant.
    """
    png_path, json_path = annotation_paths(path_stem)
    if not png_path.exists():
        raise FormatError(f"{png_path}: missing label PNG")
    if not json_path.exists():
        raise FormatError(f"{json_path}: missing sidecar JSON")
    vm = _read_label_png(png_path)
    try:
        doc = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{json_path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    except UnicodeDecodeError as exc:
        raise FormatError(f"{json_path}: invalid UTF-8 at byte {exc.start}") from exc
    height = _get(doc, "height", "$", int)
    width = _get(doc, "width", "$", int)
    if (height, width) != vm.shape:
        raise FormatError(f"{json_path}: $.height/$.width {height}x{width} disagree with PNG {vm.shape[0]}x{vm.shape[1]}")
    entries = _get(doc, "segments", "$", list)

    codes = set(np.unique(vm).tolist())
    segments = []
    listed = set()
    for k, entry in enumerate(entries):
        p = f"$.segments[{k}]"
        c = _get(entry, "class_id", p, int)
        i = _get(entry, "instance_index", p, int)
        amodal_doc = _get(entry, "amodal", p, dict)
        size = _get(amodal_doc, "size", p + ".amodal", list)
        counts = _get(amodal_doc, "counts", p + ".amodal", list)
        if size != [height, width]:
            raise FormatError(f"{json_path}: {p}.amodal.size {size} disagrees with image {height}x{width}")
        if not all(isinstance(r, int) and not isinstance(r, bool) for r in counts):
            raise FormatError(f"{json_path}: {p}.amodal.counts must be integers")
        try:
            amodal = BinaryMask.from_runs(height, width, counts)
        except ValueError as exc:
            raise FormatError(f"{json_path}: {p}.amodal.counts: {exc}") from exc
        conf = entry.get("confidence")
        if conf is not None and (isinstance(conf, bool) or not isinstance(conf, (int, float))):
            raise FormatError(f"{json_path}: {p}.confidence must be a number")
        code = c * LABEL_DIVISOR + i
        if code not in codes:
            raise FormatError(f"{json_path}: {p}: orphan segment ({c}, {i}) has no pixels in {png_path.name}")
        listed.add(code)
        visible = BinaryMask.from_array(vm == code)
        segments.append(AmodalSegment(c, i, visible, amodal, None if conf is None else float(conf)))

    thing_ids = set(tax.thing_ids)
    for code in sorted(codes):
        c, i = divmod(code, LABEL_DIVISOR)
        if c in thing_ids and code not in listed:
            raise FormatError(f"{json_path}: $.segments: missing entry for thing segment ({c}, {i}) in {png_path.name}")
    ann = AmodalImageAnnotation(vm, segments)
    if validate:
        check_annotation(ann, tax, str(path_stem))
    return ann


def list_stems(directory) -> list[str]:
    """Sorted stems of all label PNGs in a directory."""
    return sorted(p.stem for p in Path(directory).glob("*.png"))


# ---------------------------------------------------------------------------
# Tensors


def write_tensor(t, path) -> None:
    arr = np.asarray(t, dtype="<f4")  # tobytes below copies to C order; keeps rank 0 intact
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise FormatError("offset 0: truncated header (missing magic)")
    if data[:4] != TENSOR_MAGIC:
        raise FormatError(f"offset 0: bad magic {data[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(data) < 12:
        raise FormatError(f"offset 4: truncated header ({len(data)} bytes)")
    version, rank = struct.unpack_from("<II", data, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"offset 4: unsupported version {version}")
    end = 12 + 4 * rank
    if len(data) < end:
        raise FormatError(f"offset 12: truncated dims (rank {rank} needs {4 * rank} bytes)")
    dims = struct.unpack_from(f"<{rank}I", data, 12)
    count = math.prod(dims)
    if count > MAX_TENSOR_ELEMENTS:
        raise FormatError(f"offset 12: dims {dims} overflow the element limit")
    need = end + 4 * count
    if len(data) < need:
        raise FormatError(f"offset {len(data)}: truncated payload, expected {4 * count} bytes from offset {end}")
    if len(data) > need:
        raise FormatError(f"offset {need}: {len(data) - need} trailing bytes after payload")
    return np.frombuffer(data, dtype="<f4", count=count, offset=end).reshape(dims).astype(np.float32)


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Instance manifests (fusion input)


def read_instances(path) -> list[InstancePrediction]:
    """Read a fusion instance manifest.

    Logit grids are either nested arrays or paths (relative to the manifest)
    of APST tensor files.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    entries = _get(doc, "instances", "$", list)
    out = []
    for k, e in enumerate(entries):
        p = f"$.instances[{k}]"
        grids = {}
        for key in ("inmodal_logits", "amodal_logits"):
            v = _get(e, key, p, None)
            if isinstance(v, str):
                grids[key] = read_tensor(path.parent / v)
            else:
                try:
                    grids[key] = np.asarray(v, dtype=np.float32)
                except (TypeError, ValueError) as exc:
                    raise FormatError(f"{path}: {p}.{key}: not a numeric grid") from exc
        bbox = _get(e, "amodal_bbox", p, list)
        if len(bbox) != 4 or not all(isinstance(v, int) for v in bbox):
            raise FormatError(f"{path}: {p}.amodal_bbox must be four integers [x0, y0, x1, y1]")
        try:
            out.append(InstancePrediction(
                class_id=_get(e, "class_id", p, int),
                confidence=float(_get(e, "confidence", p, None)),
                amodal_bbox=tuple(bbox),
                **grids,
            ))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}: {p}: {exc}") from exc
    return out


def write_instances(instances, path) -> None:
    doc = {"instances": [
        {
            "class_id": inst.class_id,
            "confidence": inst.confidence,
            "amodal_bbox": list(inst.amodal_bbox),
            "inmodal_logits": inst.inmodal_logits.tolist(),
            "amodal_logits": inst.amodal_logits.tolist(),
        }
        for inst in instances
    ]}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Reports


class _Fixed4(float):
    """Float emitted with exactly four decimals."""


def _fx(v):
    return None if v is None else _Fixed4(v)


def _encode(obj, indent: int = 0) -> str:
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, _Fixed4):
        return f"{float(obj):.4f}"
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise EncodingError(f"non-finite number {obj!r} in report")
        return json.dumps(obj)
    if isinstance(obj, (int, str)):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k), ensure_ascii=False)}: {_encode(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_encode(v) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + _encode(v, indent + 1) for v in obj) + "\n" + pad + "]"
    raise EncodingError(f"cannot encode {type(obj).__name__} in report")


CLASS_SCORE_FIELDS = ("APQ", "APC", "APQ_visible", "APQ_occluded", "APC_visible", "APC_occluded", "IoU")
SHAPE_FIELDS = ("inmodal_convexity", "inmodal_simplicity", "amodal_convexity", "amodal_simplicity")


def _metric_doc(r: MetricReport) -> dict:
    return {
        "schema": METRIC_SCHEMA,
        "schema_version": SCHEMA_VERSION,
        "images": r.images,
        "summary": {k: _fx(getattr(r, k)) for k in SUMMARY_FIELDS},
        "classes": [
            {"id": s.class_id, "name": s.name, "kind": s.kind,
             **{k: _fx(getattr(s, k)) for k in CLASS_SCORE_FIELDS}}
            for s in r.classes
        ],
        "classes_evaluated": list(r.classes_evaluated),
        "classes_skipped": list(r.classes_skipped),
        "raw": {
            "summary": {k: getattr(r, k) for k in SUMMARY_FIELDS},
            "classes": [{"id": s.class_id, **{k: getattr(s, k) for k in CLASS_SCORE_FIELDS}} for s in r.classes],
        },
    }


def _stats_doc(r: StatsReport) -> dict:
    return {
        "schema": STATS_SCHEMA,
        "schema_version": SCHEMA_VERSION,
        "images": r.images,
        "instances": r.instances,
        "summary": {k: _fx(getattr(r, k)) for k in SHAPE_FIELDS},
        "classes": [
            {"id": c.class_id, "name": c.name, "count": c.count,
             "percent": truncate_percent(c.count, r.instances),
             **{k: _fx(getattr(c, k)) for k in SHAPE_FIELDS}}
            for c in r.classes
        ],
        "occlusion_histogram": {"bin_edges": list(r.bin_edges), "counts": list(r.histogram)},
        "raw": {
            "summary": {k: getattr(r, k) for k in SHAPE_FIELDS},
            "classes": [{"id": c.class_id, "ratio": c.ratio, **{k: getattr(c, k) for k in SHAPE_FIELDS}}
                        for c in r.classes],
        },
    }


def report_to_json(report: MetricReport | StatsReport) -> str:
    if isinstance(report, MetricReport):
        doc = _metric_doc(report)
    elif isinstance(report, StatsReport):
        doc = _stats_doc(report)
    else:
        raise TypeError(f"unsupported report type {type(report).__name__}")
    return _encode(doc) + "\n"


def write_report(report: MetricReport | StatsReport, path) -> str:
    text = report_to_json(report)
    Path(path).write_text(text, encoding="utf-8")
    return text


def report_from_json(text: str) -> MetricReport | StatsReport:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    schema = doc.get("schema") if isinstance(doc, dict) else None
    try:
        if schema == METRIC_SCHEMA:
            raw = {c["id"]: c for c in doc["raw"]["classes"]}
            classes = tuple(
                ClassScores(class_id=c["id"], name=c["name"], kind=c["kind"],
                            **{k: raw[c["id"]][k] for k in CLASS_SCORE_FIELDS})
                for c in doc["classes"]
            )
            return MetricReport(
                **{k: doc["raw"]["summary"][k] for k in SUMMARY_FIELDS},
                classes=classes,
                classes_evaluated=tuple(doc["classes_evaluated"]),
                classes_skipped=tuple(doc["classes_skipped"]),
                images=doc["images"],
            )
        if schema == STATS_SCHEMA:
            raw = {c["id"]: c for c in doc["raw"]["classes"]}
            classes = tuple(
                ClassStats(class_id=c["id"], name=c["name"], count=c["count"], ratio=raw[c["id"]]["ratio"],
                           **{k: raw[c["id"]][k] for k in SHAPE_FIELDS})
                for c in doc["classes"]
            )
            hist = doc["occlusion_histogram"]
            return StatsReport(
                images=doc["images"],
                instances=doc["instances"],
                bin_edges=tuple(hist["bin_edges"]),
                histogram=tuple(hist["counts"]),
                classes=classes,
                **{k: doc["raw"]["summary"][k] for k in SHAPE_FIELDS},
            )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"$: malformed report, missing or invalid field {exc}") from exc
    raise FormatError(f"$.schema: unknown report schema {schema!r}")


def read_report(path) -> MetricReport | StatsReport:
    return report_from_json(Path(path).read_text(encoding="utf-8"))


def write_histogram_csv(report: StatsReport, path) -> None:
    lines = ["bin_low,bin_high,count"]
    for k, n in enumerate(report.histogram):
        lines.append(f"{report.bin_edges[k]!r},{report.bin_edges[k + 1]!r},{n}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


__all__ = [
    "FormatError", "EncodingError", "TaxonomyError",
    "read_taxonomy", "write_taxonomy", "read_annotation", "write_annotation", "list_stems",
    "read_tensor", "write_tensor", "decode_tensor", "read_instances", "write_instances",
    "write_report", "read_report", "report_to_json", "report_from_json", "write_histogram_csv",
]
