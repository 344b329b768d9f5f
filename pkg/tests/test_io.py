from __future__ import annotations

import json
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from apseval import io as aio
from apseval.core import AmodalImageAnnotation, AmodalSegment, AnnotationError, ClassTaxonomy
from apseval.metrics import evaluate, finalize
from apseval.stats import dataset_stats
from apseval.synth import PerturbationSpec, SceneSpec, generate_scene, generate_scenes, perturb

from conftest import box_mask

TMP = dict(suppress_health_check=[HealthCheck.function_scoped_fixture], deadline=None)


def test_taxonomy_round_trip(tmp_path, tax):
    aio.write_taxonomy(tax, tmp_path / "t.json")
    assert aio.read_taxonomy(tmp_path / "t.json") == tax


def test_taxonomy_bad_json(tmp_path):
    (tmp_path / "t.json").write_text("{ nope")
    with pytest.raises(aio.FormatError, match="byte"):
        aio.read_taxonomy(tmp_path / "t.json")


@settings(max_examples=15, **TMP)
@given(st.integers(0, 2**32))
def test_annotation_round_trip(tmp_path, seed):
    from apseval.synth import default_taxonomy

    tax = default_taxonomy()
    ann = generate_scene(SceneSpec(height=40, width=70, max_things=10, max_size=30, seed=seed), tax)
    if seed % 2:
        ann = perturb(ann, PerturbationSpec(spawn_probability=0.5, translate=2, seed=seed), tax)
        ann = AmodalImageAnnotation(ann.visible_map, [
            AmodalSegment(s.class_id, s.instance_index, s.visible, s.amodal, 0.25) for s in ann.segments])
    aio.write_annotation(ann, tax, tmp_path / "img")
    assert aio.read_annotation(tmp_path / "img", tax) == ann
    with Image.open(tmp_path / "img.png") as im:
        assert im.mode.startswith("I;16")


def _write_raw(stem, vm, segments, height=None, width=None):
    Image.fromarray(np.asarray(vm, dtype=np.uint16)).save(f"{stem}.png")
    doc = {"format": "apseval.annotation", "version": 1,
           "height": height or vm.shape[0], "width": width or vm.shape[1], "segments": segments}
    with open(f"{stem}.json", "w") as f:
        json.dump(doc, f)


def test_label_code_decoding(tmp_path):
    tax = ClassTaxonomy(stuff_classes=((1, "road"),), thing_classes=((3, "car"),))
    vm = np.full((4, 4), 1000)
    vm[1:3, 1:3] = 3042
    amodal = box_mask(4, 4, 1, 1, 3, 3)
    _write_raw(tmp_path / "a", vm, [{"class_id": 3, "instance_index": 42,
                                    "amodal": {"size": [4, 4], "counts": list(amodal.runs)}}])
    ann = aio.read_annotation(tmp_path / "a", tax)
    (seg,) = ann.segments
    assert (seg.class_id, seg.instance_index) == (3, 42)
    assert ann.class_map[1, 1] == 3 and ann.instance_map[1, 1] == 42


def test_orphan_segment(tmp_path, tax):
    vm = np.full((4, 4), 1000)
    amodal = box_mask(4, 4, 0, 0, 1, 1)
    _write_raw(tmp_path / "a", vm, [{"class_id": 11, "instance_index": 1,
                                    "amodal": {"size": [4, 4], "counts": list(amodal.runs)}}])
    with pytest.raises(aio.FormatError, match="orphan segment"):
        aio.read_annotation(tmp_path / "a", tax)


def test_missing_sidecar_entry(tmp_path, tax):
    vm = np.full((4, 4), 1000)
    vm[0, 0] = 11001
    _write_raw(tmp_path / "a", vm, [])
    with pytest.raises(aio.FormatError):
        aio.read_annotation(tmp_path / "a", tax)


@pytest.mark.parametrize("mutate, where", [
    (lambda d: d.pop("height"), "$.height"),
    (lambda d: d["segments"][0].pop("amodal"), "$.segments[0].amodal"),
    (lambda d: d["segments"][0]["amodal"].update(counts=[1, 2]), "$.segments[0].amodal.counts"),
    (lambda d: d["segments"][0].update(instance_index="x"), "$.segments[0].instance_index"),
])
def test_malformed_sidecar_names_json_path(tmp_path, tax, mutate, where):
    vm = np.full((4, 4), 1000)
    vm[0, 0] = 11001
    m = box_mask(4, 4, 0, 0, 1, 1)
    doc = {"class_id": 11, "instance_index": 1, "amodal": {"size": [4, 4], "counts": list(m.runs)}}
    _write_raw(tmp_path / "a", vm, [doc])
    d = json.loads((tmp_path / "a.json").read_text())
    mutate(d)
    (tmp_path / "a.json").write_text(json.dumps(d))
    with pytest.raises(aio.FormatError) as err:
        aio.read_annotation(tmp_path / "a", tax)
    assert where in str(err.value)


def test_invalid_annotation_lists_violations(tmp_path, tax):
    vm = np.full((4, 4), 1000)
    vm[0, 0] = 11001
    amodal = box_mask(4, 4, 1, 1, 2, 2)  # does not contain the visible pixel
    _write_raw(tmp_path / "a", vm, [{"class_id": 11, "instance_index": 1,
                                    "amodal": {"size": [4, 4], "counts": list(amodal.runs)}}])
    with pytest.raises(AnnotationError) as err:
        aio.read_annotation(tmp_path / "a", tax)
    assert err.value.violations
    ann = aio.read_annotation(tmp_path / "a", tax, validate=False)
    assert len(ann.segments) == 1


def test_sixteen_bit_bound(tmp_path):
    tax = ClassTaxonomy(stuff_classes=((1, "road"),), thing_classes=((65, "late class"),))
    m = box_mask(3, 3, 0, 0, 1, 1)
    ann = AmodalImageAnnotation.from_segments(np.ones((3, 3), dtype=np.int32), [AmodalSegment(65, 999, m, m)])
    with pytest.raises(aio.EncodingError):
        aio.write_annotation(ann, tax, tmp_path / "x")


def test_garbage_png(tmp_path, tax):
    (tmp_path / "a.png").write_bytes(b"\x89PNG not really")
    (tmp_path / "a.json").write_text("{}")
    with pytest.raises(aio.FormatError):
        aio.read_annotation(tmp_path / "a", tax)


# -- tensors --------------------------------------------------------------------


def test_tensor_round_trip(tmp_path):
    t = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    aio.write_tensor(t, tmp_path / "t.apst")
    back = aio.read_tensor(tmp_path / "t.apst")
    assert back.dtype == np.float32 and back.shape == (3, 4, 5)
    assert back.tobytes() == t.tobytes()


def test_bad_magic():
    with pytest.raises(aio.FormatError, match="bad magic"):
        aio.decode_tensor(b"XXXX" + bytes(8))


def test_rank_zero_scalar(tmp_path):
    aio.write_tensor(np.float32(2.5), tmp_path / "s.apst")
    data = (tmp_path / "s.apst").read_bytes()
    assert len(data) == 12 + 4
    assert aio.read_tensor(tmp_path / "s.apst").shape == ()
    assert float(aio.read_tensor(tmp_path / "s.apst")) == 2.5


def test_truncation_and_trailing_bytes():
    good = b"APST" + struct.pack("<III", 1, 1, 2) + struct.pack("<2f", 1, 2)
    assert aio.decode_tensor(good).tolist() == [1.0, 2.0]
    with pytest.raises(aio.FormatError, match="offset"):
        aio.decode_tensor(good[:-1])
    with pytest.raises(aio.FormatError, match="trailing"):
        aio.decode_tensor(good + b"\0")
    with pytest.raises(aio.FormatError, match="offset 4"):
        aio.decode_tensor(b"APST" + struct.pack("<II", 2, 0))


@settings(max_examples=200)
@given(st.binary(max_size=64))
def test_decoder_never_panics(data):
    try:
        aio.decode_tensor(data)
    except aio.FormatError as exc:
        assert "offset" in str(exc)


@settings(max_examples=100)
@given(arrays(np.float32, st.lists(st.integers(0, 4), max_size=4).map(tuple)))
def test_tensor_codec_property(arr):
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        aio.write_tensor(arr, f"{d}/t.apst")
        back = aio.read_tensor(f"{d}/t.apst")
    assert back.shape == arr.shape and back.tobytes() == arr.astype("<f4").tobytes()


def test_instances_round_trip(tmp_path):
    from apseval.fusion import InstancePrediction

    rng = np.random.default_rng(3)
    insts = [InstancePrediction(11, 0.75, (1, 2, 9, 8), rng.normal(size=(28, 28)), rng.normal(size=(28, 28)))]
    aio.write_instances(insts, tmp_path / "i.json")
    (back,) = aio.read_instances(tmp_path / "i.json")
    assert back.amodal_bbox == (1, 2, 9, 8) and back.confidence == 0.75
    assert np.array_equal(back.inmodal_logits, insts[0].inmodal_logits)


def test_instances_with_tensor_paths(tmp_path):
    aio.write_tensor(np.ones((28, 28)), tmp_path / "m.apst")
    (tmp_path / "i.json").write_text(json.dumps({"instances": [
        {"class_id": 11, "confidence": 0.9, "amodal_bbox": [0, 0, 4, 4],
         "inmodal_logits": "m.apst", "amodal_logits": "m.apst"}]}))
    (inst,) = aio.read_instances(tmp_path / "i.json")
    assert inst.inmodal_logits.shape == (28, 28)


# -- reports --------------------------------------------------------------------


def _report(tax, perfect=True, n=3):
    gts = generate_scenes(SceneSpec(height=40, width=60, max_things=6, max_size=25, seed=4), n, tax)
    preds = gts if perfect else [perturb(g, PerturbationSpec(translate=2, morph_radius=1, seed=k), tax)
                                 for k, g in enumerate(gts)]
    return finalize(evaluate(zip(gts, preds), tax))


def test_perfect_report_text(tax):
    text = aio.report_to_json(_report(tax))
    assert '"APQ": 100.0000' in text
    assert '"classes_skipped": [' in text


def test_report_round_trip_byte_identical(tmp_path, tax):
    r = _report(tax, perfect=False)
    text = aio.write_report(r, tmp_path / "r.json")
    back = aio.read_report(tmp_path / "r.json")
    assert back == r
    assert aio.report_to_json(back) == text


def test_stats_report_round_trip(tmp_path, tax):
    gts = generate_scenes(SceneSpec(height=40, width=60, max_things=6, max_size=25, seed=4), 3, tax)
    r = dataset_stats(gts, tax)
    text = aio.write_report(r, tmp_path / "s.json")
    assert aio.read_report(tmp_path / "s.json") == r
    assert aio.report_to_json(aio.read_report(tmp_path / "s.json")) == text
    aio.write_histogram_csv(r, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "bin_low,bin_high,count" and len(lines) == 21


def test_report_schema_errors():
    with pytest.raises(aio.FormatError, match=r"\$.schema"):
        aio.report_from_json('{"schema": "other"}')
    with pytest.raises(aio.FormatError, match="byte"):
        aio.report_from_json("{")
