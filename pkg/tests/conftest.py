from __future__ import annotations

import numpy as np
import pytest

from apseval.core import AmodalImageAnnotation, AmodalSegment, BinaryMask, ClassTaxonomy
from apseval.synth import default_taxonomy


def mask_from_pixels(pixels, height, width) -> BinaryMask:
    arr = np.zeros((height, width), dtype=bool)
    for y, x in pixels:
        arr[y, x] = True
    return BinaryMask.from_array(arr)


def annotation_from_sets(layer: dict, height: int, width: int) -> AmodalImageAnnotation:
    """Build an annotation from ``{"stuff": {cls: pixels}, "things": [(cls, idx, vis, amo)]}``."""
    stuff = np.zeros((height, width), dtype=np.int32)
    for c, pixels in layer["stuff"].items():
        for y, x in pixels:
            stuff[y, x] = c
    segments = [
        AmodalSegment(c, i, mask_from_pixels(vis, height, width), mask_from_pixels(amo, height, width))
        for c, i, vis, amo in layer["things"]
    ]
    return AmodalImageAnnotation.from_segments(stuff, segments)


def box_mask(h, w, y0, x0, y1, x1) -> BinaryMask:
    return BinaryMask.from_box(h, w, y0, x0, y1, x1)


@pytest.fixture
def tax() -> ClassTaxonomy:
    return default_taxonomy()


@pytest.fixture
def tiny_tax() -> ClassTaxonomy:
    return ClassTaxonomy(stuff_classes=((1, "road"), (2, "sky")), thing_classes=((11, "car"), (12, "truck")))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
