"""Amodal panoptic segmentation toolkit: data model, APQ/APC metrics,
logit fusion, dataset statistics and synthetic scenes."""

from apseval.core import (
    AmodalImageAnnotation,
    AmodalSegment,
    AnnotationError,
    BinaryMask,
    ClassTaxonomy,
    SegmentSets,
    TaxonomyError,
    extract_segments,
    mask_iou,
    validate_annotation,
)
from apseval.fusion import FusionConfig, InstancePrediction, fuse
from apseval.matching import Matching, brute_force_matching, max_weight_matching
from apseval.metrics import (
    EvalConfig,
    MetricAccumulator,
    MetricReport,
    evaluate,
    evaluate_image,
    finalize,
    match_thing_segments,
    merge,
)
from apseval.stats import StatsReport, convexity, dataset_stats, occlusion_level, simplicity
from apseval.synth import PerturbationSpec, SceneSpec, default_taxonomy, generate_scene, perturb

__version__ = "0.1.0"
