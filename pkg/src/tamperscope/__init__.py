"""tamperscope: search-and-compare image forensics.

Given a probe image and a large gallery, retrieve near-duplicates through a
randomized KD-forest over local descriptors, register the best candidate to
the probe, and expose tampering heat maps from five comparison algorithms,
plus the evaluation harness (ROC vs. masks, recall@rank, perturbations) and
a synthetic splice dataset generator.
"""

from .comparators import (
    COMPARATORS,
    ComparatorConfig,
    normalize_polarity,
    thm_hsv_ks,
    thm_irpsnr,
    thm_patchmatch,
    thm_prnu,
    thm_ssim,
)
from .errors import TamperscopeError
from .features import Descriptor, Keypoint, detect_and_describe
from .imaging import Colorspace, HeatMap, Image, load_image, save_image
from .index import ForestIndex, QueryResult, build, knn, load, query_images, save
from .pipeline import BatchSummary, PipelineConfig, ProbeReport, run_batch, run_probe
from .registration import (
    AffineTransform,
    RankedCandidate,
    estimate_affine_msac,
    match_descriptors,
    rfn,
    select_and_warp,
)

__version__ = "0.1.0"

__all__ = [
    "AffineTransform",
    "BatchSummary",
    "COMPARATORS",
    "Colorspace",
    "ComparatorConfig",
    "Descriptor",
    "ForestIndex",
    "HeatMap",
    "Image",
    "Keypoint",
    "PipelineConfig",
    "ProbeReport",
    "QueryResult",
    "RankedCandidate",
    "TamperscopeError",
    "__version__",
    "build",
    "detect_and_describe",
    "estimate_affine_msac",
    "knn",
    "load",
    "load_image",
    "match_descriptors",
    "normalize_polarity",
    "query_images",
    "rfn",
    "run_batch",
    "run_probe",
    "save",
    "save_image",
    "select_and_warp",
    "thm_hsv_ks",
    "thm_irpsnr",
    "thm_patchmatch",
    "thm_prnu",
    "thm_ssim",
]
