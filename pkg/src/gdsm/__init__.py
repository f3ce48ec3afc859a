"""Greedy dual-stream brain-age estimation from registered 3D volumes."""

from .aggregation import Aggregator, aggregate
from .augmentation import AugmentationConfig, augment
from .extraction import (
    ExtractedPatch,
    Plane,
    RegionSpec,
    SliceTable,
    default_regions,
    extract_global_slices,
    extract_local_patches,
    patch_count,
)
from .config import PipelineConfig, desk_config
from .metrics import MetricsReport, mae, mse, pearson_r, r_squared, rmse
from .models import build_correction_model, build_pathway, predict, train
from .phantom import PhantomParams, generate_cohort, generate_subject
from .pipeline import run_evaluate, run_extract, run_report, run_train
from .selection import (
    PredictionMatrix,
    SelectionResult,
    assemble_matrix,
    pearson_per_column,
    select_top,
)
from .volume import (
    DatasetManifest,
    SubjectRecord,
    Volume3D,
    load_volume,
    normalize_patch,
    stratified_split,
    write_volume,
)

__version__ = "0.1.0"
