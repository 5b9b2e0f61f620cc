"""Class-agnostic segmentation loss, baselines, metrics and desk-scale experiments."""
from .losses import (
    CasConfig,
    LossBounds,
    cace_backward,
    cace_forward,
    cas_backward,
    cas_bounds,
    cas_forward,
    cas_terms,
    ce_backward,
    ce_forward,
)
from .regions import (
    ImageGrid,
    RegionMap,
    RegionStats,
    SoftmaxField,
    compute_region_stats,
    normalize_regions,
    permute_region_ids,
)

__version__ = "0.1.0"
