"""Dense out-of-distribution scoring with exact k-nearest-neighbor distances.

Pipeline: subsample training features into a reference set, score test
feature maps by mean distance to their k nearest references, optionally
combine with a logit-based parametric score, and evaluate with pixel-pooled
AP / FPR95 / AUROC.
"""

from .errors import (
    ConfigurationError,
    DataError,
    DegenerateFitError,
    DnpError,
    DomainError,
    DtypeError,
    FormatError,
    ShapeError,
    UndefinedMetricError,
    ValidationError,
)
from .evaluator import EvalReport, auroc, average_precision, evaluate_dataset, fpr_at_tpr
from .knn_engine import KnnConfig, Metric, knn_scores, knn_scores_batch, pairwise_distances
from .sampler import (
    CandidatePool,
    SamplingMethod,
    SamplingSpec,
    build_pool,
    downsample_labels,
    greedy_k_center,
    sample_gcs,
    sample_pcgcs,
    sample_random,
)
from .scorer import (
    NormalizationStats,
    ParametricKind,
    combine_scores,
    fit_normalization,
    parametric_score,
    render_scoremap_png,
    upsample_bilinear,
)
from .tensor_store import (
    FeatureMap,
    LabelMask,
    LogitMap,
    OodMask,
    ReferenceSet,
    ScoreMap,
    load_reference_set,
    load_tensor,
    save_reference_set,
    save_tensor,
    scan_dataset,
)

__version__ = "0.1.0"
