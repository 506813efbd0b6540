"""Metric-DP word perturbation with regularised Mahalanobis noise."""

from ._streams import RNG_VERSION
from .embeddings import (
    EmbeddingFormatError,
    EmbeddingStore,
    NearestNeighborIndex,
    corpus_profile,
    load_embeddings,
    nearest_word,
    save_embeddings,
)
from .geometry import (
    NormBoundViolation,
    RegularizedMetric,
    ScaledCovariance,
    euclidean_norm,
    norm_sandwich_bounds,
    regularized_mahalanobis_norm,
    regularized_metric,
    scaled_covariance,
)
from .mechanism import (
    CorpusSummary,
    LaplaceMechanism,
    MahalanobisMechanism,
    OOVError,
    PerturbationConfig,
    perturb_corpus,
    perturb_string,
    perturb_word,
)
from .noise import NoiseBatch, NoiseSample, NoiseSampler, log_unnormalized_density
from .privstats import (
    AuditGuardError,
    AuditReport,
    PrivacyStatsReport,
    audit_dp_ratio,
    compare_mechanisms,
    emit_report,
    load_report,
    make_factory,
    run_privacy_experiment,
)

__version__ = "0.1.0"
