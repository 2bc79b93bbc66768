"""Diagnostics toolkit for the speech-text modality gap in end-to-end speech
language models: trace-bundle storage, token alignment, representation
similarity, cross-layer phase analysis, decision-lens metrics, attention
dispersion, intervention planning, linear probes, and report emission."""

from .align import AlignConfig, AlignmentPath, PathStats, build_similarity_matrix, dtw_align, path_stats
from .bundle import (
    BundleError,
    BundleManifest,
    ProjectionHead,
    SampleMeta,
    TraceBundle,
    read_bundle,
    write_bundle,
)
from .crosslayer import (
    PhaseBoundaries,
    RowSummary,
    cross_layer_heatmap,
    detect_phases,
    head_gap,
    summarize_rows,
    two_segment_fit,
)
from .dispersion import (
    DispersionRecord,
    aggregate_median,
    dispersion_metrics,
    normalized_entropy,
    select_head_layer,
)
from .fixtures import gen_fixture_phases, gen_fixture_redundant
from .interventions import (
    CalibrationParams,
    MergeConfig,
    MergePlan,
    RedundancySpec,
    apply_calibration,
    fit_calibration,
    inject_redundancy,
    plan_merges,
)
from .lens import (
    CorrectnessGroups,
    DecisionTrace,
    GapReport,
    accessibility_curve,
    entropy_curve,
    margin_curve,
    parse_answer,
    project_decision,
    score_outcomes,
)
from .probes import ProbeDataset, eval_probe, mean_pooled_features, train_linear_probe
from .report import ReportResult, RunConfig, emit_heatmap_svg, run_pipeline, sweep_dtw
from .similarity import (
    SimilarityError,
    UndefinedCkaError,
    linear_cka,
    standardized_l2,
    token_norm_curve,
    update_cosine_matrix,
)

__version__ = "0.1.0"
