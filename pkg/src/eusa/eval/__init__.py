from .metrics import (
    VotMetrics,
    center_errors,
    expected_overlap,
    iou,
    precision,
    precision_curve,
    success_auc,
    success_curve,
    vot_metrics,
    vot_runs,
)
from .report import (
    REPORT_SCHEMA,
    MetricsReport,
    emit_report,
    evaluate,
    metrics_from_results,
    report_document,
    track_all,
)
