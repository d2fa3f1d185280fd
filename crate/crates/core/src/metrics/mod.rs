//! Scene-flow accuracy and detection average precision.

mod detection;
mod flow;

pub use detection::{
    average_precision, default_iou_thresholds, evaluate_detections, match_detections, pair_frames,
    read_detections, score_of, score_order, write_detections, ApOptions, ClassAp, Criterion,
    DetectionConfig, DetectionFrame, DetectionReport, EvalMode, IouKind, MatchResult, NamedBoxes,
    AP_SAMPLES, CSV_HEADER, DETECTIONS_FORMAT, DETECTIONS_VERSION, DISTANCE_THRESHOLDS,
};
pub use flow::{
    flow_errors, pool_flow_metrics, read_flow_record, scene_flow_metrics, write_flow_record,
    FlowMetrics, FlowRecord, FLOW_FORMAT, FLOW_VERSION, OUTLIER_THRESHOLD, RELAXED_THRESHOLD,
    STRICT_THRESHOLD,
};
