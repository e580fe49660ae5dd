//! Quantitative metrics and interpolation baselines.

mod baseline;
mod metrics;
mod report;

pub use baseline::{upsample_tricubic_baseline, upsample_trilinear_baseline};
pub use metrics::{
    bland_altman, bland_altman_components, divergence_field, divergence_stats, flow_rate, flow_rate_error,
    rel_speed_error, rel_speed_error_slices, sample_mask, BlandAltman, DivergenceStats, FlowRateError, MetricConfig,
    PlaneSpec, DEFAULT_EPSILON,
};
pub use report::{dominant_axis, metric_report, EvaluationReport, FrameReport, MetricReport, PlaneFlow, ReportOptions};
