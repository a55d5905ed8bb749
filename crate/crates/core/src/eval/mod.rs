//! Segment metrics, aggregation, grouped distributions and prediction dumps.

mod dump;
mod metrics;
mod report;

pub use dump::{dump_name, dump_predictions, format_dump, round_half_up, write_dump, DUMP_HEADER};
pub use metrics::{metrics, quantile, segment, Distribution, Segment, SegmentMetrics, SEGMENT_S, ZERO_VARIANCE};
pub use report::{
    evaluate, group_distribution, predict_all, report, Aggregation, Block, EvalOptions, EvalReport, GroupReport,
    GroupStats, Metrics, NightReport,
};
