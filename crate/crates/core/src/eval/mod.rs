//! Retrieval and answer metrics, and the benchmark harness.

mod bench;
mod metrics;

pub use bench::{
    ground_truth, run_benchmark, BenchmarkConfig, BenchmarkReport, EvalRecord, Method, MethodReport,
    Timings,
};
pub use metrics::{hit_rate_at_k, mean, precision_at_k, rouge_l, MetricError};
