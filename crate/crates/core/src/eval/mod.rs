//! Zero-shot classification, retrieval and robustness metrics.

pub mod fixtures;
pub mod metrics;
pub mod protocol;
pub mod report;

pub use fixtures::{bundled_robustness_table, check_robustness_table, FixtureRow, FixtureTable, GapCheck};
pub use metrics::{
    build_class_embeddings, center_frame, mean_top1_top5, recall_at_k, retrieval, robustness_gap,
    round1, zero_shot_classify, ClassEmbedding, Classification, Gap, RetrievalTable, RECALL_KS,
};
pub use protocol::{class_embeddings, embed_captions, embed_images, evaluate, EvalSet, Shift, DEFAULT_TEMPLATES};
pub use report::{Accuracy, EvalReport, MetricRow, VideoMetric, REPORT_SCHEMA_VERSION};
