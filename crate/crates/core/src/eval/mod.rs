//! Query/gallery retrieval evaluation.

mod extract;
mod metrics;
mod protocol;
mod table;

pub use extract::{evaluate_model, extract_features};
pub use metrics::{average_precision, cmc, mean_average_precision, rank, Distance, QueryRanking, RankingResult};
pub use protocol::{evaluate_protocol, MetricsReport, ProtocolKind, ProtocolSpec, TrialMetrics};
pub use table::{FeatureTable, SampleRef, TABLE_MAGIC};
