//! Evaluation mathematics: multi-label metrics, single-label accuracy,
//! label-powerset accounting, clustering indices and the paired t-test.

mod cluster;
mod multilabel;
mod powerset;
mod ranking;
mod ttest;

pub use cluster::{calinski_harabasz, cluster_quality, davies_bouldin, silhouette, ClusterQuality};
pub use multilabel::{average_precision, evaluate, EvalResult, TABLE_HEADER};
pub use powerset::{powerset_report, PowersetBucket, PowersetReport, DEFAULT_TOP_M};
pub use ranking::{error_rate, topk_accuracy};
pub use ttest::{paired_ttest, two_sided_p, TTestResult};

/// Default decision threshold for CP/CR/OP/OR.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
