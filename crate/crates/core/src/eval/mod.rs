//! Cross-validation, metrics, attribution and report rendering.

pub mod attribution;
pub mod cv;
pub mod metrics;
pub mod pca;
pub mod report;

pub use attribution::{
    ig_feedforward, integrated_gradients, merge_boxes, node_attribution, AttributionReport, IgResult, ModalityShare,
    NodeAttribution, NodeAttributionConfig, RankedFeature, DEFAULT_IG_STEPS,
};
pub use cv::{stratified_kfold, CvSplit, Fold};
pub use metrics::{accuracy, confusion_matrix, macro_auroc, AurocReport, FoldMetrics, MetricsReport};
pub use pca::{jacobi_eigen, pca_project, PcaProjection};
pub use report::{metrics_svg, pca_svg, render_report, ReportInput};
