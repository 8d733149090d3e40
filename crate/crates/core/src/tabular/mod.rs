//! Copy-number and clinical-record preparation, plus class-imbalance tools.

pub mod imbalance;
pub mod prep;
pub mod table;

pub use imbalance::{class_weights, oversample, rebalance, stratified_batches, ImbalanceStrategy, RebalancePlan};
pub use prep::{cnv_prepare, drop_sparse_features, knn_impute, masked_distance, CnvMatrix, ColumnEncoding, Encoder};
pub use table::{read_schema, Column, ColumnKind, ColumnSpec, RawTable, TabularMatrix, TabularSchema};
