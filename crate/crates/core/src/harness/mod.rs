//! Feature extraction, probes and reports.

mod experiment;
mod extract;
mod fewshot;
mod mil;
mod probe;
mod report;
mod split;
mod store;

pub use experiment::{
    extract_store, fraction_sweep, pretrain_and_probe, probe_store, row_labels, slide_split, smoke_config,
    smoke_corpus_spec, SeedOutcome,
};
pub use extract::{extract_features, patch_origins, ExtractSummary};
pub use fewshot::{
    labeled_patches, CacheMeta, FewShotModel, LabeledPatches, ADAPTED_KEYS_FILE, KEYS_FILE, META_FILE, WEIGHTS_FILE,
};
pub use mil::{attention_mil, evaluate_bags, train_attention_mil, BagAggregator, BagDataset, GatedAttention, Pooled};
pub use probe::{
    evaluate_linear, fit_logistic, linear_probe, softmax, LinearModel, ProbeConfig, ProbeKind, ProbeMetrics,
    Standardizer,
};
pub use report::{emit_report, parse_table, render_table, MetricRecord, ReportFiles, REPORT_HEADER};
pub use split::{stratified_split, stratified_subset};
pub use store::{FeatureStore, RowSource, FEATURE_MAGIC, FEATURE_VERSION};

#[cfg(test)]
mod tests;
