//! Confusion counts, one-vs-rest ROC curves with exact AUC, and the table,
//! CSV and SVG report writers.

mod report;
mod roc;
mod svg;

pub use report::{auc_tables, one_vs_rest_report, roc_csv, AucTable, ClassRoc, OneVsRestReport};
pub use roc::{confusion, fpr, pair_auc, roc_curve, tpr, trapezoid_area, ConfusionCounts, Rate, RocCurve, RocPoint};
pub use svg::{roc_svg, SvgCurve};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("labels contain only one class; the ROC curve is undefined")]
    SingleClass,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("sample {index}: {message}")]
    BadProbabilities { index: usize, message: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}
