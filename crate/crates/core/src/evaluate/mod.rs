//! Fidelity, downstream utility and privacy metrics for synthetic cohorts.

pub mod fidelity;
pub mod privacy;
pub mod stats;
pub mod tstr;

use thiserror::Error;

use crate::engine::EngineError;
use crate::vocab::VocabError;

pub use fidelity::{
    code_counts, code_probs, cooccur_matrix, cooccur_matrix_corr, filter_by_token_length, matrix_corr, paired_probs,
    record_shape, rule_preservation, top_diagnoses, upper_triangle, MatrixCorrelation, ProbKey, ProbMode, ProbTable,
    RecordShape, RulePreservation,
};
pub use privacy::{aia_attack, jaccard, mia_attack, nearest_similarity, AttackKind, AttackReport, SensitiveAttribute};
pub use stats::{auroc, average_ranks, bland_altman, ks_stat, overlap_coeff, pearson, precision_recall_f1, r2, spearman, BlandAltman};
pub use tstr::{build_task, tstr_eval, Logistic, LogisticConfig, TaskData, TstrMetrics, TstrTask};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {x} vs {y}")]
    Length { x: usize, y: usize },
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("{0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("non-finite value")]
    NonFinite,
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("matrix entries are constant")]
    Constant,
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T> = std::result::Result<T, EvalError>;
