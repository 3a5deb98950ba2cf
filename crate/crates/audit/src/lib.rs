//! Realism auditing of generated records by an LLM judge, plus the
//! statistics used to compare auditors.

pub mod client;
pub mod cohort;
pub mod export;
pub mod prompt;
pub mod stats;
pub mod stub;

pub use client::{call_auditor, parse_reply, AuditError, AuditResult, Auditor, AuditorConfig};
pub use cohort::{audit_cohort, AuditEntry, AuditReport};
pub use export::record_to_csv;
pub use prompt::{render_prompt, PLACEHOLDER, TEMPLATE};
pub use stats::{cohens_d, rank_sum_p, StatsError, EXACT_MAX};
pub use stub::{heuristic_score, StubReply, StubServer};
