//! Auditing a whole cohort and keeping the records judged realistic.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ehrgen::corpus::Record;
use ehrgen::vocab::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::client::{AuditError, Auditor, AuditorConfig};
use crate::export::record_to_csv;
use crate::prompt::render_prompt;

pub const DEFAULT_THRESHOLD: u8 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub record_id: String,
    pub score: Option<u8>,
    pub reasoning: String,
    pub retries: u32,
    pub kept: bool,
    /// Set when every attempt failed; such records are never kept.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub threshold: u8,
    pub n_records: usize,
    pub n_kept: usize,
    pub n_failed: usize,
    /// Sorted by record id.
    pub entries: Vec<AuditEntry>,
}

/// Scores every record, up to `max_concurrency` requests at a time, and
/// keeps those scoring at least `threshold`, in input order.
pub fn audit_cohort(
    records: &[Record],
    vocab: &Vocabulary,
    cfg: &AuditorConfig,
    threshold: u8,
) -> Result<(Vec<Record>, AuditReport), AuditError> {
    let auditor = Auditor::new(cfg.clone())?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<AuditEntry>>> = Mutex::new(vec![None; records.len()]);
    let workers = cfg.max_concurrency.min(records.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(rec) = records.get(i) else { break };
                let prompt = render_prompt(&record_to_csv(rec, vocab));
                let entry = match auditor.call(&rec.patient_id, &prompt) {
                    Ok(r) => AuditEntry {
                        record_id: r.record_id,
                        score: Some(r.realism_score),
                        reasoning: r.reasoning,
                        retries: r.attempts - 1,
                        kept: r.realism_score >= threshold,
                        failure: None,
                    },
                    Err(e) => {
                        let retries = match &e {
                            AuditError::Exhausted { attempts, .. } => attempts - 1,
                            _ => 0,
                        };
                        log::warn!("audit of {} failed: {e}", rec.patient_id);
                        AuditEntry {
                            record_id: rec.patient_id.clone(),
                            score: None,
                            reasoning: String::new(),
                            retries,
                            kept: false,
                            failure: Some(e.to_string()),
                        }
                    }
                };
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(entry);
            });
        }
    });
    let entries: Vec<AuditEntry> = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|e| e.expect("every record audited"))
        .collect();
    let kept: Vec<Record> = records
        .iter()
        .zip(&entries)
        .filter(|(_, e)| e.kept)
        .map(|(r, _)| r.clone())
        .collect();
    let mut sorted = entries;
    sorted.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let report = AuditReport {
        threshold,
        n_records: records.len(),
        n_kept: kept.len(),
        n_failed: sorted.iter().filter(|e| e.failure.is_some()).count(),
        entries: sorted,
    };
    Ok((kept, report))
}
