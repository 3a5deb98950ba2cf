//! Record ⇄ token sequence conversion.
//!
//! Inside a visit a gap token precedes an event (or `END_VISIT`, for the
//! stretch between the last event and discharge) only when the gap exceeds
//! five minutes; shorter gaps are implied and decode into the first bin.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    gap_range, validate_sequence, Result, TokenKind, VocabError, Vocabulary, AGE_MIN, IMPLICIT_GAP_SECONDS,
};
use crate::corpus::{Event, Marital, Race, Record, Sex, Visit};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn seconds_between(a: DateTime<Utc>, b: DateTime<Utc>) -> u64 {
    (b - a).num_seconds().max(0) as u64
}

/// Tokenizes a record. With `max_len`, longer sequences are cut to that
/// length and flagged as truncated.
pub fn encode_record(record: &Record, vocab: &Vocabulary, max_len: Option<usize>) -> Result<TokenSequence> {
    let mut ids = Vec::with_capacity(8 + 3 * record.event_count());
    ids.push(vocab.start_record_id());
    ids.extend(vocab.demographic_ids(
        record.age_years,
        record.sex,
        record.race,
        record.marital,
        record.year,
    ));
    let mut prev_discharge: Option<DateTime<Utc>> = None;
    for visit in &record.visits {
        if let Some(d) = prev_discharge {
            ids.push(vocab.gap_token(seconds_between(d, visit.admit_time)));
        }
        ids.push(vocab.start_visit_id());
        let mut cursor = visit.admit_time;
        for ev in &visit.events {
            let gap = seconds_between(cursor, ev.time);
            if gap > IMPLICIT_GAP_SECONDS {
                ids.push(vocab.gap_token(gap));
            }
            cursor = ev.time;
            let id = vocab.concept_id(ev.category, &ev.code)?;
            ids.push(id);
            if let Some(v) = ev.value {
                ids.push(vocab.lab_bin(id, v)?);
            }
        }
        let tail = seconds_between(cursor, visit.discharge_time);
        if tail > IMPLICIT_GAP_SECONDS {
            ids.push(vocab.gap_token(tail));
        }
        ids.push(vocab.end_visit_id());
        prev_discharge = Some(visit.discharge_time);
    }
    if record.died() {
        ids.push(vocab.death_id());
    }
    ids.push(vocab.end_record_id());
    let truncated = max_len.is_some_and(|m| ids.len() > m);
    if let Some(m) = max_len {
        ids.truncate(m);
    }
    Ok(TokenSequence { ids, truncated })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    pub patient_id: String,
    /// Admission time of the first visit; defaults to January 1 of the
    /// sequence's year token.
    pub epoch: Option<DateTime<Utc>>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            patient_id: "synthetic".into(),
            epoch: None,
        }
    }
}

fn sample_gap<R: Rng + ?Sized>(bin: Option<usize>, rng: &mut R) -> Duration {
    let (lo, hi) = gap_range(bin.unwrap_or(0));
    Duration::seconds(rng.random_range(lo..=hi) as i64)
}

fn suffix<'a>(name: &'a str, prefix: &str) -> Result<&'a str> {
    name.strip_prefix(prefix)
        .ok_or_else(|| VocabError::Invalid(format!("malformed token {name}")))
}

/// Materializes a structurally valid sequence into a record, sampling gap
/// durations and lab values uniformly within their bins.
pub fn decode_sequence<R: Rng + ?Sized>(
    ids: &[usize],
    vocab: &Vocabulary,
    opts: &DecodeOptions,
    rng: &mut R,
) -> Result<Record> {
    if let Some(v) = validate_sequence(ids, vocab).into_iter().next() {
        return Err(VocabError::Structure {
            index: v.index,
            message: v.message,
        });
    }
    let name = |i: usize| vocab.name(ids[i]);
    let age_lo: u32 = suffix(name(1), "AGE_")?
        .split('_')
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(AGE_MIN);
    let age_years = age_lo + rng.random_range(0..5);
    let parse_err = |i: usize| VocabError::Invalid(format!("malformed token {}", name(i)));
    let sex = Sex::parse(suffix(name(2), "SEX_")?).ok_or_else(|| parse_err(2))?;
    let race = Race::parse(suffix(name(3), "RACE_")?).ok_or_else(|| parse_err(3))?;
    let marital = Marital::parse(suffix(name(4), "MARITAL_STATUS_")?).ok_or_else(|| parse_err(4))?;
    let year: i32 = suffix(name(5), "YEAR_")?.parse().map_err(|_| parse_err(5))?;
    let epoch = opts.epoch.unwrap_or_else(|| {
        Utc.with_ymd_and_hms(year, 1, 1, 0, 0, 0)
            .single()
            .expect("year token within chrono range")
    });

    let mut visits: Vec<Visit> = Vec::new();
    let mut cursor = epoch;
    let mut pending_gap: Option<usize> = None;
    let mut current: Option<Visit> = None;
    let mut i = 6;
    while i < ids.len() {
        let id = ids[i];
        match vocab.kind(id) {
            TokenKind::TimeGap => pending_gap = vocab.gap_bin_of(id),
            TokenKind::StartVisit => {
                if let Some(b) = pending_gap.take() {
                    cursor += sample_gap(Some(b), rng);
                }
                current = Some(Visit {
                    admit_time: cursor,
                    discharge_time: cursor,
                    events: Vec::new(),
                    death: false,
                });
            }
            TokenKind::EndVisit => {
                cursor += sample_gap(pending_gap.take(), rng);
                let mut v = current.take().expect("validated: visit open");
                v.discharge_time = cursor;
                visits.push(v);
            }
            TokenKind::Death => {
                visits.last_mut().expect("validated: DEATH follows a visit").death = true;
            }
            TokenKind::EndRecord => break,
            kind => {
                let category = kind.category().expect("validated: clinical event");
                cursor += sample_gap(pending_gap.take(), rng);
                let info = vocab.token(id)?;
                let value = if kind == TokenKind::LabTest {
                    i += 1;
                    let q = vocab.quantile_of(ids[i]).expect("validated: quantile follows lab");
                    let e = vocab.lab_edges(id)?;
                    let (lo, hi) = (e[q], e[q + 1]);
                    Some(if hi > lo { rng.random_range(lo..=hi) } else { lo })
                } else {
                    None
                };
                current.as_mut().expect("validated: event inside a visit").events.push(Event {
                    time: cursor,
                    category,
                    code: info.code.clone().expect("clinical tokens carry codes"),
                    value,
                    unit: if value.is_some() { info.unit.clone() } else { None },
                    label: info.label.clone().unwrap_or_default(),
                });
            }
        }
        i += 1;
    }
    Ok(Record {
        patient_id: opts.patient_id.clone(),
        age_years,
        sex,
        race,
        marital,
        year,
        visits,
    })
}
