//! Record serialization for the auditor.

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use ehrgen::corpus::{Category, Record};
use ehrgen::vocab::Vocabulary;

pub const HEADER: [&str; 4] = ["time", "code", "numerical_value", "code_label"];

struct Row {
    time: DateTime<Utc>,
    code: String,
    value: Option<f64>,
    label: String,
}

fn iso(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// One CSV row per event, led by demographic tag rows at the first
/// timestamp and ending with a `DEATH` row at discharge when the record
/// ends in death. Rows are sorted by time (stable, so same-time rows keep
/// record order).
pub fn record_to_csv(record: &Record, vocab: &Vocabulary) -> String {
    let start = record
        .visits
        .first()
        .map(|v| v.admit_time)
        .unwrap_or_else(|| Utc.with_ymd_and_hms(record.year, 1, 1, 0, 0, 0).single().unwrap_or_default());
    let demo = vocab.demographic_ids(record.age_years, record.sex, record.race, record.marital, record.year);
    let demo_labels = [
        format!("Age {} years", record.age_years),
        format!("Sex {}", record.sex.as_str()),
        format!("Race {}", record.race.as_str()),
        format!("Marital status {}", record.marital.as_str()),
        format!("Admission year {}", record.year),
    ];
    let mut rows: Vec<Row> = demo
        .iter()
        .zip(demo_labels)
        .map(|(&id, label)| Row {
            time: start,
            code: vocab.name(id).to_string(),
            value: None,
            label,
        })
        .collect();
    for visit in &record.visits {
        for e in &visit.events {
            let label = if e.label.is_empty() {
                vocab
                    .concept_id(e.category, &e.code)
                    .ok()
                    .and_then(|id| vocab.tokens()[id].label.clone())
                    .unwrap_or_default()
            } else {
                e.label.clone()
            };
            rows.push(Row {
                time: e.time,
                code: e.concept_key(),
                value: if e.category == Category::Lab { e.value } else { None },
                label,
            });
        }
        if visit.death {
            rows.push(Row {
                time: visit.discharge_time,
                code: "DEATH".into(),
                value: None,
                label: "In-hospital death".into(),
            });
        }
    }
    rows.sort_by_key(|r| r.time);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory write");
    for r in rows {
        let value = r.value.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([iso(r.time), r.code, value, r.label]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv of utf-8 fields")
}
