//! Patient timeline data model, JSONL persistence and patient-level splits.
//!
//! A corpus file holds one [`Record`] per line. Serialization follows struct
//! declaration order, so saving the same corpus twice yields identical bytes.

mod simulate;
mod split;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use simulate::{
    simulate_corpus, CodeSpec, ConditionRule, GapSpec, Implication, LabSpec, SimulatorSpec, VisitCountSpec,
};
pub use split::split_corpus;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("record {patient_id}: {rule}")]
    Invariant { patient_id: String, rule: String },
    #[error("invalid simulator spec: {0}")]
    InvalidSpec(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    Diagnosis,
    Procedure,
    Medication,
    Lab,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Diagnosis,
        Category::Procedure,
        Category::Medication,
        Category::Lab,
    ];

    /// Prefix used for this category's tokens and concept keys.
    pub fn prefix(self) -> &'static str {
        match self {
            Category::Diagnosis => "DX",
            Category::Procedure => "PR",
            Category::Medication => "MED",
            Category::Lab => "LAB",
        }
    }
}

macro_rules! str_enum {
    ($name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $s)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $s),+
                }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s {
                    $($s => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

str_enum!(Sex { M => "M", F => "F" });
str_enum!(Race {
    Asian => "ASIAN",
    Black => "BLACK",
    Hispanic => "HISPANIC",
    Other => "OTHER",
    Unknown => "UNKNOWN",
    White => "WHITE",
});
str_enum!(Marital {
    Divorced => "DIVORCED",
    Married => "MARRIED",
    Single => "SINGLE",
    Unknown => "UNKNOWN",
    Widowed => "WIDOWED",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: DateTime<Utc>,
    pub category: Category,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    pub label: String,
}

impl Event {
    /// Category-qualified identifier, e.g. `DX_E11.9`.
    pub fn concept_key(&self) -> String {
        concept_key(self.category, &self.code)
    }
}

pub fn concept_key(category: Category, code: &str) -> String {
    format!("{}_{}", category.prefix(), code)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub admit_time: DateTime<Utc>,
    pub discharge_time: DateTime<Utc>,
    pub events: Vec<Event>,
    #[serde(default)]
    pub death: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub patient_id: String,
    pub age_years: u32,
    pub sex: Sex,
    pub race: Race,
    pub marital: Marital,
    pub year: i32,
    pub visits: Vec<Visit>,
}

impl Record {
    /// Checks the event, visit and record invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |rule: String| {
            Err(CorpusError::Invariant {
                patient_id: self.patient_id.clone(),
                rule,
            })
        };
        for (vi, visit) in self.visits.iter().enumerate() {
            if visit.discharge_time < visit.admit_time {
                return fail(format!("visit {vi}: discharge precedes admission"));
            }
            for (ei, ev) in visit.events.iter().enumerate() {
                if ev.code.is_empty() {
                    return fail(format!("visit {vi} event {ei}: empty code"));
                }
                if ev.value.is_some() != (ev.category == Category::Lab) {
                    return fail(format!("visit {vi} event {ei}: value must be present exactly for labs"));
                }
                if let Some(v) = ev.value {
                    if !v.is_finite() {
                        return fail(format!("visit {vi} event {ei}: non-finite lab value"));
                    }
                }
                if ev.time < visit.admit_time || ev.time > visit.discharge_time {
                    return fail(format!("visit {vi} event {ei}: time outside the visit"));
                }
                if ei > 0 && visit.events[ei - 1].time > ev.time {
                    return fail(format!("visit {vi}: events out of time order"));
                }
            }
            if vi > 0 && self.visits[vi - 1].admit_time > visit.admit_time {
                return fail("visits out of admission order".into());
            }
            if visit.death && vi + 1 != self.visits.len() {
                return fail(format!("visit {vi}: death on a non-final visit"));
            }
        }
        Ok(())
    }

    pub fn died(&self) -> bool {
        self.visits.last().is_some_and(|v| v.death)
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.visits.iter().flat_map(|v| v.events.iter())
    }

    pub fn event_count(&self) -> usize {
        self.visits.iter().map(|v| v.events.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub name: String,
    pub seed: Option<u64>,
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, records: Vec<Record>) -> Self {
        Self {
            name: name.into(),
            seed: None,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Validates every record and patient id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.patient_id.as_str()) {
                return Err(CorpusError::Invariant {
                    patient_id: r.patient_id.clone(),
                    rule: "duplicate patient_id".into(),
                });
            }
        }
        Ok(())
    }
}

/// Reads a JSONL corpus; the corpus is named after the file stem.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|source| CorpusError::Parse { line: i + 1, source })?;
        records.push(record);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let corpus = Corpus::new(name, records);
    corpus.validate()?;
    Ok(corpus)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in &corpus.records {
        let line = serde_json::to_string(r).expect("records serialize");
        w.write_all(line.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{simulate_corpus, SimulatorSpec};
    use chrono::TimeZone;

    pub(crate) fn ts(s: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(5_000_000_000 + s, 0).unwrap()
    }

    fn ev(t: i64, cat: Category, code: &str, value: Option<f64>) -> Event {
        Event {
            time: ts(t),
            category: cat,
            code: code.into(),
            value,
            unit: value.map(|_| "mg/dL".into()),
            label: format!("{code} label"),
        }
    }

    fn record(id: &str) -> Record {
        Record {
            patient_id: id.into(),
            age_years: 61,
            sex: Sex::F,
            race: Race::White,
            marital: Marital::Married,
            year: 2128,
            visits: vec![Visit {
                admit_time: ts(0),
                discharge_time: ts(1000),
                events: vec![
                    ev(10, Category::Diagnosis, "E11.9", None),
                    ev(20, Category::Lab, "Glucose", Some(140.5)),
                ],
                death: false,
            }],
        }
    }

    #[test]
    fn single_record_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.jsonl");
        save_corpus(&Corpus::new("one", vec![record("p1")]), &p).unwrap();
        let c = load_corpus(&p).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.name, "one");
        assert_eq!(c.records[0], record("p1"));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&record("a")).unwrap();
        let good2 = serde_json::to_string(&record("b")).unwrap();
        std::fs::write(&p, format!("{good}\n{good2}\n{{not json\n")).unwrap();
        match load_corpus(&p) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_corpus_saves_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        save_corpus(&Corpus::default(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        let two = Corpus::new("t", vec![record("a"), record("b")]);
        save_corpus(&two, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
    }

    #[test]
    fn lab_without_value_is_rejected() {
        let mut r = record("x");
        r.visits[0].events[1].value = None;
        let err = r.validate().unwrap_err().to_string();
        assert!(err.contains("x") && err.contains("labs"), "{err}");
        let mut r = record("y");
        r.visits[0].events[0].value = Some(1.0);
        assert!(r.validate().is_err());
    }

    #[test]
    fn visit_and_record_invariants() {
        let mut r = record("x");
        r.visits[0].events.swap(0, 1);
        assert!(r.validate().is_err());

        let mut r = record("x");
        r.visits[0].events[1].time = ts(5000);
        assert!(r.validate().is_err());

        let mut r = record("x");
        let mut second = r.visits[0].clone();
        r.visits[0].death = true;
        second.admit_time = ts(2000);
        second.discharge_time = ts(3000);
        second.events.clear();
        r.visits.push(second);
        assert!(r.validate().unwrap_err().to_string().contains("non-final"));
        r.visits[0].death = false;
        r.visits[1].death = true;
        assert!(r.validate().is_ok());
        assert!(r.died());
    }

    #[test]
    fn duplicate_ids_fail_corpus_validation() {
        let c = Corpus::new("d", vec![record("a"), record("a")]);
        assert!(c.validate().unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn serialization_field_order_is_stable() {
        let s = serde_json::to_string(&record("a")).unwrap();
        let keys = ["patient_id", "age_years", "sex", "race", "marital", "year", "visits"];
        let pos: Vec<usize> = keys.iter().map(|k| s.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(s.contains("\"category\":\"LAB\""));
        assert!(!s.contains("\"value\":null"));
    }

    #[test]
    fn corpus_level_round_trip_is_structural() {
        let c = simulate_corpus(&SimulatorSpec::desk(500), 23).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sim.jsonl");
        save_corpus(&c, &p).unwrap();
        let back = load_corpus(&p).unwrap();
        assert_eq!(back.records, c.records);
        let p2 = dir.path().join("again.jsonl");
        save_corpus(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }
}
