//! Atomic token registry: one token per clinical concept, plus demographic,
//! time-gap, lab-quantile and structure tokens.
//!
//! Id layout is fixed by construction: structure tokens, `DEATH`, the 14 gap
//! tokens, the 10 shared quantile tokens, demographics, then clinical codes
//! grouped by category and sorted by name.

mod codec;
mod grammar;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{concept_key, Category, Corpus, Marital, Race, Sex};

pub use codec::{decode_sequence, encode_record, DecodeOptions, TokenSequence};
pub use grammar::{validate_prefix, validate_sequence, GrammarState, Violation};

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("unknown concept {0}")]
    UnknownConcept(String),
    #[error("token id {0} outside the vocabulary")]
    UnknownId(usize),
    #[error("{0} is not a lab test in this vocabulary")]
    UnknownLab(String),
    #[error("structural violation at token {index}: {message}")]
    Structure { index: usize, message: String },
    #[error("invalid vocabulary file: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VocabError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenKind {
    Age,
    Sex,
    Race,
    Marital,
    Year,
    Diagnosis,
    Procedure,
    Medication,
    LabTest,
    LabQuantile,
    TimeGap,
    Death,
    StartRecord,
    StartVisit,
    EndVisit,
    EndRecord,
    Padding,
}

impl TokenKind {
    pub fn category(self) -> Option<Category> {
        match self {
            TokenKind::Diagnosis => Some(Category::Diagnosis),
            TokenKind::Procedure => Some(Category::Procedure),
            TokenKind::Medication => Some(Category::Medication),
            TokenKind::LabTest => Some(Category::Lab),
            _ => None,
        }
    }

    pub fn is_clinical(self) -> bool {
        self.category().is_some()
    }

    pub fn is_demographic(self) -> bool {
        matches!(
            self,
            TokenKind::Age | TokenKind::Sex | TokenKind::Race | TokenKind::Marital | TokenKind::Year
        )
    }

    fn of_category(c: Category) -> Self {
        match c {
            Category::Diagnosis => TokenKind::Diagnosis,
            Category::Procedure => TokenKind::Procedure,
            Category::Medication => TokenKind::Medication,
            Category::Lab => TokenKind::LabTest,
        }
    }
}

/// Demographic slots in prefix order.
pub const DEMOGRAPHIC_ORDER: [TokenKind; 5] = [
    TokenKind::Age,
    TokenKind::Sex,
    TokenKind::Race,
    TokenKind::Marital,
    TokenKind::Year,
];

pub const PADDING: &str = "PADDING";
pub const START_RECORD: &str = "START_RECORD";
pub const START_VISIT: &str = "START_VISIT";
pub const END_VISIT: &str = "END_VISIT";
pub const END_RECORD: &str = "END_RECORD";
pub const DEATH: &str = "DEATH";

const MINUTE: u64 = 60;
const HOUR: u64 = 60 * MINUTE;
const DAY: u64 = 24 * HOUR;
/// Months are counted as 30 days.
const MONTH: u64 = 30 * DAY;

/// `(name, upper edge in seconds)`; intervals are closed on the upper edge.
/// The last bin is open, its decode range is capped at one year.
pub const GAP_BINS: [(&str, u64); 14] = [
    ("_<=5m", 5 * MINUTE),
    ("_5m-15m", 15 * MINUTE),
    ("_15m-1h", HOUR),
    ("_1h-2h", 2 * HOUR),
    ("_2h-6h", 6 * HOUR),
    ("_6h-12h", 12 * HOUR),
    ("_12h-1d", DAY),
    ("_1d-3d", 3 * DAY),
    ("_3d-1w", 7 * DAY),
    ("_1w-2w", 14 * DAY),
    ("_2w-1m", MONTH),
    ("_1m-3m", 3 * MONTH),
    ("_3m-6m", 6 * MONTH),
    ("_>6mt", 365 * DAY),
];

/// Gaps at or below this are implied inside a visit and get no token.
pub const IMPLICIT_GAP_SECONDS: u64 = GAP_BINS[0].1;

/// Index of the gap bin holding `seconds`.
pub fn gap_bin(seconds: u64) -> usize {
    GAP_BINS[..13]
        .iter()
        .position(|&(_, hi)| seconds <= hi)
        .unwrap_or(13)
}

/// Inclusive range of durations a gap bin decodes to.
pub fn gap_range(bin: usize) -> (u64, u64) {
    let lo = if bin == 0 { 0 } else { GAP_BINS[bin - 1].1 + 1 };
    (lo, GAP_BINS[bin].1)
}

pub const N_QUANTILES: usize = 10;
pub const AGE_MIN: u32 = 15;
pub const AGE_MAX: u32 = 100;

/// Lower edge of the 5-year age bin, clamped to the fixed 15–100 range.
pub fn age_bin_start(age: u32) -> u32 {
    (age / 5 * 5).clamp(AGE_MIN, AGE_MAX - 5)
}

fn age_token(lo: u32) -> String {
    format!("AGE_{}_{}_years", lo, lo + 5)
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical decile edges with the minimum and maximum as outer edges.
pub fn decile_edges(values: &[f64]) -> [f64; N_QUANTILES + 1] {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut edges = [0.0; N_QUANTILES + 1];
    for (k, e) in edges.iter_mut().enumerate() {
        *e = quantile_sorted(&sorted, k as f64 / N_QUANTILES as f64);
    }
    edges
}

/// 0-based decile bin: the first `k` with `value ≤ edges[k+1]`, clamped.
pub fn decile_of(edges: &[f64; N_QUANTILES + 1], value: f64) -> usize {
    (1..=N_QUANTILES)
        .find(|&k| value <= edges[k])
        .map_or(N_QUANTILES - 1, |k| k - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub name: String,
    pub kind: TokenKind,
    /// Ontology code for clinical tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl TokenInfo {
    fn plain(name: impl Into<String>, kind: TokenKind) -> Self {
        Self {
            name: name.into(),
            kind,
            code: None,
            label: None,
            unit: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<TokenInfo>,
    lab_bin_edges: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<TokenInfo>,
    index: HashMap<String, usize>,
    lab_edges: HashMap<usize, [f64; N_QUANTILES + 1]>,
    years: (i32, i32),
    first_gap: usize,
    first_quantile: usize,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<TokenInfo>, lab_edges: HashMap<usize, [f64; N_QUANTILES + 1]>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.name.clone(), i).is_some() {
                return Err(VocabError::Invalid(format!("duplicate token {}", t.name)));
            }
        }
        let count = |k: TokenKind| tokens.iter().filter(|t| t.kind == k).count();
        let structure = [
            TokenKind::Padding,
            TokenKind::StartRecord,
            TokenKind::StartVisit,
            TokenKind::EndVisit,
            TokenKind::EndRecord,
        ];
        if structure.iter().any(|&k| count(k) != 1) || count(TokenKind::Death) != 1 {
            return Err(VocabError::Invalid("structure tokens missing or repeated".into()));
        }
        if count(TokenKind::TimeGap) != GAP_BINS.len() || count(TokenKind::LabQuantile) != N_QUANTILES {
            return Err(VocabError::Invalid("expected 14 gap and 10 quantile tokens".into()));
        }
        let first_gap = index.get(GAP_BINS[0].0).copied();
        let first_quantile = index.get("_Q1").copied();
        let (Some(first_gap), Some(first_quantile)) = (first_gap, first_quantile) else {
            return Err(VocabError::Invalid("gap or quantile tokens misnamed".into()));
        };
        for (b, (name, _)) in GAP_BINS.iter().enumerate() {
            if index.get(*name) != Some(&(first_gap + b)) {
                return Err(VocabError::Invalid("gap tokens must be contiguous and ordered".into()));
            }
        }
        for q in 0..N_QUANTILES {
            if index.get(&format!("_Q{}", q + 1)) != Some(&(first_quantile + q)) {
                return Err(VocabError::Invalid("quantile tokens must be contiguous and ordered".into()));
            }
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.kind == TokenKind::LabTest && !lab_edges.contains_key(&i) {
                return Err(VocabError::Invalid(format!("lab {} has no bin edges", t.name)));
            }
            if t.kind.is_clinical() && t.code.is_none() {
                return Err(VocabError::Invalid(format!("clinical token {} lacks a code", t.name)));
            }
        }
        let years: Vec<i32> = tokens
            .iter()
            .filter(|t| t.kind == TokenKind::Year)
            .filter_map(|t| t.name.strip_prefix("YEAR_")?.parse().ok())
            .collect();
        let (Some(&y0), Some(&y1)) = (years.iter().min(), years.iter().max()) else {
            return Err(VocabError::Invalid("no year tokens".into()));
        };
        Ok(Self {
            tokens,
            index,
            lab_edges,
            years: (y0, y1),
            first_gap,
            first_quantile,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenInfo] {
        &self.tokens
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn token(&self, id: usize) -> Result<&TokenInfo> {
        self.tokens.get(id).ok_or(VocabError::UnknownId(id))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.tokens[id].name
    }

    pub fn kind(&self, id: usize) -> TokenKind {
        self.tokens[id].kind
    }

    fn fixed(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn pad_id(&self) -> usize {
        self.fixed(PADDING)
    }
    pub fn start_record_id(&self) -> usize {
        self.fixed(START_RECORD)
    }
    pub fn start_visit_id(&self) -> usize {
        self.fixed(START_VISIT)
    }
    pub fn end_visit_id(&self) -> usize {
        self.fixed(END_VISIT)
    }
    pub fn end_record_id(&self) -> usize {
        self.fixed(END_RECORD)
    }
    pub fn death_id(&self) -> usize {
        self.fixed(DEATH)
    }

    pub fn gap_id(&self, bin: usize) -> usize {
        assert!(bin < GAP_BINS.len());
        self.first_gap + bin
    }

    /// TIME_GAP token for a duration.
    pub fn gap_token(&self, seconds: u64) -> usize {
        self.gap_id(gap_bin(seconds))
    }

    pub fn gap_bin_of(&self, id: usize) -> Option<usize> {
        (self.kind(id) == TokenKind::TimeGap).then(|| id - self.first_gap)
    }

    /// The 10 shared quantile tokens; every lab test uses the same set.
    pub fn quantile_ids(&self) -> std::ops::Range<usize> {
        self.first_quantile..self.first_quantile + N_QUANTILES
    }

    pub fn quantile_of(&self, id: usize) -> Option<usize> {
        self.quantile_ids().contains(&id).then(|| id - self.first_quantile)
    }

    pub fn lab_edges(&self, lab_id: usize) -> Result<&[f64; N_QUANTILES + 1]> {
        self.lab_edges
            .get(&lab_id)
            .ok_or_else(|| VocabError::UnknownLab(self.tokens.get(lab_id).map_or_else(|| lab_id.to_string(), |t| t.name.clone())))
    }

    /// LAB_QUANTILE token for a lab value.
    pub fn lab_bin(&self, lab_id: usize, value: f64) -> Result<usize> {
        Ok(self.first_quantile + decile_of(self.lab_edges(lab_id)?, value))
    }

    pub fn concept_id(&self, category: Category, code: &str) -> Result<usize> {
        let key = concept_key(category, code);
        self.id(&key).ok_or(VocabError::UnknownConcept(key))
    }

    pub fn year_range(&self) -> (i32, i32) {
        self.years
    }

    /// The five demographic token ids for static attributes, clamping
    /// age and year into the vocabulary's range.
    pub fn demographic_ids(&self, age: u32, sex: Sex, race: Race, marital: Marital, year: i32) -> [usize; 5] {
        let year = year.clamp(self.years.0, self.years.1);
        [
            self.fixed(&age_token(age_bin_start(age))),
            self.fixed(&format!("SEX_{}", sex.as_str())),
            self.fixed(&format!("RACE_{}", race.as_str())),
            self.fixed(&format!("MARITAL_STATUS_{}", marital.as_str())),
            self.fixed(&format!("YEAR_{year}")),
        ]
    }

    pub fn ids_of_kind(&self, kind: TokenKind) -> impl Iterator<Item = usize> + '_ {
        (0..self.tokens.len()).filter(move |&i| self.tokens[i].kind == kind)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            lab_bin_edges: self
                .lab_edges
                .iter()
                .map(|(&id, e)| (self.tokens[id].name.clone(), e.to_vec()))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        let names: HashMap<&str, usize> = file.tokens.iter().enumerate().map(|(i, t)| (t.name.as_str(), i)).collect();
        let mut edges = HashMap::new();
        for (name, e) in &file.lab_bin_edges {
            let id = *names
                .get(name.as_str())
                .ok_or_else(|| VocabError::Invalid(format!("edges for unknown lab {name}")))?;
            let arr: [f64; N_QUANTILES + 1] = e
                .as_slice()
                .try_into()
                .map_err(|_| VocabError::Invalid(format!("lab {name} needs 11 edges")))?;
            if arr.windows(2).any(|w| !(w[0] <= w[1])) {
                return Err(VocabError::Invalid(format!("lab {name} edges not ascending")));
            }
            edges.insert(id, arr);
        }
        Self::from_parts(file.tokens, edges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Registry over a training corpus.
///
/// Labs with fewer than 10 distinct training values get tie-collapsed edges
/// and a warning.
pub fn build_vocab(train: &Corpus) -> Result<Vocabulary> {
    if train.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let mut tokens = vec![
        TokenInfo::plain(PADDING, TokenKind::Padding),
        TokenInfo::plain(START_RECORD, TokenKind::StartRecord),
        TokenInfo::plain(START_VISIT, TokenKind::StartVisit),
        TokenInfo::plain(END_VISIT, TokenKind::EndVisit),
        TokenInfo::plain(END_RECORD, TokenKind::EndRecord),
        TokenInfo::plain(DEATH, TokenKind::Death),
    ];
    tokens.extend(GAP_BINS.iter().map(|(n, _)| TokenInfo::plain(*n, TokenKind::TimeGap)));
    tokens.extend((1..=N_QUANTILES).map(|q| TokenInfo::plain(format!("_Q{q}"), TokenKind::LabQuantile)));
    tokens.extend((AGE_MIN..AGE_MAX).step_by(5).map(|lo| TokenInfo::plain(age_token(lo), TokenKind::Age)));
    tokens.extend(Sex::ALL.iter().map(|s| TokenInfo::plain(format!("SEX_{}", s.as_str()), TokenKind::Sex)));
    tokens.extend(Race::ALL.iter().map(|r| TokenInfo::plain(format!("RACE_{}", r.as_str()), TokenKind::Race)));
    tokens.extend(
        Marital::ALL
            .iter()
            .map(|m| TokenInfo::plain(format!("MARITAL_STATUS_{}", m.as_str()), TokenKind::Marital)),
    );
    let y0 = train.records.iter().map(|r| r.year).min().expect("non-empty");
    let y1 = train.records.iter().map(|r| r.year).max().expect("non-empty");
    tokens.extend((y0..=y1).map(|y| TokenInfo::plain(format!("YEAR_{y}"), TokenKind::Year)));

    // first occurrence wins for labels and units
    let mut concepts: BTreeMap<(Category, String), TokenInfo> = BTreeMap::new();
    let mut lab_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ev in train.records.iter().flat_map(|r| r.events()) {
        let name = ev.concept_key();
        concepts.entry((ev.category, name.clone())).or_insert_with(|| TokenInfo {
            name: name.clone(),
            kind: TokenKind::of_category(ev.category),
            code: Some(ev.code.clone()),
            label: Some(ev.label.clone()),
            unit: ev.unit.clone(),
        });
        if let Some(v) = ev.value {
            lab_values.entry(name).or_default().push(v);
        }
    }
    tokens.extend(concepts.into_values());

    let mut edges = HashMap::new();
    for (i, t) in tokens.iter().enumerate() {
        if t.kind != TokenKind::LabTest {
            continue;
        }
        let values = &lab_values[&t.name];
        let distinct: BTreeSet<u64> = values.iter().map(|v| v.to_bits()).collect();
        if distinct.len() < N_QUANTILES {
            log::warn!(
                "{}: only {} distinct training values, decile edges collapse",
                t.name,
                distinct.len()
            );
        }
        edges.insert(i, decile_edges(values));
    }
    Vocabulary::from_parts(tokens, edges)
}
