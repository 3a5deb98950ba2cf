//! Code-level probability tables and co-occurrence structure.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::stats::{pearson, spearman};
use super::{EvalError, Result};
use crate::corpus::{concept_key, Category, Corpus, Visit};
use crate::vocab::{encode_record, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProbMode {
    Unigram,
    SameVisit,
    Sequential,
}

/// A unigram key has an empty second component. Same-visit pairs are stored
/// in ascending order; sequential pairs as (earlier visit, later visit).
pub type ProbKey = (String, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbTable {
    pub mode: ProbMode,
    pub probs: BTreeMap<ProbKey, f64>,
    /// Number of counted occurrences the probabilities are normalized by.
    pub support: u64,
}

fn visit_codes(v: &Visit) -> BTreeSet<String> {
    v.events.iter().map(|e| e.concept_key()).collect()
}

/// Raw occurrence counts for `mode`.
pub fn code_counts(corpus: &Corpus, mode: ProbMode) -> BTreeMap<ProbKey, u64> {
    let mut counts: BTreeMap<ProbKey, u64> = BTreeMap::new();
    for r in &corpus.records {
        match mode {
            ProbMode::Unigram => {
                for e in r.events() {
                    *counts.entry((e.concept_key(), String::new())).or_default() += 1;
                }
            }
            ProbMode::SameVisit => {
                for v in &r.visits {
                    let codes: Vec<String> = visit_codes(v).into_iter().collect();
                    for (i, a) in codes.iter().enumerate() {
                        for b in &codes[i + 1..] {
                            *counts.entry((a.clone(), b.clone())).or_default() += 1;
                        }
                    }
                }
            }
            ProbMode::Sequential => {
                for w in r.visits.windows(2) {
                    let (a, b) = (visit_codes(&w[0]), visit_codes(&w[1]));
                    for x in &a {
                        for y in &b {
                            *counts.entry((x.clone(), y.clone())).or_default() += 1;
                        }
                    }
                }
            }
        }
    }
    counts
}

/// Normalized code frequencies. An empty count set yields an empty table.
pub fn code_probs(corpus: &Corpus, mode: ProbMode) -> Result<ProbTable> {
    if corpus.is_empty() {
        return Err(EvalError::Empty("corpus"));
    }
    let counts = code_counts(corpus, mode);
    let support: u64 = counts.values().sum();
    if support == 0 {
        log::warn!("{mode:?} table of corpus '{}' is empty", corpus.name);
    }
    let probs = counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / support as f64))
        .collect();
    Ok(ProbTable { mode, probs, support })
}

/// Aligns two tables on the union of their keys, missing entries as 0.
pub fn paired_probs(a: &ProbTable, b: &ProbTable) -> (Vec<ProbKey>, Vec<f64>, Vec<f64>) {
    let keys: BTreeSet<&ProbKey> = a.probs.keys().chain(b.probs.keys()).collect();
    let get = |t: &ProbTable, k: &ProbKey| t.probs.get(k).copied().unwrap_or(0.0);
    let x = keys.iter().map(|k| get(a, k)).collect();
    let y = keys.iter().map(|k| get(b, k)).collect();
    (keys.into_iter().cloned().collect(), x, y)
}

/// The `k` most frequent diagnosis keys by event count, ties by key.
pub fn top_diagnoses(corpus: &Corpus, k: usize) -> Result<Vec<String>> {
    let mut freq: HashMap<String, u64> = HashMap::new();
    for e in corpus.records.iter().flat_map(|r| r.events()) {
        if e.category == Category::Diagnosis {
            *freq.entry(concept_key(e.category, &e.code)).or_default() += 1;
        }
    }
    if freq.len() < k {
        return Err(EvalError::TooFew { need: k, got: freq.len() });
    }
    let mut v: Vec<(String, u64)> = freq.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(v.into_iter().take(k).map(|(c, _)| c).collect())
}

/// Symmetric same-visit co-occurrence counts over `codes`; the diagonal
/// holds the number of visits containing each code.
pub fn cooccur_matrix(corpus: &Corpus, codes: &[String]) -> Vec<Vec<f64>> {
    let index: HashMap<&str, usize> = codes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let k = codes.len();
    let mut m = vec![vec![0.0; k]; k];
    for v in corpus.records.iter().flat_map(|r| &r.visits) {
        let present: BTreeSet<usize> = v
            .events
            .iter()
            .filter_map(|e| index.get(e.concept_key().as_str()).copied())
            .collect();
        for &i in &present {
            for &j in &present {
                m[i][j] += 1.0;
            }
        }
    }
    m
}

/// Strict upper-triangle entries, row by row.
pub fn upper_triangle(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter()
        .enumerate()
        .flat_map(|(i, row)| row[i + 1..].iter().copied())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixCorrelation {
    pub pearson: f64,
    pub spearman: f64,
    pub k: usize,
}

pub fn matrix_corr(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MatrixCorrelation> {
    let (x, y) = (upper_triangle(a), upper_triangle(b));
    let constant = |v: &[f64]| v.windows(2).all(|w| w[0] == w[1]);
    if constant(&x) || constant(&y) {
        return Err(EvalError::Constant);
    }
    Ok(MatrixCorrelation {
        pearson: pearson(&x, &y)?,
        spearman: spearman(&x, &y)?,
        k: a.len(),
    })
}

/// Correlation of same-visit co-occurrence counts over the `top_k` most
/// frequent real diagnoses.
pub fn cooccur_matrix_corr(real: &Corpus, synthetic: &Corpus, top_k: usize) -> Result<MatrixCorrelation> {
    let codes = top_diagnoses(real, top_k)?;
    matrix_corr(&cooccur_matrix(real, &codes), &cooccur_matrix(synthetic, &codes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulePreservation {
    pub trigger: String,
    pub implied: String,
    /// Visits containing the trigger.
    pub trigger_visits: usize,
    /// Records with at least one triggering visit.
    pub trigger_records: usize,
    /// Triggering visits that also contain the implied code.
    pub hits: usize,
    pub frequency: f64,
}

/// How often `implied` accompanies `trigger` in the same visit.
pub fn rule_preservation(corpus: &Corpus, trigger: &str, implied: &str) -> RulePreservation {
    let (mut visits, mut records, mut hits) = (0, 0, 0);
    for r in &corpus.records {
        let mut any = false;
        for v in &r.visits {
            let codes = visit_codes(v);
            if codes.contains(trigger) {
                visits += 1;
                any = true;
                hits += usize::from(codes.contains(implied));
            }
        }
        records += usize::from(any);
    }
    RulePreservation {
        trigger: trigger.into(),
        implied: implied.into(),
        trigger_visits: visits,
        trigger_records: records,
        hits,
        frequency: if visits > 0 { hits as f64 / visits as f64 } else { 0.0 },
    }
}

/// Records whose full encoding fits in `max_tokens`.
pub fn filter_by_token_length(corpus: &Corpus, vocab: &Vocabulary, max_tokens: usize) -> Result<Corpus> {
    let mut kept = Vec::new();
    for r in &corpus.records {
        if encode_record(r, vocab, None)?.len() <= max_tokens {
            kept.push(r.clone());
        }
    }
    let mut out = Corpus::new(corpus.name.clone(), kept);
    out.seed = corpus.seed;
    Ok(out)
}

/// Per-record and per-visit count distributions used for KS and overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordShape {
    pub visits_per_record: Vec<f64>,
    pub events_per_visit: Vec<f64>,
    pub los_days: Vec<f64>,
}

pub fn record_shape(corpus: &Corpus) -> RecordShape {
    let visits = corpus.records.iter().flat_map(|r| &r.visits);
    RecordShape {
        visits_per_record: corpus.records.iter().map(|r| r.visits.len() as f64).collect(),
        events_per_visit: visits.clone().map(|v| v.events.len() as f64).collect(),
        los_days: visits
            .map(|v| (v.discharge_time - v.admit_time).num_seconds() as f64 / 86_400.0)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use chrono::{Duration, TimeZone, Utc};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::{simulate_corpus, Event, Marital, Race, Record, Sex, SimulatorSpec};

    fn visit(codes: &[&str]) -> Visit {
        let t = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        Visit {
            admit_time: t,
            discharge_time: t + Duration::days(1),
            events: codes
                .iter()
                .map(|c| Event {
                    time: t,
                    category: Category::Diagnosis,
                    code: c.to_string(),
                    value: None,
                    unit: None,
                    label: String::new(),
                })
                .collect(),
            death: false,
        }
    }

    fn record(id: &str, visits: Vec<Visit>) -> Record {
        Record {
            patient_id: id.into(),
            age_years: 50,
            sex: Sex::F,
            race: Race::White,
            marital: Marital::Married,
            year: 2020,
            visits,
        }
    }

    fn key(a: &str, b: &str) -> ProbKey {
        (a.into(), b.into())
    }

    #[test]
    fn single_visit_tables() {
        let c = Corpus::new("t", vec![record("p", vec![visit(&["A", "B"])])]);
        let u = code_probs(&c, ProbMode::Unigram).unwrap();
        assert_eq!(u.probs[&key("DX_A", "")], 0.5);
        assert_eq!(u.probs[&key("DX_B", "")], 0.5);
        let s = code_probs(&c, ProbMode::SameVisit).unwrap();
        assert_eq!(s.probs.len(), 1);
        assert_eq!(s.probs[&key("DX_A", "DX_B")], 1.0);
        let q = code_probs(&c, ProbMode::Sequential).unwrap();
        assert!(q.probs.is_empty());
        assert!(code_probs(&Corpus::new("e", vec![]), ProbMode::Unigram).is_err());
    }

    #[test]
    fn sequential_pairs_are_ordered() {
        let c = Corpus::new("t", vec![record("p", vec![visit(&["A"]), visit(&["B", "A"])])]);
        let q = code_probs(&c, ProbMode::Sequential).unwrap();
        assert_eq!(q.probs[&key("DX_A", "DX_A")], 0.5);
        assert_eq!(q.probs[&key("DX_A", "DX_B")], 0.5);
        assert!(!q.probs.contains_key(&key("DX_B", "DX_A")));
    }

    /// Counts by literal enumeration of every event pair.
    fn brute_counts(c: &Corpus, mode: ProbMode) -> BTreeMap<ProbKey, u64> {
        let mut out: BTreeMap<ProbKey, u64> = BTreeMap::new();
        for r in &c.records {
            for (vi, v) in r.visits.iter().enumerate() {
                let keys: Vec<String> = v.events.iter().map(|e| format!("{}_{}", e.category.prefix(), e.code)).collect();
                match mode {
                    ProbMode::Unigram => {
                        for k in &keys {
                            *out.entry((k.clone(), String::new())).or_default() += 1;
                        }
                    }
                    ProbMode::SameVisit => {
                        let mut seen = BTreeSet::new();
                        for a in &keys {
                            for b in &keys {
                                if a < b && seen.insert((a.clone(), b.clone())) {
                                    *out.entry((a.clone(), b.clone())).or_default() += 1;
                                }
                            }
                        }
                    }
                    ProbMode::Sequential => {
                        let Some(next) = r.visits.get(vi + 1) else { continue };
                        let nk: Vec<String> =
                            next.events.iter().map(|e| format!("{}_{}", e.category.prefix(), e.code)).collect();
                        let mut seen = BTreeSet::new();
                        for a in &keys {
                            for b in &nk {
                                if seen.insert((a.clone(), b.clone())) {
                                    *out.entry((a.clone(), b.clone())).or_default() += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn counts_match_brute_force() {
        let c = simulate_corpus(&SimulatorSpec::desk(20), 8).unwrap();
        for mode in [ProbMode::Unigram, ProbMode::SameVisit, ProbMode::Sequential] {
            let fast = code_counts(&c, mode);
            assert_eq!(fast, brute_counts(&c, mode), "{mode:?}");
            let t = code_probs(&c, mode).unwrap();
            let total: f64 = t.probs.values().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert_eq!(t.support, fast.values().sum::<u64>());
        }
    }

    #[test]
    fn pairing_fills_missing_with_zero() {
        let a = ProbTable {
            mode: ProbMode::Unigram,
            probs: [(key("A", ""), 1.0)].into(),
            support: 1,
        };
        let b = ProbTable {
            mode: ProbMode::Unigram,
            probs: [(key("B", ""), 1.0)].into(),
            support: 1,
        };
        let (k, x, y) = paired_probs(&a, &b);
        assert_eq!(k.len(), 2);
        assert_eq!((x, y), (vec![1.0, 0.0], vec![0.0, 1.0]));
    }

    #[test]
    fn self_correlation_and_shuffle() {
        let c = simulate_corpus(&SimulatorSpec::desk(600), 9).unwrap();
        let m = cooccur_matrix_corr(&c, &c, 30).unwrap();
        assert!((m.pearson - 1.0).abs() < 1e-12 && (m.spearman - 1.0).abs() < 1e-12);
        let codes = top_diagnoses(&c, 30).unwrap();
        let real = cooccur_matrix(&c, &codes);
        let mut shuffled = real.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
        let s = matrix_corr(&real, &shuffled).unwrap();
        assert!(s.pearson < 0.5 && s.spearman < 0.5, "{s:?}");
        assert!(matches!(top_diagnoses(&c, 10_000), Err(EvalError::TooFew { .. })));
    }

    #[test]
    fn rule_frequency() {
        let c = Corpus::new(
            "t",
            vec![
                record("a", vec![visit(&["T", "M"]), visit(&["T"])]),
                record("b", vec![visit(&["M"])]),
            ],
        );
        let r = rule_preservation(&c, "DX_T", "DX_M");
        assert_eq!((r.trigger_visits, r.trigger_records, r.hits), (2, 1, 1));
        assert_eq!(r.frequency, 0.5);
    }

    #[test]
    fn length_filter_matches_scan() {
        let c = simulate_corpus(&SimulatorSpec::desk(300), 10).unwrap();
        let vocab = crate::vocab::build_vocab(&c).unwrap();
        let lens: Vec<usize> = c.records.iter().map(|r| encode_record(r, &vocab, None).unwrap().len()).collect();
        let mut sorted = lens.clone();
        sorted.sort_unstable();
        let cut = sorted[sorted.len() * 9 / 10];
        let f = filter_by_token_length(&c, &vocab, cut).unwrap();
        assert_eq!(f.len(), lens.iter().filter(|&&l| l <= cut).count());
        let all = filter_by_token_length(&c, &vocab, usize::MAX).unwrap();
        assert_eq!(all, c);
        let max = *sorted.last().unwrap();
        assert_eq!(filter_by_token_length(&c, &vocab, max - 1).unwrap().len(), c.len() - lens.iter().filter(|&&l| l == max).count());
    }
}
