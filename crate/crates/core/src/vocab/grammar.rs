//! Record grammar shared by the validator and the decoding mask.
//!
//! ```text
//! record := START_RECORD AGE SEX RACE MARITAL YEAR body END_RECORD
//! body   := (gap? visit)* DEATH?            DEATH only right after END_VISIT
//! visit  := START_VISIT (gap? event)* gap? END_VISIT
//! event  := DX | PR | MED | LAB_TEST _Qk
//! ```
//! A sequence may also stop at `DEATH`; the trailing `END_RECORD` is implied.

use super::{TokenKind, Vocabulary, DEMOGRAPHIC_ORDER};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Last {
    Open,
    Gap,
    LabTest,
    Other,
    EndVisit,
    Death,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Start,
    Demographics(usize),
    Body,
    Done,
}

/// Incremental parser state after a prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarState {
    phase: Phase,
    in_visit: bool,
    last: Last,
}

impl Default for GrammarState {
    fn default() -> Self {
        Self::new()
    }
}

impl GrammarState {
    pub fn new() -> Self {
        Self {
            phase: Phase::Start,
            in_visit: false,
            last: Last::Open,
        }
    }

    /// Why `kind` may not come next, or `None` when it may.
    pub fn check(&self, kind: TokenKind) -> Option<&'static str> {
        use TokenKind as K;
        if kind == K::Padding {
            return Some("padding inside a sequence");
        }
        match self.phase {
            Phase::Start => (kind != K::StartRecord).then_some("sequence must open with START_RECORD"),
            Phase::Done => Some("token after END_RECORD"),
            Phase::Demographics(i) => (kind != DEMOGRAPHIC_ORDER[i]).then_some(match i {
                0 => "expected AGE in the demographic prefix",
                1 => "expected SEX in the demographic prefix",
                2 => "expected RACE in the demographic prefix",
                3 => "expected MARITAL in the demographic prefix",
                _ => "expected YEAR in the demographic prefix",
            }),
            Phase::Body => self.check_body(kind),
        }
    }

    fn check_body(&self, kind: TokenKind) -> Option<&'static str> {
        use TokenKind as K;
        match self.last {
            Last::LabTest => {
                return (kind != K::LabQuantile).then_some("lab test without a quantile");
            }
            Last::Death => {
                return (kind != K::EndRecord).then_some("only END_RECORD may follow DEATH");
            }
            _ => {}
        }
        if kind == K::LabQuantile {
            return Some("orphan quantile");
        }
        if kind.is_demographic() {
            return Some("demographic token outside the prefix");
        }
        match kind {
            K::StartRecord => Some("START_RECORD after position 0"),
            K::TimeGap => (self.last == Last::Gap).then_some("consecutive time gaps"),
            K::StartVisit => self.in_visit.then_some("unterminated visit"),
            K::EndVisit => (!self.in_visit).then_some("END_VISIT without an open visit"),
            K::Diagnosis | K::Procedure | K::Medication | K::LabTest => {
                if !self.in_visit {
                    Some("event outside a visit")
                } else {
                    None
                }
            }
            K::Death => {
                if self.in_visit {
                    Some("unterminated visit")
                } else {
                    (self.last != Last::EndVisit).then_some("DEATH must follow a closed visit")
                }
            }
            K::EndRecord => {
                if self.in_visit {
                    Some("unterminated visit")
                } else {
                    (self.last == Last::Gap).then_some("dangling time gap")
                }
            }
            _ => None,
        }
    }

    /// Moves past one token. Violating tokens are applied best-effort so
    /// later violations are still reported.
    pub fn advance(&mut self, kind: TokenKind) {
        use TokenKind as K;
        match self.phase {
            Phase::Start => {
                self.phase = Phase::Demographics(0);
                return;
            }
            Phase::Demographics(i) => {
                self.phase = if i + 1 == DEMOGRAPHIC_ORDER.len() {
                    Phase::Body
                } else {
                    Phase::Demographics(i + 1)
                };
                return;
            }
            Phase::Done => return,
            Phase::Body => {}
        }
        self.last = match kind {
            K::TimeGap => Last::Gap,
            K::LabTest => Last::LabTest,
            K::StartVisit => {
                self.in_visit = true;
                Last::Open
            }
            K::EndVisit => {
                self.in_visit = false;
                Last::EndVisit
            }
            K::Death => {
                self.in_visit = false;
                Last::Death
            }
            K::EndRecord => {
                self.phase = Phase::Done;
                self.in_visit = false;
                Last::Other
            }
            _ => Last::Other,
        };
    }

    /// A complete record: closed by END_RECORD, or stopped at DEATH.
    pub fn is_complete(&self) -> bool {
        self.phase == Phase::Done || (self.phase == Phase::Body && self.last == Last::Death)
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn in_visit(&self) -> bool {
        self.in_visit
    }

    /// Allow-mask over the whole vocabulary.
    pub fn allowed(&self, vocab: &Vocabulary) -> Vec<bool> {
        let mut by_kind = std::collections::HashMap::new();
        vocab
            .tokens()
            .iter()
            .map(|t| *by_kind.entry(t.kind).or_insert_with(|| self.check(t.kind).is_none()))
            .collect()
    }

    fn end_of_input(&self) -> Option<&'static str> {
        if self.is_complete() {
            None
        } else if self.in_visit {
            Some("unterminated visit")
        } else {
            Some("missing END_RECORD")
        }
    }
}

fn scan(ids: &[usize], vocab: &Vocabulary) -> (GrammarState, Vec<Violation>) {
    let mut state = GrammarState::new();
    let mut out = Vec::new();
    for (index, &id) in ids.iter().enumerate() {
        let Some(info) = vocab.tokens().get(id) else {
            out.push(Violation {
                index,
                message: format!("token id {id} outside the vocabulary"),
            });
            continue;
        };
        if let Some(m) = state.check(info.kind) {
            out.push(Violation {
                index,
                message: m.to_string(),
            });
        }
        state.advance(info.kind);
    }
    (state, out)
}

/// Violations of a complete sequence; empty iff the grammar holds.
pub fn validate_sequence(ids: &[usize], vocab: &Vocabulary) -> Vec<Violation> {
    let (state, mut out) = scan(ids, vocab);
    if let Some(m) = state.end_of_input() {
        out.push(Violation {
            index: ids.len(),
            message: m.to_string(),
        });
    }
    out
}

/// Violations of a sequence that may stop anywhere, e.g. a truncated one.
pub fn validate_prefix(ids: &[usize], vocab: &Vocabulary) -> Vec<Violation> {
    scan(ids, vocab).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{simulate_corpus, SimulatorSpec};
    use crate::vocab::{build_vocab, encode_record};

    fn vocab() -> Vocabulary {
        build_vocab(&simulate_corpus(&SimulatorSpec::desk(120), 2).unwrap()).unwrap()
    }

    fn ids(v: &Vocabulary, names: &[&str]) -> Vec<usize> {
        names.iter().map(|n| v.id(n).unwrap_or_else(|| panic!("{n}"))).collect()
    }

    const PREFIX: [&str; 6] = [
        "START_RECORD",
        "AGE_40_45_years",
        "SEX_M",
        "RACE_WHITE",
        "MARITAL_STATUS_SINGLE",
        "YEAR_2152",
    ];

    fn seq(v: &Vocabulary, body: &[&str]) -> Vec<usize> {
        let mut names = PREFIX.to_vec();
        names.extend_from_slice(body);
        ids(v, &names)
    }

    fn messages(v: &Vocabulary, s: &[usize]) -> Vec<String> {
        validate_sequence(s, v).into_iter().map(|x| x.message).collect()
    }

    #[test]
    fn encoded_records_are_valid() {
        let c = simulate_corpus(&SimulatorSpec::desk(300), 9).unwrap();
        let v = build_vocab(&c).unwrap();
        for r in &c.records {
            let s = encode_record(r, &v, None).unwrap();
            assert!(validate_sequence(&s.ids, &v).is_empty(), "{}", r.patient_id);
        }
    }

    #[test]
    fn minimal_and_death_records() {
        let v = vocab();
        assert!(messages(&v, &seq(&v, &["END_RECORD"])).is_empty());
        let dead = seq(&v, &["START_VISIT", "DX_I10", "END_VISIT", "DEATH", "END_RECORD"]);
        assert!(messages(&v, &dead).is_empty());
        assert!(messages(&v, &dead[..dead.len() - 1]).is_empty());
    }

    #[test]
    fn orphan_quantile_is_reported() {
        let v = vocab();
        let s = seq(&v, &["START_VISIT", "DX_I10", "_Q3", "END_VISIT", "END_RECORD"]);
        let found = validate_sequence(&s, &v);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].message, "orphan quantile");
        assert_eq!(found[0].index, 8);
    }

    #[test]
    fn missing_end_visit_is_unterminated() {
        let v = vocab();
        let s = seq(&v, &["START_VISIT", "DX_I10", "END_RECORD"]);
        assert_eq!(messages(&v, &s), vec!["unterminated visit"]);
        let s = seq(&v, &["START_VISIT", "DX_I10"]);
        assert_eq!(messages(&v, &s), vec!["unterminated visit"]);
        assert!(validate_prefix(&s, &v).is_empty());
    }

    #[test]
    fn lab_requires_adjacent_quantile() {
        let v = vocab();
        let ok = seq(&v, &["START_VISIT", "LAB_Glucose_mg/dL", "_Q4", "END_VISIT", "END_RECORD"]);
        assert!(messages(&v, &ok).is_empty());
        let bad = seq(&v, &["START_VISIT", "LAB_Glucose_mg/dL", "_5m-15m", "_Q4", "END_VISIT", "END_RECORD"]);
        assert_eq!(messages(&v, &bad)[0], "lab test without a quantile");
    }

    #[test]
    fn structural_misuse() {
        let v = vocab();
        let cases: Vec<(Vec<&str>, &str)> = vec![
            (vec!["DX_I10", "END_RECORD"], "event outside a visit"),
            (vec!["DEATH", "END_RECORD"], "DEATH must follow a closed visit"),
            (vec!["START_VISIT", "END_VISIT", "DEATH", "START_VISIT"], "only END_RECORD may follow DEATH"),
            (vec!["_1d-3d", "_1d-3d", "START_VISIT", "END_VISIT", "END_RECORD"], "consecutive time gaps"),
            (vec!["_1d-3d", "END_RECORD"], "dangling time gap"),
            (vec!["SEX_F", "END_RECORD"], "demographic token outside the prefix"),
            (vec!["END_VISIT", "END_RECORD"], "END_VISIT without an open visit"),
            (vec!["START_RECORD", "END_RECORD"], "START_RECORD after position 0"),
            (vec!["PADDING", "END_RECORD"], "padding inside a sequence"),
            (vec!["END_RECORD", "END_RECORD"], "token after END_RECORD"),
        ];
        for (body, want) in cases {
            let m = messages(&v, &seq(&v, &body));
            assert!(m.iter().any(|x| x == want), "{body:?}: {m:?}");
        }
        let wrong_prefix = ids(&v, &["START_RECORD", "SEX_M", "END_RECORD"]);
        assert!(messages(&v, &wrong_prefix)[0].contains("AGE"));
    }

    #[test]
    fn mask_matches_check() {
        let v = vocab();
        let s = seq(&v, &["START_VISIT", "LAB_Glucose_mg/dL"]);
        let mut st = GrammarState::new();
        for &id in &s {
            st.advance(v.kind(id));
        }
        let mask = st.allowed(&v);
        let allowed: Vec<usize> = (0..v.len()).filter(|&i| mask[i]).collect();
        assert_eq!(allowed, v.quantile_ids().collect::<Vec<_>>());
    }
}
