//! Nearest-neighbour membership and attribute inference attacks.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::precision_recall_f1;
use super::{EvalError, Result};
use crate::corpus::{Corpus, Record};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttackKind {
    Mia,
    Aia,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: AttackKind,
    pub accuracy: f64,
    pub f1: f64,
    /// Expected F1 of uniform random guessing.
    pub baseline: f64,
    /// Records the reported metrics are computed on.
    pub n: usize,
    /// Decision threshold (MIA only).
    pub threshold: Option<f64>,
}

/// Interns concept keys so code sets compare as sorted integer slices.
#[derive(Default)]
struct Interner(HashMap<String, u32>);

impl Interner {
    fn codes(&mut self, r: &Record) -> Vec<u32> {
        let mut v: Vec<u32> = r
            .events()
            .map(|e| {
                let n = self.0.len() as u32;
                *self.0.entry(e.concept_key()).or_insert(n)
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// `|a ∩ b| / |a ∪ b|` of sorted, deduplicated sets; two empty sets are
/// identical.
pub fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Jaccard similarity of each record's code set to its closest synthetic record.
pub fn nearest_similarity(records: &[Record], synthetic: &Corpus) -> Result<Vec<f64>> {
    if synthetic.is_empty() {
        return Err(EvalError::Empty("synthetic corpus"));
    }
    let mut intern = Interner::default();
    let syn: Vec<Vec<u32>> = synthetic.records.iter().map(|r| intern.codes(r)).collect();
    Ok(records
        .iter()
        .map(|r| {
            let c = intern.codes(r);
            syn.iter().map(|s| jaccard(&c, s)).fold(0.0, f64::max)
        })
        .collect())
}

/// Score with a uniform tie-break key, so equal similarities are ordered at
/// random and a threshold can flag an exact share of the records.
type Keyed = (f64, f64);

fn keyed_cmp(a: &Keyed, b: &Keyed) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
}

/// Highest-F1 threshold among those flagging at most `max_rate` of the
/// calibration records (at least one); ties prefer the higher threshold.
fn calibrate(scores: &[Keyed], truth: &[bool], max_rate: f64) -> Keyed {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| keyed_cmp(&scores[j], &scores[i]));
    let positives = truth.iter().filter(|&&t| t).count();
    let cap = ((max_rate * scores.len() as f64).floor() as usize).max(1);
    let mut best = (f64::NEG_INFINITY, scores[order[0]]);
    let mut tp = 0;
    for (k, &i) in order.iter().take(cap).enumerate() {
        tp += usize::from(truth[i]);
        let (fp, missed) = (k + 1 - tp, positives - tp);
        let f1 = if tp > 0 { 2.0 * tp as f64 / (2 * tp + fp + missed) as f64 } else { 0.0 };
        if f1 > best.0 {
            best = (f1, scores[i]);
        }
    }
    best.1
}

/// Membership inference by nearest synthetic neighbour. Members and
/// non-members are subsampled to equal size and split in half: one half
/// picks the threshold, the other is scored. The attacker flags at most the
/// known member share of the calibration half, which rules out the
/// degenerate flag-everyone threshold. Equal similarities are ordered by a
/// seeded random key.
pub fn mia_attack(members: &Corpus, nonmembers: &Corpus, synthetic: &Corpus, seed: u64) -> Result<AttackReport> {
    let n = members.len().min(nonmembers.len());
    if n < 2 {
        return Err(EvalError::TooFew { need: 2, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |c: &Corpus| {
        let mut idx: Vec<usize> = (0..c.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.into_iter().map(|i| c.records[i].clone()).collect::<Vec<_>>()
    };
    let (m, nm) = (pick(members), pick(nonmembers));
    let ms = nearest_similarity(&m, synthetic)?;
    let ns = nearest_similarity(&nm, synthetic)?;
    let mut key = |s: &f64| (*s, rng.random::<f64>());
    let (ms, ns): (Vec<Keyed>, Vec<Keyed>) = (ms.iter().map(&mut key).collect(), ns.iter().map(&mut key).collect());
    let half = n / 2;
    let calib_scores: Vec<Keyed> = ms[..half].iter().chain(&ns[..half]).copied().collect();
    let calib_truth: Vec<bool> = (0..2 * half).map(|i| i < half).collect();
    let threshold = calibrate(&calib_scores, &calib_truth, 0.5);
    let eval_scores: Vec<Keyed> = ms[half..].iter().chain(&ns[half..]).copied().collect();
    let eval_truth: Vec<bool> = (0..eval_scores.len()).map(|i| i < n - half).collect();
    let pred: Vec<bool> = eval_scores.iter().map(|s| keyed_cmp(s, &threshold).is_ge()).collect();
    let correct = pred.iter().zip(&eval_truth).filter(|(p, t)| p == t).count();
    Ok(AttackReport {
        attack: AttackKind::Mia,
        accuracy: correct as f64 / pred.len() as f64,
        f1: precision_recall_f1(&pred, &eval_truth).2,
        baseline: 0.5,
        n: pred.len(),
        threshold: Some(threshold.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitiveAttribute {
    Sex,
    Race,
    Marital,
}

impl SensitiveAttribute {
    pub fn of(self, r: &Record) -> &'static str {
        match self {
            SensitiveAttribute::Sex => r.sex.as_str(),
            SensitiveAttribute::Race => r.race.as_str(),
            SensitiveAttribute::Marital => r.marital.as_str(),
        }
    }
}

/// Leave-one-out `k`-nearest-neighbour vote on the code set. Ties in the
/// vote go to the class of the closest tied neighbour. Reports macro F1.
pub fn aia_attack(corpus: &Corpus, attr: SensitiveAttribute, k: usize) -> Result<AttackReport> {
    let n = corpus.len();
    if k == 0 || n < k + 1 {
        return Err(EvalError::TooFew { need: k + 1, got: n });
    }
    let mut intern = Interner::default();
    let sets: Vec<Vec<u32>> = corpus.records.iter().map(|r| intern.codes(r)).collect();
    let truth: Vec<&str> = corpus.records.iter().map(|r| attr.of(r)).collect();
    let mut pred: Vec<&str> = Vec::with_capacity(n);
    let mut neigh: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        neigh.clear();
        neigh.extend((0..n).filter(|&j| j != i).map(|j| (jaccard(&sets[i], &sets[j]), j)));
        let by_sim = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        neigh.select_nth_unstable_by(k - 1, by_sim);
        let top = &mut neigh[..k];
        top.sort_by(by_sim);
        let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
        for &(_, j) in top.iter() {
            *votes.entry(truth[j]).or_default() += 1;
        }
        let most = *votes.values().max().expect("k >= 1");
        let winner = top
            .iter()
            .map(|&(_, j)| truth[j])
            .find(|c| votes[c] == most)
            .expect("some neighbour holds the top vote");
        pred.push(winner);
    }
    let classes: Vec<&str> = {
        let mut c = truth.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    let f1 = classes
        .iter()
        .map(|c| {
            let p: Vec<bool> = pred.iter().map(|x| x == c).collect();
            let t: Vec<bool> = truth.iter().map(|x| x == c).collect();
            precision_recall_f1(&p, &t).2
        })
        .sum::<f64>()
        / classes.len() as f64;
    let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    Ok(AttackReport {
        attack: AttackKind::Aia,
        accuracy: correct as f64 / n as f64,
        f1,
        baseline: 1.0 / classes.len() as f64,
        n,
        threshold: None,
    })
}
