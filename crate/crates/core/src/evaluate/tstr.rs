//! Train-on-synthetic, test-on-real downstream tasks.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::{auroc, precision_recall_f1};
use super::{EvalError, Result};
use crate::corpus::{Category, Corpus, Event, Record};
use crate::engine::{Graph, Tensor};
use crate::params::ParamSet;
use crate::train::{AdamW, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TstrTask {
    Mortality,
    #[serde(rename = "READMISSION_30D")]
    Readmission30d,
    #[serde(rename = "LOS_10CLASS")]
    Los10Class,
    PhenotypeMultilabel,
}

impl TstrTask {
    pub const ALL: [TstrTask; 4] = [
        TstrTask::Mortality,
        TstrTask::Readmission30d,
        TstrTask::Los10Class,
        TstrTask::PhenotypeMultilabel,
    ];
}

/// Upper edges in days of the first nine length-of-stay classes; the tenth
/// is open-ended.
pub const LOS_EDGES_DAYS: [f64; 9] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 14.0];
pub const PHENOTYPE_LABELS: usize = 25;

pub fn los_class(days: f64) -> usize {
    LOS_EDGES_DAYS.iter().position(|&e| days < e).unwrap_or(LOS_EDGES_DAYS.len())
}

fn dx_group(code: &str) -> String {
    code.chars().take(3).collect()
}

/// The `n` most frequent three-character diagnosis groups, counted once per
/// record, ties by name.
pub fn phenotype_groups(corpus: &Corpus, n: usize) -> Vec<String> {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for r in &corpus.records {
        let groups: BTreeSet<String> = r
            .events()
            .filter(|e| e.category == Category::Diagnosis)
            .map(|e| dx_group(&e.code))
            .collect();
        for g in groups {
            *freq.entry(g).or_default() += 1;
        }
    }
    let mut v: Vec<(String, usize)> = freq.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().take(n).map(|(g, _)| g).collect()
}

fn feature_events(r: &Record, task: TstrTask) -> Vec<&Event> {
    match task {
        TstrTask::PhenotypeMultilabel => r.events().filter(|e| e.category != Category::Diagnosis).collect(),
        _ => r.visits.first().map(|v| v.events.iter().collect()).unwrap_or_default(),
    }
}

fn labels(r: &Record, task: TstrTask, groups: &[String]) -> Vec<bool> {
    match task {
        TstrTask::Mortality => vec![r.died()],
        TstrTask::Readmission30d => vec![r.visits.len() >= 2 && r.visits[1].admit_time - r.visits[0].discharge_time <= Duration::days(30)],
        TstrTask::Los10Class => {
            let days = r
                .visits
                .first()
                .map(|v| (v.discharge_time - v.admit_time).num_seconds() as f64 / 86_400.0)
                .unwrap_or(0.0);
            let c = los_class(days);
            (0..=LOS_EDGES_DAYS.len()).map(|k| k == c).collect()
        }
        TstrTask::PhenotypeMultilabel => {
            let present: BTreeSet<String> = r
                .events()
                .filter(|e| e.category == Category::Diagnosis)
                .map(|e| dx_group(&e.code))
                .collect();
            groups.iter().map(|g| present.contains(g)).collect()
        }
    }
}

/// Dense design matrix with one output column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub features: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub classes: Vec<String>,
    pub y: Vec<Vec<bool>>,
    /// Exactly one class per row; predictions use the arg-max.
    pub exclusive: bool,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Bag-of-codes features, `ln(1 + count)`, over the codes seen in `train`.
pub fn build_task(train: &Corpus, test: &Corpus, task: TstrTask) -> Result<(TaskData, TaskData)> {
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::Empty("TSTR corpus"));
    }
    let groups = if task == TstrTask::PhenotypeMultilabel {
        phenotype_groups(train, PHENOTYPE_LABELS)
    } else {
        Vec::new()
    };
    let features: Vec<String> = train
        .records
        .iter()
        .flat_map(|r| feature_events(r, task).into_iter().map(|e| e.concept_key()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = features.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
    let classes: Vec<String> = match task {
        TstrTask::Mortality => vec!["death".into()],
        TstrTask::Readmission30d => vec!["readmit_30d".into()],
        TstrTask::Los10Class => (0..=LOS_EDGES_DAYS.len()).map(|k| format!("los_{k}")).collect(),
        TstrTask::PhenotypeMultilabel => groups.clone(),
    };
    let build = |c: &Corpus| {
        let mut x = Vec::with_capacity(c.len());
        let mut y = Vec::with_capacity(c.len());
        for r in &c.records {
            let mut row = vec![0.0; features.len()];
            for e in feature_events(r, task) {
                if let Some(&j) = index.get(e.concept_key().as_str()) {
                    row[j] += 1.0;
                }
            }
            row.iter_mut().for_each(|v| *v = f64::ln_1p(*v));
            x.push(row);
            y.push(labels(r, task, &groups));
        }
        TaskData {
            features: features.clone(),
            x,
            classes: classes.clone(),
            y,
            exclusive: task == TstrTask::Los10Class,
        }
    };
    Ok((build(train), build(test)))
}

/// Fixed optimizer settings for the downstream classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            weight_decay: 1e-3,
        }
    }
}

/// One-vs-rest logistic regression weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    w: Tensor<f64>,
    b: Tensor<f64>,
}

impl Logistic {
    pub fn fit(data: &TaskData, cfg: &LogisticConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(EvalError::Empty("training set"));
        }
        let (n, f, c) = (data.len(), data.features.len(), data.classes.len());
        let x = Tensor::new(vec![n, f], data.x.concat())?;
        let targets: Vec<f64> = data.y.iter().flatten().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let mut params = ParamSet::new();
        params.add("w", Tensor::zeros(&[f, c]), true, true);
        params.add("b", Tensor::zeros(&[c]), true, false);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
            &params,
        );
        for _ in 0..cfg.steps {
            let g = Graph::new();
            let vars = params.bind(&g);
            let xv = g.constant(x.clone());
            let z = g.matmul(xv, vars[0])?;
            let z = g.add_row(z, vars[1])?;
            let loss = g.bce_with_logits(z, &targets)?;
            let mut grads = g.backward(loss)?;
            let gs = params.collect_grads(&mut grads, &vars);
            drop(vars);
            opt.step(&mut params, &gs, cfg.lr).map_err(|_| EvalError::NonFinite)?;
        }
        Ok(Self {
            w: params.get("w").clone(),
            b: params.get("b").clone(),
        })
    }

    /// Sigmoid probabilities, `n × classes`.
    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let c = self.b.len();
        x.iter()
            .map(|row| {
                (0..c)
                    .map(|k| {
                        let z = self.b.data()[k] + row.iter().enumerate().map(|(j, v)| v * self.w.data()[j * c + k]).sum::<f64>();
                        1.0 / (1.0 + (-z).exp())
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TstrMetrics {
    pub auroc: f64,
    pub f1: f64,
    pub recall: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Classes whose test labels contain both outcomes.
    pub evaluated_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
}

pub const BOOTSTRAP_REPLICATES: usize = 1000;

fn column(y: &[Vec<bool>], k: usize) -> Vec<bool> {
    y.iter().map(|r| r[k]).collect()
}

fn evaluable(y: &[Vec<bool>], k: usize) -> bool {
    let pos = y.iter().filter(|r| r[k]).count();
    pos > 0 && pos < y.len()
}

fn macro_auroc(p: &[Vec<f64>], y: &[Vec<bool>], classes: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = classes
        .iter()
        .filter(|&&k| evaluable(y, k))
        .map(|&k| auroc(&p.iter().map(|r| r[k]).collect::<Vec<_>>(), &column(y, k)).expect("both classes present"))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Macro AUROC, F1 and recall over evaluable classes, with a percentile
/// bootstrap interval for the AUROC.
pub fn score_predictions(p: &[Vec<f64>], test: &TaskData, seed: u64) -> Result<(f64, f64, f64, f64, f64, usize)> {
    let classes: Vec<usize> = (0..test.classes.len()).filter(|&k| evaluable(&test.y, k)).collect();
    if classes.is_empty() {
        return Err(EvalError::SingleClass);
    }
    let pred: Vec<Vec<bool>> = p
        .iter()
        .map(|row| {
            if test.exclusive {
                let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                (0..row.len()).map(|k| k == best).collect()
            } else {
                row.iter().map(|&v| v >= 0.5).collect()
            }
        })
        .collect();
    let (mut f1, mut recall) = (0.0, 0.0);
    for &k in &classes {
        let (_, r, f) = precision_recall_f1(&column(&pred, k), &column(&test.y, k));
        f1 += f;
        recall += r;
    }
    f1 /= classes.len() as f64;
    recall /= classes.len() as f64;
    let au = macro_auroc(p, &test.y, &classes).expect("classes are evaluable");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.len();
    let mut boots = Vec::with_capacity(BOOTSTRAP_REPLICATES);
    for _ in 0..BOOTSTRAP_REPLICATES {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let bp: Vec<Vec<f64>> = idx.iter().map(|&i| p[i].clone()).collect();
        let by: Vec<Vec<bool>> = idx.iter().map(|&i| test.y[i].clone()).collect();
        if let Some(a) = macro_auroc(&bp, &by, &classes) {
            boots.push(a);
        }
    }
    boots.sort_by(f64::total_cmp);
    let pick = |q: f64| boots[((q * (boots.len() - 1) as f64).round() as usize).min(boots.len() - 1)];
    let (lo, hi) = if boots.is_empty() { (au, au) } else { (pick(0.025), pick(0.975)) };
    Ok((au, f1, recall, lo, hi, classes.len()))
}

pub fn evaluate_task(train: &TaskData, test: &TaskData, cfg: &LogisticConfig, seed: u64) -> Result<TstrMetrics> {
    let model = Logistic::fit(train, cfg)?;
    let p = model.predict(&test.x);
    let (auroc, f1, recall, ci_low, ci_high, evaluated_classes) = score_predictions(&p, test, seed)?;
    Ok(TstrMetrics {
        auroc,
        f1,
        recall,
        ci_low,
        ci_high,
        evaluated_classes,
        n_train: train.len(),
        n_test: test.len(),
    })
}

/// Fits on `train` (synthetic or real) and scores on held-out real records.
pub fn tstr_eval(train: &Corpus, test: &Corpus, task: TstrTask, seed: u64) -> Result<TstrMetrics> {
    let (tr, te) = build_task(train, test, task)?;
    evaluate_task(&tr, &te, &LogisticConfig::default(), seed)
}

#[cfg(test)]
mod tests {
    use chrono::{TimeZone, Utc};
    use rand::seq::SliceRandom;

    use super::*;
    use crate::corpus::{simulate_corpus, Marital, Race, Sex, SimulatorSpec, Visit};

    #[test]
    fn los_classes() {
        assert_eq!(los_class(0.2), 0);
        assert_eq!(los_class(1.0), 1);
        assert_eq!(los_class(7.9), 7);
        assert_eq!(los_class(13.0), 8);
        assert_eq!(los_class(30.0), 9);
    }

    fn rec(i: usize, marker: bool, died: bool, rng: &mut ChaCha8Rng) -> Record {
        let t = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let mut events: Vec<Event> = (0..3)
            .map(|_| Event {
                time: t,
                category: Category::Medication,
                code: format!("N{}", rng.random_range(0..20)),
                value: None,
                unit: None,
                label: String::new(),
            })
            .collect();
        if marker {
            events.push(Event {
                time: t,
                category: Category::Procedure,
                code: "X1".into(),
                value: None,
                unit: None,
                label: String::new(),
            });
        }
        Record {
            patient_id: format!("p{i}"),
            age_years: 60,
            sex: Sex::M,
            race: Race::White,
            marital: Marital::Single,
            year: 2020,
            visits: vec![Visit {
                admit_time: t,
                discharge_time: t + Duration::days(2),
                events,
                death: died,
            }],
        }
    }

    fn separable(n: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Corpus::new("s", (0..n).map(|i| rec(i, i % 3 == 0, i % 3 == 0, &mut rng)).collect())
    }

    #[test]
    fn separable_mortality_is_perfect() {
        let m = tstr_eval(&separable(120, 1), &separable(60, 2), TstrTask::Mortality, 0).unwrap();
        assert_eq!(m.auroc, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!((m.ci_low, m.ci_high), (1.0, 1.0));
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let c = simulate_corpus(&SimulatorSpec::desk(1200), 4).unwrap();
        let (tr, te) = c.records.split_at(800);
        let (mut train, test) = build_task(&Corpus::new("a", tr.to_vec()), &Corpus::new("b", te.to_vec()), TstrTask::PhenotypeMultilabel).unwrap();
        let mut aucs = Vec::new();
        for seed in 0..5 {
            train.y.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            aucs.push(evaluate_task(&train, &test, &LogisticConfig::default(), seed).unwrap().auroc);
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "{aucs:?}");
    }

    #[test]
    fn real_signal_beats_chance() {
        let c = simulate_corpus(&SimulatorSpec::desk(1200), 5).unwrap();
        let (tr, te) = c.records.split_at(800);
        let m = tstr_eval(&Corpus::new("a", tr.to_vec()), &Corpus::new("b", te.to_vec()), TstrTask::PhenotypeMultilabel, 1).unwrap();
        assert!(m.auroc > 0.6, "{m:?}");
        assert!(m.ci_low <= m.auroc && m.auroc <= m.ci_high);
        assert!(m.evaluated_classes > 5);
    }

    #[test]
    fn every_task_runs_on_simulated_records() {
        let c = simulate_corpus(&SimulatorSpec::desk(400), 6).unwrap();
        let (tr, te) = c.records.split_at(300);
        for task in TstrTask::ALL {
            let m = tstr_eval(&Corpus::new("a", tr.to_vec()), &Corpus::new("b", te.to_vec()), task, 2);
            let m = m.unwrap_or_else(|e| panic!("{task:?}: {e}"));
            assert!((0.0..=1.0).contains(&m.auroc), "{task:?}");
        }
    }

    #[test]
    fn single_class_test_set_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let test = Corpus::new("t", (0..10).map(|i| rec(i, false, false, &mut rng)).collect());
        assert!(matches!(
            tstr_eval(&separable(30, 1), &test, TstrTask::Mortality, 0),
            Err(EvalError::SingleClass)
        ));
    }

    #[test]
    fn phenotype_groups_are_by_prefix() {
        let c = simulate_corpus(&SimulatorSpec::desk(300), 7).unwrap();
        let g = phenotype_groups(&c, 25);
        assert!(g.len() <= 25);
        assert!(g.iter().all(|x| x.len() == 3));
        assert!(g.contains(&"I10".to_string()) || g.contains(&"E11".to_string()));
    }
}
