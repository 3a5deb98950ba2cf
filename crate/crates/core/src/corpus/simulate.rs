//! Rule-based oracle corpus generator.
//!
//! Every visit draws diagnoses independently from their base rates, fires the
//! condition rules of the diagnoses present, then adds background procedures,
//! medications and labs. Because the generating law is explicit, every
//! fidelity statistic has a computable ground truth.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{Category, Corpus, CorpusError, Event, Marital, Race, Record, Result, Sex, Visit};

/// A code that can appear in a visit independently of any rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSpec {
    pub category: Category,
    pub code: String,
    pub label: String,
    /// Per-visit inclusion probability.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabSpec {
    pub code: String,
    pub label: String,
    pub unit: String,
    pub mean: f64,
    pub sd: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Implication {
    pub category: Category,
    pub code: String,
    pub probability: f64,
}

/// "Diagnosis `trigger` in a visit implies each listed code in the same
/// visit with its probability."
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRule {
    pub trigger: String,
    pub implies: Vec<Implication>,
}

/// Visit count is `1 + Geometric(continue_probability)`, capped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitCountSpec {
    pub continue_probability: f64,
    pub max_visits: usize,
}

/// Exponential gap means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSpec {
    pub intra_event_mean_minutes: f64,
    pub discharge_mean_hours: f64,
    pub inter_visit_mean_days: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorSpec {
    pub n_patients: usize,
    pub codes: Vec<CodeSpec>,
    pub labs: Vec<LabSpec>,
    pub rules: Vec<ConditionRule>,
    pub visits: VisitCountSpec,
    pub gaps: GapSpec,
    pub mortality_probability: f64,
    pub age_range: (u32, u32),
    pub year_range: (i32, i32),
}

fn prob_ok(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl SimulatorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        for c in &self.codes {
            if c.category == Category::Lab {
                return bad(format!("{}: labs belong in the labs list", c.code));
            }
            if !prob_ok(c.rate) {
                return bad(format!("{}: rate {} outside [0,1]", c.code, c.rate));
            }
        }
        if !self.codes.iter().any(|c| c.category == Category::Diagnosis) {
            return bad("at least one diagnosis code is required".into());
        }
        for l in &self.labs {
            if !prob_ok(l.rate) || !(l.sd > 0.0) || !l.mean.is_finite() {
                return bad(format!("{}: needs rate in [0,1] and sd > 0", l.code));
            }
        }
        for r in &self.rules {
            if self.code_index(Category::Diagnosis, &r.trigger).is_none() {
                return bad(format!("rule trigger {} is not a known diagnosis", r.trigger));
            }
            for imp in &r.implies {
                if !prob_ok(imp.probability) {
                    return bad(format!("{} -> {}: probability outside [0,1]", r.trigger, imp.code));
                }
                if self.slot(imp.category, &imp.code).is_none() {
                    return bad(format!("{} -> {}: implied code is not defined", r.trigger, imp.code));
                }
            }
        }
        if !prob_ok(self.visits.continue_probability) || self.visits.continue_probability >= 1.0 {
            return bad("continue_probability must be in [0,1)".into());
        }
        if self.visits.max_visits == 0 {
            return bad("max_visits must be positive".into());
        }
        let g = &self.gaps;
        if !(g.intra_event_mean_minutes > 0.0 && g.discharge_mean_hours > 0.0 && g.inter_visit_mean_days > 0.0) {
            return bad("gap means must be positive".into());
        }
        if !prob_ok(self.mortality_probability) {
            return bad("mortality probability outside [0,1]".into());
        }
        if self.age_range.0 > self.age_range.1 || self.year_range.0 > self.year_range.1 {
            return bad("empty age or year range".into());
        }
        Ok(())
    }

    fn code_index(&self, cat: Category, code: &str) -> Option<usize> {
        self.codes.iter().position(|c| c.category == cat && c.code == code)
    }

    /// Stable position of a code across `codes` then `labs`.
    fn slot(&self, cat: Category, code: &str) -> Option<usize> {
        if cat == Category::Lab {
            self.labs.iter().position(|l| l.code == code).map(|i| self.codes.len() + i)
        } else {
            self.code_index(cat, code)
        }
    }

    /// The desk-scale oracle: ~160 clinical concepts with ten condition rules.
    pub fn desk(n_patients: usize) -> Self {
        use Category::{Diagnosis as D, Medication as M, Procedure as P};
        let c = |category, code: &str, label: &str, rate| CodeSpec {
            category,
            code: code.into(),
            label: label.into(),
            rate,
        };
        let codes = vec![
            c(D, "E11.9", "Type 2 diabetes mellitus without complications", 0.22),
            c(D, "I10", "Essential (primary) hypertension", 0.25),
            c(D, "E78.5", "Hyperlipidemia, unspecified", 0.15),
            c(D, "N18.3", "Chronic kidney disease, stage 3", 0.08),
            c(D, "J18.9", "Pneumonia, unspecified organism", 0.08),
            c(D, "I50.9", "Heart failure, unspecified", 0.07),
            c(D, "I48.91", "Unspecified atrial fibrillation", 0.07),
            c(D, "D64.9", "Anemia, unspecified", 0.08),
            c(D, "K21.9", "Gastro-esophageal reflux disease without esophagitis", 0.08),
            c(D, "F32.9", "Major depressive disorder, single episode, unspecified", 0.06),
            c(D, "J44.9", "Chronic obstructive pulmonary disease, unspecified", 0.05),
            c(D, "N39.0", "Urinary tract infection, site not specified", 0.06),
            c(D, "E87.1", "Hypo-osmolality and hyponatremia", 0.04),
            c(D, "E87.6", "Hypokalemia", 0.04),
            c(D, "I25.10", "Atherosclerotic heart disease of native coronary artery", 0.05),
            c(D, "F17.210", "Nicotine dependence, cigarettes, uncomplicated", 0.05),
            c(D, "E03.9", "Hypothyroidism, unspecified", 0.04),
            c(D, "G47.33", "Obstructive sleep apnea", 0.03),
            c(D, "M54.5", "Low back pain", 0.03),
            c(D, "A41.9", "Sepsis, unspecified organism", 0.03),
            c(D, "N17.9", "Acute kidney failure, unspecified", 0.03),
            c(D, "K92.2", "Gastrointestinal hemorrhage, unspecified", 0.02),
            c(D, "I63.9", "Cerebral infarction, unspecified", 0.02),
            c(D, "R07.9", "Chest pain, unspecified", 0.03),
            c(D, "R55", "Syncope and collapse", 0.02),
            c(D, "F10.20", "Alcohol dependence, uncomplicated", 0.02),
            c(D, "E66.9", "Obesity, unspecified", 0.03),
            c(D, "Z79.4", "Long term (current) use of insulin", 0.03),
            c(D, "G89.29", "Other chronic pain", 0.02),
            c(D, "J96.01", "Acute respiratory failure with hypoxia", 0.02),
            c(D, "K57.30", "Diverticulosis of large intestine", 0.015),
            c(D, "M81.0", "Age-related osteoporosis", 0.015),
            c(D, "C34.90", "Malignant neoplasm of unspecified part of bronchus or lung", 0.01),
            c(D, "C50.919", "Malignant neoplasm of unspecified site of female breast", 0.01),
            c(D, "O80", "Encounter for full-term uncomplicated delivery", 0.01),
            c(D, "L03.90", "Cellulitis, unspecified", 0.015),
            c(D, "I21.4", "Non-ST elevation myocardial infarction", 0.015),
            c(D, "K80.20", "Calculus of gallbladder without obstruction", 0.01),
            c(D, "G40.909", "Epilepsy, unspecified", 0.01),
            c(D, "B20", "Human immunodeficiency virus disease", 0.005),
            c(D, "E11.65", "Type 2 diabetes mellitus with hyperglycemia", 0.02),
            c(D, "E11.22", "Type 2 diabetes mellitus with diabetic chronic kidney disease", 0.015),
            c(D, "I35.0", "Nonrheumatic aortic valve stenosis", 0.01),
            c(D, "I26.99", "Other pulmonary embolism without acute cor pulmonale", 0.01),
            c(D, "I82.409", "Acute embolism and thrombosis of unspecified deep veins of lower extremity", 0.01),
            c(D, "J45.909", "Unspecified asthma, uncomplicated", 0.02),
            c(D, "K85.90", "Acute pancreatitis without necrosis or infection", 0.008),
            c(D, "K70.30", "Alcoholic cirrhosis of liver without ascites", 0.008),
            c(D, "K56.609", "Unspecified intestinal obstruction", 0.008),
            c(D, "N40.0", "Benign prostatic hyperplasia", 0.015),
            c(D, "N20.0", "Calculus of kidney", 0.01),
            c(D, "M17.11", "Unilateral primary osteoarthritis, right knee", 0.01),
            c(D, "M10.9", "Gout, unspecified", 0.01),
            c(D, "F41.9", "Anxiety disorder, unspecified", 0.03),
            c(D, "F03.90", "Unspecified dementia without behavioral disturbance", 0.015),
            c(D, "G20", "Parkinson's disease", 0.006),
            c(D, "G35", "Multiple sclerosis", 0.004),
            c(D, "R50.9", "Fever, unspecified", 0.02),
            c(D, "R06.02", "Shortness of breath", 0.02),
            c(D, "R10.9", "Unspecified abdominal pain", 0.02),
            c(D, "E86.0", "Dehydration", 0.02),
            c(D, "E83.42", "Hypomagnesemia", 0.015),
            c(D, "D69.6", "Thrombocytopenia, unspecified", 0.015),
            c(D, "C18.9", "Malignant neoplasm of colon, unspecified", 0.006),
            c(D, "C61", "Malignant neoplasm of prostate", 0.006),
            c(D, "O99.89", "Other specified diseases and conditions complicating pregnancy", 0.004),
            c(D, "Z95.1", "Presence of aortocoronary bypass graft", 0.01),
            c(D, "Z87.891", "Personal history of nicotine dependence", 0.03),
            c(P, "0BH17EZ", "Insertion of endotracheal airway", 0.02),
            c(P, "5A1955Z", "Respiratory ventilation, greater than 96 consecutive hours", 0.015),
            c(P, "BW03ZZZ", "Plain radiography of chest", 0.06),
            c(P, "02HV33Z", "Insertion of infusion device into superior vena cava", 0.03),
            c(P, "0DJ08ZZ", "Inspection of upper intestinal tract, endoscopic", 0.02),
            c(P, "4A023N7", "Measurement of cardiac sampling and pressure, left heart", 0.02),
            c(P, "027034Z", "Dilation of coronary artery with drug-eluting stent", 0.01),
            c(P, "5A1D70Z", "Performance of urinary filtration, intermittent", 0.01),
            c(P, "30233N1", "Transfusion of nonautologous red blood cells", 0.02),
            c(P, "B246ZZZ", "Ultrasonography of heart", 0.04),
            c(P, "0FT44ZZ", "Resection of gallbladder, percutaneous endoscopic", 0.005),
            c(P, "3E0336Z", "Introduction of nutritional substance into peripheral vein", 0.01),
            c(P, "0DTJ4ZZ", "Resection of appendix, percutaneous endoscopic", 0.004),
            c(P, "0SRD0J9", "Replacement of left knee joint with synthetic substitute", 0.004),
            c(P, "0W9G3ZZ", "Drainage of peritoneal cavity, percutaneous", 0.006),
            c(P, "0BJ08ZZ", "Inspection of tracheobronchial tree, endoscopic", 0.006),
            c(P, "B030ZZZ", "Magnetic resonance imaging of brain", 0.02),
            c(P, "BW28ZZZ", "Computerized tomography of head", 0.03),
            c(P, "10E0XZZ", "Delivery of products of conception", 0.004),
            c(P, "0JH63XZ", "Insertion of infusion device into chest subcutaneous tissue", 0.005),
            c(M, "A10BA02", "Metformin", 0.02),
            c(M, "A10AB01", "Insulin (human), fast-acting", 0.04),
            c(M, "C09AA05", "Ramipril", 0.03),
            c(M, "C07AB02", "Metoprolol", 0.06),
            c(M, "C10AA05", "Atorvastatin", 0.04),
            c(M, "C03CA01", "Furosemide", 0.04),
            c(M, "B01AF01", "Rivaroxaban", 0.01),
            c(M, "B01AB05", "Enoxaparin", 0.08),
            c(M, "J01CR02", "Amoxicillin and beta-lactamase inhibitor", 0.03),
            c(M, "J01DD04", "Ceftriaxone", 0.04),
            c(M, "A02BC01", "Omeprazole", 0.05),
            c(M, "N06AB06", "Sertraline", 0.02),
            c(M, "N02BE01", "Paracetamol", 0.12),
            c(M, "N02AA01", "Morphine", 0.04),
            c(M, "A12BA01", "Potassium chloride", 0.04),
            c(M, "H03AA01", "Levothyroxine sodium", 0.02),
            c(M, "R03AK06", "Salmeterol and fluticasone", 0.02),
            c(M, "A06AB08", "Sodium picosulfate", 0.03),
            c(M, "N05BA01", "Diazepam", 0.02),
            c(M, "B03BA01", "Cyanocobalamin", 0.02),
            c(M, "A10BJ06", "Semaglutide", 0.008),
            c(M, "C08CA01", "Amlodipine", 0.04),
            c(M, "C01DA14", "Isosorbide mononitrate", 0.01),
            c(M, "B01AC06", "Acetylsalicylic acid", 0.06),
            c(M, "B01AC04", "Clopidogrel", 0.02),
            c(M, "J01MA02", "Ciprofloxacin", 0.02),
            c(M, "J01XA01", "Vancomycin", 0.03),
            c(M, "H02AB06", "Prednisolone", 0.02),
            c(M, "N03AX14", "Levetiracetam", 0.01),
            c(M, "M04AA01", "Allopurinol", 0.01),
            c(M, "G04CA02", "Tamsulosin", 0.01),
            c(M, "N05AH04", "Quetiapine", 0.01),
        ];
        let l = |code: &str, label: &str, unit: &str, mean, sd, rate| LabSpec {
            code: code.into(),
            label: label.into(),
            unit: unit.into(),
            mean,
            sd,
            rate,
        };
        let labs = vec![
            l("Glucose_mg/dL", "Glucose", "mg/dL", 120.0, 35.0, 0.18),
            l("HbA1c_%", "Hemoglobin A1c", "%", 7.2, 1.4, 0.02),
            l("Creatinine_mg/dL", "Creatinine", "mg/dL", 1.2, 0.5, 0.12),
            l("Hemoglobin_g/dL", "Hemoglobin", "g/dL", 12.0, 2.0, 0.12),
            l("Sodium_mEq/L", "Sodium", "mEq/L", 139.0, 4.0, 0.1),
            l("Potassium_mEq/L", "Potassium", "mEq/L", 4.1, 0.6, 0.1),
            l("BNP_pg/mL", "B-type natriuretic peptide", "pg/mL", 450.0, 250.0, 0.01),
            l("WBC_K/uL", "White blood cell count", "K/uL", 9.0, 3.5, 0.08),
            l("Platelets_K/uL", "Platelet count", "K/uL", 240.0, 80.0, 0.05),
            l("Lactate_mmol/L", "Lactate", "mmol/L", 1.8, 0.9, 0.02),
            l("Magnesium_mg/dL", "Magnesium", "mg/dL", 2.0, 0.3, 0.06),
            l("Albumin_g/dL", "Albumin", "g/dL", 3.6, 0.6, 0.04),
        ];
        let imp = |category, code: &str, probability| Implication {
            category,
            code: code.into(),
            probability,
        };
        let rule = |trigger: &str, implies| ConditionRule {
            trigger: trigger.into(),
            implies,
        };
        let rules = vec![
            rule(
                "E11.9",
                vec![imp(M, "A10BA02", 1.0), imp(Category::Lab, "HbA1c_%", 0.9)],
            ),
            rule("I10", vec![imp(M, "C09AA05", 0.8)]),
            rule("E78.5", vec![imp(M, "C10AA05", 0.9)]),
            rule("N18.3", vec![imp(Category::Lab, "Creatinine_mg/dL", 1.0)]),
            rule("J18.9", vec![imp(M, "J01CR02", 0.9), imp(P, "BW03ZZZ", 0.7)]),
            rule("I50.9", vec![imp(M, "C03CA01", 0.9), imp(Category::Lab, "BNP_pg/mL", 0.8)]),
            rule("I48.91", vec![imp(M, "B01AF01", 0.8)]),
            rule("D64.9", vec![imp(Category::Lab, "Hemoglobin_g/dL", 1.0), imp(P, "30233N1", 0.3)]),
            rule("K21.9", vec![imp(M, "A02BC01", 0.8)]),
            rule("F32.9", vec![imp(M, "N06AB06", 0.8)]),
        ];
        Self {
            n_patients,
            codes,
            labs,
            rules,
            visits: VisitCountSpec {
                continue_probability: 0.45,
                max_visits: 8,
            },
            gaps: GapSpec {
                intra_event_mean_minutes: 4.0,
                discharge_mean_hours: 48.0,
                inter_visit_mean_days: 60.0,
            },
            mortality_probability: 0.08,
            age_range: (18, 90),
            year_range: (2150, 2159),
        }
    }
}

/// Deterministic for a fixed `(spec, seed)`.
pub fn simulate_corpus(spec: &SimulatorSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intra = Exp::new(1.0 / (spec.gaps.intra_event_mean_minutes * 60.0)).expect("positive rate");
    let discharge = Exp::new(1.0 / (spec.gaps.discharge_mean_hours * 3600.0)).expect("positive rate");
    let inter = Exp::new(1.0 / (spec.gaps.inter_visit_mean_days * 86_400.0)).expect("positive rate");
    let lab_dists: Vec<Normal<f64>> = spec
        .labs
        .iter()
        .map(|l| Normal::new(l.mean, l.sd).expect("validated sd"))
        .collect();
    let diagnoses: Vec<usize> = (0..spec.codes.len())
        .filter(|&i| spec.codes[i].category == Category::Diagnosis)
        .collect();
    let width = (spec.n_patients.max(1) as f64).log10().floor() as usize + 1;

    let mut records = Vec::with_capacity(spec.n_patients);
    for p in 0..spec.n_patients {
        let age_years = rng.random_range(spec.age_range.0..=spec.age_range.1);
        let sex = Sex::ALL[rng.random_range(0..Sex::ALL.len())];
        let race = pick_weighted(&mut rng, Race::ALL, &[0.06, 0.14, 0.07, 0.06, 0.07, 0.60]);
        let marital = pick_weighted(&mut rng, Marital::ALL, &[0.10, 0.42, 0.30, 0.05, 0.13]);
        let year = rng.random_range(spec.year_range.0..=spec.year_range.1);
        let year_start = Utc.with_ymd_and_hms(year, 1, 1, 0, 0, 0).single().expect("valid year");

        let mut n_visits = 1;
        while n_visits < spec.visits.max_visits && rng.random::<f64>() < spec.visits.continue_probability {
            n_visits += 1;
        }
        let died = rng.random::<f64>() < spec.mortality_probability;

        let mut admit = year_start + Duration::seconds(rng.random_range(0..300 * 86_400));
        let mut visits = Vec::with_capacity(n_visits);
        for vi in 0..n_visits {
            let slots = draw_visit_codes(spec, &diagnoses, &mut rng);
            let mut t = admit;
            let mut events = Vec::with_capacity(slots.len());
            for slot in slots {
                t += secs(intra.sample(&mut rng));
                events.push(materialize(spec, slot, t, &lab_dists, &mut rng));
            }
            let discharge_time = t + secs(discharge.sample(&mut rng));
            visits.push(Visit {
                admit_time: admit,
                discharge_time,
                events,
                death: died && vi + 1 == n_visits,
            });
            admit = discharge_time + Duration::hours(1) + secs(inter.sample(&mut rng));
        }
        records.push(Record {
            patient_id: format!("P{:0width$}", p + 1),
            age_years,
            sex,
            race,
            marital,
            year,
            visits,
        });
    }
    Ok(Corpus {
        name: "simulated".into(),
        seed: Some(seed),
        records,
    })
}

fn secs(x: f64) -> Duration {
    Duration::seconds(x.round() as i64)
}

fn pick_weighted<T: Copy>(rng: &mut ChaCha8Rng, items: &[T], weights: &[f64]) -> T {
    let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (item, w) in items.iter().zip(weights) {
        acc += w;
        if u < acc {
            return *item;
        }
    }
    *items.last().expect("non-empty")
}

/// Slots of the codes present in one visit, in stable spec order.
fn draw_visit_codes(spec: &SimulatorSpec, diagnoses: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let total = spec.codes.len() + spec.labs.len();
    let mut present = vec![false; total];
    for &i in diagnoses {
        if rng.random::<f64>() < spec.codes[i].rate {
            present[i] = true;
        }
    }
    if !diagnoses.iter().any(|&i| present[i]) {
        present[diagnoses[rng.random_range(0..diagnoses.len())]] = true;
    }
    for rule in &spec.rules {
        let trig = spec.code_index(Category::Diagnosis, &rule.trigger).expect("validated");
        if !present[trig] {
            continue;
        }
        for imp in &rule.implies {
            let slot = spec.slot(imp.category, &imp.code).expect("validated");
            if rng.random::<f64>() < imp.probability {
                present[slot] = true;
            }
        }
    }
    for (i, c) in spec.codes.iter().enumerate() {
        if c.category != Category::Diagnosis && rng.random::<f64>() < c.rate {
            present[i] = true;
        }
    }
    for (j, l) in spec.labs.iter().enumerate() {
        if rng.random::<f64>() < l.rate {
            present[spec.codes.len() + j] = true;
        }
    }
    let category_of = |slot: usize| {
        if slot < spec.codes.len() {
            spec.codes[slot].category
        } else {
            Category::Lab
        }
    };
    let mut slots: Vec<usize> = (0..total).filter(|&s| present[s]).collect();
    slots.sort_by_key(|&s| (category_of(s), s));
    slots
}

fn materialize(
    spec: &SimulatorSpec,
    slot: usize,
    time: DateTime<Utc>,
    lab_dists: &[Normal<f64>],
    rng: &mut ChaCha8Rng,
) -> Event {
    if slot < spec.codes.len() {
        let c = &spec.codes[slot];
        Event {
            time,
            category: c.category,
            code: c.code.clone(),
            value: None,
            unit: None,
            label: c.label.clone(),
        }
    } else {
        let j = slot - spec.codes.len();
        let l = &spec.labs[j];
        let v = (lab_dists[j].sample(rng) * 100.0).round() / 100.0;
        Event {
            time,
            category: Category::Lab,
            code: l.code.clone(),
            value: Some(v),
            unit: Some(l.unit.clone()),
            label: l.label.clone(),
        }
    }
}
