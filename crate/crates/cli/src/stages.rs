//! One function per pipeline stage. Each reads its inputs from disk, writes
//! its outputs and a manifest, and never modifies its inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ehrgen::corpus::{load_corpus, save_corpus, simulate_corpus, split_corpus, Corpus, SimulatorSpec};
use ehrgen::evaluate::{
    self, aia_attack, bland_altman, code_probs, cooccur_matrix, filter_by_token_length, ks_stat, matrix_corr, mia_attack, overlap_coeff,
    paired_probs, r2, record_shape, rule_preservation, top_diagnoses, tstr_eval, ProbMode, SensitiveAttribute,
    TstrTask,
};
use ehrgen::generate::{generate_cohort, SamplerConfig};
use ehrgen::knowledge::{
    build_fused_embeddings, load_kg, save_kg, toy_kg_from_spec, FileProvider, FusedEmbeddings, FusionParams, HashProvider,
    KnowledgeConfig, SemanticProvider,
};
use ehrgen::model::{count_params, init_model, Model32, ModelConfig};
use ehrgen::train::{fit_isoflop, fit_power_law, train_model, training_flops, IsoflopPoint, TrainConfig};
use ehrgen::vocab::{build_vocab, encode_record, VocabError, Vocabulary};
use ehrgen_audit::{audit_cohort, cohens_d, rank_sum_p, AuditorConfig, StubServer};
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::{manifest_for_file, write_atomic, ManifestBuilder, MANIFEST_FILE};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const SPEC_FILE: &str = "spec.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn mkdir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_corpus(path: &Path) -> anyhow::Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn read_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

/// Metric value or the reason it could not be computed.
fn or_reason<T: Serialize, E: std::fmt::Display>(r: Result<T, E>) -> Value {
    match r {
        Ok(v) => serde_json::to_value(v).unwrap_or(Value::Null),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

/// Writes the corpus and its patient-level split into `out`.
pub fn simulate(spec: &SimulatorSpec, seed: u64, split: (f64, f64, f64), out: &Path) -> anyhow::Result<()> {
    mkdir(out)?;
    let mut m = ManifestBuilder::new("simulate", &out.join(MANIFEST_FILE), seed, &(spec, split))?;
    m.arg("seed", seed).arg("n_patients", spec.n_patients);
    let corpus = simulate_corpus(spec, seed)?;
    let (train, val, test) = split_corpus(&corpus, split, seed)?;
    for (name, c) in [(CORPUS_FILE, &corpus), (TRAIN_FILE, &train), (VAL_FILE, &val), (TEST_FILE, &test)] {
        save_corpus(c, out.join(name))?;
        m.output(name, &out.join(name));
    }
    write_json(&out.join(SPEC_FILE), spec)?;
    m.output(SPEC_FILE, &out.join(SPEC_FILE));
    m.finish()?;
    log::info!(
        "simulated {} records ({} train, {} val, {} test)",
        corpus.len(),
        train.len(),
        val.len(),
        test.len()
    );
    Ok(())
}

pub fn build_vocabulary(corpus: &Path, out: &Path) -> anyhow::Result<Vocabulary> {
    let mut m = ManifestBuilder::new("build-vocab", &manifest_for_file(out), 0, &())?;
    m.input("corpus", corpus);
    let vocab = build_vocab(&read_corpus(corpus)?)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    vocab.save(out)?;
    m.output("vocab", out);
    m.finish()?;
    log::info!("vocabulary of {} tokens", vocab.len());
    Ok(vocab)
}

pub struct EmbedArgs<'a> {
    pub vocab: &'a Path,
    /// Graph directory; the toy graph for `spec` when absent.
    pub kg: Option<&'a Path>,
    pub spec: &'a SimulatorSpec,
    pub semantic_vectors: Option<&'a Path>,
    pub semantic_dim: usize,
    pub knowledge: &'a KnowledgeConfig,
    pub seed: u64,
    pub out: &'a Path,
}

pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const KG_DIR: &str = "kg";

/// Writes `embeddings.bin` (and the toy graph when none is given) into `out`.
pub fn embed_kg(a: &EmbedArgs<'_>) -> anyhow::Result<FusedEmbeddings<f32>> {
    mkdir(a.out)?;
    let mut m = ManifestBuilder::new("embed-kg", &a.out.join(MANIFEST_FILE), a.seed, &(a.knowledge, a.semantic_dim))?;
    m.input("vocab", a.vocab).arg("seed", a.seed);
    let vocab = read_vocab(a.vocab)?;
    let bundle = match a.kg {
        Some(dir) => {
            m.input("kg", dir);
            load_kg(dir)?
        }
        None => {
            let b = toy_kg_from_spec(a.spec);
            save_kg(&b, a.out.join(KG_DIR))?;
            m.output(KG_DIR, &a.out.join(KG_DIR));
            b
        }
    };
    let file_provider;
    let hash_provider = HashProvider { dim: a.semantic_dim };
    let provider: &dyn SemanticProvider = match a.semantic_vectors {
        Some(p) => {
            m.input("semantic_vectors", p);
            file_provider = FileProvider::load(p)?;
            &file_provider
        }
        None => &hash_provider,
    };
    let fused = build_fused_embeddings::<f32>(&vocab, &bundle, a.knowledge, provider, a.seed)?;
    let path = a.out.join(EMBEDDINGS_FILE);
    fused.save(&path)?;
    m.output(EMBEDDINGS_FILE, &path);
    m.finish()?;
    Ok(fused)
}

/// Model shape with the vocabulary and knowledge widths filled in.
pub fn resolved_model_config(base: &ModelConfig, vocab: &Vocabulary, fused: &FusedEmbeddings<f32>) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        struct_dim: fused.struct_raw.cols(),
        sem_dim: fused.sem_raw.cols(),
        ..base.clone()
    }
}

/// Encodes every record, leaving out (with a warning) those holding concepts
/// the vocabulary lacks, e.g. validation codes never seen in training.
fn encode_all(c: &Corpus, vocab: &Vocabulary, max_len: usize) -> anyhow::Result<(Vec<Vec<usize>>, usize)> {
    let (mut truncated, mut unknown) = (0, 0);
    let mut seqs = Vec::with_capacity(c.len());
    for r in &c.records {
        match encode_record(r, vocab, Some(max_len)) {
            Ok(s) => {
                truncated += usize::from(s.truncated);
                seqs.push(s.ids);
            }
            Err(VocabError::UnknownConcept(_)) => unknown += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if unknown > 0 {
        log::warn!("{unknown} of {} records in '{}' hold concepts outside the vocabulary; left out", c.len(), c.name);
    }
    Ok((seqs, truncated))
}

pub struct TrainArgs<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub corpus_dir: &'a Path,
    pub vocab: &'a Path,
    pub embeddings: &'a Path,
    pub seed: u64,
    pub out: &'a Path,
}

/// Trains from `train.jsonl`/`val.jsonl` and writes the best checkpoint and
/// the evaluation history.
pub fn train(a: &TrainArgs<'_>) -> anyhow::Result<()> {
    mkdir(a.out)?;
    let mut m = ManifestBuilder::new("train", &a.out.join(MANIFEST_FILE), a.seed, &(a.model, a.train))?;
    let (train_path, val_path) = (a.corpus_dir.join(TRAIN_FILE), a.corpus_dir.join(VAL_FILE));
    m.input("train", &train_path)
        .input("val", &val_path)
        .input("vocab", a.vocab)
        .input("embeddings", a.embeddings)
        .arg("seed", a.seed);
    let vocab = read_vocab(a.vocab)?;
    let fused = FusedEmbeddings::<f32>::load(a.embeddings)?;
    let cfg = resolved_model_config(a.model, &vocab, &fused);
    let (train_seqs, cut) = encode_all(&read_corpus(&train_path)?, &vocab, cfg.context_len)?;
    let (val_seqs, _) = encode_all(&read_corpus(&val_path)?, &vocab, cfg.context_len)?;
    if cut > 0 {
        log::warn!("{cut} training records truncated to the {}-token context", cfg.context_len);
    }
    let model = init_model(&cfg, &fused, a.seed)?;
    let (model, history) = train_model(model, &train_seqs, &val_seqs, vocab.pad_id(), a.train)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    model.save(&ckpt, a.seed, history.best_step as u64)?;
    write_atomic(&a.out.join(HISTORY_FILE), history.to_csv().as_bytes())?;
    let summary = json!({
        "params": count_params(&cfg),
        "best_step": history.best_step,
        "best": history.best(),
        "stopped_early": history.stopped_early,
        "truncated_records": cut,
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    for f in [CHECKPOINT_FILE, HISTORY_FILE, "summary.json"] {
        m.output(f, &a.out.join(f));
    }
    m.finish()?;
    if let Some(b) = history.best() {
        log::info!("best validation loss {:.4} at step {}", b.val_loss, b.step);
    }
    Ok(())
}

pub struct ScaleArgs<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub budgets: &'a [f64],
    pub model_dims: &'a [usize],
    pub layers: usize,
    /// Fusion gate for the re-projected knowledge rows at each width.
    pub gate_init: f64,
    pub corpus_dir: &'a Path,
    pub vocab: &'a Path,
    pub embeddings: &'a Path,
    pub seed: u64,
    pub out: &'a Path,
}

/// Trains one model per (budget, width) on `C / 6N` tokens, then fits a
/// parabola in log size per budget and power laws to the optima.
pub fn scale_study(a: &ScaleArgs<'_>) -> anyhow::Result<()> {
    mkdir(a.out)?;
    let mut m = ManifestBuilder::new(
        "scale-study",
        &a.out.join(MANIFEST_FILE),
        a.seed,
        &(a.model, a.train, a.budgets, a.model_dims, a.layers),
    )?;
    let (train_path, val_path) = (a.corpus_dir.join(TRAIN_FILE), a.corpus_dir.join(VAL_FILE));
    m.input("train", &train_path)
        .input("val", &val_path)
        .input("vocab", a.vocab)
        .input("embeddings", a.embeddings);
    let vocab = read_vocab(a.vocab)?;
    let fused = FusedEmbeddings::<f32>::load(a.embeddings)?;
    let base = resolved_model_config(a.model, &vocab, &fused);
    let (train_seqs, _) = encode_all(&read_corpus(&train_path)?, &vocab, base.context_len)?;
    let (val_seqs, _) = encode_all(&read_corpus(&val_path)?, &vocab, base.context_len)?;
    let epoch_tokens: usize = train_seqs.iter().map(|s| s.len() - 1).sum();

    let mut csv = String::from("flop_budget,model_dim,trainable_params,tokens,flops,val_loss\n");
    let mut points = Vec::new();
    for &budget in a.budgets {
        for &d in a.model_dims {
            let cfg = ModelConfig {
                model_dim: d,
                factor_dim: (d / 2).max(1),
                ffn_hidden: 2 * d,
                layers: a.layers,
                ..base.clone()
            };
            let n = count_params(&cfg).trainable as f64;
            let want = budget / (6.0 * n);
            // whole epochs when the budget covers the set, else a prefix
            let (seqs, epochs) = if want >= epoch_tokens as f64 {
                (train_seqs.clone(), (want / epoch_tokens as f64).round().max(1.0) as usize)
            } else {
                let mut taken = 0;
                let prefix: Vec<Vec<usize>> = train_seqs
                    .iter()
                    .take_while(|s| {
                        let keep = (taken as f64) < want;
                        taken += s.len() - 1;
                        keep
                    })
                    .cloned()
                    .collect();
                (prefix, 1)
            };
            let tokens: usize = epochs * seqs.iter().map(|s| s.len() - 1).sum::<usize>();
            let fusion = FusionParams::init(fused.struct_raw.cols(), fused.sem_raw.cols(), d, a.gate_init, a.seed);
            let fused_d = FusedEmbeddings::<f32>::from_components(
                fused.struct_raw.clone(),
                fused.sem_raw.clone(),
                fusion,
                a.seed,
                fused.provider.clone(),
            )?;
            let model = init_model(&cfg, &fused_d, a.seed)?;
            let tc = TrainConfig {
                max_epochs: epochs,
                patience: usize::MAX,
                ..a.train.clone()
            };
            let (_, history) = train_model(model, &seqs, &val_seqs, vocab.pad_id(), &tc)?;
            let loss = history.best().map(|e| e.val_loss).unwrap_or(f64::NAN);
            let _ = writeln!(csv, "{budget},{d},{n},{tokens},{},{loss}", training_flops(n, tokens as f64));
            log::info!("budget {budget:e}: width {d}, {n} params, {tokens} tokens, val loss {loss:.4}");
            points.push(IsoflopPoint {
                flop_budget: budget,
                param_count: n,
                val_loss: loss,
            });
        }
    }
    let mut fits = Vec::new();
    let mut optima = Vec::new();
    for &budget in a.budgets {
        let group: Vec<IsoflopPoint> = points.iter().filter(|p| p.flop_budget == budget).cloned().collect();
        match fit_isoflop(&group) {
            Ok(f) => {
                optima.push((budget, f[0].argmin_params));
                fits.push(serde_json::to_value(&f[0])?);
            }
            Err(e) => fits.push(json!({ "flop_budget": budget, "error": e.to_string() })),
        }
    }
    let (c, n_opt): (Vec<f64>, Vec<f64>) = optima.iter().copied().unzip();
    let d_opt: Vec<f64> = optima.iter().map(|&(c, n)| c / (6.0 * n)).collect();
    let report = json!({
        "isoflop": fits,
        "params_vs_compute": or_reason(fit_power_law(&c, &n_opt)),
        "tokens_vs_compute": or_reason(fit_power_law(&c, &d_opt)),
    });
    write_atomic(&a.out.join("points.csv"), csv.as_bytes())?;
    write_json(&a.out.join("fits.json"), &report)?;
    m.output("points.csv", &a.out.join("points.csv"))
        .output("fits.json", &a.out.join("fits.json"));
    m.finish()?;
    Ok(())
}

pub struct GenerateArgs<'a> {
    pub model: &'a Path,
    pub vocab: &'a Path,
    pub seeds: &'a Path,
    pub n: usize,
    pub sampler: &'a SamplerConfig,
    pub out: &'a Path,
}

/// Sibling path `<stem>.<suffix>` of a stage's main output file.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

/// Writes complete records to `out`, every sampled token sequence to
/// `<stem>.sequences.jsonl` and the report to `<stem>.report.json`.
pub fn generate(a: &GenerateArgs<'_>) -> anyhow::Result<()> {
    let mut m = ManifestBuilder::new("generate", &manifest_for_file(a.out), a.sampler.seed, a.sampler)?;
    m.input("model", a.model)
        .input("vocab", a.vocab)
        .input("seeds", a.seeds)
        .arg("n", a.n);
    let vocab = read_vocab(a.vocab)?;
    let (model, _, _) = Model32::load(a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let seeds = read_corpus(a.seeds)?;
    let cohort = generate_cohort(&model, &seeds.records, &vocab, a.n, a.sampler)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    save_corpus(&Corpus::new("synthetic", cohort.records.clone()), a.out)?;
    let mut lines = String::new();
    for s in &cohort.sequences {
        lines.push_str(&serde_json::to_string(&json!({"ids": s.ids, "truncated": s.truncated}))?);
        lines.push('\n');
    }
    let (seq_path, report_path) = (sibling(a.out, "sequences.jsonl"), sibling(a.out, "report.json"));
    write_atomic(&seq_path, lines.as_bytes())?;
    write_json(&report_path, &cohort.report)?;
    m.output("records", a.out)
        .output("sequences", &seq_path)
        .output("report", &report_path);
    m.finish()?;
    let r = &cohort.report;
    log::info!(
        "generated {} records: {} complete, {} truncated, {} grammar violations",
        r.n_requested,
        r.n_complete,
        r.n_truncated,
        r.violations.len()
    );
    Ok(())
}

pub struct AuditArgs<'a> {
    pub input: &'a Path,
    pub vocab: &'a Path,
    pub out: &'a Path,
    pub report: &'a Path,
    pub threshold: u8,
    pub auditor: &'a AuditorConfig,
    /// Serve the bundled heuristic stub for this run.
    pub stub: bool,
    /// Real records scored as well, for the score comparison.
    pub compare: Option<(&'a Path, usize)>,
}

pub fn audit(a: &AuditArgs<'_>) -> anyhow::Result<()> {
    let mut m = ManifestBuilder::new("audit", &manifest_for_file(a.out), 0, &(a.threshold, a.stub, a.auditor))?;
    m.input("in", a.input).input("vocab", a.vocab).arg("threshold", a.threshold);
    let vocab = read_vocab(a.vocab)?;
    let records = read_corpus(a.input)?;
    let stub = if a.stub { Some(StubServer::heuristic()?) } else { None };
    let cfg = match &stub {
        Some(s) => AuditorConfig {
            base_url: s.base_url().to_string(),
            ..a.auditor.clone()
        },
        None => a.auditor.clone(),
    };
    let (kept, report) = audit_cohort(&records.records, &vocab, &cfg, a.threshold)?;
    let mut out = json!({ "audit": report });
    if let Some((path, n)) = a.compare {
        m.input("compare", path);
        let real = read_corpus(path)?;
        let sample: Vec<_> = real.records.into_iter().take(n).collect();
        let (_, real_report) = audit_cohort(&sample, &vocab, &cfg, a.threshold)?;
        let scores = |r: &ehrgen_audit::AuditReport| -> Vec<f64> {
            r.entries.iter().filter_map(|e| e.score).map(f64::from).collect()
        };
        let (syn_s, real_s) = (scores(&report), scores(&real_report));
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        out["comparison"] = json!({
            "synthetic_mean": mean(&syn_s),
            "real_mean": mean(&real_s),
            "n_synthetic": syn_s.len(),
            "n_real": real_s.len(),
            "cohens_d": or_reason(cohens_d(&syn_s, &real_s)),
            "rank_sum_p": or_reason(rank_sum_p(&syn_s, &real_s)),
        });
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    save_corpus(&Corpus::new("audited", kept), a.out)?;
    write_json(a.report, &out)?;
    m.output("out", a.out).output("report", a.report);
    m.finish()?;
    log::info!("audit kept {} of {} records", out["audit"]["n_kept"], records.len());
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub real: &'a Path,
    pub syn: &'a Path,
    pub vocab: &'a Path,
    /// Held-out real records for train-on-synthetic, test-on-real.
    pub test: Option<&'a Path>,
    /// Simulator spec whose rules are checked in both corpora.
    pub spec: Option<&'a Path>,
    pub cfg: &'a crate::config::EvaluateConfig,
    pub seed: u64,
    pub out: &'a Path,
}

fn ecdf_csv(a: &[f64], b: &[f64]) -> String {
    let mut xs: Vec<f64> = a.iter().chain(b).copied().collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let frac = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len().max(1) as f64;
    let mut out = String::from("value,real,synthetic\n");
    for x in xs {
        let _ = writeln!(out, "{x},{},{}", frac(a, x), frac(b, x));
    }
    out
}

fn matrix_csv(codes: &[String], m: &[Vec<f64>]) -> String {
    let mut out = String::from("code");
    for c in codes {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (c, row) in codes.iter().zip(m) {
        out.push_str(c);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn evaluate(a: &EvaluateArgs<'_>) -> anyhow::Result<Value> {
    mkdir(a.out)?;
    let mut m = ManifestBuilder::new("evaluate", &a.out.join(MANIFEST_FILE), a.seed, a.cfg)?;
    m.input("real", a.real).input("syn", a.syn).input("vocab", a.vocab);
    let vocab = read_vocab(a.vocab)?;
    let mut real = read_corpus(a.real)?;
    if let Some(max) = a.cfg.max_tokens {
        let n = real.len();
        real = filter_by_token_length(&real, &vocab, max)?;
        log::info!("{} of {n} real records fit in {max} tokens", real.len());
    }
    let syn = read_corpus(a.syn)?;
    if real.is_empty() || syn.is_empty() {
        bail!("both corpora must be non-empty");
    }
    let mut files: Vec<String> = Vec::new();
    let mut write = |name: &str, text: String| -> anyhow::Result<()> {
        write_atomic(&a.out.join(name), text.as_bytes())?;
        files.push(name.to_string());
        Ok(())
    };

    let mut fidelity = serde_json::Map::new();
    for (mode, key) in [
        (ProbMode::Unigram, "unigram"),
        (ProbMode::SameVisit, "same_visit"),
        (ProbMode::Sequential, "sequential"),
    ] {
        let (pr, ps) = (code_probs(&real, mode)?, code_probs(&syn, mode)?);
        if pr.probs.is_empty() || ps.probs.is_empty() {
            log::warn!("{key}: no pairs in one corpus");
            fidelity.insert(key.into(), json!({"error": "empty probability table"}));
            continue;
        }
        let (keys, x, y) = paired_probs(&pr, &ps);
        let mut csv = String::from("code_a,code_b,real,synthetic,mean,difference\n");
        for ((k, xr), ys) in keys.iter().zip(&x).zip(&y) {
            let _ = writeln!(csv, "{},{},{xr},{ys},{},{}", k.0, k.1, (xr + ys) / 2.0, ys - xr);
        }
        write(&format!("bland_altman_{key}.csv"), csv)?;
        fidelity.insert(
            key.into(),
            json!({
                "keys": keys.len(),
                "r2": or_reason(r2(&x, &y)),
                "bland_altman": or_reason(bland_altman(&x, &y)),
            }),
        );
    }

    let (sr, ss) = (record_shape(&real), record_shape(&syn));
    let mut shape = serde_json::Map::new();
    for (key, x, y) in [
        ("visits_per_record", &sr.visits_per_record, &ss.visits_per_record),
        ("events_per_visit", &sr.events_per_visit, &ss.events_per_visit),
        ("length_of_stay_days", &sr.los_days, &ss.los_days),
    ] {
        write(&format!("ecdf_{key}.csv"), ecdf_csv(x, y))?;
        shape.insert(
            key.into(),
            json!({
                "ks": or_reason(ks_stat(x, y)),
                "overlap": or_reason(overlap_coeff(x, y, a.cfg.histogram_bins)),
            }),
        );
    }

    let distinct = match top_diagnoses(&real, a.cfg.cooccur_top_k) {
        Err(evaluate::EvalError::TooFew { got, .. }) => {
            log::warn!("only {got} distinct diagnoses; co-occurrence uses all of them");
            got
        }
        _ => a.cfg.cooccur_top_k,
    };
    let cooccurrence = match top_diagnoses(&real, distinct) {
        Ok(codes) => {
            let (cr, cs) = (cooccur_matrix(&real, &codes), cooccur_matrix(&syn, &codes));
            write("cooccurrence_real.csv", matrix_csv(&codes, &cr))?;
            write("cooccurrence_synthetic.csv", matrix_csv(&codes, &cs))?;
            or_reason(matrix_corr(&cr, &cs))
        }
        Err(e) => json!({"error": e.to_string()}),
    };

    let mut report = json!({
        "n_real": real.len(),
        "n_synthetic": syn.len(),
        "fidelity": fidelity,
        "shape": shape,
        "cooccurrence": cooccurrence,
    });

    if let Some(spec_path) = a.spec {
        m.input("spec", spec_path);
        let spec = crate::config::read_spec(spec_path)?;
        let rules: Vec<Value> = spec
            .rules
            .iter()
            .flat_map(|r| r.implies.iter().map(move |i| (r, i)))
            .map(|(r, i)| {
                let (t, k) = (format!("DX_{}", r.trigger), ehrgen::corpus::concept_key(i.category, &i.code));
                json!({
                    "probability": i.probability,
                    "real": rule_preservation(&real, &t, &k),
                    "synthetic": rule_preservation(&syn, &t, &k),
                })
            })
            .collect();
        report["rules"] = Value::Array(rules);
    }

    if let (true, Some(test_path)) = (a.cfg.tstr, a.test) {
        m.input("test", test_path);
        let test = read_corpus(test_path)?;
        let mut tstr = serde_json::Map::new();
        for task in TstrTask::ALL {
            let name = serde_json::to_value(task)?.as_str().unwrap_or_default().to_string();
            tstr.insert(
                name,
                json!({
                    "synthetic": or_reason(tstr_eval(&syn, &test, task, a.seed)),
                    "real": or_reason(tstr_eval(&real, &test, task, a.seed)),
                }),
            );
        }
        report["tstr"] = Value::Object(tstr);
    }
    write_json(&a.out.join("metrics.json"), &report)?;
    files.push("metrics.json".into());
    for f in &files {
        m.output(f, &a.out.join(f));
    }
    m.finish()?;
    Ok(report)
}

pub struct AttackArgs<'a> {
    pub members: &'a Path,
    pub nonmembers: &'a Path,
    pub syn: &'a Path,
    pub attribute: SensitiveAttribute,
    pub k: usize,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn attack(a: &AttackArgs<'_>) -> anyhow::Result<Value> {
    let mut m = ManifestBuilder::new("attack", &manifest_for_file(a.out), a.seed, &(a.attribute, a.k))?;
    m.input("members", a.members)
        .input("nonmembers", a.nonmembers)
        .input("syn", a.syn)
        .arg("seed", a.seed);
    let (members, nonmembers, syn) = (read_corpus(a.members)?, read_corpus(a.nonmembers)?, read_corpus(a.syn)?);
    let report = json!({
        "mia": or_reason(mia_attack(&members, &nonmembers, &syn, a.seed)),
        "aia": {
            "attribute": a.attribute,
            "k": a.k,
            "real": or_reason(aia_attack(&members, a.attribute, a.k)),
            "synthetic": or_reason(aia_attack(&syn, a.attribute, a.k)),
        },
    });
    write_json(a.out, &report)?;
    m.output("report", a.out);
    m.finish()?;
    Ok(report)
}

/// Re-exported so the binary does not need the evaluate path.
pub type Attribute = evaluate::SensitiveAttribute;

/// Stage outputs of a full pipeline run, relative to its root.
pub fn pipeline_layout(root: &Path) -> BTreeMap<&'static str, PathBuf> {
    BTreeMap::from([
        ("data", root.join("data")),
        ("vocab", root.join("vocab").join("vocab.json")),
        ("knowledge", root.join("knowledge")),
        ("train", root.join("train")),
        ("scale", root.join("scale")),
        ("synthetic", root.join("generate").join("synthetic.jsonl")),
        ("audited", root.join("audit").join("audited.jsonl")),
        ("audit_report", root.join("audit").join("report.json")),
        ("evaluate", root.join("evaluate")),
        ("attack", root.join("attack").join("attack.json")),
    ])
}
