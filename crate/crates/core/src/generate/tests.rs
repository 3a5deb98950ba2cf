use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{simulate_corpus, Corpus, SimulatorSpec};
use crate::engine::Tensor;
use crate::knowledge::FusedEmbeddings;
use crate::model::{init_model, names, Model64, ModelConfig};
use crate::vocab::build_vocab;

struct Fixture {
    vocab: Vocabulary,
    seeds: Vec<Record>,
}

fn fixture() -> Fixture {
    let corpus = simulate_corpus(&SimulatorSpec::desk(80), 23).unwrap();
    let vocab = build_vocab(&Corpus::new("train", corpus.records[..60].to_vec())).unwrap();
    Fixture {
        vocab,
        seeds: corpus.records[60..].to_vec(),
    }
}

fn model(v: usize, dim: usize, factor: usize, ctx: usize, seed: u64) -> Model64 {
    let cfg = ModelConfig {
        vocab_size: v,
        factor_dim: factor,
        model_dim: dim,
        ffn_hidden: 2 * dim,
        layers: 1,
        heads: 2,
        kv_heads: 1,
        context_len: ctx,
        dropout: 0.0,
        struct_dim: 4,
        sem_dim: 4,
        rope_base: 10_000.0,
    };
    let fused = FusedEmbeddings::random(v, 4, 4, dim, seed).unwrap();
    init_model(&cfg, &fused, seed).unwrap()
}

fn prefix(v: &Vocabulary, seed: &Record) -> Vec<usize> {
    let mut p = vec![v.start_record_id()];
    p.extend(v.demographic_ids(seed.age_years, seed.sex, seed.race, seed.marital, seed.year));
    p
}

fn allowed_kinds(mask: &[bool], v: &Vocabulary) -> std::collections::BTreeSet<String> {
    mask.iter()
        .enumerate()
        .filter(|(_, &a)| a)
        .map(|(i, _)| format!("{:?}", v.kind(i)))
        .collect()
}

#[test]
fn mask_after_lab_test_is_exactly_the_quantiles() {
    let fx = fixture();
    let v = &fx.vocab;
    let lab = v.ids_of_kind(TokenKind::LabTest).next().unwrap();
    let mut ctx = prefix(v, &fx.seeds[0]);
    ctx.extend([v.start_visit_id(), lab]);
    let mask = transition_mask(&ctx, v).unwrap();
    let allowed: Vec<usize> = (0..v.len()).filter(|&i| mask[i]).collect();
    assert_eq!(allowed, v.quantile_ids().collect::<Vec<_>>());
    assert_eq!(allowed.len(), 10);
}

#[test]
fn mask_inside_a_visit() {
    let fx = fixture();
    let v = &fx.vocab;
    let dx = v.ids_of_kind(TokenKind::Diagnosis).next().unwrap();
    let mut ctx = prefix(v, &fx.seeds[0]);
    ctx.extend([v.start_visit_id(), dx]);
    let mask = transition_mask(&ctx, v).unwrap();
    assert!(v.quantile_ids().all(|q| !mask[q]));
    assert!(!mask[v.pad_id()]);
    assert!(!mask[v.start_record_id()]);
    assert!(mask[v.end_visit_id()]);
    assert!(!mask[v.death_id()]);
    assert!(!mask[v.end_record_id()]);
    assert!(!mask[v.start_visit_id()]);
    for k in ["Age", "Sex", "Race", "Marital", "Year"] {
        assert!(!allowed_kinds(&mask, v).contains(k));
    }
    for k in ["Diagnosis", "Procedure", "Medication", "LabTest", "TimeGap", "EndVisit"] {
        assert!(allowed_kinds(&mask, v).contains(k), "{k}");
    }
}

#[test]
fn mask_between_visits() {
    let fx = fixture();
    let v = &fx.vocab;
    let mut ctx = prefix(v, &fx.seeds[0]);
    let right_after_prefix = transition_mask(&ctx, v).unwrap();
    assert!(!right_after_prefix[v.death_id()], "no visit yet");
    assert!(!right_after_prefix[v.end_visit_id()]);
    assert!(right_after_prefix[v.end_record_id()]);
    ctx.extend([v.start_visit_id(), v.end_visit_id()]);
    let closed = transition_mask(&ctx, v).unwrap();
    assert!(closed[v.death_id()]);
    assert!(closed[v.start_visit_id()]);
    assert!(!closed[v.end_visit_id()]);
    assert!(!closed[v.pad_id()]);
    assert!(v.quantile_ids().all(|q| !closed[q]));
}

#[test]
fn mask_rejects_invalid_or_finished_prefixes() {
    let fx = fixture();
    let v = &fx.vocab;
    let dx = v.ids_of_kind(TokenKind::Diagnosis).next().unwrap();
    let mut ctx = prefix(v, &fx.seeds[0]);
    ctx.push(dx);
    assert!(matches!(
        transition_mask(&ctx, v),
        Err(GenerateError::InvalidPrefix { index: 6, .. })
    ));
    let mut done = prefix(v, &fx.seeds[0]);
    done.push(v.end_record_id());
    assert!(transition_mask(&done, v).is_err());
    assert!(transition_mask(&[v.pad_id()], v).is_err());
}

#[test]
fn rigged_model_emits_minimal_record() {
    let fx = fixture();
    let v = &fx.vocab;
    let d = 8;
    let mut m = model(v.len(), d, d, 64, 1);
    let p = &mut m.params;
    for l in 0..m.cfg.layers {
        for part in ["wo", "w_down"] {
            p.get_mut(&names::block(l, part)).data_mut().fill(0.0);
        }
    }
    p.get_mut(names::ALPHA_H).data_mut().fill(0.0);
    p.get_mut(names::ALPHA_S).data_mut().fill(0.0);
    *p.get_mut(names::TOK_PROJ) = Tensor::identity(d);
    *p.get_mut(names::OUT_PROJ) = Tensor::identity(d);
    let factors = p.get_mut(names::TOK_FACTORS);
    factors.data_mut().fill(0.0);
    for r in 0..v.len() {
        factors.data_mut()[r * d] = if r == v.end_record_id() { 50.0 } else { 1.0 };
    }
    let demo = v.demographic_ids(40, fx.seeds[0].sex, fx.seeds[0].race, fx.seeds[0].marital, fx.seeds[0].year);
    let seq = generate_record(&m, &demo, v, &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(!seq.truncated);
    assert_eq!(seq.ids.len(), 7);
    assert_eq!(seq.ids[0], v.start_record_id());
    assert_eq!(&seq.ids[1..6], &demo);
    assert_eq!(seq.ids[6], v.end_record_id());
}

#[test]
fn every_step_draws_from_the_allowed_nucleus() {
    let fx = fixture();
    let v = &fx.vocab;
    let m = model(v.len(), 16, 8, 400, 2);
    let cfg = SamplerConfig {
        top_p: 0.9,
        max_tokens: 400,
        ..SamplerConfig::default()
    };
    let mut steps = 0;
    for s in 0..5 {
        let seed = &fx.seeds[s];
        let demo = v.demographic_ids(seed.age_years, seed.sex, seed.race, seed.marital, seed.year);
        let mut ctx: Vec<usize> = prefix(v, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
        let seq = generate_record_observed(&m, &demo, v, &cfg, &mut rng, &mut |nu, chosen| {
            let mask = transition_mask(&ctx, v).unwrap();
            assert!(nu.contains(chosen));
            assert!(nu.tokens.iter().all(|&t| mask[t]));
            assert!((nu.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            ctx.push(chosen);
            steps += 1;
        })
        .unwrap();
        assert_eq!(seq.ids, ctx);
    }
    assert!(steps > 50);
}

#[test]
fn untrained_cohort_is_grammatical_and_reported() {
    let fx = fixture();
    let v = &fx.vocab;
    let m = model(v.len(), 16, 8, 256, 3);
    let cfg = SamplerConfig {
        seed: 11,
        max_tokens: 256,
        ..SamplerConfig::default()
    };
    let n = 60;
    let c = generate_cohort(&m, &fx.seeds, v, n, &cfg).unwrap();
    let r = &c.report;
    assert_eq!(r.n_requested, n);
    assert_eq!(r.n_complete + r.n_truncated, n);
    assert!(r.violations.is_empty(), "{:?}", r.violations.first());
    assert_eq!(c.records.len(), r.n_complete);
    assert_eq!(c.sequences.len(), n);
    assert_eq!(r.token_counts, c.sequences.iter().map(|s| s.len()).collect::<Vec<_>>());
    assert!(r.token_counts.iter().all(|&t| t <= 256));
    for (i, s) in c.sequences.iter().enumerate() {
        assert_eq!(&s.ids[..6], prefix(v, seed_for(i, &fx.seeds, cfg.seed)).as_slice());
        assert_eq!(s.truncated, s.len() == 256 && validate_sequence(&s.ids, v).len() > 0);
    }
    for rec in &c.records {
        rec.validate().unwrap();
        let i: usize = rec.patient_id.trim_start_matches("synthetic_").parse().unwrap();
        let seed = seed_for(i, &fx.seeds, cfg.seed);
        assert_eq!(
            (rec.age_years, rec.sex, rec.race, rec.marital, rec.year),
            (seed.age_years, seed.sex, seed.race, seed.marital, seed.year)
        );
    }
}

#[test]
fn cohort_is_deterministic_for_any_worker_count() {
    let fx = fixture();
    let v = &fx.vocab;
    let m = model(v.len(), 16, 8, 128, 4);
    let mut cfg = SamplerConfig {
        seed: 5,
        max_tokens: 128,
        ..SamplerConfig::default()
    };
    let n = 45;
    let a = generate_cohort(&m, &fx.seeds, v, n, &cfg).unwrap();
    cfg.workers = 4;
    let b = generate_cohort(&m, &fx.seeds, v, n, &cfg).unwrap();
    assert_eq!(a.sequences, b.sequences);
    assert_eq!(a.records, b.records);
    assert_eq!(a.report, b.report);
    cfg.seed = 6;
    let c = generate_cohort(&m, &fx.seeds, v, n, &cfg).unwrap();
    assert_ne!(a.sequences, c.sequences);
}

#[test]
fn short_budget_truncates_and_drops() {
    let fx = fixture();
    let v = &fx.vocab;
    let m = model(v.len(), 16, 8, 128, 5);
    let cfg = SamplerConfig {
        max_tokens: 9,
        ..SamplerConfig::default()
    };
    let c = generate_cohort(&m, &fx.seeds, v, 20, &cfg).unwrap();
    assert!(c.report.n_truncated > 0);
    assert_eq!(c.records.len(), c.report.n_complete);
    assert!(c.sequences.iter().all(|s| s.len() <= 9));
    assert!(c.report.violations.is_empty());
}

#[test]
fn mismatched_vocabulary_is_rejected() {
    let fx = fixture();
    let m = model(fx.vocab.len() + 1, 8, 4, 32, 6);
    assert!(matches!(
        generate_cohort(&m, &fx.seeds, &fx.vocab, 1, &SamplerConfig::default()),
        Err(GenerateError::VocabMismatch { .. })
    ));
    let ok = model(fx.vocab.len(), 8, 4, 32, 6);
    assert!(matches!(
        generate_cohort(&ok, &[], &fx.vocab, 1, &SamplerConfig::default()),
        Err(GenerateError::NoSeeds)
    ));
}
