//! The `pipeline` command: every stage in order under one output root.

use std::path::Path;

use anyhow::Context;

use crate::config::PipelineConfig;
use crate::manifest::{ManifestBuilder, MANIFEST_FILE};
use crate::stages::{self, pipeline_layout, EMBEDDINGS_FILE, SPEC_FILE, TEST_FILE, TRAIN_FILE};

/// Runs `f`, naming the stage in any error.
fn stage<T>(name: &str, f: impl FnOnce() -> anyhow::Result<T>) -> anyhow::Result<T> {
    log::info!("stage {name}");
    f().with_context(|| format!("stage {name} failed"))
}

/// The global seed replaces every per-stage seed, so one number fixes the
/// whole run.
pub fn seeded(cfg: &PipelineConfig) -> PipelineConfig {
    let mut c = cfg.clone();
    c.knowledge.rgcn.seed = cfg.seed;
    c.train.seed = cfg.seed;
    c.generate.sampler.seed = cfg.seed;
    c
}

pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let cfg = seeded(cfg);
    let seed = cfg.seed;
    let paths = pipeline_layout(out);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut m = ManifestBuilder::new("pipeline", &out.join(MANIFEST_FILE), seed, &cfg)?;
    let data = &paths["data"];
    let spec = stage("simulate", || {
        let spec = cfg.simulator_spec()?;
        stages::simulate(&spec, seed, cfg.simulate.split, data)?;
        Ok(spec)
    })?;
    let vocab = &paths["vocab"];
    stage("build-vocab", || stages::build_vocabulary(&data.join(TRAIN_FILE), vocab))?;
    let knowledge = &paths["knowledge"];
    stage("embed-kg", || {
        stages::embed_kg(&stages::EmbedArgs {
            vocab,
            kg: cfg.paths.kg.as_deref(),
            spec: &spec,
            semantic_vectors: cfg.paths.semantic_vectors.as_deref(),
            semantic_dim: cfg.semantic_dim,
            knowledge: &cfg.knowledge,
            seed,
            out: knowledge,
        })
    })?;
    let embeddings = knowledge.join(EMBEDDINGS_FILE);
    let train_dir = &paths["train"];
    stage("train", || {
        stages::train(&stages::TrainArgs {
            model: &cfg.model,
            train: &cfg.train,
            corpus_dir: data,
            vocab,
            embeddings: &embeddings,
            seed,
            out: train_dir,
        })
    })?;
    if cfg.scale_study.enabled {
        stage("scale-study", || {
            stages::scale_study(&stages::ScaleArgs {
                model: &cfg.model,
                train: &cfg.train,
                budgets: &cfg.scale_study.budgets,
                model_dims: &cfg.scale_study.model_dims,
                layers: cfg.scale_study.layers,
                gate_init: cfg.knowledge.gate_init,
                corpus_dir: data,
                vocab,
                embeddings: &embeddings,
                seed,
                out: &paths["scale"],
            })
        })?;
        m.output("scale", &paths["scale"]);
    }
    let synthetic = &paths["synthetic"];
    stage("generate", || {
        stages::generate(&stages::GenerateArgs {
            model: &train_dir.join(stages::CHECKPOINT_FILE),
            vocab,
            seeds: &data.join(TRAIN_FILE),
            n: cfg.generate.n,
            sampler: &cfg.generate.sampler,
            out: synthetic,
        })
    })?;
    if cfg.audit.enabled {
        let test = data.join(TEST_FILE);
        stage("audit", || {
            stages::audit(&stages::AuditArgs {
                input: synthetic,
                vocab,
                out: &paths["audited"],
                report: &paths["audit_report"],
                threshold: cfg.audit.threshold,
                auditor: &cfg.audit.auditor,
                stub: cfg.audit.stub,
                compare: (cfg.audit.compare_real > 0).then_some((test.as_path(), cfg.audit.compare_real)),
            })
        })?;
        m.output("audited", &paths["audited"]).output("audit_report", &paths["audit_report"]);
    }
    stage("evaluate", || {
        stages::evaluate(&stages::EvaluateArgs {
            real: &data.join(TRAIN_FILE),
            syn: synthetic,
            vocab,
            test: Some(&data.join(TEST_FILE)),
            spec: Some(&data.join(SPEC_FILE)),
            cfg: &cfg.evaluate,
            seed,
            out: &paths["evaluate"],
        })
    })?;
    if cfg.evaluate.privacy {
        stage("attack", || {
            stages::attack(&stages::AttackArgs {
                members: &data.join(TRAIN_FILE),
                nonmembers: &data.join(TEST_FILE),
                syn: synthetic,
                attribute: ehrgen::evaluate::SensitiveAttribute::Sex,
                k: cfg.evaluate.aia_k,
                seed,
                out: &paths["attack"],
            })
        })?;
        m.output("attack", &paths["attack"]);
    }
    for key in ["data", "vocab", "knowledge", "train", "synthetic", "evaluate"] {
        m.output(key, &paths[key]);
    }
    m.finish()?;
    Ok(())
}
