use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ehrgen::corpus::SimulatorSpec;
use ehrgen::evaluate::SensitiveAttribute;
use ehrgen_audit::AuditorConfig;
use ehrgen_cli::config::{read_spec, PipelineConfig};
use ehrgen_cli::pipeline::{run_pipeline, seeded};
use ehrgen_cli::stages;

#[derive(Parser)]
#[command(name = "ehrgen", version, about = "Synthetic health record simulation, generation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config (JSON); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        match &self.config {
            Some(p) => PipelineConfig::load(p),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a corpus and split it by patient.
    Simulate {
        /// Simulator spec (JSON); the built-in desk spec when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec's patient count.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the token vocabulary from a training corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed the knowledge graph and text descriptions of every token.
    EmbedKg {
        #[arg(long)]
        vocab: PathBuf,
        /// Graph directory; a toy graph from the simulator spec when absent.
        #[arg(long)]
        kg: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        semantic_vectors: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on `train.jsonl` and `val.jsonl` in a corpus directory.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep model widths at fixed compute budgets and fit scaling laws.
    ScaleStudy {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample synthetic records from a trained model.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus supplying demographic prompts.
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score records with the auditor and keep the realistic ones.
    Audit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u8).range(1..=10))]
        threshold: u8,
        /// Score with the bundled offline stub instead of a remote endpoint.
        #[arg(long)]
        stub: bool,
        /// Real records to score as well, for comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        compare_n: usize,
    },
    /// Compare a synthetic corpus with a real one.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        syn: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Held-out real records for train-on-synthetic, test-on-real.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Simulator spec whose rules are checked in both corpora.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Membership and attribute inference attacks.
    Attack {
        #[arg(long)]
        members: PathBuf,
        #[arg(long)]
        nonmembers: PathBuf,
        #[arg(long)]
        syn: PathBuf,
        /// sex, race or marital
        #[arg(long, default_value = "sex", value_parser = parse_attribute)]
        attribute: SensitiveAttribute,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from simulation to attacks.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Output root; the config's `paths.out` when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_attribute(s: &str) -> Result<SensitiveAttribute, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown attribute {s:?}"))
}

fn spec_or_desk(path: Option<&Path>, n: usize) -> anyhow::Result<SimulatorSpec> {
    match path {
        Some(p) => read_spec(p),
        None => Ok(SimulatorSpec::desk(n)),
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    let stage = match &command {
        Command::Simulate { .. } => "simulate",
        Command::BuildVocab { .. } => "build-vocab",
        Command::EmbedKg { .. } => "embed-kg",
        Command::Train { .. } => "train",
        Command::ScaleStudy { .. } => "scale-study",
        Command::Generate { .. } => "generate",
        Command::Audit { .. } => "audit",
        Command::Evaluate { .. } => "evaluate",
        Command::Attack { .. } => "attack",
        Command::Pipeline { .. } => "pipeline",
    };
    let result = dispatch(command);
    result.with_context(|| format!("{stage} failed"))
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Simulate { spec, n, seed, out } => {
            let mut s = spec_or_desk(spec.as_deref(), n.unwrap_or(2000))?;
            if let Some(n) = n {
                s.n_patients = n;
            }
            stages::simulate(&s, seed, PipelineConfig::default().simulate.split, &out)
        }
        Command::BuildVocab { corpus, out } => stages::build_vocabulary(&corpus, &out).map(|_| ()),
        Command::EmbedKg {
            vocab,
            kg,
            spec,
            semantic_vectors,
            config,
            seed,
            out,
        } => {
            let cfg = config.load()?;
            let seed = seed.unwrap_or(cfg.seed);
            let spec = spec_or_desk(spec.as_deref(), cfg.simulate.n_patients)?;
            let mut knowledge = cfg.knowledge.clone();
            knowledge.rgcn.seed = seed;
            stages::embed_kg(&stages::EmbedArgs {
                vocab: &vocab,
                kg: kg.as_deref().or(cfg.paths.kg.as_deref()),
                spec: &spec,
                semantic_vectors: semantic_vectors.as_deref().or(cfg.paths.semantic_vectors.as_deref()),
                semantic_dim: cfg.semantic_dim,
                knowledge: &knowledge,
                seed,
                out: &out,
            })
            .map(|_| ())
        }
        Command::Train {
            config,
            corpus,
            vocab,
            embeddings,
            out,
        } => {
            let cfg = seeded(&config.load()?);
            stages::train(&stages::TrainArgs {
                model: &cfg.model,
                train: &cfg.train,
                corpus_dir: &corpus,
                vocab: &vocab,
                embeddings: &embeddings,
                seed: cfg.seed,
                out: &out,
            })
        }
        Command::ScaleStudy {
            config,
            corpus,
            vocab,
            embeddings,
            out,
        } => {
            let cfg = seeded(&config.load()?);
            stages::scale_study(&stages::ScaleArgs {
                model: &cfg.model,
                train: &cfg.train,
                budgets: &cfg.scale_study.budgets,
                model_dims: &cfg.scale_study.model_dims,
                layers: cfg.scale_study.layers,
                gate_init: cfg.knowledge.gate_init,
                corpus_dir: &corpus,
                vocab: &vocab,
                embeddings: &embeddings,
                seed: cfg.seed,
                out: &out,
            })
        }
        Command::Generate {
            model,
            vocab,
            seeds,
            n,
            config,
            seed,
            out,
        } => {
            let cfg = config.load()?;
            let mut sampler = cfg.generate.sampler.clone();
            sampler.seed = seed.unwrap_or(cfg.seed);
            stages::generate(&stages::GenerateArgs {
                model: &model,
                vocab: &vocab,
                seeds: &seeds,
                n,
                sampler: &sampler,
                out: &out,
            })
        }
        Command::Audit {
            input,
            vocab,
            out,
            report,
            threshold,
            stub,
            compare,
            compare_n,
        } => {
            let auditor = AuditorConfig::default().with_env();
            if !stub {
                auditor.validate()?;
            }
            stages::audit(&stages::AuditArgs {
                input: &input,
                vocab: &vocab,
                out: &out,
                report: &report,
                threshold,
                auditor: &auditor,
                stub,
                compare: compare.as_deref().map(|p| (p, compare_n)),
            })
        }
        Command::Evaluate {
            real,
            syn,
            vocab,
            test,
            spec,
            config,
            seed,
            out,
        } => {
            let cfg = config.load()?;
            stages::evaluate(&stages::EvaluateArgs {
                real: &real,
                syn: &syn,
                vocab: &vocab,
                test: test.as_deref(),
                spec: spec.as_deref(),
                cfg: &cfg.evaluate,
                seed,
                out: &out,
            })
            .map(|_| ())
        }
        Command::Attack {
            members,
            nonmembers,
            syn,
            attribute,
            k,
            seed,
            out,
        } => stages::attack(&stages::AttackArgs {
            members: &members,
            nonmembers: &nonmembers,
            syn: &syn,
            attribute,
            k,
            seed,
            out: &out,
        })
        .map(|_| ()),
        Command::Pipeline { config, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.paths.out.clone());
            run_pipeline(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
