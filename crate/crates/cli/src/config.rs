//! JSON pipeline configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ehrgen::corpus::SimulatorSpec;
use ehrgen::generate::SamplerConfig;
use ehrgen::knowledge::KnowledgeConfig;
use ehrgen::model::ModelConfig;
use ehrgen::train::TrainConfig;
use ehrgen_audit::AuditorConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root of the pipeline outputs.
    pub out: PathBuf,
    /// Simulator spec; the built-in desk spec when absent.
    pub simulator_spec: Option<PathBuf>,
    /// Knowledge graph directory; a toy graph derived from the simulator
    /// spec when absent.
    pub kg: Option<PathBuf>,
    /// Precomputed text vectors; hashed text vectors when absent.
    pub semantic_vectors: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/desk"),
            simulator_spec: None,
            kg: None,
            semantic_vectors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_patients: usize,
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            split: (0.8, 0.1, 0.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n: usize,
    pub sampler: SamplerConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditStageConfig {
    pub enabled: bool,
    /// Serve the bundled heuristic stub instead of calling `auditor.base_url`.
    pub stub: bool,
    pub threshold: u8,
    /// Real records also audited, for the score comparison.
    pub compare_real: usize,
    pub auditor: AuditorConfig,
}

impl Default for AuditStageConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            stub: true,
            threshold: 7,
            compare_real: 200,
            auditor: AuditorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub cooccur_top_k: usize,
    pub histogram_bins: usize,
    pub tstr: bool,
    pub privacy: bool,
    pub aia_k: usize,
    /// Real records whose encoding exceeds this many tokens are left out, to
    /// match a generator capped at its context length.
    pub max_tokens: Option<usize>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            cooccur_top_k: 150,
            histogram_bins: 20,
            tstr: true,
            privacy: true,
            aia_k: 5,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleStudyConfig {
    pub enabled: bool,
    /// Nominal compute budgets, in FLOPs.
    pub budgets: Vec<f64>,
    /// Model widths swept per budget; other shape fields follow `model`.
    pub model_dims: Vec<usize>,
    pub layers: usize,
}

impl Default for ScaleStudyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            budgets: vec![3e10, 1e11, 3e11],
            model_dims: vec![16, 32, 64, 128],
            layers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub simulate: SimulateConfig,
    pub knowledge: KnowledgeConfig,
    /// Width of hashed text vectors when no vector file is given.
    pub semantic_dim: usize,
    /// `vocab_size`, `struct_dim` and `sem_dim` are filled in at run time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub audit: AuditStageConfig,
    pub evaluate: EvaluateConfig,
    pub scale_study: ScaleStudyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            simulate: SimulateConfig::default(),
            knowledge: KnowledgeConfig::default(),
            semantic_dim: 768,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
            audit: AuditStageConfig::default(),
            evaluate: EvaluateConfig::default(),
            scale_study: ScaleStudyConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative paths inside the config resolve against its directory
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.paths.simulator_spec, &mut cfg.paths.kg, &mut cfg.paths.semantic_vectors]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        cfg.audit.auditor = cfg.audit.auditor.with_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.knowledge.model_dim != self.model.model_dim {
            bail!(
                "knowledge.model_dim {} differs from model.model_dim {}",
                self.knowledge.model_dim,
                self.model.model_dim
            );
        }
        self.train.validate()?;
        self.generate.sampler.validate()?;
        if self.audit.enabled && !self.audit.stub {
            self.audit.auditor.validate()?;
        }
        Ok(())
    }

    pub fn simulator_spec(&self) -> anyhow::Result<SimulatorSpec> {
        let mut spec = match &self.paths.simulator_spec {
            Some(p) => read_spec(p)?,
            None => SimulatorSpec::desk(self.simulate.n_patients),
        };
        spec.n_patients = self.simulate.n_patients;
        Ok(spec)
    }
}

pub fn read_spec(path: &Path) -> anyhow::Result<SimulatorSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
    let spec: SimulatorSpec = serde_json::from_str(&text).with_context(|| format!("parsing spec {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}
