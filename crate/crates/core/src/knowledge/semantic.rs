//! Text-embedding providers for the semantic component.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{KnowledgeError, Result};

/// Width of the frozen text vectors.
pub const SEMANTIC_DIM: usize = 768;

pub trait SemanticProvider {
    /// Stable identifier recorded next to the fused embeddings.
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    /// Vector for a concept; `key` is the token name, `text` its description.
    fn embed(&self, key: &str, text: &str) -> Result<Vec<f64>>;
}

/// Seeds a normal draw from the SHA-256 of the text and scales it to unit norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashProvider {
    pub dim: usize,
}

impl Default for HashProvider {
    fn default() -> Self {
        Self { dim: SEMANTIC_DIM }
    }
}

impl SemanticProvider for HashProvider {
    fn id(&self) -> String {
        format!("sha256-normal-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _key: &str, text: &str) -> Result<Vec<f64>> {
        let digest = Sha256::digest(text.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Precomputed vectors keyed by token name, e.g. exported from a clinical
/// text encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileProvider {
    pub name: String,
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl FileProvider {
    /// Reads `{"name": .., "dim": .., "vectors": {token: [..]}}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| KnowledgeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let p: FileProvider = serde_json::from_str(&text)?;
        if let Some((k, v)) = p.vectors.iter().find(|(_, v)| v.len() != p.dim) {
            return Err(KnowledgeError::Shape(format!("vector for {k} has {} entries, expected {}", v.len(), p.dim)));
        }
        Ok(p)
    }
}

impl SemanticProvider for FileProvider {
    fn id(&self) -> String {
        format!("file:{}", self.name)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, key: &str, _text: &str) -> Result<Vec<f64>> {
        self.vectors.get(key).cloned().ok_or_else(|| KnowledgeError::MissingVector(key.to_string()))
    }
}

pub fn semantic_embed(key: &str, text: &str, provider: &dyn SemanticProvider) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Err(KnowledgeError::EmptyText(key.to_string()));
    }
    provider.embed(key, text)
}
