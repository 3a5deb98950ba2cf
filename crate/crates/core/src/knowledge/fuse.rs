//! Gated fusion of the structural and semantic components.
//!
//! `z = α_h · RMSNorm(s·W_struct) ⊙ g_h + α_s · RMSNorm(e·W_sem) ⊙ g_s`,
//! with bias-free projections so an all-zero structural row contributes
//! exactly zero.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::rgcn::{struct_embed, train_rgcn, RelationAdjacency, RgcnConfig};
use super::semantic::{HashProvider, SemanticProvider};
use super::{KgBundle, KnowledgeError, Result};
use crate::engine::{Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::tensorfile;
use crate::vocab::Vocabulary;

/// Epsilon inside every RMSNorm.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    /// `[d^(L), D]`.
    pub w_struct: Tensor<T>,
    /// `[768, D]`.
    pub w_sem: Tensor<T>,
    pub norm_struct: Tensor<T>,
    pub norm_sem: Tensor<T>,
    pub alpha_h: T,
    pub alpha_s: T,
}

impl<T: Scalar> FusionParams<T> {
    pub fn init(struct_dim: usize, sem_dim: usize, model_dim: usize, gate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        Self {
            w_struct: Tensor::randn(&[struct_dim, model_dim], 0.02, &mut rng),
            w_sem: Tensor::randn(&[sem_dim, model_dim], 0.02, &mut rng),
            norm_struct: Tensor::filled(&[model_dim], T::one()),
            norm_sem: Tensor::filled(&[model_dim], T::one()),
            alpha_h: T::from_f64_lossy(gate),
            alpha_s: T::from_f64_lossy(gate),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_struct.cols()
    }
}

/// Knowledge term for a block of rows, recorded on `g`. `gates` holds the
/// two one-element gate tensors.
#[allow(clippy::too_many_arguments)]
pub fn knowledge_rows<T: Scalar>(
    g: &Graph<T>,
    struct_rows: Var,
    sem_rows: Var,
    w_struct: Var,
    w_sem: Var,
    norm_struct: Var,
    norm_sem: Var,
    gates: (Var, Var),
) -> crate::engine::Result<Var> {
    let h = g.mul_row(g.rms_norm(g.matmul(struct_rows, w_struct)?, NORM_EPS)?, norm_struct)?;
    let s = g.mul_row(g.rms_norm(g.matmul(sem_rows, w_sem)?, NORM_EPS)?, norm_sem)?;
    g.add(g.mul_scalar(h, gates.0)?, g.mul_scalar(s, gates.1)?)
}

fn fuse_rows<T: Scalar>(struct_raw: &Tensor<T>, sem_raw: &Tensor<T>, p: &FusionParams<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let c = |t: &Tensor<T>| g.constant(t.clone());
    let out = knowledge_rows(
        &g,
        c(struct_raw),
        c(sem_raw),
        c(&p.w_struct),
        c(&p.w_sem),
        c(&p.norm_struct),
        c(&p.norm_sem),
        (c(&Tensor::scalar(p.alpha_h)), c(&Tensor::scalar(p.alpha_s))),
    )?;
    let z = g.value(out).clone();
    Ok(z)
}

/// Fused vector for one token.
pub fn fuse<T: Scalar>(struct_vec: &[T], sem_vec: &[T], p: &FusionParams<T>) -> Result<Vec<T>> {
    if struct_vec.len() != p.w_struct.rows() || sem_vec.len() != p.w_sem.rows() {
        return Err(KnowledgeError::Shape(format!(
            "inputs of width {}/{} for projections expecting {}/{}",
            struct_vec.len(),
            sem_vec.len(),
            p.w_struct.rows(),
            p.w_sem.rows()
        )));
    }
    let s = Tensor::new(vec![1, struct_vec.len()], struct_vec.to_vec())?;
    let e = Tensor::new(vec![1, sem_vec.len()], sem_vec.to_vec())?;
    Ok(fuse_rows(&s, &e, p)?.into_data())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnowledgeConfig {
    pub rgcn: RgcnConfig,
    pub model_dim: usize,
    /// Neighborhood radius around anchor nodes used to induce the subgraph.
    pub k_hop: usize,
    /// Initial value of both fusion gates.
    pub gate_init: f64,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self {
            rgcn: RgcnConfig::default(),
            model_dim: 384,
            k_hop: 1,
            gate_init: 1.0,
        }
    }
}

/// Frozen per-token components, the initial fusion parameters and the
/// resulting fused matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbeddings<T> {
    pub z: Tensor<T>,
    pub struct_raw: Tensor<T>,
    pub sem_raw: Tensor<T>,
    pub fusion: FusionParams<T>,
    pub has_anchor: Vec<bool>,
    pub seed: u64,
    pub provider: String,
}

impl<T: Scalar> FusedEmbeddings<T> {
    /// Assembles the frozen components and computes `z`; `has_anchor`
    /// marks the non-zero structural rows.
    pub fn from_components(
        struct_raw: Tensor<T>,
        sem_raw: Tensor<T>,
        fusion: FusionParams<T>,
        seed: u64,
        provider: String,
    ) -> Result<Self> {
        if struct_raw.rows() != sem_raw.rows() {
            return Err(KnowledgeError::Shape(format!(
                "{} structural rows against {} semantic rows",
                struct_raw.rows(),
                sem_raw.rows()
            )));
        }
        let z = fuse_rows(&struct_raw, &sem_raw, &fusion)?;
        let has_anchor = (0..struct_raw.rows()).map(|i| struct_raw.row(i).iter().any(|&x| x != T::zero())).collect();
        Ok(Self {
            z,
            struct_raw,
            sem_raw,
            fusion,
            has_anchor,
            seed,
            provider,
        })
    }

    /// Random stand-in components: normal structural rows with every third
    /// token left unanchored, and unit-norm semantic rows.
    pub fn random(vocab_size: usize, struct_dim: usize, sem_dim: usize, model_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut struct_raw = Tensor::<T>::randn(&[vocab_size, struct_dim], 1.0, &mut rng);
        for row in (0..vocab_size).step_by(3) {
            struct_raw.data_mut()[row * struct_dim..(row + 1) * struct_dim].fill(T::zero());
        }
        let mut sem_raw = Tensor::<T>::randn(&[vocab_size, sem_dim], 1.0, &mut rng);
        for row in sem_raw.data_mut().chunks_mut(sem_dim) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        let fusion = FusionParams::init(struct_dim, sem_dim, model_dim, 1.0, seed);
        Self::from_components(struct_raw, sem_raw, fusion, seed, "random".into())
    }

    pub fn vocab_size(&self) -> usize {
        self.z.rows()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = json!({
            "vocab_size": self.vocab_size(),
            "model_dim": self.fusion.model_dim(),
            "struct_dim": self.struct_raw.cols(),
            "sem_dim": self.sem_raw.cols(),
            "seed": self.seed,
            "provider": self.provider,
            "has_anchor": self.has_anchor,
        });
        let gates = Tensor::new(vec![2], vec![self.fusion.alpha_h, self.fusion.alpha_s])?;
        tensorfile::save_tensors(
            path,
            &meta,
            &[
                ("z", &self.z),
                ("struct_raw", &self.struct_raw),
                ("sem_raw", &self.sem_raw),
                ("w_struct", &self.fusion.w_struct),
                ("w_sem", &self.fusion.w_sem),
                ("norm_struct", &self.fusion.norm_struct),
                ("norm_sem", &self.fusion.norm_sem),
                ("gates", &gates),
            ],
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let b = tensorfile::load_tensors::<T>(path)?;
        let get = |n: &str| {
            b.get(n).cloned().ok_or_else(|| KnowledgeError::Shape(format!("embedding file lacks tensor {n}")))
        };
        let gates = get("gates")?;
        let has_anchor: Vec<bool> = serde_json::from_value(b.meta["has_anchor"].clone())?;
        Ok(Self {
            z: get("z")?,
            struct_raw: get("struct_raw")?,
            sem_raw: get("sem_raw")?,
            fusion: FusionParams {
                w_struct: get("w_struct")?,
                w_sem: get("w_sem")?,
                norm_struct: get("norm_struct")?,
                norm_sem: get("norm_sem")?,
                alpha_h: gates.data()[0],
                alpha_s: gates.data()[1],
            },
            has_anchor,
            seed: b.meta["seed"].as_u64().unwrap_or(0),
            provider: b.meta["provider"].as_str().unwrap_or("").to_string(),
        })
    }
}

/// Runs the graph network on the anchor neighborhood, pools anchors, embeds
/// descriptions and fuses. Tokens without a description (structure, gap,
/// quantile and demographic tokens) embed their own name with the hash
/// provider.
pub fn build_fused_embeddings<T: Scalar>(
    vocab: &Vocabulary,
    kg: &KgBundle,
    cfg: &KnowledgeConfig,
    provider: &dyn SemanticProvider,
    seed: u64,
) -> Result<FusedEmbeddings<T>> {
    let struct_dim = *cfg.rgcn.dims.last().ok_or_else(|| KnowledgeError::Shape("no layer widths".into()))?;
    let v = vocab.len();
    let anchors: Vec<Vec<usize>> = vocab.tokens().iter().map(|t| kg.anchor_ids(&t.name)).collect();
    let has_anchor: Vec<bool> = anchors.iter().map(|a| !a.is_empty()).collect();

    let mut struct_raw = Tensor::<T>::zeros(&[v, struct_dim]);
    let seeds: Vec<usize> = {
        let mut s: Vec<usize> = anchors.iter().flatten().copied().collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    if !seeds.is_empty() {
        let sub = kg.graph.k_hop(&seeds, cfg.k_hop);
        let rcfg = RgcnConfig {
            seed,
            ..cfg.rgcn.clone()
        };
        let (params, _) = train_rgcn::<T>(&sub, &rcfg)?;
        let emb = params.node_embeddings(&RelationAdjacency::new(&sub))?;
        for (row, a) in anchors.iter().enumerate() {
            if a.is_empty() {
                continue;
            }
            let local: Vec<usize> = a
                .iter()
                .map(|&i| sub.node_id(&kg.graph.nodes()[i]).expect("anchors seed the subgraph"))
                .collect();
            let pooled = struct_embed(&local, &emb);
            struct_raw.data_mut()[row * struct_dim..(row + 1) * struct_dim].copy_from_slice(&pooled);
        }
    }

    let fallback = HashProvider { dim: provider.dim() };
    let mut sem = Vec::with_capacity(v * provider.dim());
    for t in vocab.tokens() {
        let vec = match kg.descriptions.get(&t.name) {
            Some(text) => super::semantic_embed(&t.name, text, provider)?,
            None => fallback.embed(&t.name, &t.name)?,
        };
        if vec.len() != provider.dim() {
            return Err(KnowledgeError::Shape(format!("{}: vector width {}", t.name, vec.len())));
        }
        sem.extend(vec.into_iter().map(T::from_f64_lossy));
    }
    let sem_raw = Tensor::new(vec![v, provider.dim()], sem)?;

    let fusion = FusionParams::init(struct_dim, provider.dim(), cfg.model_dim, cfg.gate_init, seed);
    let z = fuse_rows(&struct_raw, &sem_raw, &fusion)?;
    Ok(FusedEmbeddings {
        z,
        struct_raw,
        sem_raw,
        fusion,
        has_anchor,
        seed,
        provider: provider.id(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{simulate_corpus, SimulatorSpec};
    use crate::knowledge::{toy_kg_from_spec, Activation, KnowledgeGraph};
    use crate::vocab::build_vocab;

    fn hand_rms(x: &[f64]) -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        x.iter().map(|v| v / (ms + NORM_EPS).sqrt()).collect()
    }

    fn hand_project(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
        (0..w.cols()).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.row(i)[j]).sum()).collect()
    }

    fn tiny_params() -> FusionParams<f64> {
        let mut p = FusionParams::init(3, 5, 4, 1.0, 11);
        p.alpha_h = 0.7;
        p.alpha_s = -1.3;
        p.norm_struct = Tensor::from_f64(&[4], &[1.0, 2.0, 0.5, -1.0]).unwrap();
        p
    }

    #[test]
    fn fuse_matches_hand_computation() {
        let p = tiny_params();
        let s = [0.3, -0.2, 1.5];
        let e = [0.1, 0.4, -0.9, 0.0, 2.0];
        let z = fuse(&s, &e, &p).unwrap();
        let hs = hand_rms(&hand_project(&s, &p.w_struct));
        let he = hand_rms(&hand_project(&e, &p.w_sem));
        for j in 0..4 {
            let want = 0.7 * hs[j] * p.norm_struct.data()[j] - 1.3 * he[j];
            assert!((z[j] - want).abs() < 1e-12, "{j}");
        }
    }

    #[test]
    fn zero_struct_leaves_only_semantic_term() {
        let p = tiny_params();
        let e = [0.1, 0.4, -0.9, 0.0, 2.0];
        let z = fuse(&[0.0; 3], &e, &p).unwrap();
        let only_sem = {
            let mut q = p.clone();
            q.alpha_h = 0.0;
            fuse(&[5.0, 5.0, 5.0], &e, &q).unwrap()
        };
        assert_eq!(z, only_sem);
        let mut off = p.clone();
        off.alpha_h = 0.0;
        off.alpha_s = 0.0;
        assert!(fuse(&[1.0, 2.0, 3.0], &e, &off).unwrap().iter().all(|&x| x == 0.0));
        assert!(fuse(&[1.0, 2.0], &e, &p).is_err());
    }

    fn desk_inputs() -> (Vocabulary, KgBundle, KnowledgeConfig) {
        let spec = SimulatorSpec::desk(200);
        let vocab = build_vocab(&simulate_corpus(&spec, 1).unwrap()).unwrap();
        let cfg = KnowledgeConfig {
            rgcn: RgcnConfig {
                dims: vec![8, 16, 384],
                epochs: 5,
                activation: Activation::Relu,
                ..Default::default()
            },
            ..Default::default()
        };
        (vocab, toy_kg_from_spec(&spec), cfg)
    }

    #[test]
    fn desk_embeddings_shape_and_frozen_fallback_rows() {
        let (vocab, kg, cfg) = desk_inputs();
        let a = build_fused_embeddings::<f32>(&vocab, &kg, &cfg, &HashProvider::default(), 3).unwrap();
        assert_eq!(a.z.shape(), &[vocab.len(), 384]);
        assert!(a.z.is_finite());
        for (i, &h) in a.has_anchor.iter().enumerate() {
            if !h {
                assert!(a.struct_raw.row(i).iter().all(|&x| x == 0.0));
            }
        }
        assert!(a.has_anchor.iter().any(|&h| h) && a.has_anchor.iter().any(|&h| !h));

        let mut perturbed = kg.clone();
        let mut edges = kg.graph.named_edges();
        edges.push(("ICD10:I10".into(), "comorbid_with".into(), "ICD10:E78.5".into()));
        edges.remove(0);
        perturbed.graph = KnowledgeGraph::new(kg.graph.nodes().to_vec(), &edges).unwrap();
        let b = build_fused_embeddings::<f32>(&vocab, &perturbed, &cfg, &HashProvider::default(), 3).unwrap();
        let mut changed = false;
        for i in 0..vocab.len() {
            if a.has_anchor[i] {
                changed |= a.z.row(i) != b.z.row(i);
            } else {
                assert_eq!(a.z.row(i), b.z.row(i), "{}", vocab.name(i));
            }
        }
        assert!(changed);
    }

    #[test]
    fn fused_file_round_trip() {
        let (vocab, kg, mut cfg) = desk_inputs();
        cfg.model_dim = 16;
        let a = build_fused_embeddings::<f32>(&vocab, &kg, &cfg, &HashProvider::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fused.bin");
        a.save(&p).unwrap();
        assert_eq!(FusedEmbeddings::<f32>::load(&p).unwrap(), a);
    }
}
