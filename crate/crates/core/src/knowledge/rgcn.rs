//! Relational graph convolution trained by edge reconstruction.
//!
//! Each layer computes
//! `h'_v = σ(Σ_r Σ_{u∈N_r(v)} W_r h_u / |N_r(v)| + W_0 h_v)` with row
//! vectors, so `W_r` is stored `[d_in, d_out]`. Every relation contributes
//! two message types, along and against the edge direction. Edges are
//! scored with a diagonal bilinear form `Σ_i h_i r_i t_i` and trained with
//! binary cross-entropy against uniformly corrupted tails.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{KnowledgeError, KnowledgeGraph, Result};
use crate::engine::{EngineError, Graph, SparseMatrix, Tensor, Var};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::train::{AdamW, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RgcnConfig {
    /// Layer widths `d^(0) .. d^(L)`; `d^(0)` is the learned node feature width.
    pub dims: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    /// Corrupted tails per true edge.
    pub negatives: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for RgcnConfig {
    fn default() -> Self {
        Self {
            dims: vec![64, 64, 384],
            epochs: 60,
            lr: 0.01,
            negatives: 4,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

/// Row-normalized adjacency per message type: `2·|ℛ|` matrices, forward
/// then inverse for each relation.
#[derive(Debug, Clone)]
pub struct RelationAdjacency<T> {
    pub n_nodes: usize,
    mats: Vec<Rc<SparseMatrix<T>>>,
}

impl<T: Scalar> RelationAdjacency<T> {
    pub fn new(graph: &KnowledgeGraph) -> Self {
        let n = graph.n_nodes();
        let mut per_type: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 2 * graph.n_relations()];
        for &(h, r, t) in graph.edges() {
            per_type[2 * r].push((t, h));
            per_type[2 * r + 1].push((h, t));
        }
        let mats = per_type
            .into_iter()
            .map(|pairs| {
                let mut degree = vec![0usize; n];
                for &(v, _) in &pairs {
                    degree[v] += 1;
                }
                let trip = pairs
                    .into_iter()
                    .map(|(v, u)| (v, u, T::one() / T::from_usize(degree[v]).expect("degree fits")))
                    .collect();
                Rc::new(SparseMatrix::from_triplets(n, n, trip))
            })
            .collect();
        Self { n_nodes: n, mats }
    }

    pub fn message_types(&self) -> usize {
        self.mats.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgcnLayer<T> {
    pub w_self: Tensor<T>,
    pub w_rel: Vec<Tensor<T>>,
}

fn layer_on_graph<T: Scalar>(
    g: &Graph<T>,
    adj: &RelationAdjacency<T>,
    h: Var,
    w_self: Var,
    w_rel: &[Var],
    act: Activation,
) -> crate::engine::Result<Var> {
    if w_rel.len() != adj.message_types() {
        return Err(EngineError::Shape {
            op: "rgcn_layer",
            detail: format!("{} relation weights for {} message types", w_rel.len(), adj.message_types()),
        });
    }
    let rows = g.shape(h)[0];
    if rows != adj.n_nodes {
        return Err(EngineError::Shape {
            op: "rgcn_layer",
            detail: format!("{rows} node rows for a {}-node graph", adj.n_nodes),
        });
    }
    let mut out = g.matmul(h, w_self)?;
    for (a, &w) in adj.mats.iter().zip(w_rel) {
        if a.nnz() == 0 {
            continue;
        }
        let m = g.spmm(a.clone(), h)?;
        out = g.add(out, g.matmul(m, w)?)?;
    }
    match act {
        Activation::Relu => g.relu(out),
        Activation::Identity => Ok(out),
    }
}

/// One propagation step on concrete tensors.
pub fn rgcn_layer<T: Scalar>(
    adj: &RelationAdjacency<T>,
    h: &Tensor<T>,
    layer: &RgcnLayer<T>,
    act: Activation,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let hv = g.constant(h.clone());
    let ws = g.constant(layer.w_self.clone());
    let wr: Vec<Var> = layer.w_rel.iter().map(|w| g.constant(w.clone())).collect();
    let out = layer_on_graph(&g, adj, hv, ws, &wr, act)?;
    let value = g.value(out).clone();
    Ok(value)
}

/// Learned node features, layer weights and per-relation diagonal scorers.
#[derive(Debug, Clone, PartialEq)]
pub struct RgcnParams<T> {
    pub features: Tensor<T>,
    pub layers: Vec<RgcnLayer<T>>,
    pub relations: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> RgcnParams<T> {
    pub fn init(graph: &KnowledgeGraph, cfg: &RgcnConfig) -> Result<Self> {
        if cfg.dims.len() < 2 || cfg.dims.contains(&0) {
            return Err(KnowledgeError::Shape(format!("layer widths {:?}", cfg.dims)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let types = 2 * graph.n_relations();
        let features = Tensor::randn(&[graph.n_nodes(), cfg.dims[0]], 1.0, &mut rng);
        let layers = cfg
            .dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / (w[0] + w[1]) as f64).sqrt();
                RgcnLayer {
                    w_self: Tensor::randn(&[w[0], w[1]], std, &mut rng),
                    w_rel: (0..types).map(|_| Tensor::randn(&[w[0], w[1]], std, &mut rng)).collect(),
                }
            })
            .collect();
        let d_out = *cfg.dims.last().expect("at least two widths");
        let relations = Tensor::randn(&[graph.n_relations(), d_out], (d_out as f64).powf(-0.5), &mut rng);
        Ok(Self {
            features,
            layers,
            relations,
            activation: cfg.activation,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.relations.cols()
    }

    fn to_params(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.add("features", self.features.clone(), true, false);
        for (l, layer) in self.layers.iter().enumerate() {
            p.add(format!("layer{l}.self"), layer.w_self.clone(), true, false);
            for (r, w) in layer.w_rel.iter().enumerate() {
                p.add(format!("layer{l}.rel{r}"), w.clone(), true, false);
            }
        }
        p.add("relations", self.relations.clone(), true, false);
        p
    }

    fn from_params(&mut self, p: &ParamSet<T>) {
        self.features = p.get("features").clone();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.w_self = p.get(&format!("layer{l}.self")).clone();
            for (r, w) in layer.w_rel.iter_mut().enumerate() {
                *w = p.get(&format!("layer{l}.rel{r}")).clone();
            }
        }
        self.relations = p.get("relations").clone();
    }

    /// Final-layer node embeddings `[N, d^(L)]`.
    pub fn node_embeddings(&self, adj: &RelationAdjacency<T>) -> Result<Tensor<T>> {
        let mut h = self.features.clone();
        for layer in &self.layers {
            h = rgcn_layer(adj, &h, layer, self.activation)?;
        }
        Ok(h)
    }

    /// Diagonal bilinear scores of `(head, relation, tail)` triples.
    pub fn score(&self, emb: &Tensor<T>, triples: &[(usize, usize, usize)]) -> Vec<T> {
        triples
            .iter()
            .map(|&(h, r, t)| {
                emb.row(h)
                    .iter()
                    .zip(self.relations.row(r))
                    .zip(emb.row(t))
                    .map(|((&a, &b), &c)| a * b * c)
                    .sum()
            })
            .collect()
    }
}

/// Mean loss per epoch, index 0 measured at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgcnTrace {
    pub losses: Vec<f64>,
}

fn sample_batch<R: Rng>(
    graph: &KnowledgeGraph,
    negatives: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>, Vec<usize>, Vec<f64>) {
    let n = graph.n_nodes();
    let m = graph.edges().len() * (1 + negatives);
    let (mut hs, mut rs, mut ts, mut ys) =
        (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    for &(h, r, t) in graph.edges() {
        hs.push(h);
        rs.push(r);
        ts.push(t);
        ys.push(1.0);
        for _ in 0..negatives {
            hs.push(h);
            rs.push(r);
            ts.push(rng.random_range(0..n));
            ys.push(0.0);
        }
    }
    (hs, rs, ts, ys)
}

/// Full-batch training; the same seed gives the same parameters.
pub fn train_rgcn<T: Scalar>(graph: &KnowledgeGraph, cfg: &RgcnConfig) -> Result<(RgcnParams<T>, RgcnTrace)> {
    if graph.edges().is_empty() {
        return Err(KnowledgeError::NoEdges);
    }
    let adj = RelationAdjacency::<T>::new(graph);
    let mut model = RgcnParams::<T>::init(graph, cfg)?;
    let mut params = model.to_params();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
        &params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let types = adj.message_types();
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (hs, rs, ts, ys) = sample_batch(graph, cfg.negatives, &mut rng);
        let g = Graph::new();
        let vars = params.bind(&g);
        let mut h = vars[0];
        let mut k = 1;
        for _ in &model.layers {
            h = layer_on_graph(&g, &adj, h, vars[k], &vars[k + 1..k + 1 + types], cfg.activation)?;
            k += 1 + types;
        }
        let rel = vars[k];
        let a = g.embedding(h, &hs)?;
        let b = g.embedding(rel, &rs)?;
        let c = g.embedding(h, &ts)?;
        let scores = g.sum_rows(g.mul(g.mul(a, b)?, c)?)?;
        let labels: Vec<T> = ys.iter().map(|&y| T::from_f64_lossy(y)).collect();
        let loss = g.bce_with_logits(scores, &labels)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(KnowledgeError::NonFiniteLoss(epoch));
        }
        losses.push(value);
        if epoch == cfg.epochs {
            break;
        }
        let mut grads = g.backward(loss)?;
        let gs = params.collect_grads(&mut grads, &vars);
        opt.step(&mut params, &gs, cfg.lr).map_err(|_| KnowledgeError::NonFiniteLoss(epoch))?;
    }
    model.from_params(&params);
    Ok((model, RgcnTrace { losses }))
}

/// Mean of the anchor rows; the zero vector when there are no anchors.
/// Anchors are summed in sorted order, so enumeration order never matters.
pub fn struct_embed<T: Scalar>(anchors: &[usize], emb: &Tensor<T>) -> Vec<T> {
    let mut ids = anchors.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut out = vec![T::zero(); emb.cols()];
    if ids.is_empty() {
        return out;
    }
    for &i in &ids {
        for (o, &x) in out.iter_mut().zip(emb.row(i)) {
            *o += x;
        }
    }
    let n = T::from_usize(ids.len()).expect("count fits");
    out.iter_mut().for_each(|o| *o /= n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, &str, usize)]) -> KnowledgeGraph {
        let nodes = (0..n).map(|i| format!("n{i}")).collect();
        let e: Vec<_> = edges.iter().map(|&(h, r, t)| (format!("n{h}"), r.to_string(), format!("n{t}"))).collect();
        KnowledgeGraph::new(nodes, &e).unwrap()
    }

    fn identity_layer(d: usize, types: usize) -> RgcnLayer<f64> {
        RgcnLayer {
            w_self: Tensor::identity(d),
            w_rel: vec![Tensor::identity(d); types],
        }
    }

    fn random_layer(d_in: usize, d_out: usize, types: usize, seed: u64) -> RgcnLayer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgcnLayer {
            w_self: Tensor::randn(&[d_in, d_out], 1.0, &mut rng),
            w_rel: (0..types).map(|_| Tensor::randn(&[d_in, d_out], 1.0, &mut rng)).collect(),
        }
    }

    #[test]
    fn isolated_node_keeps_only_self_term() {
        let g = graph(3, &[(0, "r", 1)]);
        let adj = RelationAdjacency::new(&g);
        let layer = random_layer(2, 2, 2, 1);
        let h = Tensor::from_f64(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -0.3, 0.8]).unwrap();
        let out = rgcn_layer(&adj, &h, &layer, Activation::Relu).unwrap();
        let w = layer.w_self.data();
        for j in 0..2 {
            let expect = (-0.3 * w[j] + 0.8 * w[2 + j]).max(0.0);
            assert!((out.row(2)[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn single_neighbor_with_identities_adds() {
        let g = graph(2, &[(0, "r", 1)]);
        let adj = RelationAdjacency::new(&g);
        let h = Tensor::from_f64(&[2, 2], &[1.0, 2.0, 10.0, 20.0]).unwrap();
        let out = rgcn_layer(&adj, &h, &identity_layer(2, 2), Activation::Identity).unwrap();
        assert_eq!(out.row(1), &[11.0, 22.0]);
        assert_eq!(out.row(0), &[11.0, 22.0]);
    }

    #[test]
    fn two_neighbors_are_averaged() {
        let g = graph(3, &[(0, "r", 2), (1, "r", 2)]);
        let adj = RelationAdjacency::new(&g);
        let mut layer = identity_layer(1, 2);
        layer.w_self = Tensor::zeros(&[1, 1]);
        layer.w_rel[0] = Tensor::from_f64(&[1, 1], &[3.0]).unwrap();
        let h = Tensor::from_f64(&[3, 1], &[1.0, 5.0, 100.0]).unwrap();
        let out = rgcn_layer(&adj, &h, &layer, Activation::Identity).unwrap();
        assert_eq!(out.row(2), &[9.0]);
    }

    #[test]
    fn identity_activation_is_linear() {
        let g = graph(4, &[(0, "a", 1), (1, "b", 2), (3, "a", 1), (2, "a", 0)]);
        let adj = RelationAdjacency::new(&g);
        let layer = random_layer(3, 2, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let mut scaled = h.clone();
        scaled.data_mut().iter_mut().for_each(|x| *x *= -2.5);
        let a = rgcn_layer(&adj, &scaled, &layer, Activation::Identity).unwrap();
        let b = rgcn_layer(&adj, &h, &layer, Activation::Identity).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - -2.5 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = graph(3, &[(0, "r", 1)]);
        let adj = RelationAdjacency::new(&g);
        let h = Tensor::<f64>::zeros(&[2, 2]);
        assert!(rgcn_layer(&adj, &h, &identity_layer(2, 2), Activation::Relu).is_err());
        let h = Tensor::<f64>::zeros(&[3, 2]);
        assert!(rgcn_layer(&adj, &h, &identity_layer(2, 1), Activation::Relu).is_err());
    }

    fn two_clusters() -> KnowledgeGraph {
        let mut edges = Vec::new();
        for base in [0, 8] {
            for i in 0..8 {
                for j in 0..8 {
                    if i != j && (i + j) % 3 != 0 {
                        edges.push((base + i, "linked", base + j));
                    }
                }
            }
        }
        graph(16, &edges)
    }

    fn small_cfg(seed: u64) -> RgcnConfig {
        RgcnConfig {
            dims: vec![8, 16, 16],
            epochs: 60,
            lr: 0.02,
            negatives: 3,
            activation: Activation::Relu,
            seed,
        }
    }

    fn mean_score(p: &RgcnParams<f64>, emb: &Tensor<f64>, pairs: &[(usize, usize, usize)]) -> f64 {
        p.score(emb, pairs).iter().sum::<f64>() / pairs.len() as f64
    }

    #[test]
    fn training_separates_clusters() {
        let g = two_clusters();
        let (p, trace) = train_rgcn::<f64>(&g, &small_cfg(5)).unwrap();
        assert!(trace.losses[5] < trace.losses[0], "{:?}", &trace.losses[..6]);
        let emb = p.node_embeddings(&RelationAdjacency::new(&g)).unwrap();
        let (mut intra, mut inter) = (Vec::new(), Vec::new());
        for i in 0..16 {
            for j in 0..16 {
                if i != j {
                    if (i < 8) == (j < 8) {
                        intra.push((i, 0, j));
                    } else {
                        inter.push((i, 0, j));
                    }
                }
            }
        }
        assert!(mean_score(&p, &emb, &intra) > mean_score(&p, &emb, &inter));
    }

    #[test]
    fn training_is_deterministic() {
        let g = two_clusters();
        let mut cfg = small_cfg(9);
        cfg.epochs = 5;
        let a = train_rgcn::<f64>(&g, &cfg).unwrap();
        let b = train_rgcn::<f64>(&g, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    /// Ranking AUC of true edges against uniform tail corruptions, by pair
    /// enumeration.
    fn auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut wins = 0.0;
        for &p in pos {
            for &n in neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn untrained_ranking_is_chance() {
        let g = two_clusters();
        let adj = RelationAdjacency::new(&g);
        let mut total = 0.0;
        let runs = 40;
        for seed in 0..runs {
            let p = RgcnParams::<f64>::init(&g, &small_cfg(seed)).unwrap();
            let emb = p.node_embeddings(&adj).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let neg: Vec<_> = g.edges().iter().map(|&(h, r, _)| (h, r, rng.random_range(0..16))).collect();
            total += auc(&p.score(&emb, g.edges()), &p.score(&emb, &neg));
        }
        let mean = total / runs as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean AUC {mean}");
    }

    #[test]
    fn empty_graph_cannot_train() {
        let g = graph(2, &[]);
        assert!(matches!(train_rgcn::<f64>(&g, &small_cfg(0)), Err(KnowledgeError::NoEdges)));
    }

    #[test]
    fn anchor_pooling() {
        let emb = Tensor::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 6.0, -1.0, 0.5]).unwrap();
        assert_eq!(struct_embed::<f64>(&[1], &emb), vec![3.0, 6.0]);
        assert_eq!(struct_embed::<f64>(&[0, 1], &emb), vec![2.0, 4.0]);
        assert_eq!(struct_embed::<f64>(&[], &emb), vec![0.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn anchor_order_is_irrelevant(mut ids in proptest::collection::vec(0usize..6, 1..6), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb = Tensor::<f32>::randn(&[6, 5], 1.0, &mut rng);
            let a = struct_embed(&ids, &emb);
            ids.reverse();
            proptest::prop_assert_eq!(a, struct_embed(&ids, &emb));
        }
    }
}
