//! Frozen knowledge-grounded token embeddings.
//!
//! A typed graph is embedded with a relational graph network, code tokens
//! pool the vectors of their anchor nodes, every token gets a text vector,
//! and gated per-component RMSNorms fuse both into the model width.

mod fuse;
mod rgcn;
mod semantic;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use crate::corpus::{concept_key, Category, SimulatorSpec};
use crate::engine::EngineError;
use crate::tensorfile::TensorFileError;

pub use fuse::{build_fused_embeddings, fuse, knowledge_rows, FusedEmbeddings, FusionParams, KnowledgeConfig, NORM_EPS};
pub use rgcn::{
    rgcn_layer, struct_embed, train_rgcn, Activation, RelationAdjacency, RgcnConfig, RgcnLayer, RgcnParams, RgcnTrace,
};
pub use semantic::{semantic_embed, FileProvider, HashProvider, SemanticProvider, SEMANTIC_DIM};

#[derive(Debug, thiserror::Error)]
pub enum KnowledgeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("edge on line {line} references unknown node {node:?}")]
    DanglingEndpoint { line: usize, node: String },
    #[error("anchor for {code} references unknown node {node:?}")]
    UnknownAnchor { code: String, node: String },
    #[error("no precomputed vector for {0}")]
    MissingVector(String),
    #[error("empty text for {0}")]
    EmptyText(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("graph has no edges to train on")]
    NoEdges,
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    TensorFile(#[from] TensorFileError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KnowledgeError>;

/// Directed multigraph with typed edges; nodes and relations are indexed in
/// insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    nodes: Vec<String>,
    node_index: HashMap<String, usize>,
    relations: Vec<String>,
    edges: Vec<(usize, usize, usize)>,
}

impl KnowledgeGraph {
    /// Builds a graph; edges are `(head, relation, tail)` names and every
    /// endpoint must be listed in `nodes`.
    pub fn new(nodes: Vec<String>, edges: &[(String, String, String)]) -> Result<Self> {
        let mut g = Self {
            node_index: HashMap::with_capacity(nodes.len()),
            nodes: Vec::with_capacity(nodes.len()),
            relations: Vec::new(),
            edges: Vec::with_capacity(edges.len()),
        };
        for n in nodes {
            if !g.node_index.contains_key(&n) {
                g.node_index.insert(n.clone(), g.nodes.len());
                g.nodes.push(n);
            }
        }
        let mut rel_index: HashMap<String, usize> = HashMap::new();
        for (line, (h, r, t)) in edges.iter().enumerate() {
            let end = |name: &String| {
                g.node_index.get(name).copied().ok_or_else(|| KnowledgeError::DanglingEndpoint {
                    line: line + 1,
                    node: name.clone(),
                })
            };
            let (hi, ti) = (end(h)?, end(t)?);
            let ri = *rel_index.entry(r.clone()).or_insert_with(|| {
                g.relations.push(r.clone());
                g.relations.len() - 1
            });
            g.edges.push((hi, ri, ti));
        }
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    /// `(head, relation, tail)` index triples.
    pub fn edges(&self) -> &[(usize, usize, usize)] {
        &self.edges
    }

    pub fn node_id(&self, name: &str) -> Option<usize> {
        self.node_index.get(name).copied()
    }

    /// Edges as name triples, in stored order.
    pub fn named_edges(&self) -> Vec<(String, String, String)> {
        self.edges
            .iter()
            .map(|&(h, r, t)| (self.nodes[h].clone(), self.relations[r].clone(), self.nodes[t].clone()))
            .collect()
    }

    /// Subgraph induced by every node within `k` undirected hops of `seeds`.
    /// Node order and edge order follow the parent graph.
    pub fn k_hop(&self, seeds: &[usize], k: usize) -> KnowledgeGraph {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(h, _, t) in &self.edges {
            adj[h].push(t);
            adj[t].push(h);
        }
        let mut depth = vec![usize::MAX; self.nodes.len()];
        let mut queue = VecDeque::new();
        for &s in seeds {
            if depth[s] == usize::MAX {
                depth[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            if depth[u] == k {
                continue;
            }
            for &v in &adj[u] {
                if depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let keep = |i: usize| depth[i] != usize::MAX;
        let nodes: Vec<String> = (0..self.nodes.len()).filter(|&i| keep(i)).map(|i| self.nodes[i].clone()).collect();
        let edges: Vec<(String, String, String)> = self
            .edges
            .iter()
            .filter(|&&(h, _, t)| keep(h) && keep(t))
            .map(|&(h, r, t)| (self.nodes[h].clone(), self.relations[r].clone(), self.nodes[t].clone()))
            .collect();
        KnowledgeGraph::new(nodes, &edges).expect("induced edges stay inside the node set")
    }
}

/// Graph plus the token-to-anchor and token-to-description maps, keyed by
/// concept key (`DX_E11.9`).
#[derive(Debug, Clone, PartialEq)]
pub struct KgBundle {
    pub graph: KnowledgeGraph,
    pub anchors: BTreeMap<String, Vec<String>>,
    pub descriptions: BTreeMap<String, String>,
}

impl KgBundle {
    pub fn new(
        graph: KnowledgeGraph,
        anchors: BTreeMap<String, Vec<String>>,
        descriptions: BTreeMap<String, String>,
    ) -> Result<Self> {
        for (code, nodes) in &anchors {
            for n in nodes {
                if graph.node_id(n).is_none() {
                    return Err(KnowledgeError::UnknownAnchor {
                        code: code.clone(),
                        node: n.clone(),
                    });
                }
            }
        }
        Ok(Self {
            graph,
            anchors,
            descriptions,
        })
    }

    /// Anchor node indices for a token; empty when unmapped.
    pub fn anchor_ids(&self, key: &str) -> Vec<usize> {
        self.anchors
            .get(key)
            .map(|ns| ns.iter().filter_map(|n| self.graph.node_id(n)).collect())
            .unwrap_or_default()
    }
}

const NODES_FILE: &str = "nodes.tsv";
const EDGES_FILE: &str = "edges.tsv";
const ANCHORS_FILE: &str = "anchors.json";
const DESCRIPTIONS_FILE: &str = "descriptions.json";
const EDGE_HEADER: &str = "head\trelation\ttail";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| KnowledgeError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    crate::tensorfile::write_atomic(path, text.as_bytes()).map_err(|source| KnowledgeError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Reads `nodes.tsv`, `edges.tsv`, `anchors.json` and `descriptions.json`
/// from `dir`.
pub fn load_kg(dir: impl AsRef<Path>) -> Result<KgBundle> {
    let dir = dir.as_ref();
    let nodes: Vec<String> = data_lines(&read(&dir.join(NODES_FILE))?)
        .map(|(_, l)| l.split('\t').next().unwrap_or("").to_string())
        .filter(|n| n != "node")
        .collect();
    let edge_path = dir.join(EDGES_FILE);
    let text = read(&edge_path)?;
    let mut edges = Vec::new();
    let mut lines_of = Vec::new();
    for (line, l) in data_lines(&text) {
        if l == EDGE_HEADER {
            continue;
        }
        let parts: Vec<&str> = l.split('\t').collect();
        if parts.len() != 3 {
            return Err(KnowledgeError::Parse {
                path: edge_path.display().to_string(),
                line,
                detail: format!("expected 3 tab-separated fields, found {}", parts.len()),
            });
        }
        edges.push((parts[0].to_string(), parts[1].to_string(), parts[2].to_string()));
        lines_of.push(line);
    }
    let graph = KnowledgeGraph::new(nodes, &edges).map_err(|e| match e {
        KnowledgeError::DanglingEndpoint { line, node } => KnowledgeError::DanglingEndpoint {
            line: lines_of[line - 1],
            node,
        },
        other => other,
    })?;
    let anchors = serde_json::from_str(&read(&dir.join(ANCHORS_FILE))?)?;
    let descriptions = serde_json::from_str(&read(&dir.join(DESCRIPTIONS_FILE))?)?;
    KgBundle::new(graph, anchors, descriptions)
}

pub fn save_kg(bundle: &KgBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| KnowledgeError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut nodes = String::from("node\n");
    for n in bundle.graph.nodes() {
        nodes.push_str(n);
        nodes.push('\n');
    }
    let mut edges = format!("{EDGE_HEADER}\n");
    for (h, r, t) in bundle.graph.named_edges() {
        edges.push_str(&format!("{h}\t{r}\t{t}\n"));
    }
    write(&dir.join(NODES_FILE), &nodes)?;
    write(&dir.join(EDGES_FILE), &edges)?;
    write(&dir.join(ANCHORS_FILE), &serde_json::to_string_pretty(&bundle.anchors)?)?;
    write(&dir.join(DESCRIPTIONS_FILE), &serde_json::to_string_pretty(&bundle.descriptions)?)
}

fn node_name(category: Category, code: &str) -> String {
    match category {
        Category::Diagnosis => format!("ICD10:{code}"),
        Category::Procedure => format!("PCS:{code}"),
        Category::Medication => format!("ATC:{code}"),
        Category::Lab => format!("LAB:{code}"),
    }
}

/// Hierarchy parents of a code node, nearest first.
fn ancestors(category: Category, code: &str) -> Vec<String> {
    let stem = code.split('.').next().unwrap_or(code);
    match category {
        Category::Diagnosis => {
            let mut out = Vec::new();
            if code != stem {
                out.push(format!("ICD10:{stem}"));
            }
            out.push(format!("ICD10:chapter_{}", &stem[..1]));
            out
        }
        Category::Medication if code.len() >= 5 => {
            vec![format!("ATC:{}", &code[..5]), format!("ATC:{}", &code[..1])]
        }
        _ => Vec::new(),
    }
}

/// A small biomedical-style graph consistent with a simulator spec:
/// diagnosis and drug hierarchies plus one edge per condition rule.
/// Procedures are left out of the graph, so their tokens rely on the
/// semantic path alone.
pub fn toy_kg_from_spec(spec: &SimulatorSpec) -> KgBundle {
    let mut nodes: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut add = |n: String, nodes: &mut Vec<String>| {
        if seen.insert(n.clone()) {
            nodes.push(n);
        }
    };
    let mut edges: Vec<(String, String, String)> = Vec::new();
    let mut edge_seen = BTreeSet::new();
    let mut push_edge = |e: (String, String, String), edges: &mut Vec<_>| {
        if edge_seen.insert(e.clone()) {
            edges.push(e);
        }
    };
    let mut anchors = BTreeMap::new();
    let mut descriptions = BTreeMap::new();
    let in_graph = |c: Category| c != Category::Procedure;

    let concepts = spec
        .codes
        .iter()
        .map(|c| (c.category, c.code.as_str(), c.label.as_str()))
        .chain(spec.labs.iter().map(|l| (Category::Lab, l.code.as_str(), l.label.as_str())));
    for (cat, code, label) in concepts {
        let key = concept_key(cat, code);
        descriptions.insert(key.clone(), label.to_string());
        if !in_graph(cat) {
            continue;
        }
        let node = node_name(cat, code);
        add(node.clone(), &mut nodes);
        anchors.insert(key, vec![node.clone()]);
        let mut child = node;
        for parent in ancestors(cat, code) {
            add(parent.clone(), &mut nodes);
            push_edge((child, "is_a".to_string(), parent.clone()), &mut edges);
            child = parent;
        }
    }
    for rule in &spec.rules {
        let dx = node_name(Category::Diagnosis, &rule.trigger);
        for imp in &rule.implies {
            if !in_graph(imp.category) {
                continue;
            }
            let other = node_name(imp.category, &imp.code);
            let edge = match imp.category {
                Category::Medication => (other, "indication", dx.clone()),
                Category::Lab => (other, "monitors", dx.clone()),
                _ => (dx.clone(), "comorbid_with", other),
            };
            push_edge((edge.0, edge.1.to_string(), edge.2), &mut edges);
        }
    }
    let graph = KnowledgeGraph::new(nodes, &edges).expect("toy graph endpoints are registered");
    KgBundle::new(graph, anchors, descriptions).expect("toy anchors are graph nodes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(h: &str, r: &str, t: &str) -> (String, String, String) {
        (h.into(), r.into(), t.into())
    }

    fn small() -> KgBundle {
        let nodes = ["a", "b", "c", "d"].map(String::from).to_vec();
        let edges = vec![triple("a", "is_a", "b"), triple("b", "is_a", "c"), triple("d", "treats", "a")];
        let g = KnowledgeGraph::new(nodes, &edges).unwrap();
        let anchors = BTreeMap::from([("DX_X".to_string(), vec!["a".to_string()])]);
        let desc = BTreeMap::from([("DX_X".to_string(), "something".to_string())]);
        KgBundle::new(g, anchors, desc).unwrap()
    }

    #[test]
    fn three_edge_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let b = small();
        save_kg(&b, dir.path()).unwrap();
        let back = load_kg(dir.path()).unwrap();
        assert_eq!(back.graph.edges().len(), 3);
        assert_eq!(back, b);
        assert_eq!(back.graph.n_relations(), 2);
    }

    #[test]
    fn dangling_endpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_kg(&small(), dir.path()).unwrap();
        let p = dir.path().join(EDGES_FILE);
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("a\tis_a\tzzz\n");
        fs::write(&p, text).unwrap();
        match load_kg(dir.path()) {
            Err(KnowledgeError::DanglingEndpoint { line, node }) => {
                assert_eq!(node, "zzz");
                assert_eq!(line, 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn anchor_to_absent_node_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_kg(&small(), dir.path()).unwrap();
        fs::write(dir.path().join(ANCHORS_FILE), r#"{"DX_X": ["nowhere"]}"#).unwrap();
        assert!(matches!(load_kg(dir.path()), Err(KnowledgeError::UnknownAnchor { .. })));
    }

    #[test]
    fn k_hop_induction() {
        let g = small().graph;
        let a = g.node_id("a").unwrap();
        let one = g.k_hop(&[a], 1);
        assert_eq!(one.nodes(), &["a", "b", "d"]);
        assert_eq!(one.edges().len(), 2);
        let two = g.k_hop(&[a], 2);
        assert_eq!(two.n_nodes(), 4);
        assert_eq!(two.edges().len(), 3);
        assert_eq!(g.k_hop(&[a], 0).n_nodes(), 1);
    }

    #[test]
    fn toy_graph_covers_rules_and_skips_procedures() {
        let spec = SimulatorSpec::desk(10);
        let kg = toy_kg_from_spec(&spec);
        assert!(kg.anchors.contains_key("DX_E11.9"));
        assert!(kg.anchors.contains_key("LAB_HbA1c_%"));
        assert!(!kg.anchors.keys().any(|k| k.starts_with("PR_")));
        assert!(kg.descriptions.keys().any(|k| k.starts_with("PR_")));
        let named = kg.graph.named_edges();
        assert!(named.contains(&triple("ATC:A10BA02", "indication", "ICD10:E11.9")));
        assert!(named.contains(&triple("ICD10:E11.9", "is_a", "ICD10:E11")));
        assert_eq!(toy_kg_from_spec(&spec), kg);
    }
}
