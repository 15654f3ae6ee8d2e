//! Query graph → token sequence with attention-bias buckets.
//!
//! Each relation edge `u -r-> v` becomes a relation-node on the path
//! `u → r → v`. Two virtual tokens (`g_h`, `g_r`) are attached to every node;
//! they never carry a distance, only dedicated buckets.
//!
//! Augmented ids: original query nodes keep their ids `0..n`, the
//! relation-node of edge `k` gets id `n + k`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::query::{ConjunctiveGraph, NodeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugNode {
    Anchor(usize),
    Relation { id: usize, negated: bool },
    Var,
    FreeVar,
}

/// Token of a flattened sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Gh,
    Gr,
    Node(AugNode),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedGraph {
    /// Non-virtual nodes by augmented id.
    pub nodes: Vec<AugNode>,
    /// Directed edges `(src, dst)` of the augmented DAG.
    pub edges: Vec<(usize, usize)>,
    /// Longest-path layer of every non-virtual node.
    pub layers: Vec<usize>,
}

impl AugmentedGraph {
    /// Non-virtual node count.
    pub fn num_real(&self) -> usize {
        self.nodes.len()
    }

    /// Sequence length including both virtual tokens.
    pub fn len(&self) -> usize {
        self.nodes.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn undirected_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Hop counts on the undirected graph; `None` when unreachable.
    pub fn shortest_paths(&self) -> Vec<Vec<Option<usize>>> {
        let adj = self.undirected_adjacency();
        let n = self.nodes.len();
        (0..n)
            .map(|s| {
                let mut dist = vec![None; n];
                dist[s] = Some(0);
                let mut queue = VecDeque::from([s]);
                while let Some(u) = queue.pop_front() {
                    let du = dist[u].expect("queued nodes have distances");
                    for &v in &adj[u] {
                        if dist[v].is_none() {
                            dist[v] = Some(du + 1);
                            queue.push_back(v);
                        }
                    }
                }
                dist
            })
            .collect()
    }
}

/// Replaces every edge with a relation-node and layers the result.
pub fn augment(g: &ConjunctiveGraph) -> Result<AugmentedGraph> {
    let violations = g.validate();
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::InvalidGraph(msgs.join("; ")));
    }
    let n = g.nodes.len();
    let mut nodes: Vec<AugNode> = g
        .nodes
        .iter()
        .map(|q| match q.kind {
            NodeKind::Anchor(id) => AugNode::Anchor(id),
            NodeKind::Var => AugNode::Var,
            NodeKind::FreeVar => AugNode::FreeVar,
        })
        .collect();
    let mut edges = Vec::with_capacity(2 * g.edges.len());
    for (k, e) in g.edges.iter().enumerate() {
        nodes.push(AugNode::Relation {
            id: e.relation,
            negated: e.negated,
        });
        edges.push((e.src, n + k));
        edges.push((n + k, e.dst));
    }
    let layers = longest_path_layers(nodes.len(), &edges)?;
    Ok(AugmentedGraph {
        nodes,
        edges,
        layers,
    })
}

fn longest_path_layers(n: usize, edges: &[(usize, usize)]) -> Result<Vec<usize>> {
    let mut indeg = vec![0usize; n];
    let mut out = vec![Vec::new(); n];
    for &(a, b) in edges {
        indeg[b] += 1;
        out[a].push(b);
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut layer = vec![0usize; n];
    let mut seen = 0;
    while let Some(u) = queue.pop_front() {
        seen += 1;
        for &v in &out[u] {
            layer[v] = layer[v].max(layer[u] + 1);
            indeg[v] -= 1;
            if indeg[v] == 0 {
                queue.push_back(v);
            }
        }
    }
    if seen != n {
        return Err(Error::InvalidGraph("augmented graph has a cycle".into()));
    }
    Ok(layer)
}

/// `φ(i, j) = dir(i, j) · spd(i, j)` over non-virtual nodes, indexed by
/// augmented id. `dir` is 1 when `layer(i) ≥ layer(j)`; otherwise 0, or −1
/// with `signed`.
pub fn directed_distance(aug: &AugmentedGraph, signed: bool) -> Result<Array2<i64>> {
    let spd = aug.shortest_paths();
    let n = aug.num_real();
    let mut phi = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let d = spd[i][j].ok_or_else(|| {
                Error::InvalidGraph(format!("augmented nodes {i} and {j} are disconnected"))
            })? as i64;
            let dir = if aug.layers[i] >= aug.layers[j] {
                1
            } else if signed {
                -1
            } else {
                0
            };
            phi[[i, j]] = dir * d;
        }
    }
    Ok(phi)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum EncodingMode {
    #[default]
    DirectedDistance,
    UndirectedDistance,
    AdjacencyMask,
    None,
}

impl EncodingMode {
    pub const ALL: [EncodingMode; 4] = [
        EncodingMode::DirectedDistance,
        EncodingMode::UndirectedDistance,
        EncodingMode::AdjacencyMask,
        EncodingMode::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EncodingMode::DirectedDistance => "directed",
            EncodingMode::UndirectedDistance => "undirected",
            EncodingMode::AdjacencyMask => "adjacency",
            EncodingMode::None => "none",
        }
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncodingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown encoding mode {s:?} (expected directed, undirected, adjacency or none)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EncodingConfig {
    pub mode: EncodingMode,
    /// Distances are clamped into `[-clamp, clamp]`.
    pub clamp: usize,
    /// Use −1 instead of 0 for the direction of descendant pairs.
    pub signed: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            mode: EncodingMode::DirectedDistance,
            clamp: 8,
            signed: false,
        }
    }
}

impl EncodingConfig {
    /// Buckets used by real node pairs.
    fn regular_buckets(&self) -> usize {
        match self.mode {
            EncodingMode::DirectedDistance => 2 * self.clamp + 1,
            EncodingMode::UndirectedDistance => self.clamp + 1,
            EncodingMode::AdjacencyMask => 2,
            EncodingMode::None => 1,
        }
    }

    /// Bucket of any pair involving one virtual token (or both, distinct).
    pub fn virtual_bucket(&self) -> usize {
        self.regular_buckets()
    }

    /// Bucket of a virtual token attending to itself.
    pub fn self_virtual_bucket(&self) -> usize {
        self.regular_buckets() + 1
    }

    pub fn num_buckets(&self) -> usize {
        self.regular_buckets() + 2
    }

    /// Bucket whose bias is −∞.
    pub fn masked_bucket(&self) -> Option<usize> {
        (self.mode == EncodingMode::AdjacencyMask).then_some(1)
    }

    fn real_bucket(&self, phi: i64, spd: usize) -> usize {
        let d = self.clamp as i64;
        match self.mode {
            EncodingMode::DirectedDistance => (phi.clamp(-d, d) + d) as usize,
            EncodingMode::UndirectedDistance => spd.min(self.clamp),
            EncodingMode::AdjacencyMask => usize::from(spd > 1),
            EncodingMode::None => 0,
        }
    }
}

/// Bucket matrix in augmented order: index 0 is `g_h`, 1 is `g_r`, `2 + i`
/// is augmented node `i`.
pub fn bucketize(aug: &AugmentedGraph, cfg: &EncodingConfig) -> Result<Array2<usize>> {
    let phi = directed_distance(aug, cfg.signed)?;
    let n = aug.num_real();
    let m = n + 2;
    let mut b = Array2::from_elem((m, m), cfg.virtual_bucket());
    b[[0, 0]] = cfg.self_virtual_bucket();
    b[[1, 1]] = cfg.self_virtual_bucket();
    let spd = aug.shortest_paths();
    for i in 0..n {
        for j in 0..n {
            let s = spd[i][j].expect("connectivity checked by directed_distance");
            b[[i + 2, j + 2]] = cfg.real_bucket(phi[[i, j]], s);
        }
    }
    Ok(b)
}

/// Flattened token sequence and its bucket matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceInput {
    pub tokens: Vec<Token>,
    pub buckets: Array2<usize>,
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Reorders positions: new position `k` holds old position `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> SequenceInput {
        let m = self.len();
        assert_eq!(perm.len(), m, "permutation length");
        SequenceInput {
            tokens: perm.iter().map(|&p| self.tokens[p]).collect(),
            buckets: Array2::from_shape_fn((m, m), |(i, j)| self.buckets[[perm[i], perm[j]]]),
        }
    }
}

/// Canonical order: `g_h`, `g_r`, then non-virtual nodes by (layer, id).
pub fn flatten(aug: &AugmentedGraph, cfg: &EncodingConfig) -> Result<SequenceInput> {
    let b = bucketize(aug, cfg)?;
    let mut order: Vec<usize> = (0..aug.num_real()).collect();
    order.sort_by_key(|&i| (aug.layers[i], i));
    let perm: Vec<usize> = [0, 1].into_iter().chain(order.iter().map(|&i| i + 2)).collect();
    let tokens = [Token::Gh, Token::Gr]
        .into_iter()
        .chain(aug.nodes.iter().map(|&n| Token::Node(n)))
        .collect();
    Ok(SequenceInput { tokens, buckets: b }.permuted(&perm))
}

/// `augment` then `flatten`.
pub fn encode_graph(g: &ConjunctiveGraph, cfg: &EncodingConfig) -> Result<SequenceInput> {
    flatten(&augment(g)?, cfg)
}

/// Aligned integer grid, one row per line.
pub fn render_grid<T: fmt::Display>(m: &Array2<T>) -> String {
    let cells: Vec<String> = m.iter().map(|v| v.to_string()).collect();
    let w = cells.iter().map(String::len).max().unwrap_or(1);
    let mut out = String::new();
    for row in cells.chunks(m.ncols().max(1)) {
        let line: Vec<String> = row.iter().map(|c| format!("{c:>w$}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Gh => write!(f, "g_h"),
            Token::Gr => write!(f, "g_r"),
            Token::Node(AugNode::Anchor(e)) => write!(f, "e{e}"),
            Token::Node(AugNode::Relation { id, negated: false }) => write!(f, "r{id}"),
            Token::Node(AugNode::Relation { id, negated: true }) => write!(f, "¬r{id}"),
            Token::Node(AugNode::Var) => write!(f, "v"),
            Token::Node(AugNode::FreeVar) => write!(f, "?"),
        }
    }
}
