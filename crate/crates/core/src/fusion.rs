//! Interaction-based multimodal fusion: an undirected graph over the
//! aggregated video/text/audio sequences and the current text, fused by a
//! graph attention encoder and collapsed back to one sequence per side.

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::aggregation::Side;
use crate::error::{Error, Result};
use crate::extraction::Modality;
use crate::nncore::{Conv1d, FeatureSequence, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    #[serde(rename = "V")]
    Video,
    #[serde(rename = "T")]
    Text,
    #[serde(rename = "A")]
    Audio,
    #[serde(rename = "Tc")]
    CurrentText,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [NodeKind::Video, NodeKind::Text, NodeKind::Audio, NodeKind::CurrentText];

    pub fn label(self) -> &'static str {
        match self {
            NodeKind::Video => "V",
            NodeKind::Text => "T",
            NodeKind::Audio => "A",
            NodeKind::CurrentText => "Tc",
        }
    }

    pub fn is_context(self) -> bool {
        self != NodeKind::CurrentText
    }

    fn slot(self) -> usize {
        match self {
            NodeKind::Video => 0,
            NodeKind::Text => 1,
            NodeKind::Audio => 2,
            NodeKind::CurrentText => 3,
        }
    }
}

impl From<Modality> for NodeKind {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Video => NodeKind::Video,
            Modality::Text => NodeKind::Text,
            Modality::Audio => NodeKind::Audio,
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Intra,
    Inter,
    Interaction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub step: usize,
}

/// Undirected edge with `a < b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub kind: EdgeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphOptions {
    /// Limit intra-modal edges to steps at most this far apart.
    pub intra_window: Option<usize>,
    /// Whether current-text nodes get intra-modal edges among themselves.
    pub current_text_intra: bool,
    /// Whether interaction edges to the current text are generated.
    pub interaction: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions { intra_window: None, current_text_intra: true, interaction: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionGraph {
    pub steps: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<Edge>,
}

/// Edge counts per type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeCounts {
    pub intra: usize,
    pub inter: usize,
    pub interaction: usize,
}

impl EdgeCounts {
    pub fn total(&self) -> usize {
        self.intra + self.inter + self.interaction
    }
}

impl InteractionGraph {
    /// Builds the graph over the given node kinds, each with `steps` nodes.
    /// Nodes are ordered kind-major in the order given.
    pub fn build(kinds: &[(NodeKind, usize)], opts: &GraphOptions) -> Result<Self> {
        let Some(&(first_kind, steps)) = kinds.first() else {
            return Err(Error::invalid("interaction graph", "no node kinds"));
        };
        for &(kind, len) in kinds {
            if len != steps {
                return Err(Error::invalid(
                    "interaction graph",
                    format!("{first_kind} has {steps} steps but {kind} has {len}"),
                ));
            }
        }
        let unique: BTreeSet<_> = kinds.iter().map(|k| k.0).collect();
        if unique.len() != kinds.len() {
            return Err(Error::invalid("interaction graph", "duplicate node kind"));
        }
        if steps == 0 {
            return Err(Error::TooShort { context: "interaction graph", min: 1, got: 0 });
        }
        let nodes: Vec<GraphNode> = kinds
            .iter()
            .flat_map(|&(kind, _)| (0..steps).map(move |step| GraphNode { kind, step }))
            .collect();
        let index = |k: usize, step: usize| k * steps + step;
        let mut edges = Vec::new();

        for (k, &(kind, _)) in kinds.iter().enumerate() {
            if kind == NodeKind::CurrentText && !opts.current_text_intra {
                continue;
            }
            for i in 0..steps {
                for j in i + 1..steps {
                    if opts.intra_window.is_some_and(|w| j - i > w) {
                        continue;
                    }
                    edges.push(Edge { a: index(k, i), b: index(k, j), kind: EdgeKind::Intra });
                }
            }
        }
        let context: Vec<usize> = kinds
            .iter()
            .enumerate()
            .filter(|(_, (kind, _))| kind.is_context())
            .map(|(k, _)| k)
            .collect();
        let current = kinds.iter().position(|(kind, _)| *kind == NodeKind::CurrentText);
        for step in 0..steps {
            for (x, &ka) in context.iter().enumerate() {
                for &kb in &context[x + 1..] {
                    let (a, b) = (index(ka, step), index(kb, step));
                    edges.push(Edge { a: a.min(b), b: a.max(b), kind: EdgeKind::Inter });
                }
            }
            if let (Some(c), true) = (current, opts.interaction) {
                for &k in &context {
                    let (a, b) = (index(k, step), index(c, step));
                    edges.push(Edge { a: a.min(b), b: a.max(b), kind: EdgeKind::Interaction });
                }
            }
        }
        Ok(InteractionGraph { steps, nodes, edges })
    }

    /// Graph over all four kinds.
    pub fn full(steps: usize, opts: &GraphOptions) -> Result<Self> {
        let kinds: Vec<_> = NodeKind::ALL.iter().map(|&k| (k, steps)).collect();
        Self::build(&kinds, opts)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kinds(&self) -> Vec<NodeKind> {
        let mut out: Vec<NodeKind> = Vec::new();
        for n in &self.nodes {
            if !out.contains(&n.kind) {
                out.push(n.kind);
            }
        }
        out
    }

    pub fn node_index(&self, kind: NodeKind, step: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.kind == kind && n.step == step)
    }

    pub fn counts(&self) -> EdgeCounts {
        let mut c = EdgeCounts::default();
        for e in &self.edges {
            match e.kind {
                EdgeKind::Intra => c.intra += 1,
                EdgeKind::Inter => c.inter += 1,
                EdgeKind::Interaction => c.interaction += 1,
            }
        }
        c
    }

    /// Neighbor lists with the node itself first (the attention self-loop).
    pub fn neighbors_with_self(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = (0..self.nodes.len()).map(|i| vec![i]).collect();
        for e in &self.edges {
            out[e.a].push(e.b);
            out[e.b].push(e.a);
        }
        out
    }

    /// Relabels nodes: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.nodes.len() {
            return Err(Error::Shape { context: "graph permutation", axis: "nodes", expected: self.nodes.len(), got: perm.len() });
        }
        let mut nodes = self.nodes.clone();
        for (i, &p) in perm.iter().enumerate() {
            nodes[p] = self.nodes[i];
        }
        let edges = self
            .edges
            .iter()
            .map(|e| {
                let (a, b) = (perm[e.a], perm[e.b]);
                Edge { a: a.min(b), b: a.max(b), kind: e.kind }
            })
            .collect();
        Ok(InteractionGraph { steps: self.steps, nodes, edges })
    }

    /// Structured-text dump: one line per node with its neighbors, then the
    /// labeled edge list.
    pub fn to_edge_list(&self) -> String {
        #[derive(Serialize)]
        struct NodeLine<'a> {
            index: usize,
            kind: NodeKind,
            step: usize,
            neighbors: &'a [usize],
        }
        let neighbors = self.neighbors_with_self();
        let mut out = format!(
            "# interaction graph: {} steps, {} nodes, {} edges\n",
            self.steps,
            self.nodes.len(),
            self.edges.len()
        );
        for (i, n) in self.nodes.iter().enumerate() {
            let line = NodeLine { index: i, kind: n.kind, step: n.step, neighbors: &neighbors[i][1..] };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        for e in &self.edges {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// Fused sequence for one context side.
#[derive(Clone, Debug)]
pub struct FusedContext<T> {
    pub side: Side,
    pub seq: FeatureSequence<T>,
}

#[derive(Clone, Debug)]
pub struct GaeVars<T> {
    pub nodes: Var,
    /// Per head, per node: attention over `neighbors_with_self()` order.
    pub coefficients: Vec<Vec<Vec<T>>>,
}

/// Multi-head graph attention, dropout, linear, GELU, residual, layer norm.
#[derive(Clone, Debug)]
pub struct GraphAttentionEncoder {
    pub projection: Linear,
    pub attn_src: Vec<ParamId>,
    pub attn_dst: Vec<ParamId>,
    pub linear: Linear,
    pub norm: LayerNorm,
    pub heads: usize,
    pub dropout: f64,
    pub slope: f64,
}

impl GraphAttentionEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, dropout: f64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Shape { context: "graph attention", axis: "heads", expected: dim, got: heads });
        }
        let head_dim = dim / heads;
        let attn_src = (0..heads)
            .map(|h| store.xavier(format!("{name}.attn_src{h}"), head_dim, 1, head_dim, 1))
            .collect();
        let attn_dst = (0..heads)
            .map(|h| store.xavier(format!("{name}.attn_dst{h}"), head_dim, 1, head_dim, 1))
            .collect();
        Ok(GraphAttentionEncoder {
            projection: Linear::new(store, &format!("{name}.proj"), dim, dim),
            attn_src,
            attn_dst,
            linear: Linear::new(store, &format!("{name}.linear"), dim, dim),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            heads,
            dropout,
            slope: 0.2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, graph: &InteractionGraph) -> Result<GaeVars<T>> {
        let (n, dim) = g.shape(x);
        if n != graph.len() {
            return Err(Error::Shape { context: "graph attention", axis: "nodes", expected: graph.len(), got: n });
        }
        let neighbors = Rc::new(graph.neighbors_with_self());
        let wh = self.projection.forward(g, x)?;
        let head_dim = dim / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        let mut coefficients = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let part = if self.heads == 1 { wh } else { g.slice_cols(wh, h * head_dim, head_dim)? };
            let a_src = g.param(self.attn_src[h]);
            let a_dst = g.param(self.attn_dst[h]);
            let src = g.matmul(part, a_src)?;
            let dst = g.matmul(part, a_dst)?;
            let (out, alpha) = g.neighbor_attention(part, src, dst, neighbors.clone(), T::lit(self.slope))?;
            heads.push(out);
            coefficients.push(alpha);
        }
        let h = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let h = g.dropout(h, self.dropout)?;
        let h = self.linear.forward(g, h)?;
        let h = g.gelu(h);
        let h = g.add(h, x)?;
        let nodes = self.norm.forward(g, h)?;
        Ok(GaeVars { nodes, coefficients })
    }
}

/// Graph encoder plus the convolution that collapses fused nodes into one
/// sequence.
#[derive(Clone, Debug)]
pub struct ContextFusion {
    pub gae: GraphAttentionEncoder,
    pub fuse: Conv1d,
    pub hidden: usize,
}

impl ContextFusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, kernel: usize, dropout: f64) -> Result<Self> {
        Ok(ContextFusion {
            gae: GraphAttentionEncoder::new(store, &format!("{name}.gae"), dim, heads, dropout)?,
            fuse: Conv1d::new(store, &format!("{name}.fuse"), 4 * dim, dim, kernel),
            hidden: dim,
        })
    }

    /// Stacks per-kind `(steps, hidden)` sequences into graph node order.
    pub fn stack_nodes<T: Scalar>(g: &mut Graph<'_, T>, graph: &InteractionGraph, features: &[(NodeKind, Var)]) -> Result<Var> {
        let mut parts = Vec::new();
        for kind in graph.kinds() {
            let &(_, v) = features
                .iter()
                .find(|(k, _)| *k == kind)
                .ok_or_else(|| Error::invalid("graph node features", format!("missing features for {kind}")))?;
            let steps = g.shape(v).0;
            if steps != graph.steps {
                return Err(Error::invalid(
                    "graph node features",
                    format!("{kind} has {steps} steps, graph has {}", graph.steps),
                ));
            }
            parts.push(v);
        }
        g.concat_rows(&parts)
    }

    /// Concatenates the fused V, T, A and Tc nodes of each step along the
    /// hidden axis (absent kinds contribute zeros) and convolves to `hidden`.
    pub fn fuse_nodes<T: Scalar>(&self, g: &mut Graph<'_, T>, nodes: Var, graph: &InteractionGraph) -> Result<Var> {
        let mut slots: [Option<Var>; 4] = [None; 4];
        for kind in graph.kinds() {
            let index: Vec<usize> = (0..graph.steps)
                .map(|s| graph.node_index(kind, s).expect("kind present"))
                .collect();
            slots[kind.slot()] = Some(g.gather_rows(nodes, Rc::new(index))?);
        }
        let parts: Vec<Var> = slots
            .into_iter()
            .map(|s| s.unwrap_or_else(|| g.constant(Array2::zeros((graph.steps, self.hidden)))))
            .collect();
        let x = g.concat_cols(&parts)?;
        self.fuse.forward(g, x)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        graph: &InteractionGraph,
        features: &[(NodeKind, Var)],
        use_gae: bool,
    ) -> Result<Var> {
        let x = Self::stack_nodes(g, graph, features)?;
        let nodes = if use_gae { self.gae.forward(g, x, graph)?.nodes } else { x };
        self.fuse_nodes(g, nodes, graph)
    }
}
