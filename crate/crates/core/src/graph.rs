//! Attributed graph storage: node/edge tables, canonical text formats, and
//! the GraphFeature record (a target node plus its k-hop neighborhood).
//!
//! Everything here is deterministic by construction: nodes are kept sorted by
//! id, in-edge lists by source id, and all float formatting goes through one
//! shortest-round-trip encoder, so serializing the same graph twice yields
//! identical bytes and byte equality of GraphFeatures coincides with
//! semantic equality.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type NodeId = u64;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("edge endpoint {0} not present in node table")]
    DanglingEdge(NodeId),
    #[error("edge {src}->{dst} has invalid weight {weight}")]
    InvalidWeight { src: NodeId, dst: NodeId, weight: f32 },
    #[error("synthetic spec requires n >= 1")]
    EmptySpec,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Formats a float in canonical text form: shortest representation that
/// round-trips, always containing a '.' or exponent ("1.0", "0.25", "1e-7").
pub fn fmt_f32(x: f32) -> String {
    format!("{x:?}")
}

/// Parses a float, rejecting non-finite values and normalizing -0.0 to 0.0
/// so the canonical text form is unique per value.
pub fn parse_f32(s: &str, line: usize) -> Result<f32, GraphError> {
    let x: f32 = s.parse().map_err(|_| GraphError::ParseError {
        line,
        msg: format!("expected a real number, got {s:?}"),
    })?;
    if !x.is_finite() {
        return Err(GraphError::ParseError {
            line,
            msg: format!("non-finite value {s:?}"),
        });
    }
    Ok(if x == 0.0 { 0.0 } else { x })
}

fn parse_id(s: &str, line: usize) -> Result<NodeId, GraphError> {
    s.parse().map_err(|_| GraphError::ParseError {
        line,
        msg: format!("expected a non-negative integer id, got {s:?}"),
    })
}

// ====== Records ======

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: NodeId,
    pub features: Vec<f32>,
}

impl NodeRecord {
    pub fn new(id: NodeId, mut features: Vec<f32>) -> Self {
        for f in &mut features {
            if *f == 0.0 {
                *f = 0.0; // canonicalize -0.0
            }
        }
        NodeRecord { id, features }
    }

    /// One node-table line: `<id>\t<f1>\t...` (no trailing newline).
    pub fn to_line(&self) -> String {
        let mut s = self.id.to_string();
        for f in &self.features {
            s.push('\t');
            s.push_str(&fmt_f32(*f));
        }
        s
    }

    pub fn parse_line(text: &str, dim: Option<usize>, line: usize) -> Result<Self, GraphError> {
        let mut fields = text.split('\t');
        let id = parse_id(fields.next().unwrap_or(""), line)?;
        let feats: Vec<&str> = fields.collect();
        if let Some(d) = dim {
            if feats.len() != d {
                return Err(GraphError::SchemaError(format!(
                    "line {line}: node {id} has {} features, expected {d}",
                    feats.len()
                )));
            }
        }
        let features = feats
            .iter()
            .map(|f| parse_f32(f, line))
            .collect::<Result<_, _>>()?;
        Ok(NodeRecord::new(id, features))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub src: NodeId,
    pub dst: NodeId,
    pub weight: f32,
    pub features: Vec<f32>,
}

impl EdgeRecord {
    pub fn new(src: NodeId, dst: NodeId, weight: f32, mut features: Vec<f32>) -> Self {
        for f in &mut features {
            if *f == 0.0 {
                *f = 0.0;
            }
        }
        EdgeRecord {
            src,
            dst,
            weight: if weight == 0.0 { 0.0 } else { weight },
            features,
        }
    }

    /// One edge-table line: `<src>\t<dst>\t<weight>\t<f1>\t...`.
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{}\t{}", self.src, self.dst, fmt_f32(self.weight));
        for f in &self.features {
            s.push('\t');
            s.push_str(&fmt_f32(*f));
        }
        s
    }

    pub fn parse_line(text: &str, dim: Option<usize>, line: usize) -> Result<Self, GraphError> {
        let mut fields = text.split('\t');
        let src = parse_id(fields.next().unwrap_or(""), line)?;
        let dst = match fields.next() {
            Some(f) => parse_id(f, line)?,
            None => {
                return Err(GraphError::ParseError {
                    line,
                    msg: "edge line missing destination id".into(),
                })
            }
        };
        let weight = match fields.next() {
            Some(f) => parse_f32(f, line)?,
            None => {
                return Err(GraphError::ParseError {
                    line,
                    msg: "edge line missing weight".into(),
                })
            }
        };
        let feats: Vec<&str> = fields.collect();
        if let Some(d) = dim {
            if feats.len() != d {
                return Err(GraphError::SchemaError(format!(
                    "line {line}: edge {src}->{dst} has {} features, expected {d}",
                    feats.len()
                )));
            }
        }
        if weight <= 0.0 {
            return Err(GraphError::InvalidWeight { src, dst, weight });
        }
        let features = feats
            .iter()
            .map(|f| parse_f32(f, line))
            .collect::<Result<_, _>>()?;
        Ok(EdgeRecord::new(src, dst, weight, features))
    }
}

/// In-edge entry as stored per destination node: the source id plus the
/// edge's weight and features.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjEntry {
    pub src: NodeId,
    pub weight: f32,
    pub features: Vec<f32>,
}

// ====== Graph ======

/// Immutable directed attributed graph. Edge direction u -> v means the edge
/// is stored in `in_adj` of v and in `out_adj` of u; both views always hold
/// the same edge set.
#[derive(Debug, Clone)]
pub struct Graph {
    node_dim: usize,
    edge_dim: usize,
    nodes: Vec<NodeRecord>,
    index: HashMap<NodeId, usize>,
    in_adj: Vec<Vec<AdjEntry>>,
    out_adj: Vec<Vec<NodeId>>,
    edge_count: usize,
}

impl Graph {
    pub fn from_records(
        mut nodes: Vec<NodeRecord>,
        edges: Vec<EdgeRecord>,
    ) -> Result<Self, GraphError> {
        nodes.sort_by_key(|n| n.id);
        for pair in nodes.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(GraphError::DuplicateNode(pair[0].id));
            }
        }
        let node_dim = nodes.first().map_or(0, |n| n.features.len());
        for n in &nodes {
            if n.features.len() != node_dim {
                return Err(GraphError::SchemaError(format!(
                    "node {} has {} features, expected {node_dim}",
                    n.id,
                    n.features.len()
                )));
            }
        }
        let index: HashMap<NodeId, usize> =
            nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();

        let edge_dim = edges.first().map_or(0, |e| e.features.len());
        let mut in_adj = vec![Vec::new(); nodes.len()];
        let mut out_adj = vec![Vec::new(); nodes.len()];
        let edge_count = edges.len();
        for e in edges {
            if e.features.len() != edge_dim {
                return Err(GraphError::SchemaError(format!(
                    "edge {}->{} has {} features, expected {edge_dim}",
                    e.src,
                    e.dst,
                    e.features.len()
                )));
            }
            if !(e.weight > 0.0) || !e.weight.is_finite() {
                return Err(GraphError::InvalidWeight {
                    src: e.src,
                    dst: e.dst,
                    weight: e.weight,
                });
            }
            let si = *index.get(&e.src).ok_or(GraphError::DanglingEdge(e.src))?;
            let di = *index.get(&e.dst).ok_or(GraphError::DanglingEdge(e.dst))?;
            in_adj[di].push(AdjEntry {
                src: e.src,
                weight: e.weight,
                features: e.features,
            });
            out_adj[si].push(e.dst);
        }
        for (i, list) in in_adj.iter_mut().enumerate() {
            list.sort_by_key(|e| e.src);
            for pair in list.windows(2) {
                if pair[0].src == pair[1].src {
                    return Err(GraphError::SchemaError(format!(
                        "duplicate edge {}->{}",
                        pair[0].src, nodes[i].id
                    )));
                }
            }
        }
        for list in &mut out_adj {
            list.sort_unstable();
        }
        Ok(Graph {
            node_dim,
            edge_dim,
            nodes,
            index,
            in_adj,
            out_adj,
            edge_count,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn node_dim(&self) -> usize {
        self.node_dim
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeRecord> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    /// In-edges of `id` (sources pointing at it), sorted by source id.
    pub fn in_edges(&self, id: NodeId) -> &[AdjEntry] {
        self.index
            .get(&id)
            .map_or(&[][..], |&i| &self.in_adj[i])
    }

    /// Destinations of `id`'s out-edges, sorted ascending.
    pub fn out_neighbors(&self, id: NodeId) -> &[NodeId] {
        self.index
            .get(&id)
            .map_or(&[][..], |&i| &self.out_adj[i])
    }

    /// All edges in canonical (dst, src) order.
    pub fn edges(&self) -> impl Iterator<Item = EdgeRecord> + '_ {
        self.nodes.iter().enumerate().flat_map(move |(i, n)| {
            self.in_adj[i].iter().map(move |e| EdgeRecord {
                src: e.src,
                dst: n.id,
                weight: e.weight,
                features: e.features.clone(),
            })
        })
    }

    /// Returns a graph where every edge u->v is accompanied by v->u with the
    /// same weight and features. Existing reverse edges are left untouched,
    /// so the operation is idempotent.
    pub fn symmetrize(&self) -> Graph {
        let mut edges: Vec<EdgeRecord> = self.edges().collect();
        let present: BTreeSet<(NodeId, NodeId)> =
            edges.iter().map(|e| (e.src, e.dst)).collect();
        let mut added = Vec::new();
        for e in &edges {
            if e.src != e.dst && !present.contains(&(e.dst, e.src)) {
                added.push(EdgeRecord {
                    src: e.dst,
                    dst: e.src,
                    weight: e.weight,
                    features: e.features.clone(),
                });
            }
        }
        edges.extend(added);
        Graph::from_records(self.nodes.clone(), edges)
            .expect("symmetrizing a valid graph cannot fail")
    }

    /// Rewrites edge weights to the symmetric degree normalization used by
    /// GCN layers: a self-loop is added at every node and each edge u->v gets
    /// weight w_{v,u} / sqrt(d_v * d_u), where d_v = 1 + sum of v's in-edge
    /// weights. Aggregating with these weights is exactly the normalized
    /// adjacency product, so downstream layers can treat it as a plain
    /// weighted sum.
    pub fn gcn_normalize(&self) -> Graph {
        let degree: HashMap<NodeId, f64> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let d: f64 = 1.0 + self.in_adj[i].iter().map(|e| e.weight as f64).sum::<f64>();
                (n.id, d)
            })
            .collect();
        let mut edges = Vec::with_capacity(self.edge_count + self.nodes.len());
        for n in &self.nodes {
            let d = degree[&n.id];
            edges.push(EdgeRecord::new(
                n.id,
                n.id,
                (1.0 / d) as f32,
                vec![0.0; self.edge_dim],
            ));
        }
        for e in self.edges() {
            if e.src == e.dst {
                continue; // replaced by the normalized self-loop
            }
            let w = e.weight as f64 / (degree[&e.dst] * degree[&e.src]).sqrt();
            edges.push(EdgeRecord::new(e.src, e.dst, w as f32, e.features));
        }
        Graph::from_records(self.nodes.clone(), edges)
            .expect("normalizing a valid graph cannot fail")
    }

    /// Builds the GraphFeature induced by `node_ids`: those nodes plus every
    /// edge of this graph with both endpoints in the set.
    pub fn induce(&self, target: NodeId, hop: u32, node_ids: &BTreeSet<NodeId>) -> GraphFeature {
        let nodes: Vec<NodeRecord> = node_ids
            .iter()
            .filter_map(|id| self.node(*id).cloned())
            .collect();
        let mut edges = Vec::new();
        for &dst in node_ids {
            for e in self.in_edges(dst) {
                if node_ids.contains(&e.src) {
                    edges.push(EdgeRecord {
                        src: e.src,
                        dst,
                        weight: e.weight,
                        features: e.features.clone(),
                    });
                }
            }
        }
        GraphFeature {
            target_id: target,
            hop,
            nodes,
            edges,
        }
    }
}

// ====== Table I/O ======

fn read_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>, GraphError> {
    let file = std::fs::File::open(path)?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

/// Loads a node table; `dim = None` infers the feature arity from the first
/// row and then enforces it on the rest.
pub fn load_node_table(path: &Path, dim: Option<usize>) -> Result<Vec<NodeRecord>, GraphError> {
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    let mut dim = dim;
    for (lineno, line) in read_lines(path)? {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec = NodeRecord::parse_line(&line, dim, lineno)?;
        dim.get_or_insert(rec.features.len());
        if seen.insert(rec.id, lineno).is_some() {
            return Err(GraphError::DuplicateNode(rec.id));
        }
        records.push(rec);
    }
    Ok(records)
}

/// Loads an edge table, checking both endpoints against `nodes`.
pub fn load_edge_table(
    path: &Path,
    dim: Option<usize>,
    nodes: &BTreeSet<NodeId>,
) -> Result<Vec<EdgeRecord>, GraphError> {
    let mut records = Vec::new();
    let mut dim = dim;
    for (lineno, line) in read_lines(path)? {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec = EdgeRecord::parse_line(&line, dim, lineno)?;
        dim.get_or_insert(rec.features.len());
        for end in [rec.src, rec.dst] {
            if !nodes.contains(&end) {
                return Err(GraphError::DanglingEdge(end));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

/// Loads both tables and assembles the graph.
pub fn load_graph(node_path: &Path, edge_path: &Path) -> Result<Graph, GraphError> {
    let nodes = load_node_table(node_path, None)?;
    let ids: BTreeSet<NodeId> = nodes.iter().map(|n| n.id).collect();
    let edges = load_edge_table(edge_path, None, &ids)?;
    Graph::from_records(nodes, edges)
}

pub fn write_node_table(path: &Path, nodes: &[NodeRecord]) -> Result<(), GraphError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for n in nodes {
        writeln!(f, "{}", n.to_line())?;
    }
    Ok(())
}

pub fn write_edge_table<'a>(
    path: &Path,
    edges: impl Iterator<Item = EdgeRecord> + 'a,
) -> Result<(), GraphError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in edges {
        writeln!(f, "{}", e.to_line())?;
    }
    Ok(())
}

// ====== GraphFeature ======

/// A target node with its k-hop neighborhood: the self-contained unit that
/// training and inference consume. Node lines are sorted by id and edge
/// lines by (dst, src), so equal subgraphs serialize to equal bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeature {
    pub target_id: NodeId,
    pub hop: u32,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}

impl GraphFeature {
    /// Sorts into canonical order and validates the membership invariants.
    pub fn new(
        target_id: NodeId,
        hop: u32,
        mut nodes: Vec<NodeRecord>,
        mut edges: Vec<EdgeRecord>,
    ) -> Result<Self, GraphError> {
        nodes.sort_by_key(|n| n.id);
        edges.sort_by_key(|e| (e.dst, e.src));
        let gf = GraphFeature {
            target_id,
            hop,
            nodes,
            edges,
        };
        gf.validate()?;
        Ok(gf)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let ids: BTreeSet<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        if ids.len() != self.nodes.len() {
            return Err(GraphError::SchemaError(format!(
                "subgraph of {} contains duplicate nodes",
                self.target_id
            )));
        }
        if !ids.contains(&self.target_id) {
            return Err(GraphError::SchemaError(format!(
                "target {} missing from its own subgraph",
                self.target_id
            )));
        }
        for e in &self.edges {
            if !ids.contains(&e.src) || !ids.contains(&e.dst) {
                return Err(GraphError::SchemaError(format!(
                    "edge {}->{} leaves the subgraph of {}",
                    e.src, e.dst, self.target_id
                )));
            }
        }
        for pair in self.nodes.windows(2) {
            if pair[0].id >= pair[1].id {
                return Err(GraphError::SchemaError("node lines out of order".into()));
            }
        }
        for pair in self.edges.windows(2) {
            if (pair[0].dst, pair[0].src) >= (pair[1].dst, pair[1].src) {
                return Err(GraphError::SchemaError("edge lines out of order".into()));
            }
        }
        Ok(())
    }

    /// Canonical multi-line text form (no trailing newline):
    /// `GF v1 target=<id> hop=<k> n=<nodes> m=<edges>` + node lines + edge lines.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "GF v1 target={} hop={} n={} m={}",
            self.target_id,
            self.hop,
            self.nodes.len(),
            self.edges.len()
        );
        for n in &self.nodes {
            let _ = write!(s, "\n{}", n.to_line());
        }
        for e in &self.edges {
            let _ = write!(s, "\n{}", e.to_line());
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self, GraphError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(GraphError::ParseError {
            line: 1,
            msg: "empty GraphFeature record".into(),
        })?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 6 || fields[0] != "GF" || fields[1] != "v1" {
            return Err(GraphError::ParseError {
                line: 1,
                msg: format!("bad GraphFeature header {header:?}"),
            });
        }
        let grab = |i: usize, name: &str| -> Result<u64, GraphError> {
            let f: &str = fields[i];
            let v = f.strip_prefix(name).and_then(|v| v.strip_prefix('='));
            v.and_then(|v| v.parse().ok()).ok_or(GraphError::ParseError {
                line: 1,
                msg: format!("bad header field {f:?}, expected {name}=<int>"),
            })
        };
        let target_id = grab(2, "target")?;
        let hop = grab(3, "hop")? as u32;
        let n = grab(4, "n")? as usize;
        let m = grab(5, "m")? as usize;

        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            let (i, line) = lines.next().ok_or(GraphError::ParseError {
                line: n + 1,
                msg: "truncated GraphFeature: missing node lines".into(),
            })?;
            nodes.push(NodeRecord::parse_line(line, None, i + 1)?);
        }
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let (i, line) = lines.next().ok_or(GraphError::ParseError {
                line: n + m + 1,
                msg: "truncated GraphFeature: missing edge lines".into(),
            })?;
            edges.push(EdgeRecord::parse_line(line, None, i + 1)?);
        }
        if lines.next().is_some() {
            return Err(GraphError::ParseError {
                line: n + m + 2,
                msg: "trailing lines after GraphFeature record".into(),
            });
        }
        let gf = GraphFeature {
            target_id,
            hop,
            nodes,
            edges,
        };
        gf.validate()?;
        Ok(gf)
    }

    /// Single-line form for embedding in tab-separated triples: newlines and
    /// backslashes are escaped, tabs cannot occur in the text form's payload
    /// positions that matter because the line is always the final field.
    pub fn to_escaped_line(&self) -> String {
        self.to_text().replace('\\', "\\\\").replace('\n', "\\n")
    }

    pub fn parse_escaped_line(line: &str) -> Result<Self, GraphError> {
        let mut out = String::with_capacity(line.len());
        let mut chars = line.chars();
        while let Some(c) = chars.next() {
            if c != '\\' {
                out.push(c);
                continue;
            }
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                other => {
                    return Err(GraphError::ParseError {
                        line: 1,
                        msg: format!("bad escape sequence \\{}", other.unwrap_or(' ')),
                    })
                }
            }
        }
        Self::parse_text(&out)
    }
}

// ====== Synthetic graphs ======

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticModel {
    /// Chain i+1 -> i: every node points at its predecessor.
    Path,
    /// All nodes point at node 0.
    Star,
    /// Preferential attachment on in-degree, yielding skewed hubs.
    PowerLaw,
}

impl std::str::FromStr for SyntheticModel {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self, GraphError> {
        match s {
            "path" => Ok(SyntheticModel::Path),
            "star" => Ok(SyntheticModel::Star),
            "power_law" => Ok(SyntheticModel::PowerLaw),
            other => Err(GraphError::SchemaError(format!(
                "unknown synthetic model {other:?} (expected path|star|power_law)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n: usize,
    pub model: SyntheticModel,
    pub seed: u64,
    pub node_dim: usize,
    pub edge_dim: usize,
}

/// Deterministically generates a graph from the spec. Feature dim 0 carries
/// `id + 1` (so tiny fixtures are readable); remaining dims are seeded
/// uniform values.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Graph, GraphError> {
    if spec.n == 0 {
        return Err(GraphError::EmptySpec);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut node_feats = |id: NodeId| -> Vec<f32> {
        let mut f = Vec::with_capacity(spec.node_dim);
        if spec.node_dim > 0 {
            f.push((id + 1) as f32);
        }
        for _ in 1..spec.node_dim.max(1) {
            if f.len() < spec.node_dim {
                f.push(rng.random_range(-1.0..1.0f32));
            }
        }
        f
    };
    let nodes: Vec<NodeRecord> = (0..spec.n as NodeId)
        .map(|id| NodeRecord::new(id, node_feats(id)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut edge = |src: NodeId, dst: NodeId, weight: f32, rng: &mut ChaCha8Rng| -> EdgeRecord {
        let features = (0..spec.edge_dim)
            .map(|_| rng.random_range(0.0..1.0f32))
            .collect();
        EdgeRecord::new(src, dst, weight, features)
    };
    let mut edges = Vec::new();
    match spec.model {
        SyntheticModel::Path => {
            for i in 1..spec.n as NodeId {
                edges.push(edge(i, i - 1, 1.0, &mut rng));
            }
        }
        SyntheticModel::Star => {
            for i in 1..spec.n as NodeId {
                edges.push(edge(i, 0, 1.0, &mut rng));
            }
        }
        SyntheticModel::PowerLaw => {
            // Preferential attachment: each arriving node emits up to 2 edges
            // whose targets are drawn proportional to in-degree + 1.
            let mut pool: Vec<NodeId> = vec![0];
            for i in 1..spec.n as NodeId {
                let mut targets = BTreeSet::new();
                let wanted = 2.min(i as usize);
                let mut attempts = 0;
                while targets.len() < wanted && attempts < 32 {
                    let t = pool[rng.random_range(0..pool.len())];
                    attempts += 1;
                    if t != i {
                        targets.insert(t);
                    }
                }
                for t in targets {
                    let w = rng.random_range(0.5..1.5f32);
                    edges.push(edge(i, t, w, &mut rng));
                    pool.push(t);
                }
                pool.push(i);
            }
        }
    }
    Graph::from_records(nodes, edges)
}
