//! k-hop neighborhood generation: one Map pass emits self/in-edge/out-edge
//! records per node, then K Reduce rounds merge each node's accumulated
//! neighborhood with its in-neighbors' and propagate the result downstream.
//! After round k, every node's SelfInfo holds its k-hop neighborhood.
//!
//! Hub keys whose in-edge group exceeds a threshold are split by suffixed
//! shuffle keys, reduced per suffix, and inverted back to the original key.
//! Sampling keeps at most `fanout` in-edges per key using stable per-edge
//! priorities, so the same edges survive in every round and the sampled
//! subgraph's in-degrees stay bounded by the fanout.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::engine::{self, EngineConfig, KeyedRecord, ShuffleKey};
use crate::graph::{EdgeRecord, Graph, GraphError, GraphFeature, NodeId, NodeRecord};

#[derive(Debug, Error)]
pub enum FlatError {
    #[error("malformed group at key {key}: {msg}")]
    MalformedGroup { key: ShuffleKey, msg: String },
    #[error("unknown target node {0}")]
    UnknownTarget(NodeId),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
}

// ====== Sampling and re-indexing configuration ======

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingKind {
    None,
    Uniform,
    Weighted,
}

#[derive(Debug, Clone, Copy)]
pub struct SamplingStrategy {
    pub kind: SamplingKind,
    pub fanout: usize,
    pub seed: u64,
}

impl SamplingStrategy {
    pub fn none() -> Self {
        SamplingStrategy {
            kind: SamplingKind::None,
            fanout: usize::MAX,
            seed: 0,
        }
    }

    pub fn uniform(fanout: usize, seed: u64) -> Self {
        SamplingStrategy {
            kind: SamplingKind::Uniform,
            fanout,
            seed,
        }
    }

    pub fn weighted(fanout: usize, seed: u64) -> Self {
        SamplingStrategy {
            kind: SamplingKind::Weighted,
            fanout,
            seed,
        }
    }
}

/// Parses `none`, `uniform:<fanout>`, or `weighted:<fanout>`, with an
/// optional trailing `:<seed>` segment.
impl std::str::FromStr for SamplingStrategy {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self, GraphError> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or("");
        if kind == "none" {
            return match parts.next() {
                None => Ok(SamplingStrategy::none()),
                Some(_) => Err(GraphError::SchemaError(format!(
                    "sampling strategy {s:?} takes no fanout"
                ))),
            };
        }
        let fanout: usize = parts
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| {
                GraphError::SchemaError(format!(
                    "sampling strategy {s:?}: expected none|uniform:<fanout>|weighted:<fanout>"
                ))
            })?;
        let seed: u64 = match parts.next() {
            None => 0,
            Some(v) => v.parse().map_err(|_| {
                GraphError::SchemaError(format!("sampling strategy {s:?}: bad seed"))
            })?,
        };
        match kind {
            "uniform" => Ok(SamplingStrategy::uniform(fanout, seed)),
            "weighted" => Ok(SamplingStrategy::weighted(fanout, seed)),
            other => Err(GraphError::SchemaError(format!(
                "unknown sampling kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReindexConfig {
    /// In-edge group size above which the key is split by suffix.
    pub threshold: usize,
    /// Number of suffixes a split key fans out to.
    pub suffixes: u32,
    pub seed: u64,
}

impl Default for ReindexConfig {
    fn default() -> Self {
        ReindexConfig {
            threshold: 1000,
            suffixes: 8,
            seed: 0,
        }
    }
}

#[derive(Clone)]
pub struct FlatConfig {
    pub sampling: SamplingStrategy,
    pub reindex: ReindexConfig,
    /// When present (sampling disabled), merged edge sets are re-induced
    /// against the full graph so every edge between subgraph nodes appears,
    /// not only the edges seen along propagation paths.
    pub graph: Option<Arc<Graph>>,
}

// ====== InfoRecord ======

/// Shuffle value of the neighborhood pipeline. The encoding starts with a
/// kind tag that sorts SelfInfo first within a value-sorted group.
#[derive(Debug, Clone, PartialEq)]
pub enum InfoRecord {
    /// The key node's accumulated neighborhood.
    SelfInfo(GraphFeature),
    /// An in-neighbor's accumulated neighborhood plus the connecting edge.
    InEdge { gf: GraphFeature, edge: EdgeRecord },
    /// A downstream destination; immutable across rounds.
    OutEdge { edge: EdgeRecord },
}

impl InfoRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        match self {
            InfoRecord::SelfInfo(gf) => {
                b.push(0);
                b.extend_from_slice(gf.to_text().as_bytes());
            }
            InfoRecord::InEdge { gf, edge } => {
                b.push(1);
                b.extend_from_slice(edge.to_line().as_bytes());
                b.push(b'\n');
                b.extend_from_slice(gf.to_text().as_bytes());
            }
            InfoRecord::OutEdge { edge } => {
                b.push(2);
                b.extend_from_slice(edge.to_line().as_bytes());
            }
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, GraphError> {
        let bad = |msg: &str| GraphError::ParseError {
            line: 1,
            msg: msg.into(),
        };
        let (tag, rest) = bytes.split_first().ok_or_else(|| bad("empty info record"))?;
        let text = std::str::from_utf8(rest).map_err(|_| bad("info record is not utf-8"))?;
        match tag {
            0 => Ok(InfoRecord::SelfInfo(GraphFeature::parse_text(text)?)),
            1 => {
                let (edge_line, gf_text) = text
                    .split_once('\n')
                    .ok_or_else(|| bad("in-edge record missing neighborhood"))?;
                Ok(InfoRecord::InEdge {
                    gf: GraphFeature::parse_text(gf_text)?,
                    edge: EdgeRecord::parse_line(edge_line, None, 1)?,
                })
            }
            2 => Ok(InfoRecord::OutEdge {
                edge: EdgeRecord::parse_line(text, None, 1)?,
            }),
            t => Err(bad(&format!("unknown info record tag {t}"))),
        }
    }
}

fn single_node_gf(rec: &NodeRecord) -> GraphFeature {
    GraphFeature {
        target_id: rec.id,
        hop: 0,
        nodes: vec![rec.clone()],
        edges: Vec::new(),
    }
}

// ====== Map ======

/// Map output for one node: its SelfInfo, one InEdge record per in-edge
/// (keyed by this node), and one OutEdge record per in-edge (keyed by the
/// source, routing future propagation back here).
pub fn flat_map_node(g: &Graph, rec: &NodeRecord) -> Vec<KeyedRecord> {
    let v = rec.id;
    let mut out = Vec::with_capacity(1 + 2 * g.in_edges(v).len());
    out.push(KeyedRecord::new(
        ShuffleKey::node(v),
        InfoRecord::SelfInfo(single_node_gf(rec)).encode(),
    ));
    for adj in g.in_edges(v) {
        let edge = EdgeRecord {
            src: adj.src,
            dst: v,
            weight: adj.weight,
            features: adj.features.clone(),
        };
        let src_rec = g.node(adj.src).expect("edge endpoints are validated");
        out.push(KeyedRecord::new(
            ShuffleKey::node(v),
            InfoRecord::InEdge {
                gf: single_node_gf(src_rec),
                edge: edge.clone(),
            }
            .encode(),
        ));
        out.push(KeyedRecord::new(
            ShuffleKey::node(adj.src),
            InfoRecord::OutEdge { edge }.encode(),
        ));
    }
    out
}

pub fn flat_map(g: &Graph) -> Vec<KeyedRecord> {
    g.nodes()
        .iter()
        .flat_map(|rec| flat_map_node(g, rec))
        .collect()
}

// ====== Stable sampling priorities ======

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic uniform draw in (0, 1] keyed by (seed, dst, src): the same
/// edge gets the same draw in every round, which keeps sampled neighborhoods
/// consistent across hops.
fn stable_unit(seed: u64, dst: NodeId, src: NodeId) -> f64 {
    let h = splitmix64(seed ^ splitmix64(dst ^ splitmix64(src)));
    ((h >> 11) + 1) as f64 / (1u64 << 53) as f64
}

fn priority(s: &SamplingStrategy, dst: NodeId, edge: &EdgeRecord) -> f64 {
    let u = stable_unit(s.seed, dst, edge.src);
    match s.kind {
        SamplingKind::None => 0.0,
        SamplingKind::Uniform => u,
        // Weighted reservoir priority: smaller is better, heavier edges get
        // systematically smaller draws.
        SamplingKind::Weighted => -u.ln() / edge.weight as f64,
    }
}

/// Keeps the `fanout` best in-edge records by stable priority (ties broken
/// by source id). Identity when sampling is off or the group already fits.
fn sample_in_edges(
    mut ins: Vec<(GraphFeature, EdgeRecord)>,
    dst: NodeId,
    s: &SamplingStrategy,
    fanout: usize,
) -> Vec<(GraphFeature, EdgeRecord)> {
    if s.kind == SamplingKind::None || ins.len() <= fanout {
        return ins;
    }
    ins.sort_by(|a, b| {
        let pa = priority(s, dst, &a.1);
        let pb = priority(s, dst, &b.1);
        pa.partial_cmp(&pb)
            .expect("priorities are finite")
            .then(a.1.src.cmp(&b.1.src))
    });
    ins.truncate(fanout);
    ins
}

// ====== Reduce ======

/// Accumulator for one suffix subgroup: node and edge unions keyed
/// canonically so the final merge is order-independent.
#[derive(Default)]
struct PartialMerge {
    nodes: BTreeMap<NodeId, NodeRecord>,
    edges: BTreeMap<(NodeId, NodeId), EdgeRecord>,
}

impl PartialMerge {
    fn absorb_gf(&mut self, gf: GraphFeature) {
        for n in gf.nodes {
            self.nodes.insert(n.id, n);
        }
        for e in gf.edges {
            self.edges.insert((e.dst, e.src), e);
        }
    }

    fn absorb_edge(&mut self, e: EdgeRecord) {
        self.edges.insert((e.dst, e.src), e);
    }

    fn merge(&mut self, other: PartialMerge) {
        self.nodes.extend(other.nodes);
        self.edges.extend(other.edges);
    }
}

/// One reduce step for one key group: validate the single SelfInfo, split
/// oversized groups by suffix and reduce each before inverting, sample the
/// surviving in-edges, merge everything into the node's new SelfInfo, then
/// propagate it along the OutEdge routes.
pub fn flat_reduce(
    key: &ShuffleKey,
    records: Vec<InfoRecord>,
    cfg: &FlatConfig,
) -> Result<Vec<KeyedRecord>, FlatError> {
    let malformed = |msg: &str| FlatError::MalformedGroup {
        key: *key,
        msg: msg.into(),
    };
    let mut self_gf: Option<GraphFeature> = None;
    let mut ins: Vec<(GraphFeature, EdgeRecord)> = Vec::new();
    let mut outs: Vec<EdgeRecord> = Vec::new();
    for rec in records {
        match rec {
            InfoRecord::SelfInfo(gf) => {
                if self_gf.replace(gf).is_some() {
                    return Err(malformed("duplicate SelfInfo"));
                }
            }
            InfoRecord::InEdge { gf, edge } => ins.push((gf, edge)),
            InfoRecord::OutEdge { edge } => outs.push(edge),
        }
    }
    let self_gf = self_gf.ok_or_else(|| malformed("missing SelfInfo"))?;
    let v = key.id;

    let selected = if ins.len() > cfg.reindex.threshold {
        // Re-index: partition by suffixed key, reduce each subgroup, invert.
        let suffixes = cfg.reindex.suffixes.max(1);
        let mut subgroups: BTreeMap<ShuffleKey, Vec<(GraphFeature, EdgeRecord)>> = BTreeMap::new();
        for (gf, edge) in ins {
            let s = (splitmix64(cfg.reindex.seed ^ splitmix64(edge.src)) % suffixes as u64) as u32;
            subgroups
                .entry(ShuffleKey::with_suffix(v, s))
                .or_default()
                .push((gf, edge));
        }
        let per_group = cfg.sampling.fanout.div_ceil(suffixes as usize);
        let mut inverted = Vec::new();
        for (_, group) in subgroups {
            inverted.extend(sample_in_edges(group, v, &cfg.sampling, per_group));
        }
        // Cap at the overall fanout so the sampling bound survives the split.
        sample_in_edges(inverted, v, &cfg.sampling, cfg.sampling.fanout)
    } else {
        sample_in_edges(ins, v, &cfg.sampling, cfg.sampling.fanout)
    };

    let hop = self_gf.hop + 1;
    let mut acc = PartialMerge::default();
    acc.absorb_gf(self_gf);
    for (gf, edge) in selected {
        acc.absorb_gf(gf);
        acc.absorb_edge(edge);
    }
    let merged = match &cfg.graph {
        Some(g) => {
            let ids: BTreeSet<NodeId> = acc.nodes.keys().copied().collect();
            g.induce(v, hop, &ids)
        }
        None => GraphFeature {
            target_id: v,
            hop,
            nodes: acc.nodes.into_values().collect(),
            edges: acc.edges.into_values().collect(),
        },
    };
    merged.validate()?;

    let mut out = Vec::with_capacity(1 + 2 * outs.len());
    out.push(KeyedRecord::new(
        ShuffleKey::node(v),
        InfoRecord::SelfInfo(merged.clone()).encode(),
    ));
    for edge in outs {
        out.push(KeyedRecord::new(
            ShuffleKey::node(edge.dst),
            InfoRecord::InEdge {
                gf: merged.clone(),
                edge: edge.clone(),
            }
            .encode(),
        ));
        out.push(KeyedRecord::new(
            ShuffleKey::node(v),
            InfoRecord::OutEdge { edge }.encode(),
        ));
    }
    Ok(out)
}

// ====== Driver ======

/// Runs the full pipeline: Map once, then `k` merge-and-propagate rounds,
/// and extracts the SelfInfo of every requested target.
pub fn build_graphfeatures(
    g: &Arc<Graph>,
    targets: &BTreeSet<NodeId>,
    k: u32,
    sampling: SamplingStrategy,
    reindex: ReindexConfig,
    engine_cfg: &EngineConfig,
) -> Result<BTreeMap<NodeId, GraphFeature>, FlatError> {
    for &t in targets {
        if !g.contains(t) {
            return Err(FlatError::UnknownTarget(t));
        }
    }
    let flat_cfg = FlatConfig {
        sampling,
        reindex,
        graph: (sampling.kind == SamplingKind::None).then(|| Arc::clone(g)),
    };
    let graph = Arc::clone(g);
    let mapper = move |rec: &NodeRecord| Ok(flat_map_node(&graph, rec));
    let reducer = move |key: &ShuffleKey, values: &[Vec<u8>]| {
        let records = values
            .iter()
            .map(|v| InfoRecord::decode(v))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        flat_reduce(key, records, &flat_cfg).map_err(|e| e.to_string())
    };
    let ckpt = engine::run_job(g.nodes(), mapper, reducer, k as usize, engine_cfg)?;

    let mut out = BTreeMap::new();
    for rec in engine::read_round(&ckpt)? {
        if rec.key.suffix.is_none()
            && targets.contains(&rec.key.id)
            && rec.value.first() == Some(&0)
        {
            if let InfoRecord::SelfInfo(gf) = InfoRecord::decode(&rec.value)? {
                out.insert(rec.key.id, gf);
            }
        }
    }
    for &t in targets {
        if !out.contains_key(&t) {
            return Err(FlatError::UnknownTarget(t));
        }
    }
    Ok(out)
}

/// Reference implementation: reverse BFS along in-edges collects every node
/// within distance `k` of `v`, then the edge set is induced over that node
/// set. No sampling, no engine involvement.
pub fn khop_oracle(g: &Graph, v: NodeId, k: u32) -> GraphFeature {
    let mut dist: BTreeMap<NodeId, u32> = BTreeMap::new();
    dist.insert(v, 0);
    let mut frontier = vec![v];
    for d in 1..=k {
        let mut next = Vec::new();
        for &node in &frontier {
            for adj in g.in_edges(node) {
                if !dist.contains_key(&adj.src) {
                    dist.insert(adj.src, d);
                    next.push(adj.src);
                }
            }
        }
        frontier = next;
    }
    let ids: BTreeSet<NodeId> = dist.keys().copied().collect();
    g.induce(v, k, &ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, SyntheticModel, SyntheticSpec};

    fn g_toy() -> Arc<Graph> {
        Arc::new(
            generate_synthetic(&SyntheticSpec {
                n: 4,
                model: SyntheticModel::Path,
                seed: 7,
                node_dim: 1,
                edge_dim: 0,
            })
            .unwrap(),
        )
    }

    fn synth(n: usize, model: SyntheticModel, seed: u64) -> Arc<Graph> {
        Arc::new(
            generate_synthetic(&SyntheticSpec {
                n,
                model,
                seed,
                node_dim: 2,
                edge_dim: 1,
            })
            .unwrap(),
        )
    }

    fn build_exact(
        g: &Arc<Graph>,
        targets: &BTreeSet<NodeId>,
        k: u32,
        reindex: ReindexConfig,
    ) -> BTreeMap<NodeId, GraphFeature> {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EngineConfig::new(dir.path()).with_workers(2);
        build_graphfeatures(g, targets, k, SamplingStrategy::none(), reindex, &cfg).unwrap()
    }

    #[test]
    fn map_emits_expected_records_for_g_toy() {
        let g = g_toy();
        let records = flat_map(&g);
        assert_eq!(records.len(), 10); // 4 self + 3 in-edge + 3 out-edge

        let kinds_at = |id: NodeId| -> Vec<u8> {
            let mut kinds: Vec<u8> = records
                .iter()
                .filter(|r| r.key == ShuffleKey::node(id))
                .map(|r| r.value[0])
                .collect();
            kinds.sort_unstable();
            kinds
        };
        assert_eq!(kinds_at(0), vec![0, 1]); // SelfInfo + InEdge from 1
        assert_eq!(kinds_at(3), vec![0, 2]); // SelfInfo + OutEdge to 2
    }

    #[test]
    fn map_isolated_node() {
        let g = synth(1, SyntheticModel::Path, 0);
        let records = flat_map(&g);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].value[0], 0);
    }

    #[test]
    fn map_star_hub_group_size() {
        let g = synth(101, SyntheticModel::Star, 0);
        let records = flat_map(&g);
        let hub = records
            .iter()
            .filter(|r| r.key == ShuffleKey::node(0))
            .count();
        assert_eq!(hub, 101); // SelfInfo + 100 InEdge
    }

    #[test]
    fn reduce_round_one_merges_and_propagates() {
        let g = g_toy();
        let records = vec![
            InfoRecord::SelfInfo(single_node_gf(g.node(1).unwrap())),
            InfoRecord::InEdge {
                gf: single_node_gf(g.node(2).unwrap()),
                edge: EdgeRecord::new(2, 1, 1.0, vec![]),
            },
            InfoRecord::OutEdge {
                edge: EdgeRecord::new(1, 0, 1.0, vec![]),
            },
        ];
        let cfg = FlatConfig {
            sampling: SamplingStrategy::none(),
            reindex: ReindexConfig::default(),
            graph: Some(Arc::clone(&g)),
        };
        let out = flat_reduce(&ShuffleKey::node(1), records, &cfg).unwrap();

        let new_self = InfoRecord::decode(&out[0].value).unwrap();
        match new_self {
            InfoRecord::SelfInfo(gf) => {
                assert_eq!(gf.hop, 1);
                let ids: Vec<NodeId> = gf.nodes.iter().map(|n| n.id).collect();
                assert_eq!(ids, vec![1, 2]);
                assert_eq!(gf.edges.len(), 1);
                assert_eq!((gf.edges[0].src, gf.edges[0].dst), (2, 1));
            }
            other => panic!("expected SelfInfo first, got {other:?}"),
        }
        // Propagation to key 0 plus the re-emitted OutEdge.
        assert!(out
            .iter()
            .any(|r| r.key == ShuffleKey::node(0) && r.value[0] == 1));
        assert!(out
            .iter()
            .any(|r| r.key == ShuffleKey::node(1) && r.value[0] == 2));
    }

    #[test]
    fn reduce_missing_self_is_malformed() {
        let cfg = FlatConfig {
            sampling: SamplingStrategy::none(),
            reindex: ReindexConfig::default(),
            graph: None,
        };
        let r = flat_reduce(&ShuffleKey::node(0), vec![], &cfg);
        assert!(matches!(r, Err(FlatError::MalformedGroup { .. })));

        let g = g_toy();
        let dup = vec![
            InfoRecord::SelfInfo(single_node_gf(g.node(0).unwrap())),
            InfoRecord::SelfInfo(single_node_gf(g.node(0).unwrap())),
        ];
        let r = flat_reduce(&ShuffleKey::node(0), dup, &cfg);
        assert!(matches!(r, Err(FlatError::MalformedGroup { .. })));
    }

    #[test]
    fn build_zero_hop_is_single_node() {
        let g = g_toy();
        let out = build_exact(&g, &[0].into(), 0, ReindexConfig::default());
        let gf = &out[&0];
        assert_eq!(gf.hop, 0);
        assert_eq!(gf.nodes.len(), 1);
        assert!(gf.edges.is_empty());
    }

    #[test]
    fn build_two_hop_g_toy() {
        let g = g_toy();
        let out = build_exact(&g, &[0].into(), 2, ReindexConfig::default());
        let gf = &out[&0];
        let ids: Vec<NodeId> = gf.nodes.iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        let edges: Vec<(NodeId, NodeId)> = gf.edges.iter().map(|e| (e.src, e.dst)).collect();
        assert_eq!(edges, vec![(1, 0), (2, 1)]);
    }

    #[test]
    fn build_multiple_targets_one_hop() {
        let g = g_toy();
        let out = build_exact(&g, &[0, 2].into(), 1, ReindexConfig::default());
        let ids0: Vec<NodeId> = out[&0].nodes.iter().map(|n| n.id).collect();
        let ids2: Vec<NodeId> = out[&2].nodes.iter().map(|n| n.id).collect();
        assert_eq!(ids0, vec![0, 1]);
        assert_eq!(ids2, vec![2, 3]);
    }

    #[test]
    fn build_unknown_target() {
        let g = g_toy();
        let dir = tempfile::tempdir().unwrap();
        let cfg = EngineConfig::new(dir.path());
        let r = build_graphfeatures(
            &g,
            &[9].into(),
            1,
            SamplingStrategy::none(),
            ReindexConfig::default(),
            &cfg,
        );
        assert!(matches!(r, Err(FlatError::UnknownTarget(9))));
    }

    #[test]
    fn oracle_matches_hand_traced_cases() {
        let g = g_toy();
        let gf = khop_oracle(&g, 0, 1);
        let ids: Vec<NodeId> = gf.nodes.iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![0, 1]);
        assert_eq!(gf.edges.len(), 1);

        let gf = khop_oracle(&g, 3, 3);
        let ids: Vec<NodeId> = gf.nodes.iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![3]);
        assert!(gf.edges.is_empty());

        let sym = Arc::new(g.symmetrize());
        let gf = khop_oracle(&sym, 1, 1);
        let ids: Vec<NodeId> = gf.nodes.iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(gf.edges.len(), 4);
    }

    #[test]
    fn pipeline_matches_oracle_bytes() {
        for (g, label) in [
            (g_toy(), "path"),
            (synth(25, SyntheticModel::Star, 3), "star"),
            (synth(60, SyntheticModel::PowerLaw, 5), "power_law"),
            (
                Arc::new(synth(40, SyntheticModel::PowerLaw, 9).symmetrize()),
                "symmetrized",
            ),
        ] {
            let targets: BTreeSet<NodeId> = g.ids().collect();
            for k in 0..=3u32 {
                let built = build_exact(&g, &targets, k, ReindexConfig::default());
                for v in g.ids() {
                    let oracle = khop_oracle(&g, v, k);
                    assert_eq!(
                        built[&v].to_text(),
                        oracle.to_text(),
                        "{label}: node {v} at k={k}"
                    );
                }
            }
        }
    }

    #[test]
    fn reindex_is_byte_transparent() {
        let g = synth(50, SyntheticModel::PowerLaw, 13);
        let targets: BTreeSet<NodeId> = g.ids().collect();
        let base = build_exact(&g, &targets, 2, ReindexConfig::default());
        let forced = build_exact(
            &g,
            &targets,
            2,
            ReindexConfig {
                threshold: 2,
                suffixes: 4,
                seed: 17,
            },
        );
        for v in g.ids() {
            assert_eq!(base[&v].to_text(), forced[&v].to_text(), "node {v}");
        }
    }

    #[test]
    fn uniform_fanout_bounds_star_hub() {
        let g = synth(101, SyntheticModel::Star, 0);
        let dir = tempfile::tempdir().unwrap();
        let cfg = EngineConfig::new(dir.path());
        let out = build_graphfeatures(
            &g,
            &[0].into(),
            1,
            SamplingStrategy::uniform(10, 42),
            ReindexConfig::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(out[&0].nodes.len(), 11);
        assert_eq!(out[&0].edges.len(), 10);
    }

    #[test]
    fn sampled_in_degree_stays_bounded() {
        let g = synth(120, SyntheticModel::PowerLaw, 21);
        let targets: BTreeSet<NodeId> = g.ids().collect();
        let dir = tempfile::tempdir().unwrap();
        let cfg = EngineConfig::new(dir.path());
        let out = build_graphfeatures(
            &g,
            &targets,
            3,
            SamplingStrategy::uniform(3, 7),
            ReindexConfig::default(),
            &cfg,
        )
        .unwrap();
        for gf in out.values() {
            let mut in_deg: BTreeMap<NodeId, usize> = BTreeMap::new();
            for e in &gf.edges {
                *in_deg.entry(e.dst).or_default() += 1;
            }
            for (&node, &d) in &in_deg {
                assert!(d <= 3, "node {node} has sampled in-degree {d}");
            }
        }
    }

    #[test]
    fn sampling_is_stable_across_rounds_and_runs() {
        let g = synth(80, SyntheticModel::PowerLaw, 2);
        let targets: BTreeSet<NodeId> = g.ids().collect();
        let s = SamplingStrategy::weighted(4, 99);
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let a = build_graphfeatures(
            &g,
            &targets,
            2,
            s,
            ReindexConfig::default(),
            &EngineConfig::new(dir1.path()),
        )
        .unwrap();
        let b = build_graphfeatures(
            &g,
            &targets,
            2,
            s,
            ReindexConfig::default(),
            &EngineConfig::new(dir2.path()).with_workers(4),
        )
        .unwrap();
        for v in g.ids() {
            assert_eq!(a[&v].to_text(), b[&v].to_text());
        }
    }

    #[test]
    fn weighted_sampling_prefers_heavy_edges() {
        // One overwhelming weight in a star: fanout=1 must keep it for any
        // reasonable seed because its priority is ~1e6 times smaller.
        let mut nodes = vec![NodeRecord::new(0, vec![0.0])];
        let mut edges = Vec::new();
        for i in 1..=20u64 {
            nodes.push(NodeRecord::new(i, vec![i as f32]));
            let w = if i == 13 { 1e6 } else { 1e-3 };
            edges.push(EdgeRecord::new(i, 0, w, vec![]));
        }
        let g = Arc::new(Graph::from_records(nodes, edges).unwrap());
        for seed in 0..20 {
            let dir = tempfile::tempdir().unwrap();
            let out = build_graphfeatures(
                &g,
                &[0].into(),
                1,
                SamplingStrategy::weighted(1, seed),
                ReindexConfig::default(),
                &EngineConfig::new(dir.path()),
            )
            .unwrap();
            let kept: Vec<NodeId> = out[&0].edges.iter().map(|e| e.src).collect();
            assert_eq!(kept, vec![13], "seed {seed}");
        }
    }

    #[test]
    fn monotonic_node_sets_over_k() {
        let g = synth(70, SyntheticModel::PowerLaw, 31);
        let targets: BTreeSet<NodeId> = g.ids().collect();
        let mut prev: Option<BTreeMap<NodeId, BTreeSet<NodeId>>> = None;
        for k in 0..=3 {
            let out = build_exact(&g, &targets, k, ReindexConfig::default());
            let sets: BTreeMap<NodeId, BTreeSet<NodeId>> = out
                .iter()
                .map(|(v, gf)| (*v, gf.nodes.iter().map(|n| n.id).collect()))
                .collect();
            if let Some(prev) = &prev {
                for v in g.ids() {
                    assert!(prev[&v].is_subset(&sets[&v]), "node {v} at k={k}");
                }
            }
            prev = Some(sets);
        }
    }

    #[test]
    fn sampling_strategy_parses() {
        let s: SamplingStrategy = "none".parse().unwrap();
        assert_eq!(s.kind, SamplingKind::None);
        let s: SamplingStrategy = "uniform:10".parse().unwrap();
        assert_eq!((s.kind, s.fanout, s.seed), (SamplingKind::Uniform, 10, 0));
        let s: SamplingStrategy = "weighted:5:42".parse().unwrap();
        assert_eq!((s.kind, s.fanout, s.seed), (SamplingKind::Weighted, 5, 42));
        assert!("bogus:1".parse::<SamplingStrategy>().is_err());
        assert!("uniform".parse::<SamplingStrategy>().is_err());
    }
}
