//! Labels, training triples, and dataset assembly.
//!
//! A training sample is one line `<target_id>\t<label>\t<graphfeature>`:
//! the label field is a class index, a comma-separated list of positive
//! class indices (multi-label), or `-` for unlabeled; the final field is
//! the escaped single-line GraphFeature record. Datasets on disk are a
//! directory of `nodes.tsv`, `edges.tsv`, `labels.tsv`, and optionally
//! `split.tsv` with train/val/test assignments.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{
    EdgeRecord, Graph, GraphError, GraphFeature, NodeId, NodeRecord,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Unlabeled,
    Class(u32),
    /// Sorted, de-duplicated positive class indices.
    Multi(Vec<u32>),
}

impl Label {
    pub fn to_field(&self) -> String {
        match self {
            Label::Unlabeled => "-".into(),
            Label::Class(c) => c.to_string(),
            Label::Multi(cs) => cs
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        }
    }

    pub fn parse_field(s: &str, line: usize) -> Result<Self, GraphError> {
        if s == "-" {
            return Ok(Label::Unlabeled);
        }
        let mut classes = Vec::new();
        for part in s.split(',') {
            let c: u32 = part.parse().map_err(|_| GraphError::ParseError {
                line,
                msg: format!("bad label field {s:?}"),
            })?;
            classes.push(c);
        }
        if classes.len() == 1 {
            Ok(Label::Class(classes[0]))
        } else {
            classes.sort_unstable();
            classes.dedup();
            Ok(Label::Multi(classes))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub target: NodeId,
    pub label: Label,
    pub gf: GraphFeature,
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> Result<(), GraphError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in triples {
        writeln!(
            f,
            "{}\t{}\t{}",
            t.target,
            t.label.to_field(),
            t.gf.to_escaped_line()
        )?;
    }
    Ok(())
}

pub fn read_triples(path: &Path) -> Result<Vec<Triple>, GraphError> {
    let file = std::fs::File::open(path)?;
    let mut triples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let mut fields = line.splitn(3, '\t');
        let (target, label, gf) = match (fields.next(), fields.next(), fields.next()) {
            (Some(t), Some(l), Some(g)) => (t, l, g),
            _ => {
                return Err(GraphError::ParseError {
                    line: lineno,
                    msg: "expected <target>\\t<label>\\t<graphfeature>".into(),
                })
            }
        };
        let target: NodeId = target.parse().map_err(|_| GraphError::ParseError {
            line: lineno,
            msg: format!("bad target id {target:?}"),
        })?;
        let label = Label::parse_field(label, lineno)?;
        let gf = GraphFeature::parse_escaped_line(gf)?;
        if gf.target_id != target {
            return Err(GraphError::SchemaError(format!(
                "line {lineno}: triple target {target} does not match subgraph target {}",
                gf.target_id
            )));
        }
        triples.push(Triple { target, label, gf });
    }
    Ok(triples)
}

/// Loads `<id>\t<label>` lines.
pub fn load_labels(path: &Path) -> Result<BTreeMap<NodeId, Label>, GraphError> {
    let file = std::fs::File::open(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (id, label) = line.split_once('\t').ok_or(GraphError::ParseError {
            line: lineno,
            msg: "expected <id>\\t<label>".into(),
        })?;
        let id: NodeId = id.parse().map_err(|_| GraphError::ParseError {
            line: lineno,
            msg: format!("bad node id {id:?}"),
        })?;
        if out.insert(id, Label::parse_field(label, lineno)?).is_some() {
            return Err(GraphError::DuplicateNode(id));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Loads `<id>\t<train|val|test>` lines.
pub fn load_split(path: &Path) -> Result<BTreeMap<NodeId, Split>, GraphError> {
    let file = std::fs::File::open(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (id, split) = line.split_once('\t').ok_or(GraphError::ParseError {
            line: lineno,
            msg: "expected <id>\\t<train|val|test>".into(),
        })?;
        let id: NodeId = id.parse().map_err(|_| GraphError::ParseError {
            line: lineno,
            msg: format!("bad node id {id:?}"),
        })?;
        let split = match split {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => {
                return Err(GraphError::ParseError {
                    line: lineno,
                    msg: format!("bad split value {other:?}"),
                })
            }
        };
        out.insert(id, split);
    }
    Ok(out)
}

pub struct Dataset {
    pub graph: Graph,
    pub labels: BTreeMap<NodeId, Label>,
    pub split: BTreeMap<NodeId, Split>,
}

/// Loads a dataset directory: `nodes.tsv` + `edges.tsv` (required),
/// `labels.tsv` and `split.tsv` when present.
pub fn load_dataset(dir: &Path) -> Result<Dataset, GraphError> {
    let graph = crate::graph::load_graph(&dir.join("nodes.tsv"), &dir.join("edges.tsv"))?;
    let labels_path = dir.join("labels.tsv");
    let labels = if labels_path.exists() {
        load_labels(&labels_path)?
    } else {
        BTreeMap::new()
    };
    let split_path = dir.join("split.tsv");
    let split = if split_path.exists() {
        load_split(&split_path)?
    } else {
        BTreeMap::new()
    };
    for id in labels.keys().chain(split.keys()) {
        if !graph.contains(*id) {
            return Err(GraphError::DanglingEdge(*id));
        }
    }
    Ok(Dataset {
        graph,
        labels,
        split,
    })
}

#[derive(Debug, Clone)]
pub struct SynthTaskSpec {
    pub n: usize,
    pub classes: u32,
    pub dim: usize,
    pub seed: u64,
    /// Intra-class edges per node; one extra cross-class edge is added per
    /// node so the task is not purely feature-separable.
    pub intra_edges: usize,
    pub noise: f32,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            n: 200,
            classes: 2,
            dim: 8,
            seed: 0,
            intra_edges: 3,
            noise: 0.8,
        }
    }
}

/// Generates a homophilic node-classification task: each class has a mean
/// feature vector, nodes get noisy copies of their class mean, and most
/// edges stay within a class. Deterministic per seed; splits 60/20/20.
pub fn synth_task(spec: &SynthTaskSpec) -> Result<Dataset, GraphError> {
    if spec.n == 0 || spec.classes == 0 || spec.dim == 0 {
        return Err(GraphError::EmptySpec);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| rng.random_range(-1.0..1.0f32)).collect())
        .collect();

    let mut nodes = Vec::with_capacity(spec.n);
    let mut labels = BTreeMap::new();
    let mut by_class: Vec<Vec<NodeId>> = vec![Vec::new(); spec.classes as usize];
    for id in 0..spec.n as NodeId {
        let c = (id % spec.classes as NodeId) as u32;
        let feats: Vec<f32> = means[c as usize]
            .iter()
            .map(|m| m + spec.noise * rng.random_range(-1.0..1.0f32))
            .collect();
        nodes.push(NodeRecord::new(id, feats));
        labels.insert(id, Label::Class(c));
        by_class[c as usize].push(id);
    }

    let mut edge_set = std::collections::BTreeSet::new();
    let mut edges = Vec::new();
    let mut add = |src: NodeId, dst: NodeId, edges: &mut Vec<EdgeRecord>,
                   edge_set: &mut std::collections::BTreeSet<(NodeId, NodeId)>| {
        if src != dst && edge_set.insert((src, dst)) {
            edges.push(EdgeRecord::new(src, dst, 1.0, vec![]));
        }
    };
    for id in 0..spec.n as NodeId {
        let c = (id % spec.classes as NodeId) as usize;
        let peers = &by_class[c];
        for _ in 0..spec.intra_edges {
            let peer = peers[rng.random_range(0..peers.len())];
            add(id, peer, &mut edges, &mut edge_set);
        }
        let other = rng.random_range(0..spec.n as NodeId);
        add(id, other, &mut edges, &mut edge_set);
    }

    let mut split = BTreeMap::new();
    for id in 0..spec.n as NodeId {
        let r = rng.random_range(0.0..1.0f32);
        let s = if r < 0.6 {
            Split::Train
        } else if r < 0.8 {
            Split::Val
        } else {
            Split::Test
        };
        split.insert(id, s);
    }
    Ok(Dataset {
        graph: Graph::from_records(nodes, edges)?,
        labels,
        split,
    })
}

/// Writes a dataset as the standard directory layout.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), GraphError> {
    std::fs::create_dir_all(dir)?;
    crate::graph::write_node_table(&dir.join("nodes.tsv"), ds.graph.nodes())?;
    crate::graph::write_edge_table(&dir.join("edges.tsv"), ds.graph.edges())?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("labels.tsv"))?);
    for (id, label) in &ds.labels {
        writeln!(f, "{id}\t{}", label.to_field())?;
    }
    if !ds.split.is_empty() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("split.tsv"))?);
        for (id, split) in &ds.split {
            writeln!(f, "{id}\t{}", split.as_str())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flat::khop_oracle;
    use crate::graph::{generate_synthetic, SyntheticModel, SyntheticSpec};

    #[test]
    fn label_field_round_trip() {
        for label in [
            Label::Unlabeled,
            Label::Class(3),
            Label::Multi(vec![1, 4, 7]),
        ] {
            let field = label.to_field();
            assert_eq!(Label::parse_field(&field, 1).unwrap(), label);
        }
        assert!(Label::parse_field("x", 1).is_err());
    }

    #[test]
    fn triples_round_trip() {
        let g = generate_synthetic(&SyntheticSpec {
            n: 10,
            model: SyntheticModel::PowerLaw,
            seed: 4,
            node_dim: 2,
            edge_dim: 1,
        })
        .unwrap();
        let triples: Vec<Triple> = g
            .ids()
            .map(|v| Triple {
                target: v,
                label: Label::Class((v % 2) as u32),
                gf: khop_oracle(&g, v, 2),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.triples");
        write_triples(&path, &triples).unwrap();
        let back = read_triples(&path).unwrap();
        assert_eq!(back, triples);

        // Round-trip again for byte stability.
        let path2 = dir.path().join("again.triples");
        write_triples(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn triple_target_mismatch_rejected() {
        let g = generate_synthetic(&SyntheticSpec {
            n: 4,
            model: SyntheticModel::Path,
            seed: 7,
            node_dim: 1,
            edge_dim: 0,
        })
        .unwrap();
        let gf = khop_oracle(&g, 1, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.triples");
        std::fs::write(&path, format!("2\t0\t{}\n", gf.to_escaped_line())).unwrap();
        assert!(matches!(
            read_triples(&path),
            Err(GraphError::SchemaError(_))
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let ds = synth_task(&SynthTaskSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.graph.node_count(), ds.graph.node_count());
        assert_eq!(back.graph.edge_count(), ds.graph.edge_count());
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.split, ds.split);
    }

    #[test]
    fn synth_task_is_homophilic_and_split() {
        let ds = synth_task(&SynthTaskSpec {
            n: 300,
            classes: 3,
            ..Default::default()
        })
        .unwrap();
        let mut intra = 0usize;
        let mut total = 0usize;
        for e in ds.graph.edges() {
            total += 1;
            if ds.labels[&e.src] == ds.labels[&e.dst] {
                intra += 1;
            }
        }
        assert!(intra * 10 > total * 6, "expected mostly intra-class edges");
        let train = ds.split.values().filter(|s| **s == Split::Train).count();
        assert!(train > 100);
    }
}
