//! Batch assembly: merge a list of training triples into one set of
//! matrices. Overlapping subgraphs share rows (deduplicated by node id,
//! rows in ascending id order), the adjacency is sorted by destination
//! row, and per-layer pruned adjacencies drop every row whose embedding
//! cannot reach a target within the remaining layers.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::sparse::{AdjEntry, SparseAdj};
use super::{NnError, Scalar};
use crate::data::{Label, Triple};
use crate::graph::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub enum BatchLabels {
    Unlabeled,
    Classes(Vec<u32>),
    /// Positive class sets per sample (multi-label).
    Multi(Vec<Vec<u32>>),
}

#[derive(Debug, Clone)]
pub struct VectorizedBatch<T> {
    pub hop: u32,
    pub adj: SparseAdj<T>,
    pub x: Array2<T>,
    /// Edge features aligned with `adj` entries.
    pub e: Array2<T>,
    /// Target row per sample, in triple order (duplicates allowed).
    pub targets: Vec<usize>,
    pub labels: BatchLabels,
    /// Row to node id.
    pub node_ids: Vec<NodeId>,
    pub row_index: BTreeMap<NodeId, usize>,
    /// BFS distance from the nearest target row, following in-edges
    /// backward; u32::MAX when unreachable.
    pub row_dist: Vec<u32>,
    pub pruned: Option<Vec<SparseAdj<T>>>,
}

/// Multi-source reverse BFS over the adjacency: distance 0 at targets, and
/// each entry (dst, src) extends a path by one hop from dst to src.
fn target_distances<T: Scalar>(adj: &SparseAdj<T>, targets: &[usize]) -> Vec<u32> {
    let mut dist = vec![u32::MAX; adj.rows()];
    let mut frontier: Vec<usize> = Vec::new();
    for &t in targets {
        if dist[t] != 0 {
            dist[t] = 0;
            frontier.push(t);
        }
    }
    frontier.sort_unstable();
    let mut d = 0u32;
    while !frontier.is_empty() {
        d += 1;
        let mut next = Vec::new();
        for &row in &frontier {
            for e in adj.row_entries(row) {
                let s = e.src as usize;
                if dist[s] == u32::MAX {
                    dist[s] = d;
                    next.push(s);
                }
            }
        }
        next.sort_unstable();
        next.dedup();
        frontier = next;
    }
    dist
}

/// Merges triples into one batch. All subgraphs must share the hop count
/// and feature dimensions; shared nodes collapse into one row.
pub fn vectorize(triples: &[Triple]) -> Result<VectorizedBatch<f32>, NnError> {
    if triples.is_empty() {
        return Err(NnError::SchemaError("empty batch".into()));
    }
    let hop = triples[0].gf.hop;
    let node_dim = triples[0]
        .gf
        .nodes
        .first()
        .map_or(0, |n| n.features.len());

    let mut node_feats: BTreeMap<NodeId, &[f32]> = BTreeMap::new();
    let mut edge_recs: BTreeMap<(NodeId, NodeId), &crate::graph::EdgeRecord> = BTreeMap::new();
    let mut edge_dim: Option<usize> = None;
    for t in triples {
        if t.gf.hop != hop {
            return Err(NnError::SchemaError(format!(
                "mixed hop counts in batch: {} vs {hop}",
                t.gf.hop
            )));
        }
        for n in &t.gf.nodes {
            if n.features.len() != node_dim {
                return Err(NnError::SchemaError(format!(
                    "node {} has {} features, expected {node_dim}",
                    n.id,
                    n.features.len()
                )));
            }
            if let Some(prev) = node_feats.insert(n.id, &n.features) {
                if prev != n.features.as_slice() {
                    return Err(NnError::SchemaError(format!(
                        "node {} appears with conflicting features",
                        n.id
                    )));
                }
            }
        }
        for e in &t.gf.edges {
            let d = *edge_dim.get_or_insert(e.features.len());
            if e.features.len() != d {
                return Err(NnError::SchemaError(format!(
                    "edge {}->{} has {} features, expected {d}",
                    e.src,
                    e.dst,
                    e.features.len()
                )));
            }
            edge_recs.insert((e.dst, e.src), e);
        }
    }

    let node_ids: Vec<NodeId> = node_feats.keys().copied().collect();
    let row_index: BTreeMap<NodeId, usize> = node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, i))
        .collect();
    let mut x = Array2::<f32>::zeros((node_ids.len(), node_dim));
    for (i, id) in node_ids.iter().enumerate() {
        for (j, v) in node_feats[id].iter().enumerate() {
            x[[i, j]] = *v;
        }
    }

    let edge_dim = edge_dim.unwrap_or(0);
    let mut entries = Vec::with_capacity(edge_recs.len());
    let mut e = Array2::<f32>::zeros((edge_recs.len(), edge_dim));
    for (i, ((dst, src), rec)) in edge_recs.iter().enumerate() {
        entries.push(AdjEntry {
            dst: row_index[dst] as u32,
            src: row_index[src] as u32,
            weight: rec.weight,
        });
        for (j, v) in rec.features.iter().enumerate() {
            e[[i, j]] = *v;
        }
    }
    // (dst, src) id order maps to (dst_row, src_row) order because rows are
    // assigned in ascending id order.
    let adj = SparseAdj::new(node_ids.len(), entries)?;

    let targets: Vec<usize> = triples.iter().map(|t| row_index[&t.target]).collect();

    let mut has_class = false;
    let mut has_multi = false;
    let mut has_unlabeled = false;
    for t in triples {
        match &t.label {
            Label::Unlabeled => has_unlabeled = true,
            Label::Class(_) => has_class = true,
            Label::Multi(_) => has_multi = true,
        }
    }
    let labels = if has_unlabeled {
        if has_class || has_multi {
            return Err(NnError::SchemaError(
                "batch mixes labeled and unlabeled samples".into(),
            ));
        }
        BatchLabels::Unlabeled
    } else if has_multi {
        // Single-class labels coerce into singleton sets.
        BatchLabels::Multi(
            triples
                .iter()
                .map(|t| match &t.label {
                    Label::Class(c) => vec![*c],
                    Label::Multi(cs) => cs.clone(),
                    Label::Unlabeled => unreachable!(),
                })
                .collect(),
        )
    } else {
        BatchLabels::Classes(
            triples
                .iter()
                .map(|t| match &t.label {
                    Label::Class(c) => *c,
                    _ => unreachable!(),
                })
                .collect(),
        )
    };

    let row_dist = target_distances(&adj, &targets);
    Ok(VectorizedBatch {
        hop,
        adj,
        x,
        e,
        targets,
        labels,
        node_ids,
        row_index,
        row_dist,
        pruned: None,
    })
}

/// Per-layer pruning: the layer producing the (k+1)-th embedding keeps only
/// entries whose destination row sits within K-(k+1) hops of a target, so
/// embeddings that cannot reach any target are never computed. The final
/// layer keeps target rows only.
pub fn prune_adj<T: Scalar>(
    adj: &SparseAdj<T>,
    targets: &[usize],
    k: u32,
) -> Result<Vec<SparseAdj<T>>, NnError> {
    let dist = target_distances(adj, targets);
    prune_with_distances(adj, &dist, k)
}

fn prune_with_distances<T: Scalar>(
    adj: &SparseAdj<T>,
    dist: &[u32],
    k: u32,
) -> Result<Vec<SparseAdj<T>>, NnError> {
    let mut out = Vec::with_capacity(k as usize);
    for layer in 0..k {
        let bound = k - layer - 1;
        let entries: Vec<AdjEntry<T>> = adj
            .entries()
            .iter()
            .filter(|e| dist[e.dst as usize] <= bound)
            .copied()
            .collect();
        out.push(SparseAdj::new(adj.rows(), entries)?);
    }
    Ok(out)
}

impl<T: Scalar> VectorizedBatch<T> {
    /// Fills `pruned` with the K per-layer adjacencies.
    pub fn prune(&mut self) -> Result<(), NnError> {
        self.pruned = Some(prune_with_distances(&self.adj, &self.row_dist, self.hop)?);
        Ok(())
    }

    /// Rows whose embedding the given layer must produce: destinations
    /// within K-(layer+1) hops of a target.
    pub fn active_rows(&self, layer: u32) -> Vec<bool> {
        let bound = self.hop.saturating_sub(layer + 1);
        self.row_dist.iter().map(|&d| d <= bound).collect()
    }

    pub fn cast<U: Scalar>(&self) -> VectorizedBatch<U> {
        VectorizedBatch {
            hop: self.hop,
            adj: self.adj.cast(),
            x: self.x.mapv(|v| U::from_f64(v.as_f64())),
            e: self.e.mapv(|v| U::from_f64(v.as_f64())),
            targets: self.targets.clone(),
            labels: self.labels.clone(),
            node_ids: self.node_ids.clone(),
            row_index: self.row_index.clone(),
            row_dist: self.row_dist.clone(),
            pruned: self
                .pruned
                .as_ref()
                .map(|v| v.iter().map(|a| a.cast()).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::flat::khop_oracle;
    use crate::graph::{generate_synthetic, SyntheticModel, SyntheticSpec};

    fn g_toy() -> crate::graph::Graph {
        generate_synthetic(&SyntheticSpec {
            n: 4,
            model: SyntheticModel::Path,
            seed: 7,
            node_dim: 1,
            edge_dim: 0,
        })
        .unwrap()
    }

    fn triple(g: &crate::graph::Graph, v: NodeId, k: u32) -> Triple {
        Triple {
            target: v,
            label: Label::Class(0),
            gf: khop_oracle(g, v, k),
        }
    }

    #[test]
    fn single_triple_g_toy() {
        let g = g_toy();
        let b = vectorize(&[triple(&g, 0, 2)]).unwrap();
        assert_eq!(b.x.nrows(), 3);
        assert_eq!(b.adj.len(), 2);
        assert_eq!(b.targets, vec![0]);
        assert_eq!(b.node_ids, vec![0, 1, 2]);
    }

    #[test]
    fn disjoint_subgraphs_sum_rows() {
        let g = g_toy();
        // 0 with K=1 covers {0,1}; 3 with K=1 covers {3} plus in-neighbors
        // of 3 (none), so rows = 2 + 1.
        let b = vectorize(&[triple(&g, 0, 1), triple(&g, 3, 1)]).unwrap();
        assert_eq!(b.x.nrows(), 3);
    }

    #[test]
    fn overlapping_subgraphs_share_rows() {
        let g = g_toy();
        let b = vectorize(&[triple(&g, 0, 1), triple(&g, 1, 1)]).unwrap();
        assert_eq!(b.x.nrows(), 3); // {0,1} and {1,2} share node 1
        assert_eq!(b.targets, vec![0, 1]);
    }

    #[test]
    fn mixed_hops_rejected() {
        let g = g_toy();
        let r = vectorize(&[triple(&g, 0, 1), triple(&g, 1, 2)]);
        assert!(matches!(r, Err(NnError::SchemaError(_))));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let g = g_toy();
        let mut t = triple(&g, 0, 1);
        t.gf.nodes[0].features.push(9.0);
        let r = vectorize(&[t]);
        assert!(matches!(r, Err(NnError::SchemaError(_))));
    }

    #[test]
    fn prune_g_toy_two_hops() {
        let g = g_toy();
        let mut b = vectorize(&[triple(&g, 0, 2)]).unwrap();
        b.prune().unwrap();
        let pruned = b.pruned.as_ref().unwrap();
        let layer1: Vec<(u32, u32)> = pruned[0].entries().iter().map(|e| (e.dst, e.src)).collect();
        let layer2: Vec<(u32, u32)> = pruned[1].entries().iter().map(|e| (e.dst, e.src)).collect();
        // Rows: 0, 1, 2. Layer 1 keeps 1->0 and 2->1; layer 2 keeps 1->0.
        assert_eq!(layer1, vec![(0, 1), (1, 2)]);
        assert_eq!(layer2, vec![(0, 1)]);
    }

    #[test]
    fn prune_single_layer_targets_only() {
        let g = generate_synthetic(&SyntheticSpec {
            n: 30,
            model: SyntheticModel::PowerLaw,
            seed: 5,
            node_dim: 2,
            edge_dim: 0,
        })
        .unwrap();
        let triples: Vec<Triple> = [3u64, 8].iter().map(|&v| triple(&g, v, 1)).collect();
        let b = vectorize(&triples).unwrap();
        let pruned = prune_adj(&b.adj, &b.targets, 1).unwrap();
        for e in pruned[0].entries() {
            assert!(b.targets.contains(&(e.dst as usize)));
        }
    }

    #[test]
    fn prune_all_targets_removes_nothing_at_layer_one() {
        let g = g_toy();
        let triples: Vec<Triple> = g.ids().map(|v| triple(&g, v, 2)).collect();
        let mut b = vectorize(&triples).unwrap();
        b.prune().unwrap();
        let pruned = b.pruned.as_ref().unwrap();
        assert_eq!(pruned[0].len(), b.adj.len());
    }

    #[test]
    fn pruned_entries_subset_of_full() {
        let g = generate_synthetic(&SyntheticSpec {
            n: 50,
            model: SyntheticModel::PowerLaw,
            seed: 11,
            node_dim: 2,
            edge_dim: 0,
        })
        .unwrap()
        .symmetrize();
        let mut b = vectorize(&[triple(&g, 0, 3)]).unwrap();
        b.prune().unwrap();
        let full: std::collections::BTreeSet<(u32, u32)> =
            b.adj.entries().iter().map(|e| (e.dst, e.src)).collect();
        for layer in b.pruned.as_ref().unwrap() {
            for e in layer.entries() {
                assert!(full.contains(&(e.dst, e.src)));
            }
        }
    }
}
